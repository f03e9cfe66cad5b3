//! Study orchestration: configuration, parameter sampling, job submission
//! and the fault-tolerance loop that keeps a study converging.

mod config;
mod params;
mod scheduler;
mod study;

pub use config::{
    CapChange, ConfigError, CrashSpec, FaultSection, LauncherSection, ServerSection, StatisticsSection, StudyConfig,
};
pub use params::{generate_parameter_sets, parameter_set, ParameterSet};
pub use scheduler::{
    Clock, HeartbeatMonitor, JobId, JobRole, JobSpec, JobStatus, LocalProcessScheduler, ManualClock, Scheduler,
    ServerHealth, SystemClock,
};
pub use study::{
    launch_study, spawn_heartbeat_listener, EventRecord, HeartbeatInbox, LaunchError, Launcher, LauncherState,
    SimRecord, SimStatus, StudyPaths, StudyReport, TimelinePoint, INJECTED_CRASH_EXIT,
};
