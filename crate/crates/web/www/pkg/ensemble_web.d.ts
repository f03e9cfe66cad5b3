/* tslint:disable */
/* eslint-disable */

export class DyeEnsemble {
    free(): void;
    [Symbol.dispose](): void;
    advance(k: number): number;
    field(stat: string, timestep: number): Float64Array;
    constructor(n_sims: number, n_timesteps: number, seed: number);
    solidMask(): Uint8Array;
    readonly height: number;
    readonly members: number;
    readonly width: number;
}

/**
 * JSON calibration table for one distribution.
 */
export function calibrationTable(dist: string, alpha: number, n: number, repeats: number, seed: number): string;

/**
 * JSON with thinned estimate paths per exponent schedule.
 */
export function rmTrajectories(dist: string, alpha: number, n: number, n_traj: number, seed: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_dyeensemble_free: (a: number, b: number) => void;
    readonly calibrationTable: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly dyeensemble_advance: (a: number, b: number) => [number, number, number];
    readonly dyeensemble_field: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly dyeensemble_height: (a: number) => number;
    readonly dyeensemble_members: (a: number) => number;
    readonly dyeensemble_new: (a: number, b: number, c: number) => [number, number, number];
    readonly dyeensemble_solidMask: (a: number) => [number, number];
    readonly dyeensemble_width: (a: number) => number;
    readonly rmTrajectories: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
