//! Wire protocol and static data redistribution between clients and server
//! ranks.

mod codec;
mod partition;

pub use codec::{
    decode_message, encode_message, read_message, write_message, Body, CodecError, DataChunk,
    Message, MessageKind, HEADER_LEN, MAGIC, MAX_BODY_LEN, PROTOCOL_VERSION,
};
pub use partition::{PartitionError, PartitionMap};
