//! Live operator link for the simulator: framed JSON over TCP, a
//! latest-wins command mailbox and a bounded state stream.

pub mod mailbox;
pub mod protocol;
pub mod server;

pub use mailbox::{CommandMailbox, OutOfSequence, StateOutbox};
pub use protocol::{
    decode, encode, read_frame, write_frame, CommandMessage, DecodeError, Decoded, GoalWeight, GraspModeRequest,
    Message, SolverStats, StateMessage, PROTOCOL_VERSION,
};
pub use server::{serve, BridgeConfig, BridgeHandle, BridgeServer};
