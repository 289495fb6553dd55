//! Synchronous data-parallel training over a parameter server.

pub mod codec;
pub mod local;
pub mod protocol;
pub mod server;
pub mod worker;
pub mod ws;

pub use codec::{dequantize_q8, quantize_q8, Codec};
pub use local::{run_local, ClusterReport};
pub use protocol::{Frame, GradientPacket, Hello, RoundFrame, Split, PROTOCOL_VERSION};
pub use server::{split_ranges, DataMode, Outgoing, ParameterServer, Receipt, ServerConfig, ServerStats};
pub use worker::Worker;
pub use ws::{fetch_spec, run_worker, serve, ServeOptions, SpecDoc, WorkerOptions, WorkerReport};
