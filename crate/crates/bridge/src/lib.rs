//! WebSocket bridge between operator clients and the mission loop, plus the
//! file formats that share its message schema: operator scripts and metrics.

pub mod metrics_io;
pub mod protocol;
pub mod rle;
pub mod script;
pub mod server;
pub mod session;

pub use metrics_io::{read_metrics, write_metrics, MetricsIoError};
pub use protocol::{parse_inbound, Envelope, Inbound, InboundMessage, Outbound, ProtocolError, PROTOCOL_VERSION};
pub use script::{parse_script, ScriptError};
pub use server::{serve, start, BridgeError, RunningServer, ServeConfig};
pub use session::{Session, SessionConfig};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/protocol.md")]
struct BookProtocol;
