//! Interactive agent sessions over HTTP.
//!
//! Each session owns a scene and an append-only event log. Subscribers read
//! the log by sequence number, so a replay and a live stream are the same
//! sequence.

pub mod api;
pub mod log;
pub mod session;

pub use api::{router, serve};
pub use log::{EventLog, Head};
pub use session::{CreateRequest, Descriptor, Service, ServiceConfig, ServiceError, Session, SessionState};
