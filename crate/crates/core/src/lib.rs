//! Deterministic discrete-event simulator of real-time media transport over
//! impaired links.

pub mod bridge;
pub mod error;
pub mod feedback;
pub mod media;
pub mod metrics;
pub mod network;
pub mod packetizer;
pub mod rate_control;
pub mod receiver;
pub mod scenario;
pub mod session;
pub mod reliability;
pub mod sim;

pub use error::{ConfigError, Error, Result};
pub use sim::SimTime;
