//! Session backend for the interactive needle trainer: a WebSocket at
//! `/session` drives one live needle per client, `GET /slice` serves image
//! slices.

pub mod protocol;
pub mod registry;
pub mod server;
pub mod session;
pub mod slice;

pub use registry::{Registry, VolumeEntry};
pub use server::{process_text, router, serve, serve_on};
pub use session::{TrainerError, TrainerSession};
