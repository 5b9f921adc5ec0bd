//! Inference worker boundary: protocol messages, the subprocess pool and
//! deterministic mocks.

pub mod mock;
pub mod pool;
pub mod protocol;

pub use mock::{mock_diarize, MockBackend};
pub use pool::{Ticket, WorkerPool, WorkerSpec, WORKER_LOG_ENV};
pub use protocol::{
    ErrorKind, Hello, InferenceBackend, ResponseStatus, Task, WorkerRequest, WorkerResponse,
    PROTOCOL,
};
