//! Reference oracles and a local HTTP stub for exercising remote backends.

pub mod oracles;
pub mod stub_server;

pub use oracles::{naive_peg_count, naive_return_to_go, naive_surrogate};
pub use stub_server::{chat_body, echo_body, Matcher, RecordedRequest, StubRoute, StubServer};
