//! Federated cross-domain recommendation with server-side semantic
//! clustering, client-side fine-grained semantic adaptation, and local
//! fine-tuning over semantic graphs.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod client;
pub mod config;
pub mod datamodel;
pub mod error;
pub mod eval;
pub mod fgsat;
pub mod finetune;
pub mod gradcheck;
pub mod pipeline;
pub mod seeding;
pub mod server;
pub mod tensor;

pub use error::{Error, ErrorKind, Result};
pub use tensor::{CsrMatrix, Matrix};
