pub mod codeswitch;
pub mod contrastive;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod numcore;
pub mod projection;
pub mod seeding;
pub mod trainer;

pub use error::{Error, Result};
