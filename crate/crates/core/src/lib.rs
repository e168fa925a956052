pub mod archio;
pub mod cost;
pub mod error;
pub mod opspace;
pub mod optim;
pub mod oracle;
pub mod parallel;
pub mod real;
pub mod screening;
pub mod search;
pub mod seeding;
pub mod selftest;
pub mod supernet;
pub mod tensor;
pub mod toytask;

pub use error::{Error, Result};
pub use real::Real;
