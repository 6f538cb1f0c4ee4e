//! The five subcommands. Each is a plain function over parsed
//! configuration so integration tests can drive them without spawning the
//! binary.

mod adapt;
mod compare;
mod evaluate;
mod gen_data;
mod train;

pub use adapt::{cmd_adapt, AdaptOutcome};
pub use compare::{cmd_compare, CompareOutcome};
pub use evaluate::{cmd_evaluate, EvalOutcome};
pub use gen_data::{cmd_gen_data, GenDataOutcome};
pub use train::{cmd_train, TrainOutcome};
