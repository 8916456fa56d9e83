mod check;
mod tape;

pub use check::{central_difference, grad_check, relative_error, GradCheckReport};
pub use tape::{BatchStats, Tape, Var, BN_EPS};
