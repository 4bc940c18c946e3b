pub mod fixedpoint;
pub mod front;
pub mod mem;
pub mod nn;
pub mod perf;
pub mod sparse;
