//! A dataflow rewriting compiler for heterogeneous CGRAs.
//!
//! The pipeline: parse a loop-kernel DFG, rewrite it so every operation is
//! supported by the target architecture (greedy first, equality saturation
//! as fallback), then place and modulo-schedule it onto the PE grid and
//! report the achieved initiation interval.  A ceiling estimator measures
//! how often the heuristic pipeline keeps up with an exhaustive one on
//! enumerated program spaces.

pub mod arch;
pub mod ceiling;
pub mod dfg;
pub mod egraph;
pub mod greedy;
pub mod harness;
pub mod hybrid;
pub mod mapper;
pub mod rules;
