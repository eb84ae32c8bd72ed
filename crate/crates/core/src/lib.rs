//! Few-shot node classification by prototype-guided meta-learning on graphs.

pub mod adcore;
pub mod encoder;
pub mod episodes;
pub mod graph;
pub mod harness;
pub mod metalearner;
