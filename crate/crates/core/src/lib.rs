pub mod data;
pub mod eval;
pub mod graph;
pub mod mnode;
pub mod nn;
pub mod reduce;
pub mod train;
