// `!(a < b)` comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod eki;
pub mod error;
pub mod gp;
pub mod io;
pub mod linalg;
pub mod mcmc;
pub mod model;
pub mod noise;
pub mod params;
pub mod pipeline;
pub mod predict;
pub mod seed;
