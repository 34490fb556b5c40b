// `!(x > 0.0)` is used on purpose so NaN is rejected with the bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod archive;
pub mod config;
pub mod data;
pub mod exact_gp;
pub mod grid;
pub mod io;
pub mod kernel;
pub mod pipeline;
pub mod posterior;
pub mod report;
pub mod sdd;
pub mod tensor;
pub mod wavelet;
pub mod wno;
