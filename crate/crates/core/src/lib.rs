// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod arch;
pub mod costmodel;
pub mod detect;
pub mod quant;
pub mod search;
pub mod tensor;
