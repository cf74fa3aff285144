#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod episodes;
pub mod label_adapter;
pub mod protonet;
pub mod qda;
pub mod trainer;
pub mod wordrep;
