//! Hybrid inference with low-rank weight splitting between a model owner
//! (Charlie) and an untrusted edge device (David).

pub mod checkpoint;
pub mod costmodel;
pub mod decompose;
pub mod linalg;
pub mod models;
pub mod protocol;
pub mod qforward;
pub mod ring;
