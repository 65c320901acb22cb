//! Self-distillation laboratory: a small autodiff tensor core, a toy vision
//! transformer, a momentum-teacher distillation engine, and the data/eval
//! machinery needed to train and probe it — self-contained, CPU-only, and
//! bitwise deterministic for a fixed seed.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod head;
pub mod image;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod schedule;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod views;
pub mod vit;

pub use error::{Error, Result};
pub use params::{BoundParams, ParamSet};
pub use scalar::{Dtype, Scalar};
pub use schedule::{Schedule, ScheduleKind};
pub use tape::{Tape, TensorId};
pub use tensor::Tensor;
