//! Segmentation-gated prototypical few-shot classification.
//!
//! A segmenter predicts a soft lesion mask, the mask gates the classifier's
//! input by pixel-wise multiplication, and a prototypical network classifies
//! the gated images. Both networks train jointly under
//! `L_total = L_seg + λ·L_cls`.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod explain;
pub mod fewshot;
pub mod fusion;
pub mod gemm;
pub mod gradcheck;
pub mod kv;
pub mod nets;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{Bound, Grads, ParamRegistry};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
