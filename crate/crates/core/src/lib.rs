//! Dynamic anchor-box DETR at desk scale.
//!
//! The crate builds everything from a small `f64` tensor engine upward:
//!
//! * [`tensor`]: dense tensors, a reverse-mode tape and a finite-difference oracle.
//! * [`pe`]: temperature-controlled sinusoidal encodings of scalars, points and anchors.
//! * [`attention`]: multi-head attention plus dual-query construction and
//!   width/height-modulated positional logits.
//! * [`decoder`]: the anchor-refining decoder stack and its per-layer trace.
//! * [`loss`]: Hungarian matching, focal, L1 and GIoU losses with deep supervision.
//! * [`toy`]: synthetic rectangle scenes, a patch encoder, training and AP evaluation.

pub mod attention;
pub mod checkpoint;
pub mod decoder;
pub mod error;
pub mod io;
pub mod loss;
pub mod nn;
pub mod pe;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
pub use tensor::{ParamId, ParamStore, Tape, Tensor, Var};
