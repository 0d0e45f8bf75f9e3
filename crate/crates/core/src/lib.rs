//! Local pixel-correlation kernels estimated by EM, used as features for
//! telling camera images from GAN output.

// `!(x >= lo)` checks are written that way so NaN fails them too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classify;
pub mod em;
pub mod features;
pub mod harness;
pub mod imaging;
pub mod synth;
