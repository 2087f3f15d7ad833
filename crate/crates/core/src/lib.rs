#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments, clippy::type_complexity)]
//! Resonant KAM normal forms for perturbed Hamiltonians, semiclassical
//! spectrum prediction, and independent numerical checks.

pub mod error;
pub mod freqsets;
pub mod gevrey;
pub mod kam;
pub mod oracle;
pub mod quantize;
pub mod reduction;
pub mod scarring;
pub mod series;

pub use error::{Error, Result};
