//! User-attributable fingerprinting of a small generative autoencoder.
//!
//! Per-user bit fingerprints are folded into the decoder's weights through
//! per-channel modulation; a jointly trained decoding network recovers the
//! bits from generated images, and a distributor registry identifies users
//! via Hamming matching. Includes differentiable post-processing attacks for
//! robust training, secrecy and capacity evaluation harnesses, and a DWT/QIM
//! baseline watermarker.

pub mod error;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Var};

pub mod codec;
pub mod model;
pub mod params;
pub mod data;
pub mod fpnet;
pub mod attacks;
pub mod serialize;
pub mod train;
pub mod dwt;
pub mod registry;
pub mod eval;
