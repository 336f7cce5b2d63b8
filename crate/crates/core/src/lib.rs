//! Nyström approximation of softmax attention with row-max stabilization and
//! an iterative pseudoinverse, plus the exact reference it is measured against.

pub mod analysis;
pub mod attention;
pub mod bench;
pub mod error;
pub mod fixtures;
pub mod io;
pub mod landmarks;
pub mod linalg;
pub mod nystrom;
pub mod pinv;
pub mod validate;

#[cfg(test)]
mod testutil;

pub use attention::{attention_softmax, AttentionInputs, MhsaConfig};
pub use error::{Error, Result};
pub use landmarks::{ExplicitLandmarks, LandmarkSet, LandmarkStrategy};
pub use linalg::{Dtype, Matrix, Real};
pub use nystrom::{pnp_nystra, NystraConfig};
pub use pinv::{iterative_pinv, PinvConfig};
