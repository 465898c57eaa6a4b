//! Length-extrapolation laboratory: positional-embedding schemes, a minimal
//! trainable decoder-only transformer with reverse-mode autodiff, the
//! varying-context perplexity protocol, cache-window inference, and
//! gradient-based receptive-field measurement.

pub mod error;
pub mod kernel;
pub mod parallel;
pub mod model;
pub mod posenc;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use posenc::PositionalScheme;
pub use tape::{NodeId, Tape};
pub use tensor::{Mask, Tensor};
