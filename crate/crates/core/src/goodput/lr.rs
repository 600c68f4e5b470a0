//! Learning-rate scaling plug-ins.
//!
//! Rules compute a multiplier `lambda = SCALE_LR(M0, M)` when the total
//! batch size changes. Nothing here applies the learning rate anywhere; the
//! multiplier is reported so a training integration could consume it.

use serde::{Deserialize, Serialize};

use super::GoodputError;
use crate::scalar::Real;

/// How to rescale the learning rate when the batch grows from `M0` to `M`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrScaleRule<F> {
    /// lambda = M / M0.
    Linear,
    /// lambda = sqrt(M / M0), common for Adam-family optimizers.
    SquareRoot,
    /// Gain-based rule driven by the gradient noise scale:
    /// lambda = (phi/M0 + 1) / (phi/M + 1).
    AdaScale { pgns: Option<F> },
}

/// Evaluate a scaling rule; every rule satisfies `scale_lr(rule, M0, M0) = 1`.
pub fn scale_lr<F: Real>(
    rule: &LrScaleRule<F>,
    init_batch: u64,
    total_batch: u64,
) -> Result<F, GoodputError> {
    if total_batch < init_batch {
        return Err(GoodputError::BelowInitialBatch {
            total: total_batch,
            init: init_batch,
        });
    }
    let m0 = F::from_u64_lossy(init_batch.max(1));
    let m = F::from_u64_lossy(total_batch);
    match rule {
        LrScaleRule::Linear => Ok(m / m0),
        LrScaleRule::SquareRoot => Ok((m / m0).sqrt()),
        LrScaleRule::AdaScale { pgns } => {
            let phi = pgns.ok_or(GoodputError::MissingPgns)?;
            Ok((phi / m0 + F::one()) / (phi / m + F::one()))
        }
    }
}
