//! Gradient-noise-scale estimation from gradient statistics.
//!
//! Two estimators are provided. The two-scale estimator compares squared
//! gradient norms measured at two batch sizes, exploiting
//! E|g_hat_B|^2 = |g|^2 + tr(Sigma)/B. The differenced estimator is used when
//! only one gradient stream is available: under a slowly-varying mean, the
//! squared difference of consecutive estimates is ~ 2 tr(Sigma)/B.

use super::FitError;

/// Denominator floor in squared-norm units.
pub const SQ_NORM_EPS: f64 = 1e-12;

/// Reports the raw estimators are smoothed over (exponential half-life).
pub const PGNS_HALF_LIFE_REPORTS: f64 = 10.0;

/// Squared gradient-estimate norms measured at two batch sizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientStats {
    pub sq_norm_small: f64,
    pub sq_norm_big: f64,
    pub batch_small: u64,
    pub batch_big: u64,
}

/// Two-scale noise estimate: `Ok(None)` when the signal estimate is not
/// positive (statistically possible on noisy inputs).
pub fn pgns_two_scale(stats: &GradientStats) -> Result<Option<f64>, FitError> {
    if stats.batch_big <= stats.batch_small || stats.batch_small < 1 {
        return Err(FitError::DegenerateBatchSizes {
            small: stats.batch_small,
            big: stats.batch_big,
        });
    }
    let b_small = stats.batch_small as f64;
    let b_big = stats.batch_big as f64;
    let g_sq = (b_big * stats.sq_norm_big - b_small * stats.sq_norm_small) / (b_big - b_small);
    let tr_sigma = (stats.sq_norm_small - stats.sq_norm_big) / (1.0 / b_small - 1.0 / b_big);
    if g_sq <= 0.0 || !g_sq.is_finite() {
        return Ok(None);
    }
    Ok(Some((tr_sigma / g_sq).max(0.0)))
}

/// Differenced noise estimate from two consecutive gradient estimates at the
/// same batch size. Degenerate inputs clamp rather than error.
pub fn pgns_differenced(
    prev_sq_norm: f64,
    curr_sq_norm: f64,
    diff_sq_norm: f64,
    batch: u64,
) -> f64 {
    let var_per_batch = diff_sq_norm / 2.0; // ~ tr(Sigma) / batch
    let g_sq = ((prev_sq_norm + curr_sq_norm) / 2.0 - var_per_batch).max(SQ_NORM_EPS);
    (batch.max(1) as f64 * var_per_batch / g_sq).max(0.0)
}

/// Smoothed noise-scale state for one job: raw estimates are blended with an
/// exponential moving average, and reports without a usable signal estimate
/// fall back to the previous smoothed value.
#[derive(Debug, Clone, Default)]
pub struct PgnsTracker {
    smoothed: Option<f64>,
}

impl PgnsTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Latest smoothed estimate, if any report has landed yet.
    pub fn value(&self) -> Option<f64> {
        self.smoothed
    }

    pub fn update_two_scale(&mut self, stats: &GradientStats) -> Result<f64, FitError> {
        match pgns_two_scale(stats)? {
            Some(raw) => Ok(self.blend(raw)),
            None => Ok(self.smoothed.unwrap_or(0.0)),
        }
    }

    pub fn update_differenced(
        &mut self,
        prev_sq_norm: f64,
        curr_sq_norm: f64,
        diff_sq_norm: f64,
        batch: u64,
    ) -> f64 {
        let raw = pgns_differenced(prev_sq_norm, curr_sq_norm, diff_sq_norm, batch);
        self.blend(raw)
    }

    /// Inject a raw estimate directly (used when replaying measured noise).
    pub fn update_raw(&mut self, raw: f64) -> f64 {
        self.blend(raw.max(0.0))
    }

    fn blend(&mut self, raw: f64) -> f64 {
        let decay = 0.5_f64.powf(1.0 / PGNS_HALF_LIFE_REPORTS);
        let next = match self.smoothed {
            Some(prev) => decay * prev + (1.0 - decay) * raw,
            None => raw,
        };
        self.smoothed = Some(next);
        next
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn noiseless_gradients_have_zero_scale() {
        let stats = GradientStats {
            sq_norm_small: 4.0,
            sq_norm_big: 4.0,
            batch_small: 32,
            batch_big: 256,
        };
        assert_eq!(pgns_two_scale(&stats).unwrap(), Some(0.0));
    }

    #[test]
    fn recovers_analytic_expectations_exactly() {
        // E|g_hat_B|^2 = |g|^2 + tr(Sigma)/B with |g|^2 = 2, tr(Sigma) = 1000.
        let (g_sq, tr_sigma) = (2.0, 1000.0);
        for (bs, bb) in [(8u64, 64u64), (32, 256), (100, 101)] {
            let stats = GradientStats {
                sq_norm_small: g_sq + tr_sigma / bs as f64,
                sq_norm_big: g_sq + tr_sigma / bb as f64,
                batch_small: bs,
                batch_big: bb,
            };
            let phi = pgns_two_scale(&stats).unwrap().unwrap();
            assert_relative_eq!(phi, tr_sigma / g_sq, max_relative = 1e-9);
        }
    }

    #[test]
    fn scale_invariance() {
        let stats = GradientStats {
            sq_norm_small: 3.0 + 500.0 / 16.0,
            sq_norm_big: 3.0 + 500.0 / 128.0,
            batch_small: 16,
            batch_big: 128,
        };
        let phi = pgns_two_scale(&stats).unwrap().unwrap();
        let c = 7.5;
        let scaled = GradientStats {
            sq_norm_small: c * c * stats.sq_norm_small,
            sq_norm_big: c * c * stats.sq_norm_big,
            ..stats
        };
        let phi_scaled = pgns_two_scale(&scaled).unwrap().unwrap();
        assert_relative_eq!(phi, phi_scaled, max_relative = 1e-12);
    }

    #[test]
    fn equal_batches_error() {
        let stats = GradientStats {
            sq_norm_small: 1.0,
            sq_norm_big: 1.0,
            batch_small: 64,
            batch_big: 64,
        };
        assert!(pgns_two_scale(&stats).is_err());
    }

    #[test]
    fn negative_signal_reuses_previous_smoothed_value() {
        let mut tracker = PgnsTracker::new();
        let good = GradientStats {
            sq_norm_small: 2.0 + 100.0 / 10.0,
            sq_norm_big: 2.0 + 100.0 / 100.0,
            batch_small: 10,
            batch_big: 100,
        };
        let first = tracker.update_two_scale(&good).unwrap();
        assert!(first > 0.0);
        // Bigger norm at the bigger batch with a sign flip in the signal.
        let bad = GradientStats {
            sq_norm_small: 10.0,
            sq_norm_big: 0.01,
            batch_small: 10,
            batch_big: 100,
        };
        let fallback = tracker.update_two_scale(&bad).unwrap();
        assert_eq!(fallback, first);
    }

    #[test]
    fn differenced_edge_cases() {
        // Identical consecutive gradients: no noise.
        assert_eq!(pgns_differenced(5.0, 5.0, 0.0, 32), 0.0);
        // Pure-noise limit: signal clamps to the floor, phi is huge.
        let tr_over_b = 3.0;
        let phi = pgns_differenced(tr_over_b, tr_over_b, 2.0 * tr_over_b, 32);
        assert!(phi > 1e10);
    }
}
