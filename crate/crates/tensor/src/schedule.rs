//! Learning-rate schedules.

use crate::error::{arg_err, Result};

/// Cosine annealing from `lr0` at `t = 0` to `lr_min` at `t = total`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    if total == 0 {
        return arg_err("cosine_lr", "total steps must be positive");
    }
    if t > total {
        return arg_err("cosine_lr", format!("step {t} beyond total {total}"));
    }
    let frac = t as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Reduce-on-plateau tracker for a metric that should decrease.
///
/// After `patience` consecutive epochs without a relative improvement of at
/// least `threshold` over the best value seen, the multiplier is scaled by
/// `factor` and the counter resets.
#[derive(Debug, Clone)]
pub struct Plateau {
    patience: usize,
    factor: f64,
    threshold: f64,
    best: Option<f64>,
    bad_epochs: usize,
    multiplier: f64,
    reductions: usize,
}

impl Plateau {
    pub fn new(patience: usize, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor < 1.0) {
            return arg_err("plateau", format!("factor {factor} outside (0, 1)"));
        }
        Ok(Self {
            patience,
            factor,
            threshold: 1e-4,
            best: None,
            bad_epochs: 0,
            multiplier: 1.0,
            reductions: 0,
        })
    }

    /// Feeds one epoch's metric; returns the current lr multiplier.
    pub fn observe(&mut self, metric: f64) -> f64 {
        let improved = match self.best {
            None => true,
            Some(best) => metric < best * (1.0 - self.threshold.copysign(best)),
        };
        if improved {
            self.best = Some(metric);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.multiplier *= self.factor;
                self.reductions += 1;
                self.bad_epochs = 0;
            }
        }
        self.multiplier
    }

    pub fn multiplier(&self) -> f64 {
        self.multiplier
    }

    pub fn reductions(&self) -> usize {
        self.reductions
    }
}

/// Multiplier after each epoch of `history`.
pub fn plateau_lr(history: &[f64], patience: usize, factor: f64) -> Result<Vec<f64>> {
    let mut p = Plateau::new(patience, factor)?;
    Ok(history.iter().map(|&m| p.observe(m)).collect())
}
