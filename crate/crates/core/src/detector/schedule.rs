//! Deterministic exploration time points after the warm-up window.
//!
//! Step `t > w` is an exploration step iff `floor((s + phase) r)` increments
//! at `s = t - w`, with rate `r = q^eta / w`. Any window of `n` steps then
//! holds either `floor(n r)` or `ceil(n r)` exploration steps; with `eta = 1`
//! and `q | w` the points are exactly `w / q` apart.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExplorationSchedule {
    w: usize,
    q: usize,
    eta: f64,
    phase: usize,
}

impl ExplorationSchedule {
    pub fn new(w: usize, q: usize, eta: f64, phase: usize) -> Result<Self> {
        if q == 0 || q >= w {
            return Err(Error::BadBudget { q, w });
        }
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(Error::InvalidConfig(format!("eta must lie in (0, 1], got {eta}")));
        }
        Ok(ExplorationSchedule {
            w,
            q,
            eta,
            phase: phase % w,
        })
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn phase(&self) -> usize {
        self.phase
    }

    fn level(&self, s: usize) -> u64 {
        let x = (s + self.phase) as u64;
        if self.eta == 1.0 {
            x * self.q as u64 / self.w as u64
        } else {
            let r = (self.q as f64).powf(self.eta) / self.w as f64;
            (x as f64 * r).floor() as u64
        }
    }

    /// Whether step `t` (1-based) is a scheduled exploration step. The warm-up
    /// steps `t <= w` are not part of the schedule.
    pub fn contains(&self, t: usize) -> bool {
        if t <= self.w {
            return false;
        }
        let s = t - self.w;
        self.level(s) > self.level(s - 1)
    }

    /// Number of scheduled steps in `(w, w + n]`.
    pub fn count(&self, n: usize) -> u64 {
        self.level(n) - self.level(0)
    }

    /// Integer form of the budget sandwich:
    /// `floor(n q^eta / w) <= count(n) <= ceil(n q / w)`.
    pub fn within_budget(&self, n: usize) -> bool {
        let c = self.count(n);
        let lo = (n as f64 * (self.q as f64).powf(self.eta) / self.w as f64 - 1e-9).floor().max(0.0) as u64;
        let hi = (n * self.q).div_ceil(self.w) as u64;
        lo <= c && c <= hi
    }
}

/// Draws a schedule with a uniformly random phase.
pub fn make_schedule<R: Rng + ?Sized>(
    w: usize,
    q: usize,
    eta: f64,
    rng: &mut R,
) -> Result<ExplorationSchedule> {
    if q == 0 || q >= w {
        return Err(Error::BadBudget { q, w });
    }
    let phase = rng.random_range(0..w);
    ExplorationSchedule::new(w, q, eta, phase)
}
