//! Deterministic synthetic traffic series for desk-scale experiments.
//!
//! The generator is simple enough to recompute independently in a test:
//!
//! ```text
//! x[t, n] = base + 2n  +  amp * sin(2*pi*t/288 + 2*pi*n/N)  +  s[t, n]
//! s[0, .] = 0
//! s[t, n] = ar * mix[n] + noise_amp * eps[t, n]
//! mix[n]  = (1 - coupling) * s[t-1, n]
//!           + coupling * (s[t-1, n-1] + s[t-1, n+1]) / 2     (ring indices)
//! ```
//!
//! with `eps` drawn row-major (over t, then n) from the `"synthetic"` fork
//! of a splitmix64 stream. `noise_amp = 0` makes the series exactly
//! 288-periodic; `coupling = 0` makes the per-node innovations independent.

use super::RawSeries;
use crate::rng::Rng;

/// Knobs of the synthetic generator; defaults mimic a small sensor grid.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub nodes: usize,
    pub steps: usize,
    pub seed: u64,
    pub base: f64,
    pub amp: f64,
    pub ar: f64,
    pub coupling: f64,
    pub noise_amp: f64,
}

impl SyntheticSpec {
    pub fn new(nodes: usize, steps: usize, seed: u64) -> Self {
        SyntheticSpec {
            nodes,
            steps,
            seed,
            base: 50.0,
            amp: 20.0,
            ar: 0.9,
            coupling: 0.3,
            noise_amp: 3.0,
        }
    }

    /// Generate the series. The virtual clock starts on a Monday at 00:00.
    pub fn generate(&self) -> RawSeries {
        assert!(self.nodes >= 1, "synthetic series needs at least one node");
        let (n, t_total) = (self.nodes, self.steps);
        let mut rng = Rng::new(self.seed).fork("synthetic");
        let mut values = vec![0f32; t_total * n];
        let mut s_prev = vec![0f64; n];
        let mut s_cur = vec![0f64; n];
        let two_pi = std::f64::consts::TAU;
        for t in 0..t_total {
            if t > 0 {
                for i in 0..n {
                    let left = s_prev[(i + n - 1) % n];
                    let right = s_prev[(i + 1) % n];
                    let mix = (1.0 - self.coupling) * s_prev[i]
                        + self.coupling * 0.5 * (left + right);
                    s_cur[i] = self.ar * mix + self.noise_amp * rng.normal();
                }
            } else {
                s_cur.fill(0.0);
            }
            for i in 0..n {
                let daily = self.amp
                    * (two_pi * (t % 288) as f64 / 288.0 + two_pi * i as f64 / n as f64).sin();
                values[t * n + i] = (self.base + 2.0 * i as f64 + daily + s_cur[i]) as f32;
            }
            std::mem::swap(&mut s_prev, &mut s_cur);
        }
        RawSeries {
            values,
            t_total,
            num_nodes: n,
            start_dow: 0,
            start_tod_slot: 0,
            interval_min: 5,
        }
    }
}

/// Default-spec synthetic series (see [`SyntheticSpec`]).
pub fn make_synthetic(nodes: usize, steps: usize, seed: u64) -> RawSeries {
    SyntheticSpec::new(nodes, steps, seed).generate()
}
