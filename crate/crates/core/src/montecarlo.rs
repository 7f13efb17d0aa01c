//! Monte Carlo cross-check of `E Qⁿ f`.
//!
//! Under `μ∞` with Lebesgue conditioned family every coordinate other than
//! `x₀` is uniform, so `(E Qⁿ f)(x₀)` is the mean of `Qⁿ f` over windows
//! with `x₁, …, xₙ` drawn uniformly. Samples are split into a fixed number of
//! shards; shard `s` draws from ChaCha8 seeded with `seed ^ s`, and shard
//! statistics are merged in shard order, so results do not depend on thread
//! scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::akcoglu::{q_apply_pointwise, Coupling, Result, WindowPoint};
use crate::interval_space::PcFunction;
use crate::markov_ops::apply_operator;

pub const SHARDS: u64 = 16;

/// z-score above which a cell is flagged.
pub const Z_THRESHOLD: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleConfig {
    pub seed: u64,
    pub samples: usize,
    pub horizon: usize,
}

impl SampleConfig {
    pub fn new(seed: u64, samples: usize, horizon: usize) -> Self {
        assert!(samples >= 1, "need at least one sample");
        Self {
            seed,
            samples,
            horizon,
        }
    }

    fn shard_len(&self, shard: u64) -> usize {
        let base = self.samples / SHARDS as usize;
        let extra = (shard as usize) < self.samples % SHARDS as usize;
        base + usize::from(extra)
    }
}

fn shard_stream(cfg: SampleConfig, shard: u64, x0: f64) -> impl Iterator<Item = WindowPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ shard);
    (0..cfg.shard_len(shard)).map(move |_| {
        let mut coords = Vec::with_capacity(cfg.horizon + 1);
        coords.push(x0);
        coords.extend((0..cfg.horizon).map(|_| rng.random::<f64>()));
        WindowPoint::new(0, coords)
    })
}

/// All sample windows `(x₀, x₁, …, xₙ)`, shard by shard.
pub fn sample_window(cfg: SampleConfig, x0: f64) -> impl Iterator<Item = WindowPoint> {
    (0..SHARDS).flat_map(move |s| shard_stream(cfg, s, x0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub samples: usize,
}

/// Running mean and sum of squared deviations.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn merge(self, other: Self) -> Self {
        if other.n == 0.0 {
            return self;
        }
        if self.n == 0.0 {
            return other;
        }
        let n = self.n + other.n;
        let d = other.mean - self.mean;
        Self {
            n,
            mean: self.mean + d * other.n / n,
            m2: self.m2 + other.m2 + d * d * self.n * other.n / n,
        }
    }
}

/// Sample mean of `Qⁿ f` at `x₀` with its standard error.
pub fn mc_eqn(c: &Coupling, f: &PcFunction, cfg: SampleConfig, x0: f64) -> Result<McEstimate> {
    if cfg.horizon == 0 {
        let v = q_apply_pointwise(c, f, 0, &WindowPoint::new(0, vec![x0]))?;
        return Ok(McEstimate {
            estimate: v,
            stderr: 0.0,
            samples: cfg.samples,
        });
    }
    let shards: Vec<Result<Moments>> = (0..SHARDS)
        .into_par_iter()
        .map(|s| {
            let mut acc = Moments::default();
            for w in shard_stream(cfg, s, x0) {
                acc.push(q_apply_pointwise(c, f, cfg.horizon, &w)?);
            }
            Ok(acc)
        })
        .collect();
    let mut total = Moments::default();
    for s in shards {
        total = total.merge(s?);
    }
    let var = if total.n > 1.0 {
        total.m2 / (total.n - 1.0)
    } else {
        0.0
    };
    Ok(McEstimate {
        estimate: total.mean,
        stderr: (var / total.n).sqrt(),
        samples: cfg.samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellZ {
    pub cell: usize,
    pub x0: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub exact: f64,
    pub z: f64,
}

impl CellZ {
    pub fn flagged(&self) -> bool {
        self.z > Z_THRESHOLD
    }
}

fn z_score(diff: f64, stderr: f64) -> f64 {
    if stderr > 0.0 {
        diff / stderr
    } else if diff <= 1e-12 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Compares the estimate at each cell midpoint of `J₀` with `Tⁿ f` from the
/// coupling's operator.
pub fn compare_mc_exact(c: &Coupling, f: &PcFunction, cfg: SampleConfig) -> Result<Vec<CellZ>> {
    let exact = apply_operator(c.operator(), f, cfg.horizon)?;
    (0..c.dim())
        .map(|j| {
            let x0 = c.base().cell(j).midpoint();
            let est = mc_eqn(c, f, cfg, x0)?;
            let diff = (est.estimate - exact.value(j)).abs();
            Ok(CellZ {
                cell: j,
                x0,
                estimate: est.estimate,
                stderr: est.stderr,
                exact: exact.value(j),
                z: z_score(diff, est.stderr),
            })
        })
        .collect()
}

pub fn max_z(cells: &[CellZ]) -> f64 {
    cells.iter().map(|c| c.z).fold(0.0, f64::max)
}
