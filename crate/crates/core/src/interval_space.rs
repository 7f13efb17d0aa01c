//! Measure algebra on partitions of an interval `[0, total)`.
//!
//! A finite Borel space is represented by a [`WeightedPartition`]: an ordered
//! list of cells whose lengths are the cell measures. Functions and measures
//! are piecewise constant over such partitions, and maps between spaces are
//! piecewise-affine bijections of boxes ([`PwAffineBijection`]). Everything in
//! here is exact up to floating-point rounding; there is no quadrature.
//!
//! Cells are half-open: a point sitting exactly on a breakpoint belongs to the
//! cell on its right.

use std::cmp::Ordering;

use thiserror::Error;

/// Absolute tolerance for construction invariants.
pub const CONSTRUCTION_TOL: f64 = 1e-12;

/// Lengths below this are treated as null sets and dropped.
const NULL_LENGTH: f64 = 1e-15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpaceError {
    #[error("weight at index {index} is not positive ({value})")]
    NonPositiveWeight { index: usize, value: f64 },
    #[error("partition has no cells")]
    EmptyPartition,
    #[error("total masses differ: {left} vs {right}")]
    MassMismatch { left: f64, right: f64 },
    #[error("expected {expected} values, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("negative density {value} at cell {cell}")]
    NegativeDensity { cell: usize, value: f64 },
    #[error("grids do not match: {0}")]
    GridMismatch(String),
    #[error("point {0:?} is not covered by any piece")]
    NotCovered(Vec<f64>),
    #[error("absolute continuity fails on [{lo}, {hi}): reference density is 0 but measure has density {density}")]
    NotAbsolutelyContinuous { lo: f64, hi: f64, density: f64 },
    #[error("invalid piecewise-affine map: {0}")]
    InvalidMap(String),
}

pub type Result<T> = std::result::Result<T, SpaceError>;

/// Half-open interval `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn len(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn is_empty(&self) -> bool {
        self.len() <= NULL_LENGTH
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x < self.hi
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn intersect(&self, other: &Interval) -> Option<Interval> {
        let lo = self.lo.max(other.lo);
        let hi = self.hi.min(other.hi);
        let out = Interval { lo, hi };
        (!out.is_empty()).then_some(out)
    }
}

/// A finite measure space realized as consecutive cells of `[0, total)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPartition {
    labels: Vec<String>,
    lengths: Vec<f64>,
    breakpoints: Vec<f64>,
}

/// Builds a partition with cells of the given lengths, labeled by index.
///
/// Breakpoints are prefix sums of the weights. When the weights sum to 1
/// within [`CONSTRUCTION_TOL`] the last breakpoint is pinned to exactly 1.
pub fn make_partition(weights: &[f64]) -> Result<WeightedPartition> {
    let labels = (0..weights.len()).map(|i| i.to_string()).collect();
    WeightedPartition::with_labels(labels, weights)
}

impl WeightedPartition {
    pub fn with_labels(labels: Vec<String>, weights: &[f64]) -> Result<Self> {
        if weights.is_empty() {
            return Err(SpaceError::EmptyPartition);
        }
        if labels.len() != weights.len() {
            return Err(SpaceError::LengthMismatch {
                expected: weights.len(),
                found: labels.len(),
            });
        }
        for (index, &value) in weights.iter().enumerate() {
            if !value.is_finite() || value <= 0.0 {
                return Err(SpaceError::NonPositiveWeight { index, value });
            }
        }
        let mut breakpoints = Vec::with_capacity(weights.len() + 1);
        let mut acc = 0.0;
        breakpoints.push(0.0);
        for &w in weights {
            acc += w;
            breakpoints.push(acc);
        }
        let last = breakpoints.len() - 1;
        let rounded = breakpoints[last].round();
        if rounded >= 1.0 && (breakpoints[last] - rounded).abs() <= CONSTRUCTION_TOL {
            breakpoints[last] = rounded;
        }
        Ok(Self {
            labels,
            lengths: weights.to_vec(),
            breakpoints,
        })
    }

    /// Builds a partition whose lengths must add up to `total`; the last
    /// breakpoint is pinned to `total`.
    pub fn with_total(weights: &[f64], total: f64) -> Result<Self> {
        let mut p = make_partition(weights)?;
        let sum = p.total();
        if (sum - total).abs() > CONSTRUCTION_TOL {
            return Err(SpaceError::MassMismatch {
                left: sum,
                right: total,
            });
        }
        let last = p.breakpoints.len() - 1;
        p.breakpoints[last] = total;
        Ok(p)
    }

    /// Partition from explicit breakpoints `0 = b_0 < b_1 < ... < b_m`.
    pub fn from_breakpoints(breakpoints: &[f64]) -> Result<Self> {
        if breakpoints.len() < 2 {
            return Err(SpaceError::EmptyPartition);
        }
        let lengths: Vec<f64> = breakpoints.windows(2).map(|w| w[1] - w[0]).collect();
        for (index, &value) in lengths.iter().enumerate() {
            if value.is_nan() || value <= 0.0 {
                return Err(SpaceError::NonPositiveWeight { index, value });
            }
        }
        Ok(Self {
            labels: (0..lengths.len()).map(|i| i.to_string()).collect(),
            lengths,
            breakpoints: breakpoints.to_vec(),
        })
    }

    /// Lebesgue measure on `[0, 1)` as a one-cell partition.
    pub fn unit() -> Self {
        make_partition(&[1.0]).expect("one positive weight")
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn total(&self) -> f64 {
        self.breakpoints[self.breakpoints.len() - 1]
    }

    pub fn cell(&self, i: usize) -> Interval {
        Interval::new(self.breakpoints[i], self.breakpoints[i + 1])
    }

    pub fn cells(&self) -> impl Iterator<Item = Interval> + '_ {
        self.breakpoints
            .windows(2)
            .map(|w| Interval::new(w[0], w[1]))
    }

    /// Index of the cell containing `x`, half-open convention.
    pub fn cell_of(&self, x: f64) -> Option<usize> {
        if x.is_nan() || x < 0.0 || x >= self.total() {
            return None;
        }
        let idx = self.breakpoints.partition_point(|&b| b <= x);
        Some(idx - 1)
    }

    /// True when both partitions have the same breakpoints within `tol`.
    pub fn same_grid(&self, other: &Self, tol: f64) -> bool {
        self.len() == other.len()
            && self
                .breakpoints
                .iter()
                .zip(&other.breakpoints)
                .all(|(a, b)| (a - b).abs() <= tol)
    }

    /// Appends a cell of the given weight after the existing ones.
    pub fn extended(&self, label: &str, weight: f64) -> Result<Self> {
        let mut labels = self.labels.clone();
        labels.push(label.to_string());
        let mut weights = self.lengths.clone();
        weights.push(weight);
        Self::with_labels(labels, &weights)
    }
}

/// The common refinement of two partitions with maps back to each side.
#[derive(Debug, Clone)]
pub struct Refinement {
    pub partition: WeightedPartition,
    pub into_p: Vec<usize>,
    pub into_q: Vec<usize>,
}

/// Sorted union of breakpoint sets, merging points closer than the
/// construction tolerance.
fn merge_breakpoints(sets: &[&[f64]]) -> Vec<f64> {
    let mut all: Vec<f64> = sets.iter().flat_map(|s| s.iter().copied()).collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let mut out: Vec<f64> = Vec::with_capacity(all.len());
    for x in all {
        match out.last() {
            Some(&last) if x - last <= CONSTRUCTION_TOL => {}
            _ => out.push(x),
        }
    }
    out
}

pub fn common_refinement(p: &WeightedPartition, q: &WeightedPartition) -> Result<Refinement> {
    if (p.total() - q.total()).abs() > CONSTRUCTION_TOL {
        return Err(SpaceError::MassMismatch {
            left: p.total(),
            right: q.total(),
        });
    }
    let mut bps = merge_breakpoints(&[p.breakpoints(), q.breakpoints()]);
    // keep p's endpoint as the canonical total
    let last = bps.len() - 1;
    bps[last] = p.total();
    let partition = WeightedPartition::from_breakpoints(&bps)?;
    let mut into_p = Vec::with_capacity(partition.len());
    let mut into_q = Vec::with_capacity(partition.len());
    for cell in partition.cells() {
        let mid = cell.midpoint();
        into_p.push(p.cell_of(mid).unwrap_or(p.len() - 1));
        into_q.push(q.cell_of(mid).unwrap_or(q.len() - 1));
    }
    Ok(Refinement {
        partition,
        into_p,
        into_q,
    })
}

/// Piecewise-constant function on a partition.
#[derive(Debug, Clone, PartialEq)]
pub struct PcFunction {
    base: WeightedPartition,
    values: Vec<f64>,
}

impl PcFunction {
    pub fn new(base: WeightedPartition, values: Vec<f64>) -> Result<Self> {
        if values.len() != base.len() {
            return Err(SpaceError::LengthMismatch {
                expected: base.len(),
                found: values.len(),
            });
        }
        Ok(Self { base, values })
    }

    pub fn constant(base: &WeightedPartition, value: f64) -> Self {
        Self {
            values: vec![value; base.len()],
            base: base.clone(),
        }
    }

    pub fn ones(base: &WeightedPartition) -> Self {
        Self::constant(base, 1.0)
    }

    pub fn base(&self) -> &WeightedPartition {
        &self.base
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, cell: usize) -> f64 {
        self.values[cell]
    }

    pub fn eval(&self, x: f64) -> Option<f64> {
        self.base.cell_of(x).map(|i| self.values[i])
    }

    /// Re-expresses the function on a partition that refines its base.
    pub fn refine_to(&self, target: &WeightedPartition) -> Result<Self> {
        let r = common_refinement(target, &self.base)?;
        if r.partition.len() != target.len() {
            return Err(SpaceError::GridMismatch(
                "target does not refine the function's base".into(),
            ));
        }
        let values = r.into_q.iter().map(|&j| self.values[j]).collect();
        Ok(Self {
            base: target.clone(),
            values,
        })
    }

    /// Pointwise product on the common refinement.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        let r = common_refinement(&self.base, &other.base)?;
        let values = r
            .into_p
            .iter()
            .zip(&r.into_q)
            .map(|(&i, &j)| self.values[i] * other.values[j])
            .collect();
        Ok(Self {
            base: r.partition,
            values,
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        let r = common_refinement(&self.base, &other.base)?;
        Ok(r.into_p
            .iter()
            .zip(&r.into_q)
            .map(|(&i, &j)| (self.values[i] - other.values[j]).abs())
            .fold(0.0, f64::max))
    }
}

/// Absolutely continuous measure with piecewise-constant density.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalMeasure {
    base: WeightedPartition,
    density: Vec<f64>,
}

impl IntervalMeasure {
    pub fn new(base: WeightedPartition, density: Vec<f64>) -> Result<Self> {
        if density.len() != base.len() {
            return Err(SpaceError::LengthMismatch {
                expected: base.len(),
                found: density.len(),
            });
        }
        if let Some((cell, &value)) = density
            .iter()
            .enumerate()
            .find(|(_, &d)| d.is_nan() || d < 0.0)
        {
            return Err(SpaceError::NegativeDensity { cell, value });
        }
        Ok(Self { base, density })
    }

    /// Lebesgue measure restricted to the partition's range.
    pub fn lebesgue(base: &WeightedPartition) -> Self {
        Self {
            density: vec![1.0; base.len()],
            base: base.clone(),
        }
    }

    /// Measure assigning the given masses to the cells of `base`.
    pub fn from_masses(base: WeightedPartition, masses: &[f64]) -> Result<Self> {
        if masses.len() != base.len() {
            return Err(SpaceError::LengthMismatch {
                expected: base.len(),
                found: masses.len(),
            });
        }
        let density = masses
            .iter()
            .zip(base.lengths())
            .map(|(m, l)| m / l)
            .collect();
        Self::new(base, density)
    }

    pub fn base(&self) -> &WeightedPartition {
        &self.base
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn cell_mass(&self, i: usize) -> f64 {
        self.density[i] * self.base.lengths()[i]
    }

    pub fn mass(&self) -> f64 {
        (0..self.base.len()).map(|i| self.cell_mass(i)).sum()
    }

    /// Measure of an interval.
    pub fn mass_of(&self, iv: &Interval) -> f64 {
        self.base
            .cells()
            .zip(&self.density)
            .filter_map(|(c, d)| c.intersect(iv).map(|x| x.len() * d))
            .sum()
    }

    /// Integral of `f` over an interval against this measure.
    pub fn integrate_over(&self, f: &PcFunction, iv: &Interval) -> f64 {
        let mut acc = 0.0;
        for (c, d) in self.base.cells().zip(&self.density) {
            let Some(cm) = c.intersect(iv) else { continue };
            for (fc, v) in f.base.cells().zip(&f.values) {
                if let Some(x) = fc.intersect(&cm) {
                    acc += v * d * x.len();
                }
            }
        }
        acc
    }

    pub fn density_fn(&self) -> PcFunction {
        PcFunction {
            base: self.base.clone(),
            values: self.density.clone(),
        }
    }
}

/// `∫ f dm` on the common refinement of the two grids.
pub fn integrate(f: &PcFunction, m: &IntervalMeasure) -> Result<f64> {
    let r = common_refinement(f.base(), m.base())?;
    Ok(r.partition
        .lengths()
        .iter()
        .zip(r.into_p.iter().zip(&r.into_q))
        .map(|(len, (&i, &j))| f.values[i] * m.density[j] * len)
        .sum())
}

/// Cellwise density ratio `dν/dμ` on the common refinement.
pub fn radon_nikodym(nu: &IntervalMeasure, mu: &IntervalMeasure) -> Result<PcFunction> {
    let r = common_refinement(nu.base(), mu.base())?;
    let mut values = Vec::with_capacity(r.partition.len());
    for (cell, (&i, &j)) in r.partition.cells().zip(r.into_p.iter().zip(&r.into_q)) {
        let (dn, dm) = (nu.density[i], mu.density[j]);
        if dm == 0.0 {
            if dn != 0.0 {
                return Err(SpaceError::NotAbsolutelyContinuous {
                    lo: cell.lo,
                    hi: cell.hi,
                    density: dn,
                });
            }
            values.push(0.0);
        } else {
            values.push(dn / dm);
        }
    }
    PcFunction::new(r.partition, values)
}

/// `y = slope * x + offset` with `slope > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine1 {
    pub slope: f64,
    pub offset: f64,
}

impl Affine1 {
    /// The orientation-preserving affine bijection `from -> to`.
    pub fn between(from: Interval, to: Interval) -> Self {
        let slope = to.len() / from.len();
        Self {
            slope,
            offset: to.lo - slope * from.lo,
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        self.slope * x + self.offset
    }

    pub fn invert(&self, y: f64) -> f64 {
        (y - self.offset) / self.slope
    }

    pub fn inverse(&self) -> Self {
        Self {
            slope: 1.0 / self.slope,
            offset: -self.offset / self.slope,
        }
    }

    pub fn image(&self, iv: &Interval) -> Interval {
        Interval::new(self.apply(iv.lo), self.apply(iv.hi))
    }
}

/// Keeps a mapped coordinate inside the half-open target interval.
fn clamp_half_open(y: f64, iv: &Interval) -> f64 {
    if y < iv.lo {
        iv.lo
    } else if y >= iv.hi {
        iv.hi.next_down().max(iv.lo)
    } else {
        y
    }
}

/// Axis-aligned box as one interval per axis.
pub type Boxn = Vec<Interval>;

pub fn box_volume(b: &[Interval]) -> f64 {
    b.iter().map(Interval::len).product()
}

pub fn box_contains(b: &[Interval], p: &[f64]) -> bool {
    b.iter().zip(p).all(|(iv, &x)| iv.contains(x))
}

pub fn box_intersect(a: &[Interval], b: &[Interval]) -> Option<Boxn> {
    a.iter().zip(b).map(|(x, y)| x.intersect(y)).collect()
}

fn box_overlap_volume(a: &[Interval], b: &[Interval]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.hi.min(y.hi) - x.lo.max(y.lo)).max(0.0))
        .product()
}

/// One box-to-box piece of a piecewise-affine bijection.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinePiece {
    pub source: Boxn,
    pub target: Boxn,
    pub axes: Vec<Affine1>,
}

impl AffinePiece {
    pub fn jacobian(&self) -> f64 {
        self.axes.iter().map(|a| a.slope).product()
    }

    pub fn map_point(&self, p: &[f64]) -> Vec<f64> {
        self.axes
            .iter()
            .zip(p)
            .zip(&self.target)
            .map(|((a, &x), t)| clamp_half_open(a.apply(x), t))
            .collect()
    }

    pub fn map_box(&self, b: &[Interval]) -> Boxn {
        self.axes.iter().zip(b).map(|(a, iv)| a.image(iv)).collect()
    }

    fn flipped(&self) -> Self {
        Self {
            source: self.target.clone(),
            target: self.source.clone(),
            axes: self.axes.iter().map(Affine1::inverse).collect(),
        }
    }
}

/// Invertible map between box complexes, affine and axis-separable on each
/// piece with positive slopes.
#[derive(Debug, Clone, PartialEq)]
pub struct PwAffineBijection {
    dim: usize,
    domain: Boxn,
    codomain: Boxn,
    pieces: Vec<AffinePiece>,
}

fn check_tiling(which: &str, outer: &[Interval], boxes: &[&Boxn]) -> Result<()> {
    for b in boxes {
        for (iv, o) in b.iter().zip(outer) {
            if iv.lo < o.lo - CONSTRUCTION_TOL || iv.hi > o.hi + CONSTRUCTION_TOL {
                return Err(SpaceError::InvalidMap(format!(
                    "{which} box {b:?} leaves {outer:?}"
                )));
            }
        }
    }
    for (a, x) in boxes.iter().enumerate() {
        for y in &boxes[a + 1..] {
            let ov = box_overlap_volume(x, y);
            if ov > CONSTRUCTION_TOL {
                return Err(SpaceError::InvalidMap(format!(
                    "{which} boxes {x:?} and {y:?} overlap (volume {ov:e})"
                )));
            }
        }
    }
    let covered: f64 = boxes.iter().map(|b| box_volume(b)).sum();
    let full = box_volume(outer);
    if (covered - full).abs() > CONSTRUCTION_TOL * full.max(1.0) {
        return Err(SpaceError::InvalidMap(format!(
            "{which} boxes cover volume {covered} of {full}"
        )));
    }
    Ok(())
}

impl PwAffineBijection {
    /// Builds the map sending each `source` box onto its paired `target` box.
    ///
    /// Pairs with a (near) zero-length side are null sets and are dropped.
    /// Sources must tile `domain` and targets must tile `codomain`.
    pub fn from_boxes(domain: Boxn, codomain: Boxn, pairs: Vec<(Boxn, Boxn)>) -> Result<Self> {
        let dim = domain.len();
        if dim == 0 || codomain.len() != dim {
            return Err(SpaceError::InvalidMap("dimension mismatch".into()));
        }
        let mut pieces = Vec::with_capacity(pairs.len());
        for (source, target) in pairs {
            if source.len() != dim || target.len() != dim {
                return Err(SpaceError::InvalidMap("piece dimension mismatch".into()));
            }
            let s_null = source.iter().any(Interval::is_empty);
            let t_null = target.iter().any(Interval::is_empty);
            if s_null && t_null {
                continue;
            }
            if s_null != t_null {
                return Err(SpaceError::InvalidMap(format!(
                    "null box paired with non-null box: {source:?} -> {target:?}"
                )));
            }
            let axes = source
                .iter()
                .zip(&target)
                .map(|(s, t)| Affine1::between(*s, *t))
                .collect::<Vec<_>>();
            if axes.iter().any(|a| !a.slope.is_finite() || a.slope <= 0.0) {
                return Err(SpaceError::InvalidMap("slopes must be positive".into()));
            }
            pieces.push(AffinePiece {
                source,
                target,
                axes,
            });
        }
        let srcs: Vec<&Boxn> = pieces.iter().map(|p| &p.source).collect();
        check_tiling("source", &domain, &srcs)?;
        let tgts: Vec<&Boxn> = pieces.iter().map(|p| &p.target).collect();
        check_tiling("target", &codomain, &tgts)?;
        Ok(Self {
            dim,
            domain,
            codomain,
            pieces,
        })
    }

    /// One-dimensional map from interval pairs on `[0, total)`.
    pub fn from_intervals(total: f64, pairs: &[(Interval, Interval)]) -> Result<Self> {
        let whole = vec![Interval::new(0.0, total)];
        Self::from_boxes(
            whole.clone(),
            whole,
            pairs.iter().map(|(s, t)| (vec![*s], vec![*t])).collect(),
        )
    }

    pub fn identity(domain: Boxn) -> Self {
        let axes = domain
            .iter()
            .map(|_| Affine1 {
                slope: 1.0,
                offset: 0.0,
            })
            .collect();
        Self {
            dim: domain.len(),
            codomain: domain.clone(),
            pieces: vec![AffinePiece {
                source: domain.clone(),
                target: domain.clone(),
                axes,
            }],
            domain,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn domain(&self) -> &[Interval] {
        &self.domain
    }

    pub fn codomain(&self) -> &[Interval] {
        &self.codomain
    }

    pub fn pieces(&self) -> &[AffinePiece] {
        &self.pieces
    }

    pub fn piece_at(&self, p: &[f64]) -> Option<&AffinePiece> {
        self.pieces.iter().find(|pc| box_contains(&pc.source, p))
    }

    pub fn piece_at_target(&self, p: &[f64]) -> Option<&AffinePiece> {
        self.pieces.iter().find(|pc| box_contains(&pc.target, p))
    }

    pub fn apply(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.piece_at(p)
            .map(|pc| pc.map_point(p))
            .ok_or_else(|| SpaceError::NotCovered(p.to_vec()))
    }

    pub fn apply_inverse(&self, p: &[f64]) -> Result<Vec<f64>> {
        let pc = self
            .piece_at_target(p)
            .ok_or_else(|| SpaceError::NotCovered(p.to_vec()))?;
        Ok(pc
            .axes
            .iter()
            .zip(p)
            .zip(&pc.source)
            .map(|((a, &y), s)| clamp_half_open(a.invert(y), s))
            .collect())
    }

    pub fn inverse(&self) -> Self {
        Self {
            dim: self.dim,
            domain: self.codomain.clone(),
            codomain: self.domain.clone(),
            pieces: self.pieces.iter().map(AffinePiece::flipped).collect(),
        }
    }

    /// `self ∘ first`.
    pub fn compose(&self, first: &Self) -> Result<Self> {
        if first.dim != self.dim {
            return Err(SpaceError::InvalidMap("dimension mismatch".into()));
        }
        let mut pairs = Vec::new();
        for p1 in &first.pieces {
            for p2 in &self.pieces {
                let Some(mid) = box_intersect(&p1.target, &p2.source) else {
                    continue;
                };
                let src: Boxn = p1
                    .axes
                    .iter()
                    .zip(&mid)
                    .map(|(a, iv)| Interval::new(a.invert(iv.lo), a.invert(iv.hi)))
                    .collect();
                pairs.push((src, p2.map_box(&mid)));
            }
        }
        Self::from_boxes(first.domain.clone(), self.codomain.clone(), pairs)
    }

    /// Preimage of an interval under a one-dimensional map, as intervals of
    /// the domain.
    pub fn preimage_1d(&self, iv: &Interval) -> Vec<Interval> {
        self.pieces
            .iter()
            .filter_map(|pc| {
                pc.target[0].intersect(iv).map(|x| {
                    let a = pc.axes[0];
                    Interval::new(a.invert(x.lo), a.invert(x.hi))
                })
            })
            .collect()
    }
}

/// Builds a partition out of intervals that tile `[0, total)` in some order,
/// returning the permutation that sorts them.
fn sort_tiles(tiles: &[Interval]) -> Result<(WeightedPartition, Vec<usize>)> {
    let mut order: Vec<usize> = (0..tiles.len()).collect();
    order.sort_by(|&a, &b| {
        tiles[a]
            .lo
            .partial_cmp(&tiles[b].lo)
            .unwrap_or(Ordering::Equal)
    });
    let mut bps = vec![0.0];
    for &i in &order {
        let t = tiles[i];
        let last = *bps.last().unwrap();
        if (t.lo - last).abs() > CONSTRUCTION_TOL {
            return Err(SpaceError::GridMismatch(format!(
                "image tiles leave a gap or overlap at {last}"
            )));
        }
        bps.push(t.hi);
    }
    Ok((WeightedPartition::from_breakpoints(&bps)?, order))
}

/// Pushes `m` forward along a one-dimensional map: `ς(A') = m(ρ⁻¹ A')`.
///
/// Every cell of `m` intersected with a piece is carried affinely onto its
/// image, so the result is exact for piecewise-constant densities.
pub fn transport(rho: &PwAffineBijection, m: &IntervalMeasure) -> Result<IntervalMeasure> {
    if rho.dim() != 1 {
        return Err(SpaceError::InvalidMap("transport needs a 1-d map".into()));
    }
    let dom = rho.domain()[0];
    if dom.lo.abs() > CONSTRUCTION_TOL || (dom.hi - m.base().total()).abs() > CONSTRUCTION_TOL {
        return Err(SpaceError::GridMismatch(format!(
            "map domain {dom:?} does not cover [0, {})",
            m.base().total()
        )));
    }
    if rho.codomain()[0].lo.abs() > CONSTRUCTION_TOL {
        return Err(SpaceError::GridMismatch("codomain must start at 0".into()));
    }
    let mut tiles = Vec::new();
    let mut dens = Vec::new();
    for pc in rho.pieces() {
        let a = pc.axes[0];
        for (cell, d) in m.base().cells().zip(m.density()) {
            if let Some(x) = cell.intersect(&pc.source[0]) {
                tiles.push(a.image(&x));
                dens.push(d / a.slope);
            }
        }
    }
    let (partition, order) = sort_tiles(&tiles)?;
    let density = order.iter().map(|&i| dens[i]).collect();
    IntervalMeasure::new(partition, density)
}

/// `f ∘ ρ⁻¹` for a one-dimensional map, on the image grid of `f`.
pub fn pull_through_inverse(rho: &PwAffineBijection, f: &PcFunction) -> Result<PcFunction> {
    let mut tiles = Vec::new();
    let mut vals = Vec::new();
    for pc in rho.pieces() {
        for (cell, v) in f.base().cells().zip(f.values()) {
            if let Some(x) = cell.intersect(&pc.source[0]) {
                tiles.push(pc.axes[0].image(&x));
                vals.push(*v);
            }
        }
    }
    let (partition, order) = sort_tiles(&tiles)?;
    PcFunction::new(partition, order.iter().map(|&i| vals[i]).collect())
}

/// Measure on a product of partitions with a constant density per grid box.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductMeasure {
    axes: Vec<WeightedPartition>,
    density: Vec<f64>,
}

/// Row-major iteration over multi-indices of a grid.
fn multi_indices(shape: &[usize]) -> impl Iterator<Item = Vec<usize>> + '_ {
    let total: usize = shape.iter().product();
    (0..total).map(move |mut flat| {
        let mut idx = vec![0; shape.len()];
        for (slot, &n) in idx.iter_mut().zip(shape).rev() {
            *slot = flat % n;
            flat /= n;
        }
        idx
    })
}

fn flat_index(shape: &[usize], idx: &[usize]) -> usize {
    idx.iter().zip(shape).fold(0, |acc, (&i, &n)| acc * n + i)
}

impl ProductMeasure {
    pub fn new(axes: Vec<WeightedPartition>, density: Vec<f64>) -> Result<Self> {
        let n: usize = axes.iter().map(WeightedPartition::len).product();
        if density.len() != n {
            return Err(SpaceError::LengthMismatch {
                expected: n,
                found: density.len(),
            });
        }
        if let Some((cell, &value)) = density
            .iter()
            .enumerate()
            .find(|(_, &d)| d.is_nan() || d < 0.0)
        {
            return Err(SpaceError::NegativeDensity { cell, value });
        }
        Ok(Self { axes, density })
    }

    /// Product of one-dimensional measures.
    pub fn product(factors: &[IntervalMeasure]) -> Self {
        let axes: Vec<WeightedPartition> = factors.iter().map(|m| m.base().clone()).collect();
        let shape = Self::shape_of(&axes);
        let density = multi_indices(&shape)
            .map(|idx| {
                idx.iter()
                    .zip(factors)
                    .map(|(&i, m)| m.density()[i])
                    .product()
            })
            .collect();
        Self { axes, density }
    }

    fn shape_of(axes: &[WeightedPartition]) -> Vec<usize> {
        axes.iter().map(WeightedPartition::len).collect()
    }

    pub fn shape(&self) -> Vec<usize> {
        Self::shape_of(&self.axes)
    }

    pub fn axes(&self) -> &[WeightedPartition] {
        &self.axes
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn cell_box(&self, idx: &[usize]) -> Boxn {
        idx.iter()
            .zip(&self.axes)
            .map(|(&i, a)| a.cell(i))
            .collect()
    }

    pub fn density_at(&self, p: &[f64]) -> Option<f64> {
        let idx: Option<Vec<usize>> = p
            .iter()
            .zip(&self.axes)
            .map(|(&x, a)| a.cell_of(x))
            .collect();
        idx.map(|idx| self.density[flat_index(&self.shape(), &idx)])
    }

    /// Iterates `(box, density)` over all grid cells.
    pub fn cells(&self) -> impl Iterator<Item = (Boxn, f64)> + '_ {
        let shape = self.shape();
        multi_indices(&shape)
            .collect::<Vec<_>>()
            .into_iter()
            .map(move |idx| {
                let d = self.density[flat_index(&shape, &idx)];
                (self.cell_box(&idx), d)
            })
    }

    pub fn mass(&self) -> f64 {
        self.cells().map(|(b, d)| box_volume(&b) * d).sum()
    }

    pub fn mass_of(&self, b: &[Interval]) -> f64 {
        self.cells()
            .filter_map(|(c, d)| box_intersect(&c, b).map(|x| box_volume(&x) * d))
            .sum()
    }

    /// Common refinement of two grids on the same axes.
    fn refined_axes(&self, other: &Self) -> Result<Vec<Refinement>> {
        if self.axes.len() != other.axes.len() {
            return Err(SpaceError::GridMismatch("dimension mismatch".into()));
        }
        self.axes
            .iter()
            .zip(&other.axes)
            .map(|(p, q)| common_refinement(p, q))
            .collect()
    }

    /// Largest cellwise mass difference on the common refinement.
    pub fn max_mass_diff(&self, other: &Self) -> Result<f64> {
        let refs = self.refined_axes(other)?;
        let shape: Vec<usize> = refs.iter().map(|r| r.partition.len()).collect();
        let (sa, sb) = (self.shape(), other.shape());
        let mut worst = 0.0f64;
        for idx in multi_indices(&shape) {
            let ia: Vec<usize> = idx.iter().zip(&refs).map(|(&i, r)| r.into_p[i]).collect();
            let ib: Vec<usize> = idx.iter().zip(&refs).map(|(&i, r)| r.into_q[i]).collect();
            let vol: f64 = idx
                .iter()
                .zip(&refs)
                .map(|(&i, r)| r.partition.lengths()[i])
                .product();
            let d =
                (self.density[flat_index(&sa, &ia)] - other.density[flat_index(&sb, &ib)]).abs();
            worst = worst.max(d * vol);
        }
        Ok(worst)
    }

    /// Cellwise density ratio against `reference` on the common refinement,
    /// returned as `(box, ratio)` pairs.
    pub fn radon_nikodym(&self, reference: &Self) -> Result<Vec<(Boxn, f64)>> {
        let refs = self.refined_axes(reference)?;
        let shape: Vec<usize> = refs.iter().map(|r| r.partition.len()).collect();
        let (sa, sb) = (self.shape(), reference.shape());
        let mut out = Vec::new();
        for idx in multi_indices(&shape) {
            let ia: Vec<usize> = idx.iter().zip(&refs).map(|(&i, r)| r.into_p[i]).collect();
            let ib: Vec<usize> = idx.iter().zip(&refs).map(|(&i, r)| r.into_q[i]).collect();
            let b: Boxn = idx
                .iter()
                .zip(&refs)
                .map(|(&i, r)| r.partition.cell(i))
                .collect();
            let (dn, dm) = (
                self.density[flat_index(&sa, &ia)],
                reference.density[flat_index(&sb, &ib)],
            );
            if dm == 0.0 {
                if dn != 0.0 {
                    return Err(SpaceError::NotAbsolutelyContinuous {
                        lo: b[0].lo,
                        hi: b[0].hi,
                        density: dn,
                    });
                }
                out.push((b, 0.0));
            } else {
                out.push((b, dn / dm));
            }
        }
        Ok(out)
    }
}

/// Pushforward of a product-grid measure along a box-wise affine map.
///
/// Each (grid cell ∩ piece) box is carried to its image with density divided
/// by the piece Jacobian. The image boxes are then rasterized on the grid
/// spanned by all of their edges.
pub fn transport_product(rho: &PwAffineBijection, m: &ProductMeasure) -> Result<ProductMeasure> {
    if rho.dim() != m.axes().len() {
        return Err(SpaceError::InvalidMap("dimension mismatch".into()));
    }
    let mut images: Vec<(Boxn, f64)> = Vec::new();
    let cells: Vec<(Boxn, f64)> = m.cells().collect();
    for pc in rho.pieces() {
        let jac = pc.jacobian();
        for (cb, d) in &cells {
            if let Some(x) = box_intersect(cb, &pc.source) {
                images.push((pc.map_box(&x), d / jac));
            }
        }
    }
    let dim = rho.dim();
    let mut axes = Vec::with_capacity(dim);
    for a in 0..dim {
        let edges: Vec<f64> = images
            .iter()
            .flat_map(|(b, _)| [b[a].lo, b[a].hi])
            .collect();
        let mut bps = merge_breakpoints(&[&edges]);
        if bps[0].abs() > CONSTRUCTION_TOL {
            return Err(SpaceError::GridMismatch(
                "image grid must start at 0".into(),
            ));
        }
        bps[0] = 0.0;
        let last = bps.len() - 1;
        bps[last] = rho.codomain()[a].hi;
        axes.push(WeightedPartition::from_breakpoints(&bps)?);
    }
    let shape = ProductMeasure::shape_of(&axes);
    let mut density = vec![f64::NAN; shape.iter().product()];
    for idx in multi_indices(&shape) {
        let center: Vec<f64> = idx
            .iter()
            .zip(&axes)
            .map(|(&i, a)| a.cell(i).midpoint())
            .collect();
        let hit = images.iter().find(|(b, _)| box_contains(b, &center));
        match hit {
            Some((_, d)) => density[flat_index(&shape, &idx)] = *d,
            None => return Err(SpaceError::NotCovered(center)),
        }
    }
    ProductMeasure::new(axes, density)
}

/// Piecewise-constant function on a product of partitions (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    axes: Vec<WeightedPartition>,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(axes: Vec<WeightedPartition>, values: Vec<f64>) -> Result<Self> {
        let n: usize = axes.iter().map(WeightedPartition::len).product();
        if values.len() != n {
            return Err(SpaceError::LengthMismatch {
                expected: n,
                found: values.len(),
            });
        }
        Ok(Self { axes, values })
    }

    pub fn axes(&self) -> &[WeightedPartition] {
        &self.axes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        let shape: Vec<usize> = self.axes.iter().map(WeightedPartition::len).collect();
        self.values[flat_index(&shape, idx)]
    }

    pub fn eval(&self, p: &[f64]) -> Option<f64> {
        let idx: Option<Vec<usize>> = p
            .iter()
            .zip(&self.axes)
            .map(|(&x, a)| a.cell_of(x))
            .collect();
        idx.map(|i| self.at(&i))
    }
}

/// Partition of `[0, total)` into `1..=max_cells` cells of random length.
pub fn random_partition<R: rand::Rng>(
    rng: &mut R,
    total: f64,
    max_cells: usize,
) -> WeightedPartition {
    let n = rng.random_range(1..=max_cells.max(1));
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    let w: Vec<f64> = w.iter().map(|x| x * total / s).collect();
    WeightedPartition::with_total(&w, total).expect("positive weights")
}

/// Invertible interval exchange of `[0, total)` with `pieces` pieces: random
/// source and target cuts, targets visited in a random order, so slopes
/// vary from piece to piece.
pub fn random_interval_map<R: rand::Rng>(
    rng: &mut R,
    total: f64,
    pieces: usize,
) -> PwAffineBijection {
    use rand::seq::SliceRandom;
    let cut = |rng: &mut R| {
        let w: Vec<f64> = (0..pieces).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = w.iter().sum();
        let w: Vec<f64> = w.iter().map(|x| x * total / s).collect();
        WeightedPartition::with_total(&w, total).expect("positive weights")
    };
    let src = cut(rng);
    let dst = cut(rng);
    let mut order: Vec<usize> = (0..pieces).collect();
    order.shuffle(rng);
    let pairs: Vec<_> = src
        .cells()
        .zip(order.iter().map(|&k| dst.cell(k)))
        .collect();
    PwAffineBijection::from_intervals(total, &pairs).expect("exchange of a partition")
}
