//! Explicit dilation of an integral-preserving positive contraction.
//!
//! Given cell weights `μ` and a positive `T` with `Σ_i μ_i T[i][j] = μ_j`,
//! the coupling cuts the unit square into rectangles `B_jk × I_k` (source,
//! coordinates `(x₋₁, x₀)`) and `I_j × S_jk` (target, coordinates
//! `(x₀, x₁)`), with
//!
//! ```text
//! |B_jk| = μ_j T[j][k] / μ_k        |S_jk| = T[j][k] / (T1)_j
//! ```
//!
//! and lets `φ` carry one onto the other affinely per axis. Both rectangles
//! carry mass `μ_j T[j][k]`: the source under `{α} × μ` (every row of the
//! conditioned family `{α}` is Lebesgue on `J₋₁`) and the target under
//! `ν × λ` with `dν = (T1) dμ`.
//!
//! The shift `τ` on coordinate windows applies `φ` at the seam `(x₋₁, x₀)`
//! and moves every other coordinate one slot to the right. Its
//! Frobenius–Perron operator `Q` satisfies `(Qf)(x) = (T1)(x₀) f(τ⁻¹x)`, and
//! averaging `Qⁿf` over every coordinate but `x₀` gives back `Tⁿf`.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::interval_space::{
    make_partition, random_partition, transport_product, GridFunction, Interval, IntervalMeasure,
    PcFunction, ProductMeasure, PwAffineBijection, SpaceError, WeightedPartition, CONSTRUCTION_TOL,
};
use crate::markov_ops::{
    apply_operator, check_power_dilation, classify, L1Operator, MarkovKernel, OperatorError,
};

/// Label of the absorbing cell added by [`make_integral_preserving`].
pub const CEMETERY: &str = "†";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DilationError {
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error("operator is not a positive contraction (min entry {min_entry}, norm {norm})")]
    NotPositiveContraction { min_entry: f64, norm: f64 },
    #[error("operator is not integral-preserving (residual {0:e})")]
    NotIntegralPreserving(f64),
    #[error("row {row} has (T1) = {value}; rows with vanishing T1 are not supported")]
    DegenerateRow { row: usize, value: f64 },
    #[error("{what} of column/row {index} sum to {sum}, expected 1")]
    LayoutMismatch {
        what: &'static str,
        index: usize,
        sum: f64,
    },
    #[error("window [{lo}, {hi}] is too small: need {need}")]
    WindowTooSmall { lo: i64, hi: i64, need: String },
    #[error("coordinate {0} is outside the window")]
    MissingCoordinate(i64),
    #[error("cannot perturb slice ({row}, {col}): {reason}")]
    Perturbation {
        row: usize,
        col: usize,
        reason: String,
    },
}

pub type Result<T> = std::result::Result<T, DilationError>;

/// Integral-preserving extension by one absorbing cell.
#[derive(Debug, Clone)]
pub struct Extension {
    pub operator: L1Operator,
    /// Zero-padding into the extended space, `(m+1) × m`.
    pub embed: DMatrix<f64>,
    /// Restriction to the original cells, `m × (m+1)`.
    pub project: DMatrix<f64>,
    /// `δ_j = μ_j − Σ_i μ_i T[i][j]`, clamped at 0.
    pub deficit: Vec<f64>,
}

/// Adds a cemetery cell `†` of weight 1 collecting the lost mass:
/// `T′[†][j] = δ_j / 1`, `T′[†][†] = 1`, `T′[i][†] = 0`.
pub fn make_integral_preserving(t: &L1Operator) -> Result<Extension> {
    let c = classify(t);
    if !c.is_positive_contraction() {
        return Err(DilationError::NotPositiveContraction {
            min_entry: c.min_entry,
            norm: c.norm,
        });
    }
    let m = t.dim();
    let mu = t.weights();
    let deficit: Vec<f64> = (0..m)
        .map(|j| {
            let col: f64 = (0..m).map(|i| mu[i] * t.matrix()[(i, j)]).sum();
            (mu[j] - col).max(0.0)
        })
        .collect();
    let base = t.base().extended(CEMETERY, 1.0)?;
    let mut matrix = DMatrix::zeros(m + 1, m + 1);
    matrix.view_mut((0, 0), (m, m)).copy_from(t.matrix());
    for (j, d) in deficit.iter().enumerate() {
        matrix[(m, j)] = *d;
    }
    matrix[(m, m)] = 1.0;
    let operator = L1Operator::new(base, matrix)?;
    let embed = DMatrix::from_fn(m + 1, m, |i, j| if i == j { 1.0 } else { 0.0 });
    let project = embed.transpose();
    Ok(Extension {
        operator,
        embed,
        project,
        deficit,
    })
}

impl Extension {
    pub fn power_residuals(&self, original: &L1Operator, horizon: usize) -> Result<Vec<f64>> {
        Ok(check_power_dilation(
            original,
            &self.operator,
            &self.embed,
            &self.project,
            horizon,
        )?)
    }

    pub fn embed_function(&self, f: &PcFunction) -> PcFunction {
        let mut v = f.values().to_vec();
        v.push(0.0);
        PcFunction::new(self.operator.base().clone(), v).expect("one value per cell")
    }
}

/// Consecutive intervals of `[0, 1)` with the given lengths, zero lengths
/// giving `None`. The last nonzero interval ends exactly at 1.
fn stack_unit(lengths: &[f64], what: &'static str, index: usize) -> Result<Vec<Option<Interval>>> {
    let sum: f64 = lengths.iter().sum();
    if (sum - 1.0).abs() > CONSTRUCTION_TOL {
        return Err(DilationError::LayoutMismatch { what, index, sum });
    }
    let last_nonzero = lengths.iter().rposition(|&l| l > 0.0);
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(lengths.len());
    for (i, &l) in lengths.iter().enumerate() {
        if l > 0.0 {
            let hi = if Some(i) == last_nonzero {
                1.0
            } else {
                acc + l
            };
            out.push(Some(Interval::new(acc, hi)));
            acc = hi;
        } else {
            out.push(None);
        }
    }
    Ok(out)
}

/// The coupling `(α, φ)` for an integral-preserving positive contraction.
#[derive(Debug, Clone)]
pub struct Coupling {
    base: WeightedPartition,
    operator: L1Operator,
    t1: PcFunction,
    nu: IntervalMeasure,
    alpha: MarkovKernel,
    /// `blocks[j][k] = B_jk ⊂ J₋₁`.
    blocks: Vec<Vec<Option<Interval>>>,
    /// `slices[j][k] = S_jk ⊂ J₁`.
    slices: Vec<Vec<Option<Interval>>>,
    phi: PwAffineBijection,
}

fn phi_from_layout(
    base: &WeightedPartition,
    blocks: &[Vec<Option<Interval>>],
    slices: &[Vec<Option<Interval>>],
) -> Result<PwAffineBijection> {
    let m = base.len();
    let total = base.total();
    let mut pairs = Vec::new();
    for j in 0..m {
        for k in 0..m {
            if let (Some(b), Some(s)) = (blocks[j][k], slices[j][k]) {
                pairs.push((vec![b, base.cell(k)], vec![base.cell(j), s]));
            }
        }
    }
    Ok(PwAffineBijection::from_boxes(
        vec![Interval::new(0.0, 1.0), Interval::new(0.0, total)],
        vec![Interval::new(0.0, total), Interval::new(0.0, 1.0)],
        pairs,
    )?)
}

pub fn build_coupling(t: &L1Operator) -> Result<Coupling> {
    let c = classify(t);
    if !c.is_positive_contraction() {
        return Err(DilationError::NotPositiveContraction {
            min_entry: c.min_entry,
            norm: c.norm,
        });
    }
    if !c.integral_preserving {
        return Err(DilationError::NotIntegralPreserving(c.integral_residual));
    }
    let m = t.dim();
    let mu = t.weights();
    let tm = t.matrix();
    let row_sums = t.row_sums();
    if let Some((row, &value)) = row_sums
        .iter()
        .enumerate()
        .find(|(_, &s)| s <= CONSTRUCTION_TOL)
    {
        return Err(DilationError::DegenerateRow { row, value });
    }
    // entries within rounding of zero count as zero
    let entry = |j: usize, k: usize| {
        let v = tm[(j, k)];
        if v > CONSTRUCTION_TOL * 1e-3 {
            v
        } else {
            0.0
        }
    };

    let mut blocks = vec![vec![None; m]; m];
    for k in 0..m {
        let lengths: Vec<f64> = (0..m).map(|j| mu[j] * entry(j, k) / mu[k]).collect();
        for (j, iv) in stack_unit(&lengths, "blocks", k)?.into_iter().enumerate() {
            blocks[j][k] = iv;
        }
    }
    let mut slices = vec![vec![None; m]; m];
    for j in 0..m {
        let lengths: Vec<f64> = (0..m).map(|k| entry(j, k) / row_sums[j]).collect();
        slices[j] = stack_unit(&lengths, "slices", j)?;
    }

    let base = t.base().clone();
    let phi = phi_from_layout(&base, &blocks, &slices)?;
    let t1 = PcFunction::new(base.clone(), row_sums.clone())?;
    let nu = IntervalMeasure::new(base.clone(), row_sums)?;

    let unit = WeightedPartition::unit();
    let alpha_rows = (0..m)
        .map(|k| {
            let lens: Vec<f64> = (0..m)
                .filter_map(|j| blocks[j][k].map(|b| b.len()))
                .collect();
            let part = WeightedPartition::with_total(&lens, 1.0)?;
            Ok(IntervalMeasure::lebesgue(&part))
        })
        .collect::<std::result::Result<Vec<_>, SpaceError>>()?;
    let alpha = MarkovKernel::new(base.clone(), unit, alpha_rows)?;

    Ok(Coupling {
        base,
        operator: t.clone(),
        t1,
        nu,
        alpha,
        blocks,
        slices,
        phi,
    })
}

impl Coupling {
    pub fn base(&self) -> &WeightedPartition {
        &self.base
    }

    pub fn operator(&self) -> &L1Operator {
        &self.operator
    }

    pub fn t1(&self) -> &PcFunction {
        &self.t1
    }

    pub fn nu(&self) -> &IntervalMeasure {
        &self.nu
    }

    pub fn alpha(&self) -> &MarkovKernel {
        &self.alpha
    }

    pub fn phi(&self) -> &PwAffineBijection {
        &self.phi
    }

    pub fn block(&self, j: usize, k: usize) -> Option<Interval> {
        self.blocks[j][k]
    }

    pub fn slice(&self, j: usize, k: usize) -> Option<Interval> {
        self.slices[j][k]
    }

    pub fn dim(&self) -> usize {
        self.base.len()
    }

    /// Cell index of `x` in `J₀`.
    fn cell(&self, x: f64) -> Option<usize> {
        self.base.cell_of(x)
    }

    /// `|S_jk|` read off the target rectangles of `φ`, indexed by the
    /// cells their corners fall into.
    pub fn slice_lengths_from_phi(&self) -> Vec<Vec<f64>> {
        let m = self.dim();
        let mut out = vec![vec![0.0; m]; m];
        for pc in self.phi.pieces() {
            let j = self
                .cell(pc.target[0].midpoint())
                .expect("target inside J0");
            let k = self
                .cell(pc.source[1].midpoint())
                .expect("source inside J0");
            out[j][k] += pc.target[1].len();
        }
        out
    }

    /// `|B_jk|` read off the source rectangles of `φ`.
    pub fn block_lengths_from_phi(&self) -> Vec<Vec<f64>> {
        let m = self.dim();
        let mut out = vec![vec![0.0; m]; m];
        for pc in self.phi.pieces() {
            let j = self
                .cell(pc.target[0].midpoint())
                .expect("target inside J0");
            let k = self
                .cell(pc.source[1].midpoint())
                .expect("source inside J0");
            out[j][k] += pc.source[0].len();
        }
        out
    }

    /// Worst mismatch between `({α}×μ)(B_jk×I_k)`, `(ν×λ)(I_j×S_jk)` and
    /// `μ_j T[j][k]`, over all pieces, with masses measured geometrically.
    pub fn mass_identity_residual(&self) -> f64 {
        let mu = self.base.lengths();
        let tm = self.operator.matrix();
        let mut worst = 0.0f64;
        let m = self.dim();
        let mut seen = vec![vec![false; m]; m];
        for pc in self.phi.pieces() {
            let j = self
                .cell(pc.target[0].midpoint())
                .expect("target inside J0");
            let k = self
                .cell(pc.source[1].midpoint())
                .expect("source inside J0");
            seen[j][k] = true;
            let alpha_row = &self.alpha.rows()[k];
            let source_mass = alpha_row.mass_of(&pc.source[0]) * pc.source[1].len();
            let target_mass = self.nu.mass_of(&pc.target[0]) * pc.target[1].len();
            let expected = mu[j] * tm[(j, k)];
            worst = worst
                .max((source_mass - expected).abs())
                .max((target_mass - expected).abs());
        }
        for j in 0..m {
            for k in 0..m {
                if !seen[j][k] {
                    worst = worst.max(mu[j] * tm[(j, k)].abs());
                }
            }
        }
        worst
    }

    /// A copy with the boundary between `S_jk` and the next nonempty slice
    /// of row `j` moved by `delta`. Only useful as a negative control: the
    /// result is still an invertible map but no longer a coupling for `T`.
    pub fn with_shifted_slice(&self, j: usize, k: usize, delta: f64) -> Result<Self> {
        let err = |reason: &str| DilationError::Perturbation {
            row: j,
            col: k,
            reason: reason.to_string(),
        };
        let m = self.dim();
        if j >= m || k >= m {
            return Err(err("index out of range"));
        }
        let cur = self.slices[j][k].ok_or_else(|| err("slice is empty"))?;
        let next = (k + 1..m)
            .find(|&l| self.slices[j][l].is_some())
            .ok_or_else(|| err("no following slice in the row"))?;
        let nxt = self.slices[j][next].unwrap();
        let cut = cur.hi + delta;
        if cut <= cur.lo || cut >= nxt.hi {
            return Err(err("shift leaves an empty slice"));
        }
        let mut out = self.clone();
        out.slices[j][k] = Some(Interval::new(cur.lo, cut));
        out.slices[j][next] = Some(Interval::new(cut, nxt.hi));
        out.phi = phi_from_layout(&out.base, &out.blocks, &out.slices)?;
        Ok(out)
    }
}

/// Computes `(T1)_j Σ_k |S_jk| f_k` per cell with slice lengths read from
/// `φ`, compares with `Tf`, and also evaluates the `x₁` integral by a
/// midpoint rule on the slice grid refined `refine` times using pointwise
/// evaluation of `φ⁻¹`. Returns the worst of both residuals.
pub fn verify_main_result(c: &Coupling, f: &PcFunction) -> Result<f64> {
    verify_main_result_with(c, f, 10)
}

pub fn verify_main_result_with(c: &Coupling, f: &PcFunction, refine: usize) -> Result<f64> {
    let tf = apply_operator(c.operator(), f, 1)?;
    let s = c.slice_lengths_from_phi();
    let mut worst = 0.0f64;
    for (j, row) in s.iter().enumerate() {
        let geometric = c.t1.value(j) * row.iter().zip(f.values()).map(|(l, v)| l * v).sum::<f64>();
        let quad = c.t1.value(j) * main_result_quadrature(c, f, j, refine)?;
        worst = worst
            .max((geometric - tf.value(j)).abs())
            .max((quad - tf.value(j)).abs());
    }
    Ok(worst)
}

/// `∫ f(φ⁻¹₀(x₀, x₁)) dx₁` at the midpoint `x₀` of cell `j`.
fn main_result_quadrature(c: &Coupling, f: &PcFunction, j: usize, refine: usize) -> Result<f64> {
    let x0 = c.base.cell(j).midpoint();
    let mut edges: Vec<f64> = c
        .phi
        .pieces()
        .iter()
        .filter(|pc| pc.target[0].contains(x0))
        .flat_map(|pc| [pc.target[1].lo, pc.target[1].hi])
        .collect();
    edges.push(0.0);
    edges.push(1.0);
    edges.sort_by(|a, b| a.total_cmp(b));
    edges.dedup_by(|a, b| (*a - *b).abs() <= CONSTRUCTION_TOL);
    let mut acc = 0.0;
    for w in edges.windows(2) {
        let h = (w[1] - w[0]) / refine as f64;
        for q in 0..refine {
            let x1 = w[0] + (q as f64 + 0.5) * h;
            let pre = c.phi.apply_inverse(&[x0, x1])?;
            let v = f.eval(pre[1]).ok_or(DilationError::MissingCoordinate(0))?;
            acc += v * h;
        }
    }
    Ok(acc)
}

/// A point of `J^ℤ` truncated to the coordinates `lo..=hi`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPoint {
    lo: i64,
    coords: Vec<f64>,
}

impl WindowPoint {
    pub fn new(lo: i64, coords: Vec<f64>) -> Self {
        assert!(!coords.is_empty(), "window needs at least one coordinate");
        assert!(
            coords.iter().all(|x| x.is_finite() && *x >= 0.0),
            "window coordinates must be finite and nonnegative"
        );
        Self { lo, coords }
    }

    pub fn lo(&self) -> i64 {
        self.lo
    }

    pub fn hi(&self) -> i64 {
        self.lo + self.coords.len() as i64 - 1
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn get(&self, i: i64) -> Option<f64> {
        if i < self.lo || i > self.hi() {
            return None;
        }
        Some(self.coords[(i - self.lo) as usize])
    }

    fn at(&self, i: i64) -> f64 {
        self.coords[(i - self.lo) as usize]
    }

    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        (self.lo == other.lo && self.coords.len() == other.coords.len()).then(|| {
            self.coords
                .iter()
                .zip(&other.coords)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// `τ` (or `τ⁻¹`) on a window. Forward maps `[lo, hi]` to `[lo+1, hi+1]`
/// and needs `lo ≤ −1 ≤ 0 ≤ hi`; inverse maps `[lo, hi]` to `[lo−1, hi−1]`
/// and needs `lo ≤ 0 < 1 ≤ hi`.
pub fn tau_apply(c: &Coupling, w: &WindowPoint, direction: Direction) -> Result<WindowPoint> {
    let (lo, hi) = (w.lo(), w.hi());
    match direction {
        Direction::Forward => {
            if lo > -1 || hi < 0 {
                return Err(DilationError::WindowTooSmall {
                    lo,
                    hi,
                    need: "coordinates -1 and 0".into(),
                });
            }
            let seam = c.phi.apply(&[w.at(-1), w.at(0)])?;
            let coords = (lo + 1..=hi + 1)
                .map(|i| match i {
                    0 => seam[0],
                    1 => seam[1],
                    _ => w.at(i - 1),
                })
                .collect();
            Ok(WindowPoint { lo: lo + 1, coords })
        }
        Direction::Inverse => {
            if lo > 0 || hi < 1 {
                return Err(DilationError::WindowTooSmall {
                    lo,
                    hi,
                    need: "coordinates 0 and 1".into(),
                });
            }
            let seam = c.phi.apply_inverse(&[w.at(0), w.at(1)])?;
            let coords = (lo - 1..=hi - 1)
                .map(|i| match i {
                    -1 => seam[0],
                    0 => seam[1],
                    _ => w.at(i + 1),
                })
                .collect();
            Ok(WindowPoint { lo: lo - 1, coords })
        }
    }
}

/// `dν∞/dμ∞` at a window point, which is `(T1)(x₀)`.
pub fn window_density(c: &Coupling, w: &WindowPoint) -> Result<f64> {
    let x0 = w.get(0).ok_or(DilationError::MissingCoordinate(0))?;
    let j = c.cell(x0).ok_or(DilationError::MissingCoordinate(0))?;
    Ok(c.t1.value(j))
}

/// `(Qⁿf)(w) = Π_{i<n} (T1)((τ⁻ⁱw)₀) · f((τ⁻ⁿw)₀)` for `f` depending on `x₀`.
pub fn q_apply_pointwise(c: &Coupling, f: &PcFunction, n: usize, w: &WindowPoint) -> Result<f64> {
    if w.lo() > 0 || w.hi() < n as i64 {
        return Err(DilationError::WindowTooSmall {
            lo: w.lo(),
            hi: w.hi(),
            need: format!("coordinates 0..={n}"),
        });
    }
    let mut weight = 1.0;
    let mut cur = w.clone();
    for _ in 0..n {
        weight *= window_density(c, &cur)?;
        cur = tau_apply(c, &cur, Direction::Inverse)?;
    }
    let x0 = cur.at(0);
    let v = f.eval(x0).ok_or(DilationError::MissingCoordinate(0))?;
    Ok(weight * v)
}

/// `E Qⁿ f` by enumerating all cell paths `j = k₀, k₁, …, kₙ` with weights
/// `Π (T1)_{k_{i−1}} |S_{k_{i−1} k_i}|`, the slice lengths measured on `φ`.
pub fn expectation_eqn(c: &Coupling, f: &PcFunction, n: usize) -> Result<PcFunction> {
    let m = c.dim();
    if f.values().len() != m {
        return Err(OperatorError::BaseMismatch.into());
    }
    let s = c.slice_lengths_from_phi();
    let weights: Vec<Vec<f64>> = (0..m)
        .map(|j| (0..m).map(|k| c.t1.value(j) * s[j][k]).collect())
        .collect();
    let values = (0..m)
        .map(|j| path_sum(&weights, f.values(), j, n))
        .collect();
    Ok(PcFunction::new(c.base.clone(), values)?)
}

/// Sum over all `mⁿ` paths from `start`, visited in lexicographic order.
fn path_sum(weights: &[Vec<f64>], f: &[f64], start: usize, n: usize) -> f64 {
    let m = f.len();
    if n == 0 {
        return f[start];
    }
    let mut path = vec![0usize; n];
    let mut total = 0.0;
    'paths: loop {
        let mut w = 1.0;
        let mut prev = start;
        for &k in &path {
            w *= weights[prev][k];
            prev = k;
        }
        total += w * f[prev];
        // odometer
        for slot in (0..n).rev() {
            path[slot] += 1;
            if path[slot] < m {
                continue 'paths;
            }
            path[slot] = 0;
        }
        break;
    }
    total
}

#[derive(Debug, Clone)]
pub struct DilationReport {
    /// `max_j |E Qⁿ f − Tⁿ f|` for `n = 0..=horizon`.
    pub residuals: Vec<f64>,
    /// `project ∘ T′ⁿ ∘ embed − Tⁿ` for the same range.
    pub extension_residuals: Vec<f64>,
}

impl DilationReport {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(0.0, f64::max)
    }
}

/// Extends `T` to an integral-preserving `T′`, builds its coupling, and
/// compares the path-sum `E Qⁿ` on the embedded `f` with `Tⁿ f`.
pub fn verify_dilation(t: &L1Operator, f: &PcFunction, horizon: usize) -> Result<DilationReport> {
    let ext = make_integral_preserving(t)?;
    let coupling = build_coupling(&ext.operator)?;
    let lifted = ext.embed_function(f);
    let m = t.dim();
    let mut residuals = Vec::with_capacity(horizon + 1);
    for n in 0..=horizon {
        let lhs = expectation_eqn(&coupling, &lifted, n)?;
        let rhs = apply_operator(t, f, n)?;
        let r = (0..m)
            .map(|j| (lhs.value(j) - rhs.value(j)).abs())
            .fold(0.0, f64::max);
        residuals.push(r);
    }
    Ok(DilationReport {
        residuals,
        extension_residuals: ext.power_residuals(t, horizon)?,
    })
}

/// `E Q F` for `F(x₀, x₁)` on a product grid, integrating exactly over the
/// seam preimage `φ⁻¹₀(x₀, x₁)` and the shifted coordinate.
fn eq_on_grid(c: &Coupling, f: &GridFunction) -> Result<Vec<f64>> {
    let axes = f.axes();
    if axes.len() != 2
        || (axes[0].total() - c.base.total()).abs() > CONSTRUCTION_TOL
        || (axes[1].total() - 1.0).abs() > CONSTRUCTION_TOL
    {
        return Err(SpaceError::GridMismatch("expected a (x0, x1) grid".into()).into());
    }
    // ∫ F(u, y) dy for each row u of the grid
    let row_integrals: Vec<f64> = (0..axes[0].len())
        .map(|u| {
            axes[1]
                .lengths()
                .iter()
                .enumerate()
                .map(|(y, len)| f.at(&[u, y]) * len)
                .sum()
        })
        .collect();
    let mut out = vec![0.0; c.dim()];
    for pc in c.phi.pieces() {
        let j = c.cell(pc.target[0].midpoint()).expect("target inside J0");
        let b = pc.axes[1];
        for (u, cell) in axes[0].cells().enumerate() {
            if let Some(x) = cell.intersect(&pc.source[1]) {
                // measure of {x₁ ∈ S_jk : φ⁻¹₀(x₀, x₁) ∈ x}
                let pre = b.apply(x.hi) - b.apply(x.lo);
                out[j] += pre * row_integrals[u];
            }
        }
    }
    for (j, v) in out.iter_mut().enumerate() {
        *v *= c.t1.value(j);
    }
    Ok(out)
}

/// `E Q F` for `F(x₀, x₁)` on a product grid, from pointwise `τ⁻¹` on the
/// window `(x₀, x₁, x₂)`. `Q F` is piecewise constant in `(x₁, x₂)`; the
/// quadrature grid contains every jump (slice ends, images of `F`'s `x₀`
/// breakpoints, `F`'s `x₁` breakpoints), so the midpoint sums are exact.
fn eq_pointwise(c: &Coupling, f: &GridFunction) -> Result<Vec<f64>> {
    let axes = f.axes();
    let z_cells: Vec<Interval> = axes[1].cells().collect();
    (0..c.dim())
        .map(|j| {
            let cell = c.base.cell(j);
            let mut ys = vec![0.0, 1.0];
            for pc in c.phi.pieces() {
                if !cell.contains(pc.target[0].midpoint()) {
                    continue;
                }
                ys.extend([pc.target[1].lo, pc.target[1].hi]);
                let src = pc.source[1];
                ys.extend(
                    axes[0]
                        .breakpoints()
                        .iter()
                        .filter(|&&p| p > src.lo && p < src.hi)
                        .map(|&p| pc.axes[1].apply(p)),
                );
            }
            ys.sort_by(f64::total_cmp);
            ys.dedup_by(|a, b| (*a - *b).abs() <= 1e-15);
            let x0 = cell.midpoint();
            let mut acc = 0.0;
            for y in ys.windows(2) {
                for z in &z_cells {
                    let w = WindowPoint::new(0, vec![x0, 0.5 * (y[0] + y[1]), z.midpoint()]);
                    let back = tau_apply(c, &w, Direction::Inverse)?;
                    let v = f
                        .eval(&[back.at(0), back.at(1)])
                        .ok_or(DilationError::MissingCoordinate(0))?;
                    acc += v * (y[1] - y[0]) * z.len();
                }
            }
            Ok(c.t1.value(j) * acc)
        })
        .collect()
}

/// `max_j |(E Q F)_j − (E Q E F)_j|` for `F(x₀, x₁)` on a product grid. The
/// left side goes through pointwise `τ⁻¹`, the right side integrates `x₁`
/// out first and uses the seam preimage lengths.
pub fn verify_eqe(c: &Coupling, f: &GridFunction) -> Result<f64> {
    let eqf = eq_pointwise(c, f)?;
    let axes = f.axes();
    let ef: Vec<f64> = (0..axes[0].len())
        .map(|u| {
            axes[1]
                .lengths()
                .iter()
                .enumerate()
                .map(|(y, len)| f.at(&[u, y]) * len)
                .sum()
        })
        .collect();
    let lifted = GridFunction::new(vec![axes[0].clone(), WeightedPartition::unit()], ef)?;
    let eqef = eq_on_grid(c, &lifted)?;
    Ok(eqf
        .iter()
        .zip(&eqef)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// `∫ Q F dμ∞ − ∫ F dμ∞` for `F(x₀, x₁)` on a product grid.
pub fn q_integral_defect(c: &Coupling, f: &GridFunction) -> Result<f64> {
    eq_on_grid(c, f)?; // shape check
    let eqf = eq_pointwise(c, f)?;
    let lhs: f64 = eqf.iter().zip(c.base.lengths()).map(|(v, l)| v * l).sum();
    let axes = f.axes();
    let mut rhs = 0.0;
    for (u, lu) in axes[0].lengths().iter().enumerate() {
        for (y, ly) in axes[1].lengths().iter().enumerate() {
            rhs += f.at(&[u, y]) * lu * ly;
        }
    }
    Ok((lhs - rhs).abs())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauTransportReport {
    /// Worst cellwise mass gap between `τ_* μ∞` and `ν∞` on the window.
    pub mass_residual: f64,
    /// Worst gap between `d(τ_* μ∞)/dμ∞` and `(T1)(x₀)` per grid cell.
    pub density_residual: f64,
    /// Worst `φ_*({α}×μ)` versus `ν×λ` gap on the seam alone.
    pub seam_residual: f64,
}

impl TauTransportReport {
    pub fn max(&self) -> f64 {
        self.mass_residual
            .max(self.density_residual)
            .max(self.seam_residual)
    }
}

/// Pushes the windowed `μ∞` on coordinates `−radius..=radius` forward under
/// `τ` and compares it with the windowed `ν∞` on `−radius+1..=radius+1`.
///
/// With axes indexed by position in the window, `τ` is `φ` on the two seam
/// axes and the identity elsewhere, so the check is built as a product map.
/// Non-seam axes are split at 1/3 so the tensor structure is exercised.
pub fn verify_tau_transport(c: &Coupling, radius: usize) -> Result<TauTransportReport> {
    if radius < 1 {
        return Err(DilationError::WindowTooSmall {
            lo: 0,
            hi: 0,
            need: "radius >= 1".into(),
        });
    }
    let r = radius as i64;
    let n_axes = 2 * radius + 1;
    let seam = radius - 1; // axis of x₋₁ in the source window
    let total = c.base.total();
    let unit = Interval::new(0.0, 1.0);
    let j0 = Interval::new(0.0, total);

    let mut domain = vec![unit; n_axes];
    domain[seam + 1] = j0;
    let mut codomain = vec![unit; n_axes];
    codomain[seam] = j0;
    let pairs = c
        .phi
        .pieces()
        .iter()
        .map(|pc| {
            let mut s = domain.clone();
            let mut t = codomain.clone();
            s[seam] = pc.source[0];
            s[seam + 1] = pc.source[1];
            t[seam] = pc.target[0];
            t[seam + 1] = pc.target[1];
            (s, t)
        })
        .collect();
    let tau = PwAffineBijection::from_boxes(domain, codomain, pairs)?;

    let split = make_partition(&[1.0 / 3.0, 2.0 / 3.0])?;
    let lebesgue_split = IntervalMeasure::lebesgue(&split);
    let mu0 = IntervalMeasure::lebesgue(&c.base);
    // source window: coordinate i sits on axis i + r, x₀ on axis r
    let source_factors: Vec<IntervalMeasure> = (-r..=r)
        .map(|i| {
            if i == 0 {
                mu0.clone()
            } else {
                lebesgue_split.clone()
            }
        })
        .collect();
    let mu_window = ProductMeasure::product(&source_factors);
    let pushed = transport_product(&tau, &mu_window)?;

    // target window: coordinate i sits on axis i + r − 1, x₀ on axis r − 1
    let target_factors: Vec<IntervalMeasure> = (-r + 1..=r + 1)
        .map(|i| {
            if i == 0 {
                c.nu.clone()
            } else {
                lebesgue_split.clone()
            }
        })
        .collect();
    let nu_window = ProductMeasure::product(&target_factors);
    let mass_residual = pushed.max_mass_diff(&nu_window)?;

    let reference_factors: Vec<IntervalMeasure> = (-r + 1..=r + 1)
        .map(|i| {
            if i == 0 {
                mu0.clone()
            } else {
                lebesgue_split.clone()
            }
        })
        .collect();
    let mu_target_window = ProductMeasure::product(&reference_factors);
    let mut density_residual = 0.0f64;
    for (b, ratio) in pushed.radon_nikodym(&mu_target_window)? {
        let coords = b.iter().map(Interval::midpoint).collect();
        let w = WindowPoint::new(-r + 1, coords);
        density_residual = density_residual.max((ratio - window_density(c, &w)?).abs());
    }

    let seam_source = ProductMeasure::product(&[
        IntervalMeasure::lebesgue(&WeightedPartition::unit()),
        mu0.clone(),
    ]);
    let seam_pushed = transport_product(&c.phi, &seam_source)?;
    let seam_target = ProductMeasure::product(&[
        c.nu.clone(),
        IntervalMeasure::lebesgue(&WeightedPartition::unit()),
    ]);
    let seam_residual = seam_pushed.max_mass_diff(&seam_target)?;

    Ok(TauTransportReport {
        mass_residual,
        density_residual,
        seam_residual,
    })
}

/// Random positive contraction with weights `μ` summing to 1.
///
/// Entries are uniform on `(0, 1)`, zeroed with probability `sparsity` while
/// keeping every row and column nonempty, then columns are rescaled so
/// `Σ_i μ_i T[i][j] = μ_j`. Without `integral_preserving` each column is
/// further scaled by a factor drawn from `[0.5, 1]`.
pub fn random_contraction<R: rand::Rng>(
    rng: &mut R,
    m: usize,
    integral_preserving: bool,
    sparsity: f64,
) -> L1Operator {
    assert!(m >= 1);
    let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    let mu: Vec<f64> = raw.iter().map(|w| w / sum).collect();
    let mut a = DMatrix::from_fn(m, m, |_, _| {
        if m > 1 && rng.random::<f64>() < sparsity {
            0.0
        } else {
            rng.random_range(0.01..1.0)
        }
    });
    for i in 0..m {
        if a.row(i).iter().all(|&v| v == 0.0) {
            a[(i, rng.random_range(0..m))] = rng.random_range(0.01..1.0);
        }
    }
    for j in 0..m {
        if a.column(j).iter().all(|&v| v == 0.0) {
            a[(rng.random_range(0..m), j)] = rng.random_range(0.01..1.0);
        }
    }
    for j in 0..m {
        let col: f64 = (0..m).map(|i| mu[i] * a[(i, j)]).sum();
        let scale = if integral_preserving {
            1.0
        } else {
            rng.random_range(0.5..=1.0)
        };
        for i in 0..m {
            // left to right, so m = 1 gives exactly 1
            a[(i, j)] = a[(i, j)] * scale * mu[j] / col;
        }
    }
    L1Operator::new(make_partition(&mu).expect("positive weights"), a).expect("square")
}

/// Random `F(x₀, x₁)` on a product grid: `x₀` cells of total `total`, `x₁`
/// cells of `[0, 1)`, values uniform on `[-1, 1)`.
pub fn random_grid_function<R: rand::Rng>(
    rng: &mut R,
    total: f64,
    max_cells: usize,
) -> GridFunction {
    let a0 = random_partition(rng, total, max_cells);
    let a1 = random_partition(rng, 1.0, max_cells);
    let values = (0..a0.len() * a1.len())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    GridFunction::new(vec![a0, a1], values).expect("matching shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12
    }

    pub(crate) fn instance_a() -> L1Operator {
        L1Operator::from_rows(&[0.5, 0.5], &[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap()
    }

    pub(crate) fn instance_b() -> L1Operator {
        L1Operator::from_rows(&[1.0 / 3.0, 2.0 / 3.0], &[vec![0.0, 1.0], vec![0.5, 0.5]]).unwrap()
    }

    fn fvec(t: &L1Operator, v: &[f64]) -> PcFunction {
        PcFunction::new(t.base().clone(), v.to_vec()).unwrap()
    }

    #[test]
    fn extension_examples() {
        let b = instance_b();
        let ext = make_integral_preserving(&b).unwrap();
        assert!(ext.deficit.iter().all(|&d| d.abs() <= 1e-15));
        assert_eq!(ext.operator.matrix()[(2, 2)], 1.0);
        assert!(classify(&ext.operator).integral_preserving);

        let c = L1Operator::from_rows(&[0.5, 0.5], &[vec![0.5, 0.0], vec![0.0, 0.5]]).unwrap();
        let ext = make_integral_preserving(&c).unwrap();
        assert!(close(ext.deficit[0], 0.25) && close(ext.deficit[1], 0.25));
        let last: Vec<f64> = ext.operator.matrix().row(2).iter().copied().collect();
        assert!(close(last[0], 0.25) && close(last[1], 0.25) && last[2] == 1.0);
        assert!(ext
            .power_residuals(&c, 6)
            .unwrap()
            .iter()
            .all(|&r| r <= 1e-12));

        let zero = L1Operator::from_rows(&[0.25, 0.75], &[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let ext = make_integral_preserving(&zero).unwrap();
        assert_eq!(ext.deficit, vec![0.25, 0.75]);
        assert_eq!(ext.operator.base().label(2), CEMETERY);
    }

    #[test]
    fn extension_rejects_non_contraction() {
        let big = L1Operator::from_rows(&[0.5, 0.5], &[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            make_integral_preserving(&big),
            Err(DilationError::NotPositiveContraction { .. })
        ));
    }

    #[test]
    fn coupling_layout_examples() {
        let c = build_coupling(&instance_a()).unwrap();
        let b = c.block_lengths_from_phi();
        let s = c.slice_lengths_from_phi();
        for j in 0..2 {
            for k in 0..2 {
                assert!(close(b[j][k], 0.5) && close(s[j][k], 0.5));
            }
        }
        assert_eq!(c.phi().pieces().len(), 4);

        let c = build_coupling(&instance_b()).unwrap();
        let b = c.block_lengths_from_phi();
        let s = c.slice_lengths_from_phi();
        // B_{·1} = (0, 1), B_{·2} = (1/2, 1/2)
        assert!(close(b[0][0], 0.0) && close(b[1][0], 1.0));
        assert!(close(b[0][1], 0.5) && close(b[1][1], 0.5));
        // S_{1·} = (0, 1), S_{2·} = (1/2, 1/2)
        assert!(close(s[0][0], 0.0) && close(s[0][1], 1.0));
        assert!(close(s[1][0], 0.5) && close(s[1][1], 0.5));
        assert!(c.mass_identity_residual() <= 1e-12);
    }

    #[test]
    fn identity_coupling_is_a_relabeled_shift() {
        let t = L1Operator::identity(&make_partition(&[0.2, 0.5, 0.3]).unwrap());
        let c = build_coupling(&t).unwrap();
        for j in 0..3 {
            assert_eq!(c.slice(j, j), Some(Interval::new(0.0, 1.0)));
            assert_eq!(c.block(j, j), Some(Interval::new(0.0, 1.0)));
        }
        let w = WindowPoint::new(-2, vec![0.9, 0.1, 0.55, 0.3]);
        let tw = tau_apply(&c, &w, Direction::Forward).unwrap();
        assert_eq!(tw.lo(), -1);
        // x₀ = 0.55 sits in cell 1, so τ puts x₀' in cell 1 and x₁' = x₀-relabel
        let cell = |x: f64| c.base().cell_of(x).unwrap();
        assert_eq!(cell(tw.get(0).unwrap()), cell(w.get(0).unwrap()));
        assert_eq!(tw.get(-1), w.get(-2));
        assert_eq!(tw.get(2), w.get(1));
    }

    #[test]
    fn coupling_rejects_degenerate_rows() {
        // column 0 feeds only row 1, row 0 is empty
        let t = L1Operator::from_rows(&[0.5, 0.5], &[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert!(matches!(
            build_coupling(&t),
            Err(DilationError::DegenerateRow { row: 0, .. })
        ));
        let c = L1Operator::from_rows(&[0.5, 0.5], &[vec![0.5, 0.0], vec![0.0, 0.5]]).unwrap();
        assert!(matches!(
            build_coupling(&c),
            Err(DilationError::NotIntegralPreserving(_))
        ));
    }

    #[test]
    fn main_result_examples() {
        let id = L1Operator::identity(&make_partition(&[0.4, 0.6]).unwrap());
        let c = build_coupling(&id).unwrap();
        assert!(verify_main_result(&c, &fvec(&id, &[2.0, -1.0])).unwrap() <= 1e-15);

        let b = instance_b();
        let c = build_coupling(&b).unwrap();
        assert!(verify_main_result(&c, &fvec(&b, &[1.0, 0.0])).unwrap() <= 1e-12);
    }

    #[test]
    fn tau_example_instance_b() {
        let c = build_coupling(&instance_b()).unwrap();
        let w = WindowPoint::new(-1, vec![0.25, 0.2]);
        let tw = tau_apply(&c, &w, Direction::Forward).unwrap();
        // piece (2,1): [0,1)×[0,1/3) → [1/3,1)×[0,1/2)
        assert!(close(tw.get(0).unwrap(), 0.5));
        assert!(close(tw.get(1).unwrap(), 0.3));
        let back = tau_apply(&c, &tw, Direction::Inverse).unwrap();
        assert!(back.max_abs_diff(&w).unwrap() <= 1e-12);
    }

    #[test]
    fn tau_rejects_small_windows() {
        let c = build_coupling(&instance_a()).unwrap();
        let w = WindowPoint::new(0, vec![0.3, 0.4]);
        assert!(matches!(
            tau_apply(&c, &w, Direction::Forward),
            Err(DilationError::WindowTooSmall { .. })
        ));
        let w = WindowPoint::new(-1, vec![0.3, 0.4]);
        assert!(matches!(
            tau_apply(&c, &w, Direction::Inverse),
            Err(DilationError::WindowTooSmall { .. })
        ));
    }

    #[test]
    fn window_density_examples() {
        let c = build_coupling(&instance_b()).unwrap();
        for x0 in [0.1, 0.5, 0.9] {
            let w = WindowPoint::new(0, vec![x0]);
            assert!(close(window_density(&c, &w).unwrap(), 1.0));
        }
        // μ = (1/2, 1/2), rows summing to (1/2, 3/2)
        let t = L1Operator::from_rows(&[0.5, 0.5], &[vec![0.5, 0.0], vec![0.5, 1.0]]).unwrap();
        assert!(classify(&t).integral_preserving);
        let c = build_coupling(&t).unwrap();
        assert!(close(
            window_density(&c, &WindowPoint::new(0, vec![0.2])).unwrap(),
            0.5
        ));
        assert!(close(
            window_density(&c, &WindowPoint::new(-1, vec![0.0, 0.7])).unwrap(),
            1.5
        ));
        assert!(matches!(
            window_density(&c, &WindowPoint::new(1, vec![0.2])),
            Err(DilationError::MissingCoordinate(0))
        ));
    }

    #[test]
    fn q_pointwise_examples() {
        let a = instance_a();
        let c = build_coupling(&a).unwrap();
        let f = fvec(&a, &[1.0, 0.0]);
        let w = WindowPoint::new(0, vec![0.1, 0.3]);
        assert_eq!(q_apply_pointwise(&c, &f, 0, &w).unwrap(), 1.0);
        // x₁ = 0.3 ∈ S_11 = [0, 1/2)
        assert!(close(q_apply_pointwise(&c, &f, 1, &w).unwrap(), 1.0));
        let w = WindowPoint::new(0, vec![0.1, 0.7]);
        assert!(close(q_apply_pointwise(&c, &f, 1, &w).unwrap(), 0.0));
        assert!(q_apply_pointwise(&c, &f, 2, &w).is_err());

        let id = L1Operator::identity(&make_partition(&[0.3, 0.7]).unwrap());
        let c = build_coupling(&id).unwrap();
        let g = fvec(&id, &[5.0, 7.0]);
        let w = WindowPoint::new(0, vec![0.5, 0.9, 0.1]);
        assert_eq!(q_apply_pointwise(&c, &g, 2, &w).unwrap(), 7.0);
    }

    #[test]
    fn expectation_examples() {
        let a = instance_a();
        let c = build_coupling(&a).unwrap();
        let f = fvec(&a, &[1.0, 0.0]);
        assert_eq!(expectation_eqn(&c, &f, 0).unwrap(), f);
        let e2 = expectation_eqn(&c, &f, 2).unwrap();
        assert!(close(e2.value(0), 0.5) && close(e2.value(1), 0.5));

        let b = instance_b();
        let c = build_coupling(&b).unwrap();
        let f = fvec(&b, &[1.0, 0.0]);
        let e2 = expectation_eqn(&c, &f, 2).unwrap();
        assert!(close(e2.value(0), 0.5) && close(e2.value(1), 0.25));
    }

    #[test]
    fn dilation_examples() {
        let id = L1Operator::identity(&make_partition(&[0.3, 0.7]).unwrap());
        let r = verify_dilation(&id, &fvec(&id, &[1.0, -3.0]), 5).unwrap();
        assert!(r.residuals.iter().all(|&x| x == 0.0));

        let b = instance_b();
        let r = verify_dilation(&b, &fvec(&b, &[0.3, 1.7]), 5).unwrap();
        assert!(r.max_residual() <= 1e-9);

        let half = L1Operator::from_rows(&[0.5, 0.5], &[vec![0.5, 0.0], vec![0.0, 0.5]]).unwrap();
        let r = verify_dilation(&half, &fvec(&half, &[1.0, 2.0]), 4).unwrap();
        assert!(r.max_residual() <= 1e-9);
        assert!(r.extension_residuals.iter().all(|&x| x <= 1e-12));
    }

    #[test]
    fn eqe_examples() {
        let a = instance_a();
        let c = build_coupling(&a).unwrap();
        let half = make_partition(&[0.5, 0.5]).unwrap();
        // depends only on x₀
        let f =
            GridFunction::new(vec![half.clone(), half.clone()], vec![1.0, 1.0, 4.0, 4.0]).unwrap();
        assert!(verify_eqe(&c, &f).unwrap() <= 1e-15);
        // g(x₁)
        let g =
            GridFunction::new(vec![half.clone(), half.clone()], vec![2.0, 6.0, 2.0, 6.0]).unwrap();
        assert!(verify_eqe(&c, &g).unwrap() <= 1e-12);
        let eq = eq_on_grid(&c, &g).unwrap();
        assert!(eq.iter().all(|&v| close(v, 4.0)));
    }

    #[test]
    fn tau_transport_examples() {
        let id = L1Operator::identity(&make_partition(&[0.3, 0.7]).unwrap());
        let c = build_coupling(&id).unwrap();
        assert!(verify_tau_transport(&c, 1).unwrap().max() <= 1e-15);
        for t in [instance_a(), instance_b()] {
            let c = build_coupling(&t).unwrap();
            assert!(verify_tau_transport(&c, 2).unwrap().max() <= 1e-10);
        }
        assert!(verify_tau_transport(&c, 0).is_err());
    }

    #[test]
    fn shifted_slice_breaks_main_result() {
        let c = build_coupling(&instance_a()).unwrap();
        let bad = c.with_shifted_slice(0, 0, 0.1).unwrap();
        let f = fvec(&instance_a(), &[1.0, 0.0]);
        assert!(verify_main_result(&bad, &f).unwrap() > 0.05);
        assert!(c.with_shifted_slice(0, 1, 0.1).is_err());
    }

    #[test]
    fn random_contractions_classify() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for m in 1..7 {
            let t = random_contraction(&mut rng, m, true, 0.3);
            assert!(classify(&t).is_markov());
            let t = random_contraction(&mut rng, m, false, 0.3);
            assert!(classify(&t).is_positive_contraction());
        }
        let one = random_contraction(&mut rng, 1, true, 0.0);
        assert!(close(one.matrix()[(0, 0)], 1.0));
    }
}
