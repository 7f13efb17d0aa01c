//! Operators on `L1` of a weighted partition.
//!
//! Matrices act as `(Tf)_i = Σ_j T[i][j] f_j`, so row `i` is the output cell
//! and `T1` is the vector of row sums. With cell weights `μ`, the `L1(μ)`
//! norm of a positive `T` is the largest weighted column sum
//! `max_j Σ_i μ_i T[i][j] / μ_j`.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::interval_space::{
    common_refinement, pull_through_inverse, radon_nikodym, transport, GridFunction, Interval,
    IntervalMeasure, PcFunction, ProductMeasure, PwAffineBijection, SpaceError, WeightedPartition,
    CONSTRUCTION_TOL,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OperatorError {
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("matrix is {rows}x{cols} but the base has {cells} cells")]
    Dimension {
        rows: usize,
        cols: usize,
        cells: usize,
    },
    #[error("function base does not match operator base")]
    BaseMismatch,
    #[error("kernel row {row} has mass {mass}, expected 1")]
    RowNotNormalized { row: usize, mass: f64 },
    #[error("project ∘ embed differs from the identity by {0:e}")]
    NotAProjection(f64),
    #[error("frobenius-perron operator needs a one-dimensional map on the measure's interval")]
    MapMismatch,
}

pub type Result<T> = std::result::Result<T, OperatorError>;

/// Linear operator on piecewise-constant functions over `base`.
#[derive(Debug, Clone, PartialEq)]
pub struct L1Operator {
    base: WeightedPartition,
    matrix: DMatrix<f64>,
}

impl L1Operator {
    pub fn new(base: WeightedPartition, matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != base.len() || matrix.ncols() != base.len() {
            return Err(OperatorError::Dimension {
                rows: matrix.nrows(),
                cols: matrix.ncols(),
                cells: base.len(),
            });
        }
        Ok(Self { base, matrix })
    }

    /// From weights and row-major nested rows.
    pub fn from_rows(weights: &[f64], rows: &[Vec<f64>]) -> Result<Self> {
        let base = crate::interval_space::make_partition(weights)?;
        let m = base.len();
        if rows.len() != m || rows.iter().any(|r| r.len() != m) {
            return Err(OperatorError::Dimension {
                rows: rows.len(),
                cols: rows.first().map_or(0, Vec::len),
                cells: m,
            });
        }
        let matrix = DMatrix::from_fn(m, m, |i, j| rows[i][j]);
        Self::new(base, matrix)
    }

    pub fn identity(base: &WeightedPartition) -> Self {
        Self {
            matrix: DMatrix::identity(base.len(), base.len()),
            base: base.clone(),
        }
    }

    pub fn base(&self) -> &WeightedPartition {
        &self.base
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.base.len()
    }

    pub fn weights(&self) -> &[f64] {
        self.base.lengths()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.matrix
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect()
    }

    /// `T1` as a vector of row sums.
    pub fn row_sums(&self) -> Vec<f64> {
        self.matrix.row_iter().map(|r| r.sum()).collect()
    }

    pub fn power(&self, n: usize) -> DMatrix<f64> {
        let mut acc = DMatrix::identity(self.dim(), self.dim());
        for _ in 0..n {
            acc = &self.matrix * acc;
        }
        acc
    }
}

/// `max_j Σ_i μ_i |T[i][j]| / μ_j`; the exact `L1(μ)` norm for positive `T`.
pub fn operator_norm_l1(t: &L1Operator) -> f64 {
    let mu = t.weights();
    (0..t.dim())
        .map(|j| {
            let col: f64 = (0..t.dim()).map(|i| mu[i] * t.matrix[(i, j)].abs()).sum();
            col / mu[j]
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Classification {
    pub positive: bool,
    pub contraction: bool,
    pub integral_preserving: bool,
    pub norm: f64,
    /// Most negative entry, or 0.
    pub min_entry: f64,
    /// `max_j |Σ_i μ_i T[i][j] − μ_j|`.
    pub integral_residual: f64,
}

impl Classification {
    pub fn is_positive_contraction(&self) -> bool {
        self.positive && self.contraction
    }

    pub fn is_markov(&self) -> bool {
        self.positive && self.contraction && self.integral_preserving
    }
}

pub fn classify(t: &L1Operator) -> Classification {
    let mu = t.weights();
    let min_entry = t.matrix.iter().copied().fold(0.0, f64::min);
    let norm = operator_norm_l1(t);
    let integral_residual = (0..t.dim())
        .map(|j| {
            let col: f64 = (0..t.dim()).map(|i| mu[i] * t.matrix[(i, j)]).sum();
            (col - mu[j]).abs()
        })
        .fold(0.0, f64::max);
    Classification {
        positive: min_entry >= -CONSTRUCTION_TOL,
        contraction: norm <= 1.0 + CONSTRUCTION_TOL,
        integral_preserving: integral_residual <= CONSTRUCTION_TOL,
        norm,
        min_entry,
        integral_residual,
    }
}

/// `Tⁿ f`.
pub fn apply_operator(t: &L1Operator, f: &PcFunction, n: usize) -> Result<PcFunction> {
    if !f.base().same_grid(t.base(), CONSTRUCTION_TOL) {
        return Err(OperatorError::BaseMismatch);
    }
    let mut v: Vec<f64> = f.values().to_vec();
    for _ in 0..n {
        v = (0..t.dim())
            .map(|i| (0..t.dim()).map(|j| t.matrix[(i, j)] * v[j]).sum())
            .collect();
    }
    Ok(PcFunction::new(t.base().clone(), v)?)
}

/// Conditioned family of normalized measures on `target`, one per cell of
/// `source`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovKernel {
    source: WeightedPartition,
    target: WeightedPartition,
    rows: Vec<IntervalMeasure>,
}

impl MarkovKernel {
    pub fn new(
        source: WeightedPartition,
        target: WeightedPartition,
        rows: Vec<IntervalMeasure>,
    ) -> Result<Self> {
        if rows.len() != source.len() {
            return Err(OperatorError::Dimension {
                rows: rows.len(),
                cols: target.len(),
                cells: source.len(),
            });
        }
        for (row, m) in rows.iter().enumerate() {
            if (m.base().total() - target.total()).abs() > CONSTRUCTION_TOL {
                return Err(SpaceError::MassMismatch {
                    left: m.base().total(),
                    right: target.total(),
                }
                .into());
            }
            let mass = m.mass();
            if (mass - 1.0).abs() > CONSTRUCTION_TOL {
                return Err(OperatorError::RowNotNormalized { row, mass });
            }
        }
        Ok(Self {
            source,
            target,
            rows,
        })
    }

    /// Kernel given by per-row masses on the cells of `target`.
    pub fn from_masses(
        source: WeightedPartition,
        target: WeightedPartition,
        masses: &[Vec<f64>],
    ) -> Result<Self> {
        let rows = masses
            .iter()
            .map(|r| IntervalMeasure::from_masses(target.clone(), r))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::new(source, target, rows)
    }

    /// Every row equal to Lebesgue measure on `target`.
    pub fn independent(source: WeightedPartition, target: WeightedPartition) -> Self {
        let total = target.total();
        let row = IntervalMeasure::new(target.clone(), vec![1.0 / total; target.len()])
            .expect("positive density");
        Self {
            rows: vec![row; source.len()],
            source,
            target,
        }
    }

    pub fn source(&self) -> &WeightedPartition {
        &self.source
    }

    pub fn target(&self) -> &WeightedPartition {
        &self.target
    }

    pub fn rows(&self) -> &[IntervalMeasure] {
        &self.rows
    }

    /// Breakpoints shared by every row and the target grid.
    fn joint_target_grid(&self) -> Result<WeightedPartition> {
        let mut grid = self.target.clone();
        for r in &self.rows {
            grid = common_refinement(&grid, r.base())?.partition;
        }
        Ok(grid)
    }
}

/// `ϖ(A×M) = η(M | A) ϑ(A)` on the grid `source × (refined target)`.
pub fn kernel_joint_measure(theta: &IntervalMeasure, eta: &MarkovKernel) -> Result<ProductMeasure> {
    if !theta.base().same_grid(eta.source(), CONSTRUCTION_TOL) {
        return Err(OperatorError::BaseMismatch);
    }
    let grid = eta.joint_target_grid()?;
    let mut density = Vec::with_capacity(theta.base().len() * grid.len());
    for (s, row) in eta.rows().iter().enumerate() {
        let refined = common_refinement(&grid, row.base())?;
        for &k in &refined.into_q {
            density.push(theta.density()[s] * row.density()[k]);
        }
    }
    Ok(ProductMeasure::new(
        vec![theta.base().clone(), grid],
        density,
    )?)
}

/// `(Ef)(s) = ∫ f(s, y) η(dy, s)` for `f` on `source × (any target grid)`.
pub fn conditional_expectation(eta: &MarkovKernel, f: &GridFunction) -> Result<PcFunction> {
    let axes = f.axes();
    if axes.len() != 2 || !axes[0].same_grid(eta.source(), CONSTRUCTION_TOL) {
        return Err(OperatorError::BaseMismatch);
    }
    if (axes[1].total() - eta.target().total()).abs() > CONSTRUCTION_TOL {
        return Err(OperatorError::BaseMismatch);
    }
    let values = eta
        .rows()
        .iter()
        .enumerate()
        .map(|(s, row)| {
            axes[1]
                .cells()
                .enumerate()
                .map(|(y, cell)| f.at(&[s, y]) * row.mass_of(&cell))
                .sum()
        })
        .collect();
    Ok(PcFunction::new(eta.source().clone(), values)?)
}

/// Frobenius–Perron operator of an invertible one-dimensional map:
/// `(Qf)(x) = (dν/dμ)(x) f(h⁻¹x)` with `ν` the transport of `μ` by `h`.
#[derive(Debug, Clone)]
pub struct FrobeniusPerron {
    h: PwAffineBijection,
    mu: IntervalMeasure,
    nu: IntervalMeasure,
    density: PcFunction,
}

pub fn frobenius_perron(h: &PwAffineBijection, mu: &IntervalMeasure) -> Result<FrobeniusPerron> {
    if h.dim() != 1 || (h.codomain()[0].hi - mu.base().total()).abs() > CONSTRUCTION_TOL {
        return Err(OperatorError::MapMismatch);
    }
    let nu = transport(h, mu)?;
    let density = radon_nikodym(&nu, mu)?;
    Ok(FrobeniusPerron {
        h: h.clone(),
        mu: mu.clone(),
        nu,
        density,
    })
}

impl FrobeniusPerron {
    /// `dν/dμ`, which is also `Q1`.
    pub fn density(&self) -> &PcFunction {
        &self.density
    }

    pub fn pushed_measure(&self) -> &IntervalMeasure {
        &self.nu
    }

    pub fn measure(&self) -> &IntervalMeasure {
        &self.mu
    }

    pub fn map(&self) -> &PwAffineBijection {
        &self.h
    }

    pub fn apply(&self, f: &PcFunction) -> Result<PcFunction> {
        let moved = pull_through_inverse(&self.h, f)?;
        Ok(self.density.mul(&moved)?)
    }
}

/// `|∫_{h⁻¹A} f dμ − ∫_A Qf dμ|` for `A` a finite union of intervals.
pub fn verify_fp_adjoint(
    h: &PwAffineBijection,
    mu: &IntervalMeasure,
    f: &PcFunction,
    a: &[Interval],
) -> Result<f64> {
    let q = frobenius_perron(h, mu)?;
    let qf = q.apply(f)?;
    let lhs: f64 = a
        .iter()
        .flat_map(|iv| h.preimage_1d(iv))
        .map(|iv| mu.integrate_over(f, &iv))
        .sum();
    let rhs: f64 = a.iter().map(|iv| mu.integrate_over(&qf, iv)).sum();
    Ok((lhs - rhs).abs())
}

/// Residuals `max |project · Bⁿ · embed − Aⁿ|` for `n = 0..=horizon`.
///
/// `embed` is `dim(B) × dim(A)` and `project` is `dim(A) × dim(B)`.
pub fn check_power_dilation(
    a: &L1Operator,
    b: &L1Operator,
    embed: &DMatrix<f64>,
    project: &DMatrix<f64>,
    horizon: usize,
) -> Result<Vec<f64>> {
    let (na, nb) = (a.dim(), b.dim());
    if embed.shape() != (nb, na) || project.shape() != (na, nb) {
        return Err(OperatorError::Dimension {
            rows: embed.nrows(),
            cols: embed.ncols(),
            cells: na,
        });
    }
    let pe = project * embed;
    let defect = (pe - DMatrix::<f64>::identity(na, na)).amax();
    if defect > CONSTRUCTION_TOL {
        return Err(OperatorError::NotAProjection(defect));
    }
    let mut an = DMatrix::<f64>::identity(na, na);
    let mut bn_embed = embed.clone();
    let mut out = Vec::with_capacity(horizon + 1);
    for n in 0..=horizon {
        if n > 0 {
            an = a.matrix() * an;
            bn_embed = b.matrix() * bn_embed;
        }
        out.push((project * &bn_embed - &an).amax());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interval_space::make_partition;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12
    }

    fn instance_b() -> L1Operator {
        L1Operator::from_rows(&[1.0 / 3.0, 2.0 / 3.0], &[vec![0.0, 1.0], vec![0.5, 0.5]]).unwrap()
    }

    #[test]
    fn norm_examples() {
        let base = make_partition(&[0.5, 0.5]).unwrap();
        let zero = L1Operator::new(base.clone(), DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(operator_norm_l1(&zero), 0.0);
        assert!(close(operator_norm_l1(&instance_b()), 1.0));
        let half = L1Operator::new(base, DMatrix::identity(2, 2) * 0.5).unwrap();
        assert!(close(operator_norm_l1(&half), 0.5));
    }

    #[test]
    fn classify_examples() {
        let base = make_partition(&[0.2, 0.3, 0.5]).unwrap();
        let c = classify(&L1Operator::identity(&base));
        assert!(c.positive && c.contraction && c.integral_preserving);
        let c = classify(&instance_b());
        assert!(c.positive && c.contraction && c.integral_preserving);
        let neg = L1Operator::from_rows(&[0.5, 0.5], &[vec![1.0, -0.1], vec![0.0, 1.0]]).unwrap();
        assert!(!classify(&neg).positive);
    }

    #[test]
    fn apply_examples() {
        let base = make_partition(&[0.25, 0.75]).unwrap();
        let f = PcFunction::new(base.clone(), vec![0.3, -2.0]).unwrap();
        assert_eq!(
            apply_operator(&L1Operator::identity(&base), &f, 7).unwrap(),
            f
        );

        let t = instance_b();
        let f = PcFunction::new(t.base().clone(), vec![1.0, 0.0]).unwrap();
        let once = apply_operator(&t, &f, 1).unwrap();
        assert!(close(once.value(0), 0.0) && close(once.value(1), 0.5));
        let twice = apply_operator(&t, &f, 2).unwrap();
        assert!(close(twice.value(0), 0.5) && close(twice.value(1), 0.25));
    }

    #[test]
    fn apply_rejects_base_mismatch() {
        let f = PcFunction::ones(&make_partition(&[0.5, 0.5]).unwrap());
        assert_eq!(
            apply_operator(&instance_b(), &f, 1),
            Err(OperatorError::BaseMismatch)
        );
    }

    #[test]
    fn joint_measure_examples() {
        let mu_base = make_partition(&[1.0 / 3.0, 2.0 / 3.0]).unwrap();
        let mu = IntervalMeasure::lebesgue(&mu_base);
        let half = make_partition(&[0.5, 0.5]).unwrap();

        let eta = MarkovKernel::independent(mu_base.clone(), WeightedPartition::unit());
        let joint = kernel_joint_measure(&mu, &eta).unwrap();
        assert!(joint.density().iter().all(|&d| close(d, 1.0)));

        let zero_cell = IntervalMeasure::new(mu_base.clone(), vec![0.0, 1.5]).unwrap();
        let joint = kernel_joint_measure(&zero_cell, &eta).unwrap();
        assert_eq!(joint.density()[0], 0.0);

        let eta = MarkovKernel::from_masses(
            mu_base.clone(),
            half.clone(),
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
        )
        .unwrap();
        let joint = kernel_joint_measure(&mu, &eta).unwrap();
        let masses: Vec<f64> = joint
            .cells()
            .map(|(b, d)| crate::interval_space::box_volume(&b) * d)
            .collect();
        assert!(close(masses[0], 1.0 / 3.0) && close(masses[1], 0.0));
        assert!(close(masses[2], 0.0) && close(masses[3], 2.0 / 3.0));
    }

    #[test]
    fn kernel_rejects_unnormalized_row() {
        let p = make_partition(&[0.5, 0.5]).unwrap();
        let err = MarkovKernel::from_masses(p.clone(), p, &[vec![0.5, 0.5], vec![0.5, 0.6]]);
        assert!(matches!(
            err,
            Err(OperatorError::RowNotNormalized { row: 1, .. })
        ));
    }

    #[test]
    fn conditional_expectation_examples() {
        let src = make_partition(&[0.5, 0.5]).unwrap();
        let tgt = make_partition(&[0.5, 0.5]).unwrap();
        let eta = MarkovKernel::from_masses(
            src.clone(),
            tgt.clone(),
            &[vec![0.25, 0.75], vec![0.5, 0.5]],
        )
        .unwrap();

        // depends only on s
        let f =
            GridFunction::new(vec![src.clone(), tgt.clone()], vec![2.0, 2.0, -1.0, -1.0]).unwrap();
        let ef = conditional_expectation(&eta, &f).unwrap();
        assert!(close(ef.value(0), 2.0) && close(ef.value(1), -1.0));

        // indicator of cell (1, 2)
        let f =
            GridFunction::new(vec![src.clone(), tgt.clone()], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let ef = conditional_expectation(&eta, &f).unwrap();
        assert!(close(ef.value(0), 0.75) && close(ef.value(1), 0.0));

        // f(s, y) = g(y) against independent rows
        let lam = MarkovKernel::independent(src.clone(), WeightedPartition::unit());
        let g = GridFunction::new(vec![src, tgt], vec![3.0, 1.0, 3.0, 1.0]).unwrap();
        let eg = conditional_expectation(&lam, &g).unwrap();
        assert!(eg.values().iter().all(|&v| close(v, 2.0)));
    }

    #[test]
    fn frobenius_perron_examples() {
        let unit = WeightedPartition::unit();
        let lambda = IntervalMeasure::lebesgue(&unit);
        let id = PwAffineBijection::identity(vec![Interval::new(0.0, 1.0)]);
        let f = PcFunction::new(make_partition(&[0.3, 0.7]).unwrap(), vec![1.0, 5.0]).unwrap();
        let q = frobenius_perron(&id, &lambda).unwrap();
        assert!(q.apply(&f).unwrap().max_abs_diff(&f).unwrap() <= 1e-15);

        let rot = PwAffineBijection::from_intervals(
            1.0,
            &[
                (Interval::new(0.0, 0.5), Interval::new(0.5, 1.0)),
                (Interval::new(0.5, 1.0), Interval::new(0.0, 0.5)),
            ],
        )
        .unwrap();
        let q = frobenius_perron(&rot, &lambda).unwrap();
        let qf = q.apply(&f).unwrap();
        for x in [0.05, 0.3, 0.6, 0.79, 0.81, 0.99] {
            let shifted = (x - 0.5f64).rem_euclid(1.0);
            assert!(close(qf.eval(x).unwrap(), f.eval(shifted).unwrap()));
        }

        let skew = PwAffineBijection::from_intervals(
            1.0,
            &[
                (Interval::new(0.0, 0.5), Interval::new(0.0, 0.75)),
                (Interval::new(0.5, 1.0), Interval::new(0.75, 1.0)),
            ],
        )
        .unwrap();
        let q = frobenius_perron(&skew, &lambda).unwrap();
        let q1 = q.apply(&PcFunction::ones(&unit)).unwrap();
        assert!(close(q1.eval(0.1).unwrap(), 2.0 / 3.0));
        assert!(close(q1.eval(0.8).unwrap(), 2.0));
    }

    #[test]
    fn fp_adjoint_examples() {
        let lambda = IntervalMeasure::lebesgue(&WeightedPartition::unit());
        let f = PcFunction::new(make_partition(&[0.3, 0.7]).unwrap(), vec![1.0, 5.0]).unwrap();
        let id = PwAffineBijection::identity(vec![Interval::new(0.0, 1.0)]);
        let a = [Interval::new(0.1, 0.4), Interval::new(0.6, 0.9)];
        assert!(verify_fp_adjoint(&id, &lambda, &f, &a).unwrap() <= 1e-15);
        let rot = PwAffineBijection::from_intervals(
            1.0,
            &[
                (Interval::new(0.0, 0.5), Interval::new(0.5, 1.0)),
                (Interval::new(0.5, 1.0), Interval::new(0.0, 0.5)),
            ],
        )
        .unwrap();
        let one = PcFunction::ones(&WeightedPartition::unit());
        assert!(
            verify_fp_adjoint(&rot, &lambda, &one, &[Interval::new(0.0, 0.5)]).unwrap() <= 1e-15
        );
    }

    #[test]
    fn power_dilation_trivial_and_errors() {
        let t = instance_b();
        let id = DMatrix::identity(2, 2);
        let r = check_power_dilation(&t, &t, &id, &id, 5).unwrap();
        assert!(r.iter().all(|&x| x == 0.0));
        let bad = DMatrix::from_element(2, 2, 1.0);
        assert!(matches!(
            check_power_dilation(&t, &t, &bad, &id, 1),
            Err(OperatorError::NotAProjection(_))
        ));
        let wide = DMatrix::identity(3, 2);
        assert!(matches!(
            check_power_dilation(&t, &t, &wide, &id, 1),
            Err(OperatorError::Dimension { .. })
        ));
    }
}
