//! Rota's dilation of `P²ⁿ` into a reversed martingale.
//!
//! For a positive, unital `P` that is self-adjoint in `L2(μ)` (detailed
//! balance `μ_i P[i][j] = μ_j P[j][i]`), the stationary chain `x₀, …, x_L`
//! with `x₀ ~ μ` is reversible. Conditioning on the tail `σ(x_n, …, x_L)`
//! gives a decreasing filtration `E_n`, and
//!
//! ```text
//! P²ⁿ f = Ê E_n f,       Ê = E[· | x₀].
//! ```
//!
//! Every conditional expectation here is computed by summing over the full
//! path space, never through the Markov shortcut `E_n f = (Pⁿ f)(x_n)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::interval_space::{make_partition, PcFunction, CONSTRUCTION_TOL};
use crate::markov_ops::{apply_operator, L1Operator, OperatorError};

/// Largest number of paths a [`PathSpace`] will enumerate.
pub const MAX_PATHS: u64 = 200_000_000;

const ITERATION_TOL: f64 = 1e-13;
const MAX_ITERATIONS: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RotaError {
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error("hypotheses fail: {0}")]
    Hypotheses(String),
    #[error("path space with {states} states and length {length} is too large")]
    TooLarge { states: usize, length: usize },
    #[error("conditioning index {n} exceeds path length {length}")]
    IndexOutOfRange { n: usize, length: usize },
    #[error("function depends on coordinate {coord} beyond path length {length}")]
    CoordinateOutOfRange { coord: usize, length: usize },
}

pub type Result<T> = std::result::Result<T, RotaError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hypotheses {
    pub positive: bool,
    pub unital: bool,
    pub detailed_balance: bool,
    /// Most negative entry, or 0.
    pub min_entry: f64,
    /// `max_i |Σ_j P[i][j] − 1|`.
    pub row_sum_residual: f64,
    /// `max_{i,j} |μ_i P[i][j] − μ_j P[j][i]|`.
    pub balance_residual: f64,
}

impl Hypotheses {
    pub fn all(&self) -> bool {
        self.positive && self.unital && self.detailed_balance
    }
}

pub fn check_hypotheses(p: &L1Operator) -> Hypotheses {
    let m = p.dim();
    let mu = p.weights();
    let pm = p.matrix();
    let min_entry = pm.iter().copied().fold(0.0, f64::min);
    let row_sum_residual = p
        .row_sums()
        .iter()
        .map(|s| (s - 1.0).abs())
        .fold(0.0, f64::max);
    let mut balance_residual = 0.0f64;
    for i in 0..m {
        for j in 0..m {
            balance_residual =
                balance_residual.max((mu[i] * pm[(i, j)] - mu[j] * pm[(j, i)]).abs());
        }
    }
    Hypotheses {
        positive: min_entry >= -CONSTRUCTION_TOL,
        unital: row_sum_residual <= CONSTRUCTION_TOL,
        detailed_balance: balance_residual <= CONSTRUCTION_TOL,
        min_entry,
        row_sum_residual,
        balance_residual,
    }
}

/// Stationary chain of length `L` (coordinates `0..=L`) driven by `P`.
#[derive(Debug, Clone)]
pub struct PathSpace {
    transition: L1Operator,
    length: usize,
}

impl PathSpace {
    pub fn new(transition: L1Operator, length: usize) -> Result<Self> {
        let h = check_hypotheses(&transition);
        if !h.all() {
            return Err(RotaError::Hypotheses(format!("{h:?}")));
        }
        let m = transition.dim();
        let paths = (m as u64).checked_pow(length as u32 + 1);
        if paths.is_none_or(|n| n > MAX_PATHS) {
            return Err(RotaError::TooLarge { states: m, length });
        }
        Ok(Self { transition, length })
    }

    pub fn transition(&self) -> &L1Operator {
        &self.transition
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn states(&self) -> usize {
        self.transition.dim()
    }

    /// Visits every path `(x₀, …, x_L)` with its mass
    /// `μ_{x₀} Π P[x_i][x_{i+1}]`, in lexicographic order.
    fn for_each_path(&self, mut visit: impl FnMut(&[usize], f64)) {
        let m = self.states();
        let mu = self.transition.weights();
        let pm = self.transition.matrix();
        let len = self.length + 1;
        let mut path = vec![0usize; len];
        // prefix[i] = mass of path[0..=i]
        let mut prefix = vec![0.0; len];
        prefix[0] = mu[0];
        for i in 1..len {
            prefix[i] = prefix[i - 1] * pm[(0, 0)];
        }
        loop {
            visit(&path, prefix[len - 1]);
            let mut slot = len;
            loop {
                if slot == 0 {
                    return;
                }
                slot -= 1;
                path[slot] += 1;
                if path[slot] < m {
                    break;
                }
                path[slot] = 0;
            }
            prefix[slot] = if slot == 0 {
                mu[path[0]]
            } else {
                prefix[slot - 1] * pm[(path[slot - 1], path[slot])]
            };
            for i in slot + 1..len {
                prefix[i] = prefix[i - 1] * pm[(path[i - 1], path[i])];
            }
        }
    }

    pub fn total_mass(&self) -> f64 {
        let mut acc = 0.0;
        self.for_each_path(|_, w| acc += w);
        acc
    }
}

/// Function of a path through a fixed set of its coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PathFunction {
    states: usize,
    coords: Vec<usize>,
    /// Indexed by the chosen coordinates, first coordinate most significant.
    values: Vec<f64>,
    /// Atoms of zero mass where the value is arbitrary (set to 0).
    unconstrained: Vec<usize>,
}

impl PathFunction {
    /// `F(path) = f(x₀)`.
    pub fn of_start(f: &PcFunction) -> Self {
        Self {
            states: f.values().len(),
            coords: vec![0],
            values: f.values().to_vec(),
            unconstrained: Vec::new(),
        }
    }

    pub fn coords(&self) -> &[usize] {
        &self.coords
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Indices (into [`values`](Self::values)) of zero-mass atoms.
    pub fn unconstrained(&self) -> &[usize] {
        &self.unconstrained
    }

    fn key(&self, path: &[usize]) -> usize {
        self.coords
            .iter()
            .fold(0, |acc, &c| acc * self.states + path[c])
    }

    pub fn eval(&self, path: &[usize]) -> f64 {
        self.values[self.key(path)]
    }

    pub fn max_abs_diff(&self, other: &Self, ps: &PathSpace) -> f64 {
        let mut worst = 0.0f64;
        ps.for_each_path(|p, _| worst = worst.max((self.eval(p) - other.eval(p)).abs()));
        worst
    }
}

/// `E[F | x_c, c ∈ coords]` by direct summation over all paths.
pub fn conditional_on(ps: &PathSpace, f: &PathFunction, coords: &[usize]) -> Result<PathFunction> {
    for &c in f.coords.iter().chain(coords) {
        if c > ps.length {
            return Err(RotaError::CoordinateOutOfRange {
                coord: c,
                length: ps.length,
            });
        }
    }
    let m = ps.states();
    let out_coords = coords.to_vec();
    let atoms = m.pow(out_coords.len() as u32);
    let mut num = vec![0.0; atoms];
    let mut den = vec![0.0; atoms];
    let key = |path: &[usize]| out_coords.iter().fold(0, |acc, &c| acc * m + path[c]);
    ps.for_each_path(|path, w| {
        let k = key(path);
        num[k] += f.eval(path) * w;
        den[k] += w;
    });
    let mut unconstrained = Vec::new();
    let values = num
        .iter()
        .zip(&den)
        .enumerate()
        .map(|(k, (n, d))| {
            if *d > 0.0 {
                n / d
            } else {
                unconstrained.push(k);
                0.0
            }
        })
        .collect();
    Ok(PathFunction {
        states: m,
        coords: out_coords,
        values,
        unconstrained,
    })
}

/// `E_n F = E[F | x_n, …, x_L]`. Returns `F` unchanged when it is already
/// measurable with respect to the tail.
pub fn reversed_conditional(ps: &PathSpace, f: &PathFunction, n: usize) -> Result<PathFunction> {
    if n > ps.length {
        return Err(RotaError::IndexOutOfRange {
            n,
            length: ps.length,
        });
    }
    if f.coords.iter().all(|&c| c >= n) {
        return Ok(f.clone());
    }
    let tail: Vec<usize> = (n..=ps.length).collect();
    conditional_on(ps, f, &tail)
}

/// `Ê F = E[F | x₀]`.
pub fn start_conditional(ps: &PathSpace, f: &PathFunction) -> Result<PathFunction> {
    conditional_on(ps, f, &[0])
}

/// `max_i |(Ê E_n f)(i) − (P²ⁿ f)_i|`.
pub fn rota_check(ps: &PathSpace, f: &PcFunction, n: usize) -> Result<f64> {
    if n > ps.length {
        return Err(RotaError::IndexOutOfRange {
            n,
            length: ps.length,
        });
    }
    let start = PathFunction::of_start(f);
    let en = reversed_conditional(ps, &start, n)?;
    let lhs = start_conditional(ps, &en)?;
    let rhs = apply_operator(ps.transition(), f, 2 * n)?;
    Ok(lhs
        .values
        .iter()
        .zip(rhs.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// [`rota_check`] on a fresh path space of length `2n + 1`.
pub fn rota_check_default(p: &L1Operator, f: &PcFunction, n: usize) -> Result<f64> {
    let ps = PathSpace::new(p.clone(), 2 * n + 1)?;
    rota_check(&ps, f, n)
}

#[derive(Debug, Clone)]
pub struct PowerLimit {
    /// Last iterate of `g ← P² g`.
    pub limit: PcFunction,
    pub converged: bool,
    pub iterations: usize,
    /// Projection of `f` onto the `λ = ±1` eigenspaces of `P`.
    pub spectral: PcFunction,
}

impl PowerLimit {
    pub fn agreement(&self) -> f64 {
        self.limit
            .values()
            .iter()
            .zip(self.spectral.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `lim P²ⁿ f`, by iteration and by eigendecomposition of the symmetrized
/// `D^{1/2} P D^{-1/2}`.
pub fn power_limit(p: &L1Operator, f: &PcFunction) -> Result<PowerLimit> {
    let h = check_hypotheses(p);
    if !h.all() {
        return Err(RotaError::Hypotheses(format!("{h:?}")));
    }
    let mut g = f.clone();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        let next = apply_operator(p, &g, 2)?;
        iterations += 1;
        let delta = next
            .values()
            .iter()
            .zip(g.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        g = next;
        if delta <= ITERATION_TOL {
            converged = true;
            break;
        }
    }

    let m = p.dim();
    let sq: Vec<f64> = p.weights().iter().map(|w| w.sqrt()).collect();
    let pm = p.matrix();
    let sym = DMatrix::from_fn(m, m, |i, j| sq[i] * pm[(i, j)] / sq[j]);
    // exact symmetry up to rounding; average out the noise
    let sym = (&sym + sym.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scaled = DVector::from_fn(m, |i, _| sq[i] * f.value(i));
    let mut proj = DVector::zeros(m);
    for (k, lambda) in eig.eigenvalues.iter().enumerate() {
        if (lambda.abs() - 1.0).abs() <= 1e-9 {
            let v = eig.eigenvectors.column(k);
            proj += v * v.dot(&scaled);
        }
    }
    let spectral_values = (0..m).map(|i| proj[i] / sq[i]).collect();
    Ok(PowerLimit {
        limit: g,
        converged,
        iterations,
        spectral: PcFunction::new(p.base().clone(), spectral_values)
            .map_err(OperatorError::from)?,
    })
}

/// Reversible chain `P = D⁻¹A` with `A` symmetric and positive and
/// `μ ∝ A1`.
pub fn random_reversible<R: rand::Rng>(rng: &mut R, m: usize) -> L1Operator {
    assert!(m >= 1);
    let mut a = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let v = rng.random_range(0.01..1.0);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    let r: Vec<f64> = a.row_iter().map(|row| row.sum()).collect();
    let total: f64 = r.iter().sum();
    let mu: Vec<f64> = r.iter().map(|x| x / total).collect();
    let p = DMatrix::from_fn(m, m, |i, j| a[(i, j)] / r[i]);
    L1Operator::new(make_partition(&mu).expect("positive weights"), p).expect("square")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12
    }

    fn averaging() -> L1Operator {
        L1Operator::from_rows(&[0.5, 0.5], &[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap()
    }

    fn swap() -> L1Operator {
        L1Operator::from_rows(&[0.5, 0.5], &[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap()
    }

    fn indicator(p: &L1Operator) -> PcFunction {
        PcFunction::new(p.base().clone(), vec![1.0, 0.0]).unwrap()
    }

    #[test]
    fn hypotheses_examples() {
        assert!(check_hypotheses(&averaging()).all());
        assert!(check_hypotheses(&swap()).all());
        let skew = L1Operator::from_rows(&[0.5, 0.5], &[vec![0.0, 1.0], vec![0.5, 0.5]]).unwrap();
        let h = check_hypotheses(&skew);
        assert!(h.positive && h.unital && !h.detailed_balance);
        assert!(close(h.balance_residual, 0.25));
        assert!(PathSpace::new(skew, 3).is_err());
    }

    #[test]
    fn path_masses_sum_to_one() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let p = random_reversible(&mut rng, 4);
        let ps = PathSpace::new(p, 5).unwrap();
        assert!((ps.total_mass() - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn reversed_conditional_examples() {
        let p = averaging();
        let ps = PathSpace::new(p.clone(), 3).unwrap();
        let f = PathFunction::of_start(&indicator(&p));
        assert_eq!(reversed_conditional(&ps, &f, 0).unwrap(), f);
        let e1 = reversed_conditional(&ps, &f, 1).unwrap();
        assert!(e1.values().iter().all(|&v| close(v, 0.5)));
        assert_eq!(e1.coords(), &[1, 2, 3]);

        let id = L1Operator::identity(&make_partition(&[0.3, 0.7]).unwrap());
        let ps = PathSpace::new(id.clone(), 3).unwrap();
        let g =
            PathFunction::of_start(&PcFunction::new(id.base().clone(), vec![2.0, 5.0]).unwrap());
        let e2 = reversed_conditional(&ps, &g, 2).unwrap();
        assert!(close(e2.eval(&[0, 0, 0, 0]), 2.0));
        assert!(close(e2.eval(&[1, 1, 1, 1]), 5.0));
        // non-constant suffixes carry no mass under the identity chain
        assert!(!e2.unconstrained().is_empty());
        assert!(reversed_conditional(&ps, &g, 4).is_err());
    }

    #[test]
    fn rota_examples() {
        let p = averaging();
        let ps = PathSpace::new(p.clone(), 3).unwrap();
        assert_eq!(rota_check(&ps, &indicator(&p), 0).unwrap(), 0.0);
        assert!(rota_check(&ps, &indicator(&p), 1).unwrap() <= 1e-12);

        let s = swap();
        let ps = PathSpace::new(s.clone(), 5).unwrap();
        assert!(rota_check(&ps, &indicator(&s), 2).unwrap() <= 1e-12);
        assert!(rota_check_default(&s, &indicator(&s), 2).unwrap() <= 1e-12);
    }

    #[test]
    fn start_conditional_of_en_matches_by_hand() {
        let p = averaging();
        let ps = PathSpace::new(p.clone(), 3).unwrap();
        let f = PathFunction::of_start(&indicator(&p));
        let e1 = reversed_conditional(&ps, &f, 1).unwrap();
        let back = start_conditional(&ps, &e1).unwrap();
        assert!(close(back.values()[0], 0.5) && close(back.values()[1], 0.5));
    }

    #[test]
    fn power_limit_examples() {
        let s = swap();
        let f = PcFunction::new(s.base().clone(), vec![0.2, 0.9]).unwrap();
        let l = power_limit(&s, &f).unwrap();
        assert!(l.converged);
        assert!(l.limit.max_abs_diff(&f).unwrap() <= 1e-12);
        assert!(l.spectral.max_abs_diff(&f).unwrap() <= 1e-12);

        let a = averaging();
        let l = power_limit(&a, &indicator(&a)).unwrap();
        assert!(l.limit.values().iter().all(|&v| close(v, 0.5)));
        assert!(l.agreement() <= 1e-12);

        let c = PcFunction::constant(a.base(), 3.0);
        let l = power_limit(&a, &c).unwrap();
        assert!(l.limit.max_abs_diff(&c).unwrap() <= 1e-12);

        let skew = L1Operator::from_rows(&[0.5, 0.5], &[vec![0.0, 1.0], vec![0.5, 0.5]]).unwrap();
        assert!(power_limit(&skew, &indicator(&skew)).is_err());
    }

    #[test]
    fn oversized_path_space_is_rejected() {
        let p = L1Operator::identity(&make_partition(&[0.1; 10]).unwrap());
        assert!(matches!(
            PathSpace::new(p, 12),
            Err(RotaError::TooLarge { .. })
        ));
    }
}
