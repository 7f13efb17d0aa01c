//! Finite-scale construction of the L1 dilation of a positive contraction.
//!
//! A positive contraction `T` on `L1` of a weighted interval partition is
//! dilated to the Frobenius–Perron operator `Q` of an invertible
//! piecewise-affine point map `τ` on a product of unit intervals. The crate
//! builds every piece of that construction explicitly and checks the
//! dilation identity `E Qⁿ f = Tⁿ f` exactly, by path enumeration, and by
//! Monte Carlo. Rota's reversed-martingale dilation of `P²ⁿ` for
//! self-adjoint Markov operators is covered in [`rota`].

pub mod akcoglu;
pub mod interval_space;
pub mod markov_ops;
pub mod montecarlo;
pub mod rota;
pub mod runner;
