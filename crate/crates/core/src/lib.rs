//! Sum-of-squares certificates for switched polynomial systems: common and
//! multiple Lyapunov functions, joint spectral radius bounds, regions of
//! attraction and simulation.

pub mod error;
pub mod json;
pub mod poly;
pub mod sdp;
pub mod sosprog;
pub mod lyap;
pub mod roa;
pub mod multi;
pub mod sim;
pub mod corpus;
pub mod files;

pub use error::{Error, Result};
pub use poly::{
    monomial_basis, monomials_in_range, Exponents, PolyMatrix, Polynomial, PolynomialMap,
    RationalPolynomial, SwitchedSystem,
};
