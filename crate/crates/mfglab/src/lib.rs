//! Numerical laboratory for stationary ergodic mean-field games with
//! Riesz-type aggregation.
//!
//! The system couples three unknowns (u, m, lambda) on the box [-L, L]^N:
//!
//! ```text
//!   -Lap u + |grad u|^gamma / gamma + lambda = V(x) - K_alpha * m
//!   -Lap m - div(m |grad u|^{gamma-2} grad u) = 0
//!    integral m = M,  m >= 0
//! ```
//!
//! with the attractive Riesz kernel K_alpha(x) = |x|^{alpha-N}. The crate
//! is organized around one damped fixed-point iteration (module [`mfg`])
//! whose two legs are an ergodic Hamilton-Jacobi-Bellman solver
//! (module [`hjb`], vanishing-discount continuation with damped Newton)
//! and a Kolmogorov-Fokker-Planck kernel solver (module [`kfp`],
//! exponential-fitting fluxes plus inverse power iteration). The
//! aggregation term is evaluated spectrally (module [`riesz`]).
//!
//! Every structural identity the iteration is supposed to satisfy --
//! kinetic-energy duality, the energy balance, the Pohozaev-type scaling
//! identity, regime thresholds, nonexistence sign certificates -- is
//! computable on demand from module [`diagnostics`], and the quadratic
//! Hamiltonian case carries an independent cross-check pipeline through
//! the normalized Choquard ground-state flow (module [`choquard`]).
//!
//! The binary `mfglab` drives everything from flat key=value config files
//! (module [`cli`]); runnable walkthroughs live in `examples/`.

pub mod choquard;
pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod grid;
pub mod hjb;
pub mod kfp;
pub mod linalg;
pub mod mfg;
pub mod report;
pub mod riesz;
pub mod special;

pub use error::{MfgError, Result};
pub use grid::{Grid, ScalarField, VectorField};
