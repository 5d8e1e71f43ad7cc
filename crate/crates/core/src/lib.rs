//! Learning generalized Hamiltonian decompositions `ẋ = (J(x) + R(x))∇H(x)`
//! of ordinary differential equations from noisy trajectories.

pub mod autodiff;
pub mod fields;
pub mod decomp;
pub mod odeint;
pub mod systems;
pub mod losses;
pub mod train;
pub mod eval;
pub mod cli;
