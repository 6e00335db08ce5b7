pub mod error;
pub mod data;
pub mod odeint;
pub mod systems;
pub mod neural;
pub mod node;
pub mod nssm;
pub mod subspace;
pub mod bench;
