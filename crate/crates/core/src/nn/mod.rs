//! Small differentiable-network substrate: flat parameter vectors, tanh
//! MLPs, a stacked GRU encoder, diagonal Gaussians, Fisher-vector products
//! and conjugate gradient. Gradients are hand-derived per layer (reverse
//! mode for gradients, forward mode for Jacobian-vector products).

pub mod cg;
pub mod fisher;
pub mod gaussian;
pub mod gru;
pub mod mlp;
pub mod objective;
pub mod params;

pub use cg::conjugate_gradient;
pub use fisher::{fisher_vector_product, mean_kl, par_accumulate, par_mean, GaussianPolicyModel};
pub use gaussian::{kl as gaussian_kl, log_density as gaussian_log_density, GaussianHead};
pub use gru::Gru;
pub use mlp::Mlp;
pub use objective::{gradient, Objective};
pub use params::{Layout, ParamVector};
