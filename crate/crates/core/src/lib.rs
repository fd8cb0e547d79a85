//! Keypoint pose latents for triangle meshes: extraction, Jacobian-field
//! pose transfer through a prefactorized Poisson solve, per-identity latent
//! refinement, and cascaded latent diffusion for generating new poses.

pub mod diffgeo;
pub mod diffusion;
pub mod kv;
pub mod mesh;
pub mod nets;
pub mod poisson;
pub mod sparse;
pub mod synth;
pub mod tensor;
pub mod train;
