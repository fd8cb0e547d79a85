//! Pose networks: the keypoint extractor, the implicit pose applier (per-face
//! Jacobians or per-vertex positions) and the per-identity latent refiner.

mod applier;
mod attention;
mod extractor;
mod fps;
mod layers;
mod refiner;

pub use applier::{ApplierHead, PoseApplier};
pub use attention::{
    canonical_order, inverse_permutation, nearest_keys, SetTransformer, VectorAttention,
};
pub use extractor::{LatentVars, PoseExtractor};
pub use fps::fps;
pub use layers::{Init, LayerNorm, Linear, Mlp};
pub use refiner::{RefinedVars, Refiner, REFINER_BLOCKS};

use thiserror::Error;

use crate::mesh::Vec3;
use crate::tensor::{Checkpoint, CheckpointError, ParamSet, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Hyperparameters shared by the extractor, applier and refiner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    /// Number of keypoints K.
    pub keypoints: usize,
    /// Feature width d.
    pub width: usize,
    /// Attention-plus-downsampling stages in the extractor.
    pub stages: usize,
    /// Nearest keys per query in vector attention (clamped to the key count).
    pub neighbors: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            keypoints: 100,
            width: 64,
            stages: 2,
            neighbors: 8,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.keypoints == 0 || self.width == 0 || self.neighbors == 0 {
            return Err(NetError::Config(format!(
                "K, d and m_neighbors must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn write_meta(&self, ck: &mut Checkpoint) {
        ck.set_meta("keypoints", self.keypoints);
        ck.set_meta("width", self.width);
        ck.set_meta("stages", self.stages);
        ck.set_meta("neighbors", self.neighbors);
    }

    pub fn from_meta(ck: &Checkpoint) -> Result<Self, NetError> {
        let c = Self {
            keypoints: ck.meta_parse("keypoints")?,
            width: ck.meta_parse("width")?,
            stages: ck.meta_parse("stages")?,
            neighbors: ck.meta_parse("neighbors")?,
        };
        c.validate()?;
        Ok(c)
    }

    /// Errors unless the checkpoint was written with this configuration.
    pub fn check_meta(&self, ck: &Checkpoint) -> Result<(), NetError> {
        let stored = Self::from_meta(ck)?;
        if stored != *self {
            return Err(CheckpointError::Mismatch {
                key: "network configuration".into(),
                stored: format!("{stored:?}"),
                expected: format!("{self:?}"),
            }
            .into());
        }
        Ok(())
    }
}

/// A pose as K keypoints with one feature vector each. Rows are an
/// unordered set.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseLatent {
    /// `[K, 3]`
    pub keypoints: Tensor,
    /// `[K, d]`
    pub features: Tensor,
}

impl PoseLatent {
    pub fn new(keypoints: Tensor, features: Tensor) -> Result<Self, NetError> {
        let ks = keypoints.shape();
        let fs = features.shape();
        if ks.len() != 2 || ks[1] != 3 || fs.len() != 2 || fs[0] != ks[0] {
            return Err(NetError::Shape(format!(
                "latent keypoints {ks:?}, features {fs:?}"
            )));
        }
        Ok(Self {
            keypoints,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.keypoints.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn keypoint(&self, i: usize) -> Vec3 {
        let r = self.keypoints.row(i);
        [r[0], r[1], r[2]]
    }

    pub fn is_finite(&self) -> bool {
        self.keypoints.is_finite() && self.features.is_finite()
    }

    /// Row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let pick = |t: &Tensor| {
            let w = t.shape()[1];
            let data = perm
                .iter()
                .flat_map(|&i| t.row(i).iter().copied())
                .collect();
            Tensor::new(vec![perm.len(), w], data).expect("permutation keeps shape")
        };
        Self {
            keypoints: pick(&self.keypoints),
            features: pick(&self.features),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "latent");
        ck.push_tensor("keypoints", self.keypoints.clone());
        ck.push_tensor("features", self.features.clone());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, NetError> {
        let get = |n: &str| {
            ck.tensor(n)
                .cloned()
                .ok_or_else(|| CheckpointError::Missing(n.into()))
        };
        Self::new(get("keypoints")?, get("features")?)
    }
}

pub fn write_params(ck: &mut Checkpoint, prefix: &str, ps: &ParamSet) {
    for (name, t) in ps.iter() {
        ck.push_tensor(format!("{prefix}{name}"), t.clone());
    }
}

/// Fills `ps` from the tensors stored under `prefix`; every parameter must be
/// present with its shape, and nothing else may be stored under the prefix.
pub fn read_params(ck: &Checkpoint, prefix: &str, ps: &mut ParamSet) -> Result<(), NetError> {
    let mut seen = 0;
    for (name, t) in ck.with_prefix(prefix) {
        ps.assign(name, t.clone())
            .map_err(|e| CheckpointError::Mismatch {
                key: format!("{prefix}{name}"),
                stored: format!("{:?}", t.shape()),
                expected: e.to_string(),
            })?;
        seen += 1;
    }
    if seen != ps.len() {
        return Err(CheckpointError::Mismatch {
            key: prefix.trim_end_matches('/').to_string(),
            stored: format!("{seen} tensors"),
            expected: format!("{} tensors", ps.len()),
        }
        .into());
    }
    Ok(())
}
