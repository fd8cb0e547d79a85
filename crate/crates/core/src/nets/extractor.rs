use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::mesh::{TriMesh, Vec3};
use crate::tensor::{Bindings, Checkpoint, Graph, ParamSet, Tensor, Var};

use super::attention::VectorAttention;
use super::fps::fps;
use super::layers::{Init, Mlp};
use super::{read_params, write_params, NetConfig, NetError, PoseLatent};

/// Graph handles of an extracted latent. `indices` are the source vertices
/// the keypoints were sampled at.
#[derive(Debug, Clone)]
pub struct LatentVars {
    pub keypoints: Var,
    pub features: Var,
    pub indices: Vec<usize>,
}

/// Embeds vertex coordinates, then alternates vector self-attention with
/// farthest point downsampling (halving, never below K), and finally samples
/// exactly K keypoints.
#[derive(Debug, Clone)]
pub struct PoseExtractor {
    pub params: ParamSet,
    pub config: NetConfig,
    embed: Mlp,
    stages: Vec<VectorAttention>,
}

fn positions_of(t: &Tensor) -> Vec<Vec3> {
    (0..t.shape()[0])
        .map(|i| {
            let r = t.row(i);
            [r[0], r[1], r[2]]
        })
        .collect()
}

impl PoseExtractor {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = config.width;
        let embed = Mlp::new(&mut params, "embed", [3, d, d], Init::Uniform, &mut rng);
        let stages = (0..config.stages)
            .map(|s| VectorAttention::new(&mut params, &format!("stage{s}"), d, &mut rng))
            .collect();
        Ok(Self {
            params,
            config,
            embed,
            stages,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bindings,
        positions: &[Vec3],
    ) -> Result<LatentVars, NetError> {
        let k = self.config.keypoints;
        if positions.len() < k {
            return Err(NetError::TooFewPoints {
                needed: k,
                got: positions.len(),
            });
        }
        let flat = positions.iter().flatten().copied().collect();
        let mut pos = g.constant(Tensor::new(vec![positions.len(), 3], flat)?);
        let mut feat = self.embed.forward(g, p, pos)?;
        let mut indices: Vec<usize> = (0..positions.len()).collect();
        let resample = |g: &mut Graph,
                        pos: &mut Var,
                        feat: &mut Var,
                        count: usize|
         -> Result<Vec<usize>, NetError> {
            let sel = fps(&positions_of(g.value(*pos)), count, 0)?;
            let idx: Arc<[usize]> = sel.clone().into();
            *pos = g.gather(*pos, idx.clone())?;
            *feat = g.gather(*feat, idx)?;
            Ok(sel)
        };
        for stage in &self.stages {
            let n = indices.len();
            feat = stage.forward(g, p, pos, feat, pos, feat, self.config.neighbors.min(n))?;
            let target = (n / 2).max(k);
            if target < n {
                let sel = resample(g, &mut pos, &mut feat, target)?;
                indices = sel.iter().map(|&i| indices[i]).collect();
            }
        }
        let sel = resample(g, &mut pos, &mut feat, k)?;
        indices = sel.iter().map(|&i| indices[i]).collect();
        Ok(LatentVars {
            keypoints: pos,
            features: feat,
            indices,
        })
    }

    pub fn extract(&self, mesh: &TriMesh) -> Result<PoseLatent, NetError> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let out = self.forward(&mut g, &p, mesh.vertices())?;
        PoseLatent::new(
            g.value(out.keypoints).clone(),
            g.value(out.features).clone(),
        )
    }

    pub fn write_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) {
        write_params(ck, prefix, &self.params);
    }

    pub fn from_checkpoint(
        ck: &Checkpoint,
        prefix: &str,
        config: NetConfig,
    ) -> Result<Self, NetError> {
        let mut net = Self::new(config, 0)?;
        read_params(ck, prefix, &mut net.params)?;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_pose, gen_template, PoseParams, WormSpec};

    fn small() -> NetConfig {
        NetConfig {
            keypoints: 16,
            width: 8,
            stages: 2,
            neighbors: 4,
        }
    }

    #[test]
    fn keypoints_are_vertices_and_deterministic() {
        let spec = WormSpec::identity_a();
        let mesh = gen_template(&spec).unwrap();
        let net = PoseExtractor::new(small(), 3).unwrap();
        let a = net.extract(&mesh).unwrap();
        let b = net.extract(&mesh).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
        assert_eq!(a.width(), 8);
        for i in 0..a.len() {
            assert!(mesh.vertices().contains(&a.keypoint(i)));
        }
    }

    #[test]
    fn bending_moves_keypoints() {
        let spec = WormSpec::uniform(3, 12, 2.0, 0.3);
        let net = PoseExtractor::new(small(), 0).unwrap();
        let straight = gen_template(&spec).unwrap();
        let mut pose = PoseParams::zero(1);
        pose.bend[0] = std::f64::consts::FRAC_PI_2;
        let bent = gen_pose(&spec, &pose).unwrap();
        let (a, b) = (net.extract(&straight).unwrap(), net.extract(&bent).unwrap());
        let mean: f64 = (0..a.len())
            .map(|i| crate::mesh::norm(crate::mesh::sub(a.keypoint(i), b.keypoint(i))))
            .sum::<f64>()
            / a.len() as f64;
        assert!(
            mean > 0.1 * straight.bbox_diag(),
            "mean displacement {mean}"
        );
    }

    #[test]
    fn too_few_vertices() {
        let net = PoseExtractor::new(small(), 0).unwrap();
        let ico = crate::mesh::icosahedron();
        assert!(matches!(
            net.extract(&ico),
            Err(NetError::TooFewPoints {
                needed: 16,
                got: 12
            })
        ));
    }
}
