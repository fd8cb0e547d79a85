use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffgeo::{JacobianField, IDENTITY3};
use crate::mesh::{TriMesh, Vec3};
use crate::tensor::{Bindings, Checkpoint, Graph, ParamSet, Tensor, Var};

use super::attention::VectorAttention;
use super::layers::{Init, Mlp};
use super::{read_params, write_params, NetConfig, NetError, PoseLatent};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApplierHead {
    /// Queries at face centroids; outputs a 3×3 Jacobian per face as a
    /// residual from the identity.
    Jacobian,
    /// Queries at template vertices; outputs a displacement per vertex.
    Vertex,
}

impl ApplierHead {
    pub fn outputs(self) -> usize {
        match self {
            Self::Jacobian => 9,
            Self::Vertex => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Jacobian => "jacobian",
            Self::Vertex => "vertex",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "jacobian" => Some(Self::Jacobian),
            "vertex" => Some(Self::Vertex),
            _ => None,
        }
    }

    /// Query points on the template for this head.
    pub fn queries(self, template: &TriMesh) -> Vec<Vec3> {
        match self {
            Self::Jacobian => template.face_centroids(),
            Self::Vertex => template.vertices().to_vec(),
        }
    }
}

/// Conditions template query points on a pose latent: embed each query, one
/// vector attention block against the keypoints, then an MLP head whose last
/// layer starts at zero so the untrained applier returns the rest shape.
#[derive(Debug, Clone)]
pub struct PoseApplier {
    pub params: ParamSet,
    pub config: NetConfig,
    pub head: ApplierHead,
    embed: Mlp,
    attend: VectorAttention,
    decode: Mlp,
}

impl PoseApplier {
    pub fn new(config: NetConfig, head: ApplierHead, seed: u64) -> Result<Self, NetError> {
        Self::with_last_init(config, head, seed, Init::Zeros)
    }

    pub fn with_last_init(
        config: NetConfig,
        head: ApplierHead,
        seed: u64,
        last: Init,
    ) -> Result<Self, NetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = config.width;
        let embed = Mlp::new(&mut params, "embed", [3, d, d], Init::Uniform, &mut rng);
        let attend = VectorAttention::new(&mut params, "attend", d, &mut rng);
        let decode = Mlp::new(
            &mut params,
            "decode",
            [d, d, head.outputs()],
            last,
            &mut rng,
        );
        Ok(Self {
            params,
            config,
            head,
            embed,
            attend,
            decode,
        })
    }

    /// Per-query outputs including the residual base: `[Q, 9]` row-major
    /// Jacobians or `[Q, 3]` positions.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bindings,
        queries: &[Vec3],
        keypoints: Var,
        features: Var,
    ) -> Result<Var, NetError> {
        let k = g.shape(keypoints)[0];
        if g.shape(features) != [k, self.config.width] {
            return Err(NetError::Shape(format!(
                "latent features {:?}, expected [{k}, {}]",
                g.shape(features),
                self.config.width
            )));
        }
        let flat: Vec<f64> = queries.iter().flatten().copied().collect();
        let q = g.constant(Tensor::new(vec![queries.len(), 3], flat.clone())?);
        let qf = self.embed.forward(g, p, q)?;
        let m = self.config.neighbors.min(k);
        let h = self.attend.forward(g, p, q, qf, keypoints, features, m)?;
        let out = self.decode.forward(g, p, h)?;
        let base = match self.head {
            ApplierHead::Jacobian => g.constant(Tensor::new(vec![9], IDENTITY3.concat())?),
            ApplierHead::Vertex => q,
        };
        Ok(g.add(out, base)?)
    }

    fn run(&self, latent: &PoseLatent, template: &TriMesh) -> Result<Tensor, NetError> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let z = g.constant(latent.keypoints.clone());
        let h = g.constant(latent.features.clone());
        let out = self.forward(&mut g, &p, &self.head.queries(template), z, h)?;
        Ok(g.value(out).clone())
    }

    /// Per-face Jacobians on `template` for the pose in `latent`.
    pub fn apply_pose(
        &self,
        latent: &PoseLatent,
        template: &TriMesh,
    ) -> Result<JacobianField, NetError> {
        if self.head != ApplierHead::Jacobian {
            return Err(NetError::Config("apply_pose needs a Jacobian head".into()));
        }
        Ok(JacobianField::from_flat(self.run(latent, template)?.data()))
    }

    /// Vertex positions on `template` for the pose in `latent`.
    pub fn apply_vertices(
        &self,
        latent: &PoseLatent,
        template: &TriMesh,
    ) -> Result<Vec<Vec3>, NetError> {
        if self.head != ApplierHead::Vertex {
            return Err(NetError::Config(
                "apply_vertices needs a vertex head".into(),
            ));
        }
        Ok(crate::poisson::to_points(
            self.run(latent, template)?.data(),
        ))
    }

    pub fn write_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) {
        write_params(ck, prefix, &self.params);
    }

    pub fn from_checkpoint(
        ck: &Checkpoint,
        prefix: &str,
        config: NetConfig,
        head: ApplierHead,
    ) -> Result<Self, NetError> {
        let mut net = Self::new(config, head, 0)?;
        read_params(ck, prefix, &mut net.params)?;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::PoseExtractor;
    use crate::synth::{gen_template, WormSpec};

    fn cfg() -> NetConfig {
        NetConfig {
            keypoints: 12,
            width: 8,
            stages: 2,
            neighbors: 4,
        }
    }

    #[test]
    fn fresh_applier_is_identity() {
        let t = gen_template(&WormSpec::uniform(4, 8, 2.0, 0.3)).unwrap();
        let latent = PoseExtractor::new(cfg(), 1).unwrap().extract(&t).unwrap();
        let j = PoseApplier::new(cfg(), ApplierHead::Jacobian, 2)
            .unwrap()
            .apply_pose(&latent, &t)
            .unwrap();
        assert_eq!(j, JacobianField::identity(t.face_count()));
        let v = PoseApplier::new(cfg(), ApplierHead::Vertex, 2)
            .unwrap()
            .apply_vertices(&latent, &t)
            .unwrap();
        assert_eq!(v, t.vertices());
    }

    #[test]
    fn keypoint_order_does_not_matter() {
        let t = gen_template(&WormSpec::uniform(4, 8, 2.0, 0.3)).unwrap();
        let latent = PoseExtractor::new(cfg(), 1).unwrap().extract(&t).unwrap();
        let app =
            PoseApplier::with_last_init(cfg(), ApplierHead::Jacobian, 2, Init::Uniform).unwrap();
        let base = app.apply_pose(&latent, &t).unwrap();
        let perm: Vec<usize> = (0..12).rev().collect();
        assert_eq!(app.apply_pose(&latent.permuted(&perm), &t).unwrap(), base);
    }
}
