use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Bindings, Checkpoint, Graph, ParamSet, Var};

use super::attention::SetTransformer;
use super::layers::Init;
use super::{read_params, write_params, NetConfig, NetError, PoseLatent};

pub const REFINER_BLOCKS: usize = 2;

/// Residual network over latent tokens `(z_k, h_k)`. Its output layer starts
/// at zero, so a fresh refiner returns its input unchanged.
#[derive(Debug, Clone)]
pub struct Refiner {
    pub params: ParamSet,
    pub config: NetConfig,
    net: SetTransformer,
}

/// Refined keypoints and features plus the raw `[K, 3 + d]` deltas.
#[derive(Debug, Clone, Copy)]
pub struct RefinedVars {
    pub keypoints: Var,
    pub features: Var,
    pub delta: Var,
}

impl Refiner {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let c = 3 + config.width;
        let net = SetTransformer::new(
            &mut params,
            "alpha",
            [c, config.width, c],
            REFINER_BLOCKS,
            Init::Zeros,
            &mut rng,
        );
        Ok(Self {
            params,
            config,
            net,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bindings,
        keypoints: Var,
        features: Var,
    ) -> Result<RefinedVars, NetError> {
        let tokens = g.concat(&[keypoints, features], 1)?;
        let delta = self.net.forward(g, p, tokens)?;
        let dz = g.narrow(delta, 1, 0, 3)?;
        let dh = g.narrow(delta, 1, 3, self.config.width)?;
        Ok(RefinedVars {
            keypoints: g.add(keypoints, dz)?,
            features: g.add(features, dh)?,
            delta,
        })
    }

    pub fn refine_latent(&self, latent: &PoseLatent) -> Result<PoseLatent, NetError> {
        if latent.width() != self.config.width {
            return Err(NetError::Shape(format!(
                "latent width {} for a refiner of width {}",
                latent.width(),
                self.config.width
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let z = g.constant(latent.keypoints.clone());
        let h = g.constant(latent.features.clone());
        let out = self.forward(&mut g, &p, z, h)?;
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
