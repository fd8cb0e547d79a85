use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nets::{Init, Linear, SetTransformer};
use crate::tensor::{Bindings, Graph, ParamSet, Tensor, Var};

use super::{DiffusionError, NoisePredictor};

pub const TIME_EMBEDDING_WIDTH: usize = 128;

/// Sinusoidal embedding of a diffusion step: sines then cosines over
/// geometrically spaced frequencies.
pub fn time_embedding(t: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let (s, c) = (t as f64 * freq).sin_cos();
        out[i] = s;
        out[half + i] = c;
    }
    out
}

/// Set transformer noise predictor over `[K, channels]` tokens, optionally
/// conditioned on per-token `[K, cond_channels]` inputs. The step embedding is
/// shared by all tokens.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub params: ParamSet,
    pub channels: usize,
    pub cond_channels: usize,
    pub width: usize,
    pub blocks: usize,
    net: SetTransformer,
    time: Linear,
}

impl Denoiser {
    pub fn new(
        channels: usize,
        cond_channels: usize,
        width: usize,
        blocks: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let net = SetTransformer::new(
            &mut params,
            "set",
            [channels + cond_channels, width, channels],
            blocks,
            Init::Zeros,
            &mut rng,
        );
        let time = Linear::new(
            &mut params,
            "time",
            TIME_EMBEDDING_WIDTH,
            width,
            Init::Uniform,
            &mut rng,
        );
        Self {
            params,
            channels,
            cond_channels,
            width,
            blocks,
            net,
            time,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bindings,
        x_t: Var,
        t: usize,
        cond: Option<Var>,
    ) -> Result<Var, DiffusionError> {
        let k = g.shape(x_t)[0];
        if g.shape(x_t) != [k, self.channels] {
            return Err(DiffusionError::Shape(format!(
                "noisy input {:?}, expected [K, {}]",
                g.shape(x_t),
                self.channels
            )));
        }
        let tokens = match (cond, self.cond_channels) {
            (None, 0) => x_t,
            (Some(c), n) if n > 0 && g.shape(c) == [k, n] => g.concat(&[x_t, c], 1)?,
            (c, n) => {
                return Err(DiffusionError::Shape(format!(
                    "conditioning {:?} for a model expecting [{k}, {n}]",
                    c.map(|c| g.shape(c).to_vec())
                )))
            }
        };
        let emb = g.constant(Tensor::new(
            vec![1, TIME_EMBEDDING_WIDTH],
            time_embedding(t, TIME_EMBEDDING_WIDTH),
        )?);
        let emb = self.time.forward(g, p, emb)?;
        let emb = g.reshape(emb, &[self.width])?;
        Ok(self.net.forward_shared(g, p, tokens, Some(emb))?)
    }
}

impl NoisePredictor for Denoiser {
    fn predict(
        &self,
        x_t: &Tensor,
        t: usize,
        cond: Option<&Tensor>,
    ) -> Result<Tensor, DiffusionError> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(x_t.clone());
        let c = cond.map(|c| g.constant(c.clone()));
        let out = self.forward(&mut g, &p, x, t, c)?;
        Ok(g.value(out).clone())
    }
}
