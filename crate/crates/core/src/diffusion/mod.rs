//! Cascaded denoising diffusion over pose latents: an unconditional model
//! over keypoint sets and a keypoint-conditioned model over features.

mod denoiser;

pub use denoiser::{time_embedding, Denoiser, TIME_EMBEDDING_WIDTH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::nets::{read_params, write_params, NetError, PoseLatent};
use crate::tensor::{Adam, AdamConfig, Checkpoint, CheckpointError, Graph, Tensor, TensorError};
use crate::train::{batch_indices, History};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid noise schedule: {0}")]
    Schedule(String),
    #[error("diffusion step {t} outside 1..={max}")]
    Step { t: usize, max: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("need at least 2 latents, got {0}")]
    TooFewLatents(usize),
    #[error("invalid diffusion configuration: {0}")]
    Config(String),
    #[error("non-finite diffusion loss at step {0}")]
    NonFinite(u64),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Linear β schedule over steps `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub beta_start: f64,
    pub beta_end: f64,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 5e-2).expect("valid default schedule")
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, DiffusionError> {
        if steps < 2 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(DiffusionError::Schedule(format!(
                "need T >= 2 and 0 < beta_start < beta_end < 1, got T={steps}, {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self {
            beta_start,
            beta_end,
            betas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::Step {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// Standard deviation of the noise added when stepping from `t` to
    /// `t − 1`; zero on the final step.
    pub fn sigma(&self, t: usize) -> f64 {
        if t == 1 {
            0.0
        } else {
            self.beta(t).sqrt()
        }
    }

    fn write_meta(&self, ck: &mut Checkpoint) {
        ck.set_meta("schedule_steps", self.steps());
        ck.set_meta("beta_start", format!("{:e}", self.beta_start));
        ck.set_meta("beta_end", format!("{:e}", self.beta_end));
    }

    fn from_meta(ck: &Checkpoint) -> Result<Self, DiffusionError> {
        Self::linear(
            ck.meta_parse("schedule_steps")?,
            ck.meta_parse("beta_start")?,
            ck.meta_parse("beta_end")?,
        )
    }
}

pub fn forward_noise(
    schedule: &NoiseSchedule,
    x0: &Tensor,
    t: usize,
    noise: &Tensor,
) -> Result<Tensor, DiffusionError> {
    schedule.check(t)?;
    if x0.shape() != noise.shape() {
        return Err(DiffusionError::Shape(format!(
            "x0 {:?} vs noise {:?}",
            x0.shape(),
            noise.shape()
        )));
    }
    let (a, b) = (
        schedule.alpha_bar(t).sqrt(),
        (1.0 - schedule.alpha_bar(t)).sqrt(),
    );
    let data = x0
        .data()
        .iter()
        .zip(noise.data())
        .map(|(x, e)| a * x + b * e)
        .collect();
    Ok(Tensor::new(x0.shape().to_vec(), data)?)
}

pub fn standard_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sized from shape")
}

/// Predicts the noise in `x_t` at step `t`.
pub trait NoisePredictor {
    fn predict(
        &self,
        x_t: &Tensor,
        t: usize,
        cond: Option<&Tensor>,
    ) -> Result<Tensor, DiffusionError>;
}

/// Mean squared error between `noise` and the prediction for a fixed step
/// and noise draw.
pub fn denoise_loss_at(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    x0: &Tensor,
    cond: Option<&Tensor>,
    t: usize,
    noise: &Tensor,
) -> Result<f64, DiffusionError> {
    let x_t = forward_noise(schedule, x0, t, noise)?;
    let pred = model.predict(&x_t, t, cond)?;
    if pred.shape() != noise.shape() {
        return Err(DiffusionError::Shape(format!(
            "prediction {:?} vs {:?}",
            pred.shape(),
            noise.shape()
        )));
    }
    let se: f64 = pred
        .data()
        .iter()
        .zip(noise.data())
        .map(|(p, e)| (p - e) * (p - e))
        .sum();
    Ok(se / noise.numel() as f64)
}

/// Draws `t` uniformly from `1..=T` and standard normal noise.
pub fn denoise_loss_keypoints(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    z0: &Tensor,
    rng: &mut impl Rng,
) -> Result<f64, DiffusionError> {
    let t = rng.random_range(1..=schedule.steps());
    let noise = standard_normal(z0.shape(), rng);
    denoise_loss_at(model, schedule, z0, None, t, &noise)
}

pub fn denoise_loss_features(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    h0: &Tensor,
    z0: &Tensor,
    rng: &mut impl Rng,
) -> Result<f64, DiffusionError> {
    if h0.shape()[0] != z0.shape()[0] {
        return Err(DiffusionError::Shape(format!(
            "{} feature tokens conditioned on {} keypoints",
            h0.shape()[0],
            z0.shape()[0]
        )));
    }
    let t = rng.random_range(1..=schedule.steps());
    let noise = standard_normal(h0.shape(), rng);
    denoise_loss_at(model, schedule, h0, Some(z0), t, &noise)
}

/// One ancestral step `x_t → x_{t−1}`. `added_noise` is scaled by
/// [`NoiseSchedule::sigma`], so it has no effect at `t = 1`.
pub fn reverse_step(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    x_t: &Tensor,
    t: usize,
    cond: Option<&Tensor>,
    added_noise: &Tensor,
) -> Result<Tensor, DiffusionError> {
    schedule.check(t)?;
    let eps = model.predict(x_t, t, cond)?;
    if eps.shape() != x_t.shape() || added_noise.shape() != x_t.shape() {
        return Err(DiffusionError::Shape(format!(
            "x_t {:?}, prediction {:?}, noise {:?}",
            x_t.shape(),
            eps.shape(),
            added_noise.shape()
        )));
    }
    let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let inv = 1.0 / schedule.alpha(t).sqrt();
    let sigma = schedule.sigma(t);
    let data = x_t
        .data()
        .iter()
        .zip(eps.data())
        .zip(added_noise.data())
        .map(|((x, e), z)| (x - coef * e) * inv + sigma * z)
        .collect();
    Ok(Tensor::new(x_t.shape().to_vec(), data)?)
}

/// Full reverse chain from standard normal noise at step `T`.
pub fn sample_chain(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    shape: &[usize],
    cond: Option<&Tensor>,
    rng: &mut impl Rng,
) -> Result<Tensor, DiffusionError> {
    let mut x = standard_normal(shape, rng);
    for t in (1..=schedule.steps()).rev() {
        let z = if t > 1 {
            standard_normal(shape, rng)
        } else {
            Tensor::zeros(shape)
        };
        x = reverse_step(model, schedule, &x, t, cond, &z)?;
    }
    Ok(x)
}

pub const STD_FLOOR: f64 = 1e-8;

/// Per-channel mean and standard deviation of keypoints and features, pooled
/// over all tokens of all training latents.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    pub keypoint_mean: Vec<f64>,
    pub keypoint_std: Vec<f64>,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
}

fn channel_stats<'a>(
    rows: impl Iterator<Item = &'a [f64]> + Clone,
    c: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; c];
    let mut n = 0usize;
    for r in rows.clone() {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
        n += 1;
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; c];
    for r in rows {
        for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let std = var
        .iter()
        .map(|v| (v / n as f64).sqrt().max(STD_FLOOR))
        .collect();
    (mean, std)
}

fn affine(t: &Tensor, shift: &[f64], scale: &[f64], forward: bool) -> Tensor {
    let c = t.shape()[1];
    let data = t
        .data()
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let j = i % c;
            if forward {
                (x - shift[j]) / scale[j]
            } else {
                x * scale[j] + shift[j]
            }
        })
        .collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

impl LatentStats {
    pub fn from_latents(latents: &[PoseLatent]) -> Self {
        let rows = |f: fn(&PoseLatent) -> &Tensor| {
            latents
                .iter()
                .flat_map(move |l| (0..l.len()).map(move |i| f(l).row(i)))
        };
        let (keypoint_mean, keypoint_std) = channel_stats(rows(|l| &l.keypoints), 3);
        let d = latents[0].width();
        let (feature_mean, feature_std) = channel_stats(rows(|l| &l.features), d);
        Self {
            keypoint_mean,
            keypoint_std,
            feature_mean,
            feature_std,
        }
    }

    pub fn normalize(&self, latent: &PoseLatent) -> (Tensor, Tensor) {
        (
            affine(
                &latent.keypoints,
                &self.keypoint_mean,
                &self.keypoint_std,
                true,
            ),
            affine(
                &latent.features,
                &self.feature_mean,
                &self.feature_std,
                true,
            ),
        )
    }

    pub fn denormalize(&self, z: &Tensor, h: &Tensor) -> Result<PoseLatent, DiffusionError> {
        Ok(PoseLatent::new(
            affine(z, &self.keypoint_mean, &self.keypoint_std, false),
            affine(h, &self.feature_mean, &self.feature_std, false),
        )?)
    }

    fn write(&self, ck: &mut Checkpoint) {
        let v = |x: &Vec<f64>| Tensor::new(vec![x.len()], x.clone()).expect("vector");
        ck.push_tensor("stats/keypoint_mean", v(&self.keypoint_mean));
        ck.push_tensor("stats/keypoint_std", v(&self.keypoint_std));
        ck.push_tensor("stats/feature_mean", v(&self.feature_mean));
        ck.push_tensor("stats/feature_std", v(&self.feature_std));
    }

    fn read(ck: &Checkpoint) -> Result<Self, DiffusionError> {
        let get = |n: &str| -> Result<Vec<f64>, DiffusionError> {
            let key = format!("stats/{n}");
            Ok(ck
                .tensor(&key)
                .ok_or(CheckpointError::Missing(key))?
                .data()
                .to_vec())
        };
        Ok(Self {
            keypoint_mean: get("keypoint_mean")?,
            keypoint_std: get("keypoint_std")?,
            feature_mean: get("feature_mean")?,
            feature_std: get("feature_std")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionConfig {
    /// ADAM steps per model.
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Token width of both denoisers.
    pub width: usize,
    pub blocks: usize,
    pub schedule: NoiseSchedule,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            lr: 1e-3,
            batch_size: 4,
            seed: 0,
            width: 64,
            blocks: 2,
            schedule: NoiseSchedule::default(),
        }
    }
}

/// Keypoint model, feature model, normalization and schedule.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    pub schedule: NoiseSchedule,
    pub keypoint: Denoiser,
    pub feature: Denoiser,
    pub stats: LatentStats,
    pub keypoints: usize,
}

impl DiffusionModel {
    pub fn feature_width(&self) -> usize {
        self.feature.channels
    }

    pub fn sample_cascaded(&self, seed: u64) -> Result<PoseLatent, DiffusionError> {
        sample_cascaded(
            &self.keypoint,
            &self.feature,
            &self.schedule,
            &self.stats,
            self.keypoints,
            seed,
        )
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "diffusion");
        self.schedule.write_meta(&mut ck);
        ck.set_meta("keypoints", self.keypoints);
        ck.set_meta("feature_width", self.feature.channels);
        ck.set_meta("denoiser_width", self.keypoint.width);
        ck.set_meta("denoiser_blocks", self.keypoint.blocks);
        write_params(&mut ck, "keypoint/", &self.keypoint.params);
        write_params(&mut ck, "feature/", &self.feature.params);
        self.stats.write(&mut ck);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, DiffusionError> {
        let kind = ck.require_meta("kind")?;
        if kind != "diffusion" {
            return Err(CheckpointError::Mismatch {
                key: "kind".into(),
                stored: kind.into(),
                expected: "diffusion".into(),
            }
            .into());
        }
        let schedule = NoiseSchedule::from_meta(ck)?;
        let d: usize = ck.meta_parse("feature_width")?;
        let width: usize = ck.meta_parse("denoiser_width")?;
        let blocks: usize = ck.meta_parse("denoiser_blocks")?;
        let mut keypoint = Denoiser::new(3, 0, width, blocks, 0);
        let mut feature = Denoiser::new(d, 3, width, blocks, 0);
        read_params(ck, "keypoint/", &mut keypoint.params)?;
        read_params(ck, "feature/", &mut feature.params)?;
        let stats = LatentStats::read(ck)?;
        if stats.keypoint_mean.len() != 3 || stats.feature_mean.len() != d {
            return Err(DiffusionError::Shape(
                "latent statistics do not match the models".into(),
            ));
        }
        Ok(Self {
            schedule,
            keypoint,
            feature,
            stats,
            keypoints: ck.meta_parse("keypoints")?,
        })
    }
}

/// Keypoint chain first, then the feature chain conditioned on the sampled
/// keypoints; both in normalized units, de-normalized at the end.
pub fn sample_cascaded(
    keypoint_model: &dyn NoisePredictor,
    feature_model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    stats: &LatentStats,
    keypoints: usize,
    seed: u64,
) -> Result<PoseLatent, DiffusionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = sample_chain(keypoint_model, schedule, &[keypoints, 3], None, &mut rng)?;
    let d = stats.feature_mean.len();
    let h = sample_chain(feature_model, schedule, &[keypoints, d], Some(&z), &mut rng)?;
    stats.denormalize(&z, &h)
}

fn train_denoiser(
    model: &mut Denoiser,
    config: &DiffusionConfig,
    data: &[(Tensor, Option<Tensor>)],
    stream: u64,
) -> Result<History, DiffusionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream);
    let mut adam = Adam::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let schedule = &config.schedule;
    let mut history = History::new(&["loss"]);
    for step in 0..config.steps {
        let batch = batch_indices(config.seed ^ stream, step, config.batch_size, data.len());
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, true);
        let mut total = None;
        for &i in &batch {
            let (x0, cond) = &data[i];
            let t = rng.random_range(1..=schedule.steps());
            let noise = standard_normal(x0.shape(), &mut rng);
            let x_t = g.constant(forward_noise(schedule, x0, t, &noise)?);
            let c = cond.as_ref().map(|c| g.constant(c.clone()));
            let pred = model.forward(&mut g, &p, x_t, t, c)?;
            let e = g.constant(noise);
            let diff = g.sub(pred, e)?;
            let sq = g.mul(diff, diff)?;
            let l = g.mean_all(sq)?;
            total = Some(match total {
                None => l,
                Some(acc) => g.add(acc, l)?,
            });
        }
        let loss = g.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(DiffusionError::NonFinite(step));
        }
        g.backward(loss)?;
        let grads = p.grads(&g);
        adam.step(model.params.tensors_mut(), &grads)?;
        history.push(step, vec![value]);
    }
    Ok(history)
}

/// Loss histories of the two denoisers.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionHistory {
    pub keypoint: History,
    pub feature: History,
}

/// Trains the keypoint model, then the feature model conditioned on the
/// clean training keypoints.
pub fn train_diffusion(
    config: &DiffusionConfig,
    latents: &[PoseLatent],
) -> Result<(DiffusionModel, DiffusionHistory), DiffusionError> {
    if latents.len() < 2 {
        return Err(DiffusionError::TooFewLatents(latents.len()));
    }
    if config.batch_size == 0 || config.width == 0 || !(config.lr > 0.0) {
        return Err(DiffusionError::Config(format!(
            "batch_size, width and lr must be positive: {config:?}"
        )));
    }
    let (k, d) = (latents[0].len(), latents[0].width());
    if let Some(bad) = latents.iter().position(|l| l.len() != k || l.width() != d) {
        return Err(DiffusionError::Shape(format!(
            "latent {bad} is {}x{} but latent 0 is {k}x{d}",
            latents[bad].len(),
            latents[bad].width()
        )));
    }
    let stats = LatentStats::from_latents(latents);
    let normalized: Vec<(Tensor, Tensor)> = latents.iter().map(|l| stats.normalize(l)).collect();
    let mut keypoint = Denoiser::new(3, 0, config.width, config.blocks, config.seed);
    let mut feature = Denoiser::new(
        d,
        3,
        config.width,
        config.blocks,
        config.seed.wrapping_add(1),
    );
    let kp_data: Vec<_> = normalized.iter().map(|(z, _)| (z.clone(), None)).collect();
    let kp_hist = train_denoiser(&mut keypoint, config, &kp_data, 1)?;
    let ft_data: Vec<_> = normalized
        .iter()
        .map(|(z, h)| (h.clone(), Some(z.clone())))
        .collect();
    let ft_hist = train_denoiser(&mut feature, config, &ft_data, 2)?;
    Ok((
        DiffusionModel {
            schedule: config.schedule.clone(),
            keypoint,
            feature,
            stats,
            keypoints: k,
        },
        DiffusionHistory {
            keypoint: kp_hist,
            feature: ft_hist,
        },
    ))
}

/// Two-cluster latent distribution for checking that a trained cascade lands
/// on the training modes.
#[derive(Debug, Clone)]
pub struct ToyClusters {
    pub centers: [PoseLatent; 2],
    /// Per-dimension standard deviation around each center.
    pub spread: f64,
    pub latents: Vec<PoseLatent>,
}

impl ToyClusters {
    /// `n` latents of `k` tokens split evenly between two random centers.
    pub fn generate(
        k: usize,
        d: usize,
        n: usize,
        spread: f64,
        seed: u64,
    ) -> Result<Self, DiffusionError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut center = || -> Result<PoseLatent, DiffusionError> {
            let kp = Tensor::new(
                vec![k, 3],
                (0..3 * k).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )?;
            let ft = Tensor::new(
                vec![k, d],
                (0..d * k).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )?;
            Ok(PoseLatent::new(kp, ft)?)
        };
        let centers = [center()?, center()?];
        let jitter = |t: &Tensor, rng: &mut ChaCha8Rng| {
            let data = t
                .data()
                .iter()
                .map(|x| x + spread * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Tensor::new(t.shape().to_vec(), data).expect("same shape")
        };
        let latents = (0..n)
            .map(|i| {
                let c = &centers[i % 2];
                PoseLatent::new(
                    jitter(&c.keypoints, &mut rng),
                    jitter(&c.features, &mut rng),
                )
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            centers,
            spread,
            latents,
        })
    }

    /// Smallest RMS distance to a center in units of `spread`, minimized over
    /// token assignments (tokens are an unordered set).
    pub fn distance(&self, sample: &PoseLatent) -> f64 {
        self.centers
            .iter()
            .map(|c| matched_rms(sample, c) / self.spread)
            .fold(f64::INFINITY, f64::min)
    }
}

fn token_sq(a: &PoseLatent, i: usize, b: &PoseLatent, j: usize) -> f64 {
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    sq(a.keypoints.row(i), b.keypoints.row(j)) + sq(a.features.row(i), b.features.row(j))
}

/// Exhaustive assignment; meant for the handful of tokens in toy sets.
fn matched_rms(a: &PoseLatent, b: &PoseLatent) -> f64 {
    fn best(a: &PoseLatent, b: &PoseLatent, i: usize, used: &mut [bool]) -> f64 {
        if i == used.len() {
            return 0.0;
        }
        let mut out = f64::INFINITY;
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                out = out.min(token_sq(a, i, b, j) + best(a, b, i + 1, used));
                used[j] = false;
            }
        }
        out
    }
    let k = a.len();
    let dims = k * (3 + a.width());
    (best(a, b, 0, &mut vec![false; k]) / dims as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Zero;
    impl NoisePredictor for Zero {
        fn predict(
            &self,
            x_t: &Tensor,
            _: usize,
            _: Option<&Tensor>,
        ) -> Result<Tensor, DiffusionError> {
            Ok(Tensor::zeros(x_t.shape()))
        }
    }

    /// Exact noise for a dataset holding the single point `x`.
    struct Memorized<'a>(&'a NoiseSchedule, Tensor);
    impl NoisePredictor for Memorized<'_> {
        fn predict(
            &self,
            x_t: &Tensor,
            t: usize,
            _: Option<&Tensor>,
        ) -> Result<Tensor, DiffusionError> {
            let ab = self.0.alpha_bar(t);
            let data = x_t
                .data()
                .iter()
                .zip(self.1.data())
                .map(|(x, x0)| (x - ab.sqrt() * x0) / (1.0 - ab).sqrt())
                .collect();
            Ok(Tensor::new(x_t.shape().to_vec(), data)?)
        }
    }

    #[test]
    fn schedule_invariants() {
        let s = NoiseSchedule::default();
        assert_eq!(s.steps(), 1000);
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(1000) - 5e-2).abs() < 1e-15);
        for t in 2..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(NoiseSchedule::linear(10, 0.5, 0.1).is_err());
        assert!(matches!(
            forward_noise(&s, &Tensor::zeros(&[1]), 0, &Tensor::zeros(&[1])),
            Err(DiffusionError::Step { .. })
        ));
        assert!(matches!(
            forward_noise(&s, &Tensor::zeros(&[1]), 1001, &Tensor::zeros(&[1])),
            Err(DiffusionError::Step { .. })
        ));
    }

    #[test]
    fn forward_noise_limits() {
        let s = NoiseSchedule::default();
        let x0 = Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let e = Tensor::new(vec![2, 2], vec![1.0, -1.0, 0.3, 2.0]).unwrap();
        let x1 = forward_noise(&s, &x0, 1, &e).unwrap();
        for ((a, b), n) in x1.data().iter().zip(x0.data()).zip(e.data()) {
            assert!((a - b).abs() <= 1e-4f64.sqrt() * n.abs() + 1e-12);
        }
        let z = forward_noise(&s, &Tensor::zeros(&[2, 2]), 500, &e).unwrap();
        let k = (1.0 - s.alpha_bar(500)).sqrt();
        for (a, n) in z.data().iter().zip(e.data()) {
            assert_eq!(*a, k * n);
        }
    }

    #[test]
    fn oracle_and_zero_losses() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = standard_normal(&[8, 3], &mut rng);
        let oracle = Memorized(&s, x0.clone());
        for _ in 0..5 {
            assert!(denoise_loss_keypoints(&oracle, &s, &x0, &mut rng).unwrap() < 1e-20);
        }
        // the zero model's loss is the mean square of standard normal draws
        let n = 4000;
        let mean: f64 = (0..n)
            .map(|_| denoise_loss_keypoints(&Zero, &s, &x0, &mut rng).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
        let bad_cond = Tensor::zeros(&[5, 3]);
        assert!(denoise_loss_features(&Zero, &s, &x0, &bad_cond, &mut rng).is_err());
    }

    #[test]
    fn reverse_step_scalar_case() {
        let s = NoiseSchedule::default();
        let eps_hat = 0.7;
        struct Const(f64);
        impl NoisePredictor for Const {
            fn predict(
                &self,
                x: &Tensor,
                _: usize,
                _: Option<&Tensor>,
            ) -> Result<Tensor, DiffusionError> {
                Ok(Tensor::full(x.shape(), self.0))
            }
        }
        let x = Tensor::scalar(1.3).reshaped(&[1, 1]).unwrap();
        let z = Tensor::full(&[1, 1], -0.4);
        let got = reverse_step(&Const(eps_hat), &s, &x, 2, None, &z)
            .unwrap()
            .item();
        // hand-expanded for t = 2
        let b1: f64 = 1e-4;
        let b2: f64 = 1e-4 + (5e-2 - 1e-4) / 999.0;
        let ab2 = (1.0 - b1) * (1.0 - b2);
        let want = (1.3 - b2 / (1.0 - ab2).sqrt() * eps_hat) / (1.0 - b2).sqrt() + b2.sqrt() * -0.4;
        assert!((got - want).abs() < 1e-14);
        // no added noise on the last step, and ε̂ = 0 with tiny β keeps x
        let last = reverse_step(&Zero, &s, &x, 1, None, &z).unwrap().item();
        assert!((last - 1.3).abs() <= 1.3 * 1e-4);
    }

    #[test]
    fn memorized_point_is_recovered() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let target = standard_normal(&[6, 3], &mut rng);
        let oracle = Memorized(&s, target.clone());
        let mut x = standard_normal(&[6, 3], &mut rng);
        let zero = Tensor::zeros(&[6, 3]);
        for t in (1..=s.steps()).rev() {
            x = reverse_step(&oracle, &s, &x, t, None, &zero).unwrap();
        }
        let scale = target.max_abs();
        for (a, b) in x.data().iter().zip(target.data()) {
            assert!((a - b).abs() <= 0.05 * scale);
        }
    }

    #[test]
    fn stats_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let latents: Vec<PoseLatent> = (0..4)
            .map(|_| {
                PoseLatent::new(
                    standard_normal(&[5, 3], &mut rng),
                    standard_normal(&[5, 2], &mut rng),
                )
                .unwrap()
            })
            .collect();
        let stats = LatentStats::from_latents(&latents);
        for l in &latents {
            let (z, h) = stats.normalize(l);
            let back = stats.denormalize(&z, &h).unwrap();
            for (a, b) in back
                .keypoints
                .data()
                .iter()
                .chain(back.features.data())
                .zip(l.keypoints.data().iter().chain(l.features.data()))
            {
                assert!((a - b).abs() <= 1e-12);
            }
        }
        let constant = vec![latents[0].clone(), latents[0].clone()];
        let s = LatentStats::from_latents(&constant);
        assert!(s.keypoint_std.iter().all(|&v| v >= STD_FLOOR));
    }

    #[test]
    fn denoiser_is_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut m = Denoiser::new(4, 3, 16, 2, 1);
        let id = m.params.find("set.out.w").unwrap();
        for x in m.params.get_mut(id).data_mut() {
            *x = rng.random_range(-0.3..0.3);
        }
        let h = standard_normal(&[9, 4], &mut rng);
        let z = standard_normal(&[9, 3], &mut rng);
        let base = m.predict(&h, 17, Some(&z)).unwrap();
        let perm = [8, 3, 1, 0, 7, 2, 6, 4, 5];
        let pick = |t: &Tensor| {
            let w = t.shape()[1];
            Tensor::new(
                vec![9, w],
                perm.iter().flat_map(|&i| t.row(i).to_vec()).collect(),
            )
            .unwrap()
        };
        assert_eq!(
            m.predict(&pick(&h), 17, Some(&pick(&z))).unwrap(),
            pick(&base)
        );
    }
    #[test]
    fn forward_noise_monte_carlo() {
        let s = NoiseSchedule::default();
        let x0 = Tensor::new(vec![1, 2], vec![0.8, -1.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let t = 500;
        let (mut sum, mut sq) = ([0.0; 2], [0.0; 2]);
        for _ in 0..n {
            let e = standard_normal(&[1, 2], &mut rng);
            let x = forward_noise(&s, &x0, t, &e).unwrap();
            for j in 0..2 {
                sum[j] += x.data()[j];
                sq[j] += x.data()[j] * x.data()[j];
            }
        }
        let ab = s.alpha_bar(t);
        for j in 0..2 {
            let mean = sum[j] / n as f64;
            let var = sq[j] / n as f64 - mean * mean;
            let want = ab.sqrt() * x0.data()[j];
            // the mean is compared on the noise scale: at t = 500 it is ~√ᾱ·x0 ≈ 0.03,
            // far below the sampling error of 10⁵ draws
            assert!(
                (mean - want).abs() <= 0.01 * (1.0 - ab).sqrt(),
                "{mean} vs {want}"
            );
            assert!((var - (1.0 - ab)).abs() <= 0.01 * (1.0 - ab));
        }
    }

    #[test]
    fn feature_loss_commutes_with_joint_permutation() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut m = Denoiser::new(5, 3, 16, 1, 4);
        let id = m.params.find("set.out.w").unwrap();
        for x in m.params.get_mut(id).data_mut() {
            *x = rng.random_range(-0.3..0.3);
        }
        let h = standard_normal(&[6, 5], &mut rng);
        let z = standard_normal(&[6, 3], &mut rng);
        let e = standard_normal(&[6, 5], &mut rng);
        let perm = [2, 5, 0, 1, 4, 3];
        let pick = |t: &Tensor| {
            let w = t.shape()[1];
            Tensor::new(
                vec![6, w],
                perm.iter().flat_map(|&i| t.row(i).to_vec()).collect(),
            )
            .unwrap()
        };
        for t in [1, 300, 1000] {
            let a = denoise_loss_at(&m, &s, &h, Some(&z), t, &e).unwrap();
            let b = denoise_loss_at(&m, &s, &pick(&h), Some(&pick(&z)), t, &pick(&e)).unwrap();
            assert!((a - b).abs() <= 1e-15 * a, "{a} vs {b}");
            assert!(a.is_finite() && a > 0.0);
        }
    }

    #[test]
    fn training_is_seeded_and_round_trips() {
        let toy = ToyClusters::generate(3, 2, 4, 0.2, 1).unwrap();
        let config = DiffusionConfig {
            steps: 3,
            batch_size: 2,
            width: 8,
            blocks: 1,
            ..DiffusionConfig::default()
        };
        let (a, _) = train_diffusion(&config, &toy.latents).unwrap();
        let (b, _) = train_diffusion(&config, &toy.latents).unwrap();
        let bytes = a.to_checkpoint().to_bytes().unwrap();
        assert_eq!(bytes, b.to_checkpoint().to_bytes().unwrap());
        let back =
            DiffusionModel::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.to_checkpoint().to_bytes().unwrap(), bytes);
        assert!(matches!(
            train_diffusion(&config, &toy.latents[..1]),
            Err(DiffusionError::TooFewLatents(1))
        ));
        let mut mixed = toy.latents.clone();
        mixed[2] = ToyClusters::generate(3, 5, 2, 0.2, 1).unwrap().latents[0].clone();
        assert!(matches!(
            train_diffusion(&config, &mixed),
            Err(DiffusionError::Shape(_))
        ));
    }

    #[test]
    fn toy_distance_ignores_token_order() {
        let toy = ToyClusters::generate(4, 2, 2, 0.1, 3).unwrap();
        assert_eq!(toy.distance(&toy.centers[1]), 0.0);
        let shuffled = toy.centers[0].permuted(&[3, 1, 0, 2]);
        assert!(toy.distance(&shuffled) < 1e-12);
    }
}
