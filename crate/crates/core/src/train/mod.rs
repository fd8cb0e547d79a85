//! Losses and training loops: the autoencoder (extractor + applier) on posed
//! variations of one template, and the per-identity refiner.

mod losses;
mod ops;

pub use losses::{
    centered_mse, loss_jacobian_route, loss_refinement, loss_vertex, points_tensor,
    reconstruction_graph, RefinementTarget, RefinementTerms, RefinementVars, RefinementWeights,
    TemplateContext,
};
pub use ops::{PoissonSolveOp, SparseMatMulOp};

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::mesh::{MeshError, TriMesh, Vec3};
use crate::nets::{
    read_params, write_params, ApplierHead, NetConfig, NetError, PoseApplier, PoseExtractor,
    PoseLatent, Refiner,
};
use crate::poisson::PoissonError;
use crate::tensor::{
    Adam, AdamConfig, Checkpoint, CheckpointError, Graph, ParamSet, Tensor, TensorError,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("connectivity mismatch: {0}")]
    Connectivity(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Poisson(#[from] PoissonError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub weights: RefinementWeights,
    pub seed: u64,
    /// Vertex head trained directly, or Jacobian head through the solve.
    pub route: ApplierHead,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 1e-3,
            batch_size: 4,
            weights: RefinementWeights::default(),
            seed: 0,
            route: ApplierHead::Jacobian,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let w = self.weights;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if [w.lap, w.edge, w.reg]
            .iter()
            .any(|l| !(*l >= 0.0 && l.is_finite()))
        {
            return Err(TrainError::Config(format!(
                "loss weights must be non-negative: {w:?}"
            )));
        }
        Ok(())
    }

    fn adam(&self) -> Adam {
        Adam::new(AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        })
    }
}

/// Sample indices of minibatch `step`. The sample stream is a sequence of
/// epochs, each a seeded shuffle of the dataset, so any step's batch can be
/// recomputed without replaying earlier ones.
pub fn batch_indices(seed: u64, step: u64, batch: usize, n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut epoch_perm: Option<(u64, Vec<usize>)> = None;
    for i in 0..batch as u64 {
        let t = step * batch as u64 + i;
        let (epoch, at) = (t / n as u64, (t % n as u64) as usize);
        if epoch_perm.as_ref().map(|e| e.0) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(epoch);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            epoch_perm = Some((epoch, perm));
        }
        out.push(epoch_perm.as_ref().expect("set above").1[at]);
    }
    out
}

/// Per-step loss log written as comma-separated text.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub columns: Vec<String>,
    pub rows: Vec<(u64, Vec<f64>)>,
}

impl History {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, step: u64, values: Vec<f64>) {
        debug_assert_eq!(values.len(), self.columns.len());
        self.rows.push((step, values));
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.columns.iter().position(|n| n == name)?;
        Some(self.rows.iter().map(|r| r.1[c]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("step,{}\n", self.columns.join(","));
        for (step, vals) in &self.rows {
            let _ = write!(s, "{step}");
            for v in vals {
                let _ = write!(s, ",{v:e}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, TrainError> {
        let bad = |m: String| TrainError::Io {
            path: "history".into(),
            message: m,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty history".into()))?;
        let mut cols = header.split(',');
        if cols.next() != Some("step") {
            return Err(bad(format!("bad header `{header}`")));
        }
        let mut h = Self {
            columns: cols.map(str::to_string).collect(),
            rows: Vec::new(),
        };
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let mut f = line.split(',');
            let step = f
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(line.to_string()))?;
            let vals: Vec<f64> = f
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|_| bad(line.to_string()))?;
            if vals.len() != h.columns.len() {
                return Err(bad(line.to_string()));
            }
            h.rows.push((step, vals));
        }
        Ok(h)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| TrainError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

fn non_finite(step: u64) -> impl Fn(TensorError) -> TrainError {
    move |e| match e {
        TensorError::NonFinite { op } => TrainError::NonFinite {
            step,
            detail: format!("in {op}"),
        },
        other => TrainError::Tensor(other),
    }
}

fn write_adam(ck: &mut Checkpoint, prefix: &str, adam: &Adam, params: &ParamSet) {
    let (m, v) = adam.moments();
    if m.is_empty() {
        return;
    }
    for (((name, _), m), v) in params.iter().zip(m).zip(v) {
        ck.push_tensor(format!("{prefix}m/{name}"), m.clone());
        ck.push_tensor(format!("{prefix}v/{name}"), v.clone());
    }
}

fn read_adam(
    ck: &Checkpoint,
    prefix: &str,
    config: &TrainConfig,
    step: u64,
    params: &ParamSet,
) -> Result<Adam, TrainError> {
    let mut adam = config.adam();
    if step == 0 {
        return Ok(adam);
    }
    let fetch = |kind: &str| -> Result<Vec<Tensor>, TrainError> {
        params
            .iter()
            .map(|(name, p)| {
                let key = format!("{prefix}{kind}/{name}");
                let t = ck
                    .tensor(&key)
                    .ok_or_else(|| CheckpointError::Missing(key.clone()))?;
                if t.shape() != p.shape() {
                    return Err(TrainError::Shape(format!("optimizer state `{key}`")));
                }
                Ok(t.clone())
            })
            .collect()
    };
    let (m, v) = (fetch("m")?, fetch("v")?);
    adam.restore(step, m, v);
    Ok(adam)
}

/// Extractor and applier trained together on one template.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub extractor: PoseExtractor,
    pub applier: PoseApplier,
}

impl Autoencoder {
    pub fn new(config: NetConfig, head: ApplierHead, seed: u64) -> Result<Self, TrainError> {
        Ok(Self {
            extractor: PoseExtractor::new(config, seed)?,
            applier: PoseApplier::new(config, head, seed.wrapping_add(1))?,
        })
    }

    pub fn config(&self) -> NetConfig {
        self.extractor.config
    }

    pub fn head(&self) -> ApplierHead {
        self.applier.head
    }

    /// Applies `latent` to the template in `ctx` and returns vertex positions.
    pub fn decode(
        &self,
        latent: &PoseLatent,
        ctx: &TemplateContext,
    ) -> Result<Vec<Vec3>, TrainError> {
        match self.head() {
            ApplierHead::Jacobian => {
                let j = self.applier.apply_pose(latent, &ctx.template)?;
                Ok(ctx.system.solve(&j)?)
            }
            ApplierHead::Vertex => Ok(self.applier.apply_vertices(latent, &ctx.template)?),
        }
    }

    /// Extracts the pose of `source`, optionally refines it, and applies it to
    /// the template in `target`.
    pub fn transfer(
        &self,
        source: &TriMesh,
        target: &TemplateContext,
        refiner: Option<&Refiner>,
    ) -> Result<Vec<Vec3>, TrainError> {
        let mut latent = self.extractor.extract(source)?;
        if let Some(r) = refiner {
            latent = r.refine_latent(&latent)?;
        }
        self.decode(&latent, target)
    }

    pub fn write_checkpoint(&self, ck: &mut Checkpoint) {
        ck.set_meta("kind", "autoencoder");
        ck.set_meta("route", self.head().name());
        self.config().write_meta(ck);
        self.extractor.write_checkpoint(ck, "extractor/");
        self.applier.write_checkpoint(ck, "applier/");
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, TrainError> {
        expect_kind(ck, "autoencoder")?;
        let config = NetConfig::from_meta(ck)?;
        let route = ck.require_meta("route")?;
        let head = ApplierHead::parse(route)
            .ok_or_else(|| TrainError::Config(format!("unknown route `{route}`")))?;
        Ok(Self {
            extractor: PoseExtractor::from_checkpoint(ck, "extractor/", config)?,
            applier: PoseApplier::from_checkpoint(ck, "applier/", config, head)?,
        })
    }
}

fn expect_kind(ck: &Checkpoint, kind: &str) -> Result<(), TrainError> {
    let stored = ck.require_meta("kind")?;
    if stored != kind {
        return Err(CheckpointError::Mismatch {
            key: "kind".into(),
            stored: stored.into(),
            expected: kind.into(),
        }
        .into());
    }
    Ok(())
}

fn write_train_meta(ck: &mut Checkpoint, config: &TrainConfig, step: u64) {
    ck.set_meta("step", step);
    ck.set_meta("seed", config.seed);
    ck.set_meta("batch_size", config.batch_size);
    ck.set_meta("lr", format!("{:e}", config.lr));
}

/// Resumable autoencoder optimization state.
pub struct AutoencoderTrainer {
    pub model: Autoencoder,
    pub config: TrainConfig,
    pub step: u64,
    pub history: History,
    opt_extractor: Adam,
    opt_applier: Adam,
    ctx: TemplateContext,
    data: Vec<TriMesh>,
}

impl AutoencoderTrainer {
    pub fn new(
        model: Autoencoder,
        config: TrainConfig,
        data: Vec<TriMesh>,
        template: &TriMesh,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        if model.head() != config.route {
            return Err(TrainError::Config(format!(
                "model has a {} head but the route is {}",
                model.head().name(),
                config.route.name()
            )));
        }
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let ctx = TemplateContext::new(template)?;
        for m in &data {
            ctx.check(m)?;
        }
        Ok(Self {
            model,
            step: 0,
            history: History::new(&["loss"]),
            opt_extractor: config.adam(),
            opt_applier: config.adam(),
            config,
            ctx,
            data,
        })
    }

    pub fn context(&self) -> &TemplateContext {
        &self.ctx
    }

    /// One ADAM step on the next minibatch; returns the batch loss.
    pub fn step(&mut self) -> Result<f64, TrainError> {
        let step = self.step;
        let guard = non_finite(step);
        let batch = batch_indices(
            self.config.seed,
            step,
            self.config.batch_size,
            self.data.len(),
        );
        let mut g = Graph::new();
        let pe = self.model.extractor.params.bind(&mut g, true);
        let pa = self.model.applier.params.bind(&mut g, true);
        let mut total = None;
        for &i in &batch {
            let l = reconstruction_graph(
                &mut g,
                (&self.model.extractor, &pe),
                (&self.model.applier, &pa),
                &self.data[i],
                &self.ctx,
            )
            .map_err(|e| match e {
                TrainError::Tensor(t) => guard(t),
                other => other,
            })?;
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l).map_err(&guard)?,
            });
        }
        let loss = g
            .scale(
                total.expect("batch is never empty"),
                1.0 / batch.len() as f64,
            )
            .map_err(&guard)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                detail: "loss".into(),
            });
        }
        g.backward(loss).map_err(&guard)?;
        let ge = pe.grads(&g);
        let ga = pa.grads(&g);
        self.opt_extractor
            .step(self.model.extractor.params.tensors_mut(), &ge)?;
        self.opt_applier
            .step(self.model.applier.params.tensors_mut(), &ga)?;
        self.history.push(step, vec![value]);
        self.step += 1;
        Ok(value)
    }

    pub fn run(&mut self, steps: u64) -> Result<(), TrainError> {
        for _ in 0..steps {
            self.step()?;
        }
        Ok(())
    }

    /// Mean reconstruction loss over the whole dataset.
    pub fn dataset_loss(&self) -> Result<f64, TrainError> {
        dataset_loss(&self.model, &self.data, &self.ctx)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        self.model.write_checkpoint(&mut ck);
        write_train_meta(&mut ck, &self.config, self.step);
        write_adam(
            &mut ck,
            "opt/extractor/",
            &self.opt_extractor,
            &self.model.extractor.params,
        );
        write_adam(
            &mut ck,
            "opt/applier/",
            &self.opt_applier,
            &self.model.applier.params,
        );
        ck
    }

    /// Continues from a checkpoint written by [`Self::to_checkpoint`]; the
    /// step counter and optimizer moments carry over.
    pub fn resume(
        ck: &Checkpoint,
        config: TrainConfig,
        data: Vec<TriMesh>,
        template: &TriMesh,
    ) -> Result<Self, TrainError> {
        let model = Autoencoder::from_checkpoint(ck)?;
        let step: u64 = ck.meta_parse("step")?;
        let opt_extractor =
            read_adam(ck, "opt/extractor/", &config, step, &model.extractor.params)?;
        let opt_applier = read_adam(ck, "opt/applier/", &config, step, &model.applier.params)?;
        let mut t = Self::new(model, config, data, template)?;
        t.step = step;
        t.opt_extractor = opt_extractor;
        t.opt_applier = opt_applier;
        Ok(t)
    }
}

pub fn dataset_loss(
    model: &Autoencoder,
    data: &[TriMesh],
    ctx: &TemplateContext,
) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut sum = 0.0;
    for m in data {
        let mut g = Graph::new();
        let pe = model.extractor.params.bind(&mut g, false);
        let pa = model.applier.params.bind(&mut g, false);
        let l = reconstruction_graph(
            &mut g,
            (&model.extractor, &pe),
            (&model.applier, &pa),
            m,
            ctx,
        )?;
        sum += g.value(l).item();
    }
    Ok(sum / data.len() as f64)
}

/// Trains a fresh autoencoder for `config.steps` steps.
pub fn train_autoencoder(
    config: TrainConfig,
    net: NetConfig,
    data: &[TriMesh],
    template: &TriMesh,
) -> Result<(Autoencoder, History), TrainError> {
    let model = Autoencoder::new(net, config.route, config.seed)?;
    let mut t = AutoencoderTrainer::new(model, config, data.to_vec(), template)?;
    t.run(config.steps)?;
    Ok((t.model, t.history))
}

/// Refinement terms of every latent pushed through `refiner` and `model` onto
/// the target.
pub fn refinement_terms(
    model: &Autoencoder,
    refiner: &Refiner,
    latents: &[PoseLatent],
    target: &TemplateContext,
    weights: RefinementWeights,
) -> Result<Vec<RefinementTerms>, TrainError> {
    let reg = RefinementTarget::new(&target.template);
    latents
        .iter()
        .map(|l| {
            let mut g = Graph::new();
            let pr = refiner.params.bind(&mut g, false);
            let pa = model.applier.params.bind(&mut g, false);
            let vars = refine_graph(&mut g, model, &pa, refiner, &pr, l, target, &reg, weights)?;
            Ok(vars.values(&g))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn refine_graph(
    g: &mut Graph,
    model: &Autoencoder,
    pa: &crate::tensor::Bindings,
    refiner: &Refiner,
    pr: &crate::tensor::Bindings,
    latent: &PoseLatent,
    target: &TemplateContext,
    reg: &RefinementTarget,
    weights: RefinementWeights,
) -> Result<RefinementVars, TrainError> {
    let z = g.constant(latent.keypoints.clone());
    let h = g.constant(latent.features.clone());
    let r = refiner.forward(g, pr, z, h)?;
    let head = model.head();
    let out = model
        .applier
        .forward(g, pa, target.queries(head), r.keypoints, r.features)?;
    let v = target.decode(g, head, out)?;
    Ok(reg.graph(g, weights, v, r.delta)?)
}

/// Resumable refiner optimization over fixed source latents.
pub struct RefinerTrainer<'a> {
    pub refiner: Refiner,
    pub config: TrainConfig,
    pub step: u64,
    pub history: History,
    model: &'a Autoencoder,
    latents: Vec<PoseLatent>,
    target: TemplateContext,
    reg: RefinementTarget,
    opt: Adam,
}

impl<'a> RefinerTrainer<'a> {
    /// Extracts the latents of all `source` poses once; the autoencoder stays
    /// frozen.
    pub fn new(
        config: TrainConfig,
        model: &'a Autoencoder,
        source: &[TriMesh],
        target_template: &TriMesh,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        if source.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let components = target_template.component_count();
        if components != 1 {
            return Err(PoissonError::Disconnected { components }.into());
        }
        let latents = source
            .iter()
            .map(|m| model.extractor.extract(m))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            refiner: Refiner::new(model.config(), config.seed)?,
            config,
            step: 0,
            history: History::new(&["total", "lap", "edge", "reg"]),
            model,
            latents,
            target: TemplateContext::new(target_template)?,
            reg: RefinementTarget::new(target_template),
            opt: config.adam(),
        })
    }

    pub fn latents(&self) -> &[PoseLatent] {
        &self.latents
    }

    pub fn step(&mut self) -> Result<RefinementTerms, TrainError> {
        let step = self.step;
        let guard = non_finite(step);
        let batch = batch_indices(
            self.config.seed,
            step,
            self.config.batch_size,
            self.latents.len(),
        );
        let mut g = Graph::new();
        let pr = self.refiner.params.bind(&mut g, true);
        let pa = self.model.applier.params.bind(&mut g, false);
        let mut sums = [None; 4];
        for &i in &batch {
            let v = refine_graph(
                &mut g,
                self.model,
                &pa,
                &self.refiner,
                &pr,
                &self.latents[i],
                &self.target,
                &self.reg,
                self.config.weights,
            )
            .map_err(|e| match e {
                TrainError::Tensor(t) => guard(t),
                other => other,
            })?;
            for (s, x) in sums.iter_mut().zip([v.total, v.lap, v.edge, v.reg]) {
                *s = Some(match *s {
                    None => x,
                    Some(acc) => g.add(acc, x).map_err(&guard)?,
                });
            }
        }
        let inv = 1.0 / batch.len() as f64;
        let mut means = [0.0; 4];
        let mut total = None;
        for (k, s) in sums.iter().enumerate() {
            let m = g.scale(s.expect("non-empty batch"), inv).map_err(&guard)?;
            means[k] = g.value(m).item();
            if k == 0 {
                total = Some(m);
            }
        }
        if means.iter().any(|x| !x.is_finite()) {
            return Err(TrainError::NonFinite {
                step,
                detail: "refinement loss".into(),
            });
        }
        g.backward(total.expect("set above")).map_err(&guard)?;
        let grads = pr.grads(&g);
        self.opt.step(self.refiner.params.tensors_mut(), &grads)?;
        self.history.push(step, means.to_vec());
        self.step += 1;
        Ok(RefinementTerms {
            total: means[0],
            lap: means[1],
            edge: means[2],
            reg: means[3],
        })
    }

    pub fn run(&mut self, steps: u64) -> Result<(), TrainError> {
        for _ in 0..steps {
            self.step()?;
        }
        Ok(())
    }
}

pub fn train_refiner(
    config: TrainConfig,
    model: &Autoencoder,
    source: &[TriMesh],
    target_template: &TriMesh,
) -> Result<(Refiner, History), TrainError> {
    let mut t = RefinerTrainer::new(config, model, source, target_template)?;
    t.run(config.steps)?;
    Ok((t.refiner, t.history))
}

pub fn refiner_to_checkpoint(refiner: &Refiner) -> Checkpoint {
    let mut ck = Checkpoint::new();
    ck.set_meta("kind", "refiner");
    refiner.config.write_meta(&mut ck);
    write_params(&mut ck, "refiner/", &refiner.params);
    ck
}

pub fn refiner_from_checkpoint(ck: &Checkpoint) -> Result<Refiner, TrainError> {
    expect_kind(ck, "refiner")?;
    let config = NetConfig::from_meta(ck)?;
    let mut r = Refiner::new(config, 0)?;
    read_params(ck, "refiner/", &mut r.params)?;
    Ok(r)
}

/// Mean squared per-vertex distance, no alignment.
pub fn pmd(pred: &[Vec3], gt: &[Vec3]) -> Result<f64, TrainError> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(TrainError::Shape(format!(
            "{} vs {} vertices",
            pred.len(),
            gt.len()
        )));
    }
    let s: f64 = pred
        .iter()
        .zip(gt)
        .map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>())
        .sum();
    Ok(s / pred.len() as f64)
}
