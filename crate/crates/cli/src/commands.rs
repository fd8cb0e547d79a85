use std::fs;
use std::path::{Path, PathBuf};

use posefield::diffusion::{train_diffusion, DiffusionModel};
use posefield::kv::KvMap;
use posefield::mesh::{format_obj, load_obj, TriMesh};
use posefield::synth::{gen_dataset, gen_template, manifest_text, PoseSampler, WormSpec};
use posefield::tensor::Checkpoint;
use posefield::train::{
    pmd, refiner_from_checkpoint, refiner_to_checkpoint, Autoencoder, AutoencoderTrainer, History,
    RefinerTrainer, TemplateContext,
};

use crate::config::RunConfig;
use crate::error::CliError;

pub const TEMPLATE_FILE: &str = "template.obj";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const AUTOENCODER_FILE: &str = "autoencoder.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const REFINER_FILE: &str = "refiner.ckpt";
pub const REFINE_HISTORY_FILE: &str = "refine_history.csv";
pub const DIFFUSION_FILE: &str = "diffusion.ckpt";
pub const KEYPOINT_HISTORY_FILE: &str = "diffusion_keypoint_history.csv";
pub const FEATURE_HISTORY_FILE: &str = "diffusion_feature_history.csv";

/// Files are only written once every output has been computed.
struct Outputs {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    fn add(&mut self, name: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.into(), bytes.into()));
    }

    fn write(self) -> Result<(), CliError> {
        fs::create_dir_all(&self.dir).map_err(|e| io_error(&self.dir, e))?;
        for (name, bytes) in self.files {
            let path = self.dir.join(name);
            fs::write(&path, bytes).map_err(|e| io_error(&path, e))?;
        }
        Ok(())
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| io_error(path, e))
}

fn load_mesh(path: &Path) -> Result<TriMesh, CliError> {
    let mesh = load_obj(path)?;
    let components = mesh.component_count();
    if components > 1 {
        eprintln!(
            "warning: {} has {components} connected components",
            path.display()
        );
    }
    Ok(mesh)
}

fn check_finite(mesh: &[[f64; 3]], what: &str) -> Result<(), CliError> {
    if mesh.iter().flatten().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "{what} has non-finite vertices"
        )))
    }
}

/// `identity-a`, `identity-b`, or a `key=value` spec file.
pub fn resolve_spec(spec: &str) -> Result<WormSpec, CliError> {
    match spec {
        "identity-a" => Ok(WormSpec::identity_a()),
        "identity-b" => Ok(WormSpec::identity_b()),
        path => Ok(WormSpec::from_kv(&KvMap::load(path)?)?),
    }
}

pub fn gen_data(spec: &str, n: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    if n == 0 {
        return Err(CliError::Validation("--n must be at least 1".into()));
    }
    let spec = resolve_spec(spec)?;
    let data = gen_dataset(&spec, n, seed, &PoseSampler::default())?;
    let mut outputs = Outputs::new(out);
    outputs.add(TEMPLATE_FILE, format_obj(&gen_template(&spec)?));
    let mut entries = Vec::with_capacity(n);
    for (i, (mesh, pose)) in data.into_iter().enumerate() {
        let name = format!("pose_{i:04}.obj");
        outputs.add(name.clone(), format_obj(&mesh));
        entries.push((name, pose));
    }
    outputs.add(MANIFEST_FILE, manifest_text(&entries));
    outputs.add("spec.txt", spec.to_kv_text());
    outputs.write()
}

/// Template plus the poses listed in the manifest, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<(TriMesh, Vec<TriMesh>), CliError> {
    let template = load_mesh(&dir.join(TEMPLATE_FILE))?;
    let manifest = read_text(&dir.join(MANIFEST_FILE))?;
    let poses = manifest
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| load_mesh(&dir.join(l.split_whitespace().next().expect("non-empty line"))))
        .collect::<Result<Vec<_>, _>>()?;
    if poses.is_empty() {
        return Err(CliError::Validation(format!(
            "{} lists no poses",
            dir.join(MANIFEST_FILE).display()
        )));
    }
    Ok((template, poses))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Ok(Checkpoint::load(path)?)
}

pub fn train(
    config: &Path,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<u64, CliError> {
    let config = RunConfig::load(config)?;
    config.check_training_steps()?;
    let (template, poses) = load_dataset(data)?;
    let mut trainer = match resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let t = AutoencoderTrainer::resume(&ck, config.train, poses, &template)?;
            if t.model.config() != config.net {
                return Err(CliError::Validation(format!(
                    "checkpoint network {:?} differs from the config {:?}",
                    t.model.config(),
                    config.net
                )));
            }
            t
        }
        None => {
            let model = Autoencoder::new(config.net, config.train.route, config.train.seed)?;
            AutoencoderTrainer::new(model, config.train, poses, &template)?
        }
    };
    let remaining = config.train.steps.saturating_sub(trainer.step);
    trainer.run(remaining)?;
    let mut outputs = Outputs::new(out);
    outputs.add(AUTOENCODER_FILE, trainer.to_checkpoint().to_bytes()?);
    outputs.add(HISTORY_FILE, trainer.history.to_csv());
    outputs.write()?;
    Ok(trainer.step)
}

pub fn transfer(
    checkpoint: &Path,
    source: &Path,
    target: &Path,
    out: &Path,
    refiner: Option<&Path>,
) -> Result<(), CliError> {
    let model = Autoencoder::from_checkpoint(&load_checkpoint(checkpoint)?)?;
    let refiner = refiner
        .map(|p| Ok::<_, CliError>(refiner_from_checkpoint(&load_checkpoint(p)?)?))
        .transpose()?;
    if let Some(r) = &refiner {
        if r.config != model.config() {
            return Err(CliError::Validation(
                "refiner and autoencoder network configs differ".into(),
            ));
        }
    }
    let source = load_mesh(source)?;
    let target = load_mesh(target)?;
    let ctx = TemplateContext::new(&target)?;
    let vertices = model.transfer(&source, &ctx, refiner.as_ref())?;
    check_finite(&vertices, "transferred mesh")?;
    let mesh = TriMesh::new(vertices, target.faces().to_vec())?;
    fs::write(out, format_obj(&mesh)).map_err(|e| io_error(out, e))
}

pub fn refine(
    checkpoint: &Path,
    data: &Path,
    target: &Path,
    config: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let config = RunConfig::load(config)?;
    let model = Autoencoder::from_checkpoint(&load_checkpoint(checkpoint)?)?;
    let (_, poses) = load_dataset(data)?;
    let target = load_mesh(target)?;
    let mut trainer = RefinerTrainer::new(config.train, &model, &poses, &target)?;
    trainer.run(config.refine_steps)?;
    let mut outputs = Outputs::new(out);
    outputs.add(
        REFINER_FILE,
        refiner_to_checkpoint(&trainer.refiner).to_bytes()?,
    );
    outputs.add(REFINE_HISTORY_FILE, trainer.history.to_csv());
    outputs.write()
}

const BUNDLE_PREFIX: &str = "ae/";
const BUNDLE_META: &str = "ae.";

/// Diffusion checkpoint that also carries the autoencoder it was trained
/// with, so sampling can decode on its own.
fn bundle(diffusion: &DiffusionModel, model: &Autoencoder) -> Checkpoint {
    let mut ck = diffusion.to_checkpoint();
    let mut ae = Checkpoint::new();
    model.write_checkpoint(&mut ae);
    for (k, v) in ae.meta {
        ck.set_meta(format!("{BUNDLE_META}{k}"), v);
    }
    for (name, t) in ae.tensors {
        ck.push_tensor(format!("{BUNDLE_PREFIX}{name}"), t);
    }
    ck
}

fn unbundle(ck: &Checkpoint) -> Result<(DiffusionModel, Autoencoder), CliError> {
    let mut ae = Checkpoint::new();
    for (k, v) in &ck.meta {
        if let Some(k) = k.strip_prefix(BUNDLE_META) {
            ae.set_meta(k, v);
        }
    }
    for (name, t) in ck.with_prefix(BUNDLE_PREFIX) {
        ae.push_tensor(name, t.clone());
    }
    Ok((
        DiffusionModel::from_checkpoint(ck)?,
        Autoencoder::from_checkpoint(&ae)?,
    ))
}

pub fn train_diffusion_cmd(
    checkpoint: &Path,
    data: &Path,
    config: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let config = RunConfig::load(config)?;
    let model = Autoencoder::from_checkpoint(&load_checkpoint(checkpoint)?)?;
    let (_, poses) = load_dataset(data)?;
    let latents = poses
        .iter()
        .map(|m| model.extractor.extract(m))
        .collect::<Result<Vec<_>, _>>()?;
    let (diffusion, history) = train_diffusion(&config.diffusion, &latents)?;
    let mut outputs = Outputs::new(out);
    outputs.add(DIFFUSION_FILE, bundle(&diffusion, &model).to_bytes()?);
    outputs.add(KEYPOINT_HISTORY_FILE, history.keypoint.to_csv());
    outputs.add(FEATURE_HISTORY_FILE, history.feature.to_csv());
    outputs.write()
}

/// Sample `i` uses seed `seed + i`.
pub fn sample(
    checkpoint: &Path,
    n: usize,
    seed: u64,
    target: &Path,
    out: &Path,
) -> Result<(), CliError> {
    if n == 0 {
        return Err(CliError::Validation("--n must be at least 1".into()));
    }
    let (diffusion, model) = unbundle(&load_checkpoint(checkpoint)?)?;
    let target = load_mesh(target)?;
    let ctx = TemplateContext::new(&target)?;
    let mut outputs = Outputs::new(out);
    for i in 0..n {
        let latent = diffusion.sample_cascaded(seed.wrapping_add(i as u64))?;
        if !latent.is_finite() {
            return Err(CliError::Numerical(format!(
                "sample {i} produced a non-finite latent"
            )));
        }
        let vertices = model.decode(&latent, &ctx)?;
        check_finite(&vertices, &format!("sample {i}"))?;
        let mesh = TriMesh::new(vertices, target.faces().to_vec())?;
        outputs.add(format!("sample_{i:04}.obj"), format_obj(&mesh));
        outputs.add(
            format!("sample_{i:04}.latent"),
            latent.to_checkpoint().to_bytes()?,
        );
    }
    outputs.write()
}

/// Mean squared per-vertex distance of two meshes with the same faces.
pub fn eval_pmd(pred: &Path, gt: &Path) -> Result<f64, CliError> {
    let (p, g) = (load_obj(pred)?, load_obj(gt)?);
    if p.vertex_count() != g.vertex_count() || p.faces() != g.faces() {
        return Err(CliError::Validation(format!(
            "meshes differ in connectivity ({} vs {} vertices, {} vs {} faces)",
            p.vertex_count(),
            g.vertex_count(),
            p.face_count(),
            g.face_count()
        )));
    }
    Ok(pmd(p.vertices(), g.vertices())?)
}

/// Reads a loss history written by `train` or `refine`.
pub fn read_history(path: &Path) -> Result<History, CliError> {
    Ok(History::from_csv(&read_text(path)?)?)
}
