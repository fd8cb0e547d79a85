//! Run configuration: a `key=value` file with every training, network and
//! diffusion setting.

use std::path::Path;

use posefield::diffusion::{DiffusionConfig, NoiseSchedule};
use posefield::kv::{KvError, KvMap};
use posefield::nets::{ApplierHead, NetConfig};
use posefield::train::{RefinementWeights, TrainConfig};

use crate::error::CliError;

const REQUIRED: &[&str] = &[
    "steps",
    "lr",
    "batch_size",
    "seed",
    "route",
    "k",
    "d",
    "m_neighbors",
    "stages",
];
const OPTIONAL: &[&str] = &[
    "lambda_lap",
    "lambda_edge",
    "lambda_reg",
    "refine_steps",
    "diffusion_steps",
    "diffusion_lr",
    "diffusion_batch_size",
    "diffusion_width",
    "diffusion_blocks",
    "diffusion_seed",
    "schedule_steps",
    "beta_start",
    "beta_end",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub net: NetConfig,
    pub refine_steps: u64,
    pub diffusion: DiffusionConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self, CliError> {
        Self::from_map(&KvMap::from_text(text)?)
    }

    fn from_map(map: &KvMap) -> Result<Self, CliError> {
        let allowed: Vec<&str> = REQUIRED.iter().chain(OPTIONAL).copied().collect();
        map.check_keys(&allowed)?;
        if let Some(missing) = REQUIRED.iter().find(|k| map.get(k).is_none()) {
            return Err(KvError::Missing(missing.to_string()).into());
        }
        let route_raw = map.get("route").unwrap_or_default();
        let route = ApplierHead::parse(route_raw).ok_or_else(|| KvError::Value {
            key: "route".into(),
            value: route_raw.into(),
        })?;
        let defaults = RefinementWeights::default();
        let train = TrainConfig {
            steps: map.parse("steps")?,
            lr: map.parse("lr")?,
            batch_size: map.parse("batch_size")?,
            weights: RefinementWeights {
                lap: map.parse_or("lambda_lap", defaults.lap)?,
                edge: map.parse_or("lambda_edge", defaults.edge)?,
                reg: map.parse_or("lambda_reg", defaults.reg)?,
            },
            seed: map.parse("seed")?,
            route,
        };
        let net = NetConfig {
            keypoints: map.parse("k")?,
            width: map.parse("d")?,
            stages: map.parse("stages")?,
            neighbors: map.parse("m_neighbors")?,
        };
        let d = DiffusionConfig::default();
        let s = &d.schedule;
        let schedule = NoiseSchedule::linear(
            map.parse_or("schedule_steps", s.steps())?,
            map.parse_or("beta_start", s.beta_start)?,
            map.parse_or("beta_end", s.beta_end)?,
        )?;
        let diffusion = DiffusionConfig {
            steps: map.parse_or("diffusion_steps", d.steps)?,
            lr: map.parse_or("diffusion_lr", d.lr)?,
            batch_size: map.parse_or("diffusion_batch_size", d.batch_size)?,
            width: map.parse_or("diffusion_width", d.width)?,
            blocks: map.parse_or("diffusion_blocks", d.blocks)?,
            seed: map.parse_or("diffusion_seed", train.seed)?,
            schedule,
        };
        let config = Self {
            train,
            net,
            refine_steps: map.parse_or("refine_steps", train.steps)?,
            diffusion,
        };
        config.train.validate()?;
        config.net.validate()?;
        Ok(config)
    }

    /// The autoencoder needs at least one step; refinement may run zero.
    pub fn check_training_steps(&self) -> Result<(), CliError> {
        if self.train.steps == 0 {
            return Err(CliError::Validation(
                "steps must be positive for training".into(),
            ));
        }
        Ok(())
    }
}
