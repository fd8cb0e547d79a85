use posefield::diffusion::DiffusionError;
use posefield::kv::KvError;
use posefield::mesh::MeshError;
use posefield::nets::NetError;
use posefield::poisson::PoissonError;
use posefield::synth::SynthError;
use posefield::tensor::{CheckpointError, TensorError};
use posefield::train::TrainError;
use thiserror::Error;

/// Command failure, classified for the process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

fn tensor(e: TensorError) -> CliError {
    match e {
        TensorError::NonFinite { .. } => CliError::Numerical(e.to_string()),
        other => CliError::Validation(other.to_string()),
    }
}

impl From<KvError> for CliError {
    fn from(e: KvError) -> Self {
        match e {
            KvError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<MeshError> for CliError {
    fn from(e: MeshError) -> Self {
        match e {
            MeshError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<PoissonError> for CliError {
    fn from(e: PoissonError) -> Self {
        match e {
            PoissonError::Factorization(_) => CliError::Numerical(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Tensor(t) => tensor(t),
            NetError::Checkpoint(c) => c.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Mesh(m) => m.into(),
            SynthError::Kv(k) => k.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            TrainError::Net(n) => n.into(),
            TrainError::Poisson(p) => p.into(),
            TrainError::Tensor(t) => tensor(t),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Mesh(m) => m.into(),
            TrainError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<DiffusionError> for CliError {
    fn from(e: DiffusionError) -> Self {
        match e {
            DiffusionError::NonFinite(_) => CliError::Numerical(e.to_string()),
            DiffusionError::Net(n) => n.into(),
            DiffusionError::Tensor(t) => tensor(t),
            DiffusionError::Checkpoint(c) => c.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}
