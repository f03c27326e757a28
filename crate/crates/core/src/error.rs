use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

use crate::causal::CausalError;
use crate::dataset::DataError;
use crate::lowrank::LowRankError;
use crate::model::ModelError;
use crate::sensitivity::SensitivityError;
use crate::shrinkage::ShrinkageError;
use crate::synth::SynthError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline stage attached to errors raised by the end-to-end drivers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Assemble,
    Shrinkage,
    VarianceFit,
    Worlds,
    Index,
    Sampling,
    Threshold,
    Scan,
    Spectrum,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Assemble => "assemble",
            Stage::Shrinkage => "shrinkage",
            Stage::VarianceFit => "variance-fit",
            Stage::Worlds => "worlds",
            Stage::Index => "index",
            Stage::Sampling => "sampling",
            Stage::Threshold => "threshold",
            Stage::Scan => "scan",
            Stage::Spectrum => "spectrum",
            Stage::Output => "output",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    LowRank(#[from] LowRankError),
    #[error(transparent)]
    Shrinkage(#[from] ShrinkageError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Causal(#[from] CausalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
    #[error("{stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {what}: {detail}")]
    Parse { what: String, detail: String },
}

impl Error {
    pub fn at(stage: Stage) -> impl FnOnce(Error) -> Error {
        move |e| Error::Stage {
            stage,
            source: Box::new(e),
        }
    }

    /// True for errors caused by bad input (files, dimensions, names), as
    /// opposed to numerical failures inside the pipeline.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Data(_) | Error::Synth(_) | Error::Parse { .. } | Error::Write { .. } => true,
            Error::Model(ModelError::UnknownForcing(_)) => true,
            Error::Causal(CausalError::InvalidOption(_) | CausalError::TooFewSamples { .. }) => true,
            Error::Sensitivity(e) => e.is_validation(),
            Error::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
