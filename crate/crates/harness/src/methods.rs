use std::fmt;

use activelab_core::engine::{self, EngineConfig, EngineError, RunFailure, RunOutcome, RunTrace};
use activelab_core::oracle::TaskManifest;
use activelab_core::proposer::{LibraryProposer, ProposerConfig, RemoteProposer};
use serde::{Deserialize, Serialize};

use crate::baselines::{run_baseline, Policy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    AutoscilabRemote,
    AutoscilabLibrary,
    Random,
    Uncertainty,
    Bed,
    Bo,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::AutoscilabRemote,
        Method::AutoscilabLibrary,
        Method::Random,
        Method::Uncertainty,
        Method::Bed,
        Method::Bo,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::AutoscilabRemote => "autoscilab-remote",
            Method::AutoscilabLibrary => "autoscilab-library",
            Method::Random => "random",
            Method::Uncertainty => "uncertainty",
            Method::Bed => "bed",
            Method::Bo => "bo",
        }
    }

    pub fn is_remote(self) -> bool {
        self == Method::AutoscilabRemote
    }

    /// Engine settings the method runs with.
    pub fn engine_config(self) -> EngineConfig {
        match self {
            Method::Bed => EngineConfig::without_memory_and_gating(),
            _ => EngineConfig::default(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Runs one task under `method`.
pub fn execute(method: Method, m: &TaskManifest, proposer: &ProposerConfig) -> Result<RunOutcome, RunFailure> {
    let cfg = method.engine_config();
    match method {
        Method::AutoscilabRemote => {
            let mut p = RemoteProposer::new(proposer.clone()).map_err(|e| RunFailure {
                error: EngineError::Proposer(e.to_string()),
                trace: RunTrace::default(),
            })?;
            engine::run(m, &mut p, &cfg)
        }
        Method::AutoscilabLibrary | Method::Bed => engine::run(m, &mut LibraryProposer::for_task(m), &cfg),
        Method::Random => run_baseline(m, Policy::Random, &cfg),
        Method::Uncertainty => run_baseline(m, Policy::Uncertainty, &cfg),
        Method::Bo => run_baseline(m, Policy::Bo, &cfg),
    }
}
