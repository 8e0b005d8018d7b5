//! Task manifests: one JSON object per line, ordered by seed then task.

use std::path::Path;

use activelab_core::chem;
use activelab_core::grn::{self, MOTIF_FAMILIES};
use activelab_core::oracle::{BenchmarkId, Difficulty, PluginSpec, TaskManifest};
use serde::Deserialize;

use crate::HarnessError;

pub fn default_budget(benchmark: BenchmarkId) -> usize {
    match benchmark {
        BenchmarkId::Chem => 60,
        BenchmarkId::Grn | BenchmarkId::EquationPlugin => 20,
    }
}

/// Budget grid used by `sweep` when none is given.
pub fn default_sweep(benchmark: BenchmarkId) -> Vec<usize> {
    match benchmark {
        BenchmarkId::Chem => vec![20, 40, 60, 80, 100],
        BenchmarkId::Grn => vec![10, 20, 50],
        BenchmarkId::EquationPlugin => vec![10, 20, 40],
    }
}

/// A user-supplied law for the equation-plugin benchmark.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct NamedPlugin {
    pub name: String,
    #[serde(default = "default_tier")]
    pub difficulty: Difficulty,
    #[serde(flatten)]
    pub spec: PluginSpec,
}

fn default_tier() -> Difficulty {
    Difficulty::Easy
}

pub fn grn_task_id(family: &str, variant: u8, tier: Difficulty) -> String {
    format!("{family}-v{variant}-{tier}")
}

/// Every task of `benchmark` in the requested tiers, once per seed.
pub fn generate_manifest(
    benchmark: BenchmarkId,
    tiers: &[Difficulty],
    seeds: &[u64],
    budget: Option<usize>,
    noise_sigma: f64,
    plugins: &[NamedPlugin],
) -> Result<Vec<TaskManifest>, HarnessError> {
    let budget = budget.unwrap_or_else(|| default_budget(benchmark));
    let base = |task_id: String, family: &str, difficulty, variant, seed| TaskManifest {
        benchmark,
        task_id,
        family: family.to_string(),
        difficulty,
        variant,
        seed,
        budget,
        noise_sigma,
        plugin: None,
    };
    let mut out = Vec::new();
    for &seed in seeds {
        match benchmark {
            BenchmarkId::Chem => {
                for d in chem::catalog().into_iter().filter(|d| tiers.contains(&d.tier)) {
                    out.push(base(d.id.clone(), &d.id, d.tier, 0, seed));
                }
            }
            BenchmarkId::Grn => {
                for &tier in tiers {
                    for family in MOTIF_FAMILIES {
                        for variant in 1..=3u8 {
                            debug_assert!(grn::motif_graph(family, variant).is_some());
                            out.push(base(grn_task_id(family, variant, tier), family, tier, variant, seed));
                        }
                    }
                }
            }
            BenchmarkId::EquationPlugin => {
                for p in plugins.iter().filter(|p| tiers.contains(&p.difficulty)) {
                    let mut m = base(p.name.clone(), &p.name, p.difficulty, 0, seed);
                    m.plugin = Some(p.spec.clone());
                    out.push(m);
                }
            }
        }
    }
    for m in &out {
        m.validate()?;
    }
    Ok(out)
}

pub fn to_jsonl(manifests: &[TaskManifest]) -> String {
    manifests
        .iter()
        .map(|m| serde_json::to_string(m).expect("manifest serializes") + "\n")
        .collect()
}

pub fn parse_jsonl(text: &str) -> Result<Vec<TaskManifest>, HarnessError> {
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let m = TaskManifest::from_json(line)?;
        m.validate()?;
        out.push(m);
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<TaskManifest>, HarnessError> {
    parse_jsonl(&std::fs::read_to_string(path)?)
}

pub fn read_plugins(path: &Path) -> Result<Vec<NamedPlugin>, HarnessError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
