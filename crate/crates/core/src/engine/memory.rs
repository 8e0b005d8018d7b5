use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// A skeleton is struck when its score exceeds this multiple of the pool
/// median (and the absolute floor) at a refinement.
pub const FAILURE_RATIO: f64 = 10.0;
pub const FAILURE_FLOOR: f64 = 0.01;
/// Consecutive strikes that mark a skeleton failed.
pub const FAILURE_STRIKES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Validated,
    Failed,
    Uncertain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub status: Status,
    /// Refinements that scored this skeleton.
    pub evidence: usize,
    pub strikes: usize,
    pub last_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeEvidence {
    pub key: String,
    /// Index of the latest experiment when the skeleton was marked failed.
    pub experiment_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub iteration: usize,
    pub key: String,
    pub score: f64,
    pub complexity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub key: String,
    pub text: String,
    pub score: f64,
    pub confidence: f64,
}

/// One scored pool member at a refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub key: String,
    pub text: String,
    pub score: f64,
    pub complexity: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryLedger {
    pub best: Option<BestRecord>,
    pub scoreboard: BTreeMap<String, ScoreEntry>,
    pub negative_evidence: Vec<NegativeEvidence>,
    pub refinement_history: Vec<FitSummary>,
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

impl MemoryLedger {
    pub fn is_failed(&self, key: &str) -> bool {
        self.scoreboard.get(key).is_some_and(|e| e.status == Status::Failed)
    }

    pub fn status(&self, key: &str) -> Option<Status> {
        self.scoreboard.get(key).map(|e| e.status)
    }

    /// Folds one refinement into the ledger. `best` is the key chosen as the
    /// current best mechanism; it is validated when `confidence >= tau` and
    /// demoted to uncertain otherwise.
    pub fn update(
        &mut self,
        iteration: usize,
        scored: &[Scored],
        best: Option<&str>,
        confidence: f64,
        tau: f64,
        latest_experiment: usize,
    ) {
        let mut finite: Vec<f64> = scored.iter().map(|s| s.score).filter(|s| s.is_finite()).collect();
        let med = median(&mut finite);
        for s in scored {
            self.refinement_history.push(FitSummary {
                iteration,
                key: s.key.clone(),
                score: s.score,
                complexity: s.complexity,
            });
            let e = self.scoreboard.entry(s.key.clone()).or_insert(ScoreEntry {
                status: Status::Uncertain,
                evidence: 0,
                strikes: 0,
                last_score: s.score,
            });
            e.evidence += 1;
            e.last_score = s.score;
            let bad = !s.score.is_finite() || (med.is_finite() && s.score > FAILURE_RATIO * med && s.score > FAILURE_FLOOR);
            if bad {
                e.strikes += 1;
            } else {
                e.strikes = 0;
            }
            if e.strikes >= FAILURE_STRIKES {
                if e.status != Status::Failed {
                    self.negative_evidence.push(NegativeEvidence {
                        key: s.key.clone(),
                        experiment_index: latest_experiment,
                    });
                }
                e.status = Status::Failed;
            } else {
                // a fresh good score revokes an earlier failure
                e.status = Status::Uncertain;
            }
        }
        self.best = None;
        if let Some(b) = best.and_then(|k| scored.iter().find(|s| s.key == k)) {
            let e = self.scoreboard.get_mut(&b.key).expect("scored above");
            if e.status != Status::Failed {
                e.status = if confidence >= tau { Status::Validated } else { Status::Uncertain };
            }
            self.best = Some(BestRecord {
                key: b.key.clone(),
                text: b.text.clone(),
                score: b.score,
                confidence,
            });
        }
    }

    /// Labeled plain-text summary for prompts.
    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        match &self.best {
            Some(b) => {
                let _ = writeln!(
                    s,
                    "BEST EQUATION: {} (validation score {:.4}, confidence {:.3})",
                    b.text, b.score, b.confidence
                );
            }
            None => s.push_str("BEST EQUATION: (none yet)\n"),
        }
        s.push_str("SCOREBOARD:\n");
        if self.scoreboard.is_empty() {
            s.push_str("- (empty)\n");
        }
        for (k, e) in &self.scoreboard {
            let status = match e.status {
                Status::Validated => "validated",
                Status::Failed => "failed",
                Status::Uncertain => "uncertain",
            };
            let _ = writeln!(s, "- {status}: {k} (score {:.4}, evidence {})", e.last_score, e.evidence);
        }
        s.push_str("NEGATIVE EVIDENCE:\n");
        if self.negative_evidence.is_empty() {
            s.push_str("- (none)\n");
        }
        for n in &self.negative_evidence {
            let _ = writeln!(s, "- {} ruled out by experiment {}", n.key, n.experiment_index);
        }
        s
    }
}
