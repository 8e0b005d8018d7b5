//! Candidate generation, scoring helpers and diverse batch selection.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::grn::{Action, Intervention, Node, DEFAULT_KNOCK_UP};
use crate::oracle::VariableSpec;
use crate::proposer::{RegionSpec, SearchRegion};

/// Uniform candidates drawn per box region.
pub const CANDIDATES_PER_REGION: usize = 256;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AcquireError {
    #[error("every search region is empty after clamping")]
    EmptyRegion,
}

/// Population standard deviation of `log10` over the finite positive
/// entries; zero when fewer than two are usable.
pub fn disagreement(predictions: &[f64]) -> f64 {
    let logs: Vec<f64> = predictions
        .iter()
        .filter(|p| p.is_finite() && **p > 0.0)
        .map(|p| p.log10())
        .collect();
    population_std(&logs)
}

pub fn population_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Mean over genes of the population variance across hypotheses of
/// `ln(level + 1e-9)`.
pub fn grn_disagreement(responses: &[[f64; 4]]) -> f64 {
    if responses.len() < 2 {
        return 0.0;
    }
    let k = responses.len() as f64;
    let mut total = 0.0;
    for g in 0..4 {
        let logs: Vec<f64> = responses.iter().map(|r| (r[g] + 1e-9).ln()).collect();
        let mean = logs.iter().sum::<f64>() / k;
        total += logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / k;
    }
    total / 4.0
}

/// Box regions resolved to per-variable intervals; variables a region does
/// not name keep their full range. Regions with an inverted interval are
/// dropped.
pub fn resolve_boxes(regions: &[SearchRegion], bounds: &[VariableSpec]) -> Result<Vec<Vec<(f64, f64)>>, AcquireError> {
    let mut out = Vec::new();
    for r in regions {
        let RegionSpec::Bounds(b) = &r.spec else { continue };
        let iv: Vec<(f64, f64)> = bounds
            .iter()
            .map(|v| b.get(&v.name).copied().unwrap_or((v.lo, v.hi)))
            .collect();
        if iv.iter().all(|(lo, hi)| lo <= hi) {
            out.push(iv);
        }
    }
    if out.is_empty() {
        return Err(AcquireError::EmptyRegion);
    }
    Ok(out)
}

pub fn sample_boxes(boxes: &[Vec<(f64, f64)>], per_box: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(boxes.len() * per_box);
    for b in boxes {
        for _ in 0..per_box {
            out.push(
                b.iter()
                    .map(|&(lo, hi)| if hi > lo { rng.random_range(lo..=hi) } else { lo })
                    .collect(),
            );
        }
    }
    out
}

/// Coordinates scaled to the unit box of the oracle bounds.
pub fn normalize(x: &[f64], bounds: &[VariableSpec]) -> Vec<f64> {
    x.iter()
        .zip(bounds)
        .map(|(v, b)| if b.hi > b.lo { (v - b.lo) / (b.hi - b.lo) } else { 0.0 })
        .collect()
}

/// Feature vector of an intervention for diversity distances: scaled log
/// factor per gene, scaled log level for the signal.
pub fn intervention_features(iv: &Intervention) -> Vec<f64> {
    let mut f = vec![0.0; 5];
    for a in &iv.actions {
        let i = a.node.index();
        f[i] = match a.action {
            Action::KnockUp(x) | Action::KnockDown(x) => x.max(1e-3).ln() / DEFAULT_KNOCK_UP.ln(),
            Action::SetSignal(l) => 1.0 + l.max(1e-3).ln() / 10f64.ln(),
        };
    }
    debug_assert_eq!(Node::ALL.len(), f.len());
    f
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Picks `n` indices: the top-scoring quartile (at least `n` candidates) is
/// kept, the first pick is the best score, each further pick maximizes the
/// minimum distance to those already picked. Ties go to the lower index.
pub fn select_diverse(features: &[Vec<f64>], scores: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let keep = scores.len().div_ceil(4).max(n).min(scores.len());
    let pool = &order[..keep];
    let mut picked: Vec<usize> = Vec::with_capacity(n);
    if let Some(&first) = pool.first() {
        if n > 0 {
            picked.push(first);
        }
    }
    while picked.len() < n.min(pool.len()) {
        let next = pool
            .iter()
            .filter(|i| !picked.contains(i))
            .map(|&i| {
                let d = picked.iter().map(|&p| dist2(&features[i], &features[p])).fold(f64::INFINITY, f64::min);
                (i, d)
            })
            .fold(None::<(usize, f64)>, |best, (i, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            });
        match next {
            Some((i, _)) => picked.push(i),
            None => break,
        }
    }
    picked
}

/// Greedy max-min selection of `n` candidates against the existing design
/// points and earlier picks. With no existing points the first candidate
/// starts the design.
pub fn space_filling(features: &[Vec<f64>], existing: &[Vec<f64>], n: usize) -> Vec<usize> {
    let mut anchors: Vec<Vec<f64>> = existing.to_vec();
    let mut picked = Vec::with_capacity(n);
    while picked.len() < n.min(features.len()) {
        let mut best: Option<(usize, f64)> = None;
        for (i, f) in features.iter().enumerate() {
            if picked.contains(&i) {
                continue;
            }
            let d = anchors.iter().map(|a| dist2(f, a)).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let Some((i, _)) = best else { break };
        picked.push(i);
        anchors.push(features[i].clone());
    }
    picked
}
