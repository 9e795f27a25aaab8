//! Diversity, synthetic style oracles and run-vs-run comparisons.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{PadError, Result};
use crate::mdp::{TokenId, Trajectory, Vocab};
use crate::persrm::{PreferenceDescriptor, PreferenceSpace};

/// `∏_{n=2..4} unique_n / total_n`; sequences shorter than 4 score 0.
pub fn diversity(y: &[TokenId]) -> f64 {
    if y.len() < 4 {
        return 0.0;
    }
    (2..=4)
        .map(|n| {
            let total = y.len() - n + 1;
            let unique: BTreeSet<&[TokenId]> = y.windows(n).collect();
            unique.len() as f64 / total as f64
        })
        .product()
}

/// Per-dimension marker sets; a dimension's score is the fraction of
/// tokens drawn from its set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleOracle {
    space: PreferenceSpace,
    markers: Vec<BTreeSet<TokenId>>,
}

impl StyleOracle {
    pub fn new(space: PreferenceSpace, markers: Vec<BTreeSet<TokenId>>, vocab: &Vocab) -> Result<Self> {
        if markers.len() != space.len() {
            return Err(PadError::DimMismatch {
                expected: space.len(),
                got: markers.len(),
            });
        }
        for set in &markers {
            if set.contains(&vocab.eos()) {
                return Err(PadError::BadSpec("marker sets must not contain EOS".into()));
            }
            for &t in set {
                vocab.check(t)?;
            }
        }
        Ok(Self { space, markers })
    }

    pub fn space(&self) -> &PreferenceSpace {
        &self.space
    }

    pub fn markers(&self, dim: usize) -> &BTreeSet<TokenId> {
        &self.markers[dim]
    }

    pub fn style_score(&self, y: &[TokenId], dim: &str) -> Result<f64> {
        Ok(self.score_index(y, self.space.index_of(dim)?))
    }

    pub fn score_index(&self, y: &[TokenId], dim: usize) -> f64 {
        if y.is_empty() {
            return 0.0;
        }
        let hits = y.iter().filter(|t| self.markers[dim].contains(t)).count();
        hits as f64 / y.len() as f64
    }

    /// Scores for every dimension, in space order.
    pub fn scores(&self, y: &[TokenId]) -> Vec<f64> {
        (0..self.markers.len()).map(|j| self.score_index(y, j)).collect()
    }
}

/// One prompt's comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub index: usize,
    pub scores_a: Vec<f64>,
    pub scores_b: Vec<f64>,
    pub diversity_a: f64,
    pub diversity_b: f64,
    /// 1 win for `a`, 0.5 tie, 0 loss.
    pub outcome: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dims: Vec<String>,
    pub active: Vec<String>,
    pub count: usize,
    pub mean_scores_a: BTreeMap<String, f64>,
    pub mean_scores_b: BTreeMap<String, f64>,
    pub diversity_a: f64,
    pub diversity_b: f64,
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
    pub win_rate: f64,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// Comma-separated per-prompt table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index");
        for side in ["a", "b"] {
            for d in &self.dims {
                let _ = write!(out, ",{d}_{side}");
            }
        }
        out.push_str(",diversity_a,diversity_b,outcome\n");
        for r in &self.rows {
            let _ = write!(out, "{}", r.index);
            for v in r.scores_a.iter().chain(&r.scores_b) {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{},{},{}", r.diversity_a, r.diversity_b, r.outcome);
        }
        out
    }
}

fn mean(xs: impl Iterator<Item = f64>, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        xs.sum::<f64>() / n as f64
    }
}

/// Share of `2 * n` half-points, computed so that swapping the runs gives
/// exactly `1 - rate`.
fn win_rate(wins: usize, ties: usize, losses: usize) -> f64 {
    let n = wins + ties + losses;
    if n == 0 {
        return 0.5;
    }
    let (ours, theirs) = (2 * wins + ties, 2 * losses + ties);
    if ours <= theirs {
        ours as f64 / (2 * n) as f64
    } else {
        1.0 - theirs as f64 / (2 * n) as f64
    }
}

/// Compares two runs prompt by prompt on the active dimensions of `pref`.
/// `a` wins a prompt when its mean active-dimension score is strictly
/// higher.
pub fn compare_runs(
    a: &[Trajectory],
    b: &[Trajectory],
    oracle: &StyleOracle,
    pref: &PreferenceDescriptor,
) -> Result<EvalReport> {
    if a.len() != b.len() {
        return Err(PadError::LengthMismatch { a: a.len(), b: b.len() });
    }
    if pref.len() != oracle.space.len() {
        return Err(PadError::DimMismatch {
            expected: oracle.space.len(),
            got: pref.len(),
        });
    }
    let active = pref.active_dims();
    if active.is_empty() {
        return Err(PadError::BadSpec(
            "comparison needs at least one active dimension".into(),
        ));
    }
    let mut rows = Vec::with_capacity(a.len());
    let (mut wins, mut ties, mut losses) = (0, 0, 0);
    for (i, (ta, tb)) in a.iter().zip(b).enumerate() {
        if ta.prompt != tb.prompt {
            return Err(PadError::PairingMismatch(i));
        }
        let scores_a = oracle.scores(ta.content());
        let scores_b = oracle.scores(tb.content());
        let ma = mean(active.iter().map(|&j| scores_a[j]), active.len());
        let mb = mean(active.iter().map(|&j| scores_b[j]), active.len());
        let outcome = if ma > mb {
            wins += 1;
            1.0
        } else if ma < mb {
            losses += 1;
            0.0
        } else {
            ties += 1;
            0.5
        };
        rows.push(EvalRow {
            index: i,
            diversity_a: diversity(ta.content()),
            diversity_b: diversity(tb.content()),
            scores_a,
            scores_b,
            outcome,
        });
    }
    let n = rows.len();
    let names = oracle.space.names();
    let per_dim = |pick: fn(&EvalRow) -> &Vec<f64>| -> BTreeMap<String, f64> {
        names
            .iter()
            .enumerate()
            .map(|(j, name)| (name.clone(), mean(rows.iter().map(|r| pick(r)[j]), n)))
            .collect()
    };
    Ok(EvalReport {
        dims: names.to_vec(),
        active: active.iter().map(|&j| names[j].clone()).collect(),
        count: n,
        mean_scores_a: per_dim(|r| &r.scores_a),
        mean_scores_b: per_dim(|r| &r.scores_b),
        diversity_a: mean(rows.iter().map(|r| r.diversity_a), n),
        diversity_b: mean(rows.iter().map(|r| r.diversity_b), n),
        wins,
        ties,
        losses,
        win_rate: win_rate(wins, ties, losses),
        rows,
    })
}
