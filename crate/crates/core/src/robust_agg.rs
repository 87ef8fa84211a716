//! Baseline aggregation rules that see plaintext client updates: mean,
//! OracleSGD, coordinate-wise median, Krum scoring, Bulyan, Resampling and
//! FLTrust. Also precision/recall of a flagged set against the truth.
//!
//! Every rule first orders the updates by client id, so results do not
//! depend on the order in which updates arrived.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::sample_indices;
use crate::faults::ClientUpdate;
use crate::nn::ParamVector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggError {
    #[error("no updates to aggregate")]
    Empty,
    #[error("update from client {client} has length {found}, expected {expected}")]
    LengthMismatch {
        client: usize,
        expected: usize,
        found: usize,
    },
    #[error("every client is in the faulty set")]
    AllFaulty,
    #[error("{rule} needs at least {required} updates for f = {f}, got {n}")]
    TooFewUpdates {
        rule: &'static str,
        n: usize,
        f: usize,
        required: usize,
    },
    #[error("root update has zero norm")]
    ZeroRoot,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// How each client contributed to an aggregate.
#[derive(Debug, Clone, PartialEq)]
pub enum Selection {
    /// Plain average over these clients.
    Averaged(BTreeSet<usize>),
    /// Coordinate-wise statistic; no per-client weight exists.
    Coordinatewise,
    /// Per-client non-negative weights (normalized to sum 1 when any is positive).
    Weights(Vec<(usize, f64)>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateResult {
    pub aggregate: ParamVector,
    pub selection: Selection,
    pub rule: &'static str,
}

impl AggregateResult {
    /// Clients that this rule effectively excluded, if the rule defines that.
    pub fn excluded(&self, updates: &[ClientUpdate]) -> BTreeSet<usize> {
        match &self.selection {
            Selection::Averaged(kept) => updates
                .iter()
                .map(|u| u.client_id)
                .filter(|id| !kept.contains(id))
                .collect(),
            Selection::Weights(w) => w.iter().filter(|(_, w)| *w == 0.0).map(|(id, _)| *id).collect(),
            Selection::Coordinatewise => BTreeSet::new(),
        }
    }
}

fn canonical(updates: &[ClientUpdate]) -> Result<(Vec<&ClientUpdate>, usize), AggError> {
    let first = updates.first().ok_or(AggError::Empty)?;
    let d = first.payload.len();
    if let Some(bad) = updates.iter().find(|u| u.payload.len() != d) {
        return Err(AggError::LengthMismatch {
            client: bad.client_id,
            expected: d,
            found: bad.payload.len(),
        });
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    Ok((sorted, d))
}

fn mean_of(updates: &[&ClientUpdate], d: usize) -> ParamVector {
    let mut acc = ParamVector::zeros(d);
    for u in updates {
        acc.axpy(1.0, &u.payload);
    }
    acc.scaled(1.0 / updates.len() as f64)
}

pub fn agg_mean(updates: &[ClientUpdate]) -> Result<AggregateResult, AggError> {
    let (sorted, d) = canonical(updates)?;
    Ok(AggregateResult {
        aggregate: mean_of(&sorted, d),
        selection: Selection::Averaged(sorted.iter().map(|u| u.client_id).collect()),
        rule: "mean",
    })
}

/// Mean over the clients not in `truth`.
pub fn agg_oracle(updates: &[ClientUpdate], truth: &BTreeSet<usize>) -> Result<AggregateResult, AggError> {
    let (sorted, d) = canonical(updates)?;
    let normal: Vec<&ClientUpdate> = sorted.into_iter().filter(|u| !truth.contains(&u.client_id)).collect();
    if normal.is_empty() {
        return Err(AggError::AllFaulty);
    }
    Ok(AggregateResult {
        aggregate: mean_of(&normal, d),
        selection: Selection::Averaged(normal.iter().map(|u| u.client_id).collect()),
        rule: "oracle",
    })
}

/// Median of a non-empty slice; the mean of the two middle values for even
/// lengths. Reorders `values`.
pub fn median_in_place(values: &mut [f64]) -> f64 {
    let n = values.len();
    assert!(n > 0, "median of an empty slice");
    values.sort_by(f64::total_cmp);
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn coordinatewise(updates: &[&ClientUpdate], d: usize, mut stat: impl FnMut(&mut [f64]) -> f64) -> ParamVector {
    let mut column = vec![0.0; updates.len()];
    let mut out = Vec::with_capacity(d);
    for k in 0..d {
        for (c, u) in column.iter_mut().zip(updates) {
            *c = u.payload[k];
        }
        out.push(stat(&mut column));
    }
    ParamVector::new(out)
}

pub fn agg_median(updates: &[ClientUpdate]) -> Result<AggregateResult, AggError> {
    let (sorted, d) = canonical(updates)?;
    Ok(AggregateResult {
        aggregate: coordinatewise(&sorted, d, median_in_place),
        selection: Selection::Coordinatewise,
        rule: "median",
    })
}

fn squared_distances(updates: &[&ClientUpdate]) -> Vec<Vec<f64>> {
    let n = updates.len();
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = updates[i]
                .payload
                .iter()
                .zip(updates[j].payload.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dist[i][j] = d2;
            dist[j][i] = d2;
        }
    }
    dist
}

/// Krum score of each member of `pool`: the sum of its `neighbors`
/// smallest squared distances to the other members.
fn scores_within(dist: &[Vec<f64>], pool: &[usize], neighbors: usize) -> Vec<f64> {
    pool.iter()
        .map(|&i| {
            let mut row: Vec<f64> = pool.iter().filter(|&&j| j != i).map(|&j| dist[i][j]).collect();
            row.sort_by(f64::total_cmp);
            row.iter().take(neighbors).sum()
        })
        .collect()
}

/// Krum scores, returned in the order of `updates`. Lower is more central.
pub fn krum_scores(updates: &[ClientUpdate], f: usize) -> Result<Vec<f64>, AggError> {
    canonical(updates)?;
    let n = updates.len();
    if n < f + 3 {
        return Err(AggError::TooFewUpdates {
            rule: "krum",
            n,
            f,
            required: f + 3,
        });
    }
    let refs: Vec<&ClientUpdate> = updates.iter().collect();
    let dist = squared_distances(&refs);
    let pool: Vec<usize> = (0..n).collect();
    Ok(scores_within(&dist, &pool, n - f - 2))
}

/// Bulyan: `n - 2f` updates chosen by repeated Krum, then per coordinate
/// the mean of the `n - 4f` selected values closest to their median.
///
/// Late Krum rounds have fewer than `f + 3` candidates left; their
/// neighbor count is clamped to 1.
pub fn agg_bulyan(updates: &[ClientUpdate], f: usize) -> Result<AggregateResult, AggError> {
    let (sorted, d) = canonical(updates)?;
    let n = sorted.len();
    if n < 4 * f + 3 {
        return Err(AggError::TooFewUpdates {
            rule: "bulyan",
            n,
            f,
            required: 4 * f + 3,
        });
    }
    let dist = squared_distances(&sorted);
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut chosen = Vec::with_capacity(n - 2 * f);
    while chosen.len() < n - 2 * f {
        let neighbors = remaining.len().saturating_sub(f + 2).max(1);
        let scores = scores_within(&dist, &remaining, neighbors);
        // Strict `<` keeps the lowest client id on ties.
        let mut best = 0;
        for (k, s) in scores.iter().enumerate() {
            if *s < scores[best] {
                best = k;
            }
        }
        chosen.push(remaining.remove(best));
    }
    chosen.sort_unstable();
    let selected: Vec<&ClientUpdate> = chosen.iter().map(|&i| sorted[i]).collect();
    let beta = n - 4 * f;
    let aggregate = coordinatewise(&selected, d, |column| {
        let med = median_in_place(column);
        column.sort_by(|a, b| (a - med).abs().total_cmp(&(b - med).abs()).then(a.total_cmp(b)));
        column[..beta].iter().sum::<f64>() / beta as f64
    });
    Ok(AggregateResult {
        aggregate,
        selection: Selection::Averaged(selected.iter().map(|u| u.client_id).collect()),
        rule: "bulyan",
    })
}

/// `n` groups of `group_size` distinct positions each, drawn independently.
pub fn draw_resampling_groups(n: usize, group_size: usize, seed: u64) -> Result<Vec<Vec<usize>>, AggError> {
    if group_size == 0 || group_size > n {
        return Err(AggError::InvalidArgument(format!(
            "resampling group size {group_size} must be in 1..={n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| sample_indices(&mut rng, n, group_size)).collect())
}

/// Median of the group means. Group entries index the updates sorted by client id.
pub fn agg_resampling_with_groups(
    updates: &[ClientUpdate],
    groups: &[Vec<usize>],
) -> Result<AggregateResult, AggError> {
    let (sorted, d) = canonical(updates)?;
    if groups.is_empty()
        || groups
            .iter()
            .any(|g| g.is_empty() || g.iter().any(|&i| i >= sorted.len()))
    {
        return Err(AggError::InvalidArgument("malformed resampling groups".into()));
    }
    let round = sorted[0].round;
    let modified: Vec<ClientUpdate> = groups
        .iter()
        .enumerate()
        .map(|(g, members)| {
            let picked: Vec<&ClientUpdate> = members.iter().map(|&i| sorted[i]).collect();
            ClientUpdate {
                client_id: g,
                round,
                payload: mean_of(&picked, d),
            }
        })
        .collect();
    let refs: Vec<&ClientUpdate> = modified.iter().collect();
    Ok(AggregateResult {
        aggregate: coordinatewise(&refs, d, median_in_place),
        selection: Selection::Coordinatewise,
        rule: "resampling",
    })
}

pub fn agg_resampling(updates: &[ClientUpdate], group_size: usize, seed: u64) -> Result<AggregateResult, AggError> {
    let groups = draw_resampling_groups(updates.len(), group_size, seed)?;
    agg_resampling_with_groups(updates, &groups)
}

/// Trust-weighted mean of client updates rescaled to the root update's norm.
pub fn agg_fltrust(updates: &[ClientUpdate], root: &ParamVector) -> Result<AggregateResult, AggError> {
    let (sorted, d) = canonical(updates)?;
    if root.len() != d {
        return Err(AggError::LengthMismatch {
            client: usize::MAX,
            expected: d,
            found: root.len(),
        });
    }
    let root_norm = root.norm();
    if !(root_norm > 0.0) {
        return Err(AggError::ZeroRoot);
    }
    let mut acc = ParamVector::zeros(d);
    let mut total = 0.0;
    let mut weights = Vec::with_capacity(sorted.len());
    for u in &sorted {
        let norm = u.payload.norm();
        let trust = if norm > 0.0 {
            (u.payload.dot(root) / (norm * root_norm)).max(0.0)
        } else {
            0.0
        };
        if trust > 0.0 {
            acc.axpy(trust * root_norm / norm, &u.payload);
            total += trust;
        }
        weights.push((u.client_id, trust));
    }
    if total > 0.0 {
        acc = acc.scaled(1.0 / total);
        for w in &mut weights {
            w.1 /= total;
        }
    }
    Ok(AggregateResult {
        aggregate: acc,
        selection: Selection::Weights(weights),
        rule: "fltrust",
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub flagged: BTreeSet<usize>,
    pub truth: BTreeSet<usize>,
}

/// Precision and recall of `flagged` against `truth`.
///
/// An empty flagged set has precision 1 (no false alarms) and an empty
/// truth set has recall 1 (nothing to miss).
pub fn detection_metrics(flagged: &BTreeSet<usize>, truth: &BTreeSet<usize>) -> DetectionMetrics {
    let hits = flagged.intersection(truth).count() as f64;
    let precision = if flagged.is_empty() {
        1.0
    } else {
        hits / flagged.len() as f64
    };
    let recall = if truth.is_empty() {
        1.0
    } else {
        hits / truth.len() as f64
    };
    DetectionMetrics {
        precision,
        recall,
        flagged: flagged.clone(),
        truth: truth.clone(),
    }
}
