//! How many proposals to run, and which.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum ProposalError {
    #[error("delta must lie in (0, 1], got {0}")]
    InvalidDelta(f64),
    #[error("{total} proposals are not divisible into {theta} configurations")]
    Indivisible { total: usize, theta: usize },
    #[error("cannot sample {count} of {total} proposals")]
    CountTooLarge { count: usize, total: usize },
    #[error("bin sampling needs a multiple of {bucket_count}, got {count}")]
    BinCount { count: usize, bucket_count: usize },
    #[error("unknown sampling strategy {0:?} (expected first, last or bin)")]
    UnknownStrategy(String),
}

/// Which rows of the proposal list survive sampling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    First,
    Last,
    Bin,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::First => "first",
            Strategy::Last => "last",
            Strategy::Bin => "bin",
        }
    }

    pub fn code(self) -> u32 {
        match self {
            Strategy::First => 0,
            Strategy::Last => 1,
            Strategy::Bin => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Strategy::First),
            1 => Some(Strategy::Last),
            2 => Some(Strategy::Bin),
            _ => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = ProposalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "first" => Ok(Strategy::First),
            "last" => Ok(Strategy::Last),
            "bin" => Ok(Strategy::Bin),
            other => Err(ProposalError::UnknownStrategy(other.to_string())),
        }
    }
}

/// `total` proposals split into `theta` equally sized configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchConfig {
    pub total: usize,
    pub theta: usize,
    pub strategy: Strategy,
}

impl SwitchConfig {
    pub fn new(total: usize, theta: usize, strategy: Strategy) -> Result<Self, ProposalError> {
        if theta == 0 || total == 0 || !total.is_multiple_of(theta) {
            return Err(ProposalError::Indivisible { total, theta });
        }
        Ok(SwitchConfig {
            total,
            theta,
            strategy,
        })
    }

    /// Proposals per configuration step, `N / θ`.
    pub fn step(&self) -> usize {
        self.total / self.theta
    }

    /// All configurations `{N/θ, 2N/θ, .., N}`.
    pub fn configurations(&self) -> Vec<usize> {
        (1..=self.theta).map(|k| k * self.step()).collect()
    }

    fn count_for_buckets(&self, buckets: usize) -> usize {
        buckets.clamp(1, self.theta) * self.step()
    }
}

/// `N_s = ceil(ceil(δθ) N / θ)`.
pub fn switch_count(cfg: &SwitchConfig, delta: f64) -> Result<usize, ProposalError> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(ProposalError::InvalidDelta(delta));
    }
    let buckets = (delta * cfg.theta as f64).ceil() as usize;
    Ok(cfg.count_for_buckets(buckets))
}

/// `δ(ñ) = min(ñ / K, 1)`; negative estimates count as zero.
pub fn dynamic_delta(n_est: f64, k: f64) -> f64 {
    (n_est.max(0.0) / k).min(1.0)
}

/// `N_d = ceil(θ δ(ñ)) N / θ` with at least one configuration step.
pub fn dynamic_count(cfg: &SwitchConfig, n_est: f64, k: f64) -> usize {
    let delta = dynamic_delta(n_est, k);
    let buckets = (cfg.theta as f64 * delta).ceil() as usize;
    cfg.count_for_buckets(buckets)
}

/// Row indices kept when sampling `count` of `total` rows.
///
/// `Bin` splits the rows into `total / theta` consecutive buckets of `theta`
/// rows and keeps the leading `count * theta / total` rows of each.
pub fn select_rows(total: usize, count: usize, theta: usize, strategy: Strategy) -> Result<Vec<usize>, ProposalError> {
    if count > total || count == 0 {
        return Err(ProposalError::CountTooLarge { count, total });
    }
    match strategy {
        Strategy::First => Ok((0..count).collect()),
        Strategy::Last => Ok((total - count..total).collect()),
        Strategy::Bin => {
            if theta == 0 || !total.is_multiple_of(theta) {
                return Err(ProposalError::Indivisible { total, theta });
            }
            let buckets = total / theta;
            if !count.is_multiple_of(buckets) {
                return Err(ProposalError::BinCount {
                    count,
                    bucket_count: buckets,
                });
            }
            let per_bucket = count / buckets;
            Ok((0..buckets)
                .flat_map(|b| (0..per_bucket).map(move |k| b * theta + k))
                .collect())
        }
    }
}

/// Learnable proposal features `[N x d]` and boxes `[N x 4]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalBank {
    pub features: Tensor,
    pub boxes: Tensor,
}

impl ProposalBank {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn gather(t: &Tensor, rows: &[usize]) -> Tensor {
    let w = t.row_len();
    let mut data = Vec::with_capacity(rows.len() * w);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    Tensor::from_parts(shape, data)
}

/// Sampled `(features, boxes)` rows of a bank.
pub fn sample(bank: &ProposalBank, count: usize, theta: usize, strategy: Strategy) -> Result<(Tensor, Tensor), ProposalError> {
    let rows = select_rows(bank.len(), count, theta, strategy)?;
    Ok((gather(&bank.features, &rows), gather(&bank.boxes, &rows)))
}

/// Candidate boxes with scores in non-increasing order.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredProposals {
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
}

impl ScoredProposals {
    /// Sorts by score, descending; ties keep their original order.
    pub fn sorted(mut pairs: Vec<(BBox, f64)>) -> Self {
        pairs.sort_by(|a, b| b.1.total_cmp(&a.1));
        let (boxes, scores) = pairs.into_iter().unzip();
        ScoredProposals { boxes, scores }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// The `n` highest-scoring candidates.
    pub fn top(&self, n: usize) -> ScoredProposals {
        let n = n.min(self.len());
        ScoredProposals {
            boxes: self.boxes[..n].to_vec(),
            scores: self.scores[..n].to_vec(),
        }
    }
}

/// Sampled boxes from a score-sorted list. When `count` exceeds the list,
/// every box is returned and the flag is set.
pub fn sample_scored(
    props: &ScoredProposals,
    count: usize,
    theta: usize,
    strategy: Strategy,
) -> Result<(Vec<BBox>, bool), ProposalError> {
    if count >= props.len() {
        return Ok((props.boxes.clone(), count > props.len()));
    }
    let rows = select_rows(props.len(), count, theta, strategy)?;
    Ok((rows.iter().map(|&r| props.boxes[r]).collect(), false))
}
