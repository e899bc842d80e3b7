//! Corpus ingestion, synthetic cluster tasks and token-swap perturbation.

use std::collections::BTreeSet;
use std::ops::Range;
use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const ATTACK: usize = 2;
/// Number of reserved ids before the first character id.
pub const RESERVED: usize = 3;

/// Fractions of the corpus assigned to train, valid and test, in file order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.valid, self.test];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!(
                "split fractions {parts:?} must be in [0, 1] and sum to 1"
            )));
        }
        Ok(())
    }
}

/// A character-level token stream with its vocabulary and split boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenCorpus {
    /// Characters for ids `RESERVED..`; id `RESERVED + k` is `chars[k]`.
    pub chars: Vec<char>,
    pub ids: Vec<usize>,
    pub train: Range<usize>,
    pub valid: Range<usize>,
    pub test: Range<usize>,
}

impl TokenCorpus {
    /// Builds a corpus from text. The vocabulary comes from the train split only.
    pub fn from_text(text: &str, fractions: SplitFractions) -> Result<Self> {
        fractions.validate()?;
        let chars: Vec<char> = text.chars().collect();
        if chars.is_empty() {
            return Err(Error::Ingestion("corpus is empty".into()));
        }
        let n = chars.len();
        let n_train = (fractions.train * n as f64).floor() as usize;
        let n_valid = ((fractions.valid * n as f64).floor() as usize).min(n - n_train);
        let train = 0..n_train;
        let valid = n_train..n_train + n_valid;
        let test = n_train + n_valid..n;
        let vocab: BTreeSet<char> = chars[train.clone()].iter().copied().collect();
        let vocab: Vec<char> = vocab.into_iter().collect();
        let mut corpus = Self {
            chars: vocab,
            ids: Vec::new(),
            train,
            valid,
            test,
        };
        corpus.ids = chars.iter().map(|&c| corpus.id_of(c)).collect();
        Ok(corpus)
    }

    pub fn vocab_size(&self) -> usize {
        RESERVED + self.chars.len()
    }

    fn id_of(&self, c: char) -> usize {
        self.chars.binary_search(&c).map_or(UNK, |k| RESERVED + k)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.id_of(c)).collect()
    }

    /// Inverse of [`encode`](Self::encode) for in-vocabulary characters. Reserved ids
    /// render as `\0` (PAD), U+FFFD (UNK) and U+2588 (ATTACK).
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| match i {
                PAD => '\0',
                ATTACK => '\u{2588}',
                i if i >= RESERVED && i < self.vocab_size() => self.chars[i - RESERVED],
                _ => '\u{FFFD}',
            })
            .collect()
    }

    pub fn train_ids(&self) -> &[usize] {
        &self.ids[self.train.clone()]
    }

    pub fn valid_ids(&self) -> &[usize] {
        &self.ids[self.valid.clone()]
    }

    pub fn test_ids(&self) -> &[usize] {
        &self.ids[self.test.clone()]
    }
}

/// Reads a UTF-8 text file as a character corpus.
pub fn load_char_corpus(path: &Path, fractions: SplitFractions) -> Result<TokenCorpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    TokenCorpus::from_text(&text, fractions)
}

/// Replaces exactly `round(fraction · len)` positions, chosen uniformly without
/// replacement from `seed`, with the [`ATTACK`] id.
pub fn token_swap_attack(ids: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Parameter(format!("attack fraction {fraction} outside [0, 1]")));
    }
    let count = (fraction * ids.len() as f64).round() as usize;
    let mut out = ids.to_vec();
    let mut r = rng::substream(seed, rng::streams::ATTACK);
    for pos in index::sample(&mut r, ids.len(), count) {
        out[pos] = ATTACK;
    }
    Ok(out)
}

/// Distance of every cluster center from the origin.
pub const CENTER_SCALE: f64 = 4.0;

/// Labeled points around `C` centers placed on scaled basis directions.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClusterTask {
    /// `C×D`; center `c` is `CENTER_SCALE · e_c`.
    pub centers: Tensor,
    /// `(C·per_cluster)×D`, grouped by cluster.
    pub points: Tensor,
    pub labels: Vec<usize>,
    pub radius: f64,
}

impl SyntheticClusterTask {
    pub fn num_clusters(&self) -> usize {
        self.centers.rows()
    }

    /// Label of the nearest center to `x`.
    pub fn nearest_center(&self, x: &[f64]) -> usize {
        (0..self.centers.rows())
            .map(|c| {
                let d: f64 = self.centers.row(c).iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                (c, d)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map_or(0, |(c, _)| c)
    }

    /// Seeded permutation of point indices cut into sequences of `seq_len`; a short tail is dropped.
    pub fn sequences(&self, seq_len: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
        if seq_len == 0 || seq_len > self.labels.len() {
            return Err(Error::Parameter(format!(
                "sequence length {seq_len} for {} points",
                self.labels.len()
            )));
        }
        let mut r = rng::substream(seed, rng::streams::DATA);
        let perm = index::sample(&mut r, self.labels.len(), self.labels.len()).into_vec();
        Ok(perm.chunks_exact(seq_len).map(<[usize]>::to_vec).collect())
    }
}

/// Points drawn uniformly in balls of `radius` around each center.
///
/// Centers sit on distinct basis directions, so they are `CENTER_SCALE·√2` apart and
/// `radius` must stay below half of that.
pub fn make_synthetic_clusters(
    clusters: usize,
    per_cluster: usize,
    dim: usize,
    radius: f64,
    seed: u64,
) -> Result<SyntheticClusterTask> {
    if clusters == 0 || per_cluster == 0 {
        return Err(Error::Parameter("need at least one cluster and one point per cluster".into()));
    }
    if dim < clusters {
        return Err(Error::Parameter(format!("{clusters} basis centers need D >= {clusters}, got {dim}")));
    }
    let limit = CENTER_SCALE * std::f64::consts::SQRT_2 / 2.0;
    if !(0.0..limit).contains(&radius) {
        return Err(Error::Parameter(format!("radius {radius} must lie in [0, {limit})")));
    }
    let centers = Tensor::from_fn(clusters, dim, |c, j| if c == j { CENTER_SCALE } else { 0.0 });
    let mut r = rng::substream(seed, rng::streams::DATA);
    let mut points = Tensor::zeros(&[clusters * per_cluster, dim]);
    let mut labels = Vec::with_capacity(clusters * per_cluster);
    for c in 0..clusters {
        for k in 0..per_cluster {
            let dir: Vec<f64> = (0..dim).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let len = radius * r.random::<f64>().powf(1.0 / dim as f64);
            let row = points.row_mut(c * per_cluster + k);
            for j in 0..dim {
                row[j] = centers.at(c, j) + len * dir[j] / norm;
            }
            labels.push(c);
        }
    }
    Ok(SyntheticClusterTask {
        centers,
        points,
        labels,
        radius,
    })
}
