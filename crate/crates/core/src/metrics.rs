//! Routing stability and balance measurements over recorded routing decisions.
//!
//! A [`RoutingRecord`] holds, for one checkpoint, every MoE layer's scores and
//! selections on a fixed evaluation token set. Row `t` of every layer refers to the
//! same evaluation token in every record, which is what makes records comparable
//! across epochs and across models.

use std::io::Write;

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::moe::LayerRouting;
use crate::numerics::{stable, Tensor};

/// Routing decisions of every layer on the evaluation set after one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub epoch: usize,
    pub layers: Vec<LayerRouting>,
}

impl RoutingRecord {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.layers.first().map_or(0, |l| l.selected.len())
    }

    /// Checks that every layer covers the same tokens.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_tokens();
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.selected.len() != n || layer.scores.rows() != n {
                return Err(Error::Alignment(format!(
                    "layer {l} covers {} tokens, layer 0 covers {n}",
                    layer.selected.len()
                )));
            }
        }
        Ok(())
    }

    /// Writes one CSV row per (layer, token): `layer,token,epoch,selected,scores,h_star`.
    /// Expert ids and scores are `;`-joined inside their cells.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let to_err = |e: csv::Error| Error::Format(format!("routing csv: {e}"));
        out.write_record(["layer", "token", "epoch", "selected_experts", "scores", "h_star"])
            .map_err(to_err)?;
        for (l, layer) in self.layers.iter().enumerate() {
            let h = layer.h_star.map(|h| h.to_string()).unwrap_or_default();
            for (t, sel) in layer.selected.iter().enumerate() {
                let ids: Vec<String> = sel.iter().map(usize::to_string).collect();
                let scores: Vec<String> = layer.scores.row(t).iter().map(|v| format!("{v:e}")).collect();
                out.write_record([
                    l.to_string(),
                    t.to_string(),
                    self.epoch.to_string(),
                    ids.join(";"),
                    scores.join(";"),
                    h.clone(),
                ])
                .map_err(to_err)?;
            }
        }
        out.flush().map_err(|e| Error::Format(format!("routing csv: {e}")))?;
        Ok(())
    }
}

fn check_aligned(a: &RoutingRecord, b: &RoutingRecord) -> Result<()> {
    a.validate()?;
    b.validate()?;
    if a.num_layers() != b.num_layers() {
        return Err(Error::Alignment(format!(
            "records have {} and {} layers",
            a.num_layers(),
            b.num_layers()
        )));
    }
    if a.num_tokens() != b.num_tokens() {
        return Err(Error::Alignment(format!(
            "records cover {} and {} evaluation tokens",
            a.num_tokens(),
            b.num_tokens()
        )));
    }
    Ok(())
}

/// Per-layer fluctuation between two records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fluctuation {
    /// Fraction of tokens whose top-1 expert differs.
    pub top1: f64,
    /// Fraction of tokens whose selected expert set differs.
    pub set_change: f64,
}

pub fn fluctuation_rate(a: &RoutingRecord, b: &RoutingRecord) -> Result<Vec<Fluctuation>> {
    check_aligned(a, b)?;
    let n = a.num_tokens();
    if n == 0 {
        return Err(Error::EmptyInput("records without evaluation tokens".into()));
    }
    Ok(a.layers
        .iter()
        .zip(&b.layers)
        .map(|(la, lb)| {
            let mut top1 = 0usize;
            let mut sets = 0usize;
            for (sa, sb) in la.selected.iter().zip(&lb.selected) {
                if sa.first() != sb.first() {
                    top1 += 1;
                }
                let (mut x, mut y) = (sa.clone(), sb.clone());
                x.sort_unstable();
                y.sort_unstable();
                if x != y {
                    sets += 1;
                }
            }
            Fluctuation {
                top1: top1 as f64 / n as f64,
                set_change: sets as f64 / n as f64,
            }
        })
        .collect())
}

/// Mean entropy (nats) of a matrix's rows, each validated as a distribution.
pub fn mean_row_entropy(scores: &Tensor) -> Result<f64> {
    let n = scores.rows();
    if n == 0 {
        return Err(Error::EmptyInput("no score rows".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        total += stable::entropy(scores.row(i))?;
    }
    Ok(total / n as f64)
}

/// Per layer, the mean over tokens of the score-vector entropy in nats.
pub fn mean_decision_entropy(rec: &RoutingRecord) -> Result<Vec<f64>> {
    rec.layers.iter().map(|l| mean_row_entropy(&l.scores)).collect()
}

/// `model / baseline` with `0/0 = 1` and `x/0 = +inf` for `x > 0`.
pub fn ratio_or_sentinel(model: f64, baseline: f64) -> f64 {
    if baseline > 0.0 {
        model / baseline
    } else if model > 0.0 {
        f64::INFINITY
    } else {
        1.0
    }
}

/// Per-layer ratio of mean decision entropies.
pub fn entropy_ratio(model: &RoutingRecord, baseline: &RoutingRecord) -> Result<Vec<f64>> {
    if model.num_layers() != baseline.num_layers() {
        return Err(Error::Alignment(format!(
            "model has {} layers, baseline {}",
            model.num_layers(),
            baseline.num_layers()
        )));
    }
    let m = mean_decision_entropy(model)?;
    let b = mean_decision_entropy(baseline)?;
    Ok(m.iter().zip(&b).map(|(&x, &y)| ratio_or_sentinel(x, y)).collect())
}

/// Expert load of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadDistribution {
    pub fractions: Vec<f64>,
    pub kl_from_uniform: f64,
}

/// `KL(p ‖ uniform)` in nats.
pub fn kl_from_uniform(p: &[f64]) -> f64 {
    let n = p.len() as f64;
    p.iter().filter(|&&v| v > 0.0).map(|&v| v * (v * n).ln()).sum::<f64>().max(0.0)
}

/// Fraction of token-selection assignments each expert receives, per layer.
pub fn load_distribution(rec: &RoutingRecord) -> Result<Vec<LoadDistribution>> {
    rec.validate()?;
    rec.layers
        .iter()
        .map(|l| {
            let e = l.scores.cols();
            let mut counts = vec![0usize; e];
            let mut total = 0usize;
            for sel in &l.selected {
                for &x in sel {
                    if x >= e {
                        return Err(Error::Range(format!("expert {x} of {e}")));
                    }
                    counts[x] += 1;
                    total += 1;
                }
            }
            if total == 0 {
                return Err(Error::EmptyInput("no routed selections".into()));
            }
            let fractions: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
            Ok(LoadDistribution {
                kl_from_uniform: kl_from_uniform(&fractions),
                fractions,
            })
        })
        .collect()
}

/// Entropy bound evaluation for one token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    /// `H(p_i)` with `p_i = Σ_j s(i,j) r_j`.
    pub lhs: f64,
    /// `Σ_j s(i,j) H(r_j) + H(s_i)`.
    pub rhs: f64,
    pub margin: f64,
    pub holds: bool,
}

/// Checks `H(Σ_j s_ij r_j) ≤ Σ_j s_ij H(r_j) + H(s_i)` for every row `i`.
///
/// With `restrict_to_ji`, each row of `s` first keeps only the tokens `j` whose
/// gate entropy is at most that of token `i` (ties kept) and is renormalized.
pub fn prop1_bound_check(r: &Tensor, s: &Tensor, restrict_to_ji: bool) -> Result<Vec<BoundCheck>> {
    let n = r.rows();
    if s.rank() != 2 || s.shape() != [n, n] {
        return Err(Error::Dimension(format!("weights {:?} for {n} tokens", s.shape())));
    }
    let h: Vec<f64> = (0..n).map(|j| stable::entropy(r.row(j))).collect::<Result<_>>()?;
    let e = r.cols();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut w = s.row(i).to_vec();
        if restrict_to_ji {
            for (j, wj) in w.iter_mut().enumerate() {
                if h[j] > h[i] {
                    *wj = 0.0;
                }
            }
            let z: f64 = w.iter().sum();
            if !(z > 0.0) {
                return Err(Error::Validation(format!("row {i} has no weight on its entropy set")));
            }
            w.iter_mut().for_each(|v| *v /= z);
        }
        stable::validate_distribution(&w, 1e-9)?;
        let mut p = vec![0.0; e];
        for (j, &wj) in w.iter().enumerate() {
            for (pe, re) in p.iter_mut().zip(r.row(j)) {
                *pe += wj * re;
            }
        }
        let lhs = stable::entropy_unchecked(&p);
        let rhs = w.iter().zip(&h).map(|(wj, hj)| wj * hj).sum::<f64>() + stable::entropy_unchecked(&w);
        let margin = rhs - lhs;
        out.push(BoundCheck {
            lhs,
            rhs,
            margin,
            holds: margin >= -1e-9,
        });
    }
    Ok(out)
}

fn finite_or_text<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(&format_value(*v))
    }
}

fn optional_finite_or_text<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) => finite_or_text(x, s),
        None => s.serialize_none(),
    }
}

/// Formats a metric value for CSV output; infinities print as `inf`.
pub fn format_value(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

/// All metrics of one layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerMetrics {
    pub layer: usize,
    pub fluctuation_rate: f64,
    pub set_change_rate: f64,
    pub mean_decision_entropy: f64,
    #[serde(serialize_with = "optional_finite_or_text")]
    pub entropy_ratio: Option<f64>,
    pub load: Vec<f64>,
    pub load_kl: f64,
    pub baseline_load_kl: Option<f64>,
    pub bound_violations: usize,
    pub bound_min_margin: f64,
}

/// Metrics of one run between two epochs, optionally against a baseline.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub variant: String,
    pub seed: u64,
    pub epoch_a: usize,
    pub epoch_b: usize,
    pub baseline: Option<String>,
    pub layers: Vec<LayerMetrics>,
}

impl MetricsReport {
    /// Builds a report from the records at two epochs of one run.
    /// Entropy, load and the bound check describe `rec_b`, the later record; a
    /// `baseline` record is compared against `rec_b` and must cover the same tokens.
    pub fn build(
        variant: &str,
        seed: u64,
        rec_a: &RoutingRecord,
        rec_b: &RoutingRecord,
        baseline: Option<(&str, &RoutingRecord)>,
    ) -> Result<Self> {
        let fluct = fluctuation_rate(rec_a, rec_b)?;
        let ent = mean_decision_entropy(rec_b)?;
        let ratio = match baseline {
            Some((_, b)) => {
                check_aligned(rec_b, b)?;
                Some(entropy_ratio(rec_b, b)?)
            }
            None => None,
        };
        let load = load_distribution(rec_b)?;
        let base_load = baseline.map(|(_, b)| load_distribution(b)).transpose()?;
        let mut layers = Vec::with_capacity(fluct.len());
        for (l, f) in fluct.iter().enumerate() {
            let scores = &rec_b.layers[l].scores;
            let own = prop1_bound_check(scores, &Tensor::identity(scores.rows()), false)?;
            layers.push(LayerMetrics {
                layer: l,
                fluctuation_rate: f.top1,
                set_change_rate: f.set_change,
                mean_decision_entropy: ent[l],
                entropy_ratio: ratio.as_ref().map(|r| r[l]),
                load: load[l].fractions.clone(),
                load_kl: load[l].kl_from_uniform,
                baseline_load_kl: base_load.as_ref().map(|b| b[l].kl_from_uniform),
                bound_violations: own.iter().filter(|c| !c.holds).count(),
                bound_min_margin: own.iter().map(|c| c.margin).fold(f64::INFINITY, f64::min),
            });
        }
        Ok(Self {
            variant: variant.into(),
            seed,
            epoch_a: rec_a.epoch,
            epoch_b: rec_b.epoch,
            baseline: baseline.map(|(name, _)| name.to_string()),
            layers,
        })
    }

    /// Label used in file names and in the `epoch_pair` column.
    pub fn epoch_pair(&self) -> String {
        format!("{}-{}", self.epoch_a, self.epoch_b)
    }

    /// Long-format rows `variant,seed,epoch_pair,layer,metric,value`.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let to_err = |e: csv::Error| Error::Format(format!("metrics csv: {e}"));
        out.write_record(["variant", "seed", "epoch_pair", "layer", "metric", "value"])
            .map_err(to_err)?;
        let pair = self.epoch_pair();
        for l in &self.layers {
            let mut rows: Vec<(String, f64)> = vec![
                ("fluctuation_rate".into(), l.fluctuation_rate),
                ("set_change_rate".into(), l.set_change_rate),
                ("mean_decision_entropy".into(), l.mean_decision_entropy),
            ];
            if let Some(r) = l.entropy_ratio {
                rows.push(("entropy_ratio".into(), r));
            }
            rows.push(("load_kl".into(), l.load_kl));
            if let Some(b) = l.baseline_load_kl {
                rows.push(("baseline_load_kl".into(), b));
            }
            for (e, f) in l.load.iter().enumerate() {
                rows.push((format!("load_expert_{e}"), *f));
            }
            rows.push(("bound_violations".into(), l.bound_violations as f64));
            for (name, v) in rows {
                out.write_record([
                    self.variant.clone(),
                    self.seed.to_string(),
                    pair.clone(),
                    l.layer.to_string(),
                    name,
                    format_value(v),
                ])
                .map_err(to_err)?;
            }
        }
        out.flush().map_err(|e| Error::Format(format!("metrics csv: {e}")))?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(format!("metrics json: {e}")))
    }
}
