//! Exact enumeration and Monte-Carlo sampling of the routing generative models.
//!
//! Four sampling chains are implemented for a small instance:
//!
//! - SMoE: `e ~ Cat(r(u))`, `o ~ N(g_e(u), I)`
//! - similarity: `s_i ~ Cat(S[i,:])`, `e ~ Cat(r(u_{s_i}))`, `o ~ N(g_e(u_i), I)`
//! - attention: `h ~ U{0..H}`, `z ~ Cat(A_h[i,:])`, `u ~ N(W_h x_z, σ² I)`, `e ~ Cat(r(u))`
//! - attention-aware: as above, but `e ~ Cat(r(u_{z_i}))` from the realized `z_i`
//!
//! Every quantity the chains need (attention matrices, gates, experts, densities)
//! is recomputed here with plain scalar loops, so the oracle shares no numerical
//! code with the model implementation it checks.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionParams, MaskMode};
use crate::error::{Error, Result};
use crate::moe::ExpertParams;
use crate::numerics::gradcheck::random_tensor;
use crate::numerics::Tensor;
use crate::rng::{self, Rng};
use crate::routing::{RouterKind, RouterParams};

/// Largest instance sizes the enumerators accept.
pub const MAX_TOKENS: usize = 5;
pub const MAX_HEADS: usize = 3;
pub const MAX_EXPERTS: usize = 5;
pub const MAX_DIM: usize = 4;

/// A small fully specified generative model.
#[derive(Debug, Clone)]
pub struct PgmInstance {
    pub x: Tensor,
    pub attn: AttentionParams,
    pub router: RouterParams,
    pub experts: ExpertParams,
    /// Likelihood standard deviation; `0` is a point mass, allowed only here.
    pub sigma: f64,
    pub tau: f64,
    pub w_s: Tensor,
    pub mask: MaskMode,
}

/// Sizes of a random instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceSize {
    pub tokens: usize,
    pub heads: usize,
    pub experts: usize,
    pub dim: usize,
    pub d_qk: usize,
}

impl InstanceSize {
    pub fn check(&self) -> Result<()> {
        let over = [
            ("N", self.tokens, MAX_TOKENS),
            ("H", self.heads, MAX_HEADS),
            ("E", self.experts, MAX_EXPERTS),
            ("D", self.dim, MAX_DIM),
            ("D_qk", self.d_qk, MAX_DIM),
        ]
        .into_iter()
        .find(|&(_, v, max)| v == 0 || v > max);
        match over {
            Some((name, v, max)) => Err(Error::Refusal(format!(
                "{name}={v} is outside the enumeration bounds 1..={max}"
            ))),
            None => Ok(()),
        }
    }
}

impl PgmInstance {
    /// Seeded random instance with full masking, `σ = τ = 1` and `W_s = I`.
    pub fn random(size: InstanceSize, seed: u64) -> Result<Self> {
        size.check()?;
        let d = size.dim;
        let router = RouterParams::linear(
            random_tensor(&[size.experts, d], seed ^ 0x51),
            random_tensor(&[size.experts], seed ^ 0x52).scale(0.5),
        )?;
        let experts = ExpertParams {
            b1: (0..size.experts)
                .map(|e| random_tensor(&[d], seed ^ (0x60 + e as u64)).scale(0.3))
                .collect(),
            ..ExpertParams::random(size.experts, d, d, seed ^ 0x53)
        };
        Ok(Self {
            x: random_tensor(&[size.tokens, d], seed),
            attn: AttentionParams::random(size.heads, d, size.d_qk, seed ^ 0x54),
            router,
            experts,
            sigma: 1.0,
            tau: 1.0,
            w_s: Tensor::identity(d),
            mask: MaskMode::Full,
        })
    }

    pub fn size(&self) -> InstanceSize {
        InstanceSize {
            tokens: self.x.rows(),
            heads: self.attn.heads(),
            experts: self.experts.num_experts(),
            dim: self.x.cols(),
            d_qk: self.attn.d_qk(),
        }
    }

    fn check(&self) -> Result<()> {
        self.size().check()?;
        if self.router.kind == RouterKind::Cosine {
            return Err(Error::Refusal("the oracle covers linear gates only".into()));
        }
        if !(self.sigma >= 0.0) || !(self.tau > 0.0) {
            return Err(Error::Parameter(format!("sigma {} tau {}", self.sigma, self.tau)));
        }
        Ok(())
    }

    fn visible(&self, i: usize, j: usize) -> bool {
        self.mask == MaskMode::Full || j <= i
    }

    /// `A_h` by direct loops.
    pub fn attention(&self, h: usize) -> Vec<Vec<f64>> {
        let (n, d, dq) = (self.x.rows(), self.x.cols(), self.attn.d_qk());
        let proj = |w: &Tensor, t: usize| -> Vec<f64> {
            (0..dq)
                .map(|a| (0..d).map(|c| w.at(a, c) * self.x.at(t, c)).sum())
                .collect()
        };
        let scale = (dq as f64).sqrt();
        (0..n)
            .map(|i| {
                let q = proj(&self.attn.query[h], i);
                let logits: Vec<f64> = (0..n)
                    .map(|j| {
                        if self.visible(i, j) {
                            let k = proj(&self.attn.key[h], j);
                            q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / scale
                        } else {
                            f64::NEG_INFINITY
                        }
                    })
                    .collect();
                normalize_exp(&logits)
            })
            .collect()
    }

    /// Mean of head `h` at position `j`: `W_h x_j`.
    pub fn head_mean(&self, h: usize, j: usize) -> Vec<f64> {
        let d = self.x.cols();
        let w = &self.attn.value_out[h];
        (0..d).map(|a| (0..d).map(|c| w.at(a, c) * self.x.at(j, c)).sum()).collect()
    }

    /// `(1/H) Σ_h Σ_j A_h[i,j] W_h x_j` by loops.
    pub fn attention_mean(&self) -> Vec<Vec<f64>> {
        let (n, d, heads) = (self.x.rows(), self.x.cols(), self.attn.heads());
        let mut out = vec![vec![0.0; d]; n];
        for h in 0..heads {
            let a = self.attention(h);
            for (i, row) in out.iter_mut().enumerate() {
                for j in 0..n {
                    let m = self.head_mean(h, j);
                    for c in 0..d {
                        row[c] += a[i][j] * m[c] / heads as f64;
                    }
                }
            }
        }
        out
    }

    /// Gate `r(u)` by loops.
    pub fn gate(&self, u: &[f64]) -> Vec<f64> {
        let e = self.router.num_experts();
        let logits: Vec<f64> = (0..e)
            .map(|k| self.router.bias.data()[k] + (0..u.len()).map(|c| self.router.weight.at(k, c) * u[c]).sum::<f64>())
            .collect();
        normalize_exp(&logits)
    }

    /// `g_e(u)` by loops.
    pub fn expert(&self, e: usize, u: &[f64]) -> Vec<f64> {
        let p = &self.experts;
        let hidden: Vec<f64> = (0..p.d_ff())
            .map(|k| {
                let z = p.b1[e].data()[k] + (0..u.len()).map(|c| p.w1[e].at(k, c) * u[c]).sum::<f64>();
                z / (1.0 + (-z).exp())
            })
            .collect();
        (0..u.len())
            .map(|c| p.b2[e].data()[c] + (0..hidden.len()).map(|k| p.w2[e].at(c, k) * hidden[k]).sum::<f64>())
            .collect()
    }

    /// `S = softmax(U W_s Uᵀ / τ)` by loops.
    pub fn similarity(&self, u: &Tensor) -> Vec<Vec<f64>> {
        let (n, d) = (u.rows(), u.cols());
        (0..n)
            .map(|i| {
                let logits: Vec<f64> = (0..n)
                    .map(|j| {
                        if !self.visible(i, j) {
                            return f64::NEG_INFINITY;
                        }
                        let mut s = 0.0;
                        for a in 0..d {
                            for b in 0..d {
                                s += u.at(i, a) * self.w_s.at(a, b) * u.at(j, b);
                            }
                        }
                        s / self.tau
                    })
                    .collect();
                normalize_exp(&logits)
            })
            .collect()
    }

    /// `log N(u | mean, σ² I)` by the density formula.
    pub fn log_density(&self, u: &[f64], mean: &[f64]) -> f64 {
        let var = self.sigma * self.sigma;
        let sq: f64 = u.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
        -0.5 * u.len() as f64 * (2.0 * std::f64::consts::PI * var).ln() - sq / (2.0 * var)
    }
}

fn normalize_exp(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { (l - m).exp() }).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

fn categorical(p: &[f64], rng: &mut Rng) -> usize {
    let x: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &v) in p.iter().enumerate() {
        acc += v;
        if x < acc {
            return k;
        }
    }
    // rounding left a sliver above the cumulative sum; take the last supported entry
    p.iter().rposition(|&v| v > 0.0).unwrap_or(0)
}

fn gaussian(mean: &[f64], sd: f64, rng: &mut Rng) -> Vec<f64> {
    mean.iter()
        .map(|&m| {
            let z: f64 = rng.sample(StandardNormal);
            m + sd * z
        })
        .collect()
}

/// `e ~ Cat(r(u))`, `o ~ N(g_e(u), I)`.
pub fn sample_smoe_chain(u: &[f64], inst: &PgmInstance, rng: &mut Rng) -> (usize, Vec<f64>) {
    let e = categorical(&inst.gate(u), rng);
    let o = gaussian(&inst.expert(e, u), 1.0, rng);
    (e, o)
}

/// One draw of the similarity chain for token `i`: `(s_i, e, o)`.
pub fn sample_sam_chain(u: &Tensor, i: usize, inst: &PgmInstance, rng: &mut Rng) -> (usize, usize, Vec<f64>) {
    let s = categorical(&inst.similarity(u)[i], rng);
    let e = categorical(&inst.gate(u.row(s)), rng);
    let o = gaussian(&inst.expert(e, u.row(i)), 1.0, rng);
    (s, e, o)
}

/// One draw of the attention chain for token `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct MamDraw {
    pub h: usize,
    pub z: usize,
    pub u: Vec<f64>,
    pub e: usize,
    pub o: Vec<f64>,
}

pub fn sample_mam_chain(i: usize, inst: &PgmInstance, rng: &mut Rng) -> MamDraw {
    let h = rng.random_range(0..inst.attn.heads());
    let z = categorical(&inst.attention(h)[i], rng);
    let u = gaussian(&inst.head_mean(h, z), inst.sigma, rng);
    let e = categorical(&inst.gate(&u), rng);
    let o = gaussian(&inst.expert(e, &u), 1.0, rng);
    MamDraw { h, z, u, e, o }
}

/// One joint draw of the attention-aware chain over the whole sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct A2mmDraw {
    pub h: Vec<usize>,
    pub z: Vec<usize>,
    pub u: Tensor,
    pub e: Vec<usize>,
    pub o: Tensor,
}

pub fn sample_a2mm_chain(inst: &PgmInstance, rng: &mut Rng) -> A2mmDraw {
    let (n, d) = (inst.x.rows(), inst.x.cols());
    let mut hs = Vec::with_capacity(n);
    let mut zs = Vec::with_capacity(n);
    let mut u = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let h = rng.random_range(0..inst.attn.heads());
        let z = categorical(&inst.attention(h)[i], rng);
        u.row_mut(i).copy_from_slice(&gaussian(&inst.head_mean(h, z), inst.sigma, rng));
        hs.push(h);
        zs.push(z);
    }
    let mut es = Vec::with_capacity(n);
    let mut o = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let e = categorical(&inst.gate(u.row(zs[i])), rng);
        o.row_mut(i).copy_from_slice(&gaussian(&inst.expert(e, u.row(i)), 1.0, rng));
        es.push(e);
    }
    A2mmDraw { h: hs, z: zs, u, e: es, o }
}

/// `P(e_i | U, X) = Σ_h Σ_j [(1/H) A_h[i,j] L_h[i,j] / Z_i] r_e(u_j)` by direct enumeration.
pub fn enumerate_expert_posterior(u: &Tensor, inst: &PgmInstance) -> Result<Tensor> {
    inst.check()?;
    if !(inst.sigma > 0.0) {
        return Err(Error::Parameter("enumeration needs sigma > 0".into()));
    }
    let (n, heads, e) = (inst.x.rows(), inst.attn.heads(), inst.experts.num_experts());
    if u.shape() != inst.x.shape() {
        return Err(Error::Dimension(format!("U {:?} vs X {:?}", u.shape(), inst.x.shape())));
    }
    let attn: Vec<Vec<Vec<f64>>> = (0..heads).map(|h| inst.attention(h)).collect();
    let gates: Vec<Vec<f64>> = (0..n).map(|j| inst.gate(u.row(j))).collect();
    let mut out = Tensor::zeros(&[n, e]);
    for i in 0..n {
        let mut logw = Vec::with_capacity(heads * n);
        for (h, a) in attn.iter().enumerate() {
            for j in 0..n {
                logw.push(if a[i][j] > 0.0 {
                    -(heads as f64).ln() + a[i][j].ln() + inst.log_density(u.row(i), &inst.head_mean(h, j))
                } else {
                    f64::NEG_INFINITY
                });
            }
        }
        let w = normalize_exp(&logw);
        for (idx, wk) in w.iter().enumerate() {
            let j = idx % n;
            for k in 0..e {
                out.set(i, k, out.at(i, k) + wk * gates[j][k]);
            }
        }
    }
    Ok(out)
}

/// `P(e_i | U) = Σ_s S[i,s] r_e(u_s)` by direct enumeration.
pub fn enumerate_similarity_routing(u: &Tensor, inst: &PgmInstance) -> Result<Tensor> {
    inst.check()?;
    if u.rows() > MAX_TOKENS || u.cols() != inst.x.cols() {
        return Err(Error::Refusal(format!("U {:?} is outside the enumeration bounds", u.shape())));
    }
    let n = u.rows();
    let e = inst.experts.num_experts();
    let s = inst.similarity(u);
    let mut out = Tensor::zeros(&[n, e]);
    for i in 0..n {
        for (j, sij) in s[i].iter().enumerate() {
            let r = inst.gate(u.row(j));
            for k in 0..e {
                out.set(i, k, out.at(i, k) + sij * r[k]);
            }
        }
    }
    Ok(out)
}

/// Comparison of an exact quantity with an estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub instance_seed: u64,
    pub quantity: String,
    pub enumerated: Vec<f64>,
    pub estimated: Vec<f64>,
    /// Standard errors of the estimates; all zero for exact comparisons.
    pub se: Vec<f64>,
    pub pass: bool,
}

impl OracleReport {
    /// Passes when every entry lies within `z` standard errors.
    pub fn statistical(seed: u64, quantity: &str, exact: Vec<f64>, est: Vec<f64>, se: Vec<f64>, z: f64) -> Self {
        let pass = exact
            .iter()
            .zip(&est)
            .zip(&se)
            .all(|((a, b), s)| (a - b).abs() <= z * s);
        Self {
            instance_seed: seed,
            quantity: quantity.into(),
            enumerated: exact,
            estimated: est,
            se,
            pass,
        }
    }

    /// Passes when every entry agrees within `tol`.
    pub fn exact(seed: u64, quantity: &str, exact: Vec<f64>, est: Vec<f64>, tol: f64) -> Self {
        let pass = exact.len() == est.len() && exact.iter().zip(&est).all(|(a, b)| (a - b).abs() <= tol);
        Self {
            instance_seed: seed,
            quantity: quantity.into(),
            se: vec![0.0; exact.len()],
            enumerated: exact,
            estimated: est,
            pass,
        }
    }

    /// Largest `|enumerated − estimated|`.
    pub fn max_abs_error(&self) -> f64 {
        self.enumerated
            .iter()
            .zip(&self.estimated)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Running mean and standard error per coordinate.
#[derive(Debug, Clone)]
pub struct MeanEstimator {
    n: usize,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl MeanEstimator {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            sum: vec![0.0; dim],
            sum_sq: vec![0.0; dim],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.n += 1;
        for (k, &v) in x.iter().enumerate() {
            self.sum[k] += v;
            self.sum_sq[k] += v * v;
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        self.sum.iter().map(|s| s / self.n as f64).collect()
    }

    pub fn se(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.sum
            .iter()
            .zip(&self.sum_sq)
            .map(|(s, q)| {
                let m = s / n;
                ((q / n - m * m).max(0.0) / (n - 1.0)).sqrt()
            })
            .collect()
    }
}

/// Self-normalized importance estimate of `P(e_i | U, X)` from the attention-aware
/// chain: `(h, z)` are drawn from the prior and weighted by `L_h[i,z]`, then
/// `e ~ r(u_z)` from the conditioning `U`. Standard errors use the delta method.
pub fn conditional_expert_mc(u: &Tensor, inst: &PgmInstance, samples: usize, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    inst.check()?;
    let (n, heads, e) = (inst.x.rows(), inst.attn.heads(), inst.experts.num_experts());
    let attn: Vec<Vec<Vec<f64>>> = (0..heads).map(|h| inst.attention(h)).collect();
    let gates: Vec<Vec<f64>> = (0..n).map(|j| inst.gate(u.row(j))).collect();
    let mut est = Tensor::zeros(&[n, e]);
    let mut se = Tensor::zeros(&[n, e]);
    for i in 0..n {
        // likelihoods relative to the row maximum keep the weights in range
        let logl: Vec<Vec<f64>> = (0..heads)
            .map(|h| (0..n).map(|j| inst.log_density(u.row(i), &inst.head_mean(h, j))).collect())
            .collect();
        let top = logl.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut draws = Vec::with_capacity(samples);
        for _ in 0..samples {
            let h = rng.random_range(0..heads);
            let z = categorical(&attn[h][i], rng);
            let w = (logl[h][z] - top).exp();
            let k = categorical(&gates[z], rng);
            draws.push((w, k));
        }
        let total: f64 = draws.iter().map(|d| d.0).sum();
        for k in 0..e {
            let p: f64 = draws.iter().filter(|d| d.1 == k).map(|d| d.0).sum::<f64>() / total;
            let var: f64 = draws
                .iter()
                .map(|&(w, kk)| {
                    let y = if kk == k { 1.0 } else { 0.0 };
                    w * w * (y - p) * (y - p)
                })
                .sum::<f64>()
                / (total * total);
            est.set(i, k, p);
            se.set(i, k, var.sqrt());
        }
    }
    Ok((est, se))
}

/// Empirical expert frequencies of the similarity chain with binomial standard errors.
pub fn similarity_chain_mc(u: &Tensor, inst: &PgmInstance, samples: usize, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    inst.check()?;
    let (n, e) = (u.rows(), inst.experts.num_experts());
    let s = inst.similarity(u);
    let gates: Vec<Vec<f64>> = (0..n).map(|j| inst.gate(u.row(j))).collect();
    let mut est = Tensor::zeros(&[n, e]);
    let mut se = Tensor::zeros(&[n, e]);
    for i in 0..n {
        let mut counts = vec![0usize; e];
        for _ in 0..samples {
            let src = categorical(&s[i], rng);
            counts[categorical(&gates[src], rng)] += 1;
        }
        for k in 0..e {
            let p = counts[k] as f64 / samples as f64;
            est.set(i, k, p);
            se.set(i, k, (p * (1.0 - p) / samples as f64).sqrt());
        }
    }
    Ok((est, se))
}

/// Derived seed for instance `k` of a suite.
pub fn instance_seed(base: u64, k: u64) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add(k)
}

/// Convenience: a generator for one oracle check.
pub fn oracle_rng(seed: u64, check: u64) -> Rng {
    rng::substream(seed, 100 + check)
}

/// Settings of the oracle agreement suites.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub base_seed: u64,
    pub instances: usize,
    pub size: InstanceSize,
    /// Draws per token for the conditional posterior estimate.
    pub posterior_samples: usize,
    /// Draws per token for the plain chains.
    pub chain_samples: usize,
    /// Random instances for the entropy bound.
    pub bound_instances: usize,
    /// Standard errors allowed between an estimate and its exact value.
    pub z: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            base_seed: 0,
            instances: 5,
            size: InstanceSize {
                tokens: 3,
                heads: 2,
                experts: 4,
                dim: 2,
                d_qk: 2,
            },
            posterior_samples: 500_000,
            chain_samples: 200_000,
            bound_instances: 10_000,
            z: 3.0,
        }
    }
}

/// Deliberate corruption used to confirm that a suite can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Moves mass between two entries of the combiner's posterior scores.
    FlipPosteriorEntry,
}

/// Full-posterior combiner scores against enumeration, plus the conditional estimate.
pub fn posterior_suite(cfg: &SuiteConfig, fault: Fault) -> Result<Vec<OracleReport>> {
    use crate::attention::mha_forward;
    use crate::moe::{attention_aware_smoe, HeadMode, PosteriorConfig};
    let mut out = Vec::new();
    for k in 0..cfg.instances as u64 {
        let seed = instance_seed(cfg.base_seed, k);
        let inst = PgmInstance::random(cfg.size, seed)?;
        let pcfg = PosteriorConfig {
            sigma: inst.sigma,
            head_mode: HeadMode::FullPosterior,
        };
        let model = attention_aware_smoe(&inst.x, &inst.attn, inst.mask, &inst.router, &inst.experts, &pcfg, 1)?;
        let mut scores = model.routing.scores;
        if fault == Fault::FlipPosteriorEntry && k == 0 {
            let (a, b) = (scores.at(0, 0), scores.at(0, 1));
            scores.set(0, 0, b);
            scores.set(0, 1, a + 1e-3);
        }
        let u = mha_forward(&inst.x, &inst.attn, inst.mask)?.u;
        let exact = enumerate_expert_posterior(&u, &inst)?;
        out.push(OracleReport::exact(
            seed,
            "expert_posterior/full_posterior_combiner",
            exact.data().to_vec(),
            scores.into_data(),
            1e-8,
        ));
        let (est, se) = conditional_expert_mc(&u, &inst, cfg.posterior_samples, &mut oracle_rng(seed, 0))?;
        out.push(OracleReport::statistical(
            seed,
            "expert_posterior/conditional_mc",
            exact.into_data(),
            est.into_data(),
            se.into_data(),
            cfg.z,
        ));
    }
    Ok(out)
}

/// Similarity-mixed scores against enumeration and the similarity chain.
pub fn similarity_suite(cfg: &SuiteConfig) -> Result<Vec<OracleReport>> {
    use crate::moe::{similarity_aware_scores, similarity_matrix, SimilarityConfig};
    use crate::routing::gate_rows;
    let mut out = Vec::new();
    for k in 0..cfg.instances as u64 {
        let seed = instance_seed(cfg.base_seed, k);
        let inst = PgmInstance::random(cfg.size, seed)?;
        let u = inst.x.clone();
        let scfg = SimilarityConfig {
            w_s: Some(inst.w_s.clone()),
            tau: inst.tau,
            mask_mode: inst.mask,
        };
        let s = similarity_matrix(&u, &scfg)?;
        let p = similarity_aware_scores(&s, &gate_rows(&u, &inst.router)?)?;
        let exact = enumerate_similarity_routing(&u, &inst)?;
        out.push(OracleReport::exact(
            seed,
            "similarity_routing/scores",
            exact.data().to_vec(),
            p.into_tensor().into_data(),
            1e-12,
        ));
        let (est, se) = similarity_chain_mc(&u, &inst, cfg.chain_samples, &mut oracle_rng(seed, 1))?;
        out.push(OracleReport::statistical(
            seed,
            "similarity_routing/chain_mc",
            exact.into_data(),
            est.into_data(),
            se.into_data(),
            cfg.z,
        ));
    }
    Ok(out)
}

/// Attention output against the mean of `u` drawn from the attention chain.
pub fn attention_mean_suite(cfg: &SuiteConfig, instances: usize) -> Result<Vec<OracleReport>> {
    use crate::attention::mha_forward;
    let mut out = Vec::new();
    for k in 0..instances as u64 {
        let seed = instance_seed(cfg.base_seed, k);
        let inst = PgmInstance::random(cfg.size, seed)?;
        let u = mha_forward(&inst.x, &inst.attn, inst.mask)?.u;
        let mut r = oracle_rng(seed, 2);
        let mut exact = Vec::new();
        let mut est = Vec::new();
        let mut se = Vec::new();
        for i in 0..inst.x.rows() {
            let mut m = MeanEstimator::new(inst.x.cols());
            for _ in 0..cfg.chain_samples {
                m.push(&sample_mam_chain(i, &inst, &mut r).u);
            }
            exact.extend_from_slice(u.row(i));
            est.extend(m.mean());
            se.extend(m.se());
        }
        out.push(OracleReport::statistical(seed, "attention_output/chain_mean", exact, est, se, cfg.z));
    }
    Ok(out)
}

/// Dense mixture against the mean output of the SMoE chain.
pub fn smoe_suite(cfg: &SuiteConfig) -> Result<Vec<OracleReport>> {
    use crate::moe::moe_dense;
    let mut out = Vec::new();
    for k in 0..cfg.instances as u64 {
        let seed = instance_seed(cfg.base_seed, k);
        let inst = PgmInstance::random(cfg.size, seed)?;
        let dense = moe_dense(&inst.x, &inst.router, &inst.experts)?;
        let mut r = oracle_rng(seed, 3);
        let i = 0;
        let mut m = MeanEstimator::new(inst.x.cols());
        for _ in 0..cfg.chain_samples {
            m.push(&sample_smoe_chain(inst.x.row(i), &inst, &mut r).1);
        }
        out.push(OracleReport::statistical(
            seed,
            "smoe_output/chain_mean",
            dense.row(i).to_vec(),
            m.mean(),
            m.se(),
            cfg.z,
        ));
    }
    Ok(out)
}

/// Entropy bound on random gates and mixing weights, with and without restriction.
pub fn bound_suite(cfg: &SuiteConfig) -> Result<Vec<OracleReport>> {
    use crate::metrics::prop1_bound_check;
    let mut r = oracle_rng(cfg.base_seed, 4);
    let mut worst = [f64::INFINITY; 2];
    for _ in 0..cfg.bound_instances {
        let n = r.random_range(1..=8);
        let e = r.random_range(1..=16);
        let spread_r: f64 = r.random_range(0.1..8.0);
        let spread_s: f64 = r.random_range(0.1..8.0);
        let mut rt = Tensor::from_fn(n, e, |_, _| spread_r * r.random::<f64>());
        let mut st = Tensor::from_fn(n, n, |_, _| spread_s * r.random::<f64>());
        for i in 0..n {
            let gr = normalize_exp(rt.row(i));
            rt.row_mut(i).copy_from_slice(&gr);
            let gs = normalize_exp(st.row(i));
            st.row_mut(i).copy_from_slice(&gs);
        }
        for (slot, restrict) in [false, true].into_iter().enumerate() {
            for c in prop1_bound_check(&rt, &st, restrict)? {
                worst[slot] = worst[slot].min(c.margin);
            }
        }
    }
    Ok(["entropy_bound/unrestricted", "entropy_bound/restricted"]
        .into_iter()
        .zip(worst)
        .map(|(q, m)| OracleReport {
            instance_seed: cfg.base_seed,
            quantity: q.into(),
            enumerated: vec![0.0],
            estimated: vec![m],
            se: vec![0.0],
            pass: m >= -1e-9,
        })
        .collect())
}

/// Every suite in a fixed order.
pub fn run_all_suites(cfg: &SuiteConfig, fault: Fault) -> Result<Vec<OracleReport>> {
    let mut out = posterior_suite(cfg, fault)?;
    out.extend(similarity_suite(cfg)?);
    out.extend(attention_mean_suite(cfg, 3)?);
    out.extend(smoe_suite(cfg)?);
    out.extend(bound_suite(cfg)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::mha_forward;
    use crate::moe::{
        attention_aware_smoe, likelihood_matrix, posterior_attention, posterior_head, similarity_aware_scores,
        similarity_matrix, HeadMode, PosteriorConfig, SimilarityConfig,
    };
    use crate::routing::gate_rows;

    const SMALL: InstanceSize = InstanceSize {
        tokens: 3,
        heads: 2,
        experts: 4,
        dim: 2,
        d_qk: 2,
    };

    #[test]
    fn quick_suites_pass_and_fault_is_caught() {
        let cfg = SuiteConfig {
            instances: 2,
            posterior_samples: 20_000,
            chain_samples: 5_000,
            bound_instances: 200,
            z: 4.0,
            ..Default::default()
        };
        let reports = run_all_suites(&cfg, Fault::None).unwrap();
        assert!(reports.iter().all(|r| r.pass), "{reports:?}");
        let faulty = posterior_suite(&cfg, Fault::FlipPosteriorEntry).unwrap();
        assert!(!faulty[0].pass);
    }

    #[test]
    fn bounds_are_enforced() {
        let too_big = InstanceSize { tokens: 6, ..SMALL };
        assert!(matches!(PgmInstance::random(too_big, 0), Err(Error::Refusal(_))));
        let wide = InstanceSize { dim: 5, ..SMALL };
        assert!(matches!(PgmInstance::random(wide, 0), Err(Error::Refusal(_))));
        let inst = PgmInstance::random(SMALL, 0).unwrap();
        let long = random_tensor(&[6, 2], 1);
        assert!(matches!(enumerate_similarity_routing(&long, &inst), Err(Error::Refusal(_))));
    }

    #[test]
    fn loop_quantities_match_model_code() {
        let inst = PgmInstance::random(SMALL, 3).unwrap();
        let att = mha_forward(&inst.x, &inst.attn, inst.mask).unwrap();
        for h in 0..2 {
            let a = inst.attention(h);
            for i in 0..3 {
                for j in 0..3 {
                    assert!((a[i][j] - att.attention[h].at(i, j)).abs() < 1e-12);
                }
            }
        }
        let mean = inst.attention_mean();
        for i in 0..3 {
            for c in 0..2 {
                assert!((mean[i][c] - att.u.at(i, c)).abs() < 1e-12);
            }
        }
        let r = gate_rows(&inst.x, &inst.router).unwrap();
        for i in 0..3 {
            for (k, v) in inst.gate(inst.x.row(i)).iter().enumerate() {
                assert!((v - r.at(i, k)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn enumerated_distributions_sum_to_one() {
        for seed in 0..5 {
            let inst = PgmInstance::random(SMALL, seed).unwrap();
            let u = mha_forward(&inst.x, &inst.attn, inst.mask).unwrap().u;
            for t in [enumerate_expert_posterior(&u, &inst).unwrap(), enumerate_similarity_routing(&u, &inst).unwrap()] {
                for i in 0..3 {
                    assert!((t.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn flat_likelihood_single_head_gives_prior_mixing() {
        let size = InstanceSize { heads: 1, ..SMALL };
        let mut inst = PgmInstance::random(size, 4).unwrap();
        inst.sigma = 1e6;
        let u = mha_forward(&inst.x, &inst.attn, inst.mask).unwrap().u;
        let p = enumerate_expert_posterior(&u, &inst).unwrap();
        let a = inst.attention(0);
        for i in 0..3 {
            for k in 0..4 {
                let want: f64 = (0..3).map(|j| a[i][j] * inst.gate(u.row(j))[k]).sum();
                assert!((p.at(i, k) - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identical_gates_pass_through() {
        let mut inst = PgmInstance::random(SMALL, 5).unwrap();
        inst.router.weight = Tensor::zeros(&[4, 2]);
        let u = random_tensor(&[3, 2], 6);
        let p = enumerate_expert_posterior(&u, &inst).unwrap();
        let r = inst.gate(u.row(0));
        for i in 0..3 {
            for k in 0..4 {
                assert!((p.at(i, k) - r[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn enumeration_matches_full_posterior_combiner() {
        for seed in 0..5 {
            let inst = PgmInstance::random(SMALL, seed).unwrap();
            let pcfg = PosteriorConfig {
                sigma: 1.0,
                head_mode: HeadMode::FullPosterior,
            };
            let out =
                attention_aware_smoe(&inst.x, &inst.attn, inst.mask, &inst.router, &inst.experts, &pcfg, 2).unwrap();
            let u = mha_forward(&inst.x, &inst.attn, inst.mask).unwrap().u;
            let p = enumerate_expert_posterior(&u, &inst).unwrap();
            assert!(out.routing.scores.max_abs_diff(&p) < 1e-8);
            // and against the closed-form pieces
            let logl: Vec<Tensor> =
                inst.attn.value_out.iter().map(|w| likelihood_matrix(&u, &inst.x, w, 1.0).unwrap()).collect();
            let att = mha_forward(&inst.x, &inst.attn, inst.mask).unwrap();
            let hp = posterior_head(&att.attention, &logl).unwrap();
            let r = gate_rows(&u, &inst.router).unwrap();
            let mut want = Tensor::zeros(&[3, 4]);
            for h in 0..2 {
                let m = posterior_attention(&att.attention[h], &logl[h]).unwrap().matmul(&r).unwrap();
                for i in 0..3 {
                    for k in 0..4 {
                        want.set(i, k, want.at(i, k) + hp.at(i, h) * m.at(i, k));
                    }
                }
            }
            assert!(want.max_abs_diff(&p) < 1e-12);
        }
    }

    #[test]
    fn similarity_enumeration_matches_scores() {
        for seed in 0..5 {
            let inst = PgmInstance::random(SMALL, seed).unwrap();
            let u = inst.x.clone();
            let cfg = SimilarityConfig {
                mask_mode: inst.mask,
                ..Default::default()
            };
            let s = similarity_matrix(&u, &cfg).unwrap();
            let p = similarity_aware_scores(&s, &gate_rows(&u, &inst.router).unwrap()).unwrap();
            let q = enumerate_similarity_routing(&u, &inst).unwrap();
            assert!(p.p().max_abs_diff(&q) < 1e-12);
        }
        let inst = PgmInstance::random(SMALL, 9).unwrap();
        let mut sharp = inst.clone();
        sharp.tau = 1e-9;
        let u = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        let q = enumerate_similarity_routing(&u, &sharp).unwrap();
        for i in 0..3 {
            for (k, v) in sharp.gate(u.row(i)).iter().enumerate() {
                assert!((q.at(i, k) - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_hot_gate_is_deterministic() {
        let mut inst = PgmInstance::random(SMALL, 10).unwrap();
        inst.router.weight = Tensor::zeros(&[4, 2]);
        inst.router.bias = Tensor::vector(vec![0.0, 800.0, 0.0, 0.0]);
        let mut r = rng::seeded(1);
        for _ in 0..100 {
            assert_eq!(sample_smoe_chain(&[0.3, 0.2], &inst, &mut r).0, 1);
        }
    }

    #[test]
    fn chains_are_reproducible() {
        let inst = PgmInstance::random(SMALL, 11).unwrap();
        let (mut a, mut b) = (rng::seeded(5), rng::seeded(5));
        for _ in 0..20 {
            assert_eq!(sample_smoe_chain(&[0.1, 0.4], &inst, &mut a), sample_smoe_chain(&[0.1, 0.4], &inst, &mut b));
            assert_eq!(sample_a2mm_chain(&inst, &mut a), sample_a2mm_chain(&inst, &mut b));
        }
    }

    #[test]
    fn similarity_identity_picks_self() {
        let mut inst = PgmInstance::random(SMALL, 12).unwrap();
        inst.tau = 1e-9;
        let u = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        let mut r = rng::seeded(2);
        for _ in 0..50 {
            for i in 0..3 {
                assert_eq!(sample_sam_chain(&u, i, &inst, &mut r).0, i);
            }
        }
    }

    #[test]
    fn degenerate_variance_gives_exact_means() {
        let size = InstanceSize { heads: 1, ..SMALL };
        let mut inst = PgmInstance::random(size, 13).unwrap();
        inst.sigma = 0.0;
        let mut r = rng::seeded(3);
        for _ in 0..20 {
            let d = sample_mam_chain(1, &inst, &mut r);
            assert_eq!(d.u, inst.head_mean(0, d.z));
        }
        assert!(matches!(enumerate_expert_posterior(&inst.x, &inst), Err(Error::Parameter(_))));
    }

    #[test]
    fn single_token_attention_aware_uses_own_gate() {
        let size = InstanceSize { tokens: 1, ..SMALL };
        let inst = PgmInstance::random(size, 14).unwrap();
        let u = random_tensor(&[1, 2], 15);
        let p = enumerate_expert_posterior(&u, &inst).unwrap();
        for (k, v) in inst.gate(u.row(0)).iter().enumerate() {
            assert!((p.at(0, k) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn smoe_chain_mean_matches_mixture() {
        let inst = PgmInstance::random(SMALL, 16).unwrap();
        let u = [0.4, -0.7];
        let mut est = MeanEstimator::new(2);
        let mut r = rng::seeded(4);
        for _ in 0..50_000 {
            est.push(&sample_smoe_chain(&u, &inst, &mut r).1);
        }
        let g = inst.gate(&u);
        let want: Vec<f64> = (0..2).map(|c| (0..4).map(|e| g[e] * inst.expert(e, &u)[c]).sum()).collect();
        let rep = OracleReport::statistical(16, "smoe mean", want, est.mean(), est.se(), 4.0);
        assert!(rep.pass, "{rep:?}");
    }
}
