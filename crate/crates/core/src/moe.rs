//! Expert networks and the output combiners.
//!
//! Every combiner scores experts per token, optionally mixes those scores across
//! tokens with a row-stochastic matrix `M`, keeps the top K mixed scores and
//! renormalizes them, then sums the selected expert outputs:
//!
//! ```text
//! R    = r(U)                      per-token gate, N×E
//! P    = M · R                     M = I (baseline), S (similarity), A^p_h* (attention)
//! o_i  = Σ_{e ∈ TopK(P_i)} w_ie · g_e(u_i)
//! ```
//!
//! The similarity matrix is `S = softmax(U W_s Uᵀ / τ)`. The posterior attention of
//! head `h` reweights its prior `A_h` by the Gaussian likelihood of the observed
//! attention output under each position's value mean:
//!
//! ```text
//! L_h[i,j]   = N(u_i | W_h x_j, σ² I)
//! A^p_h[i,j] ∝ A_h[i,j] · L_h[i,j]
//! H^p[i,h]   ∝ Σ_j A_h[i,j] · L_h[i,j]
//! ```
//!
//! Everything is computed in the log domain. Expert ids are zero-based.

use serde::{Deserialize, Serialize};

use crate::attention::{
    mha_graph, select_min_entropy_head, AttentionParams, AttentionVars, GraphAttention, MaskMode,
};
use crate::error::{Error, Result};
use crate::numerics::gradcheck::random_tensor;
use crate::numerics::tensor::dot;
use crate::numerics::{stable, Graph, Tensor, Var};
use crate::routing::{gate_graph, topk_indices, RouterParams, RouterVars};

/// Two-layer feed-forward experts `g_e(u) = W2 silu(W1 u + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    /// `d_ff×D` per expert.
    pub w1: Vec<Tensor>,
    pub b1: Vec<Tensor>,
    /// `D×d_ff` per expert.
    pub w2: Vec<Tensor>,
    pub b2: Vec<Tensor>,
}

impl ExpertParams {
    pub fn new(w1: Vec<Tensor>, b1: Vec<Tensor>, w2: Vec<Tensor>, b2: Vec<Tensor>) -> Result<Self> {
        let p = Self { w1, b1, w2, b2 };
        p.validate()?;
        Ok(p)
    }

    /// Gaussian weights scaled by fan-in, zero biases.
    pub fn random(experts: usize, d_model: usize, d_ff: usize, seed: u64) -> Self {
        let mut w1 = Vec::with_capacity(experts);
        let mut w2 = Vec::with_capacity(experts);
        for e in 0..experts as u64 {
            let s = seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(2 * e);
            w1.push(random_tensor(&[d_ff, d_model], s).scale(1.0 / (d_model as f64).sqrt()));
            w2.push(random_tensor(&[d_model, d_ff], s + 1).scale(1.0 / (d_ff as f64).sqrt()));
        }
        Self {
            w1,
            b1: vec![Tensor::zeros(&[d_ff]); experts],
            w2,
            b2: vec![Tensor::zeros(&[d_model]); experts],
        }
    }

    pub fn num_experts(&self) -> usize {
        self.w1.len()
    }

    pub fn d_model(&self) -> usize {
        self.w1.first().map_or(0, |w| w.cols())
    }

    pub fn d_ff(&self) -> usize {
        self.w1.first().map_or(0, |w| w.rows())
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.w1.len();
        if e == 0 || self.b1.len() != e || self.w2.len() != e || self.b2.len() != e {
            return Err(Error::Parameter("experts need matching, nonempty parameter lists".into()));
        }
        let (d, f) = (self.d_model(), self.d_ff());
        for i in 0..e {
            if self.w1[i].shape() != [f, d]
                || self.b1[i].numel() != f
                || self.w2[i].shape() != [d, f]
                || self.b2[i].numel() != d
            {
                return Err(Error::Dimension(format!("expert {i} does not share (D, d_ff) = ({d}, {f})")));
            }
        }
        Ok(())
    }
}

fn silu(x: f64) -> f64 {
    if x >= 0.0 {
        x / (1.0 + (-x).exp())
    } else {
        let z = x.exp();
        x * z / (1.0 + z)
    }
}

/// Output of expert `e` on a single token.
pub fn expert_forward(e: usize, u: &[f64], experts: &ExpertParams) -> Result<Tensor> {
    if e >= experts.num_experts() {
        return Err(Error::Range(format!("expert {e} of {}", experts.num_experts())));
    }
    if u.len() != experts.d_model() {
        return Err(Error::Dimension(format!("token width {} vs expert width {}", u.len(), experts.d_model())));
    }
    let hidden: Vec<f64> = (0..experts.d_ff())
        .map(|k| silu(dot(experts.w1[e].row(k), u) + experts.b1[e].data()[k]))
        .collect();
    Ok(Tensor::vector(
        (0..u.len())
            .map(|c| dot(experts.w2[e].row(c), &hidden) + experts.b2[e].data()[c])
            .collect(),
    ))
}

/// Expert parameters bound to a graph.
#[derive(Debug, Clone)]
pub struct ExpertVars {
    pub w1: Vec<Var>,
    pub b1: Vec<Var>,
    pub w2: Vec<Var>,
    pub b2: Vec<Var>,
}

impl ExpertVars {
    pub fn bind(g: &mut Graph, p: &ExpertParams, trainable: bool) -> Self {
        let mut leaf = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        Self {
            w1: p.w1.iter().map(&mut leaf).collect(),
            b1: p.b1.iter().map(&mut leaf).collect(),
            w2: p.w2.iter().map(&mut leaf).collect(),
            b2: p.b2.iter().map(&mut leaf).collect(),
        }
    }

    pub fn num_experts(&self) -> usize {
        self.w1.len()
    }
}

/// Expert `e` applied to every row of `u`.
pub fn expert_graph(g: &mut Graph, u: Var, vars: &ExpertVars, e: usize) -> Result<Var> {
    let h = g.matmul_nt(u, vars.w1[e])?;
    let h = g.add_bias(h, vars.b1[e])?;
    let h = g.silu(h);
    let y = g.matmul_nt(h, vars.w2[e])?;
    g.add_bias(y, vars.b2[e])
}

/// `Σ_e P[:,e] · g_e(U)`; every expert sees every token.
pub fn combine_dense(g: &mut Graph, u: Var, vars: &ExpertVars, p: Var) -> Result<Var> {
    let n = g.value(u).rows();
    let mut parts = Vec::with_capacity(vars.num_experts());
    for e in 0..vars.num_experts() {
        let y = expert_graph(g, u, vars, e)?;
        let idx: Vec<(usize, usize)> = (0..n).map(|i| (i, e)).collect();
        let w = g.gather_elems(p, &idx)?;
        parts.push(g.mul_rows(y, w)?);
    }
    g.sum_n(&parts)
}

/// Sparse combination. Row `i` sums `weights[i,k] · g_{sel[i][k]}(u_i)`, and each
/// expert runs only on the tokens that selected it. Returns the output and the
/// number of token-expert evaluations performed.
pub fn combine_sparse(
    g: &mut Graph,
    u: Var,
    vars: &ExpertVars,
    selections: &[Vec<usize>],
    weights: Var,
) -> Result<(Var, usize)> {
    let n = g.value(u).rows();
    if selections.len() != n {
        return Err(Error::Dimension(format!("{} selections for {n} tokens", selections.len())));
    }
    let mut parts = Vec::new();
    let mut evaluations = 0;
    for e in 0..vars.num_experts() {
        let mut rows = Vec::new();
        let mut slots = Vec::new();
        for (i, sel) in selections.iter().enumerate() {
            if let Some(k) = sel.iter().position(|&x| x == e) {
                rows.push(i);
                slots.push((i, k));
            }
        }
        if rows.is_empty() {
            continue;
        }
        let ue = g.gather_rows(u, &rows)?;
        let y = expert_graph(g, ue, vars, e)?;
        evaluations += rows.len();
        let w = g.gather_elems(weights, &slots)?;
        let y = g.mul_rows(y, w)?;
        parts.push(g.scatter_rows(y, &rows, n)?);
    }
    Ok((g.sum_n(&parts)?, evaluations))
}

/// How the attention-aware combiner uses its heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Mix with the posterior of the single head whose attention rows have the lowest mean entropy.
    #[default]
    MinEntropyOnly,
    /// Mix with every head's posterior weighted by its responsibility `H^p`.
    FullPosterior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityConfig {
    /// `W_s`; `None` is the identity.
    pub w_s: Option<Tensor>,
    pub tau: f64,
    pub mask_mode: MaskMode,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            w_s: None,
            tau: 1.0,
            mask_mode: MaskMode::Causal,
        }
    }
}

impl SimilarityConfig {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Parameter(format!("similarity temperature {}", self.tau)));
        }
        if let Some(w) = &self.w_s {
            if w.shape() != [d_model, d_model] {
                return Err(Error::Dimension(format!("W_s shape {:?} for D={d_model}", w.shape())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorConfig {
    pub sigma: f64,
    pub head_mode: HeadMode,
}

impl Default for PosteriorConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            head_mode: HeadMode::MinEntropyOnly,
        }
    }
}

impl PosteriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::Parameter(format!("likelihood sigma {}", self.sigma)));
        }
        Ok(())
    }
}

/// Per-token expert-selection distributions after mixing.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedScores {
    p: Tensor,
}

impl MixedScores {
    pub fn new(p: Tensor) -> Result<Self> {
        for i in 0..p.rows() {
            stable::validate_distribution(p.row(i), 1e-9)?;
        }
        Ok(Self { p })
    }

    pub fn p(&self) -> &Tensor {
        &self.p
    }

    pub fn into_tensor(self) -> Tensor {
        self.p
    }
}

/// Routing decisions of one MoE layer over a set of tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRouting {
    /// Dense gate `R` (baseline) or mixed scores `P`, `N×E`.
    pub scores: Tensor,
    /// Selected experts per token, by descending score.
    pub selected: Vec<Vec<usize>>,
    /// Renormalized weights aligned with `selected`, `N×K`.
    pub weights: Tensor,
    /// Mixing head of the attention-aware combiner in min-entropy mode.
    pub h_star: Option<usize>,
}

/// Cross-token mixing applied to the gate before selection.
#[derive(Debug, Clone, Copy)]
pub enum Mixing<'a> {
    /// `P = R`.
    None,
    /// `P = M R` for a given segmented row-stochastic `M`.
    Matrix(Var),
    /// `P = S R` with `S = softmax(U W_s Uᵀ / τ)`.
    Similarity {
        w_s: Option<Var>,
        tau: f64,
        mask: MaskMode,
    },
    /// `P = A^p R` using posterior attention of the given attention block.
    Attention {
        attention: &'a GraphAttention,
        sigma: f64,
        head_mode: HeadMode,
        mask: MaskMode,
    },
}

/// Graph handles produced by [`moe_layer_graph`].
#[derive(Debug, Clone)]
pub struct MoeLayerGraph {
    pub output: Var,
    /// Dense gate `R`.
    pub gate: Var,
    /// Scores `P` that selection was made on.
    pub scores: Var,
    pub weights: Var,
    pub selected: Vec<Vec<usize>>,
    pub h_star: Option<usize>,
    pub expert_evaluations: usize,
}

impl MoeLayerGraph {
    pub fn routing(&self, g: &Graph) -> LayerRouting {
        LayerRouting {
            scores: g.value(self.scores).clone(),
            selected: self.selected.clone(),
            weights: g.value(self.weights).clone(),
            h_star: self.h_star,
        }
    }
}

/// `softmax(U W_s Uᵀ / τ)` per segment.
pub fn similarity_graph(g: &mut Graph, u: Var, w_s: Option<Var>, tau: f64, seg: usize, mask: MaskMode) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("similarity temperature {tau}")));
    }
    let left = match w_s {
        Some(w) => g.matmul(u, w)?,
        None => u,
    };
    let logits = g.seg_matmul_nt(left, u, seg)?;
    let logits = g.scale(logits, 1.0 / tau);
    Ok(g.softmax(logits, mask.is_causal()))
}

/// Posterior-attention mixing `P`. Per-row constants (the prior's normalizer and
/// the Gaussian's) cancel inside the softmaxes, so only `-‖u_i − W_h x_j‖²/(2σ²)`
/// is added to the prior logits.
fn posterior_mixing(
    g: &mut Graph,
    att: &GraphAttention,
    r: Var,
    sigma: f64,
    head_mode: HeadMode,
    seg: usize,
    mask: MaskMode,
) -> Result<(Var, Option<usize>)> {
    if !(sigma > 0.0) {
        return Err(Error::Parameter(format!("likelihood sigma {sigma}")));
    }
    let causal = mask.is_causal();
    let coef = -1.0 / (2.0 * sigma * sigma);
    let post_logits = |g: &mut Graph, h: usize| -> Result<Var> {
        let d = g.sq_dist_seg(att.output, att.values[h], seg)?;
        let logl = g.scale(d, coef);
        g.add(att.logits[h], logl)
    };
    match head_mode {
        HeadMode::MinEntropyOnly => {
            let priors: Vec<Tensor> = att.attention.iter().map(|&a| g.value(a).clone()).collect();
            let h = select_min_entropy_head(&priors)?;
            let z = post_logits(g, h)?;
            let ap = g.softmax(z, causal);
            Ok((g.seg_matmul(ap, r, seg)?, Some(h)))
        }
        HeadMode::FullPosterior => {
            let heads = att.attention.len();
            let n = g.value(r).rows();
            let mut log_resp = Vec::with_capacity(heads);
            let mut mixed = Vec::with_capacity(heads);
            for h in 0..heads {
                let z = post_logits(g, h)?;
                let num = g.logsumexp_rows(z, causal);
                let den = g.logsumexp_rows(att.logits[h], causal);
                log_resp.push(g.sub(num, den)?);
                let ap = g.softmax(z, causal);
                mixed.push(g.seg_matmul(ap, r, seg)?);
            }
            let lw = g.concat_cols(&log_resp)?;
            let resp = g.softmax(lw, false);
            let mut parts = Vec::with_capacity(heads);
            for (h, m) in mixed.into_iter().enumerate() {
                let idx: Vec<(usize, usize)> = (0..n).map(|i| (i, h)).collect();
                let w = g.gather_elems(resp, &idx)?;
                parts.push(g.mul_rows(m, w)?);
            }
            Ok((g.sum_n(&parts)?, None))
        }
    }
}

/// One sparse MoE layer over `seg`-length sequences stacked in `u`.
pub fn moe_layer_graph(
    g: &mut Graph,
    u: Var,
    seg: usize,
    router: &RouterVars,
    experts: &ExpertVars,
    mixing: Mixing<'_>,
    k: usize,
) -> Result<MoeLayerGraph> {
    let e = experts.num_experts();
    if k < 1 || k > e {
        return Err(Error::Parameter(format!("K={k} must lie in 1..={e}")));
    }
    let r = gate_graph(g, u, router)?;
    let (p, h_star) = match mixing {
        Mixing::None => (r, None),
        Mixing::Matrix(m) => (g.seg_matmul(m, r, seg)?, None),
        Mixing::Similarity { w_s, tau, mask } => {
            let s = similarity_graph(g, u, w_s, tau, seg, mask)?;
            (g.seg_matmul(s, r, seg)?, None)
        }
        Mixing::Attention {
            attention,
            sigma,
            head_mode,
            mask,
        } => posterior_mixing(g, attention, r, sigma, head_mode, seg, mask)?,
    };
    let pv = g.value(p);
    let selected: Vec<Vec<usize>> = (0..pv.rows()).map(|i| topk_indices(pv.row(i), k)).collect();
    let weights = g.topk_renorm(p, selected.clone())?;
    let (output, expert_evaluations) = combine_sparse(g, u, experts, &selected, weights)?;
    Ok(MoeLayerGraph {
        output,
        gate: r,
        scores: p,
        weights,
        selected,
        h_star,
        expert_evaluations,
    })
}

/// Result of a standalone sparse combiner.
#[derive(Debug, Clone)]
pub struct MoeOutput {
    pub output: Tensor,
    pub routing: LayerRouting,
    /// Token-expert evaluations performed; at most `N·K`.
    pub expert_evaluations: usize,
}

fn check_tokens(u: &Tensor, router: &RouterParams, experts: &ExpertParams) -> Result<()> {
    router.validate()?;
    experts.validate()?;
    if u.rank() != 2 || u.rows() == 0 {
        return Err(Error::EmptyInput(format!("token matrix shape {:?}", u.shape())));
    }
    if u.cols() != experts.d_model() || u.cols() != router.input_dim() {
        return Err(Error::Dimension(format!(
            "token width {} vs expert width {} and router width {}",
            u.cols(),
            experts.d_model(),
            router.input_dim()
        )));
    }
    if router.num_experts() != experts.num_experts() {
        return Err(Error::Dimension(format!(
            "router scores {} experts but {} exist",
            router.num_experts(),
            experts.num_experts()
        )));
    }
    Ok(())
}

fn run_layer(
    u: &Tensor,
    router: &RouterParams,
    experts: &ExpertParams,
    k: usize,
    mixing: impl FnOnce(&mut Graph, Var) -> Result<Mixing<'static>>,
) -> Result<MoeOutput> {
    check_tokens(u, router, experts)?;
    let mut g = Graph::new();
    let uv = g.constant(u.clone());
    let rv = RouterVars::bind(&mut g, router, false);
    let ev = ExpertVars::bind(&mut g, experts, false);
    let m = mixing(&mut g, uv)?;
    let layer = moe_layer_graph(&mut g, uv, u.rows(), &rv, &ev, m, k)?;
    Ok(MoeOutput {
        output: g.value(layer.output).clone(),
        routing: layer.routing(&g),
        expert_evaluations: layer.expert_evaluations,
    })
}

/// Dense mixture `Σ_e r_e(u_i) g_e(u_i)`.
pub fn moe_dense(u: &Tensor, router: &RouterParams, experts: &ExpertParams) -> Result<Tensor> {
    check_tokens(u, router, experts)?;
    let mut g = Graph::new();
    let uv = g.constant(u.clone());
    let rv = RouterVars::bind(&mut g, router, false);
    let ev = ExpertVars::bind(&mut g, experts, false);
    let r = gate_graph(&mut g, uv, &rv)?;
    let out = combine_dense(&mut g, uv, &ev, r)?;
    Ok(g.value(out).clone())
}

/// Baseline sparse mixture over `TopK(r(u_i))`.
pub fn smoe_forward(u: &Tensor, router: &RouterParams, experts: &ExpertParams, k: usize) -> Result<MoeOutput> {
    run_layer(u, router, experts, k, |_, _| Ok(Mixing::None))
}

/// Sparse mixture over `TopK(M · r(U))` for a given row-stochastic `M` (`N×N`).
pub fn mixed_smoe(
    u: &Tensor,
    m: &Tensor,
    router: &RouterParams,
    experts: &ExpertParams,
    k: usize,
) -> Result<MoeOutput> {
    let n = u.rows();
    if m.shape() != [n, n] {
        return Err(Error::Dimension(format!("mixing matrix {:?} for {n} tokens", m.shape())));
    }
    MixedScores::new(m.clone())?;
    run_layer(u, router, experts, k, |g, _| Ok(Mixing::Matrix(g.constant(m.clone()))))
}

/// `S = softmax(U W_s Uᵀ / τ)` for a single sequence.
pub fn similarity_matrix(u: &Tensor, cfg: &SimilarityConfig) -> Result<Tensor> {
    cfg.validate(u.cols())?;
    if u.rank() != 2 || u.rows() == 0 {
        return Err(Error::EmptyInput(format!("token matrix shape {:?}", u.shape())));
    }
    let mut g = Graph::new();
    let uv = g.constant(u.clone());
    let w = cfg.w_s.as_ref().map(|w| g.constant(w.clone()));
    let s = similarity_graph(&mut g, uv, w, cfg.tau, u.rows(), cfg.mask_mode)?;
    Ok(g.value(s).clone())
}

fn mix_rows(m: &Tensor, r: &Tensor, what: &str) -> Result<MixedScores> {
    if m.rank() != 2 || r.rank() != 2 || m.cols() != r.rows() {
        return Err(Error::Dimension(format!(
            "{what}: {:?} cannot mix {:?}",
            m.shape(),
            r.shape()
        )));
    }
    for i in 0..m.rows() {
        stable::validate_distribution(m.row(i), 1e-9)?;
    }
    for i in 0..r.rows() {
        stable::validate_distribution(r.row(i), 1e-9)?;
    }
    MixedScores::new(m.matmul(r)?)
}

/// `P = S · R`.
pub fn similarity_aware_scores(s: &Tensor, r: &Tensor) -> Result<MixedScores> {
    mix_rows(s, r, "similarity")
}

/// Similarity-aware sparse mixture for a single sequence.
pub fn similarity_aware_smoe(
    u: &Tensor,
    router: &RouterParams,
    experts: &ExpertParams,
    cfg: &SimilarityConfig,
    k: usize,
) -> Result<MoeOutput> {
    cfg.validate(u.cols())?;
    run_layer(u, router, experts, k, |g, _| {
        Ok(Mixing::Similarity {
            w_s: cfg.w_s.as_ref().map(|w| g.constant(w.clone())),
            tau: cfg.tau,
            mask: cfg.mask_mode,
        })
    })
}

/// `L_h[i,j] = log N(u_i | W_h x_j, σ² I)`.
pub fn likelihood_matrix(u: &Tensor, x: &Tensor, w_h: &Tensor, sigma: f64) -> Result<Tensor> {
    if u.rank() != 2 || x.rank() != 2 || u.rows() != x.rows() {
        return Err(Error::Dimension(format!("U {:?} vs X {:?}", u.shape(), x.shape())));
    }
    let means = x.matmul(&w_h.transpose())?;
    let n = u.rows();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, stable::log_gaussian_isotropic(u.row(i), means.row(j), sigma)?);
        }
    }
    Ok(out)
}

fn check_pair(a: &Tensor, logl: &Tensor) -> Result<()> {
    if a.rank() != 2 || a.shape() != logl.shape() {
        return Err(Error::Dimension(format!("A {:?} vs log L {:?}", a.shape(), logl.shape())));
    }
    for i in 0..a.rows() {
        if a.row(i).iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Validation(format!("attention row {i} has a negative entry")));
        }
    }
    Ok(())
}

fn log_product_row(a: &[f64], logl: &[f64]) -> Vec<f64> {
    a.iter()
        .zip(logl)
        .map(|(&p, &l)| if p > 0.0 { p.ln() + l } else { f64::NEG_INFINITY })
        .collect()
}

/// `A^p[i,j] = A[i,j] L[i,j] / Σ_j' A[i,j'] L[i,j']`. Zero prior entries stay zero.
pub fn posterior_attention(a: &Tensor, logl: &Tensor) -> Result<Tensor> {
    check_pair(a, logl)?;
    let mut out = Tensor::zeros(a.shape());
    for i in 0..a.rows() {
        let mut row = log_product_row(a.row(i), logl.row(i));
        if row.iter().all(|&v| v == f64::NEG_INFINITY) {
            return Err(Error::DegenerateRow { row: i });
        }
        stable::softmax_in_place(&mut row);
        out.row_mut(i).copy_from_slice(&row);
    }
    Ok(out)
}

/// Head responsibilities `H^p[i,h] ∝ (1/H) Σ_j A_h[i,j] L_h[i,j]`, `N×H`.
pub fn posterior_head(a: &[Tensor], logl: &[Tensor]) -> Result<Tensor> {
    if a.is_empty() || a.len() != logl.len() {
        return Err(Error::Dimension(format!("{} attention maps, {} likelihoods", a.len(), logl.len())));
    }
    for (ah, lh) in a.iter().zip(logl) {
        check_pair(ah, lh)?;
        if ah.shape() != a[0].shape() {
            return Err(Error::Dimension("heads disagree on token count".into()));
        }
    }
    let (n, heads) = (a[0].rows(), a.len());
    let prior = -(heads as f64).ln();
    let mut out = Tensor::zeros(&[n, heads]);
    for i in 0..n {
        let mut row: Vec<f64> = (0..heads)
            .map(|h| prior + stable::logsumexp(&log_product_row(a[h].row(i), logl[h].row(i))))
            .collect();
        if row.iter().all(|&v| v == f64::NEG_INFINITY) {
            return Err(Error::DegenerateRow { row: i });
        }
        stable::softmax_in_place(&mut row);
        out.row_mut(i).copy_from_slice(&row);
    }
    Ok(out)
}

/// `P = A^p · R`.
pub fn attention_aware_scores(apost: &Tensor, r: &Tensor) -> Result<MixedScores> {
    mix_rows(apost, r, "posterior attention")
}

/// Attention-aware sparse mixture for a single sequence: `U = MHA(X)` is routed
/// with scores mixed by posterior attention, and experts run on `U`.
pub fn attention_aware_smoe(
    x: &Tensor,
    attn: &AttentionParams,
    mask: MaskMode,
    router: &RouterParams,
    experts: &ExpertParams,
    pcfg: &PosteriorConfig,
    k: usize,
) -> Result<MoeOutput> {
    pcfg.validate()?;
    attn.validate()?;
    if x.rank() != 2 || x.rows() == 0 {
        return Err(Error::EmptyInput(format!("input shape {:?}", x.shape())));
    }
    if x.cols() != attn.d_model() {
        return Err(Error::Dimension(format!("input width {} vs model width {}", x.cols(), attn.d_model())));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let av = AttentionVars::constants(&mut g, attn);
    let att = mha_graph(&mut g, xv, &av, x.rows(), mask)?;
    check_tokens(g.value(att.output), router, experts)?;
    let rv = RouterVars::bind(&mut g, router, false);
    let ev = ExpertVars::bind(&mut g, experts, false);
    let mixing = Mixing::Attention {
        attention: &att,
        sigma: pcfg.sigma,
        head_mode: pcfg.head_mode,
        mask,
    };
    let layer = moe_layer_graph(&mut g, att.output, x.rows(), &rv, &ev, mixing, k)?;
    Ok(MoeOutput {
        output: g.value(layer.output).clone(),
        routing: layer.routing(&g),
        expert_evaluations: layer.expert_evaluations,
    })
}
