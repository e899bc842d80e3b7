//! Expert gates and TopK selection.
//!
//! Three gate kinds share one interface:
//!
//! - `softmax_linear`: `r(u) = softmax(W u + b)`
//! - `frozen_random`: same map, but `W ~ N(0, 1/D)` drawn once and never trained
//! - `cosine`: `r(u) = softmax(cos(P u, w_e) / τ_c)` on a `D/4`-dimensional sphere
//!
//! Two TopK formulations are provided. `topk_renormalize` keeps the K largest
//! probabilities and renormalizes them; `topk_neginf_softmax` masks all but the K
//! largest logits with `-inf` before the softmax. Both pick the same indices and
//! produce the same weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::gradcheck::random_tensor;
use crate::numerics::tensor::dot;
use crate::numerics::{stable, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RouterKind {
    #[default]
    SoftmaxLinear,
    Cosine,
    FrozenRandom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams {
    pub kind: RouterKind,
    /// `E×D` for linear kinds, `E×d'` expert embeddings for the cosine kind.
    pub weight: Tensor,
    /// Length `E`; unused by the cosine kind.
    pub bias: Tensor,
    /// Cosine kind only: `d'×D` projection.
    pub projection: Option<Tensor>,
    /// Cosine kind only: temperature `τ_c`.
    pub temperature: f64,
}

impl RouterParams {
    pub fn linear(weight: Tensor, bias: Tensor) -> Result<Self> {
        let p = Self {
            kind: RouterKind::SoftmaxLinear,
            weight,
            bias,
            projection: None,
            temperature: 1.0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn cosine(projection: Tensor, weight: Tensor, temperature: f64) -> Result<Self> {
        let e = weight.rows();
        let p = Self {
            kind: RouterKind::Cosine,
            weight,
            bias: Tensor::zeros(&[e]),
            projection: Some(projection),
            temperature,
        };
        p.validate()?;
        Ok(p)
    }

    /// Random initialization for `kind`; weights have standard deviation `1/sqrt(D)`.
    pub fn random(kind: RouterKind, d_model: usize, experts: usize, seed: u64) -> Self {
        match kind {
            RouterKind::SoftmaxLinear => Self {
                kind,
                weight: random_tensor(&[experts, d_model], seed).scale(1.0 / (d_model as f64).sqrt()),
                bias: Tensor::zeros(&[experts]),
                projection: None,
                temperature: 1.0,
            },
            RouterKind::FrozenRandom => make_frozen_router(d_model, experts, seed),
            RouterKind::Cosine => {
                let dp = cosine_dim(d_model);
                Self {
                    kind,
                    weight: random_tensor(&[experts, dp], seed),
                    bias: Tensor::zeros(&[experts]),
                    projection: Some(
                        random_tensor(&[dp, d_model], seed ^ 0xC05).scale(1.0 / (d_model as f64).sqrt()),
                    ),
                    temperature: 1.0,
                }
            }
        }
    }

    pub fn num_experts(&self) -> usize {
        self.weight.rows()
    }

    pub fn input_dim(&self) -> usize {
        match &self.projection {
            Some(p) => p.cols(),
            None => self.weight.cols(),
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.kind != RouterKind::FrozenRandom
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.weight.rows();
        if e == 0 || self.weight.rank() != 2 {
            return Err(Error::Parameter("router needs at least one expert".into()));
        }
        if self.bias.numel() != e {
            return Err(Error::Dimension(format!("bias has {} entries for {e} experts", self.bias.numel())));
        }
        match (self.kind, &self.projection) {
            (RouterKind::Cosine, Some(p)) => {
                if p.rows() != self.weight.cols() {
                    return Err(Error::Dimension("projection rows must match expert embedding width".into()));
                }
                if !(self.temperature > 0.0) {
                    return Err(Error::Parameter(format!("cosine temperature {}", self.temperature)));
                }
            }
            (RouterKind::Cosine, None) => {
                return Err(Error::Parameter("cosine router without projection".into()));
            }
            (_, Some(_)) => return Err(Error::Parameter("projection only applies to the cosine kind".into())),
            _ => {}
        }
        Ok(())
    }
}

/// Projection width of the cosine router.
pub fn cosine_dim(d_model: usize) -> usize {
    (d_model / 4).max(1)
}

/// `W ~ N(0, 1/D)` from `seed`, `b = 0`, excluded from training.
pub fn make_frozen_router(d_model: usize, experts: usize, seed: u64) -> RouterParams {
    RouterParams {
        kind: RouterKind::FrozenRandom,
        weight: random_tensor(&[experts, d_model], seed).scale(1.0 / (d_model as f64).sqrt()),
        bias: Tensor::zeros(&[experts]),
        projection: None,
        temperature: 1.0,
    }
}

/// `γ = W u + b` for the linear kinds.
pub fn affinity_scores(u: &[f64], params: &RouterParams) -> Result<Tensor> {
    if params.kind == RouterKind::Cosine {
        return Err(Error::Usage("affinity scores are defined for linear routers only".into()));
    }
    if u.len() != params.weight.cols() {
        return Err(Error::Dimension(format!("token width {} vs router width {}", u.len(), params.weight.cols())));
    }
    Ok(Tensor::vector(
        (0..params.num_experts())
            .map(|e| dot(params.weight.row(e), u) + params.bias.data()[e])
            .collect(),
    ))
}

/// Gate probabilities `r(u)` for one token.
pub fn gate(u: &[f64], params: &RouterParams) -> Result<Tensor> {
    let t = Tensor::new(vec![1, u.len()], u.to_vec())?;
    let r = gate_rows(&t, params)?;
    Ok(Tensor::vector(r.into_data()))
}

/// Gate probabilities for every row of `u` (`N×D` → `N×E`).
pub fn gate_rows(u: &Tensor, params: &RouterParams) -> Result<Tensor> {
    params.validate()?;
    if u.cols() != params.input_dim() {
        return Err(Error::Dimension(format!("token width {} vs router width {}", u.cols(), params.input_dim())));
    }
    let mut g = Graph::new();
    let uv = g.constant(u.clone());
    let vars = RouterVars::bind(&mut g, params, false);
    let r = gate_graph(&mut g, uv, &vars)?;
    Ok(g.value(r).clone())
}

/// Router parameters bound to a graph.
#[derive(Debug, Clone)]
pub struct RouterVars {
    pub kind: RouterKind,
    pub weight: Var,
    pub bias: Var,
    pub projection: Option<Var>,
    pub temperature: Option<Var>,
}

impl RouterVars {
    /// Binds `params`; with `trainable` the trainable kinds become differentiable leaves.
    pub fn bind(g: &mut Graph, params: &RouterParams, trainable: bool) -> Self {
        let leaf = |g: &mut Graph, t: &Tensor| {
            if trainable && params.is_trainable() {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let weight = leaf(g, &params.weight);
        let bias = leaf(g, &params.bias);
        let projection = params.projection.as_ref().map(|p| leaf(g, p));
        let temperature = (params.kind == RouterKind::Cosine).then(|| leaf(g, &Tensor::scalar(params.temperature)));
        Self {
            kind: params.kind,
            weight,
            bias,
            projection,
            temperature,
        }
    }
}

/// Differentiable gate over rows of `u`.
pub fn gate_graph(g: &mut Graph, u: Var, vars: &RouterVars) -> Result<Var> {
    let logits = match vars.kind {
        RouterKind::SoftmaxLinear | RouterKind::FrozenRandom => {
            let z = g.matmul_nt(u, vars.weight)?;
            g.add_bias(z, vars.bias)?
        }
        RouterKind::Cosine => {
            let proj = vars
                .projection
                .ok_or_else(|| Error::Parameter("cosine router without projection".into()))?;
            let tau = vars
                .temperature
                .ok_or_else(|| Error::Parameter("cosine router without temperature".into()))?;
            let pu = g.matmul_nt(u, proj)?;
            let pu = g.l2_normalize_rows(pu);
            let w = g.l2_normalize_rows(vars.weight);
            let cos = g.matmul_nt(pu, w)?;
            g.div_scalar(cos, tau)?
        }
    };
    Ok(g.softmax(logits, false))
}

/// Sparse expert choice for one token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseSelection {
    /// Selected expert ids, by descending score then ascending id.
    pub indices: Vec<usize>,
    /// Renormalized weights aligned with `indices`.
    pub weights: Vec<f64>,
    /// The full pre-selection distribution.
    pub dense_scores: Vec<f64>,
}

/// Indices of the `min(k, len)` largest scores, by descending score then ascending index.
pub fn topk_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k.min(scores.len()));
    idx
}

/// TopK of a probability vector followed by renormalization.
pub fn topk_renormalize(r: &[f64], k: usize) -> Result<SparseSelection> {
    if k < 1 {
        return Err(Error::Parameter("K must be at least 1".into()));
    }
    let indices = topk_indices(r, k);
    let z: f64 = indices.iter().map(|&i| r[i]).sum();
    if !(z > 0.0) {
        return Err(Error::Validation("selected experts carry no probability mass".into()));
    }
    Ok(SparseSelection {
        weights: indices.iter().map(|&i| r[i] / z).collect(),
        indices,
        dense_scores: r.to_vec(),
    })
}

/// Softmax over logits with everything outside the top K set to `-inf`.
pub fn topk_neginf_softmax(gamma: &[f64], k: usize) -> Result<SparseSelection> {
    if k < 1 {
        return Err(Error::Parameter("K must be at least 1".into()));
    }
    let indices = topk_indices(gamma, k);
    let mut masked = vec![f64::NEG_INFINITY; gamma.len()];
    for &i in &indices {
        masked[i] = gamma[i];
    }
    stable::softmax_in_place(&mut masked);
    let mut dense = gamma.to_vec();
    stable::softmax_in_place(&mut dense);
    Ok(SparseSelection {
        weights: indices.iter().map(|&i| masked[i]).collect(),
        indices,
        dense_scores: dense,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::max_relative_error;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn linear(e: usize, d: usize, seed: u64) -> RouterParams {
        RouterParams::linear(random_tensor(&[e, d], seed), random_tensor(&[e], seed + 1)).unwrap()
    }

    #[test]
    fn affinity_zero_and_identity() {
        let zero = RouterParams::linear(Tensor::zeros(&[3, 2]), Tensor::zeros(&[3])).unwrap();
        assert_eq!(affinity_scores(&[1.0, -2.0], &zero).unwrap().data(), &[0.0; 3]);
        let id = RouterParams::linear(Tensor::identity(3), Tensor::zeros(&[3])).unwrap();
        assert_eq!(affinity_scores(&[1.0, 0.0, 0.0], &id).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn affinity_matches_scalar_loop() {
        let p = linear(4, 5, 3);
        let u = random_tensor(&[5], 9);
        let got = affinity_scores(u.data(), &p).unwrap();
        for e in 0..4 {
            let mut s = p.bias.data()[e];
            for c in 0..5 {
                s += p.weight.at(e, c) * u.data()[c];
            }
            assert!((got.data()[e] - s).abs() < 1e-14);
        }
    }

    #[test]
    fn affinity_rejects_cosine_kind() {
        let p = RouterParams::random(RouterKind::Cosine, 8, 3, 1);
        assert!(matches!(affinity_scores(&[0.0; 8], &p), Err(Error::Usage(_))));
    }

    #[test]
    fn gate_equal_logits_is_uniform() {
        let p = RouterParams::linear(Tensor::zeros(&[4, 2]), Tensor::filled(&[4], 0.7)).unwrap();
        assert!(gate(&[0.3, 0.1], &p).unwrap().data().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn gate_ln2_case() {
        let p = RouterParams::linear(Tensor::zeros(&[2, 1]), Tensor::vector(vec![0.0, 2f64.ln()])).unwrap();
        let r = gate(&[5.0], &p).unwrap();
        assert!((r.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.data()[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_gate_sharpens_to_parallel_expert() {
        let d = 8;
        let proj = Tensor::from_fn(2, d, |i, j| if i == j { 1.0 } else { 0.0 });
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]]).unwrap();
        let p = RouterParams::cosine(proj, w, 1e-3).unwrap();
        let mut u = vec![0.0; d];
        u[0] = 2.5;
        let r = gate(&u, &p).unwrap();
        assert!((r.data()[0] - 1.0).abs() < 1e-12);
        // zero token: every cosine is 0, so the gate is uniform
        let r0 = gate(&vec![0.0; d], &p).unwrap();
        assert!(r0.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn topk_renormalize_cases() {
        let r = [0.5, 0.3, 0.2];
        let s = topk_renormalize(&r, 5).unwrap();
        assert_eq!(s.indices, vec![0, 1, 2]);
        assert_eq!(s.weights, r.to_vec());
        let s = topk_renormalize(&r, 2).unwrap();
        assert_eq!(s.indices, vec![0, 1]);
        assert!((s.weights[0] - 0.625).abs() < 1e-15 && (s.weights[1] - 0.375).abs() < 1e-15);
        let s = topk_renormalize(&[0.25; 4], 1).unwrap();
        assert_eq!((s.indices, s.weights), (vec![0], vec![1.0]));
        assert!(matches!(topk_renormalize(&r, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn topk_neginf_cases() {
        let g = [5f64.ln(), 3f64.ln(), 2f64.ln()];
        let s = topk_neginf_softmax(&g, 2).unwrap();
        assert_eq!(s.indices, vec![0, 1]);
        assert!((s.weights[0] - 5.0 / 8.0).abs() < 1e-15);
        assert!((s.weights[1] - 3.0 / 8.0).abs() < 1e-15);
        let full = topk_neginf_softmax(&g, 3).unwrap();
        let mut sm = g.to_vec();
        stable::softmax_in_place(&mut sm);
        for (a, b) in full.weights.iter().zip(&sm) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(topk_neginf_softmax(&g, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn topk_formulations_agree_on_random_cases() {
        let mut r = rng::seeded(42);
        for _ in 0..1000 {
            let e = r.random_range(1..=16);
            let k = r.random_range(1..=e + 2);
            let gamma: Vec<f64> = (0..e).map(|_| r.random_range(-8.0..8.0)).collect();
            let mut p = gamma.clone();
            stable::softmax_in_place(&mut p);
            let a = topk_renormalize(&p, k).unwrap();
            let b = topk_neginf_softmax(&gamma, k).unwrap();
            assert_eq!(a.indices, b.indices);
            for (x, y) in a.weights.iter().zip(&b.weights) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frozen_router_is_seeded() {
        let a = make_frozen_router(6, 4, 3);
        let b = make_frozen_router(6, 4, 3);
        let c = make_frozen_router(6, 4, 4);
        assert_eq!(a.weight.data(), b.weight.data());
        assert!(a.weight.data().iter().zip(c.weight.data()).any(|(x, y)| x != y));
        assert!(a.bias.data().iter().all(|&v| v == 0.0));
        assert!(!a.is_trainable());
    }

    #[test]
    fn frozen_router_binds_as_constants() {
        let p = make_frozen_router(4, 3, 1);
        let mut g = Graph::new();
        let vars = RouterVars::bind(&mut g, &p, true);
        assert!(!g.requires_grad(vars.weight));
        assert!(!g.requires_grad(vars.bias));
    }

    #[test]
    fn cosine_gate_gradients() {
        let p = RouterParams::random(RouterKind::Cosine, 8, 3, 5);
        let u = random_tensor(&[4, 8], 6);
        let probe = random_tensor(&[4, 3], 7);
        let inputs = vec![u, p.projection.clone().unwrap(), p.weight.clone(), Tensor::scalar(0.8)];
        let err = max_relative_error(&inputs, |g, v| {
            let vars = RouterVars {
                kind: RouterKind::Cosine,
                weight: v[2],
                bias: v[2],
                projection: Some(v[1]),
                temperature: Some(v[3]),
            };
            let r = gate_graph(g, v[0], &vars)?;
            let w = g.constant(probe.clone());
            let y = g.mul(r, w)?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    proptest! {
        #[test]
        fn gate_is_shift_invariant(u in prop::collection::vec(-3.0f64..3.0, 4), c in -20.0f64..20.0, seed in 0u64..1000) {
            let p = linear(5, 4, seed);
            let shifted = RouterParams::linear(p.weight.clone(), p.bias.map(|b| b + c)).unwrap();
            let a = gate(&u, &p).unwrap();
            let b = gate(&u, &shifted).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
            prop_assert!((a.sum() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn selection_has_min_k_e_positive_entries(raw in prop::collection::vec(-5.0f64..5.0, 1..12), k in 1usize..14) {
            let mut p = raw.clone();
            stable::softmax_in_place(&mut p);
            let s = topk_renormalize(&p, k).unwrap();
            prop_assert_eq!(s.indices.len(), k.min(raw.len()));
            prop_assert!(s.weights.iter().all(|&w| w > 0.0));
            prop_assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn argmax_stable_under_positive_scaling(u in prop::collection::vec(-3.0f64..3.0, 4), c in 0.01f64..100.0, seed in 0u64..1000) {
            let p = RouterParams::linear(random_tensor(&[5, 4], seed), Tensor::zeros(&[5])).unwrap();
            let a = affinity_scores(&u, &p).unwrap();
            let scaled: Vec<f64> = u.iter().map(|v| v * c).collect();
            let b = affinity_scores(&scaled, &p).unwrap();
            prop_assert_eq!(topk_indices(a.data(), 1), topk_indices(b.data(), 1));
        }
    }
}
