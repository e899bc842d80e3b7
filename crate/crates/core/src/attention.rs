//! Multi-head self-attention that keeps every head's attention matrix.
//!
//! Each head `h` owns a query map `W_Q,h`, a key map `W_K,h` (both `D_qk×D`) and a
//! single merged value-output map `W_h` (`D×D`). The output averages heads:
//!
//! ```text
//! A_h  = softmax(X W_Q,hᵀ W_K,h Xᵀ / sqrt(D_qk))
//! U[i] = (1/H) Σ_h Σ_j A_h[i,j] · W_h x_j
//! ```
//!
//! Head indices are zero-based throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::gradcheck::random_tensor;
use crate::numerics::{stable, Graph, Tensor, Var};

/// Which key positions a query may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Token `i` attends to positions `0..=i`.
    #[default]
    Causal,
    Full,
}

impl MaskMode {
    pub fn is_causal(self) -> bool {
        matches!(self, MaskMode::Causal)
    }
}

/// Per-head attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub query: Vec<Tensor>,
    pub key: Vec<Tensor>,
    /// Merged value-output matrices `W_h`, one `D×D` per head.
    pub value_out: Vec<Tensor>,
}

impl AttentionParams {
    pub fn new(query: Vec<Tensor>, key: Vec<Tensor>, value_out: Vec<Tensor>) -> Result<Self> {
        let p = Self { query, key, value_out };
        p.validate()?;
        Ok(p)
    }

    /// Gaussian initialization with standard deviation `1/sqrt(D)` for every matrix.
    pub fn random(heads: usize, d_model: usize, d_qk: usize, seed: u64) -> Self {
        let s = 1.0 / (d_model as f64).sqrt();
        let mut next = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut draw = |shape: &[usize]| {
            next = next.wrapping_add(1);
            random_tensor(shape, next).scale(s)
        };
        let query = (0..heads).map(|_| draw(&[d_qk, d_model])).collect();
        let key = (0..heads).map(|_| draw(&[d_qk, d_model])).collect();
        let value_out = (0..heads).map(|_| draw(&[d_model, d_model])).collect();
        Self { query, key, value_out }
    }

    pub fn heads(&self) -> usize {
        self.query.len()
    }

    pub fn d_model(&self) -> usize {
        self.value_out.first().map_or(0, |w| w.cols())
    }

    pub fn d_qk(&self) -> usize {
        self.query.first().map_or(0, |w| w.rows())
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.query.len();
        if h == 0 || self.key.len() != h || self.value_out.len() != h {
            return Err(Error::Parameter(format!(
                "head count mismatch: {} queries, {} keys, {} value maps",
                h,
                self.key.len(),
                self.value_out.len()
            )));
        }
        let (d, dqk) = (self.d_model(), self.d_qk());
        for i in 0..h {
            if self.query[i].shape() != [dqk, d]
                || self.key[i].shape() != [dqk, d]
                || self.value_out[i].shape() != [d, d]
            {
                return Err(Error::Dimension(format!("head {i} has inconsistent shapes")));
            }
        }
        Ok(())
    }
}

/// Attention parameters bound to a graph.
#[derive(Debug, Clone)]
pub struct AttentionVars {
    pub query: Vec<Var>,
    pub key: Vec<Var>,
    pub value_out: Vec<Var>,
}

impl AttentionVars {
    pub fn constants(g: &mut Graph, p: &AttentionParams) -> Self {
        Self {
            query: p.query.iter().map(|t| g.constant(t.clone())).collect(),
            key: p.key.iter().map(|t| g.constant(t.clone())).collect(),
            value_out: p.value_out.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }
}

/// Graph handles produced by [`mha_graph`].
#[derive(Debug, Clone)]
pub struct GraphAttention {
    /// Averaged head output `U`.
    pub output: Var,
    /// Scaled pre-softmax logits per head.
    pub logits: Vec<Var>,
    /// Attention matrices `A_h`.
    pub attention: Vec<Var>,
    /// Per-head means `W_h x_j` as rows.
    pub values: Vec<Var>,
}

/// Multi-head attention over `seg`-length sequences stacked in `x`.
pub fn mha_graph(
    g: &mut Graph,
    x: Var,
    vars: &AttentionVars,
    seg: usize,
    mask: MaskMode,
) -> Result<GraphAttention> {
    if g.value(x).rows() == 0 {
        return Err(Error::EmptyInput("attention over zero tokens".into()));
    }
    let heads = vars.query.len();
    if heads == 0 {
        return Err(Error::Parameter("attention needs at least one head".into()));
    }
    let d_qk = g.value(vars.query[0]).rows();
    let inv_sqrt = 1.0 / (d_qk as f64).sqrt();
    let mut logits = Vec::with_capacity(heads);
    let mut attention = Vec::with_capacity(heads);
    let mut values = Vec::with_capacity(heads);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = g.matmul_nt(x, vars.query[h])?;
        let k = g.matmul_nt(x, vars.key[h])?;
        let s = g.seg_matmul_nt(q, k, seg)?;
        let s = g.scale(s, inv_sqrt);
        let a = g.softmax(s, mask.is_causal());
        let v = g.matmul_nt(x, vars.value_out[h])?;
        outs.push(g.seg_matmul(a, v, seg)?);
        logits.push(s);
        attention.push(a);
        values.push(v);
    }
    let sum = g.sum_n(&outs)?;
    let output = g.scale(sum, 1.0 / heads as f64);
    Ok(GraphAttention { output, logits, attention, values })
}

/// Output of [`mha_forward`].
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub u: Tensor,
    pub attention: Vec<Tensor>,
    pub mask_mode: MaskMode,
}

/// Attention matrices `A_h` for a single sequence `x` (`N×D`).
pub fn attention_matrices(x: &Tensor, params: &AttentionParams, mask: MaskMode) -> Result<Vec<Tensor>> {
    Ok(mha_forward(x, params, mask)?.attention)
}

/// `U = MHA(X)` for a single sequence, keeping every `A_h`.
pub fn mha_forward(x: &Tensor, params: &AttentionParams, mask: MaskMode) -> Result<AttentionOutput> {
    params.validate()?;
    if x.rank() != 2 || x.rows() == 0 {
        return Err(Error::EmptyInput(format!("attention input shape {:?}", x.shape())));
    }
    if x.cols() != params.d_model() {
        return Err(Error::Dimension(format!(
            "input width {} vs model width {}",
            x.cols(),
            params.d_model()
        )));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let vars = AttentionVars::constants(&mut g, params);
    let out = mha_graph(&mut g, xv, &vars, x.rows(), mask)?;
    Ok(AttentionOutput {
        u: g.value(out.output).clone(),
        attention: out.attention.iter().map(|&a| g.value(a).clone()).collect(),
        mask_mode: mask,
    })
}

/// Mean over rows of the row entropy (nats). Masked entries are exact zeros and
/// contribute nothing, so causal rows are measured over their prefix.
pub fn mean_attention_row_entropy(a: &Tensor) -> Result<f64> {
    let n = a.rows();
    if n == 0 {
        return Err(Error::EmptyInput("attention matrix without rows".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        total += stable::entropy(a.row(i))?;
    }
    Ok(total / n as f64)
}

/// Index of the head with the lowest mean row entropy; ties go to the lowest index.
pub fn select_min_entropy_head(a: &[Tensor]) -> Result<usize> {
    if a.is_empty() {
        return Err(Error::Usage("no attention heads to select from".into()));
    }
    let mut best = (0, f64::INFINITY);
    for (h, m) in a.iter().enumerate() {
        let e = mean_attention_row_entropy(m)?;
        if e < best.1 {
            best = (h, e);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::max_relative_error;
    use proptest::prelude::*;

    fn one_hot_rows(n: usize) -> Tensor {
        Tensor::identity(n)
    }

    #[test]
    fn single_token_attends_to_itself() {
        let p = AttentionParams::random(2, 3, 2, 1);
        let x = random_tensor(&[1, 3], 2);
        let out = mha_forward(&x, &p, MaskMode::Full).unwrap();
        for a in &out.attention {
            assert_eq!(a.data(), &[1.0]);
        }
        // U[0] = (1/H) Σ_h W_h x_0
        let mut want = vec![0.0; 3];
        for w in &p.value_out {
            let v = w.matvec(&Tensor::vector(x.row(0).to_vec())).unwrap();
            for (o, vi) in want.iter_mut().zip(v.data()) {
                *o += vi / 2.0;
            }
        }
        for (a, b) in out.u.row(0).iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn causal_first_row_is_one_hot_and_future_is_zero() {
        let p = AttentionParams::random(3, 4, 2, 5);
        let x = random_tensor(&[5, 4], 6);
        for a in attention_matrices(&x, &p, MaskMode::Causal).unwrap() {
            assert_eq!(a.row(0)[0], 1.0);
            for i in 0..5 {
                for j in i + 1..5 {
                    assert_eq!(a.at(i, j), 0.0);
                }
                assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identical_tokens_give_identical_rows() {
        let p = AttentionParams::random(2, 3, 3, 7);
        let t = random_tensor(&[1, 3], 8);
        let x = Tensor::from_rows(&[t.row(0).to_vec(), t.row(0).to_vec()]).unwrap();
        for a in attention_matrices(&x, &p, MaskMode::Full).unwrap() {
            assert_eq!(a.row(0), a.row(1));
        }
    }

    #[test]
    fn zero_logits_average_the_values() {
        let d = 3;
        let w = random_tensor(&[d, d], 9);
        let p = AttentionParams::new(vec![Tensor::zeros(&[2, d])], vec![Tensor::zeros(&[2, d])], vec![w.clone()])
            .unwrap();
        let x = random_tensor(&[4, d], 10);
        let out = mha_forward(&x, &p, MaskMode::Full).unwrap();
        let mean: Vec<f64> = (0..d).map(|c| (0..4).map(|i| x.at(i, c)).sum::<f64>() / 4.0).collect();
        let want = w.matvec(&Tensor::vector(mean)).unwrap();
        for i in 0..4 {
            for c in 0..d {
                assert!((out.u.at(i, c) - want.data()[c]).abs() < 1e-14);
            }
            assert!(out.attention[0].row(i).iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn empty_input_is_rejected() {
        let p = AttentionParams::random(1, 2, 2, 1);
        let x = Tensor::new(vec![0, 2], vec![]).unwrap();
        assert!(matches!(mha_forward(&x, &p, MaskMode::Full), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn row_entropy_cases() {
        assert_eq!(mean_attention_row_entropy(&one_hot_rows(3)).unwrap(), 0.0);
        let u = Tensor::filled(&[4, 4], 0.25);
        assert!((mean_attention_row_entropy(&u).unwrap() - 4f64.ln()).abs() < 1e-15);
        let mixed = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
        assert!((mean_attention_row_entropy(&mixed).unwrap() - 0.5 * 2f64.ln()).abs() < 1e-15);
        let bad = Tensor::from_rows(&[vec![0.7, 0.7]]).unwrap();
        assert!(matches!(mean_attention_row_entropy(&bad), Err(Error::Validation(_))));
    }

    #[test]
    fn min_entropy_head_selection() {
        let peaked = one_hot_rows(4);
        let flat = Tensor::filled(&[4, 4], 0.25);
        assert_eq!(select_min_entropy_head(std::slice::from_ref(&peaked)).unwrap(), 0);
        assert_eq!(select_min_entropy_head(&[peaked.clone(), flat.clone()]).unwrap(), 0);
        assert_eq!(select_min_entropy_head(&[flat.clone(), peaked]).unwrap(), 1);
        assert_eq!(select_min_entropy_head(&[flat.clone(), flat]).unwrap(), 0);
        assert!(matches!(select_min_entropy_head(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn permutation_equivariance_full_mask() {
        let p = AttentionParams::random(2, 4, 3, 11);
        let x = random_tensor(&[5, 4], 12);
        let perm = [3, 0, 4, 1, 2];
        let xp = x.select_rows(&perm);
        let a = mha_forward(&x, &p, MaskMode::Full).unwrap();
        let b = mha_forward(&xp, &p, MaskMode::Full).unwrap();
        for (i, &pi) in perm.iter().enumerate() {
            for c in 0..4 {
                assert!((b.u.at(i, c) - a.u.at(pi, c)).abs() < 1e-10);
            }
            for h in 0..2 {
                for (j, &pj) in perm.iter().enumerate() {
                    assert!((b.attention[h].at(i, j) - a.attention[h].at(pi, pj)).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn segmented_matches_per_sequence() {
        let p = AttentionParams::random(2, 3, 2, 13);
        let x1 = random_tensor(&[4, 3], 14);
        let x2 = random_tensor(&[4, 3], 15);
        let stacked = Tensor::new(vec![8, 3], [x1.data(), x2.data()].concat()).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(stacked);
        let vars = AttentionVars::constants(&mut g, &p);
        let out = mha_graph(&mut g, xv, &vars, 4, MaskMode::Causal).unwrap();
        let u = g.value(out.output).clone();
        let a1 = mha_forward(&x1, &p, MaskMode::Causal).unwrap();
        let a2 = mha_forward(&x2, &p, MaskMode::Causal).unwrap();
        for i in 0..4 {
            for c in 0..3 {
                assert!((u.at(i, c) - a1.u.at(i, c)).abs() < 1e-14);
                assert!((u.at(i + 4, c) - a2.u.at(i, c)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn mha_gradient_check() {
        let p = AttentionParams::random(2, 3, 2, 16);
        let x = random_tensor(&[4, 3], 17);
        let probe = random_tensor(&[4, 3], 18);
        let mut inputs = vec![x];
        inputs.extend(p.query.iter().cloned());
        inputs.extend(p.key.iter().cloned());
        inputs.extend(p.value_out.iter().cloned());
        for mask in [MaskMode::Causal, MaskMode::Full] {
            let err = max_relative_error(&inputs, |g, v| {
                let vars = AttentionVars {
                    query: v[1..3].to_vec(),
                    key: v[3..5].to_vec(),
                    value_out: v[5..7].to_vec(),
                };
                let out = mha_graph(g, v[0], &vars, 4, mask)?;
                let w = g.constant(probe.clone());
                let y = g.mul(out.output, w)?;
                Ok(g.sum(y))
            })
            .unwrap();
            assert!(err < 1e-4, "{mask:?}: {err}");
        }
    }

    proptest! {
        #[test]
        fn full_mask_is_permutation_equivariant(
            perm in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle(),
            seed in 0u64..1000,
        ) {
            let p = AttentionParams::random(2, 3, 2, seed);
            let x = random_tensor(&[5, 3], seed + 1);
            let a = mha_forward(&x, &p, MaskMode::Full).unwrap();
            let b = mha_forward(&x.select_rows(&perm), &p, MaskMode::Full).unwrap();
            prop_assert!(b.u.max_abs_diff(&a.u.select_rows(&perm)) < 1e-10);
        }

        #[test]
        fn causal_rows_ignore_the_future(seed in 0u64..1000, cut in 1usize..5) {
            let p = AttentionParams::random(2, 3, 2, seed);
            let x = random_tensor(&[5, 3], seed + 1);
            let mut y = x.clone();
            for i in cut..5 {
                y.row_mut(i).iter_mut().for_each(|v| *v = -*v + 0.5);
            }
            let a = mha_forward(&x, &p, MaskMode::Causal).unwrap();
            let b = mha_forward(&y, &p, MaskMode::Causal).unwrap();
            for i in 0..cut {
                for c in 0..3 {
                    prop_assert_eq!(a.u.at(i, c), b.u.at(i, c));
                }
            }
            for att in &a.attention {
                for i in 0..5 {
                    prop_assert!((att.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    prop_assert!(att.row(i)[i + 1..].iter().all(|&v| v == 0.0));
                }
            }
        }
    }
}
