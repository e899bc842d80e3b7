//! The transformer-SMoE stack over a flat, named parameter store.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::attention::{mha_graph, AttentionVars};
use crate::error::{Error, Result};
use crate::metrics::RoutingRecord;
use crate::moe::{moe_layer_graph, LayerRouting, Mixing, MoeLayerGraph};
use crate::numerics::{Graph, Tensor, Var};
use crate::rng::{self, streams};
use crate::routing::{cosine_dim, RouterKind, RouterVars};

use super::config::{Combiner, InputKind, ModelConfig};

/// Floor applied to learned cosine-router temperatures after each update.
pub const MIN_ROUTER_TEMPERATURE: f64 = 1e-2;

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Frozen parameters are bound as graph constants and never updated.
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
    Identity,
    Value(f64),
}

#[derive(Debug, Clone)]
struct BlockLayout {
    ln1: (usize, usize),
    query: Vec<usize>,
    key: Vec<usize>,
    value_out: Vec<usize>,
    ln2: (usize, usize),
    router_weight: usize,
    router_bias: usize,
    router_projection: Option<usize>,
    router_temperature: Option<usize>,
    w1: Vec<usize>,
    b1: Vec<usize>,
    w2: Vec<usize>,
    b2: Vec<usize>,
    w_s: Option<usize>,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: Option<usize>,
    pos: Option<usize>,
    blocks: Vec<BlockLayout>,
    lnf: (usize, usize),
    head_weight: usize,
    head_bias: usize,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
    trainable: bool,
}

struct LayoutBuilder {
    specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: &[usize], init: Init, trainable: bool) -> usize {
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
            trainable,
        });
        self.specs.len() - 1
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Vec<ParamSpec>) {
    let d = cfg.d_model;
    let mut b = LayoutBuilder { specs: Vec::new() };
    let (embed, pos) = match cfg.input {
        InputKind::Tokens => (
            Some(b.push("embed".into(), &[cfg.vocab_size, d], Init::Normal(0.5), true)),
            Some(b.push("pos".into(), &[cfg.max_seq_len, d], Init::Normal(0.1), true)),
        ),
        InputKind::Vectors => (None, None),
    };
    let w_std = 1.0 / (d as f64).sqrt();
    let ff_std = 1.0 / (cfg.d_ff as f64).sqrt();
    let mut blocks = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let p = format!("block{l}");
        let ln1 = (
            b.push(format!("{p}.ln1.gain"), &[d], Init::Ones, true),
            b.push(format!("{p}.ln1.bias"), &[d], Init::Zeros, true),
        );
        let mut query = Vec::new();
        let mut key = Vec::new();
        let mut value_out = Vec::new();
        for h in 0..cfg.heads {
            query.push(b.push(format!("{p}.attn.query{h}"), &[cfg.d_qk, d], Init::Normal(w_std), true));
            key.push(b.push(format!("{p}.attn.key{h}"), &[cfg.d_qk, d], Init::Normal(w_std), true));
            value_out.push(b.push(format!("{p}.attn.value{h}"), &[d, d], Init::Normal(w_std), true));
        }
        let ln2 = (
            b.push(format!("{p}.ln2.gain"), &[d], Init::Ones, true),
            b.push(format!("{p}.ln2.bias"), &[d], Init::Zeros, true),
        );
        let trainable_router = cfg.router != RouterKind::FrozenRandom;
        let (router_weight, router_bias, router_projection, router_temperature) = match cfg.router {
            RouterKind::SoftmaxLinear | RouterKind::FrozenRandom => (
                b.push(format!("{p}.router.weight"), &[cfg.experts, d], Init::Normal(w_std), trainable_router),
                b.push(format!("{p}.router.bias"), &[cfg.experts], Init::Zeros, trainable_router),
                None,
                None,
            ),
            RouterKind::Cosine => {
                let dp = cosine_dim(d);
                let w = b.push(format!("{p}.router.weight"), &[cfg.experts, dp], Init::Normal(1.0), true);
                let bias = b.push(format!("{p}.router.bias"), &[cfg.experts], Init::Zeros, false);
                let proj = b.push(format!("{p}.router.projection"), &[dp, d], Init::Normal(w_std), true);
                let tau = b.push(format!("{p}.router.temperature"), &[1], Init::Value(0.3), true);
                (w, bias, Some(proj), Some(tau))
            }
        };
        let mut w1 = Vec::new();
        let mut b1 = Vec::new();
        let mut w2 = Vec::new();
        let mut b2 = Vec::new();
        for e in 0..cfg.experts {
            w1.push(b.push(format!("{p}.expert{e}.w1"), &[cfg.d_ff, d], Init::Normal(w_std), true));
            b1.push(b.push(format!("{p}.expert{e}.b1"), &[cfg.d_ff], Init::Zeros, true));
            w2.push(b.push(format!("{p}.expert{e}.w2"), &[d, cfg.d_ff], Init::Normal(ff_std), true));
            b2.push(b.push(format!("{p}.expert{e}.b2"), &[d], Init::Zeros, true));
        }
        let w_s = (cfg.combiner == Combiner::SimilarityAware && cfg.similarity_trainable)
            .then(|| b.push(format!("{p}.similarity.w_s"), &[d, d], Init::Identity, true));
        blocks.push(BlockLayout {
            ln1,
            query,
            key,
            value_out,
            ln2,
            router_weight,
            router_bias,
            router_projection,
            router_temperature,
            w1,
            b1,
            w2,
            b2,
            w_s,
        });
    }
    let lnf = (
        b.push("final_ln.gain".into(), &[d], Init::Ones, true),
        b.push("final_ln.bias".into(), &[d], Init::Zeros, true),
    );
    let head_weight = b.push("head.weight".into(), &[cfg.vocab_size, d], Init::Normal(w_std), true);
    let head_bias = b.push("head.bias".into(), &[cfg.vocab_size], Init::Zeros, true);
    (
        Layout {
            embed,
            pos,
            blocks,
            lnf,
            head_weight,
            head_bias,
        },
        b.specs,
    )
}

/// Closed-form number of scalar parameters for `cfg`, frozen ones included.
pub fn parameter_count(cfg: &ModelConfig) -> usize {
    let (d, h, e, f, v) = (cfg.d_model, cfg.heads, cfg.experts, cfg.d_ff, cfg.vocab_size);
    let input = match cfg.input {
        InputKind::Tokens => v * d + cfg.max_seq_len * d,
        InputKind::Vectors => 0,
    };
    let router = match cfg.router {
        RouterKind::SoftmaxLinear | RouterKind::FrozenRandom => e * d + e,
        RouterKind::Cosine => {
            let dp = cosine_dim(d);
            e * dp + e + dp * d + 1
        }
    };
    let w_s = if cfg.combiner == Combiner::SimilarityAware && cfg.similarity_trainable {
        d * d
    } else {
        0
    };
    let block = 4 * d + h * (2 * cfg.d_qk * d + d * d) + router + e * (2 * d * f + f + d) + w_s;
    input + cfg.layers * block + 2 * d + v * d + v
}

/// Inputs for one forward pass: `batch` sequences of `seq_len` positions stacked as rows.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchInput {
    Tokens(Vec<usize>),
    Vectors(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub input: BatchInput,
    pub targets: Vec<usize>,
    pub seq_len: usize,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.targets.len()
    }
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardGraph {
    pub logits: Var,
    pub layers: Vec<MoeLayerGraph>,
}

/// A toy transformer whose feed-forward sublayers are sparse MoE layers.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<Param>,
    layout: Layout,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

/// Fresh model with parameters drawn from the seed's initialization stream.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let (layout, specs) = build_layout(cfg);
    let mut r = rng::substream(seed, streams::INIT);
    let params = specs
        .into_iter()
        .map(|s| {
            let numel: usize = s.shape.iter().product();
            let value = match s.init {
                Init::Normal(std) => {
                    let data = (0..numel).map(|_| std * r.sample::<f64, _>(StandardNormal)).collect();
                    Tensor::new(s.shape.clone(), data)?
                }
                Init::Zeros => Tensor::zeros(&s.shape),
                Init::Ones => Tensor::filled(&s.shape, 1.0),
                Init::Identity => Tensor::identity(s.shape[0]),
                Init::Value(v) => Tensor::filled(&s.shape, v),
            };
            Ok(Param {
                name: s.name,
                value,
                trainable: s.trainable,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Model {
        config: cfg.clone(),
        params,
        layout,
    })
}

impl Model {
    /// Rebuilds a model from named tensors, checking that names and shapes match `cfg`.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        cfg.validate()?;
        let (layout, specs) = build_layout(cfg);
        if specs.len() != tensors.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                tensors.len()
            )));
        }
        let params = specs
            .into_iter()
            .zip(tensors)
            .map(|(s, (name, value))| {
                if s.name != name || s.shape != value.shape() {
                    return Err(Error::Format(format!(
                        "parameter '{name}' {:?} does not match expected '{}' {:?}",
                        value.shape(),
                        s.name,
                        s.shape
                    )));
                }
                Ok(Param {
                    name,
                    value,
                    trainable: s.trainable,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: cfg.clone(),
            params,
            layout,
        })
    }

    /// Keeps learned cosine-router temperatures at or above [`MIN_ROUTER_TEMPERATURE`].
    pub fn project_constraints(&mut self) {
        for b in &self.layout.blocks {
            if let Some(i) = b.router_temperature {
                let t = &mut self.params[i].value.data_mut()[0];
                *t = t.max(MIN_ROUTER_TEMPERATURE);
            }
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Binds every parameter; trainable ones become leaves when `with_grad` is set.
    pub fn bind(&self, g: &mut Graph, with_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if with_grad && p.trainable {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect()
    }

    fn check_batch(&self, batch: &Batch) -> Result<usize> {
        let seg = batch.seq_len;
        let rows = batch.rows();
        if rows == 0 {
            return Err(Error::EmptyInput("forward pass over zero tokens".into()));
        }
        if seg == 0 || !rows.is_multiple_of(seg) {
            return Err(Error::Dimension(format!("{rows} rows are not whole sequences of {seg}")));
        }
        match (&batch.input, self.config.input) {
            (BatchInput::Tokens(ids), InputKind::Tokens) => {
                if ids.len() != rows {
                    return Err(Error::Dimension(format!("{} ids for {rows} targets", ids.len())));
                }
                if seg > self.config.max_seq_len {
                    return Err(Error::Dimension(format!(
                        "sequence length {seg} exceeds max_seq_len {}",
                        self.config.max_seq_len
                    )));
                }
                if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
                    return Err(Error::Range(format!("token id {bad} outside vocab {}", self.config.vocab_size)));
                }
            }
            (BatchInput::Vectors(x), InputKind::Vectors) => {
                if x.shape() != [rows, self.config.d_model] {
                    return Err(Error::Dimension(format!(
                        "input {:?} for {rows} rows of width {}",
                        x.shape(),
                        self.config.d_model
                    )));
                }
            }
            _ => return Err(Error::Usage("batch input kind does not match the model".into())),
        }
        Ok(seg)
    }

    /// Builds the forward graph. `tau` is the similarity temperature for this pass.
    pub fn forward_graph(&self, g: &mut Graph, vars: &[Var], batch: &Batch, tau: f64) -> Result<ForwardGraph> {
        let seg = self.check_batch(batch)?;
        let cfg = &self.config;
        let lay = &self.layout;
        let mut x = match &batch.input {
            BatchInput::Tokens(ids) => {
                let embed = lay.embed.ok_or_else(|| Error::Usage("model has no embedding".into()))?;
                let pos = lay.pos.ok_or_else(|| Error::Usage("model has no positions".into()))?;
                let e = g.gather_rows(vars[embed], ids)?;
                let positions: Vec<usize> = (0..ids.len()).map(|i| i % seg).collect();
                let p = g.gather_rows(vars[pos], &positions)?;
                g.add(e, p)?
            }
            BatchInput::Vectors(t) => g.constant(t.clone()),
        };
        let mut layers = Vec::with_capacity(lay.blocks.len());
        for b in &lay.blocks {
            let xn = g.layer_norm(x, vars[b.ln1.0], vars[b.ln1.1])?;
            let attn_vars = AttentionVars {
                query: b.query.iter().map(|&i| vars[i]).collect(),
                key: b.key.iter().map(|&i| vars[i]).collect(),
                value_out: b.value_out.iter().map(|&i| vars[i]).collect(),
            };
            let att = mha_graph(g, xn, &attn_vars, seg, cfg.mask_mode)?;
            let h1 = g.add(x, att.output)?;
            let u = g.layer_norm(h1, vars[b.ln2.0], vars[b.ln2.1])?;
            let router = RouterVars {
                kind: cfg.router,
                weight: vars[b.router_weight],
                bias: vars[b.router_bias],
                projection: b.router_projection.map(|i| vars[i]),
                temperature: b.router_temperature.map(|i| vars[i]),
            };
            let experts = crate::moe::ExpertVars {
                w1: b.w1.iter().map(|&i| vars[i]).collect(),
                b1: b.b1.iter().map(|&i| vars[i]).collect(),
                w2: b.w2.iter().map(|&i| vars[i]).collect(),
                b2: b.b2.iter().map(|&i| vars[i]).collect(),
            };
            let mixing = match cfg.combiner {
                Combiner::Baseline => Mixing::None,
                Combiner::SimilarityAware => Mixing::Similarity {
                    w_s: b.w_s.map(|i| vars[i]),
                    tau,
                    mask: cfg.mask_mode,
                },
                Combiner::AttentionAware => Mixing::Attention {
                    attention: &att,
                    sigma: cfg.sigma,
                    head_mode: cfg.head_mode,
                    mask: cfg.mask_mode,
                },
            };
            let layer = moe_layer_graph(g, u, seg, &router, &experts, mixing, cfg.top_k)?;
            x = g.add(h1, layer.output)?;
            layers.push(layer);
        }
        let xf = g.layer_norm(x, vars[lay.lnf.0], vars[lay.lnf.1])?;
        let logits = g.matmul_nt(xf, vars[lay.head_weight])?;
        let logits = g.add_bias(logits, vars[lay.head_bias])?;
        Ok(ForwardGraph { logits, layers })
    }

    /// Logits for a batch without gradient tracking.
    pub fn logits(&self, batch: &Batch, tau: f64) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let f = self.forward_graph(&mut g, &vars, batch, tau)?;
        Ok(g.value(f.logits).clone())
    }

    /// Mean cross-entropy and per-layer routing of one batch, without gradients.
    pub fn evaluate_batch(&self, batch: &Batch, tau: f64) -> Result<(f64, Vec<LayerRouting>)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let f = self.forward_graph(&mut g, &vars, batch, tau)?;
        let loss = g.cross_entropy(f.logits, &batch.targets)?;
        let routing = f.layers.iter().map(|l| l.routing(&g)).collect();
        Ok((g.value(loss).data()[0], routing))
    }

    /// Routing record of `batch` tagged with `epoch`.
    pub fn routing_record(&self, batch: &Batch, tau: f64, epoch: usize) -> Result<RoutingRecord> {
        let (_, layers) = self.evaluate_batch(batch, tau)?;
        Ok(RoutingRecord { epoch, layers })
    }
}
