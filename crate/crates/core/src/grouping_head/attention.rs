use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

const LAYER_NORM_EPS: f64 = 1e-5;
/// Std multiplier for projections that write into the residual stream.
const RESIDUAL_INIT_SCALE: f64 = 0.1;

/// Shape of the self-attention stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
}

impl AttentionConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            layers: 3,
            heads: 4,
            hidden: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.hidden == 0 {
            return Err(Error::Config("attention dims must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embedding dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    /// `(suffix, dims)` of every parameter of layer `l`.
    fn layer_shapes(&self, l: usize) -> Vec<(String, Vec<usize>)> {
        let (d, h) = (self.dim, self.hidden);
        [
            ("ln1.g", vec![d]),
            ("ln1.b", vec![d]),
            ("wq", vec![d, d]),
            ("bq", vec![d]),
            ("wk", vec![d, d]),
            ("bk", vec![d]),
            ("wv", vec![d, d]),
            ("bv", vec![d]),
            ("wo", vec![d, d]),
            ("bo", vec![d]),
            ("ln2.g", vec![d]),
            ("ln2.b", vec![d]),
            ("w1", vec![d, h]),
            ("b1", vec![h]),
            ("w2", vec![h, d]),
            ("b2", vec![d]),
        ]
        .into_iter()
        .map(|(s, dims)| (format!("l{l}.{s}"), dims))
        .collect()
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers)
            .flat_map(|l| self.layer_shapes(l))
            .map(|(s, _)| format!("{prefix}.{s}"))
            .collect()
    }

    /// Projections ~ N(0, 1/fan_in), with the residual-writing ones scaled
    /// down; biases and norm offsets 0, norm scales 1.
    pub fn init_params(&self, params: &mut ParamStore, prefix: &str, rng: &mut impl Rng) {
        for l in 0..self.layers {
            for (suffix, dims) in self.layer_shapes(l) {
                let name = format!("{prefix}.{suffix}");
                let t = if suffix.ends_with(".g") {
                    Tensor::full(&dims, 1.0)
                } else if dims.len() == 2 {
                    let scale = if suffix.ends_with("wo") || suffix.ends_with("w2") {
                        RESIDUAL_INIT_SCALE
                    } else {
                        1.0
                    };
                    let normal = Normal::new(0.0, scale * (1.0 / dims[0] as f64).sqrt())
                        .expect("positive std");
                    Tensor::new(
                        &dims,
                        (0..dims[0] * dims[1]).map(|_| normal.sample(rng)).collect(),
                    )
                    .expect("matrix dims")
                } else {
                    Tensor::zeros(&dims)
                };
                params.insert(name, t);
            }
        }
    }
}

struct Layer<'a> {
    g: &'a mut Graph,
    params: &'a ParamStore,
    prefix: String,
}

impl Layer<'_> {
    fn p(&mut self, suffix: &str) -> Result<Var> {
        self.g
            .param(self.params, &format!("{}.{suffix}", self.prefix))
    }

    fn norm(&mut self, x: Var, which: &str) -> Result<Var> {
        let n = self.g.normalize_rows(x, LAYER_NORM_EPS)?;
        let gain = self.p(&format!("{which}.g"))?;
        let bias = self.p(&format!("{which}.b"))?;
        let scaled = self.g.mul_row(n, gain)?;
        self.g.add_row(scaled, bias)
    }

    fn linear(&mut self, x: Var, w: &str, b: &str) -> Result<Var> {
        let w = self.p(w)?;
        let b = self.p(b)?;
        let y = self.g.matmul(x, w)?;
        self.g.add_row(y, b)
    }
}

/// Pre-norm transformer stack over instance features `N × D`.
///
/// Invalid instances are excluded as attention keys and their output rows
/// are zeroed.
pub fn self_attention_update(
    g: &mut Graph,
    params: &ParamStore,
    prefix: &str,
    cfg: &AttentionConfig,
    features: Var,
    valid: &[bool],
) -> Result<Var> {
    cfg.validate()?;
    params.require(cfg.param_names(prefix).iter().map(String::as_str))?;
    let [n, d] = g.value(features).dims2("self_attention_update")?;
    if d != cfg.dim || valid.len() != n {
        return Err(Error::shape(
            "self_attention_update",
            &[valid.len(), cfg.dim],
            &[n, d],
        ));
    }
    if !valid.iter().any(|&v| v) {
        return Err(Error::InvalidArgument(
            "self-attention needs at least one valid instance".into(),
        ));
    }
    let dh = d / cfg.heads;
    let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();
    let mut x = features;
    for l in 0..cfg.layers {
        let mut layer = Layer {
            g: &mut *g,
            params,
            prefix: format!("{prefix}.l{l}"),
        };
        let h = layer.norm(x, "ln1")?;
        let q = layer.linear(h, "wq", "bq")?;
        let k = layer.linear(h, "wk", "bk")?;
        let v = layer.linear(h, "wv", "bv")?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let g = &mut *layer.g;
            let qh = g.slice_cols(q, head * dh, dh)?;
            let kh = g.slice_cols(k, head * dh, dh)?;
            let vh = g.slice_cols(v, head * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, inv_sqrt_dh);
            let weights = g.masked_softmax_rows(scores, valid)?;
            heads.push(g.matmul(weights, vh)?);
        }
        let merged = layer.g.concat_cols(&heads)?;
        let attn = layer.linear(merged, "wo", "bo")?;
        x = layer.g.add(x, attn)?;

        let h = layer.norm(x, "ln2")?;
        let hidden = layer.linear(h, "w1", "b1")?;
        let hidden = layer.g.relu(hidden);
        let ff = layer.linear(hidden, "w2", "b2")?;
        x = layer.g.add(x, ff)?;
    }
    let keep = Tensor::new(
        &[n, d],
        valid
            .iter()
            .flat_map(|&v| std::iter::repeat_n(if v { 1.0 } else { 0.0 }, d))
            .collect(),
    )?;
    g.mul_const(x, keep)
}
