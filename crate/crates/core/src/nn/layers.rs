use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::graph::{softmax_in_place, Graph, Segments, Var};
use crate::nn::params::{ParamId, ParamStore};
use crate::nn::Tensor2;
use crate::scalar::Real;

fn uniform_init<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Tensor2<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
        .collect();
    Tensor2::from_vec(rows, cols, data).expect("sized by construction")
}

/// Affine layer `y = W x + b` with `W` of shape `out × in`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform_init(outputs, inputs, inputs, rng));
        let bias = store.add(format!("{name}.bias"), uniform_init(1, outputs, inputs, rng));
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.linear(x, w, Some(b))
    }
}

/// Stack of [`Linear`] layers with ReLU between them (none after the last).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths = [in, hidden.., out]`.
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, widths: &[usize], rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        if g.value(x).cols() != self.input_width() {
            return shape_err(
                "mlp_forward",
                format!("input width {} vs {}", g.value(x).cols(), self.input_width()),
            );
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}

/// Evaluates an MLP on a single vector.
pub fn mlp_forward<T: Real>(store: &ParamStore<T>, mlp: &Mlp, x: &[T]) -> Result<Vec<T>> {
    let mut g = Graph::new(store);
    let xv = g.constant(Tensor2::row_vector(x.to_vec()));
    let y = mlp.forward(&mut g, xv)?;
    Ok(g.value(y).data().to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor2::filled(1, width, T::one())),
            beta: store.add(format!("{name}.beta"), Tensor2::zeros(1, width)),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (ga, be) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, ga, be, T::from_f64_lossy(Self::EPS))
    }
}

/// Numerically stable softmax of a non-empty vector.
pub fn softmax<T: Real>(logits: &[T]) -> Result<Vec<T>> {
    if logits.is_empty() {
        return Err(Error::Empty("softmax"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "softmax".into(),
            detail: "logits contain a non-finite value".into(),
        });
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Sinusoidal encoding of a 3D point: for each axis and band `l`,
/// `(sin(2^l π p), cos(2^l π p))`, giving `6 · bands` values.
pub fn positional_encoding<T: Real>(p: [T; 3], bands: usize) -> Vec<T> {
    let pi = T::from_f64_lossy(std::f64::consts::PI);
    let mut out = Vec::with_capacity(6 * bands);
    for &x in &p {
        let mut freq = pi;
        for _ in 0..bands {
            out.push((freq * x).sin());
            out.push((freq * x).cos());
            freq = freq + freq;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    /// Multiply scores by `1/√d_head` when true; the bare `softmax(QKᵀ)V` otherwise.
    pub scale: bool,
    pub ffn_mult: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            width: 512,
            heads: 8,
            layers: 1,
            scale: true,
            ffn_mult: 4,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "attention width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("attention needs at least one layer".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct AttentionBlock {
    ln_query: LayerNorm,
    q_proj: Linear,
    k_proj: Linear,
    v_proj: Linear,
    out_proj: Linear,
    ln_ffn: LayerNorm,
    ffn: Mlp,
}

/// Pre-norm residual cross-attention transformer: queries attend over a shared key/value set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossAttention {
    pub config: AttentionConfig,
    blocks: Vec<AttentionBlock>,
}

/// Result of a cross-attention forward pass.
pub struct AttentionOutput {
    pub features: Var,
    /// Attention-weight node of the last block (for inspection).
    pub weights: Var,
}

impl CrossAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        config: AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let blocks = (0..config.layers)
            .map(|i| {
                let p = format!("{name}.{i}");
                AttentionBlock {
                    ln_query: LayerNorm::new(store, &format!("{p}.ln_query"), d),
                    q_proj: Linear::new(store, &format!("{p}.q_proj"), d, d, rng),
                    k_proj: Linear::new(store, &format!("{p}.k_proj"), d, d, rng),
                    v_proj: Linear::new(store, &format!("{p}.v_proj"), d, d, rng),
                    out_proj: Linear::new(store, &format!("{p}.out_proj"), d, d, rng),
                    ln_ffn: LayerNorm::new(store, &format!("{p}.ln_ffn"), d),
                    ffn: Mlp::new(store, &format!("{p}.ffn"), &[d, d * config.ffn_mult, d], rng),
                }
            })
            .collect();
        Ok(Self { config, blocks })
    }

    /// `queries`: stacked `ΣK × d`; `keys`/`values`: stacked `ΣN × d`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        queries: Var,
        keys: Var,
        values: Var,
        q_segs: &Segments,
        kv_segs: &Segments,
    ) -> Result<AttentionOutput> {
        let d = self.config.width;
        for (what, v) in [("queries", queries), ("keys", keys), ("values", values)] {
            if g.value(v).cols() != d {
                return shape_err("cross_attention_forward", format!("{what} width {} vs {d}", g.value(v).cols()));
            }
        }
        let scale = if self.config.scale {
            T::one() / T::from_usize(self.config.head_dim()).unwrap().sqrt()
        } else {
            T::one()
        };
        let mut x = queries;
        let mut weights = None;
        for blk in &self.blocks {
            let h = blk.ln_query.forward(g, x)?;
            let q = blk.q_proj.forward(g, h)?;
            let k = blk.k_proj.forward(g, keys)?;
            let v = blk.v_proj.forward(g, values)?;
            let a = g.attention(q, k, v, self.config.heads, scale, q_segs, kv_segs)?;
            weights = Some(a);
            let o = blk.out_proj.forward(g, a)?;
            x = g.add(x, o)?;
            let h = blk.ln_ffn.forward(g, x)?;
            let f = blk.ffn.forward(g, h)?;
            x = g.add(x, f)?;
        }
        Ok(AttentionOutput {
            features: x,
            weights: weights.expect("at least one block"),
        })
    }
}
