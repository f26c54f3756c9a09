//! Attention building blocks shared by both pipeline stages.
//!
//! All blocks register their weights in a [`ParamStore`] at construction and
//! record their forward pass on a [`Graph`]. Masks are flat `q×k` boolean
//! slices where `true` blocks a position.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::FeatureMap;
use crate::tensor::{shape_err, Graph, ParamId, ParamStore, Result, Tensor, TensorError, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub causal: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self::with_dims(64, 4, 2, false)
    }
}

impl DecoderConfig {
    /// `head_dim = model_dim / n_heads`, feed-forward width `4 × model_dim`.
    pub fn with_dims(model_dim: usize, n_heads: usize, n_layers: usize, causal: bool) -> Self {
        assert!(n_heads > 0 && model_dim.is_multiple_of(n_heads), "model_dim {model_dim} not divisible by {n_heads} heads");
        Self { n_layers, n_heads, head_dim: model_dim / n_heads, model_dim, ff_dim: 4 * model_dim, causal }
    }
}

/// Affine map `x·W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let weight = store.add_glorot(format!("{name}.w"), in_dim, out_dim, rng);
        let bias = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[1, out_dim])));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let bv = g.param(b);
                g.add_row(y, bv)
            }
            None => Ok(y),
        }
    }
}

/// Layer normalisation over the last axis with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[1, dim])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, LAYER_NORM_EPS)?;
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let s = g.mul_row(n, gain)?;
        g.add_row(s, bias)
    }
}

/// Per-position 1×1 convolution of a feature map: `reshape(V)·W + b`.
#[derive(Debug, Clone)]
pub struct FeatureProjection {
    pub linear: Linear,
}

impl FeatureProjection {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self { linear: Linear::new(store, name, channels, out_dim, true, rng) }
    }

    /// Returns the `n² × out_dim` projected features.
    pub fn forward(&self, g: &mut Graph<'_>, features: &FeatureMap) -> Result<Var> {
        if features.channels() != self.linear.in_dim {
            return Err(shape_err(
                "project_features",
                format!("feature map has {} channels, projection expects {}", features.channels(), self.linear.in_dim),
            ));
        }
        let v = g.constant(features.positions());
        self.linear.forward(g, v)
    }
}

/// Causal mask for a length-`s` sequence: position `i` sees `j <= i`.
pub fn causal_mask(s: usize) -> Vec<bool> {
    (0..s * s).map(|k| k % s > k / s).collect()
}

/// Blocks every key marked as padding, for each of `q` query rows.
pub fn key_padding_mask(q: usize, pad: &[bool]) -> Vec<bool> {
    (0..q).flat_map(|_| pad.iter().copied()).collect()
}

pub fn combine_masks(a: &[bool], b: &[bool]) -> Vec<bool> {
    a.iter().zip(b).map(|(x, y)| *x || *y).collect()
}

/// `Concat(head_1..head_h)·W^o` with `head_i = softmax(Q_i K_iᵀ/√d_k) V_i`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub n_heads: usize,
    pub head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        model_dim: usize,
        n_heads: usize,
        head_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let inner = n_heads * head_dim;
        Self {
            wq: store.add_glorot(format!("{name}.wq"), model_dim, inner, rng),
            wk: store.add_glorot(format!("{name}.wk"), model_dim, inner, rng),
            wv: store.add_glorot(format!("{name}.wv"), model_dim, inner, rng),
            wo: store.add_glorot(format!("{name}.wo"), inner, model_dim, rng),
            n_heads,
            head_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, q_in: Var, k_in: Var, v_in: Var, mask: Option<&[bool]>) -> Result<Var> {
        Ok(self.forward_with_weights(g, q_in, k_in, v_in, mask)?.0)
    }

    /// Also returns each head's `q×k` attention-weight matrix.
    pub fn forward_with_weights(
        &self,
        g: &mut Graph<'_>,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        mask: Option<&[bool]>,
    ) -> Result<(Var, Vec<Var>)> {
        let sq = g.value(q_in).rows();
        let sk = g.value(k_in).rows();
        if g.value(v_in).rows() != sk {
            return Err(shape_err("multi_head_attention", format!("{sk} keys but {} values", g.value(v_in).rows())));
        }
        if let Some(m) = mask {
            if m.len() != sq * sk {
                return Err(TensorError::MaskShapeMismatch(format!("mask of {} for {sq}x{sk} scores", m.len())));
            }
        }
        let (wq, wk, wv, wo) = (g.param(self.wq), g.param(self.wk), g.param(self.wv), g.param(self.wo));
        let q = g.matmul(q_in, wq)?;
        let k = g.matmul(k_in, wk)?;
        let v = g.matmul(v_in, wv)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (qh, kh, vh) = if self.n_heads == 1 {
                (q, k, v)
            } else {
                let off = h * self.head_dim;
                (g.slice_cols(q, off, self.head_dim)?, g.slice_cols(k, off, self.head_dim)?, g.slice_cols(v, off, self.head_dim)?)
            };
            let scores = g.matmul_t(qh, kh)?;
            let mut scores = g.scale(scores, scale)?;
            if let Some(m) = mask {
                scores = g.masked_fill(scores, m)?;
            }
            let attn = g.softmax(scores)?;
            weights.push(attn);
            heads.push(g.matmul(attn, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        Ok((g.matmul(cat, wo)?, weights))
    }
}

/// Position-wise `linear → ReLU → linear`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.ff1"), dim, hidden, true, rng),
            outer: Linear::new(store, &format!("{name}.ff2"), hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, x)?;
        let h = g.relu(h)?;
        self.outer.forward(g, h)
    }
}

/// Self-attention, cross-attention onto image features, feed-forward; each
/// wrapped as `LayerNorm(x + sublayer(x))`.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub cross_attn: MultiHeadAttention,
    pub ff: FeedForward,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &DecoderConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.model_dim;
        Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), d, cfg.n_heads, cfg.head_dim, rng),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross"), d, cfg.n_heads, cfg.head_dim, rng),
            ff: FeedForward::new(store, name, d, cfg.ff_dim, rng),
            norm1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            norm2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            norm3: LayerNorm::new(store, &format!("{name}.ln3"), d),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, feats: Var, self_mask: Option<&[bool]>) -> Result<Var> {
        let a = self.self_attn.forward(g, x, x, x, self_mask)?;
        let x1 = g.add(x, a)?;
        let x1 = self.norm1.forward(g, x1)?;
        let c = self.cross_attn.forward(g, x1, feats, feats, None)?;
        let x2 = g.add(x1, c)?;
        let x2 = self.norm2.forward(g, x2)?;
        let f = self.ff.forward(g, x2)?;
        let x3 = g.add(x2, f)?;
        self.norm3.forward(g, x3)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderStack {
    pub config: DecoderConfig,
    pub layers: Vec<DecoderLayer>,
}

impl DecoderStack {
    pub fn new(store: &mut ParamStore, name: &str, config: DecoderConfig, rng: &mut impl Rng) -> Self {
        let layers = (0..config.n_layers)
            .map(|i| DecoderLayer::new(store, &format!("{name}.layer{i}"), &config, rng))
            .collect();
        Self { config, layers }
    }

    /// Runs every layer. `pad` marks padded rows of `x`; the causal mask is
    /// added when the config asks for it.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, feats: Var, pad: Option<&[bool]>) -> Result<Var> {
        let s = g.value(x).rows();
        if g.value(x).cols() != self.config.model_dim || g.value(feats).cols() != self.config.model_dim {
            return Err(shape_err(
                "decoder",
                format!("inputs {:?} / features {:?} for model_dim {}", g.value(x).shape(), g.value(feats).shape(), self.config.model_dim),
            ));
        }
        let mut mask: Option<Vec<bool>> = self.config.causal.then(|| causal_mask(s));
        if let Some(p) = pad {
            if p.len() != s {
                return Err(shape_err("decoder", format!("pad mask of {} for {s} rows", p.len())));
            }
            let km = key_padding_mask(s, p);
            mask = Some(match mask {
                Some(m) => combine_masks(&m, &km),
                None => km,
            });
        }
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(g, h, feats, mask.as_deref())?;
        }
        Ok(h)
    }
}

/// Learned-query attention pooling of the unmasked rows of `E`.
#[derive(Debug, Clone)]
pub struct AttentionReduce {
    pub query: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub dim: usize,
}

impl AttentionReduce {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            query: store.add_normal(format!("{name}.q"), 1, dim, (1.0 / dim as f64).sqrt(), rng),
            wk: store.add_glorot(format!("{name}.wk"), dim, dim, rng),
            wv: store.add_glorot(format!("{name}.wv"), dim, dim, rng),
            dim,
        }
    }

    /// `softmax(mask((E·W_k)·qᵀ / √e))ᵀ · (E·W_v)`, giving `1×e`.
    pub fn forward(&self, g: &mut Graph<'_>, e: Var, pad: Option<&[bool]>) -> Result<Var> {
        Ok(self.forward_with_weights(g, e, pad)?.0)
    }

    pub fn forward_with_weights(&self, g: &mut Graph<'_>, e: Var, pad: Option<&[bool]>) -> Result<(Var, Var)> {
        let s = g.value(e).rows();
        if let Some(p) = pad {
            if p.len() != s {
                return Err(shape_err("attention_reduce", format!("pad mask of {} for {s} rows", p.len())));
            }
            if p.iter().all(|&m| m) {
                return Err(TensorError::AllRowsMasked);
            }
        }
        let (q, wk, wv) = (g.param(self.query), g.param(self.wk), g.param(self.wv));
        let k = g.matmul(e, wk)?;
        let scores = g.matmul_t(q, k)?; // 1×s
        let mut scores = g.scale(scores, 1.0 / (self.dim as f64).sqrt())?;
        if let Some(p) = pad {
            scores = g.masked_fill(scores, p)?;
        }
        let w = g.softmax(scores)?;
        let v = g.matmul(e, wv)?;
        Ok((g.matmul(w, v)?, w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut impl Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn causal_mask_layout() {
        let m = causal_mask(3);
        assert_eq!(m, vec![false, true, true, false, false, true, false, false, false]);
    }

    #[test]
    fn single_key_gives_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 2, 4, &mut rng);
        let q = rand_matrix(&mut rng, 5, 8);
        let kv = rand_matrix(&mut rng, 1, 8);
        let mut g = Graph::with_params(&store);
        let qv = g.constant(q);
        let kvv = g.constant(kv.clone());
        let out = mha.forward(&mut g, qv, kvv, kvv, None).unwrap();
        let want = kv
            .matmul(store.value(mha.wv))
            .unwrap()
            .matmul(store.value(mha.wo))
            .unwrap();
        for r in 0..5 {
            for c in 0..8 {
                assert!((g.value(out).get(r, c) - want.get(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mask_shape_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 1, 4, &mut rng);
        let mut g = Graph::with_params(&store);
        let x = g.constant(rand_matrix(&mut rng, 3, 4));
        assert!(mha.forward(&mut g, x, x, x, Some(&[false; 4])).is_err());
    }

    #[test]
    fn reduce_rejects_all_masked() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let red = AttentionReduce::new(&mut store, "r", 4, &mut rng);
        let mut g = Graph::with_params(&store);
        let e = g.constant(rand_matrix(&mut rng, 2, 4));
        assert!(red.forward(&mut g, e, Some(&[true, true])).is_err());
    }
}
