//! Patch-based transformer encoder with post-norm residual blocks.
//!
//! Every encoder layer holds seven linear sublayers (query, key, value,
//! output, and the three GLU feed-forward projections). Base weights are
//! stored as `d_in × d_out` matrices and applied as `x · W`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::lora::GateSet;
use crate::params::{Binder, ParamGroup, ParamId, ParamStore};
use crate::rng::{xavier_uniform, Rng64};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    /// `(x·W_f0 ⊗ GELU(x·W_f1))·W_f2`, no biases.
    #[default]
    Glu,
    /// `ReLU(x·W_f1 + b1)·W_f2 + b2`.
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub seq_len: usize,
    pub patch_len: usize,
    #[serde(default)]
    pub ffn: FfnKind,
}

impl BackboneConfig {
    /// MOMENT-base geometry.
    pub fn full() -> Self {
        BackboneConfig {
            d_model: 768,
            n_layers: 12,
            n_heads: 12,
            d_ff: 3072,
            seq_len: 512,
            patch_len: 8,
            ffn: FfnKind::Glu,
        }
    }

    pub fn desk() -> Self {
        BackboneConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 64,
            seq_len: 64,
            patch_len: 8,
            ffn: FfnKind::Glu,
        }
    }

    pub fn n_patches(&self) -> usize {
        self.seq_len / self.patch_len
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.patch_len == 0 || self.seq_len == 0 {
            return Err(Error::Config("backbone extents must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.seq_len % self.patch_len != 0 {
            return Err(Error::Config(format!(
                "seq_len {} not divisible by patch_len {}",
                self.seq_len, self.patch_len
            )));
        }
        Ok(())
    }

    pub fn sublayers(&self) -> &'static [Sublayer] {
        match self.ffn {
            FfnKind::Glu => &Sublayer::ALL,
            FfnKind::Relu => &Sublayer::RELU,
        }
    }

    /// Every linear site in (layer, sublayer) order.
    pub fn sites(&self) -> Vec<Site> {
        (0..self.n_layers)
            .flat_map(|layer| self.sublayers().iter().map(move |&sublayer| Site { layer, sublayer }))
            .collect()
    }
}

/// Linear sublayer within an encoder layer, in gate-index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sublayer {
    Query,
    Key,
    Value,
    Output,
    /// GELU-activated GLU branch (`W_f1`).
    Gate,
    /// Linear GLU branch (`W_f0`).
    Up,
    /// Output projection of the feed-forward block (`W_f2`).
    Down,
}

impl Sublayer {
    pub const ALL: [Sublayer; 7] = [
        Sublayer::Query,
        Sublayer::Key,
        Sublayer::Value,
        Sublayer::Output,
        Sublayer::Gate,
        Sublayer::Up,
        Sublayer::Down,
    ];
    const RELU: [Sublayer; 6] = [
        Sublayer::Query,
        Sublayer::Key,
        Sublayer::Value,
        Sublayer::Output,
        Sublayer::Up,
        Sublayer::Down,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(j: usize) -> Option<Sublayer> {
        Self::ALL.get(j).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Sublayer::Query => "Query",
            Sublayer::Key => "Key",
            Sublayer::Value => "Value",
            Sublayer::Output => "Output",
            Sublayer::Gate => "Gate",
            Sublayer::Up => "Up",
            Sublayer::Down => "Down",
        }
    }
}

/// A linear site `(layer i, sublayer j)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Site {
    pub layer: usize,
    pub sublayer: Sublayer,
}

impl Site {
    pub fn new(layer: usize, sublayer: Sublayer) -> Self {
        Site { layer, sublayer }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}", self.layer, self.sublayer.name())
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    /// Linear GLU branch; unused by the ReLU variant.
    pub w_f0: Option<ParamId>,
    pub w_f1: ParamId,
    pub w_f2: ParamId,
    /// `(b1, b2)` for the ReLU variant.
    pub relu_bias: Option<(ParamId, ParamId)>,
    pub ln1: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
}

impl EncoderLayer {
    pub fn weight(&self, sublayer: Sublayer) -> Option<ParamId> {
        match sublayer {
            Sublayer::Query => Some(self.w_q),
            Sublayer::Key => Some(self.w_k),
            Sublayer::Value => Some(self.w_v),
            Sublayer::Output => Some(self.w_o),
            Sublayer::Gate => self.w_f0.map(|_| self.w_f1),
            Sublayer::Up => self.w_f0.or(Some(self.w_f1)),
            Sublayer::Down => Some(self.w_f2),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub layers: Vec<EncoderLayer>,
}

impl Backbone {
    /// Allocate Xavier-uniform base weights (frozen) in `store`.
    pub fn new(cfg: BackboneConfig, store: &mut ParamStore, rng: &mut Rng64) -> Result<Self> {
        cfg.validate()?;
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let embed_w = store.add("embed.w", ParamGroup::Embedding, xavier_uniform(rng, cfg.patch_len, d), false);
        let embed_b = store.add("embed.b", ParamGroup::Embedding, Tensor::zeros(&[d]), false);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let mut w = |name: &str, fan_in: usize, fan_out: usize| {
                store.add(format!("layer{i}.{name}"), ParamGroup::Backbone, xavier_uniform(rng, fan_in, fan_out), false)
            };
            let w_q = w("w_q", d, d);
            let w_k = w("w_k", d, d);
            let w_v = w("w_v", d, d);
            let w_o = w("w_o", d, d);
            let w_f0 = match cfg.ffn {
                FfnKind::Glu => Some(w("w_f0", d, f)),
                FfnKind::Relu => None,
            };
            let w_f1 = w("w_f1", d, f);
            let w_f2 = w("w_f2", f, d);
            let relu_bias = match cfg.ffn {
                FfnKind::Glu => None,
                FfnKind::Relu => Some((
                    store.add(format!("layer{i}.b1"), ParamGroup::Backbone, Tensor::zeros(&[f]), false),
                    store.add(format!("layer{i}.b2"), ParamGroup::Backbone, Tensor::zeros(&[d]), false),
                )),
            };
            let mut ln = |name: &str| {
                (
                    store.add(format!("layer{i}.{name}.gain"), ParamGroup::Backbone, Tensor::ones(&[d]), false),
                    store.add(format!("layer{i}.{name}.bias"), ParamGroup::Backbone, Tensor::zeros(&[d]), false),
                )
            };
            let ln1 = ln("ln1");
            let ln2 = ln("ln2");
            layers.push(EncoderLayer {
                w_q,
                w_k,
                w_v,
                w_o,
                w_f0,
                w_f1,
                w_f2,
                relu_bias,
                ln1,
                ln2,
            });
        }
        Ok(Backbone {
            cfg,
            embed_w,
            embed_b,
            layers,
        })
    }

    pub fn base_weight(&self, site: Site) -> Result<ParamId> {
        self.layers
            .get(site.layer)
            .and_then(|l| l.weight(site.sublayer))
            .ok_or_else(|| Error::Registry(format!("no linear sublayer at {site}")))
    }

    /// Linear patch embedding of stacked patches `[rows × P]` into `[rows × d]`.
    pub fn embed_patches(&self, b: &mut Binder, patches: Var) -> Result<Var> {
        let shape = b.graph.value(patches).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.patch_len {
            return Err(Error::dim("embed_patches", &shape, &[shape[0], self.cfg.patch_len]));
        }
        let w = b.var(self.embed_w);
        let bias = b.var(self.embed_b);
        let xw = b.graph.matmul(patches, w)?;
        let tiled = b.graph.tile_rows(bias, shape[0])?;
        b.graph.add(xw, tiled)
    }

    fn project(&self, b: &mut Binder, x: Var, site: Site, lora: Option<&GateSet>) -> Result<Var> {
        let w = self.base_weight(site)?;
        match lora {
            Some(gs) => gs.adapted_linear(b, x, w, site),
            None => {
                let wv = b.var(w);
                b.graph.matmul(x, wv)
            }
        }
    }

    /// Multi-head scaled dot-product attention over each block of `n_patches`
    /// rows of `x`, followed by the output projection.
    pub fn mha_forward(&self, b: &mut Binder, x: Var, layer: usize, lora: Option<&GateSet>) -> Result<Var> {
        let n = self.cfg.n_patches();
        let dh = self.cfg.head_dim();
        let rows = b.graph.value(x).rows();
        if rows % n != 0 {
            return Err(Error::dim("mha_forward", b.graph.value(x).shape(), &[n, self.cfg.d_model]));
        }
        let q = self.project(b, x, Site::new(layer, Sublayer::Query), lora)?;
        let k = self.project(b, x, Site::new(layer, Sublayer::Key), lora)?;
        let v = self.project(b, x, Site::new(layer, Sublayer::Value), lora)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let single = rows == n && self.cfg.n_heads == 1;
        let mut samples = Vec::with_capacity(rows / n);
        for s in 0..rows / n {
            let rr = (s * n, (s + 1) * n);
            let mut heads = Vec::with_capacity(self.cfg.n_heads);
            for h in 0..self.cfg.n_heads {
                let cc = (h * dh, (h + 1) * dh);
                let (qs, ks, vs) = if single {
                    (q, k, v)
                } else {
                    (b.graph.slice(q, rr, cc)?, b.graph.slice(k, rr, cc)?, b.graph.slice(v, rr, cc)?)
                };
                let logits = b.graph.matmul_nt(qs, ks)?;
                let logits = b.graph.scale_const(logits, scale);
                let att = b.graph.softmax_rows(logits)?;
                heads.push(b.graph.matmul(att, vs)?);
            }
            samples.push(if heads.len() == 1 { heads[0] } else { b.graph.concat_cols(&heads)? });
        }
        let concat = if samples.len() == 1 { samples[0] } else { b.graph.concat_rows(&samples)? };
        self.project(b, concat, Site::new(layer, Sublayer::Output), lora)
    }

    pub fn ffn_forward(&self, b: &mut Binder, x: Var, layer: usize, lora: Option<&GateSet>) -> Result<Var> {
        let l = &self.layers[layer];
        match self.cfg.ffn {
            FfnKind::Glu => {
                let lin = self.project(b, x, Site::new(layer, Sublayer::Up), lora)?;
                let pre = self.project(b, x, Site::new(layer, Sublayer::Gate), lora)?;
                let act = b.graph.gelu(pre);
                let h = b.graph.mul(lin, act)?;
                self.project(b, h, Site::new(layer, Sublayer::Down), lora)
            }
            FfnKind::Relu => {
                let (b1, b2) = l.relu_bias.expect("relu variant carries biases");
                let rows = b.graph.value(x).rows();
                let pre = self.project(b, x, Site::new(layer, Sublayer::Up), lora)?;
                let b1 = b.var(b1);
                let b1 = b.graph.tile_rows(b1, rows)?;
                let pre = b.graph.add(pre, b1)?;
                let act = b.graph.relu(pre);
                let out = self.project(b, act, Site::new(layer, Sublayer::Down), lora)?;
                let b2 = b.var(b2);
                let b2 = b.graph.tile_rows(b2, rows)?;
                b.graph.add(out, b2)
            }
        }
    }

    /// `x ← LN(x + MHA(x)); x ← LN(x + FFN(x))` per layer.
    pub fn encoder_forward(&self, b: &mut Binder, mut x: Var, lora: Option<&GateSet>) -> Result<Var> {
        for (i, l) in self.layers.iter().enumerate() {
            let att = self.mha_forward(b, x, i, lora)?;
            let r = b.graph.add(x, att)?;
            let (g1, b1) = (b.var(l.ln1.0), b.var(l.ln1.1));
            x = b.graph.layer_norm(r, g1, b1)?;
            let ff = self.ffn_forward(b, x, i, lora)?;
            let r = b.graph.add(x, ff)?;
            let (g2, b2) = (b.var(l.ln2.0), b.var(l.ln2.1));
            x = b.graph.layer_norm(r, g2, b2)?;
        }
        Ok(x)
    }

    /// Embed and encode a batch of series stacked row-major as `[batch × T]`.
    /// Returns `[batch·N × d]`.
    pub fn forward(&self, b: &mut Binder, series: &[f64], batch: usize, lora: Option<&GateSet>) -> Result<Var> {
        let patches = patchify_batch(series, batch, self.cfg.seq_len, self.cfg.patch_len)?;
        let p = b.graph.constant(patches);
        let x = self.embed_patches(b, p)?;
        self.encoder_forward(b, x, lora)
    }
}

/// Split one channel of length `T` into `T/P` contiguous non-overlapping patches.
pub fn patchify(series: &[f64], patch_len: usize) -> Result<Tensor> {
    if patch_len == 0 || series.is_empty() || series.len() % patch_len != 0 {
        return Err(Error::Config(format!(
            "series length {} not divisible by patch length {patch_len}",
            series.len()
        )));
    }
    Tensor::new(vec![series.len() / patch_len, patch_len], series.to_vec())
}

/// Patchify `batch` series laid out row-major; patches of consecutive series
/// are stacked, giving `[batch·N × P]`.
pub fn patchify_batch(series: &[f64], batch: usize, seq_len: usize, patch_len: usize) -> Result<Tensor> {
    if series.len() != batch * seq_len {
        return Err(Error::dim("patchify", &[series.len()], &[batch, seq_len]));
    }
    if seq_len % patch_len != 0 {
        return Err(Error::Config(format!(
            "series length {seq_len} not divisible by patch length {patch_len}"
        )));
    }
    Tensor::new(vec![batch * seq_len / patch_len, patch_len], series.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::params::GradMode;
    use crate::rng::{normal_tensor, seeded};

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 12,
            seq_len: 16,
            patch_len: 4,
            ffn: FfnKind::Glu,
        }
    }

    #[test]
    fn presets() {
        let full = BackboneConfig::full();
        assert_eq!(full.n_patches(), 64);
        assert_eq!(full.sites().len(), 84);
        let desk = BackboneConfig::desk();
        assert_eq!(desk.n_patches(), 8);
        assert_eq!(desk.head_dim(), 8);
        assert_eq!(desk.sites().len(), 14);
        let mut bad = desk.clone();
        bad.n_heads = 5;
        assert!(bad.validate().is_err());
        bad = desk;
        bad.seq_len = 60;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn patchify_partition() {
        let x: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let p = patchify(&x, 8).unwrap();
        assert_eq!(p.shape(), &[1, 8]);
        assert_eq!(p.data(), &x[..]);

        let x: Vec<f64> = (0..64).map(|v| (v as f64).sin()).collect();
        let p = patchify(&x, 8).unwrap();
        assert_eq!(p.shape(), &[8, 8]);
        assert_eq!(p.row(3), &x[24..32]);
        assert_eq!(p.data(), &x[..]);

        assert_eq!(patchify(&vec![0.0; 512], 8).unwrap().rows(), 64);
        assert!(matches!(patchify(&x[..63], 8), Err(Error::Config(_))));
    }

    #[test]
    fn embedding_contracts() {
        let cfg = BackboneConfig::desk();
        let mut store = ParamStore::new();
        let bb = Backbone::new(cfg.clone(), &mut store, &mut seeded(0)).unwrap();
        *store.value_mut(bb.embed_b) = normal_tensor(&mut seeded(1), &[32], 1.0);
        let mut b = Binder::new(&store, GradMode::None);
        let z = b.graph.constant(Tensor::zeros(&[8, 8]));
        let e = bb.embed_patches(&mut b, z).unwrap();
        let out = b.graph.value(e);
        assert_eq!(out.shape(), &[8, 32]);
        for r in 0..8 {
            assert_eq!(out.row(r), store.value(bb.embed_b).data());
        }
        let wrong = b.graph.constant(Tensor::zeros(&[8, 4]));
        assert!(bb.embed_patches(&mut b, wrong).is_err());

        // identity embedding with P = d preserves values
        let mut c = tiny_cfg();
        c.patch_len = 8;
        let mut store = ParamStore::new();
        let bb = Backbone::new(c, &mut store, &mut seeded(0)).unwrap();
        *store.value_mut(bb.embed_w) = Tensor::identity(8);
        let x = normal_tensor(&mut seeded(3), &[2, 8], 1.0);
        let mut b = Binder::new(&store, GradMode::None);
        let xv = b.graph.constant(x.clone());
        let e = bb.embed_patches(&mut b, xv).unwrap();
        assert_eq!(b.graph.value(e), &x);
    }

    #[test]
    fn zero_query_key_gives_uniform_attention() {
        let mut cfg = tiny_cfg();
        cfg.n_heads = 1;
        let mut store = ParamStore::new();
        let bb = Backbone::new(cfg, &mut store, &mut seeded(2)).unwrap();
        *store.value_mut(bb.layers[0].w_q) = Tensor::zeros(&[8, 8]);
        *store.value_mut(bb.layers[0].w_k) = Tensor::zeros(&[8, 8]);
        let x = normal_tensor(&mut seeded(4), &[4, 8], 1.0);
        let mut b = Binder::new(&store, GradMode::None);
        let xv = b.graph.constant(x.clone());
        let out = bb.mha_forward(&mut b, xv, 0, None).unwrap();
        let out = b.graph.value(out).clone();

        let xw = crate::autodiff::gemm(x.data(), store.value(bb.layers[0].w_v).data(), 4, 8, 8);
        let mut mean = vec![0.0; 8];
        for r in 0..4 {
            for j in 0..8 {
                mean[j] += xw[r * 8 + j] / 4.0;
            }
        }
        let expect = crate::autodiff::gemm(&mean, store.value(bb.layers[0].w_o).data(), 1, 8, 8);
        for r in 0..4 {
            for j in 0..8 {
                assert!((out.at(r, j) - expect[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_patch_attention_is_value_output() {
        let mut cfg = tiny_cfg();
        cfg.seq_len = 4;
        let mut store = ParamStore::new();
        let bb = Backbone::new(cfg, &mut store, &mut seeded(5)).unwrap();
        let x = normal_tensor(&mut seeded(6), &[1, 8], 1.0);
        let mut b = Binder::new(&store, GradMode::None);
        let xv = b.graph.constant(x.clone());
        let out = bb.mha_forward(&mut b, xv, 0, None).unwrap();
        let xw = crate::autodiff::gemm(x.data(), store.value(bb.layers[0].w_v).data(), 1, 8, 8);
        let expect = crate::autodiff::gemm(&xw, store.value(bb.layers[0].w_o).data(), 1, 8, 8);
        for (a, e) in b.graph.value(out).data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn ffn_absorbing_zeros() {
        let mut store = ParamStore::new();
        let bb = Backbone::new(tiny_cfg(), &mut store, &mut seeded(7)).unwrap();
        let x = normal_tensor(&mut seeded(8), &[4, 8], 1.0);
        {
            let mut b = Binder::new(&store, GradMode::None);
            let z = b.graph.constant(Tensor::zeros(&[4, 8]));
            let out = bb.ffn_forward(&mut b, z, 0, None).unwrap();
            assert!(b.graph.value(out).data().iter().all(|&v| v == 0.0));
        }
        *store.value_mut(bb.layers[0].w_f1) = Tensor::zeros(&[8, 12]);
        let mut b = Binder::new(&store, GradMode::None);
        let xv = b.graph.constant(x);
        let out = bb.ffn_forward(&mut b, xv, 0, None).unwrap();
        assert!(b.graph.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_variant_runs() {
        let mut cfg = tiny_cfg();
        cfg.ffn = FfnKind::Relu;
        assert_eq!(cfg.sites().len(), 6);
        let mut store = ParamStore::new();
        let bb = Backbone::new(cfg, &mut store, &mut seeded(7)).unwrap();
        let mut b = Binder::new(&store, GradMode::None);
        let x = vec![0.5; 32];
        let out = bb.forward(&mut b, &x, 2, None).unwrap();
        assert_eq!(b.graph.value(out).shape(), &[8, 8]);
    }

    #[test]
    fn ffn_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let bb = Backbone::new(tiny_cfg(), &mut store, &mut seeded(9)).unwrap();
        let l = &bb.layers[0];
        let inputs = vec![
            normal_tensor(&mut seeded(10), &[4, 8], 1.0),
            store.value(l.w_f0.unwrap()).clone(),
            store.value(l.w_f1).clone(),
            store.value(l.w_f2).clone(),
        ];
        let r = gradcheck::check(&inputs, 1e-5, |g, v| {
            let lin = g.matmul(v[0], v[1])?;
            let pre = g.matmul(v[0], v[2])?;
            let act = g.gelu(pre);
            let h = g.mul(lin, act)?;
            let out = g.matmul(h, v[3])?;
            let sq = g.mul(out, out)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(r.passes(1e-3), "{r:?}");
    }

    #[test]
    fn encoder_shapes_and_empty_stack() {
        for layers in [0, 1, 2] {
            let mut cfg = BackboneConfig::desk();
            cfg.n_layers = layers;
            let mut store = ParamStore::new();
            let bb = Backbone::new(cfg, &mut store, &mut seeded(11)).unwrap();
            let x = normal_tensor(&mut seeded(12), &[16, 32], 1.0);
            let mut b = Binder::new(&store, GradMode::None);
            let xv = b.graph.constant(x.clone());
            let out = bb.encoder_forward(&mut b, xv, None).unwrap();
            assert_eq!(b.graph.value(out).shape(), &[16, 32]);
            if layers == 0 {
                assert!(b.graph.value(out).bit_eq(&x));
            }
        }
    }

    #[test]
    fn batched_forward_matches_per_sample() {
        let mut store = ParamStore::new();
        let bb = Backbone::new(tiny_cfg(), &mut store, &mut seeded(13)).unwrap();
        let series = normal_tensor(&mut seeded(14), &[3, 16], 1.0);
        let mut b = Binder::new(&store, GradMode::None);
        let all = bb.forward(&mut b, series.data(), 3, None).unwrap();
        let all = b.graph.value(all).clone();
        for s in 0..3 {
            let mut b1 = Binder::new(&store, GradMode::None);
            let one = bb.forward(&mut b1, series.row(s), 1, None).unwrap();
            let one = b1.graph.value(one);
            for r in 0..4 {
                for j in 0..8 {
                    assert!((one.at(r, j) - all.at(s * 4 + r, j)).abs() < 1e-12);
                }
            }
        }
    }
}
