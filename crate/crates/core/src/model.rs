//! Backbone, optional gated adapters and a forecasting head as one model.

use std::collections::{BTreeMap, BTreeSet};

use crate::autodiff::{Tensor, Var};
use crate::backbone::{Backbone, BackboneConfig, Site};
use crate::error::{Error, Result};
use crate::heads::{Head, HeadConfig};
use crate::lora::GateSet;
use crate::params::{Binder, GradMode, ParamGroup, ParamId, ParamStore};
use crate::rng::{derive, Rng64};

/// Contiguous univariate samples: `x` is `[n × T]`, `y` is `[n × H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub n: usize,
}

impl Batch {
    pub fn new(x: Vec<f64>, y: Vec<f64>, n: usize) -> Result<Self> {
        if n == 0 || x.len() % n != 0 || y.len() % n != 0 {
            return Err(Error::Input(format!(
                "batch of {n} samples cannot hold {} inputs and {} targets",
                x.len(),
                y.len()
            )));
        }
        Ok(Batch { x, y, n })
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub backbone: Backbone,
    pub lora: Option<GateSet>,
    pub head: Head,
}

impl Model {
    /// Build a model with every backbone weight frozen. Backbone weights are
    /// drawn from stream 0 of `seed`, adapters from stream 1 and the head from
    /// stream 2, so the backbone does not depend on the rest of the layout.
    pub fn new(backbone: BackboneConfig, head: HeadConfig, lora_rank: Option<usize>, seed: u64) -> Result<Self> {
        if head.n_patches != backbone.n_patches() || head.d_model != backbone.d_model {
            return Err(Error::Config(format!(
                "head expects N={} d={}, backbone gives N={} d={}",
                head.n_patches,
                head.d_model,
                backbone.n_patches(),
                backbone.d_model
            )));
        }
        let mut store = ParamStore::new();
        let bb = Backbone::new(backbone, &mut store, &mut derive(seed, 0))?;
        let lora = match lora_rank {
            Some(r) => Some(GateSet::new(&bb, &mut store, r, &mut derive(seed, 1))?),
            None => None,
        };
        let head = Head::new(head, &mut store, &mut derive(seed, 2))?;
        Ok(Model {
            store,
            backbone: bb,
            lora,
            head,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.backbone.cfg.seq_len
    }

    pub fn horizon(&self) -> usize {
        self.head.cfg.horizon
    }

    /// Copy embedding and encoder weights from `src` by parameter name.
    pub fn load_backbone(&mut self, src: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        let ids: Vec<ParamId> = self
            .store
            .iter()
            .filter(|(_, e)| matches!(e.group, ParamGroup::Embedding | ParamGroup::Backbone))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let name = self.store.entry(id).name.clone();
            let sid = src
                .find(&name)
                .ok_or_else(|| Error::Registry(format!("source has no parameter `{name}`")))?;
            self.store.set_value(id, src.value(sid).clone())?;
            copied += 1;
        }
        Ok(copied)
    }

    pub fn forward(&self, b: &mut Binder, x: &[f64], n: usize) -> Result<Var> {
        let h = self.backbone.forward(b, x, n, self.lora.as_ref())?;
        self.head.forward(b, h, n)
    }

    /// Forecasts `[n × H]` without recording gradients.
    pub fn predict(&self, x: &[f64], n: usize) -> Result<Vec<f64>> {
        let mut b = Binder::new(&self.store, GradMode::None);
        let y = self.forward(&mut b, x, n)?;
        Ok(b.graph.value(y).data().to_vec())
    }

    /// Predict in chunks of at most `chunk` samples.
    pub fn predict_all(&self, x: &[f64], chunk: usize) -> Result<Vec<f64>> {
        let t = self.seq_len();
        let mut out = Vec::with_capacity(x.len() / t * self.horizon());
        for part in x.chunks(chunk.max(1) * t) {
            out.extend(self.predict(part, part.len() / t)?);
        }
        Ok(out)
    }

    fn target(&self, batch: &Batch) -> Result<Tensor> {
        Tensor::new(vec![batch.n, self.horizon()], batch.y.clone())
    }

    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        let mut b = Binder::new(&self.store, GradMode::None);
        let y = self.forward(&mut b, &batch.x, batch.n)?;
        let t = b.graph.constant(self.target(batch)?);
        let l = b.graph.mse(y, t)?;
        Ok(b.graph.value(l).item())
    }

    /// MSE on `batch` and its gradient for every parameter selected by `mode`.
    pub fn loss_and_grads(&self, batch: &Batch, mode: GradMode) -> Result<(f64, Vec<(ParamId, Tensor)>)> {
        let mut b = Binder::new(&self.store, mode);
        let y = self.forward(&mut b, &batch.x, batch.n)?;
        let t = b.graph.constant(self.target(batch)?);
        let l = b.graph.mse(y, t)?;
        let loss = b.graph.value(l).item();
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("loss is {loss}")));
        }
        b.graph.backward(l)?;
        Ok((loss, b.grads()))
    }

    /// `∂L/∂g` for every unmasked gate on `batch`.
    pub fn gate_gradients(&self, batch: &Batch) -> Result<BTreeMap<Site, f64>> {
        let lora = self.lora.as_ref().ok_or_else(|| Error::State("model has no gated adapters".into()))?;
        let active = lora.active_sites();
        let ids = lora.gate_ids(&active)?;
        let mut b = Binder::new(&self.store, GradMode::Only(ids.iter().copied().collect()));
        let y = self.forward(&mut b, &batch.x, batch.n)?;
        let t = b.graph.constant(self.target(batch)?);
        let l = b.graph.mse(y, t)?;
        b.graph.backward(l)?;
        Ok(active
            .into_iter()
            .zip(ids)
            .map(|(s, id)| (s, b.grad(id).map_or(0.0, Tensor::item)))
            .collect())
    }

    pub fn trainable_scalars(&self) -> usize {
        self.store.trainable_scalars()
    }

    pub fn masked(&self) -> BTreeSet<Site> {
        self.lora.as_ref().map(|l| l.masked().clone()).unwrap_or_default()
    }

    /// Seeded generator for everything downstream of construction.
    pub fn stream(seed: u64, stream: u64) -> Rng64 {
        derive(seed, 16 + stream)
    }
}
