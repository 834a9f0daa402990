//! Gated low-rank adapters: `h = W⁰x + g·B(Ax)` at every linear site.
//!
//! Masking a site forces its gate to zero, freezes `A`, `B` and `g`, and
//! skips the low-rank path entirely in the forward pass, so a fully masked
//! model reproduces the frozen backbone bit for bit.

use std::collections::{BTreeMap, BTreeSet};

use crate::autodiff::{Tensor, Var};
use crate::backbone::{Backbone, Site, Sublayer};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamGroup, ParamId, ParamStore};
use crate::rng::{normal_tensor, Rng64};

/// Standard deviation of the `A` initializer.
pub const LORA_A_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct GatedLoraModule {
    pub site: Site,
    /// `r × d_in`
    pub a: ParamId,
    /// `d_out × r`
    pub b: ParamId,
    /// one-element gate
    pub gate: ParamId,
    pub rank: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl GatedLoraModule {
    pub fn param_count(&self) -> usize {
        self.rank * (self.d_in + self.d_out) + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Saved {
    gate: f64,
    trainable: [bool; 3],
}

/// Registry of gated adapters keyed by site, plus the current mask.
#[derive(Clone, Debug)]
pub struct GateSet {
    pub rank: usize,
    modules: BTreeMap<Site, GatedLoraModule>,
    masked: BTreeSet<Site>,
    saved: BTreeMap<Site, Saved>,
}

impl GateSet {
    /// Attach an adapter to every linear site of `backbone`: `A ~ N(0, 0.02²)`,
    /// `B = 0`, `g = 1`, all trainable.
    pub fn new(backbone: &Backbone, store: &mut ParamStore, rank: usize, rng: &mut Rng64) -> Result<Self> {
        Self::for_sites(backbone, store, rank, &backbone.cfg.sites(), rng)
    }

    pub fn for_sites(
        backbone: &Backbone,
        store: &mut ParamStore,
        rank: usize,
        sites: &[Site],
        rng: &mut Rng64,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        let mut modules = BTreeMap::new();
        for &site in sites {
            let w = backbone.base_weight(site)?;
            let shape = store.value(w).shape().to_vec();
            let (d_in, d_out) = (shape[0], shape[1]);
            let tag = format!("lora.{}.{}", site.layer, site.sublayer.name());
            let a = store.add(format!("{tag}.a"), ParamGroup::Lora, normal_tensor(rng, &[rank, d_in], LORA_A_INIT_STD), true);
            let b = store.add(format!("{tag}.b"), ParamGroup::Lora, Tensor::zeros(&[d_out, rank]), true);
            let gate = store.add(format!("{tag}.g"), ParamGroup::Gate, Tensor::scalar(1.0), true);
            modules.insert(
                site,
                GatedLoraModule {
                    site,
                    a,
                    b,
                    gate,
                    rank,
                    d_in,
                    d_out,
                },
            );
        }
        Ok(GateSet {
            rank,
            modules,
            masked: BTreeSet::new(),
            saved: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    pub fn sites(&self) -> impl Iterator<Item = Site> + '_ {
        self.modules.keys().copied()
    }

    pub fn module(&self, site: Site) -> Result<&GatedLoraModule> {
        self.modules
            .get(&site)
            .ok_or_else(|| Error::Registry(format!("no adapter registered at {site}")))
    }

    pub fn modules(&self) -> impl Iterator<Item = &GatedLoraModule> {
        self.modules.values()
    }

    pub fn is_masked(&self, site: Site) -> bool {
        self.masked.contains(&site)
    }

    pub fn masked(&self) -> &BTreeSet<Site> {
        &self.masked
    }

    pub fn active_sites(&self) -> Vec<Site> {
        self.sites().filter(|s| !self.masked.contains(s)).collect()
    }

    pub fn gate_value(&self, store: &ParamStore, site: Site) -> Result<f64> {
        Ok(store.value(self.module(site)?.gate).item())
    }

    pub fn gate_ids(&self, sites: &[Site]) -> Result<Vec<ParamId>> {
        sites.iter().map(|&s| self.module(s).map(|m| m.gate)).collect()
    }

    /// `W⁰x + g·B(Ax)`; the base product alone when the site is masked.
    pub fn adapted_linear(&self, bind: &mut Binder, x: Var, base: ParamId, site: Site) -> Result<Var> {
        let m = self.module(site)?;
        let w = bind.var(base);
        let base_out = bind.graph.matmul(x, w)?;
        if self.masked.contains(&site) {
            return Ok(base_out);
        }
        let (a, b, g) = (bind.var(m.a), bind.var(m.b), bind.var(m.gate));
        let ax = bind.graph.matmul_nt(x, a)?;
        let bax = bind.graph.matmul_nt(ax, b)?;
        let update = bind.graph.scale(g, bax)?;
        bind.graph.add(base_out, update)
    }

    /// Mask `sites`: gate forced to 0, adapter frozen. Already-masked sites are
    /// skipped with a warning.
    pub fn mask(&mut self, store: &mut ParamStore, sites: &BTreeSet<Site>) -> Result<()> {
        for &site in sites {
            let m = self.module(site)?.clone();
            if self.masked.contains(&site) {
                log::warn!("gate {site} is already masked");
                continue;
            }
            self.saved.insert(
                site,
                Saved {
                    gate: store.value(m.gate).item(),
                    trainable: [store.is_trainable(m.a), store.is_trainable(m.b), store.is_trainable(m.gate)],
                },
            );
            store.value_mut(m.gate).data_mut()[0] = 0.0;
            for id in [m.a, m.b, m.gate] {
                store.set_trainable(id, false);
            }
            self.masked.insert(site);
        }
        Ok(())
    }

    /// Undo [`GateSet::mask`] for `sites`, restoring the pre-mask gate value
    /// and trainable flags exactly.
    pub fn restore(&mut self, store: &mut ParamStore, sites: &BTreeSet<Site>) -> Result<()> {
        for &site in sites {
            let m = self.module(site)?.clone();
            let Some(saved) = self.saved.remove(&site) else {
                continue;
            };
            store.value_mut(m.gate).data_mut()[0] = saved.gate;
            store.set_trainable(m.a, saved.trainable[0]);
            store.set_trainable(m.b, saved.trainable[1]);
            store.set_trainable(m.gate, saved.trainable[2]);
            self.masked.remove(&site);
        }
        Ok(())
    }

    /// Set trainability of every unmasked adapter.
    pub fn set_trainable(&self, store: &mut ParamStore, trainable: bool) {
        for m in self.modules.values() {
            if !self.masked.contains(&m.site) {
                for id in [m.a, m.b, m.gate] {
                    store.set_trainable(id, trainable);
                }
            }
        }
    }

    /// `Σ r·(d_in + d_out) + 1` over unmasked sites.
    pub fn trainable_parameter_count(&self) -> usize {
        self.modules
            .values()
            .filter(|m| !self.masked.contains(&m.site))
            .map(GatedLoraModule::param_count)
            .sum()
    }

    /// One `layer,sublayer` line per masked site, sublayer as its 0-based index.
    pub fn export_mask(&self) -> String {
        format_mask(&self.masked)
    }
}

pub fn format_mask(sites: &BTreeSet<Site>) -> String {
    sites
        .iter()
        .map(|s| format!("{},{}\n", s.layer, s.sublayer.index()))
        .collect()
}

/// Parse the `layer,sublayer` mask format. Sublayers may be given as an
/// index or a name; blank lines and `#` comments are ignored.
pub fn parse_mask(text: &str) -> Result<BTreeSet<Site>> {
    let mut out = BTreeSet::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (l, s) = line
            .split_once(',')
            .ok_or_else(|| Error::Parse(format!("mask line {}: expected `layer,sublayer`", n + 1)))?;
        let layer = l
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("mask line {}: bad layer `{l}`", n + 1)))?;
        let s = s.trim();
        let sublayer = s
            .parse::<usize>()
            .ok()
            .and_then(Sublayer::from_index)
            .or_else(|| Sublayer::ALL.iter().copied().find(|x| x.name().eq_ignore_ascii_case(s)))
            .ok_or_else(|| Error::Parse(format!("mask line {}: bad sublayer `{s}`", n + 1)))?;
        out.insert(Site { layer, sublayer });
    }
    Ok(out)
}
