//! Forecasting heads mapping an `N × d` patch representation to `H` steps.
//!
//! Heads are biasless so that allocated weights match the closed-form counts
//! exactly. One head is shared across channels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamGroup, ParamId, ParamStore};
use crate::rng::{xavier_uniform, Rng64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    Linear,
    ProjDown,
    LessFeature,
    AvgPool,
    Conv2d,
}

impl HeadVariant {
    pub const ALL: [HeadVariant; 5] = [
        HeadVariant::Linear,
        HeadVariant::ProjDown,
        HeadVariant::LessFeature,
        HeadVariant::AvgPool,
        HeadVariant::Conv2d,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadVariant::Linear => "linear",
            HeadVariant::ProjDown => "proj_down",
            HeadVariant::LessFeature => "less_feature",
            HeadVariant::AvgPool => "avg_pool",
            HeadVariant::Conv2d => "conv2d",
        }
    }
}

impl fmt::Display for HeadVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        HeadVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown head variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub variant: HeadVariant,
    pub n_patches: usize,
    pub d_model: usize,
    pub horizon: usize,
    /// Reduction factor; `d' = d / beta`.
    pub beta: usize,
    /// Convolution kernel width.
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    /// Convolution stride; `beta` when unset.
    #[serde(default)]
    pub stride: Option<usize>,
}

fn default_kernel() -> usize {
    3
}

impl HeadConfig {
    pub fn new(variant: HeadVariant, n_patches: usize, d_model: usize, horizon: usize, beta: usize) -> Self {
        HeadConfig {
            variant,
            n_patches,
            d_model,
            horizon,
            beta,
            kernel: default_kernel(),
            stride: None,
        }
    }

    pub fn reduced_dim(&self) -> usize {
        self.d_model / self.beta
    }

    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(self.beta)
    }

    /// Patch positions remaining after pooling (`⌊N/2⌋`) or striding (`⌊N/s⌋`).
    pub fn reduced_patches(&self) -> usize {
        match self.variant {
            HeadVariant::AvgPool => self.n_patches / 2,
            HeadVariant::Conv2d => self.n_patches / self.stride(),
            _ => self.n_patches,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_patches == 0 || self.d_model == 0 || self.horizon == 0 || self.beta == 0 {
            return Err(Error::Config("head extents must be positive".into()));
        }
        if self.d_model % self.beta != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by beta {}",
                self.d_model, self.beta
            )));
        }
        if self.variant == HeadVariant::Conv2d && (self.kernel == 0 || self.stride() == 0) {
            return Err(Error::Config("conv kernel and stride must be positive".into()));
        }
        if self.reduced_patches() == 0 {
            return Err(Error::Config(format!(
                "{} head leaves no patches (N = {})",
                self.variant, self.n_patches
            )));
        }
        Ok(())
    }

    /// Exact number of trainable scalars for this head.
    pub fn param_count(&self) -> usize {
        let (n, d, h, dr) = (self.n_patches, self.d_model, self.horizon, self.reduced_dim());
        match self.variant {
            HeadVariant::Linear => n * d * h,
            HeadVariant::ProjDown => d * dr + n * dr * h,
            HeadVariant::LessFeature => n * dr * h,
            HeadVariant::AvgPool => d * dr + self.reduced_patches() * dr * h,
            HeadVariant::Conv2d => self.kernel + self.reduced_patches() * d * h,
        }
    }

    /// Dense linear head with the same `N`, `d`, `H`.
    pub fn linear_baseline(&self) -> HeadConfig {
        HeadConfig {
            variant: HeadVariant::Linear,
            ..self.clone()
        }
    }

    /// `1 − count/count(Linear)` in percent, rounded to 0.1.
    pub fn reduction_percentage(&self) -> Result<f64> {
        if self.variant == HeadVariant::Linear {
            return Err(Error::Config("reduction is relative to the linear head".into()));
        }
        let base = self.linear_baseline().param_count() as f64;
        let pct = 100.0 * (1.0 - self.param_count() as f64 / base);
        Ok((pct * 10.0).round() / 10.0)
    }
}

#[derive(Clone, Debug)]
pub enum HeadParams {
    Linear { w: ParamId },
    ProjDown { w1: ParamId, w2: ParamId },
    LessFeature { w: ParamId },
    AvgPool { w1: ParamId, w2: ParamId },
    Conv2d { kernel: ParamId, w: ParamId },
}

#[derive(Clone, Debug)]
pub struct Head {
    pub cfg: HeadConfig,
    pub params: HeadParams,
}

impl Head {
    pub fn new(cfg: HeadConfig, store: &mut ParamStore, rng: &mut Rng64) -> Result<Self> {
        cfg.validate()?;
        let (n, d, h, dr) = (cfg.n_patches, cfg.d_model, cfg.horizon, cfg.reduced_dim());
        let mut add = |name: &str, t: Tensor| store.add(format!("head.{name}"), ParamGroup::Head, t, true);
        let params = match cfg.variant {
            HeadVariant::Linear => HeadParams::Linear {
                w: add("w", xavier_uniform(rng, n * d, h)),
            },
            HeadVariant::ProjDown => HeadParams::ProjDown {
                w1: add("w1", xavier_uniform(rng, d, dr)),
                w2: add("w2", xavier_uniform(rng, n * dr, h)),
            },
            HeadVariant::LessFeature => HeadParams::LessFeature {
                w: add("w", xavier_uniform(rng, n * dr, h)),
            },
            HeadVariant::AvgPool => HeadParams::AvgPool {
                w1: add("w1", xavier_uniform(rng, d, dr)),
                w2: add("w2", xavier_uniform(rng, cfg.reduced_patches() * dr, h)),
            },
            HeadVariant::Conv2d => {
                let k = cfg.kernel;
                let mut centre = vec![0.0; k];
                centre[(k - 1) / 2] = 1.0;
                HeadParams::Conv2d {
                    kernel: add("kernel", Tensor::new(vec![1, k], centre)?),
                    w: add("w", xavier_uniform(rng, cfg.reduced_patches() * d, h)),
                }
            }
        };
        Ok(Head { cfg, params })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match &self.params {
            HeadParams::Linear { w } | HeadParams::LessFeature { w } => vec![*w],
            HeadParams::ProjDown { w1, w2 } | HeadParams::AvgPool { w1, w2 } => vec![*w1, *w2],
            HeadParams::Conv2d { kernel, w } => vec![*kernel, *w],
        }
    }

    /// Scalars actually allocated in `store` for this head.
    pub fn allocated(&self, store: &ParamStore) -> usize {
        self.param_ids().iter().map(|&id| store.value(id).len()).sum()
    }

    /// Map stacked representations `[batch·N × d]` to forecasts `[batch × H]`.
    pub fn forward(&self, b: &mut Binder, x: Var, batch: usize) -> Result<Var> {
        let cfg = &self.cfg;
        let (n, d, dr) = (cfg.n_patches, cfg.d_model, cfg.reduced_dim());
        let shape = b.graph.value(x).shape().to_vec();
        if shape != [batch * n, d] {
            return Err(Error::dim("head_forward", &shape, &[batch * n, d]));
        }
        match &self.params {
            HeadParams::Linear { w } => {
                let flat = b.graph.reshape(x, &[batch, n * d])?;
                let w = b.var(*w);
                b.graph.matmul(flat, w)
            }
            HeadParams::ProjDown { w1, w2 } => {
                let w1 = b.var(*w1);
                let down = b.graph.matmul(x, w1)?;
                let flat = b.graph.reshape(down, &[batch, n * dr])?;
                let w2 = b.var(*w2);
                b.graph.matmul(flat, w2)
            }
            HeadParams::LessFeature { w } => {
                let kept = if dr == d { x } else { b.graph.slice(x, (0, batch * n), (0, dr))? };
                let flat = b.graph.reshape(kept, &[batch, n * dr])?;
                let w = b.var(*w);
                b.graph.matmul(flat, w)
            }
            HeadParams::AvgPool { w1, w2 } => {
                let np = cfg.reduced_patches();
                let pooled = b.graph.row_mix(x, &pool_matrix(n))?;
                let w1 = b.var(*w1);
                let down = b.graph.matmul(pooled, w1)?;
                let flat = b.graph.reshape(down, &[batch, np * dr])?;
                let w2 = b.var(*w2);
                b.graph.matmul(flat, w2)
            }
            HeadParams::Conv2d { kernel, w } => {
                let np = cfg.reduced_patches();
                let kv = b.var(*kernel);
                let mut acc: Option<Var> = None;
                for j in 0..cfg.kernel {
                    let sel = conv_selector(n, cfg.kernel, cfg.stride(), j);
                    let picked = b.graph.row_mix(x, &sel)?;
                    let kj = b.graph.slice(kv, (0, 1), (j, j + 1))?;
                    let term = b.graph.scale(kj, picked)?;
                    acc = Some(match acc {
                        None => term,
                        Some(a) => b.graph.add(a, term)?,
                    });
                }
                let conv = acc.expect("kernel is non-empty");
                let flat = b.graph.reshape(conv, &[batch, np * d])?;
                let w = b.var(*w);
                b.graph.matmul(flat, w)
            }
        }
    }
}

/// `⌊N/2⌋ × N` averaging of consecutive patch pairs; an odd last patch is dropped.
pub fn pool_matrix(n: usize) -> Tensor {
    let out = n / 2;
    let mut m = Tensor::zeros(&[out.max(1), n]);
    for t in 0..out {
        m.data_mut()[t * n + 2 * t] = 0.5;
        m.data_mut()[t * n + 2 * t + 1] = 0.5;
    }
    m
}

/// Selection matrix picking input patch `t·s + j − ⌊(k−1)/2⌋` for output `t`
/// (zero padding outside `[0, N)`).
fn conv_selector(n: usize, k: usize, s: usize, j: usize) -> Tensor {
    let out = n / s;
    let pad = (k - 1) / 2;
    let mut m = Tensor::zeros(&[out, n]);
    for t in 0..out {
        let src = (t * s + j) as isize - pad as isize;
        if src >= 0 && (src as usize) < n {
            m.data_mut()[t * n + src as usize] = 1.0;
        }
    }
    m
}

/// One row of the head-size comparison grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParamRow {
    pub horizon: usize,
    pub beta: usize,
    pub linear: usize,
    pub reduced: usize,
    pub reduction_pct: f64,
}

/// ProjDown vs Linear counts for every `(H, β)` pair.
pub fn head_param_grid(n_patches: usize, d_model: usize, horizons: &[usize], betas: &[usize]) -> Result<Vec<HeadParamRow>> {
    let mut rows = Vec::new();
    for &h in horizons {
        for &beta in betas {
            let cfg = HeadConfig::new(HeadVariant::ProjDown, n_patches, d_model, h, beta);
            cfg.validate()?;
            rows.push(HeadParamRow {
                horizon: h,
                beta,
                linear: cfg.linear_baseline().param_count(),
                reduced: cfg.param_count(),
                reduction_pct: cfg.reduction_percentage()?,
            });
        }
    }
    Ok(rows)
}
