//! Synthetic series, CSV ingestion, chronological splits, normalization and
//! supervised window construction.

use std::f64::consts::PI;
use std::path::Path;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, standard_normal};

/// Floor applied to a channel's standard deviation before division.
pub const STD_FLOOR: f64 = 1e-8;

/// Multichannel series stored row-major as `[len × channels]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesDataset {
    pub name: String,
    pub frequency: String,
    channels: usize,
    values: Vec<f64>,
}

impl SeriesDataset {
    pub fn new(name: impl Into<String>, frequency: impl Into<String>, channels: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Input("dataset needs at least one channel".into()));
        }
        if values.len() % channels != 0 {
            return Err(Error::Input(format!(
                "{} values do not fill rows of {channels} channels",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite value at row {}", i / channels)));
        }
        Ok(SeriesDataset {
            name: name.into(),
            frequency: frequency.into(),
            channels,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.channels + c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.len()).map(|t| self.at(t, c)).collect()
    }

    /// Rows `[start, end)` as a new dataset.
    pub fn rows(&self, start: usize, end: usize) -> SeriesDataset {
        SeriesDataset {
            name: self.name.clone(),
            frequency: self.frequency.clone(),
            channels: self.channels,
            values: self.values[start * self.channels..end * self.channels].to_vec(),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["timestamp".to_string()];
        header.extend((0..self.channels).map(|c| format!("ch{c}")));
        w.write_record(&header)?;
        for t in 0..self.len() {
            let mut rec = vec![t.to_string()];
            rec.extend((0..self.channels).map(|c| self.at(t, c).to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Component {
    Sine { period: f64, amplitude: f64, #[serde(default)] phase: f64 },
    Trend { slope: f64, #[serde(default)] intercept: f64 },
    /// AR(1) noise `e[t] = φ·e[t−1] + σ·z[t]`.
    Ar { phi: f64, sigma: f64 },
    LevelShift { at: usize, delta: f64 },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    #[serde(default)]
    pub components: Vec<Component>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub name: String,
    #[serde(default = "default_frequency")]
    pub frequency: String,
    pub length: usize,
    pub channels: Vec<ChannelSpec>,
}

fn default_frequency() -> String {
    "h".into()
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.length == 0 || self.channels.is_empty() {
            return Err(Error::Config("synthetic spec needs a length and a channel".into()));
        }
        for comp in self.channels.iter().flat_map(|c| &c.components) {
            match *comp {
                Component::Ar { phi, sigma } => {
                    if !(phi.abs() < 1.0) {
                        return Err(Error::Numeric(format!("AR coefficient |φ| = {} is not stable", phi.abs())));
                    }
                    if !(sigma >= 0.0) {
                        return Err(Error::Config(format!("AR noise scale {sigma} must be non-negative")));
                    }
                }
                Component::Sine { period, .. } if !(period > 0.0) => {
                    return Err(Error::Config(format!("sine period {period} must be positive")));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Sum the listed components per channel. Each channel draws its noise from
/// its own stream so adding a channel never changes the others.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<SeriesDataset> {
    spec.validate()?;
    let (n, nc) = (spec.length, spec.channels.len());
    let mut values = vec![0.0; n * nc];
    for (c, ch) in spec.channels.iter().enumerate() {
        let mut rng = crate::rng::derive(seed, c as u64);
        for comp in &ch.components {
            match *comp {
                Component::Sine { period, amplitude, phase } => {
                    for t in 0..n {
                        values[t * nc + c] += amplitude * (2.0 * PI * t as f64 / period + phase).sin();
                    }
                }
                Component::Trend { slope, intercept } => {
                    for t in 0..n {
                        values[t * nc + c] += intercept + slope * t as f64;
                    }
                }
                Component::Ar { phi, sigma } => {
                    // start from the stationary distribution
                    let mut e = sigma / (1.0 - phi * phi).sqrt() * standard_normal(&mut rng);
                    for t in 0..n {
                        if t > 0 {
                            e = phi * e + sigma * standard_normal(&mut rng);
                        }
                        values[t * nc + c] += e;
                    }
                }
                Component::LevelShift { at, delta } => {
                    for t in at.min(n)..n {
                        values[t * nc + c] += delta;
                    }
                }
            }
        }
    }
    SeriesDataset::new(spec.name.clone(), spec.frequency.clone(), nc, values)
}

/// Randomized mixture of seasonal, trend, AR and level-shift channels.
pub fn random_spec(name: &str, length: usize, channels: usize, seed: u64) -> SynthSpec {
    let mut rng = seeded(seed);
    let channels = (0..channels)
        .map(|_| {
            let mut components = vec![
                Component::Sine {
                    period: [12.0, 24.0, 48.0][rng.random_range(0..3)],
                    amplitude: rng.random_range(0.5..2.0),
                    phase: rng.random_range(0.0..2.0 * PI),
                },
                Component::Sine {
                    period: rng.random_range(5.0..16.0),
                    amplitude: rng.random_range(0.1..0.6),
                    phase: rng.random_range(0.0..2.0 * PI),
                },
                Component::Trend {
                    slope: rng.random_range(-2e-3..2e-3),
                    intercept: rng.random_range(-1.0..1.0),
                },
                Component::Ar {
                    phi: rng.random_range(0.3..0.9),
                    sigma: rng.random_range(0.1..0.3),
                },
            ];
            if rng.random_bool(0.5) {
                components.push(Component::LevelShift {
                    at: rng.random_range(length / 4..length.max(2) * 3 / 4 + 1),
                    delta: rng.random_range(-1.0..1.0),
                });
            }
            ChannelSpec { components }
        })
        .collect();
    SynthSpec {
        name: name.into(),
        frequency: default_frequency(),
        length,
        channels,
    }
}

/// Outcome of reading a CSV file.
#[derive(Clone, Debug)]
pub struct Ingested {
    pub dataset: SeriesDataset,
    pub rejected_rows: usize,
}

/// Read a header-led comma-separated file. A first column whose values are
/// not all numeric is treated as a timestamp and ignored. Rows holding a
/// missing or non-finite value are dropped and counted.
pub fn read_csv(path: &Path, name: &str) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header = rdr.headers()?.clone();
    if header.is_empty() {
        return Err(Error::Input(format!("{}: missing header row", path.display())));
    }
    let records: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>()?;
    let first_numeric = records.iter().all(|r| r.get(0).is_some_and(|v| v.trim().parse::<f64>().is_ok()));
    let timestamp = !first_numeric || matches!(header.get(0).map(|h| h.trim().to_ascii_lowercase()).as_deref(), Some("date" | "time" | "timestamp"));
    let skip = usize::from(timestamp);
    let channels = header.len() - skip;
    if channels == 0 {
        return Err(Error::Input(format!("{}: no value columns", path.display())));
    }
    let mut values = Vec::with_capacity(records.len() * channels);
    let mut rejected = 0;
    for rec in &records {
        let row: Option<Vec<f64>> = (skip..header.len())
            .map(|i| rec.get(i).and_then(|v| v.trim().parse::<f64>().ok()).filter(|v| v.is_finite()))
            .collect();
        match row {
            Some(r) => values.extend(r),
            None => rejected += 1,
        }
    }
    if rejected > 0 {
        warn!("{}: rejected {rejected} rows with missing values", path.display());
    }
    if values.is_empty() {
        return Err(Error::Input(format!("{}: no usable rows ({rejected} rejected)", path.display())));
    }
    Ok(Ingested {
        dataset: SeriesDataset::new(name, "unknown", channels, values)?,
        rejected_rows: rejected,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: SeriesDataset,
    pub val: SeriesDataset,
    pub test: SeriesDataset,
    /// Row offsets of the validation and test blocks in the source series.
    pub boundaries: (usize, usize),
}

pub fn chronological_split(ds: &SeriesDataset, sizes: SplitSizes) -> Result<Splits> {
    let total = sizes.train + sizes.val + sizes.test;
    if total > ds.len() {
        return Err(Error::Input(format!(
            "split sizes sum to {total} but the series has {} rows",
            ds.len()
        )));
    }
    let b1 = sizes.train;
    let b2 = b1 + sizes.val;
    Ok(Splits {
        train: ds.rows(0, b1),
        val: ds.rows(b1, b2),
        test: ds.rows(b2, total),
        boundaries: (b1, b2),
    })
}

/// Per-channel z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population mean and std of each channel; a degenerate std is floored.
    pub fn fit(train: &SeriesDataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Input("cannot fit normalization on an empty split".into()));
        }
        let n = train.len() as f64;
        let mut mean = vec![0.0; train.channels()];
        let mut std = vec![0.0; train.channels()];
        for c in 0..train.channels() {
            let col = train.column(c);
            let m = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean[c] = m;
            std[c] = var.sqrt();
            if std[c] < STD_FLOOR {
                warn!("channel {c} of `{}` has zero variance; flooring its std", train.name);
                std[c] = STD_FLOOR;
            }
        }
        Ok(NormStats { mean, std })
    }

    pub fn normalize(&self, ds: &SeriesDataset) -> Result<SeriesDataset> {
        self.apply(ds, |v, m, s| (v - m) / s)
    }

    pub fn inverse(&self, ds: &SeriesDataset) -> Result<SeriesDataset> {
        self.apply(ds, |v, m, s| v * s + m)
    }

    fn apply(&self, ds: &SeriesDataset, f: impl Fn(f64, f64, f64) -> f64) -> Result<SeriesDataset> {
        if ds.channels() != self.mean.len() {
            return Err(Error::Input(format!(
                "statistics cover {} channels, dataset has {}",
                self.mean.len(),
                ds.channels()
            )));
        }
        let c = ds.channels();
        let values = ds
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, self.mean[i % c], self.std[i % c]))
            .collect();
        SeriesDataset::new(ds.name.clone(), ds.frequency.clone(), c, values)
    }
}

/// A lookback/target pair cut from one split.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPair {
    pub origin: usize,
    /// `[L × C]` row-major.
    pub input: Vec<f64>,
    /// `[H × C]` row-major, starting at `origin + L`.
    pub target: Vec<f64>,
}

pub fn window_count(len: usize, lookback: usize, horizon: usize, stride: usize) -> usize {
    if lookback + horizon > len || stride == 0 {
        0
    } else {
        (len - lookback - horizon) / stride + 1
    }
}

pub fn make_windows(ds: &SeriesDataset, lookback: usize, horizon: usize, stride: usize) -> Result<Vec<WindowPair>> {
    if stride == 0 || lookback == 0 || horizon == 0 {
        return Err(Error::Input("lookback, horizon and stride must be positive".into()));
    }
    if lookback + horizon > ds.len() {
        return Err(Error::Input(format!(
            "lookback {lookback} + horizon {horizon} exceeds split length {}; max feasible horizon is {}",
            ds.len(),
            ds.len().saturating_sub(lookback)
        )));
    }
    let c = ds.channels();
    let n = window_count(ds.len(), lookback, horizon, stride);
    Ok((0..n)
        .map(|k| {
            let o = k * stride;
            WindowPair {
                origin: o,
                input: ds.values()[o * c..(o + lookback) * c].to_vec(),
                target: ds.values()[(o + lookback) * c..(o + lookback + horizon) * c].to_vec(),
            }
        })
        .collect())
}

/// Univariate supervised samples, one per (window, channel).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Samples {
    pub lookback: usize,
    pub horizon: usize,
    /// `[n × L]` row-major.
    pub inputs: Vec<f64>,
    /// `[n × H]` row-major.
    pub targets: Vec<f64>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.inputs.len() / self.lookback.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.lookback..(i + 1) * self.lookback]
    }

    pub fn target(&self, i: usize) -> &[f64] {
        &self.targets[i * self.horizon..(i + 1) * self.horizon]
    }

    /// Gather samples `idx` into contiguous input and target buffers.
    pub fn gather(&self, idx: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let mut x = Vec::with_capacity(idx.len() * self.lookback);
        let mut y = Vec::with_capacity(idx.len() * self.horizon);
        for &i in idx {
            x.extend_from_slice(self.input(i));
            y.extend_from_slice(self.target(i));
        }
        (x, y)
    }
}

/// Channel-independent flattening of windows.
pub fn channel_independent(windows: &[WindowPair], channels: usize, lookback: usize, horizon: usize) -> Samples {
    let mut s = Samples {
        lookback,
        horizon,
        ..Samples::default()
    };
    for w in windows {
        for c in 0..channels {
            s.inputs.extend((0..lookback).map(|t| w.input[t * channels + c]));
            s.targets.extend((0..horizon).map(|t| w.target[t * channels + c]));
        }
    }
    s
}

/// JSON sidecar describing a prepared dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub frequency: String,
    pub length: usize,
    pub channels: usize,
    pub splits: SplitSizes,
    pub stats: NormStats,
}

impl DatasetManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
