//! Configuration-driven runs of the fine-tuning modes and their comparison.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::data::{
    channel_independent, chronological_split, make_windows, random_spec, read_csv, synth_generate, DatasetManifest,
    NormStats, Samples, SeriesDataset, SplitSizes, SynthSpec,
};
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, HeadVariant};
use crate::lora::format_mask;
use crate::metrics::{accuracy_classify, mae, mcnemar, mse, smape, ContingencyTable, McNemar};
use crate::model::Model;
use crate::params::{ParamGroup, ParamStore};
use crate::pruner::{ImportanceMethod, PruneSchedule};
use crate::train::{pretrain_backbone, train, Pruning, TrainConfig, TrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Linear head only.
    LinearProbe,
    /// Reduced head only.
    HeadOnly,
    /// Linear head plus gated adapters at every site, no pruning.
    FullLora,
    /// Reduced head plus gated adapters pruned by masked-context importance.
    Trace,
    /// Reduced head plus gated adapters pruned by one-shot gradient importance
    /// on the same schedule.
    AdaloraBaseline,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::LinearProbe, Mode::HeadOnly, Mode::FullLora, Mode::Trace, Mode::AdaloraBaseline];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::LinearProbe => "linear_probe",
            Mode::HeadOnly => "head_only",
            Mode::FullLora => "full_lora",
            Mode::Trace => "trace",
            Mode::AdaloraBaseline => "adalora_baseline",
        }
    }

    pub fn default_head(self) -> HeadVariant {
        match self {
            Mode::LinearProbe | Mode::FullLora => HeadVariant::Linear,
            _ => HeadVariant::ProjDown,
        }
    }

    pub fn uses_adapters(self) -> bool {
        matches!(self, Mode::FullLora | Mode::Trace | Mode::AdaloraBaseline)
    }

    pub fn importance(self) -> Option<ImportanceMethod> {
        match self {
            Mode::Trace => Some(ImportanceMethod::Dsic),
            Mode::AdaloraBaseline => Some(ImportanceMethod::OneShot),
            _ => None,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Full,
}

impl Preset {
    pub fn backbone(self) -> BackboneConfig {
        match self {
            Preset::Desk => BackboneConfig::desk(),
            Preset::Full => BackboneConfig::full(),
        }
    }

    pub fn horizon(self) -> usize {
        match self {
            Preset::Desk => 16,
            Preset::Full => 192,
        }
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            _ => Err(Error::Config(format!("unknown preset `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Randomized seasonal/trend/AR mixture from [`random_spec`].
    Random {
        length: usize,
        channels: usize,
        seed: u64,
    },
    /// Explicit component list.
    Synthetic { spec: SynthSpec, seed: u64 },
    Csv { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub name: String,
    pub source: DataSource,
    pub splits: SplitSizes,
    #[serde(default = "one")]
    pub train_stride: usize,
    #[serde(default = "one")]
    pub eval_stride: usize,
}

fn one() -> usize {
    1
}

impl DataConfig {
    /// Scarce, noisy, stationary data: 300 training rows of three channels,
    /// each two sines plus AR(1) noise with σ = 0.6.
    pub fn desk() -> Self {
        let splits = SplitSizes {
            train: 300,
            val: 300,
            test: 600,
        };
        DataConfig {
            name: "bench".into(),
            source: DataSource::Synthetic {
                spec: benchmark_spec(splits.train + splits.val + splits.test, 0.6),
                seed: 7,
            },
            splits,
            train_stride: 1,
            eval_stride: 1,
        }
    }
}

/// Three stationary channels: two sines each plus AR(1) noise of scale `sigma`.
pub fn benchmark_spec(length: usize, sigma: f64) -> SynthSpec {
    let periods = [(24.0, 1.0, 7.0, 0.4), (12.0, 0.8, 30.0, 0.5), (48.0, 1.2, 9.0, 0.3)];
    let channels = periods
        .iter()
        .enumerate()
        .map(|(i, &(p1, a1, p2, a2))| crate::data::ChannelSpec {
            components: vec![
                crate::data::Component::Sine {
                    period: p1,
                    amplitude: a1,
                    phase: i as f64 * 0.7,
                },
                crate::data::Component::Sine {
                    period: p2,
                    amplitude: a2,
                    phase: i as f64 * 1.3,
                },
                crate::data::Component::Ar { phi: 0.5, sigma },
            ],
        })
        .collect();
    SynthSpec {
        name: "bench".into(),
        frequency: "h".into(),
        length,
        channels,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub enabled: bool,
    /// Seed of the source series and of the backbone initialization; shared
    /// by every mode and run seed.
    pub seed: u64,
    pub length: usize,
    pub channels: usize,
    pub train: TrainConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            enabled: true,
            seed: 1_000_003,
            length: 3000,
            channels: 4,
            train: TrainConfig {
                lr: 2e-3,
                max_epochs: 4,
                batch_size: 32,
                patience: 2,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub mode: Mode,
    pub preset: Preset,
    /// Overrides the preset backbone.
    #[serde(default)]
    pub backbone: Option<BackboneConfig>,
    #[serde(default)]
    pub horizon: Option<usize>,
    /// Overrides the mode's default head.
    #[serde(default)]
    pub head_variant: Option<HeadVariant>,
    #[serde(default = "default_beta")]
    pub beta: usize,
    #[serde(default = "default_rank")]
    pub lora_rank: usize,
    #[serde(default)]
    pub schedule: PruneSchedule,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    pub data: DataConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Absolute-error threshold for paired point accuracy.
    #[serde(default = "default_threshold")]
    pub accuracy_threshold: f64,
    #[serde(default)]
    pub report_smape: bool,
    /// Modes run by a comparison.
    #[serde(default = "default_modes")]
    pub modes: Vec<Mode>,
}

fn default_beta() -> usize {
    8
}
fn default_rank() -> usize {
    2
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}
fn default_threshold() -> f64 {
    0.5
}
fn default_modes() -> Vec<Mode> {
    Mode::ALL.to_vec()
}

impl ExperimentConfig {
    pub fn desk(mode: Mode) -> Self {
        ExperimentConfig {
            name: "desk".into(),
            mode,
            preset: Preset::Desk,
            backbone: None,
            horizon: None,
            head_variant: None,
            beta: default_beta(),
            lora_rank: default_rank(),
            schedule: PruneSchedule::default(),
            train: TrainConfig {
                lr: 5e-3,
                ..TrainConfig::default()
            },
            pretrain: PretrainConfig::default(),
            data: DataConfig::desk(),
            seeds: default_seeds(),
            accuracy_threshold: default_threshold(),
            report_smape: false,
            modes: default_modes(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        self.backbone.clone().unwrap_or_else(|| self.preset.backbone())
    }

    pub fn horizon(&self) -> usize {
        self.horizon.unwrap_or_else(|| self.preset.horizon())
    }

    pub fn head_config(&self) -> HeadConfig {
        let bb = self.backbone_config();
        let variant = self.head_variant.unwrap_or_else(|| self.mode.default_head());
        let beta = if variant == HeadVariant::Linear { 1 } else { self.beta };
        HeadConfig::new(variant, bb.n_patches(), bb.d_model, self.horizon(), beta)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone_config().validate()?;
        self.head_config().validate()?;
        self.train.validate()?;
        self.schedule.validate()?;
        if self.lora_rank == 0 {
            return Err(Error::Config("lora_rank must be positive".into()));
        }
        if !(self.accuracy_threshold > 0.0) {
            return Err(Error::Config("accuracy_threshold must be positive".into()));
        }
        Ok(())
    }

    /// Same experiment under another mode.
    pub fn with_mode(&self, mode: Mode) -> Self {
        ExperimentConfig {
            mode,
            ..self.clone()
        }
    }

    /// Hex SHA-256 of the configuration with the seed list and comparison
    /// modes removed, so every run of one setting shares the hash.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.seeds.clear();
        c.modes.clear();
        let digest = Sha256::digest(serde_json::to_vec(&c)?);
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }
}

/// Apply `dotted.key=value` overrides to any TOML-representable config.
/// Values parse as TOML literals and fall back to bare strings.
pub fn apply_overrides<T>(cfg: &T, sets: &[String]) -> Result<T>
where
    T: Serialize + serde::de::DeserializeOwned,
{
    let mut root = toml::Table::try_from(cfg).map_err(|e| Error::Parse(e.to_string()))?;
    for set in sets {
        let (key, raw) = set
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{set}` is not key=value")))?;
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let parts: Vec<&str> = key.trim().split('.').collect();
        let (last, path) = parts.split_last().expect("split yields at least one part");
        let mut table = &mut root;
        for part in path {
            table = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a section")))?;
        }
        table.insert(last.to_string(), value);
    }
    Ok(root.try_into()?)
}

/// Normalized, windowed splits plus their manifest.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Samples,
    pub val: Samples,
    pub test: Samples,
    pub manifest: DatasetManifest,
}

pub fn load_dataset(cfg: &DataConfig) -> Result<SeriesDataset> {
    Ok(match &cfg.source {
        DataSource::Random { length, channels, seed } => {
            synth_generate(&random_spec(&cfg.name, *length, *channels, *seed), *seed)?
        }
        DataSource::Synthetic { spec, seed } => synth_generate(spec, *seed)?,
        DataSource::Csv { path } => read_csv(path, &cfg.name)?.dataset,
    })
}

pub fn prepare_data(cfg: &DataConfig, lookback: usize, horizon: usize) -> Result<PreparedData> {
    let ds = load_dataset(cfg)?;
    let splits = chronological_split(&ds, cfg.splits)?;
    let stats = NormStats::fit(&splits.train)?;
    let c = ds.channels();
    let cut = |part: &SeriesDataset, stride: usize| -> Result<Samples> {
        let z = stats.normalize(part)?;
        Ok(channel_independent(&make_windows(&z, lookback, horizon, stride)?, c, lookback, horizon))
    };
    let train = cut(&splits.train, cfg.train_stride)?;
    Ok(PreparedData {
        train,
        val: cut(&splits.val, cfg.eval_stride)?,
        test: cut(&splits.test, cfg.eval_stride)?,
        manifest: DatasetManifest {
            name: cfg.name.clone(),
            frequency: ds.frequency.clone(),
            length: ds.len(),
            channels: c,
            splits: cfg.splits,
            stats,
        },
    })
}

/// Pretrain a backbone on a synthetic source disjoint from any target data.
pub fn pretrained_backbone(bb: &BackboneConfig, horizon: usize, cfg: &PretrainConfig) -> Result<Option<ParamStore>> {
    if !cfg.enabled {
        return Ok(None);
    }
    let ds = synth_generate(&random_spec("pretrain", cfg.length, cfg.channels, cfg.seed), cfg.seed)?;
    let n = ds.len();
    let splits = chronological_split(
        &ds,
        SplitSizes {
            train: n * 4 / 5,
            val: n - n * 4 / 5,
            test: 0,
        },
    )?;
    let stats = NormStats::fit(&splits.train)?;
    let c = ds.channels();
    let win = |d: &SeriesDataset, stride: usize| -> Result<Samples> {
        Ok(channel_independent(
            &make_windows(&stats.normalize(d)?, bb.seq_len, horizon, stride)?,
            c,
            bb.seq_len,
            horizon,
        ))
    };
    let train = win(&splits.train, 2)?;
    let val = win(&splits.val, 4)?;
    pretrain_backbone(bb, &train, &val, &cfg.train, cfg.seed).map(Some)
}

/// One run's result. Wall-clock time is kept out so records are reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub name: String,
    pub config_hash: String,
    pub mode: Mode,
    pub seed: u64,
    pub head: HeadVariant,
    pub test_mse: f64,
    pub test_mae: f64,
    pub test_smape: Option<f64>,
    pub val_mse: f64,
    pub trainable_params: usize,
    pub head_params: usize,
    pub adapter_params: usize,
    pub masked_gates: usize,
    /// Masked sites as `layer,sublayer` pairs separated by `;`.
    pub mask: String,
    pub mask_path: Option<String>,
    pub epochs: usize,
    pub steps: usize,
    pub stopped_early: bool,
}

impl ResultRecord {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn write_records_csv(path: &Path, records: &[ResultRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv(path: &Path) -> Result<Vec<ResultRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|rec| rec.map_err(Error::from)).collect()
}

/// A finished run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub record: ResultRecord,
    /// Test forecasts in sample order, flattened.
    pub predictions: Vec<f64>,
    pub report: TrainReport,
    pub model: Model,
    pub seconds: f64,
}

/// Build the model for `cfg.mode` and set its trainable parameters.
pub fn build_model(cfg: &ExperimentConfig, seed: u64, pretrained: Option<&ParamStore>) -> Result<Model> {
    let rank = cfg.mode.uses_adapters().then_some(cfg.lora_rank);
    let mut model = Model::new(cfg.backbone_config(), cfg.head_config(), rank, seed)?;
    if let Some(src) = pretrained {
        model.load_backbone(src)?;
    }
    model.store.set_group_trainable(ParamGroup::Embedding, false);
    model.store.set_group_trainable(ParamGroup::Backbone, false);
    model.store.set_group_trainable(ParamGroup::Head, true);
    Ok(model)
}

/// Train and evaluate one mode for one seed on prepared data.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    seed: u64,
    data: &PreparedData,
    pretrained: Option<&ParamStore>,
    out_dir: Option<&Path>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let mut model = build_model(cfg, seed, pretrained)?;
    let pruning = cfg.mode.importance().map(|method| Pruning {
        schedule: cfg.schedule.clone(),
        method,
    });
    let report = match train(&mut model, &data.train, &data.val, &cfg.train, pruning.as_ref(), seed) {
        Ok(r) => r,
        Err(Error::Diverged(msg)) => {
            if let Some(dir) = out_dir {
                let stem = format!("{}-{}-seed{seed}-diverged", cfg.name, cfg.mode);
                model.store.save_checkpoint(&dir.join(format!("{stem}.ckpt")), &[])?;
                let note = serde_json::json!({ "mode": cfg.mode, "seed": seed, "message": msg, "masked": format_mask(&model.masked()) });
                std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&note)?)?;
            }
            return Err(Error::Diverged(msg));
        }
        Err(e) => return Err(e),
    };
    let predictions = model.predict_all(&data.test.inputs, cfg.train.eval_chunk)?;
    let truth = &data.test.targets;
    let masked = model.masked();
    let hash = cfg.hash()?;
    let mask_path = match (out_dir, cfg.mode.importance()) {
        (Some(dir), Some(_)) => {
            let p = dir.join(format!("{}-{}-{}-seed{seed}.mask", cfg.name, cfg.mode, hash));
            std::fs::write(&p, format_mask(&masked))?;
            Some(p.file_name().unwrap_or_default().to_string_lossy().into_owned())
        }
        _ => None,
    };
    let record = ResultRecord {
        name: cfg.name.clone(),
        config_hash: hash,
        mode: cfg.mode,
        seed,
        head: model.head.cfg.variant,
        test_mse: mse(&predictions, truth)?,
        test_mae: mae(&predictions, truth)?,
        test_smape: if cfg.report_smape { Some(smape(&predictions, truth)?) } else { None },
        val_mse: report.best_val,
        trainable_params: model.trainable_scalars(),
        head_params: model.head.cfg.param_count(),
        adapter_params: model.lora.as_ref().map_or(0, |l| l.trainable_parameter_count()),
        masked_gates: masked.len(),
        mask: masked.iter().map(|s| format!("{},{}", s.layer, s.sublayer.index())).collect::<Vec<_>>().join(";"),
        mask_path,
        epochs: report.epochs,
        steps: report.steps,
        stopped_early: report.stopped_early,
    };
    let seconds = start.elapsed().as_secs_f64();
    info!("{} seed {seed}: test MSE {:.5} in {seconds:.1}s", cfg.mode, record.test_mse);
    if let Some(dir) = out_dir {
        let stem = format!("{}-{}-{}-seed{seed}", cfg.name, cfg.mode, record.config_hash);
        std::fs::write(dir.join(format!("{stem}.json")), record.to_json()?)?;
        std::fs::write(
            dir.join(format!("{stem}.timing.json")),
            serde_json::to_string(&serde_json::json!({ "seconds": seconds }))?,
        )?;
    }
    Ok(RunOutput {
        record,
        predictions,
        report,
        model,
        seconds,
    })
}

/// Per-mode aggregate over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub runs: usize,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
    pub trainable_params: usize,
    /// 1 for the lowest mean MSE, 2 for the runner-up.
    pub rank: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairTest {
    pub a: Mode,
    pub b: Mode,
    pub table: ContingencyTable,
    pub result: Option<McNemar>,
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub rows: Vec<ModeSummary>,
    pub records: Vec<ResultRecord>,
    pub pairs: Vec<PairTest>,
    /// Test forecasts keyed by (mode, seed).
    pub predictions: BTreeMap<(Mode, u64), Vec<f64>>,
    pub truth: Vec<f64>,
}

/// Sample mean and (n − 1)-denominator standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Run every configuration over every seed on shared data and a shared
/// pretrained backbone, then aggregate.
pub fn compare_modes(cfgs: &[ExperimentConfig], seeds: &[u64], out_dir: Option<&Path>) -> Result<Comparison> {
    if cfgs.len() < 2 {
        return Err(Error::Config("a comparison needs at least two configurations".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("a comparison needs at least one seed".into()));
    }
    let base = &cfgs[0];
    for c in cfgs {
        c.validate()?;
        if c.data != base.data || c.horizon() != base.horizon() || c.backbone_config() != base.backbone_config() {
            return Err(Error::Config(format!(
                "configuration `{}` ({}) does not share the dataset, horizon and backbone of the first",
                c.name, c.mode
            )));
        }
    }
    let bb = base.backbone_config();
    let data = prepare_data(&base.data, bb.seq_len, base.horizon())?;
    let pretrained = pretrained_backbone(&bb, base.horizon(), &base.pretrain)?;
    let jobs: Vec<(usize, u64)> = (0..cfgs.len()).flat_map(|i| seeds.iter().map(move |&s| (i, s))).collect();
    use rayon::prelude::*;
    let outs: Vec<RunOutput> = jobs
        .par_iter()
        .map(|&(i, s)| run_experiment(&cfgs[i], s, &data, pretrained.as_ref(), out_dir))
        .collect::<Result<_>>()?;
    let mut records = Vec::new();
    let mut predictions = BTreeMap::new();
    for o in outs {
        predictions.insert((o.record.mode, o.record.seed), o.predictions);
        records.push(o.record);
    }
    let mut rows: Vec<ModeSummary> = cfgs
        .iter()
        .map(|c| {
            let rs: Vec<&ResultRecord> = records.iter().filter(|r| r.mode == c.mode && r.name == c.name).collect();
            let (mse_mean, mse_std) = mean_std(&rs.iter().map(|r| r.test_mse).collect::<Vec<_>>());
            let (mae_mean, mae_std) = mean_std(&rs.iter().map(|r| r.test_mae).collect::<Vec<_>>());
            ModeSummary {
                mode: c.mode,
                runs: rs.len(),
                mse_mean,
                mse_std,
                mae_mean,
                mae_std,
                trainable_params: rs.first().map_or(0, |r| r.trainable_params),
                rank: None,
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[a].mse_mean.total_cmp(&rows[b].mse_mean));
    for (place, &i) in order.iter().take(2).enumerate() {
        rows[i].rank = Some(place + 1);
    }
    let truth = data.test.targets.clone();
    let mut pairs = Vec::new();
    for i in 0..cfgs.len() {
        for j in i + 1..cfgs.len() {
            let (a, b) = (cfgs[i].mode, cfgs[j].mode);
            let mut ca = Vec::new();
            let mut cb = Vec::new();
            for &s in seeds {
                ca.extend(accuracy_classify(&predictions[&(a, s)], &truth, base.accuracy_threshold)?);
                cb.extend(accuracy_classify(&predictions[&(b, s)], &truth, base.accuracy_threshold)?);
            }
            let table = ContingencyTable::from_outcomes(&ca, &cb)?;
            pairs.push(PairTest {
                a,
                b,
                table,
                result: mcnemar(&table).ok(),
            });
        }
    }
    if let Some(dir) = out_dir {
        write_records_csv(&dir.join(format!("{}-{}.csv", base.name, base.hash()?)), &records)?;
        data.manifest.write(&dir.join(format!("{}-dataset.json", base.name)))?;
    }
    Ok(Comparison {
        rows,
        records,
        pairs,
        predictions,
        truth,
    })
}

impl Comparison {
    /// Markdown table; the best mean MSE is bold and the runner-up underlined.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| mode | runs | MSE | MAE | trainable |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            let mse = format!("{:.4} ± {:.4}", r.mse_mean, r.mse_std);
            let mse = match r.rank {
                Some(1) => format!("**{mse}**"),
                Some(2) => format!("<u>{mse}</u>"),
                _ => mse,
            };
            s.push_str(&format!(
                "| {} | {} | {mse} | {:.4} ± {:.4} | {} |\n",
                r.mode, r.runs, r.mae_mean, r.mae_std, r.trainable_params
            ));
        }
        if !self.pairs.is_empty() {
            s.push_str("\n| pair | b | c | χ² | p |\n|---|---|---|---|---|\n");
            for p in &self.pairs {
                let (chi, pv) = p
                    .result
                    .map_or(("n/a".to_string(), "n/a".to_string()), |r| (format!("{:.3}", r.chi2), format!("{:.4}", r.p_value)));
                s.push_str(&format!("| {} vs {} | {} | {} | {chi} | {pv} |\n", p.a, p.b, p.table.b, p.table.c));
            }
        }
        s
    }

    pub fn row(&self, mode: Mode) -> Option<&ModeSummary> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    /// Per-seed test MSE of `mode`, in seed order.
    pub fn seed_mse(&self, mode: Mode) -> Vec<(u64, f64)> {
        let mut v: Vec<(u64, f64)> = self.records.iter().filter(|r| r.mode == mode).map(|r| (r.seed, r.test_mse)).collect();
        v.sort_by_key(|x| x.0);
        v
    }
}

/// Small trained model for comparing importance estimators against exact
/// Shapley values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyBiasConfig {
    pub instances: usize,
    pub backbone: BackboneConfig,
    pub horizon: usize,
    pub lora_rank: usize,
    pub series_length: usize,
    pub val_length: usize,
    pub train: TrainConfig,
    /// Masking probability of the trial contexts.
    pub p: f64,
    pub trials: usize,
    /// Seed of the first instance; instance `i` uses `seed + i`.
    pub seed: u64,
}

impl Default for ToyBiasConfig {
    fn default() -> Self {
        ToyBiasConfig {
            instances: 20,
            backbone: BackboneConfig {
                d_model: 8,
                n_layers: 2,
                n_heads: 2,
                d_ff: 16,
                seq_len: 16,
                patch_len: 4,
                ffn: crate::backbone::FfnKind::Glu,
            },
            horizon: 4,
            lora_rank: 2,
            series_length: 600,
            val_length: 80,
            train: TrainConfig {
                lr: 1e-2,
                max_epochs: 5,
                patience: 100,
                ..TrainConfig::default()
            },
            p: 0.5,
            trials: 32,
            seed: 0,
        }
    }
}

impl ToyBiasConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let players = self.backbone.sites().len();
        if players > crate::shapley::MAX_PLAYERS {
            return Err(Error::Config(format!(
                "{players} gates exceed the exact-enumeration limit of {}",
                crate::shapley::MAX_PLAYERS
            )));
        }
        if self.instances == 0 || self.trials == 0 {
            return Err(Error::Config("instances and trials must be positive".into()));
        }
        if self.val_length + self.backbone.seq_len >= self.series_length {
            return Err(Error::Config("series too short for the validation split".into()));
        }
        Ok(())
    }
}

/// Train instance `seed` and return the model with its validation batch.
pub fn toy_bias_instance(cfg: &ToyBiasConfig, seed: u64) -> Result<(Model, crate::model::Batch)> {
    cfg.validate()?;
    let bb = &cfg.backbone;
    let ds = synth_generate(&random_spec("toy", cfg.series_length, 1, seed), seed)?;
    let test = cfg.series_length / 6;
    let splits = chronological_split(
        &ds,
        SplitSizes {
            train: cfg.series_length - cfg.val_length - test,
            val: cfg.val_length,
            test,
        },
    )?;
    let stats = NormStats::fit(&splits.train)?;
    let win = |d: &SeriesDataset| -> Result<Samples> {
        Ok(channel_independent(&make_windows(&stats.normalize(d)?, bb.seq_len, cfg.horizon, 1)?, 1, bb.seq_len, cfg.horizon))
    };
    let (tr, va) = (win(&splits.train)?, win(&splits.val)?);
    let head = HeadConfig::new(HeadVariant::Linear, bb.n_patches(), bb.d_model, cfg.horizon, 1);
    let mut model = Model::new(bb.clone(), head, Some(cfg.lora_rank), seed)?;
    train(&mut model, &tr, &va, &cfg.train, None, seed)?;
    let all: Vec<usize> = (0..va.len()).collect();
    let (x, y) = va.gather(&all);
    Ok((model, crate::model::Batch::new(x, y, all.len())?))
}

/// Compare both importance estimators with exact Shapley values on every
/// instance. Instances run in parallel.
pub fn run_bias_validation(cfg: &ToyBiasConfig, out_dir: Option<&Path>) -> Result<Vec<crate::shapley::BiasComparison>> {
    use rayon::prelude::*;
    cfg.validate()?;
    (0..cfg.instances as u64)
        .into_par_iter()
        .map(|i| {
            let seed = cfg.seed + i;
            let (mut model, batch) = toy_bias_instance(cfg, seed)?;
            let mut rng = crate::rng::derive(seed, 1000);
            let cmp = crate::shapley::bias_comparison(&mut model, &[&batch], cfg.p, cfg.trials, &mut rng)?;
            if let Some(dir) = out_dir {
                let l = cfg.backbone.n_layers;
                crate::shapley::write_grid(&dir.join(format!("instance{seed}-shapley.csv")), &cmp.shapley, l)?;
                crate::shapley::write_grid(&dir.join(format!("instance{seed}-dsic.csv")), &cmp.dsic, l)?;
                crate::shapley::write_grid(&dir.join(format!("instance{seed}-one_shot.csv")), &cmp.one_shot, l)?;
            }
            Ok(cmp)
        })
        .collect()
}
