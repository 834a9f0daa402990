//! Command-line front end. Every verb writes its artifacts under `--out-dir`
//! and reports failures as one JSON line on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use trace_core::data::{random_spec, synth_generate, SynthSpec};
use trace_core::experiment::{
    apply_overrides, compare_modes, prepare_data, pretrained_backbone, run_bias_validation, write_records_csv, ExperimentConfig, Mode,
    Preset, ToyBiasConfig,
};
use trace_core::heads::head_param_grid;
use trace_core::metrics::{mcnemar, ContingencyTable};
use trace_core::shapley::summarize;
use trace_core::{Error, Result};

#[derive(Parser)]
#[command(name = "trace", version, about = "Gated low-rank fine-tuning for time-series transformers")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args)]
struct Common {
    /// Seed for single-run verbs; overrides the configuration's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Override any configuration key, e.g. `--set train.lr=1e-3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Verb {
    /// Write a synthetic multichannel series as CSV.
    GenerateData {
        /// TOML component specification; a randomized mixture is used otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        length: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value = "synthetic")]
        name: String,
    },
    /// Fine-tune one mode and write its result record.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Run several modes over several seeds and tabulate them.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated modes; defaults to the configuration's list.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<Mode>,
        /// Comma-separated seeds; defaults to the configuration's list.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Compare importance estimators with exact Shapley values on toy models.
    ShapleyValidate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        p: Option<f64>,
    },
    /// Tabulate forecasting-head parameter counts.
    HeadParams {
        #[arg(long, value_delimiter = ',', default_values_t = [192usize, 720])]
        horizons: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [4usize, 8, 16])]
        betas: Vec<usize>,
    },
    /// McNemar test on discordant counts.
    Mcnemar {
        #[arg(long)]
        b: u64,
        #[arg(long)]
        c: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: Option<&Path>, preset: Preset, mode: Mode, sets: &[String]) -> Result<ExperimentConfig> {
    let cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => {
            let mut c = ExperimentConfig::desk(mode);
            if preset == Preset::Full {
                c.preset = Preset::Full;
                c.name = "full".into();
            }
            c
        }
    };
    let cfg = apply_overrides(&cfg, sets)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let Common {
        seed,
        out_dir,
        preset,
        sets,
    } = cli.common;
    let preset: Preset = preset.parse()?;
    std::fs::create_dir_all(&out_dir)?;
    match cli.verb {
        Verb::GenerateData {
            spec,
            length,
            channels,
            name,
        } => {
            let seed = seed.unwrap_or(0);
            let spec = match spec {
                Some(p) => toml::from_str::<SynthSpec>(&std::fs::read_to_string(p)?)?,
                None => random_spec(&name, length, channels, seed),
            };
            let ds = synth_generate(&spec, seed)?;
            let path = out_dir.join(format!("{}.csv", spec.name));
            ds.write_csv(&path)?;
            std::fs::write(out_dir.join(format!("{}.spec.toml", spec.name)), toml::to_string(&spec).map_err(|e| Error::Parse(e.to_string()))?)?;
            println!("wrote {} rows x {} channels to {}", ds.len(), ds.channels(), path.display());
        }
        Verb::Train { config, mode } => {
            let mut cfg = load_config(config.as_deref(), preset, mode.unwrap_or(Mode::Trace), &sets)?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            let seed = seed.or_else(|| cfg.seeds.first().copied()).unwrap_or(0);
            let bb = cfg.backbone_config();
            let data = prepare_data(&cfg.data, bb.seq_len, cfg.horizon())?;
            data.manifest.write(&out_dir.join(format!("{}-dataset.json", cfg.name)))?;
            info!("{} train / {} val / {} test samples", data.train.len(), data.val.len(), data.test.len());
            let pre = pretrained_backbone(&bb, cfg.horizon(), &cfg.pretrain)?;
            let out = trace_core::experiment::run_experiment(&cfg, seed, &data, pre.as_ref(), Some(&out_dir))?;
            if let Some(w) = &out.report.pruning {
                w.write_csv(&out_dir.join(format!("{}-{}-seed{seed}-importance.csv", cfg.name, cfg.mode)))?;
            }
            println!("{}", out.record.to_json()?);
        }
        Verb::Compare { config, modes, seeds } => {
            let base = load_config(config.as_deref(), preset, Mode::Trace, &sets)?;
            let modes = if modes.is_empty() { base.modes.clone() } else { modes };
            let seeds = match (seeds.is_empty(), seed) {
                (false, _) => seeds,
                (true, Some(s)) => vec![s],
                (true, None) => base.seeds.clone(),
            };
            let cfgs: Vec<ExperimentConfig> = modes.iter().map(|&m| base.with_mode(m)).collect();
            let cmp = compare_modes(&cfgs, &seeds, Some(&out_dir))?;
            let table = cmp.to_markdown();
            std::fs::write(out_dir.join(format!("{}-comparison.md", base.name)), &table)?;
            write_records_csv(&out_dir.join(format!("{}-records.csv", base.name)), &cmp.records)?;
            println!("{table}");
        }
        Verb::ShapleyValidate {
            config,
            instances,
            trials,
            p,
        } => {
            let mut cfg = match config {
                Some(path) => toml::from_str::<ToyBiasConfig>(&std::fs::read_to_string(path)?)?,
                None => ToyBiasConfig::default(),
            };
            cfg = apply_overrides(&cfg, &sets)?;
            if let Some(n) = instances {
                cfg.instances = n;
            }
            if let Some(m) = trials {
                cfg.trials = m;
            }
            if let Some(p) = p {
                cfg.p = p;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let results = run_bias_validation(&cfg, Some(&out_dir))?;
            let mut w = csv::Writer::from_path(out_dir.join("spearman.csv"))?;
            w.write_record(["instance", "rho_dsic", "rho_one_shot"])?;
            for (i, r) in results.iter().enumerate() {
                let f = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
                w.write_record([(cfg.seed + i as u64).to_string(), f(r.rho_dsic), f(r.rho_one_shot)])?;
            }
            w.flush()?;
            let s = summarize(&results)?;
            println!(
                "{} instances ({} degenerate): median Spearman vs Shapley  masked-context {:.3}  one-shot {:.3}",
                s.instances, s.degenerate, s.median_rho_dsic, s.median_rho_one_shot
            );
        }
        Verb::HeadParams { horizons, betas } => {
            let bb = preset.backbone();
            let rows = head_param_grid(bb.n_patches(), bb.d_model, &horizons, &betas)?;
            println!("n_patches={} d_model={}", bb.n_patches(), bb.d_model);
            println!("{:>8} {:>5} {:>12} {:>12} {:>10}", "horizon", "beta", "linear", "proj_down", "reduction");
            let mut w = csv::Writer::from_path(out_dir.join("head_params.csv"))?;
            for r in &rows {
                println!("{:>8} {:>5} {:>12} {:>12} {:>9.1}%", r.horizon, r.beta, r.linear, r.reduced, r.reduction_pct);
                w.serialize(r)?;
            }
            w.flush()?;
            if preset == Preset::Full && rows.iter().any(|r| r.horizon == 720 && r.beta == 16) {
                println!(
                    "note: the published table lists 626,688 for horizon 720 at beta 16, which is the horizon-192 \
                     value; the count N*(d/beta)*H gives 2,248,704"
                );
            }
        }
        Verb::Mcnemar { b, c } => {
            let t = ContingencyTable { a: 0, b, c, d: 0 };
            let r = mcnemar(&t)?;
            println!("{}", serde_json::json!({ "b": b, "c": c, "chi2": r.chi2, "p_value": r.p_value }));
        }
    }
    Ok(())
}
