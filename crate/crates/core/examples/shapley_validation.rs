//! Rank agreement of masked-context and one-shot importance with exact
//! Shapley values on a handful of small trained models.
//!
//! `cargo run --release --example shapley_validation -- 20` runs the full
//! twenty-instance protocol; the default of four finishes in about a minute.

use trace_core::experiment::{run_bias_validation, ToyBiasConfig};
use trace_core::shapley::summarize;

fn main() -> trace_core::Result<()> {
    let instances = std::env::args().nth(1).map_or(Ok(4), |s| s.parse()).map_err(|e| trace_core::Error::Config(format!("{e}")))?;
    let cfg = ToyBiasConfig { instances, ..ToyBiasConfig::default() };
    println!("{} gates per instance, p = {}, {} trials", cfg.backbone.sites().len(), cfg.p, cfg.trials);
    let results = run_bias_validation(&cfg, None)?;
    for (i, r) in results.iter().enumerate() {
        let f = |x: Option<f64>| x.map_or("undefined".to_string(), |v| format!("{v:+.3}"));
        println!("instance {i:>2}: rho(masked-context) {}  rho(one-shot) {}", f(r.rho_dsic), f(r.rho_one_shot));
    }
    let s = summarize(&results)?;
    println!("median rho: masked-context {:.3}, one-shot {:.3}", s.median_rho_dsic, s.median_rho_one_shot);
    Ok(())
}
