//! All five fine-tuning modes on the desk benchmark, with the comparison
//! table and pairwise McNemar tests.
//!
//! Pass a seed count as the first argument (default 2; five takes a few
//! minutes on one core).

use trace_core::experiment::{compare_modes, ExperimentConfig, Mode};

fn main() -> trace_core::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let n: u64 = std::env::args().nth(1).map_or(Ok(2), |s| s.parse()).map_err(|e| trace_core::Error::Config(format!("{e}")))?;
    let base = ExperimentConfig::desk(Mode::Trace);
    let cfgs: Vec<_> = Mode::ALL.iter().map(|&m| base.with_mode(m)).collect();
    let seeds: Vec<u64> = (0..n).collect();
    let cmp = compare_modes(&cfgs, &seeds, None)?;
    println!("{}", cmp.to_markdown());
    for r in cmp.records.iter().filter(|r| r.masked_gates > 0) {
        println!("{} seed {}: kept {} of 14 gates", r.mode, r.seed, 14 - r.masked_gates);
    }
    Ok(())
}
