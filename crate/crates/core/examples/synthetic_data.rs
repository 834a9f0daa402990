//! Generate a synthetic series, write and re-read it as CSV, then split,
//! normalize and window it the way fine-tuning consumes it.

use trace_core::data::{
    channel_independent, chronological_split, make_windows, random_spec, read_csv, synth_generate, window_count,
    NormStats, SplitSizes,
};

fn main() -> trace_core::Result<()> {
    let spec = random_spec("demo", 1000, 3, 42);
    println!("{}", toml::to_string(&spec.channels[0]).map_err(|e| trace_core::Error::Parse(e.to_string()))?);
    let ds = synth_generate(&spec, 42)?;

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("demo.csv");
    ds.write_csv(&path)?;
    let back = read_csv(&path, "demo")?;
    println!("CSV round trip: {} rows, {} rejected, equal = {}", back.dataset.len(), back.rejected_rows, back.dataset.values() == ds.values());

    let splits = chronological_split(&ds, SplitSizes { train: 700, val: 100, test: 200 })?;
    let stats = NormStats::fit(&splits.train)?;
    let z = stats.normalize(&splits.train)?;
    for c in 0..z.channels() {
        let col = z.column(c);
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        println!("channel {c}: train mean {mean:+.1e}, raw std {:.3}", stats.std[c]);
    }
    let windows = make_windows(&z, 64, 16, 1)?;
    println!("{} windows (expected {})", windows.len(), window_count(z.len(), 64, 16, 1));
    let samples = channel_independent(&windows, z.channels(), 64, 16);
    println!("{} univariate samples of 64 -> 16", samples.len());
    Ok(())
}
