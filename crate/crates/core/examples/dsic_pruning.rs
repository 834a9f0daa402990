//! Importance under masked contexts versus one-shot gradients, then the
//! iterative pruning schedule on a small adapted forecaster.

use std::collections::BTreeSet;

use trace_core::backbone::{BackboneConfig, FfnKind};
use trace_core::data::{
    channel_independent, chronological_split, make_windows, random_spec, synth_generate, NormStats, SplitSizes,
};
use trace_core::heads::{HeadConfig, HeadVariant};
use trace_core::model::Model;
use trace_core::pruner::toy::{site, LinearGates};
use trace_core::pruner::{dsic_importance, one_shot_importance, trial_importance, ImportanceMethod, PruneSchedule};
use trace_core::rng::seeded;
use trace_core::train::{train, Pruning, TrainConfig};

fn main() -> trace_core::Result<()> {
    // two redundant gates: f(x) = (g0 + g1)·x fitted to y = 1.2
    let mut toy = LinearGates::new(0.0, vec![1.0, 1.0]);
    let batch = vec![(1.0, 1.2)];
    let one_shot = one_shot_importance(&toy, &[&batch])?;
    let ctx = trial_importance(&mut toy, &[&batch], &BTreeSet::from([site(1)]))?;
    println!("gate 0: one-shot {:.2}, with gate 1 masked {:.2}", one_shot[&site(0)], ctx[&site(0)]);
    let table = dsic_importance(&mut toy, &[&batch], 0.5, 64, &mut seeded(1))?;
    println!("masked-context mean over {} trials: {:.3}", table.m(), table.mean[&site(0)]);

    // pruning during fine-tuning
    let bb = BackboneConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        seq_len: 32,
        patch_len: 8,
        ffn: FfnKind::Glu,
    };
    let ds = synth_generate(&random_spec("demo", 600, 2, 3), 3)?;
    let splits = chronological_split(&ds, SplitSizes { train: 420, val: 180, test: 0 })?;
    let stats = NormStats::fit(&splits.train)?;
    let cut = |d| -> trace_core::Result<_> {
        Ok(channel_independent(&make_windows(&stats.normalize(d)?, 32, 8, 2)?, 2, 32, 8))
    };
    let (tr, va) = (cut(&splits.train)?, cut(&splits.val)?);

    let head = HeadConfig::new(HeadVariant::ProjDown, bb.n_patches(), bb.d_model, 8, 4);
    let mut model = Model::new(bb, head, Some(2), 0)?;
    let pruning = Pruning {
        schedule: PruneSchedule { alpha: 5, trials: 4, ..PruneSchedule::default() },
        method: ImportanceMethod::Dsic,
    };
    let cfg = TrainConfig { lr: 3e-3, max_epochs: 3, ..TrainConfig::default() };
    let report = train(&mut model, &tr, &va, &cfg, Some(&pruning), 0)?;
    let w = report.pruning.expect("pruning ran");
    for r in &w.rounds {
        println!("round {}: masked {:?}", r.round, r.masked.iter().map(|s| s.to_string()).collect::<Vec<_>>());
    }
    println!("kept: {:?}", model.lora.as_ref().map(|l| l.active_sites().iter().map(|s| s.to_string()).collect::<Vec<_>>()));
    println!("budget met {}, best val MSE {:.4}", w.budget_met, report.best_val);
    Ok(())
}
