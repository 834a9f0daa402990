//! Gate importance estimation and iterative pruning.
//!
//! One-shot importance scores each gate by its gradient magnitude with every
//! remaining gate active. Masked-context importance repeats that scoring under
//! `M` random trial masks and averages, so a gate is judged in the kind of
//! sparse context it will operate in after pruning.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use log::{debug, warn};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::backbone::Site;
use crate::error::{Error, Result};
use crate::model::{Batch, Model};
use crate::rng::Rng64;

/// Anything with maskable scalar gates and a differentiable loss.
pub trait GatedObjective {
    type Batch;

    /// Every gate site, in ascending order.
    fn gate_sites(&self) -> Vec<Site>;
    fn masked_sites(&self) -> BTreeSet<Site>;
    fn mask_sites(&mut self, sites: &BTreeSet<Site>) -> Result<()>;
    /// Exact inverse of [`GatedObjective::mask_sites`].
    fn restore_sites(&mut self, sites: &BTreeSet<Site>) -> Result<()>;
    /// `∂L/∂g` on `batch` for every unmasked gate.
    fn gate_gradients(&self, batch: &Self::Batch) -> Result<BTreeMap<Site, f64>>;
    /// Loss on `batch` under the current mask.
    fn batch_loss(&self, batch: &Self::Batch) -> Result<f64>;

    fn unmasked_sites(&self) -> Vec<Site> {
        let masked = self.masked_sites();
        self.gate_sites().into_iter().filter(|s| !masked.contains(s)).collect()
    }
}

impl GatedObjective for Model {
    type Batch = Batch;

    fn gate_sites(&self) -> Vec<Site> {
        self.lora.as_ref().map(|l| l.sites().collect()).unwrap_or_default()
    }

    fn masked_sites(&self) -> BTreeSet<Site> {
        self.masked()
    }

    fn mask_sites(&mut self, sites: &BTreeSet<Site>) -> Result<()> {
        let lora = self.lora.as_mut().ok_or_else(|| Error::State("model has no gated adapters".into()))?;
        lora.mask(&mut self.store, sites)
    }

    fn restore_sites(&mut self, sites: &BTreeSet<Site>) -> Result<()> {
        let lora = self.lora.as_mut().ok_or_else(|| Error::State("model has no gated adapters".into()))?;
        lora.restore(&mut self.store, sites)
    }

    fn gate_gradients(&self, batch: &Batch) -> Result<BTreeMap<Site, f64>> {
        Model::gate_gradients(self, batch)
    }

    fn batch_loss(&self, batch: &Batch) -> Result<f64> {
        self.loss(batch)
    }
}

/// Mean over `batches` of `|∂L/∂g|` for each gate under the current mask.
/// Masked gates score exactly 0.
pub fn gradient_importance<M: GatedObjective>(model: &M, batches: &[&M::Batch]) -> Result<BTreeMap<Site, f64>> {
    if batches.is_empty() {
        return Err(Error::Input("importance needs at least one validation batch".into()));
    }
    let mut acc: BTreeMap<Site, f64> = model.gate_sites().into_iter().map(|s| (s, 0.0)).collect();
    for batch in batches {
        for (site, g) in model.gate_gradients(batch)? {
            *acc.get_mut(&site)
                .ok_or_else(|| Error::Registry(format!("gradient for unknown gate {site}")))? += g.abs();
        }
    }
    let n = batches.len() as f64;
    for v in acc.values_mut() {
        *v /= n;
    }
    Ok(acc)
}

/// Gradient importance with every remaining gate active.
pub fn one_shot_importance<M: GatedObjective>(model: &M, batches: &[&M::Batch]) -> Result<BTreeMap<Site, f64>> {
    gradient_importance(model, batches)
}

/// Uniform subset of exactly `round(p·|unmasked|)` sites.
pub fn sample_mask(rng: &mut Rng64, p: f64, unmasked: &[Site]) -> Result<BTreeSet<Site>> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Config(format!("trial mask fraction {p} must lie in (0, 1)")));
    }
    let k = (p * unmasked.len() as f64).round() as usize;
    Ok(sample(rng, unmasked.len(), k).into_iter().map(|i| unmasked[i]).collect())
}

/// Score under `trial_mask` applied on top of the current mask. The trial
/// mask is lifted again even if scoring fails.
pub fn trial_importance<M: GatedObjective>(
    model: &mut M,
    batches: &[&M::Batch],
    trial_mask: &BTreeSet<Site>,
) -> Result<BTreeMap<Site, f64>> {
    let already = model.masked_sites();
    let fresh: BTreeSet<Site> = trial_mask.difference(&already).copied().collect();
    model.mask_sites(&fresh)?;
    let scores = gradient_importance(model, batches);
    model.restore_sites(&fresh)?;
    let mut scores = scores?;
    for s in trial_mask {
        if let Some(v) = scores.get_mut(s) {
            *v = 0.0;
        }
    }
    Ok(scores)
}

/// Per-trial scores, the trial masks and their average.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceTable {
    pub trials: Vec<BTreeMap<Site, f64>>,
    pub masks: Vec<BTreeSet<Site>>,
    pub mean: BTreeMap<Site, f64>,
}

impl ImportanceTable {
    pub fn from_trials(trials: Vec<BTreeMap<Site, f64>>, masks: Vec<BTreeSet<Site>>) -> Result<Self> {
        let mean = mean_scores(&trials)?;
        Ok(ImportanceTable { trials, masks, mean })
    }

    pub fn m(&self) -> usize {
        self.trials.len()
    }
}

/// `(1/M)·Σₖ I⁽ᵏ⁾`, summed in trial order.
pub fn mean_scores(trials: &[BTreeMap<Site, f64>]) -> Result<BTreeMap<Site, f64>> {
    let first = trials.first().ok_or_else(|| Error::Config("need at least one trial".into()))?;
    let mut out = BTreeMap::new();
    for &site in first.keys() {
        let mut s = 0.0;
        for t in trials {
            s += t
                .get(&site)
                .ok_or_else(|| Error::Registry(format!("trial is missing gate {site}")))?;
        }
        out.insert(site, s / trials.len() as f64);
    }
    Ok(out)
}

/// `M` trials, each scored under a fresh random mask over the unmasked gates.
pub fn dsic_importance<M: GatedObjective>(
    model: &mut M,
    batches: &[&M::Batch],
    p: f64,
    m: usize,
    rng: &mut Rng64,
) -> Result<ImportanceTable> {
    if m == 0 {
        return Err(Error::Config("need at least one trial".into()));
    }
    let unmasked = model.unmasked_sites();
    let mut trials = Vec::with_capacity(m);
    let mut masks = Vec::with_capacity(m);
    for _ in 0..m {
        let mask = sample_mask(rng, p, &unmasked)?;
        trials.push(trial_importance(model, batches, &mask)?);
        masks.push(mask);
    }
    ImportanceTable::from_trials(trials, masks)
}

/// The `count` lowest-scoring unmasked sites; ties go to the lower site.
pub fn prune_round(scores: &BTreeMap<Site, f64>, unmasked: &[Site], count: usize) -> Result<BTreeSet<Site>> {
    let mut ranked: Vec<(f64, Site)> = unmasked
        .iter()
        .map(|s| {
            scores
                .get(s)
                .map(|&v| (v, *s))
                .ok_or_else(|| Error::Registry(format!("no score for gate {s}")))
        })
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(ranked.into_iter().take(count).map(|(_, s)| s).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceMethod {
    /// Averaged over random masked contexts.
    Dsic,
    /// Single pass with every remaining gate active.
    OneShot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneSchedule {
    /// Fraction of currently unmasked gates masked per round, and the trial
    /// mask fraction.
    pub p: f64,
    /// Fraction of all gates masked when the schedule completes.
    pub budget: f64,
    /// Trials per round.
    pub trials: usize,
    /// Training steps before each round.
    pub alpha: usize,
    pub max_rounds: usize,
    pub val_batches_per_trial: usize,
}

impl Default for PruneSchedule {
    fn default() -> Self {
        PruneSchedule {
            p: 0.10,
            budget: 0.95,
            trials: 8,
            alpha: 10,
            max_rounds: 64,
            val_batches_per_trial: 8,
        }
    }
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::Config(format!("per-round fraction {} must lie in (0, 1)", self.p)));
        }
        if !(0.0..1.0).contains(&self.budget) {
            return Err(Error::Config(format!("budget {} must lie in [0, 1)", self.budget)));
        }
        if self.trials == 0 || self.val_batches_per_trial == 0 {
            return Err(Error::Config("trials and scored batches must be positive".into()));
        }
        Ok(())
    }

    /// Gates left unmasked at completion: `round(n·(1 − b))`.
    pub fn keep_count(&self, n_total: usize) -> usize {
        (n_total as f64 * (1.0 - self.budget)).round() as usize
    }

    /// Gates masked in a round with `unmasked` remaining:
    /// `min(⌈p·u⌉, u − keep)`.
    pub fn round_count(&self, unmasked: usize, n_total: usize) -> usize {
        let keep = self.keep_count(n_total);
        let want = (self.p * unmasked as f64 - 1e-9).ceil().max(0.0) as usize;
        want.min(unmasked.saturating_sub(keep))
    }

    /// Per-round mask counts until the budget is met or rounds run out.
    pub fn plan(&self, n_total: usize) -> Vec<usize> {
        let mut u = n_total;
        let mut out = Vec::new();
        while out.len() < self.max_rounds {
            let c = self.round_count(u, n_total);
            if c == 0 {
                break;
            }
            out.push(c);
            u -= c;
        }
        out
    }

    pub fn budget_met(&self, unmasked: usize, n_total: usize) -> bool {
        unmasked <= self.keep_count(n_total)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub masked: BTreeSet<Site>,
    pub table: ImportanceTable,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WorkflowReport {
    pub rounds: Vec<RoundRecord>,
    pub final_mask: BTreeSet<Site>,
    pub budget_met: bool,
}

impl WorkflowReport {
    /// One row per (round, trial, gate): `round,trial,layer,sublayer,score,masked_flag`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "round,trial,layer,sublayer,score,masked_flag")?;
        for r in &self.rounds {
            for (k, (trial, mask)) in r.table.trials.iter().zip(&r.table.masks).enumerate() {
                for (site, score) in trial {
                    let flag = u8::from(mask.contains(site));
                    writeln!(f, "{},{},{},{},{},{}", r.round, k, site.layer, site.sublayer.index(), score, flag)?;
                }
            }
        }
        f.flush()?;
        Ok(())
    }
}

/// Score the unmasked gates with `method` on `batches` and permanently mask
/// the next round's share.
pub fn score_and_prune<M: GatedObjective>(
    model: &mut M,
    batches: &[&M::Batch],
    schedule: &PruneSchedule,
    method: ImportanceMethod,
    rng: &mut Rng64,
    round: usize,
) -> Result<RoundRecord> {
    let n_total = model.gate_sites().len();
    let unmasked = model.unmasked_sites();
    let table = match method {
        ImportanceMethod::Dsic => dsic_importance(model, batches, schedule.p, schedule.trials, rng)?,
        ImportanceMethod::OneShot => {
            let scores = one_shot_importance(model, batches)?;
            ImportanceTable::from_trials(vec![scores], vec![BTreeSet::new()])?
        }
    };
    let count = schedule.round_count(unmasked.len(), n_total);
    let masked = prune_round(&table.mean, &unmasked, count)?;
    model.mask_sites(&masked)?;
    debug!("round {round}: masked {} gates, {} remain", masked.len(), unmasked.len() - masked.len());
    Ok(RoundRecord { round, masked, table })
}

/// Alternate `train(model, alpha)` with scoring and pruning until the budget
/// is met or `max_rounds` is exhausted. `pick` chooses the validation batches
/// scored in each round.
pub fn run_workflow<M, T, P>(
    model: &mut M,
    schedule: &PruneSchedule,
    method: ImportanceMethod,
    rng: &mut Rng64,
    mut train: T,
    mut pick: P,
) -> Result<WorkflowReport>
where
    M: GatedObjective,
    T: FnMut(&mut M, usize) -> Result<()>,
    P: FnMut(&mut Rng64) -> Vec<M::Batch>,
{
    schedule.validate()?;
    let n_total = model.gate_sites().len();
    let mut report = WorkflowReport::default();
    for round in 0..schedule.max_rounds {
        if schedule.budget_met(model.unmasked_sites().len(), n_total) {
            break;
        }
        train(model, schedule.alpha)?;
        let batches = pick(rng);
        let refs: Vec<&M::Batch> = batches.iter().collect();
        let rec = score_and_prune(model, &refs, schedule, method, rng, round)?;
        report.rounds.push(rec);
    }
    report.final_mask = model.masked_sites();
    report.budget_met = schedule.budget_met(model.unmasked_sites().len(), n_total);
    if !report.budget_met {
        warn!(
            "pruning stopped after {} rounds with {} of {n_total} gates masked",
            report.rounds.len(),
            report.final_mask.len()
        );
    }
    Ok(report)
}

/// Closed-form gated objectives with hand-derivable gradients.
pub mod toy {
    use super::*;
    use crate::backbone::Sublayer;

    /// `f(x) = w0·x + Σᵢ gᵢ·uᵢ·x`, loss `(f(x) − y)²` per sample, averaged.
    #[derive(Clone, Debug, PartialEq)]
    pub struct LinearGates {
        pub w0: f64,
        pub u: Vec<f64>,
        pub g: Vec<f64>,
        masked: BTreeSet<Site>,
        saved: BTreeMap<Site, f64>,
    }

    /// Site naming for toy gate `i`: layer `i / 7`, sublayer `i % 7`.
    pub fn site(i: usize) -> Site {
        Site::new(i / 7, Sublayer::ALL[i % 7])
    }

    fn index(s: Site) -> usize {
        s.layer * 7 + s.sublayer.index()
    }

    impl LinearGates {
        pub fn new(w0: f64, u: Vec<f64>) -> Self {
            let g = vec![1.0; u.len()];
            LinearGates {
                w0,
                u,
                g,
                masked: BTreeSet::new(),
                saved: BTreeMap::new(),
            }
        }

        pub fn predict(&self, x: f64) -> f64 {
            let s: f64 = self
                .u
                .iter()
                .zip(&self.g)
                .enumerate()
                .filter(|(i, _)| !self.masked.contains(&site(*i)))
                .map(|(_, (u, g))| u * g)
                .sum();
            (self.w0 + s) * x
        }
    }

    /// Pairs `(x, y)`.
    pub type ToyBatch = Vec<(f64, f64)>;

    impl GatedObjective for LinearGates {
        type Batch = ToyBatch;

        fn gate_sites(&self) -> Vec<Site> {
            (0..self.u.len()).map(site).collect()
        }

        fn masked_sites(&self) -> BTreeSet<Site> {
            self.masked.clone()
        }

        fn mask_sites(&mut self, sites: &BTreeSet<Site>) -> Result<()> {
            for &s in sites {
                if index(s) >= self.u.len() {
                    return Err(Error::Registry(format!("no gate {s}")));
                }
                if self.masked.insert(s) {
                    self.saved.insert(s, self.g[index(s)]);
                    self.g[index(s)] = 0.0;
                }
            }
            Ok(())
        }

        fn restore_sites(&mut self, sites: &BTreeSet<Site>) -> Result<()> {
            for s in sites {
                if let Some(v) = self.saved.remove(s) {
                    self.g[index(*s)] = v;
                    self.masked.remove(s);
                }
            }
            Ok(())
        }

        fn gate_gradients(&self, batch: &ToyBatch) -> Result<BTreeMap<Site, f64>> {
            let n = batch.len() as f64;
            let mut out = BTreeMap::new();
            for i in 0..self.u.len() {
                let s = site(i);
                if self.masked.contains(&s) {
                    continue;
                }
                let g: f64 = batch
                    .iter()
                    .map(|&(x, y)| 2.0 * (self.predict(x) - y) * self.u[i] * x)
                    .sum();
                out.insert(s, g / n);
            }
            Ok(out)
        }

        fn batch_loss(&self, batch: &ToyBatch) -> Result<f64> {
            let s: f64 = batch.iter().map(|&(x, y)| (self.predict(x) - y).powi(2)).sum();
            Ok(s / batch.len() as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::toy::{site, LinearGates, ToyBatch};
    use super::*;
    use crate::rng::seeded;

    fn toy2() -> (LinearGates, ToyBatch) {
        (LinearGates::new(0.0, vec![1.0, 1.0]), vec![(1.0, 1.2)])
    }

    #[test]
    fn closed_form_one_shot() {
        let (m, b) = toy2();
        let s = one_shot_importance(&m, &[&b]).unwrap();
        // f = 2, residual 0.8, ∂L/∂g = 2·0.8·1
        assert!((s[&site(0)] - 1.6).abs() < 1e-10);
        assert!((s[&site(1)] - 1.6).abs() < 1e-10);
    }

    #[test]
    fn masked_context_changes_importance() {
        let (mut m, b) = toy2();
        let one = one_shot_importance(&m, &[&b]).unwrap()[&site(0)];
        let ctx = trial_importance(&mut m, &[&b], &BTreeSet::from([site(1)])).unwrap();
        // f = 1, residual −0.2, |∂L/∂g₁| = 0.4
        assert!((ctx[&site(0)] - 0.4).abs() < 1e-10);
        assert_eq!(ctx[&site(1)], 0.0);
        assert!((one - ctx[&site(0)]).abs() > 0.1 * one);
        assert_eq!(m, toy2().0);
    }

    #[test]
    fn empty_and_full_trial_masks() {
        let m0 = LinearGates::new(0.3, vec![0.5, -1.0, 2.0]);
        let b: ToyBatch = vec![(1.0, 0.0), (2.0, 1.0)];
        let mut m = m0.clone();
        assert_eq!(
            trial_importance(&mut m, &[&b], &BTreeSet::new()).unwrap(),
            one_shot_importance(&m, &[&b]).unwrap()
        );
        let all: BTreeSet<Site> = m.gate_sites().into_iter().collect();
        assert!(trial_importance(&mut m, &[&b], &all).unwrap().values().all(|&v| v == 0.0));
        assert_eq!(m, m0);
        assert!(one_shot_importance(&m, &[]).is_err());
    }

    #[test]
    fn duplicate_batches_average_to_single() {
        let m = LinearGates::new(0.3, vec![0.5, -1.0, 2.0]);
        let b: ToyBatch = vec![(1.0, 0.0), (2.0, 1.0)];
        let one = one_shot_importance(&m, &[&b]).unwrap();
        let many = one_shot_importance(&m, &[&b, &b, &b]).unwrap();
        for (s, v) in one {
            assert!((many[&s] - v).abs() < 1e-15);
        }
    }

    #[test]
    fn sample_mask_counts() {
        let sites: Vec<Site> = (0..84).map(site).collect();
        let mut rng = seeded(0);
        assert_eq!(sample_mask(&mut rng, 0.5, &sites).unwrap().len(), 42);
        assert_eq!(sample_mask(&mut rng, 0.1, &sites[..4]).unwrap().len(), 0);
        assert!(sample_mask(&mut rng, 0.0, &sites).is_err());
        assert!(sample_mask(&mut rng, 1.0, &sites).is_err());
    }

    #[test]
    fn sample_mask_is_uniform() {
        let sites: Vec<Site> = (0..20).map(site).collect();
        let mut rng = seeded(1);
        let draws = 10_000;
        let mut freq = [0usize; 20];
        for _ in 0..draws {
            for s in sample_mask(&mut rng, 0.3, &sites).unwrap() {
                freq[s.layer * 7 + s.sublayer.index()] += 1;
            }
        }
        let p = 0.3;
        let sd = (p * (1.0 - p) / draws as f64).sqrt();
        for f in freq {
            assert!((f as f64 / draws as f64 - p).abs() < 3.5 * sd);
        }
    }

    #[test]
    fn dsic_single_empty_trial_is_one_shot() {
        // p small enough that round(p·u) = 0
        let mut m = LinearGates::new(0.1, vec![1.0, 2.0, 3.0]);
        let b: ToyBatch = vec![(1.0, 0.5)];
        let t = dsic_importance(&mut m, &[&b], 0.1, 1, &mut seeded(2)).unwrap();
        assert!(t.masks[0].is_empty());
        assert_eq!(t.mean, one_shot_importance(&m, &[&b]).unwrap());
    }

    #[test]
    fn dsic_mean_is_exact_and_state_restored() {
        let u: Vec<f64> = (0..14).map(|i| (i as f64 - 6.5) / 3.0).collect();
        let mut m = LinearGates::new(0.2, u);
        m.g.iter_mut().enumerate().for_each(|(i, g)| *g = 1.0 + 0.01 * i as f64);
        let before = m.clone();
        let b: ToyBatch = vec![(1.0, 0.3), (-0.5, 0.2)];
        for trials in [8, 64] {
            let t = dsic_importance(&mut m, &[&b], 0.5, trials, &mut seeded(3)).unwrap();
            assert_eq!(m, before);
            for (site, &v) in &t.mean {
                let mut s = 0.0;
                for k in 0..trials {
                    s += t.trials[k][site];
                }
                assert_eq!(v, s / trials as f64);
            }
            for (trial, mask) in t.trials.iter().zip(&t.masks) {
                assert!(mask.iter().all(|s| trial[s] == 0.0));
                assert!(trial.values().all(|&v| v >= 0.0));
            }
            let again = dsic_importance(&mut m, &[&b], 0.5, trials, &mut seeded(3)).unwrap();
            assert_eq!(again, t);
        }
    }

    #[test]
    fn dsic_converges_to_expected_trial_score() {
        // 3 gates, trial masks of exactly one gate: expectation over the 3
        // equally likely masks is computable exactly.
        let mut m = LinearGates::new(0.0, vec![1.0, 0.5, -0.25]);
        let b: ToyBatch = vec![(1.0, 1.0)];
        let mut expected: BTreeMap<Site, f64> = m.gate_sites().into_iter().map(|s| (s, 0.0)).collect();
        for j in 0..3 {
            let t = trial_importance(&mut m, &[&b], &BTreeSet::from([site(j)])).unwrap();
            for (s, v) in t {
                *expected.get_mut(&s).unwrap() += v / 3.0;
            }
        }
        let t = dsic_importance(&mut m, &[&b], 1.0 / 3.0, 1024, &mut seeded(4)).unwrap();
        for (s, e) in expected {
            assert!((t.mean[&s] - e).abs() <= 0.05 * e, "{s}: {} vs {e}", t.mean[&s]);
        }
    }

    #[test]
    fn site_masked_in_every_trial_scores_zero() {
        let trials = vec![
            BTreeMap::from([(site(0), 0.0), (site(1), 2.0)]),
            BTreeMap::from([(site(0), 0.0), (site(1), 4.0)]),
        ];
        let t = ImportanceTable::from_trials(trials, vec![BTreeSet::from([site(0)]); 2]).unwrap();
        assert_eq!(t.mean[&site(0)], 0.0);
        assert_eq!(t.mean[&site(1)], 3.0);
    }

    #[test]
    fn prune_round_ties_and_argmin() {
        let sites: Vec<Site> = (0..10).map(site).collect();
        let flat: BTreeMap<Site, f64> = sites.iter().map(|&s| (s, 1.0)).collect();
        assert_eq!(prune_round(&flat, &sites, 3).unwrap(), BTreeSet::from([site(0), site(1), site(2)]));
        let mut scores = flat.clone();
        scores.insert(site(7), 0.1);
        let sched = PruneSchedule { budget: 0.0, ..PruneSchedule::default() };
        let c = sched.round_count(10, 10);
        assert_eq!(c, 0);
        let sched = PruneSchedule { budget: 0.9, ..PruneSchedule::default() };
        assert_eq!(sched.round_count(10, 10), 1);
        assert_eq!(prune_round(&scores, &sites, 1).unwrap(), BTreeSet::from([site(7)]));
    }

    #[test]
    fn schedule_arithmetic() {
        let s = PruneSchedule::default();
        let plan = s.plan(84);
        assert_eq!(s.keep_count(84), 4);
        assert_eq!(plan.iter().sum::<usize>(), 80);
        assert!(plan.len() <= 28);
        assert_eq!(plan[0], 9);
        assert_eq!(s.keep_count(14), 1);
        assert_eq!(s.plan(14).iter().sum::<usize>(), 13);
        let zero = PruneSchedule { budget: 0.0, ..s };
        assert!(zero.plan(84).is_empty());
    }

    #[test]
    fn workflow_reaches_budget_and_is_reproducible() {
        let u: Vec<f64> = (0..14).map(|i| 0.1 * (i as f64 + 1.0)).collect();
        let run = || {
            let mut m = LinearGates::new(0.0, u.clone());
            let sched = PruneSchedule { alpha: 1, ..PruneSchedule::default() };
            let mut steps = 0;
            let rep = run_workflow(
                &mut m,
                &sched,
                ImportanceMethod::Dsic,
                &mut seeded(5),
                |_, a| {
                    steps += a;
                    Ok(())
                },
                |_| vec![vec![(1.0, 2.0)]],
            )
            .unwrap();
            (rep, steps)
        };
        let (a, steps) = run();
        let (b, _) = run();
        assert_eq!(a, b);
        assert!(a.budget_met);
        assert_eq!(a.final_mask.len(), 13);
        assert_eq!(steps, a.rounds.len());
        // the permanent mask only grows
        let mut seen = BTreeSet::new();
        for r in &a.rounds {
            assert!(r.masked.is_disjoint(&seen));
            seen.extend(r.masked.iter().copied());
            for m in &r.table.masks {
                assert!(m.is_disjoint(&seen.difference(&r.masked).copied().collect()));
            }
        }
    }

    #[test]
    fn zero_budget_workflow_does_nothing() {
        let mut m = LinearGates::new(0.0, vec![1.0; 5]);
        let sched = PruneSchedule { budget: 0.0, ..PruneSchedule::default() };
        let rep = run_workflow(&mut m, &sched, ImportanceMethod::Dsic, &mut seeded(0), |_, _| Ok(()), |_| vec![vec![(1.0, 1.0)]]).unwrap();
        assert!(rep.rounds.is_empty() && rep.final_mask.is_empty() && rep.budget_met);
    }

    #[test]
    fn round_limit_leaves_partial_mask() {
        let mut m = LinearGates::new(0.0, vec![1.0; 14]);
        let sched = PruneSchedule { max_rounds: 2, ..PruneSchedule::default() };
        let rep = run_workflow(&mut m, &sched, ImportanceMethod::OneShot, &mut seeded(0), |_, _| Ok(()), |_| vec![vec![(1.0, 1.0)]]).unwrap();
        assert!(!rep.budget_met);
        assert_eq!(rep.final_mask.len(), 4);
    }

    #[test]
    fn csv_dump() {
        let mut m = LinearGates::new(0.0, vec![1.0, 2.0, 3.0]);
        let sched = PruneSchedule { p: 0.34, budget: 0.5, trials: 2, ..PruneSchedule::default() };
        let rep = run_workflow(&mut m, &sched, ImportanceMethod::Dsic, &mut seeded(0), |_, _| Ok(()), |_| vec![vec![(1.0, 1.0)]]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("imp.csv");
        rep.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "round,trial,layer,sublayer,score,masked_flag");
        assert_eq!(lines.len(), 1 + rep.rounds.len() * 2 * 3);
    }
}
