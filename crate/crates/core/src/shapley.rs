//! Exact Shapley values over gate coalitions and rank correlation against
//! gradient importance estimates.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Site, Sublayer};
use crate::error::{Error, Result};
use crate::pruner::{dsic_importance, one_shot_importance, GatedObjective};
use crate::rng::Rng64;

/// Largest player count enumerated exactly.
pub const MAX_PLAYERS: usize = 14;

/// `C(n−1, s)` for `s = 0..n−1`, exact in `f64` for the supported sizes.
fn binomials(n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    let mut c: u64 = 1;
    for s in 0..n as u64 {
        out.push(c as f64);
        c = c * (n as u64 - 1 - s) / (s + 1);
    }
    out
}

/// Shapley values from a table of all `2ⁿ` coalition values, where bit `i`
/// of the index marks player `i` as present.
///
/// Marginal contributions are grouped by coalition size and each group is
/// summed in sorted order before averaging, so interchangeable players get
/// bit-identical values and additive games with exactly representable sums
/// are recovered exactly.
pub fn shapley_from_values(n: usize, values: &[f64]) -> Result<Vec<f64>> {
    if n == 0 || n > MAX_PLAYERS {
        return Err(Error::Resource(format!(
            "exact enumeration supports 1..={MAX_PLAYERS} players, got {n}; use a sampling estimator"
        )));
    }
    if values.len() != 1 << n {
        return Err(Error::Input(format!("expected {} coalition values, got {}", 1usize << n, values.len())));
    }
    let binom = binomials(n);
    let mut groups: Vec<Vec<f64>> = binom.iter().map(|&c| Vec::with_capacity(c as usize)).collect();
    let mut phi = vec![0.0; n];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1usize << i;
        groups.iter_mut().for_each(Vec::clear);
        for s in 0..values.len() {
            if s & bit == 0 {
                groups[s.count_ones() as usize].push(values[s | bit] - values[s]);
            }
        }
        let mut acc = 0.0;
        for (g, c) in groups.iter_mut().zip(&binom) {
            g.sort_by(f64::total_cmp);
            acc += g.iter().sum::<f64>() / c;
        }
        *p = acc / n as f64;
    }
    Ok(phi)
}

/// Enumerate `v` over every coalition, then compute Shapley values.
pub fn exact_shapley(n: usize, v: impl Fn(usize) -> Result<f64> + Sync) -> Result<Vec<f64>> {
    if n == 0 || n > MAX_PLAYERS {
        return shapley_from_values(n, &[]);
    }
    let values: Vec<f64> = (0..1usize << n).into_par_iter().map(&v).collect::<Result<_>>()?;
    shapley_from_values(n, &values)
}

/// Negative mean loss over `batches` with exactly the coalition `mask` of
/// `players` unmasked, for every coalition. The model is restored after each
/// evaluation.
pub fn coalition_values<M>(model: &M, players: &[Site], batches: &[&M::Batch]) -> Result<Vec<f64>>
where
    M: GatedObjective + Clone + Sync,
    M::Batch: Sync,
{
    let n = players.len();
    if n == 0 || n > MAX_PLAYERS {
        return Err(Error::Resource(format!("{n} players outside the exact range 1..={MAX_PLAYERS}")));
    }
    if batches.is_empty() {
        return Err(Error::Input("coalition values need at least one batch".into()));
    }
    let total = 1usize << n;
    let chunk = total.div_ceil(rayon::current_num_threads().max(1) * 4).max(64);
    let starts: Vec<usize> = (0..total).step_by(chunk).collect();
    let parts: Vec<Vec<f64>> = starts
        .into_par_iter()
        .map(|start| {
            let mut local = model.clone();
            let mut out = Vec::with_capacity(chunk);
            for s in start..(start + chunk).min(total) {
                let off = players
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| s & (1 << i) == 0)
                    .map(|(_, &p)| p)
                    .collect();
                local.mask_sites(&off)?;
                let mut loss = 0.0;
                for b in batches {
                    loss += local.batch_loss(b)?;
                }
                local.restore_sites(&off)?;
                out.push(-loss / batches.len() as f64);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(parts.concat())
}

/// Exact Shapley value of every currently unmasked gate.
pub fn gate_shapley<M>(model: &M, batches: &[&M::Batch]) -> Result<BTreeMap<Site, f64>>
where
    M: GatedObjective + Clone + Sync,
    M::Batch: Sync,
{
    let players = model.unmasked_sites();
    let values = coalition_values(model, &players, batches)?;
    let phi = shapley_from_values(players.len(), &values)?;
    Ok(players.into_iter().zip(phi).collect())
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 3 {
        return Err(Error::Input(format!(
            "spearman needs two vectors of equal length ≥ 3, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Numeric("rank correlation undefined: a score vector is constant".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Shapley, masked-context and one-shot scores on one model snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasComparison {
    pub shapley: BTreeMap<Site, f64>,
    pub dsic: BTreeMap<Site, f64>,
    pub one_shot: BTreeMap<Site, f64>,
    /// `None` when a score vector has no rank variance.
    pub rho_dsic: Option<f64>,
    pub rho_one_shot: Option<f64>,
}

fn rho(a: &BTreeMap<Site, f64>, b: &BTreeMap<Site, f64>) -> Result<Option<f64>> {
    let x: Vec<f64> = a.values().copied().collect();
    let y: Vec<f64> = a.keys().map(|k| b.get(k).copied().unwrap_or(0.0)).collect();
    match spearman(&x, &y) {
        Ok(r) => Ok(Some(r)),
        Err(Error::Numeric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn bias_comparison<M>(model: &mut M, batches: &[&M::Batch], p: f64, trials: usize, rng: &mut Rng64) -> Result<BiasComparison>
where
    M: GatedObjective + Clone + Sync,
    M::Batch: Sync,
{
    let shapley = gate_shapley(model, batches)?;
    let dsic = dsic_importance(model, batches, p, trials, rng)?.mean;
    let one_shot = one_shot_importance(model, batches)?;
    Ok(BiasComparison {
        rho_dsic: rho(&shapley, &dsic)?,
        rho_one_shot: rho(&shapley, &one_shot)?,
        shapley,
        dsic,
        one_shot,
    })
}

/// Layer × sublayer grid; cells without a score are left empty.
pub fn write_grid(path: &Path, scores: &BTreeMap<Site, f64>, n_layers: usize) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let names: Vec<&str> = Sublayer::ALL.iter().map(|s| s.name()).collect();
    writeln!(f, "layer,{}", names.join(","))?;
    for l in 0..n_layers {
        let cells: Vec<String> = Sublayer::ALL
            .iter()
            .map(|&s| scores.get(&Site::new(l, s)).map(f64::to_string).unwrap_or_default())
            .collect();
        writeln!(f, "{l},{}", cells.join(","))?;
    }
    f.flush()?;
    Ok(())
}

/// Summary of a batch of bias comparisons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasSummary {
    pub instances: usize,
    pub median_rho_dsic: f64,
    pub median_rho_one_shot: f64,
    /// Instances whose correlation was undefined and excluded.
    pub degenerate: usize,
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    Some(if s.len() % 2 == 1 { s[m] } else { 0.5 * (s[m - 1] + s[m]) })
}

pub fn summarize(results: &[BiasComparison]) -> Result<BiasSummary> {
    let pairs: Vec<(f64, f64)> = results
        .iter()
        .filter_map(|r| Some((r.rho_dsic?, r.rho_one_shot?)))
        .collect();
    let (d, o): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    Ok(BiasSummary {
        instances: results.len(),
        median_rho_dsic: median(&d).ok_or_else(|| Error::Numeric("no instance had defined correlations".into()))?,
        median_rho_one_shot: median(&o).unwrap_or(f64::NAN),
        degenerate: results.len() - d.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruner::toy::{site, LinearGates, ToyBatch};
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn binomials_are_exact() {
        for n in 1..=MAX_PLAYERS {
            let b = binomials(n);
            assert_eq!(b.iter().sum::<f64>(), (1u64 << (n - 1)) as f64);
            assert_eq!(b[0], 1.0);
            assert_eq!(b[n - 1], 1.0);
        }
        assert_eq!(binomials(14)[6], 1716.0);
    }

    #[test]
    fn symmetric_players_are_bit_identical_on_random_games() {
        for seed in 0..20 {
            let mut rng = seeded(seed);
            let n = rng.random_range(2..=10);
            // value depends on players 0 and 1 only through how many are present
            let base: Vec<f64> = (0..1usize << n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let vals: Vec<f64> = (0..1usize << n).map(|s| base[s & !3 | if s & 3 == 0 { 0 } else if s & 3 == 3 { 3 } else { 1 }]).collect();
            let phi = shapley_from_values(n, &vals).unwrap();
            assert_eq!(phi[0].to_bits(), phi[1].to_bits(), "seed {seed}");
        }
    }

    #[test]
    fn additive_games_recovered_exactly_up_to_ten_players() {
        for seed in 0..20 {
            let mut rng = seeded(seed);
            let n = rng.random_range(1..=10);
            let c: Vec<f64> = (0..n).map(|_| rng.random_range(-64i32..64) as f64 / 8.0).collect();
            let phi = exact_shapley(n, |s| Ok((0..n).filter(|i| s & (1 << i) != 0).map(|i| c[i]).sum())).unwrap();
            assert_eq!(phi, c, "seed {seed}");
        }
    }

    #[test]
    fn additive_game_recovers_coefficients() {
        let c = [0.5, -1.25, 3.0];
        let phi = exact_shapley(3, |s| Ok((0..3).filter(|i| s & (1 << i) != 0).map(|i| c[i]).sum())).unwrap();
        assert_eq!(phi, c.to_vec());
    }

    #[test]
    fn symmetry_and_null_player() {
        // players 0 and 1 interchangeable, player 2 never matters
        let v = |s: usize| -> Result<f64> {
            let k = (s & 1) + ((s >> 1) & 1);
            Ok([0.0, 1.0, 1.5][k])
        };
        let phi = exact_shapley(3, v).unwrap();
        assert_eq!(phi[0], phi[1]);
        assert_eq!(phi[2], 0.0);
    }

    #[test]
    fn efficiency_on_random_games() {
        for seed in 0..10 {
            let mut rng = seeded(seed);
            let n = rng.random_range(1..=10);
            let vals: Vec<f64> = (0..1 << n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let phi = shapley_from_values(n, &vals).unwrap();
            let s: f64 = phi.iter().sum();
            assert!((s - (vals[(1 << n) - 1] - vals[0])).abs() < 1e-8);
        }
    }

    #[test]
    fn cap_is_enforced() {
        assert!(matches!(shapley_from_values(15, &[]), Err(Error::Resource(_))));
        assert!(matches!(exact_shapley(15, |_| Ok(0.0)), Err(Error::Resource(_))));
    }

    #[test]
    fn spearman_cases() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::Numeric(_))));
        assert!(spearman(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn toy_game_matches_hand_values() {
        // f = g1 + g2, y = 1.2; v(S) = −(|S| − 1.2)²
        let m = LinearGates::new(0.0, vec![1.0, 1.0]);
        let b: ToyBatch = vec![(1.0, 1.2)];
        let before = m.clone();
        let vals = coalition_values(&m, &m.gate_sites(), &[&b]).unwrap();
        let want = [-1.44, -0.04, -0.04, -0.64];
        for (v, w) in vals.iter().zip(want) {
            assert!((v - w).abs() < 1e-12);
        }
        let phi = gate_shapley(&m, &[&b]).unwrap();
        assert!((phi[&site(0)] - 0.4).abs() < 1e-12);
        assert_eq!(phi[&site(0)], phi[&site(1)]);
        assert_eq!(m, before);
    }

    #[test]
    fn zero_update_gate_is_null_player() {
        let m = LinearGates::new(0.1, vec![1.0, 0.0, -0.5]);
        let b: ToyBatch = vec![(1.0, 0.7), (2.0, 1.0)];
        let phi = gate_shapley(&m, &[&b]).unwrap();
        assert_eq!(phi[&site(1)], 0.0);
    }

    #[test]
    fn redundant_pair_masked_context_expectation() {
        // with exactly one of two gates masked per trial, each gate's mean
        // score tends to half its score with the partner masked
        let mut m = LinearGates::new(0.0, vec![1.0, 1.0]);
        let b: ToyBatch = vec![(1.0, 1.2)];
        let t = dsic_importance(&mut m, &[&b], 0.5, 2048, &mut seeded(3)).unwrap();
        for i in 0..2 {
            assert!((t.mean[&site(i)] - 0.2).abs() < 0.02, "{}", t.mean[&site(i)]);
        }
        // while one-shot gives each 1.6
        assert!((one_shot_importance(&m, &[&b]).unwrap()[&site(0)] - 1.6).abs() < 1e-12);
    }

    #[test]
    fn single_active_gate_is_tie_degenerate() {
        let m = LinearGates::new(0.0, vec![1.0, 0.0, 0.0, 0.0]);
        let b: ToyBatch = vec![(1.0, 2.0)];
        let mut mm = m.clone();
        let r = bias_comparison(&mut mm, &[&b], 0.5, 16, &mut seeded(0)).unwrap();
        let top = |s: &BTreeMap<Site, f64>| s.iter().max_by(|a, b| a.1.total_cmp(b.1)).map(|(k, _)| *k).unwrap();
        assert_eq!(top(&r.shapley), site(0));
        assert_eq!(top(&r.one_shot), site(0));
        assert_eq!(top(&r.dsic), site(0));
        // three tied zeros plus one nonzero still give a defined correlation
        assert_eq!(r.rho_one_shot, Some(1.0));
    }

    #[test]
    fn grid_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.csv");
        let scores = BTreeMap::from([(Site::new(0, Sublayer::Query), 1.5), (Site::new(1, Sublayer::Down), -2.0)]);
        write_grid(&p, &scores, 2).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "layer,Query,Key,Value,Output,Gate,Up,Down");
        assert_eq!(lines[1], "0,1.5,,,,,,");
        assert_eq!(lines[2], "1,,,,,,,-2");
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    proptest! {
        #[test]
        fn spearman_monotone_invariance(v in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..30)) {
            let (a, b): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            if let Ok(r) = spearman(&a, &b) {
                let a2: Vec<f64> = a.iter().map(|x| 2.0 * x + 5.0).collect();
                prop_assert_eq!(spearman(&a2, &b).unwrap(), r);
                let a3: Vec<f64> = a.iter().map(|x| x.powi(3)).collect();
                prop_assert_eq!(spearman(&a3, &b).unwrap(), r);
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            }
        }
    }
}
