//! Forecast error metrics and the McNemar paired-accuracy test.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_pair(op: &str, pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Input(format!(
            "{op}: prediction has {} values, truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Input(format!("{op}: empty input")));
    }
    Ok(())
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair("mse", pred, truth)?;
    let s: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(s / pred.len() as f64)
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair("mae", pred, truth)?;
    let s: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok(s / pred.len() as f64)
}

/// 200-scaled symmetric MAPE; a term with `|p| + |t| = 0` contributes 0.
pub fn smape(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair("smape", pred, truth)?;
    let s: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| {
            let den = p.abs() + t.abs();
            if den == 0.0 {
                0.0
            } else {
                (p - t).abs() / den
            }
        })
        .sum();
    Ok(200.0 * s / pred.len() as f64)
}

/// Paired outcome counts. `b`: A wrong and B correct; `c`: A correct and B wrong.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

impl ContingencyTable {
    pub fn total(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }

    pub fn from_outcomes(a_correct: &[bool], b_correct: &[bool]) -> Result<Self> {
        if a_correct.len() != b_correct.len() {
            return Err(Error::Input(format!(
                "paired outcomes differ in length: {} vs {}",
                a_correct.len(),
                b_correct.len()
            )));
        }
        let mut t = ContingencyTable::default();
        for (&x, &y) in a_correct.iter().zip(b_correct) {
            match (x, y) {
                (true, true) => t.a += 1,
                (false, true) => t.b += 1,
                (true, false) => t.c += 1,
                (false, false) => t.d += 1,
            }
        }
        Ok(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McNemar {
    pub chi2: f64,
    pub p_value: f64,
}

/// Uncorrected McNemar statistic `(b − c)² / (b + c)` with a 1-dof p-value.
pub fn mcnemar(table: &ContingencyTable) -> Result<McNemar> {
    let n = table.b + table.c;
    if n == 0 {
        return Err(Error::Numeric("McNemar statistic undefined when b + c = 0".into()));
    }
    let diff = table.b as f64 - table.c as f64;
    let chi2 = diff * diff / n as f64;
    Ok(McNemar {
        chi2,
        p_value: chi2_sf(chi2, 1.0)?,
    })
}

/// `|p − t| < threshold` per point.
pub fn accuracy_classify(pred: &[f64], truth: &[f64], threshold: f64) -> Result<Vec<bool>> {
    check_pair("accuracy_classify", pred, truth)?;
    if !(threshold > 0.0) {
        return Err(Error::Input(format!("threshold must be positive, got {threshold}")));
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs() < threshold).collect())
}

/// Survival function of the chi-square distribution with `k` degrees of freedom.
pub fn chi2_sf(x: f64, k: f64) -> Result<f64> {
    if !(k > 0.0) || x.is_nan() {
        return Err(Error::Numeric(format!("chi2_sf({x}, {k}) undefined")));
    }
    if x <= 0.0 {
        return Ok(1.0);
    }
    Ok(gamma_q(k / 2.0, x / 2.0))
}

/// Lanczos approximation (g = 7, n = 9).
fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized upper incomplete gamma `Q(a, x)`.
fn gamma_q(a: f64, x: f64) -> f64 {
    if x < a + 1.0 {
        1.0 - gamma_p_series(a, x)
    } else {
        gamma_q_cf(a, x)
    }
}

fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut ap = a;
    for _ in 0..1000 {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * 1e-16 {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

/// Modified Lentz evaluation of the continued fraction for `Q(a, x)`.
fn gamma_q_cf(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..1000 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn error_metrics() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[2.0, 3.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(mse(&[2.0, 3.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(mse(&[0.0, 2.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(mae(&[0.0, 2.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!(matches!(mse(&[1.0], &[1.0, 2.0]), Err(Error::Input(_))));
        assert!(mae(&[], &[]).is_err());
    }

    #[test]
    fn smape_cases() {
        assert_eq!(smape(&[1.5, -2.0], &[1.5, -2.0]).unwrap(), 0.0);
        assert_eq!(smape(&[3.0], &[1.0]).unwrap(), 100.0);
        assert_eq!(smape(&[0.0], &[0.0]).unwrap(), 0.0);
        assert_eq!(smape(&[0.0], &[4.0]).unwrap(), 200.0);
    }

    #[test]
    fn mcnemar_reference_values() {
        let r = mcnemar(&ContingencyTable { a: 0, b: 985, c: 1108, d: 0 }).unwrap();
        assert!((r.chi2 - 7.23).abs() < 0.01, "{}", r.chi2);
        assert!((r.p_value - 0.0071).abs() < 0.0005, "{}", r.p_value);
        let r = mcnemar(&ContingencyTable { a: 3, b: 10, c: 0, d: 1 }).unwrap();
        assert_eq!(r.chi2, 10.0);
        assert!((r.p_value - 0.001_565_402_258_002_549).abs() < 1e-9);
        let r = mcnemar(&ContingencyTable { a: 0, b: 7, c: 7, d: 0 }).unwrap();
        assert_eq!((r.chi2, r.p_value), (0.0, 1.0));
        assert!(mcnemar(&ContingencyTable { a: 5, b: 0, c: 0, d: 5 }).is_err());
    }

    #[test]
    fn chi2_sf_against_reference_table() {
        // reference values from scipy.stats.chi2.sf
        let cases = [
            (0.5, 1.0, 0.479_500_122_186_953_37),
            (3.841_458_820_694_124, 1.0, 0.049_999_999_999_999_89),
            (7.23, 1.0, 0.007_169_520_727_17),
            (2.0, 2.0, 0.367_879_441_171_442_45),
            (5.0, 3.0, 0.171_797_144_296_733_5),
            (20.0, 4.0, 0.000_499_399_227_387_333_6),
            (1e-4, 1.0, 0.992_021_287_370_736_8),
            (60.0, 1.0, 9.485_737_571_073_857e-15),
        ];
        for (x, k, want) in cases {
            let got = chi2_sf(x, k).unwrap();
            assert!((got - want).abs() < 1e-6 * want.max(1e-9) + 1e-12, "sf({x},{k}) = {got}, want {want}");
        }
        assert_eq!(chi2_sf(0.0, 1.0).unwrap(), 1.0);
        assert!(chi2_sf(1.0, 0.0).is_err());
    }

    #[test]
    fn accuracy_and_table() {
        assert_eq!(accuracy_classify(&[1.0], &[1.0], 1e-9).unwrap(), vec![true]);
        assert_eq!(accuracy_classify(&[5.0], &[0.0], 5.0).unwrap(), vec![false]);
        assert!(accuracy_classify(&[1.0], &[1.0], 0.0).is_err());
        let truth = [0.0; 6];
        let pa = [0.1, 2.0, 0.1, 2.0, 0.1, 2.0];
        let pb = [0.1, 0.1, 2.0, 2.0, 0.1, 0.1];
        let ca = accuracy_classify(&pa, &truth, 1.0).unwrap();
        let cb = accuracy_classify(&pb, &truth, 1.0).unwrap();
        let t = ContingencyTable::from_outcomes(&ca, &cb).unwrap();
        assert_eq!(t, ContingencyTable { a: 2, b: 2, c: 1, d: 1 });
        assert_eq!(t.total(), 6);
    }

    proptest! {
        #[test]
        fn metric_properties(v in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..40)) {
            let (p, t): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let s = smape(&p, &t).unwrap();
            prop_assert!((0.0..=200.0).contains(&s));
            prop_assert!(mse(&p, &t).unwrap() >= 0.0);
            prop_assert_eq!(mse(&p, &p).unwrap(), 0.0);
            prop_assert_eq!(mae(&t, &t).unwrap(), 0.0);
        }

        #[test]
        fn mcnemar_symmetric(b in 0u64..5000, c in 0u64..5000) {
            prop_assume!(b + c > 0);
            let x = mcnemar(&ContingencyTable { a: 0, b, c, d: 0 }).unwrap();
            let y = mcnemar(&ContingencyTable { a: 0, b: c, c: b, d: 0 }).unwrap();
            prop_assert_eq!(x, y);
            prop_assert!((0.0..=1.0).contains(&x.p_value));
        }
    }
}
