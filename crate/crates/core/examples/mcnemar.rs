//! Forecast error metrics and the McNemar test on paired point accuracy.

use trace_core::metrics::{accuracy_classify, mae, mcnemar, mse, smape, ContingencyTable};

fn main() -> trace_core::Result<()> {
    let truth = [1.0, 2.0, 0.0, -1.0, 3.0, 0.5];
    let a = [1.1, 1.7, 0.0, -0.2, 2.9, 0.4];
    let b = [0.4, 2.1, 0.6, -1.1, 2.0, 0.5];
    println!("A: MSE {:.4} MAE {:.4} sMAPE {:.2}", mse(&a, &truth)?, mae(&a, &truth)?, smape(&a, &truth)?);
    println!("B: MSE {:.4} MAE {:.4} sMAPE {:.2}", mse(&b, &truth)?, mae(&b, &truth)?, smape(&b, &truth)?);

    // a forecast counts as correct when its absolute error is below 0.5
    let ca = accuracy_classify(&a, &truth, 0.5)?;
    let cb = accuracy_classify(&b, &truth, 0.5)?;
    let t = ContingencyTable::from_outcomes(&ca, &cb)?;
    println!("paired outcomes: {t:?}");
    match mcnemar(&t) {
        Ok(r) => println!("chi2 {:.3}, p {:.4}", r.chi2, r.p_value),
        Err(e) => println!("no test: {e}"),
    }

    let large = ContingencyTable { a: 0, b: 985, c: 1108, d: 0 };
    let r = mcnemar(&large)?;
    println!("b = 985, c = 1108: chi2 {:.2}, p {:.4}", r.chi2, r.p_value);
    Ok(())
}
