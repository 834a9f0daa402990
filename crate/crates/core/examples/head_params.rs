//! Parameter counts of every forecasting head, from the closed-form formulas
//! and from the tensors actually allocated.

use trace_core::backbone::BackboneConfig;
use trace_core::heads::{head_param_grid, Head, HeadConfig, HeadVariant};
use trace_core::params::ParamStore;
use trace_core::rng::seeded;

fn main() -> trace_core::Result<()> {
    let full = BackboneConfig::full();
    println!("full scale: N = {}, d = {}", full.n_patches(), full.d_model);
    for r in head_param_grid(full.n_patches(), full.d_model, &[96, 192, 336, 720], &[4, 8, 16])? {
        println!("  H={:<4} beta={:<3} linear {:>10}  proj_down {:>9}  ({:.1}% fewer)", r.horizon, r.beta, r.linear, r.reduced, r.reduction_pct);
    }

    let desk = BackboneConfig::desk();
    println!("desk scale, H = 16, beta = 4:");
    for v in HeadVariant::ALL {
        let beta = if v == HeadVariant::Linear { 1 } else { 4 };
        let cfg = HeadConfig::new(v, desk.n_patches(), desk.d_model, 16, beta);
        let mut store = ParamStore::new();
        let head = Head::new(cfg.clone(), &mut store, &mut seeded(0))?;
        println!("  {:<13} formula {:>5}  allocated {:>5}", v.as_str(), cfg.param_count(), head.allocated(&store));
    }
    Ok(())
}
