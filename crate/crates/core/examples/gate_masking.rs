//! Masking every gate turns an adapted model back into its frozen backbone,
//! bit for bit; restoring the gates brings the adapted output back.

use std::collections::BTreeSet;

use trace_core::backbone::BackboneConfig;
use trace_core::heads::{HeadConfig, HeadVariant};
use trace_core::model::Model;
use trace_core::params::ParamGroup;
use trace_core::rng::{normal_tensor, seeded};

fn main() -> trace_core::Result<()> {
    let bb = BackboneConfig::desk();
    let head = HeadConfig::new(HeadVariant::Linear, bb.n_patches(), bb.d_model, 16, 1);
    let frozen = Model::new(bb.clone(), head.clone(), None, 11)?;
    let mut adapted = Model::new(bb.clone(), head, Some(2), 11)?;

    // move the adapters away from their zero start so they change the output
    let mut rng = seeded(5);
    for (id, e) in adapted.store.clone().iter() {
        if e.group == ParamGroup::Lora && e.name.ends_with(".b") {
            adapted.store.set_value(id, normal_tensor(&mut rng, e.value.shape(), 0.05))?;
        }
    }

    let x = normal_tensor(&mut rng, &[100, bb.seq_len], 1.0).data().to_vec();
    let base = frozen.predict(&x, 100)?;
    let before = adapted.predict(&x, 100)?;
    let moved = before.iter().zip(&base).filter(|(a, b)| a != b).count();
    println!("{} gates, adapted output differs from backbone at {moved} of {} values", bb.sites().len(), base.len());

    let all: BTreeSet<_> = bb.sites().into_iter().collect();
    let lora = adapted.lora.as_mut().expect("adapters attached");
    lora.mask(&mut adapted.store, &all)?;
    let masked = adapted.predict(&x, 100)?;
    let identical = masked.iter().zip(&base).all(|(a, b)| a.to_bits() == b.to_bits());
    println!("all gates masked: bit-identical to backbone = {identical}");

    let lora = adapted.lora.as_mut().expect("adapters attached");
    lora.restore(&mut adapted.store, &all)?;
    let after = adapted.predict(&x, 100)?;
    println!("restored: matches pre-mask output = {}", after == before);
    Ok(())
}
