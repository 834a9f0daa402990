//! Compare analytic gradients with central finite differences, first on raw
//! tape operations and then on the gate gradients of a small adapted model.

use trace_core::autodiff::gradcheck::{check, rel_err};
use trace_core::autodiff::{Graph, Tensor, Var};
use trace_core::backbone::{BackboneConfig, FfnKind};
use trace_core::heads::{HeadConfig, HeadVariant};
use trace_core::model::{Batch, Model};
use trace_core::params::ParamGroup;
use trace_core::rng::{normal_tensor, seeded};

fn main() -> trace_core::Result<()> {
    let mut rng = seeded(0);
    let x = normal_tensor(&mut rng, &[4, 6], 1.0);
    let w = normal_tensor(&mut rng, &[6, 3], 0.5);

    type Build = fn(&mut Graph, &[Var]) -> trace_core::Result<Var>;
    let ops: [(&str, Build); 3] = [
        ("matmul", |g, v| {
            let y = g.matmul(v[0], v[1])?;
            Ok(g.sum(y))
        }),
        ("softmax", |g, v| {
            let y = g.matmul(v[0], v[1])?;
            let s = g.softmax_rows(y)?;
            let sq = g.mul(s, s)?;
            Ok(g.sum(sq))
        }),
        ("layer_norm", |g, v| {
            let gain = g.constant(Tensor::vector(vec![1.0, 0.5, 2.0, 1.0, -1.0, 0.3]));
            let bias = g.constant(Tensor::vector(vec![0.1; 6]));
            let y = g.layer_norm(v[0], gain, bias)?;
            let z = g.matmul(y, v[1])?;
            let t = g.gelu(z);
            Ok(g.sum(t))
        }),
    ];
    for (name, build) in ops {
        let r = check(&[x.clone(), w.clone()], 1e-5, build)?;
        println!("{name:>10}: max relative error {:.2e} over {} coordinates", r.max_rel_err, r.coords);
    }

    // gate gradient of a whole model versus perturbing the gate itself
    let bb = BackboneConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        seq_len: 16,
        patch_len: 4,
        ffn: FfnKind::Glu,
    };
    let head = HeadConfig::new(HeadVariant::Linear, bb.n_patches(), bb.d_model, 4, 1);
    let mut model = Model::new(bb, head, Some(2), 3)?;
    // give every B a nonzero value so gates have something to scale
    for (id, e) in model.store.clone().iter() {
        if e.group == ParamGroup::Lora && e.name.ends_with(".b") {
            model.store.set_value(id, normal_tensor(&mut rng, e.value.shape(), 0.1))?;
        }
    }
    let xs = normal_tensor(&mut rng, &[3, 16], 1.0).data().to_vec();
    let ys = normal_tensor(&mut rng, &[3, 4], 1.0).data().to_vec();
    let batch = Batch::new(xs, ys, 3)?;
    let analytic = model.gate_gradients(&batch)?;
    let lora = model.lora.clone().expect("adapters attached");
    let mut worst: f64 = 0.0;
    for (&site, &grad) in &analytic {
        let id = lora.gate_ids(&[site])?[0];
        let g0 = model.store.value(id).clone();
        let eps = 1e-5;
        model.store.set_value(id, g0.map(|v| v + eps))?;
        let up = model.loss(&batch)?;
        model.store.set_value(id, g0.map(|v| v - eps))?;
        let down = model.loss(&batch)?;
        model.store.set_value(id, g0)?;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(rel_err(grad, numeric));
        println!("{site}: analytic {grad:+.6e} numeric {numeric:+.6e}");
    }
    println!("worst gate relative error {worst:.2e}");
    Ok(())
}
