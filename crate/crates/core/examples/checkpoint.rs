//! Pretrain a backbone briefly, save it, and load it into a fresh model for
//! fine-tuning.

use trace_core::backbone::BackboneConfig;
use trace_core::experiment::{pretrained_backbone, PretrainConfig};
use trace_core::heads::{HeadConfig, HeadVariant};
use trace_core::model::Model;
use trace_core::params::{manifest_path, ParamGroup};

fn main() -> trace_core::Result<()> {
    let bb = BackboneConfig::desk();
    let mut cfg = PretrainConfig::default();
    cfg.train.max_epochs = 1;
    let store = pretrained_backbone(&bb, 16, &cfg)?.expect("pretraining enabled");

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("backbone.ckpt");
    store.save_checkpoint(&path, &[ParamGroup::Embedding, ParamGroup::Backbone])?;
    println!("saved {} bytes, manifest at {}", std::fs::metadata(&path)?.len(), manifest_path(&path).display());

    let head = HeadConfig::new(HeadVariant::ProjDown, bb.n_patches(), bb.d_model, 16, 8);
    let mut model = Model::new(bb, head, Some(2), 0)?;
    let n = model.store.load_checkpoint(&path)?;
    let same = store
        .iter()
        .filter(|(_, e)| matches!(e.group, ParamGroup::Embedding | ParamGroup::Backbone))
        .all(|(id, e)| model.store.find(&e.name).is_some_and(|m| model.store.value(m).bit_eq(store.value(id))));
    println!("loaded {n} tensors, bit-identical to the saved backbone = {same}");
    println!("{} scalars trainable after loading", model.trainable_scalars());
    Ok(())
}
