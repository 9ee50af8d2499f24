//! Pre-training pilot on the procedural corpus with per-epoch held-out accuracy.
//!
//! `cargo run --release --example pilot -- count=2000 epochs=15 lr0=0.02 step=10 warmup=10 trp=10 base=natural weighting=on save=model.ssae`

use std::time::Instant;

use ssae_core::net::{save_checkpoint, CheckpointMeta};
use ssae_core::objectives::EntropyBase;
use ssae_core::pretext::{build_corpus, CorpusConfig, SourceSpec, Split, SynthOptions};
use ssae_core::trainer::{pretext_accuracy, TrainConfig, Trainer};

fn main() {
    let mut count = 2000;
    let mut save = None;
    let mut cfg = TrainConfig { epochs: 15, trp_activation_epoch: 10, checkpoint_every: 0, ..TrainConfig::default() };
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("arguments are key=value");
        match k {
            "count" => count = v.parse().unwrap(),
            "epochs" => cfg.epochs = v.parse().unwrap(),
            "lr0" => cfg.lr0 = v.parse().unwrap(),
            "step" => cfg.lr_step_epochs = v.parse().unwrap(),
            "save" => save = Some(std::path::PathBuf::from(v)),
            "warmup" => cfg.weighting_warmup_epochs = v.parse().unwrap(),
            "trp" => cfg.trp_activation_epoch = v.parse().unwrap(),
            "seed" => cfg.root_seed = v.parse().unwrap(),
            "base" => cfg.entropy_base = if v == "normalized" { EntropyBase::Normalized } else { EntropyBase::Natural },
            "weighting" => cfg.ablation.disable_weighting = v == "off",
            _ => panic!("unknown option {k}"),
        }
    }
    let t0 = Instant::now();
    let source = SourceSpec { count, root_seed: cfg.root_seed, ..SourceSpec::default() };
    let corpus =
        build_corpus(&source, &CorpusConfig::default(), &SynthOptions::new(cfg.root_seed, 0)).unwrap();
    println!("corpus {} patches in {:?}", corpus.patches.len(), t0.elapsed());
    let val: Vec<_> = corpus.split(Split::Val).map(|p| (p.patch_id, &p.image)).collect();
    let mut t = Trainer::new(&corpus, cfg.clone(), None).unwrap();
    while !t.is_done() {
        let s = Instant::now();
        let r = t.run_epoch().unwrap();
        let acc = pretext_accuracy(&t.state.net, &val, &cfg).unwrap();
        println!(
            "e{} deg={:.4} trp={:.4} w={:.3} lr={:.4} val={acc:.4} t={:.1}s",
            r.epoch, r.l_deg, r.l_trp, r.mean_weight, r.lr, s.elapsed().as_secs_f64()
        );
    }
    if let Some(path) = save {
        let meta = CheckpointMeta::new(cfg.encoder.clone(), cfg.epochs);
        save_checkpoint(&path, &t.state.net, &meta).unwrap();
    }
}
