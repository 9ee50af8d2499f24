use super::*;
use crate::net::ParamSet;
use crate::objectives::{total_loss, InstanceOutput, TripletOutput};
use crate::pretext::{build_corpus, CorpusConfig, SourceKind, SourceSpec};

fn small_corpus(seed: u64, count: usize) -> Corpus {
    let source = SourceSpec {
        kind: SourceKind::Procedural,
        count,
        root_seed: seed,
        folder_path: None,
        height: 20,
        width: 24,
    };
    let cfg = CorpusConfig {
        resize_short: 18,
        crop: 16,
        val_fraction: 0.25,
    };
    build_corpus(&source, &cfg, &SynthOptions::new(seed, 0)).unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs: 3,
        trp_activation_epoch: 1,
        weighting_warmup_epochs: 2,
        checkpoint_every: 0,
        root_seed: 5,
        encoder: EncoderConfig::tiny(),
        ..TrainConfig::default()
    }
}

fn bits(p: &ParamSet) -> Vec<u64> {
    p.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn lr_schedule() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(0, &cfg), 0.1);
    assert!((lr_at(10, &cfg) - 0.02).abs() < 1e-15);
    assert!((lr_at(25, &cfg) - 0.004).abs() < 1e-15);
    assert_eq!(lr_at(9, &cfg), 0.1);
}

fn one_param(v: f64) -> (ParamSet, Gradients) {
    let mut p = ParamSet::new();
    p.insert("w", crate::net::Tensor::from_vec(&[1], vec![v]).unwrap()).unwrap();
    let z = p.zeros_like();
    (p, z)
}

#[test]
fn sgd_without_momentum_is_plain_descent() {
    let (mut p, mut v) = one_param(1.0);
    let g = Gradients { values: vec![vec![0.5]] };
    sgd_step(&mut p, &mut v, &g, 0.1, 0.0, 0.0).unwrap();
    assert_eq!(p.tensor(0).data()[0], 1.0 - 0.1 * 0.5);
}

#[test]
fn sgd_velocity_coasts() {
    let (mut p, mut v) = one_param(1.0);
    v.values[0][0] = 2.0;
    let g = Gradients { values: vec![vec![0.0]] };
    sgd_step(&mut p, &mut v, &g, 0.1, 0.9, 0.0).unwrap();
    assert!((p.tensor(0).data()[0] - (1.0 - 0.1 * 0.81 * 2.0)).abs() < 1e-15);
}

#[test]
fn sgd_two_steps_match_hand_computation() {
    let (mut p, mut v) = one_param(0.0);
    let g = Gradients { values: vec![vec![1.0]] };
    for _ in 0..2 {
        sgd_step(&mut p, &mut v, &g, 0.1, 0.9, 0.0).unwrap();
    }
    // step 1: v = 1, θ = -0.1·(1 + 0.9) = -0.19
    // step 2: v = 1.9, θ = -0.19 - 0.1·(1 + 1.71) = -0.461
    assert!((p.tensor(0).data()[0] + 0.461).abs() < 1e-12);
    assert!((v.values[0][0] - 1.9).abs() < 1e-12);
    let bad = Gradients { values: vec![vec![1.0, 2.0]] };
    assert!(sgd_step(&mut p, &mut v, &bad, 0.1, 0.9, 0.0).is_err());
}

#[test]
fn batch_gradients_agree_with_total_loss() {
    let corpus = small_corpus(1, 6);
    let net = Network::init(EncoderConfig::tiny(), 2).unwrap();
    let patches: Vec<(u64, &Image)> = corpus.patches.iter().map(|p| (p.patch_id, &p.image)).collect();
    let batch = synth_batch(&patches, &SynthOptions::new(1, 0)).unwrap();
    assert!(!batch.triplets.is_empty());
    let settings = LossSettings::new(0.3, true, true);
    let r = batch_gradients(&net, &batch, &settings).unwrap();

    let it: Vec<_> = batch.instances.iter().map(|i| net.forward(&i.image).unwrap()).collect();
    let tt: Vec<_> = batch
        .triplets
        .iter()
        .map(|t| {
            (
                net.forward(&t.anchor).unwrap(),
                net.forward(&t.mild_img).unwrap(),
                net.forward(&t.severe_img).unwrap(),
            )
        })
        .collect();
    let inst: Vec<_> = it
        .iter()
        .zip(&batch.instances)
        .map(|(t, i)| InstanceOutput { logits: t.logits.data(), class_index: i.class_index })
        .collect();
    let trp: Vec<_> = tt
        .iter()
        .map(|(a, m, s)| TripletOutput {
            anchor: a.embedding.data(),
            mild: m.embedding.data(),
            severe: s.embedding.data(),
        })
        .collect();
    let (rep, _) = total_loss(&inst, &trp, &settings).unwrap();
    assert!((rep.total - r.total).abs() < 1e-12);
    assert!((rep.l_deg - r.l_deg).abs() < 1e-12);
    assert!((rep.l_trp - r.l_trp).abs() < 1e-12);
    assert!((rep.mean_weight() - r.mean_weight).abs() < 1e-12);
}

#[test]
fn gradients_do_not_depend_on_thread_count() {
    let corpus = small_corpus(1, 8);
    let net = Network::init(EncoderConfig::tiny(), 2).unwrap();
    let patches: Vec<(u64, &Image)> = corpus.patches.iter().map(|p| (p.patch_id, &p.image)).collect();
    let batch = synth_batch(&patches, &SynthOptions::new(1, 0)).unwrap();
    let settings = LossSettings::new(0.02, true, false);
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| batch_gradients(&net, &batch, &settings).unwrap())
    };
    let a = run(1);
    let b = run(3);
    let flat = |g: &Gradients| g.values.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(flat(&a.grads), flat(&b.grads));
    assert_eq!(a.total.to_bits(), b.total.to_bits());
}

#[test]
fn zero_epochs_returns_initial_state() {
    let corpus = small_corpus(2, 6);
    let cfg = TrainConfig { epochs: 0, trp_activation_epoch: 0, ..small_config() };
    let st = pretrain(&corpus, &cfg, None).unwrap();
    assert!(st.history.is_empty());
    assert_eq!(st.net, Network::init(cfg.encoder.clone(), cfg.root_seed).unwrap());
}

#[test]
fn reruns_are_bit_identical() {
    let corpus = small_corpus(3, 8);
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let a = OutputPaths::new(dir.path().join("a/model.ssae"));
    let b = OutputPaths::new(dir.path().join("b/model.ssae"));
    pretrain(&corpus, &cfg, Some(a.clone())).unwrap();
    pretrain(&corpus, &cfg, Some(b.clone())).unwrap();
    assert_eq!(std::fs::read(&a.checkpoint).unwrap(), std::fs::read(&b.checkpoint).unwrap());
    assert_eq!(std::fs::read(a.history()).unwrap(), std::fs::read(b.history()).unwrap());
    let hist = std::fs::read_to_string(a.history()).unwrap();
    assert_eq!(hist.lines().count(), 4);
    assert_eq!(hist.lines().next().unwrap(), HISTORY_HEADER);
}

#[test]
fn triplet_path_inert_before_activation() {
    let corpus = small_corpus(4, 8);
    let cfg = TrainConfig { trp_activation_epoch: 2, ..small_config() };
    let zero = TrainConfig { lambda: 0.0, ..cfg.clone() };
    let mut t1 = Trainer::new(&corpus, cfg, None).unwrap();
    let mut t2 = Trainer::new(&corpus, zero, None).unwrap();
    for _ in 0..2 {
        let r1 = t1.run_epoch().unwrap();
        let r2 = t2.run_epoch().unwrap();
        assert_eq!(r1.l_trp, 0.0);
        assert_eq!(r2.l_trp, 0.0);
        assert_eq!(bits(t1.state.net.params()), bits(t2.state.net.params()));
    }
    let r = t1.run_epoch().unwrap();
    assert!(r.l_trp > 0.0);
}

#[test]
fn weights_are_one_during_warmup() {
    let corpus = small_corpus(5, 8);
    let mut t = Trainer::new(&corpus, small_config(), None).unwrap();
    let r0 = t.run_epoch().unwrap();
    let r1 = t.run_epoch().unwrap();
    assert_eq!(r0.mean_weight, 1.0);
    assert_eq!(r1.mean_weight, 1.0);
    let r2 = t.run_epoch().unwrap();
    assert!((0.0..=1.0).contains(&r2.mean_weight));
}

#[test]
fn config_validation() {
    let bad = [
        TrainConfig { lr0: 0.0, ..TrainConfig::default() },
        TrainConfig { trp_activation_epoch: 60, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig {
            ablation: Ablation { disable_deg: true, disable_trp: true, ..Ablation::default() },
            ..TrainConfig::default()
        },
        TrainConfig { momentum: 1.0, ..TrainConfig::default() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
    }
    TrainConfig::default().validate().unwrap();
}

#[test]
fn history_rows_have_nine_significant_digits() {
    let row = HistoryRow {
        epoch: 3,
        l_deg: 1.0 / 3.0,
        l_trp: 0.0,
        total: 2.5,
        mean_weight: 1.0,
        lr: 0.004,
    };
    let csv = history_csv(&[row]);
    let line = csv.lines().nth(1).unwrap();
    assert_eq!(line, "3,3.33333333e-1,0.00000000e0,2.50000000e0,1.00000000e0,4.00000000e-3");
    for field in line.split(',').skip(1) {
        let v: f64 = field.parse().unwrap();
        assert!(v.is_finite());
    }
}

#[test]
fn corpus_size_mismatch_rejected() {
    let corpus = small_corpus(6, 4);
    let cfg = TrainConfig { encoder: EncoderConfig::default(), ..small_config() };
    assert!(Trainer::new(&corpus, cfg, None).is_err());
}
