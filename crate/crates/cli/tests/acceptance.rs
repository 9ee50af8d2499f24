//! Acceptance suite. Runs every criterion in order and prints one
//! PASS/FAIL line per criterion; exits non-zero if any fails.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ssae_cli::{commands, RunConfig};
use ssae_core::gradcheck::{run_gradcheck, GradcheckConfig};
use ssae_core::manips::{apply, catalog, ordered_pairs, AttributeGroup, Manipulation, OpFamily};
use ssae_core::net::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta, EncoderConfig,
    Network,
};
use ssae_core::objectives::{
    deg_loss, entropy_weight, total_loss, triplet_loss, InstanceOutput, DEFAULT_ALPHA,
};
use ssae_core::pixel::io::{read_png, write_png};
use ssae_core::pixel::{psnr, stream_id, Image, RngStream};
use ssae_core::pretext::{build_corpus, synth_batch, Corpus, CorpusConfig, SourceSpec, Split, SynthOptions};
use ssae_core::probe::{
    emit_report, make_synthetic_aesthetic_set, parse_curve_csv, parse_report_csv, probe_blocks, CurvePoint,
    ProbeConfig, ProbeReport, ReportRow,
};
use ssae_core::trainer::{lr_at, pretext_accuracy, Ablation, TrainConfig, Trainer};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn random_image(seed: u64, i: u64) -> Image {
    let mut rng = RngStream::derive(seed, stream_id(&[0x4f52_4143, i]));
    Image::from_fn(16, 16, 3, |_, _, _| rng.next_f64()).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// Scalar oracles. Each one restates an operator from its definition.

fn clip(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn oracle_bilinear(img: &Image, oh: usize, ow: usize) -> Image {
    let (h, w, c) = img.dims();
    if oh == h && ow == w {
        return img.clone();
    }
    let mut out = Image::new(oh, ow, c).unwrap();
    for oy in 0..oh {
        let sy = ((oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5).max(0.0).min((h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = if y0 + 1 < h { y0 + 1 } else { y0 };
        let fy = sy - y0 as f64;
        for ox in 0..ow {
            let sx = ((ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5).max(0.0).min((w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = if x0 + 1 < w { x0 + 1 } else { x0 };
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let v = img.get(y0, x0, ch) * (1.0 - fy) * (1.0 - fx)
                    + img.get(y0, x1, ch) * (1.0 - fy) * fx
                    + img.get(y1, x0, ch) * fy * (1.0 - fx)
                    + img.get(y1, x1, ch) * fy * fx;
                out.set(oy, ox, ch, clip(v));
            }
        }
    }
    out
}

fn mirror(mut i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

fn oracle_blur(img: &Image, sigma: f64) -> Image {
    let (h, w, c) = img.dims();
    let r = (3.0 * sigma).ceil() as i64;
    let mut norm = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            norm += (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
        }
    }
    Image::from_fn(h, w, c, |y, x, ch| {
        let mut acc = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                let g = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp() / norm;
                acc += g * img.get(mirror(y as i64 + dy, h), mirror(x as i64 + dx, w), ch);
            }
        }
        acc
    })
    .unwrap()
}

fn oracle_rotate(img: &Image, degrees: f64) -> Image {
    let (h, w, c) = img.dims();
    let t = degrees.to_radians();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    Image::from_fn(h, w, c, |y, x, ch| {
        // Cartesian frame with v pointing up; sample at R(-t) p.
        let (u, v) = (x as f64 - cx, cy - y as f64);
        let su = u * t.cos() + v * t.sin();
        let sv = -u * t.sin() + v * t.cos();
        let (sx, sy) = (su + cx, cy - sv);
        assert!((sx - sx.round()).abs() < 1e-9 && (sy - sy.round()).abs() < 1e-9);
        img.get(sy.round() as usize, sx.round() as usize, ch)
    })
    .unwrap()
}

fn oracle_pixelate(img: &Image, b: usize) -> Image {
    let (h, w, c) = img.dims();
    Image::from_fn(h, w, c, |y, x, ch| {
        let (y0, x0) = (y / b * b, x / b * b);
        let (y1, x1) = ((y0 + b).min(h), (x0 + b).min(w));
        let mut s = 0.0;
        for yy in y0..y1 {
            for xx in x0..x1 {
                s += img.get(yy, xx, ch);
            }
        }
        s / ((y1 - y0) * (x1 - x0)) as f64
    })
    .unwrap()
}

fn oracle_shuffle(img: &Image, fraction: f64, rng: &mut RngStream) -> Image {
    let (h, w, c) = img.dims();
    let grid = 8;
    let (ch_, cw) = (h / grid, w / grid);
    let k = (fraction * 64.0).ceil() as usize;
    let from = rng.sample_indices(64, k);
    let mut to = from.clone();
    rng.shuffle(&mut to);
    let mut out = img.clone();
    for (f, t) in from.iter().zip(&to) {
        for dy in 0..ch_ {
            for dx in 0..cw {
                for ch in 0..c {
                    let v = img.get(f / grid * ch_ + dy, f % grid * cw + dx, ch);
                    out.set(t / grid * ch_ + dy, t % grid * cw + dx, ch, v);
                }
            }
        }
    }
    out
}

const ANNEX_K_LUMA: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16., 24., 40., 57.,
    69., 56., 14., 17., 22., 29., 51., 87., 80., 62., 18., 22., 37., 56., 68., 109., 103., 77., 24., 35., 55.,
    64., 81., 104., 113., 92., 49., 64., 78., 87., 103., 121., 120., 101., 72., 92., 95., 98., 112., 100.,
    103., 99.,
];
const ANNEX_K_CHROMA: [f64; 64] = [
    17., 18., 24., 47., 99., 99., 99., 99., 18., 21., 26., 66., 99., 99., 99., 99., 24., 26., 56., 99., 99., 99.,
    99., 99., 47., 66., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99.,
    99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99.,
];

fn ijg_scaled(base: &[f64; 64], q: u32) -> [f64; 64] {
    let s = if q < 50 { (5000 / q) as f64 } else { (200 - 2 * q) as f64 };
    base.map(|b| ((b * s + 50.0) / 100.0).floor().clamp(1.0, 255.0))
}

/// Nearest integer, halves away from zero; values within 1e-9 of a
/// half-integer count as exact halves.
fn round_half(v: f64) -> f64 {
    let frac = (v - v.trunc()).abs();
    if (frac - 0.5).abs() < 1e-9 {
        v.trunc() + v.signum()
    } else {
        v.round()
    }
}

fn level(v: f64) -> f64 {
    round_half(v).clamp(0.0, 255.0)
}

/// Encode and decode one plane of 8-bit levels with the direct DCT sums.
fn dct_plane(plane: &mut [f64], h: usize, w: usize, q: &[f64; 64]) {
    let cf = |k: usize| if k == 0 { 1.0 / 2f64.sqrt() } else { 1.0 };
    let basis = |k: usize, n: usize| ((2 * n + 1) as f64 * k as f64 * PI / 16.0).cos();
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            let s = |y: usize, x: usize| plane[(by + y) * w + bx + x] - 128.0;
            let mut f = [0.0; 64];
            for v in 0..8 {
                for u in 0..8 {
                    let mut acc = 0.0;
                    for y in 0..8 {
                        for x in 0..8 {
                            acc += s(y, x) * basis(u, x) * basis(v, y);
                        }
                    }
                    let coef = 0.25 * cf(u) * cf(v) * acc;
                    f[v * 8 + u] = round_half(coef / q[v * 8 + u]) * q[v * 8 + u];
                }
            }
            for y in 0..8 {
                for x in 0..8 {
                    let mut acc = 0.0;
                    for v in 0..8 {
                        for u in 0..8 {
                            acc += cf(u) * cf(v) * f[v * 8 + u] * basis(u, x) * basis(v, y);
                        }
                    }
                    plane[(by + y) * w + bx + x] = level(0.25 * acc + 128.0);
                }
            }
        }
    }
}

fn oracle_jpeg(img: &Image, quality: u32) -> Image {
    let (h, w, _) = img.dims();
    assert!(h % 8 == 0 && w % 8 == 0);
    let (mut yp, mut cbp, mut crp) = (vec![0.0; h * w], vec![0.0; h * w], vec![0.0; h * w]);
    for y in 0..h {
        for x in 0..w {
            let (r, g, b) = (255.0 * img.get(y, x, 0), 255.0 * img.get(y, x, 1), 255.0 * img.get(y, x, 2));
            let lum = 0.299 * r + 0.587 * g + 0.114 * b;
            yp[y * w + x] = level(lum);
            cbp[y * w + x] = level(128.0 + (b - lum) / 1.772);
            crp[y * w + x] = level(128.0 + (r - lum) / 1.402);
        }
    }
    dct_plane(&mut yp, h, w, &ijg_scaled(&ANNEX_K_LUMA, quality));
    dct_plane(&mut cbp, h, w, &ijg_scaled(&ANNEX_K_CHROMA, quality));
    dct_plane(&mut crp, h, w, &ijg_scaled(&ANNEX_K_CHROMA, quality));
    Image::from_fn(h, w, 3, |y, x, ch| {
        let i = y * w + x;
        let r = yp[i] + 1.402 * (crp[i] - 128.0);
        let b = yp[i] + 1.772 * (cbp[i] - 128.0);
        let g = (yp[i] - 0.299 * r - 0.114 * b) / 0.587;
        level([r, g, b][ch]) / 255.0
    })
    .unwrap()
}

/// Oracle output of `m` on `img`; `rng` is a clone of the stream given to the operator.
fn oracle(m: &Manipulation, img: &Image, rng: &mut RngStream, partner: &Image) -> Image {
    let p = m.param;
    let (h, w, c) = img.dims();
    match m.family {
        OpFamily::None => img.clone(),
        OpFamily::JpegCompression => oracle_jpeg(img, p as u32),
        OpFamily::GaussianNoise => {
            let mut out = img.clone();
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        let n = rng.normal();
                        out.set(y, x, ch, clip(img.get(y, x, ch) + p.sqrt() * n));
                    }
                }
            }
            out
        }
        OpFamily::Rotation => oracle_rotate(img, p),
        OpFamily::Downsampling => {
            let k = p as usize;
            let small = oracle_bilinear(img, h.div_ceil(k), w.div_ceil(k));
            oracle_bilinear(&small, h, w)
        }
        OpFamily::Quantization => {
            let s = p - 1.0;
            Image::from_fn(h, w, c, |y, x, ch| clip((img.get(y, x, ch) * s).round() / s)).unwrap()
        }
        OpFamily::Pixelation => oracle_pixelate(img, p as usize),
        OpFamily::Exposure => Image::from_fn(h, w, c, |y, x, ch| clip(img.get(y, x, ch) * p)).unwrap(),
        OpFamily::GaussianBlur => oracle_blur(img, p),
        OpFamily::PatchShuffle => oracle_shuffle(img, p, rng),
        OpFamily::Mixup => {
            Image::from_fn(h, w, c, |y, x, ch| (1.0 - p) * img.get(y, x, ch) + p * partner.get(y, x, ch)).unwrap()
        }
    }
}

fn criterion_1() -> Outcome {
    let images: Vec<Image> = (0..50).map(|i| random_image(1, i)).collect();
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    let mut ok = true;
    let mut jpeg: f64 = 0.0;
    for spec in catalog() {
        let m = spec.manipulation;
        let mut max_d: f64 = 0.0;
        for (i, img) in images.iter().enumerate() {
            let rng = RngStream::derive(2, stream_id(&[spec.class_index as u64, i as u64]));
            let partner = &images[(i + 1) % images.len()];
            let got = apply(&m, img, &mut rng.clone(), m.family.needs_partner().then_some(partner)).unwrap();
            let want = oracle(&m, img, &mut rng.clone(), partner);
            max_d = max_d.max(max_abs_diff(got.data(), want.data()));
        }
        let tol = if m.family == OpFamily::JpegCompression { 1.5 / 255.0 } else { 1e-6 };
        ok &= max_d <= tol;
        if m.family == OpFamily::JpegCompression {
            jpeg = jpeg.max(max_d);
        }
        worst.insert(format!("{m}"), max_d);
    }
    let exact = worst.iter().filter(|(k, _)| !k.starts_with("jpeg") && !k.starts_with("JPEG"));
    let overall = exact.map(|(_, v)| *v).fold(0.0, f64::max);
    for (k, v) in &worst {
        println!("    {k:<28} max |d| = {v:.3e}");
    }
    check(ok, format!("22 operators vs scalar oracles, max |d| {overall:.2e} (jpeg {:.2} levels)", jpeg * 255.0))
}

fn smoke_run_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig { root_seed: seed, ..RunConfig::default() };
    cfg.source = SourceSpec { count: 40, height: 24, width: 28, ..SourceSpec::default() };
    cfg.corpus = CorpusConfig { resize_short: 18, crop: 16, val_fraction: 0.1 };
    cfg.train = TrainConfig {
        encoder: EncoderConfig::tiny(),
        batch_size: 8,
        epochs: 2,
        trp_activation_epoch: 1,
        weighting_warmup_epochs: 1,
        checkpoint_every: 1,
        ..TrainConfig::default()
    };
    cfg.eval.n = 200;
    cfg.validate().unwrap();
    cfg
}

fn collect_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_2() -> Outcome {
    let cfg = smoke_run_config(17);
    let mut runs = Vec::new();
    for tag in ["a", "b"] {
        let dir = scratch(&format!("determinism_{tag}"));
        commands::synth(&cfg, &dir.join("corpus")).unwrap();
        commands::pretrain(&cfg, &dir.join("corpus"), &dir.join("run/model.ssae"), false).unwrap();
        runs.push(collect_files(&dir));
    }
    let names: Vec<_> = runs[0].keys().map(|p| p.display().to_string()).collect();
    let has = |s: &str| names.iter().any(|n| n.ends_with(s));
    let complete = has("manifest.jsonl") && has("model.ssae") && has("model.history.csv");
    check(
        complete && runs[0] == runs[1],
        format!("two synth+pretrain runs give {} byte-identical files", runs[0].len()),
    )
}

fn procedural_patches(n: usize, seed: u64) -> Corpus {
    let source = SourceSpec { count: n, root_seed: seed, ..SourceSpec::default() };
    build_corpus(&source, &CorpusConfig::default(), &SynthOptions::new(seed, 0)).unwrap()
}

fn criterion_3() -> Outcome {
    let corpus = procedural_patches(200, 3);
    let imgs: Vec<&Image> = corpus.patches.iter().map(|p| &p.image).collect();
    let capped = |a: &Image, b: &Image| psnr(a, b).unwrap().min(100.0);
    let mut ok = true;
    let mut margins = Vec::new();
    for pair in ordered_pairs() {
        let (mut sm, mut ss) = (0.0, 0.0);
        for (i, img) in imgs.iter().enumerate() {
            let partner = pair.family.needs_partner().then_some(imgs[(i + 1) % imgs.len()]);
            let rng = RngStream::derive(3, stream_id(&[pair.family as u64, i as u64]));
            let mild = apply(&pair.mild.manipulation, img, &mut rng.clone(), partner).unwrap();
            let severe = apply(&pair.severe.manipulation, img, &mut rng.clone(), partner).unwrap();
            sm += capped(img, &mild);
            ss += capped(img, &severe);
        }
        let margin = (sm - ss) / imgs.len() as f64;
        ok &= margin > 0.0;
        margins.push(format!("{} {margin:+.2} dB", pair.family));
    }
    check(ok, format!("mild beats severe in PSNR for all 8 pairs: {}", margins.join(", ")))
}

fn criterion_4() -> Outcome {
    let uniform = deg_loss(&[0.0; 22], 5).unwrap();
    let ok_deg = (uniform - 22f64.ln()).abs() <= 1e-12;
    let a = [1.0, 0.0, 0.0];
    let b = [-1.0, 0.0, 0.0];
    let trp = [
        triplet_loss(&a, &a, &a).unwrap(),
        triplet_loss(&a, &a, &b).unwrap(),
        triplet_loss(&a, &b, &a).unwrap(),
    ];
    let ok_trp = trp == [1.0, 0.0, 5.0];
    let mut one_hot = [0.0; 22];
    one_hot[0] = 1.0;
    let mut peaked = [0.0; 22];
    peaked[0] = 0.9;
    peaked[1] = 0.1;
    let w = [
        entropy_weight(&one_hot, DEFAULT_ALPHA).unwrap(),
        entropy_weight(&[1.0 / 22.0; 22], DEFAULT_ALPHA).unwrap(),
        entropy_weight(&peaked, DEFAULT_ALPHA).unwrap(),
    ];
    let ok_w = w[0] == 1.0 && w[1] == 0.0 && (w[2] - 0.4582).abs() <= 1e-4;
    check(
        ok_deg && ok_trp && ok_w,
        format!(
            "uniform deg loss - ln 22 = {:.1e}, triplet cases {trp:?}, weights [{}, {}, {:.4}]",
            uniform - 22f64.ln(),
            w[0],
            w[1],
            w[2]
        ),
    )
}

fn criterion_5() -> Outcome {
    let cfg = GradcheckConfig::default();
    let r = run_gradcheck(&cfg).unwrap();
    let heads = ["cls.weight", "embed.weight"].iter().all(|h| r.checks.iter().any(|c| c.name == *h));
    check(
        r.passed && r.checks.len() >= 200 && r.max_rel_error < 1e-5 && heads,
        format!(
            "{} parameters checked, max relative error {:.2e}, {} draws resampled at kinks",
            r.checks.len(),
            r.max_rel_error,
            r.resampled
        ),
    )
}

fn smoke_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        encoder: EncoderConfig::tiny(),
        batch_size: 8,
        epochs: 2,
        trp_activation_epoch: 2,
        weighting_warmup_epochs: 1,
        checkpoint_every: 0,
        root_seed: seed,
        ..TrainConfig::default()
    }
}

fn smoke_corpus(seed: u64) -> Corpus {
    let source = SourceSpec { count: 48, height: 24, width: 28, root_seed: seed, ..SourceSpec::default() };
    let corpus = CorpusConfig { resize_short: 18, crop: 16, val_fraction: 0.1 };
    build_corpus(&source, &corpus, &SynthOptions::new(seed, 0)).unwrap()
}

fn param_bits(net: &Network) -> Vec<u64> {
    net.params().iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
}

/// Entropy weights of every training instance synthesized for `epoch`.
fn epoch_weights(net: &Network, corpus: &Corpus, cfg: &TrainConfig, epoch: u64) -> Vec<f64> {
    let patches: Vec<(u64, &Image)> = corpus.split(Split::Train).map(|p| (p.patch_id, &p.image)).collect();
    let batch = synth_batch(&patches, &cfg.synth_options(epoch)).unwrap();
    let logits: Vec<Vec<f64>> =
        batch.instances.iter().map(|i| net.forward(&i.image).unwrap().logits.data().to_vec()).collect();
    let outs: Vec<InstanceOutput> = batch
        .instances
        .iter()
        .zip(&logits)
        .map(|(i, l)| InstanceOutput { logits: l, class_index: i.class_index })
        .collect();
    total_loss(&outs, &[], &cfg.loss_settings(epoch)).unwrap().0.per_instance_weights
}

fn criterion_6() -> Outcome {
    let defaults = TrainConfig::default();
    let lrs: Vec<f64> = (0..30).map(|e| lr_at(e, &defaults)).collect();
    let expect = |e: usize| [0.1, 0.02, 0.004][e / 10];
    let ok_lr = lrs.iter().enumerate().all(|(e, &lr)| (lr - expect(e)).abs() <= 1e-15);
    let ok_gate = (0..30).all(|e| !defaults.trp_active(e)) && defaults.trp_active(30);

    let corpus = smoke_corpus(6);
    let cfg = smoke_train_config(6);
    let zero = TrainConfig { lambda: 0.0, ..cfg.clone() };
    let mut t_def = Trainer::new(&corpus, cfg.clone(), None).unwrap();
    let mut t_zero = Trainer::new(&corpus, zero, None).unwrap();
    let mut weights_ok = true;
    let (mut w_min, mut w_max): (f64, f64) = (1.0, 0.0);
    while !t_def.is_done() {
        let e = t_def.state.epoch;
        let w = epoch_weights(&t_def.state.net, &corpus, &cfg, e);
        if e < cfg.weighting_warmup_epochs {
            weights_ok &= w.iter().all(|&x| x == 1.0);
        } else {
            weights_ok &= w.iter().all(|&x| (0.0..=1.0).contains(&x));
            w_min = w.iter().cloned().fold(w_min, f64::min);
            w_max = w.iter().cloned().fold(w_max, f64::max);
        }
        let row = t_def.run_epoch().unwrap();
        t_zero.run_epoch().unwrap();
        weights_ok &= if e < cfg.weighting_warmup_epochs {
            row.mean_weight == 1.0
        } else {
            (0.0..=1.0).contains(&row.mean_weight)
        };
    }
    let same = param_bits(&t_def.state.net) == param_bits(&t_zero.state.net);
    check(
        ok_lr && ok_gate && same && weights_ok,
        format!(
            "lr 0.1/0.02/0.004 by decade, trp gated until epoch 30, lambda=0 run bit-identical: {same}, \
             post-warm-up weights in [{w_min:.3}, {w_max:.3}]"
        ),
    )
}

/// Training recipe for the learnability run. Without normalization layers the
/// default encoder diverges for some seeds at lr0 = 0.1, so the step is 0.02,
/// held for 15 epochs; weighting and the triplet loss join when it decays.
fn learnability_config() -> TrainConfig {
    TrainConfig {
        lr0: 0.02,
        lr_step_epochs: 15,
        epochs: 25,
        trp_activation_epoch: 15,
        weighting_warmup_epochs: 15,
        checkpoint_every: 0,
        root_seed: 7,
        ..TrainConfig::default()
    }
}

fn criterion_7() -> (Outcome, Option<Network>) {
    let start = Instant::now();
    let cfg = learnability_config();
    let source = SourceSpec { count: 2000, root_seed: cfg.root_seed, ..SourceSpec::default() };
    let corpus = build_corpus(&source, &CorpusConfig::default(), &SynthOptions::new(cfg.root_seed, 0)).unwrap();
    let mut t = Trainer::new(&corpus, cfg.clone(), None).unwrap();
    t.on_epoch = Some(Box::new(|r| {
        println!(
            "    epoch {:2}  l_deg {:.4}  l_trp {:.4}  weight {:.3}  lr {}",
            r.epoch, r.l_deg, r.l_trp, r.mean_weight, r.lr
        )
    }));
    t.run().unwrap();
    let net = t.state.net.clone();
    drop(t);
    let held_out: Vec<(u64, &Image)> = corpus.split(Split::Val).map(|p| (p.patch_id, &p.image)).collect();
    let acc = pretext_accuracy(&net, &held_out, &cfg).unwrap();
    let mins = start.elapsed().as_secs_f64() / 60.0;
    let out = check(
        acc >= 0.40 && mins <= 60.0,
        format!(
            "22-way held-out accuracy {:.1}% on {} patches after {} epochs ({mins:.1} min)",
            100.0 * acc,
            held_out.len(),
            cfg.epochs
        ),
    );
    (out, Some(net))
}

fn criterion_8(pretrained: Option<&Network>) -> Outcome {
    let Some(net) = pretrained else {
        return Err("no pretrained encoder from the learnability run".into());
    };
    let start = Instant::now();
    let seed = 7;
    let data = make_synthetic_aesthetic_set(2000, seed, net.config().input_size).unwrap();
    let cfg = ProbeConfig { root_seed: seed, ..ProbeConfig::default() };
    let random = Network::init(net.config().clone(), seed).unwrap();
    let blocks = [3, 4];
    let pre = probe_blocks(net, &data, &cfg, &blocks).unwrap();
    let rnd = probe_blocks(&random, &data, &cfg, &blocks).unwrap();
    let mut ok = false;
    let mut parts = Vec::new();
    for (p, r) in pre.iter().zip(&rnd) {
        let (a, b) = (p.test_accuracy, r.test_accuracy);
        ok |= a >= b + 0.05 && a >= 0.80;
        parts.push(format!("block {}: pretrained {:.1}% vs random-init {:.1}%", p.block_index, 100.0 * a, 100.0 * b));
    }
    let mins = start.elapsed().as_secs_f64() / 60.0;
    check(ok && mins <= 15.0, format!("{} ({mins:.1} min)", parts.join("; ")))
}

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let root = scratch("ablation");
    let base = smoke_run_config(9);
    let base = RunConfig {
        source: SourceSpec { count: 96, ..base.source.clone() },
        train: TrainConfig { epochs: 4, trp_activation_epoch: 2, batch_size: 16, checkpoint_every: 0, ..base.train.clone() },
        ..base
    };
    let mut variants: Vec<(String, Ablation)> = vec![("full".into(), Ablation::default())];
    for g in AttributeGroup::ALL {
        variants.push((format!("w/o {g}"), Ablation { exclude_attribute_groups: vec![g], ..Ablation::default() }));
    }
    variants.push(("w/o weighting".into(), Ablation { disable_weighting: true, ..Ablation::default() }));
    variants.push(("w/o triplet loss".into(), Ablation { disable_trp: true, ..Ablation::default() }));
    variants.push(("w/o degradation loss".into(), Ablation { disable_deg: true, ..Ablation::default() }));

    let blocks = vec![2, 3];
    let mut report = ProbeReport { blocks: blocks.clone(), ..ProbeReport::default() };
    let mut pretext = Vec::new();
    for (i, (name, ab)) in variants.iter().enumerate() {
        let cfg = RunConfig {
            exclude_attribute_groups: ab.exclude_attribute_groups.clone(),
            disable_weighting: ab.disable_weighting,
            disable_trp: ab.disable_trp,
            disable_deg: ab.disable_deg,
            ..base.clone()
        };
        if let Err(e) = cfg.validate() {
            return Err(format!("{name}: {e}"));
        }
        let dir = root.join(format!("v{i}"));
        let run = || -> ssae_core::Result<_> {
            commands::synth(&cfg, &dir.join("corpus"))?;
            let ckpt = dir.join("model.ssae");
            commands::pretrain(&cfg, &dir.join("corpus"), &ckpt, false)?;
            let out = commands::probe(&cfg, &ckpt, &dir.join("probe"), Some(blocks.clone()))?;
            let corpus = ssae_core::pretext::read_corpus(&dir.join("corpus"))?;
            let net = load_checkpoint(&ckpt)?.0;
            let held: Vec<(u64, &Image)> = corpus.split(Split::Val).map(|p| (p.patch_id, &p.image)).collect();
            Ok((out, pretext_accuracy(&net, &held, &cfg.train_config())?))
        };
        let (out, acc) = run().map_err(|e| format!("{name}: {e}"))?;
        report.rows.push(ReportRow {
            method: name.clone(),
            accuracies: out.pretrained.iter().map(|r| r.test_accuracy).collect(),
        });
        pretext.push(acc);
    }
    emit_report(&report, &root).map_err(|e| e.to_string())?;
    let full = report.rows[0].average();
    let mut table = String::from("| variant | pretext acc | probe avg | delta vs full |\n|---|---|---|---|\n");
    for (row, acc) in report.rows.iter().zip(&pretext) {
        table.push_str(&format!(
            "| {} | {:.1} | {:.1} | {:+.1} |\n",
            row.method,
            100.0 * acc,
            100.0 * row.average(),
            100.0 * (row.average() - full)
        ));
    }
    std::fs::write(root.join("ablation.md"), &table).map_err(|e| e.to_string())?;
    for line in table.lines() {
        println!("    {line}");
    }
    let mins = start.elapsed().as_secs_f64() / 60.0;
    check(
        report.rows.len() == 10 && root.join("report.csv").exists() && mins <= 60.0,
        format!("10 variants ran to completion; table at {} ({mins:.1} min)", root.join("ablation.md").display()),
    )
}

fn criterion_10(net: Option<&Network>) -> Outcome {
    let dir = scratch("roundtrip");
    let net = match net {
        Some(n) => n.clone(),
        None => Network::init(EncoderConfig::default(), 10).unwrap(),
    };
    let meta = CheckpointMeta::new(net.config().clone(), 15);
    let path = dir.join("net.ssae");
    save_checkpoint(&path, &net, &meta).unwrap();
    let (back, back_meta) = load_checkpoint(&path).unwrap();
    let bytes = encode_checkpoint(&net, &meta).unwrap();
    let ok_ckpt = param_bits(&back) == param_bits(&net)
        && back.config() == net.config()
        && back_meta == meta
        && decode_checkpoint(&bytes).is_ok()
        && std::fs::read(&path).unwrap() == bytes;

    let mut rng = RngStream::derive(10, 1);
    let report = ProbeReport {
        blocks: vec![1, 2, 3, 4, 5],
        rows: (0..3)
            .map(|i| ReportRow { method: format!("method {i}"), accuracies: (0..5).map(|_| rng.next_f64()).collect() })
            .collect(),
        curve: (0..4)
            .map(|i| CurvePoint { method: "m".into(), fraction: [0.05, 0.1, 0.5, 1.0][i], accuracy: rng.next_f64() })
            .collect(),
    };
    emit_report(&report, &dir).unwrap();
    let (blocks, rows) = parse_report_csv(&std::fs::read_to_string(dir.join("report.csv")).unwrap()).unwrap();
    let curve = parse_curve_csv(&std::fs::read_to_string(dir.join("curve.csv")).unwrap()).unwrap();
    let ok_csv = blocks == report.blocks && rows == report.rows && curve == report.curve;

    let corpus = smoke_corpus(10);
    let mut ok_png = true;
    for p in &corpus.patches {
        let f = dir.join(format!("{}.png", p.patch_id));
        write_png(&p.image, &f).unwrap();
        let back = read_png(&f).unwrap();
        ok_png &= back == p.image && back == p.image.quantize_8bit();
    }
    check(
        ok_ckpt && ok_csv && ok_png,
        format!(
            "checkpoint bit-exact: {ok_ckpt}, report CSV re-parse exact: {ok_csv}, {} corpus PNGs lossless: {ok_png}",
            corpus.patches.len()
        ),
    )
}

fn run(n: usize, what: &str, f: impl FnOnce() -> Outcome, failures: &mut Vec<usize>) {
    let start = Instant::now();
    let res = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
        .unwrap_or_else(|e| Err(format!("panicked: {}", panic_message(&e))));
    let secs = start.elapsed().as_secs_f64();
    match res {
        Ok(d) => println!("[PASS] criterion {n} ({what}): {d} [{secs:.1}s]"),
        Err(d) => {
            println!("[FAIL] criterion {n} ({what}): {d} [{secs:.1}s]");
            failures.push(n);
        }
    }
}

fn panic_message(e: &Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_default()
}

fn main() {
    // Filter arguments from `cargo test <filter>` select criteria by number.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |n: usize| args.is_empty() || args.iter().any(|a| a == &n.to_string());
    if std::env::args().any(|a| a == "--list") {
        for n in 1..=10 {
            println!("criterion_{n}: test");
        }
        return;
    }
    let mut failures = Vec::new();
    if wanted(1) {
        run(1, "operator oracles", criterion_1, &mut failures);
    }
    if wanted(2) {
        run(2, "determinism", criterion_2, &mut failures);
    }
    if wanted(3) {
        run(3, "monotonic degradation", criterion_3, &mut failures);
    }
    if wanted(4) {
        run(4, "closed-form losses", criterion_4, &mut failures);
    }
    if wanted(5) {
        run(5, "gradient fidelity", criterion_5, &mut failures);
    }
    if wanted(6) {
        run(6, "schedule conformance", criterion_6, &mut failures);
    }
    let mut net = None;
    if wanted(7) || wanted(8) {
        run(
            7,
            "pretext learnability",
            || {
                let (o, n) = criterion_7();
                net = n;
                o
            },
            &mut failures,
        );
    }
    if wanted(8) {
        run(8, "transfer gap", || criterion_8(net.as_ref()), &mut failures);
    }
    if wanted(9) {
        run(9, "ablation harness", criterion_9, &mut failures);
    }
    if wanted(10) {
        run(10, "round trips", || criterion_10(net.as_ref()), &mut failures);
    }
    if failures.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {failures:?}");
        std::process::exit(1);
    }
}
