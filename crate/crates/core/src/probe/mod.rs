//! Frozen-encoder probes: per-block linear or MLP heads on a binary
//! clean-vs-degraded task, low-data sweeps, and the block table report.

mod dataset;
mod report;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::net::{Network, ParamSet, Tensor};
use crate::objectives::deg_loss_grad;
use crate::pixel::{stream_id, RngStream};
use crate::trainer::{lr_at, sgd_step, TrainConfig};

pub use dataset::{
    load_labeled_folder, make_synthetic_aesthetic_set, stratified_splits, synthetic_source,
    EvalDataset, EvalItem, Splits,
};
pub use report::{
    emit_report, parse_curve_csv, parse_report_csv, render_markdown, CurvePoint, ProbeReport,
    ReportRow,
};

const TAG_PROBE: u64 = 0x5052_4f42; // "PROB"
const TAG_SUBSAMPLE: u64 = 0x5355_4253; // "SUBS"

pub const DEFAULT_FRACTIONS: [f64; 5] = [0.05, 0.10, 0.25, 0.50, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub block_index: usize,
    pub head: HeadKind,
    pub hidden: usize,
    pub pool_out: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub lr_step_epochs: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub label_fraction: f64,
    #[serde(skip)]
    pub root_seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            block_index: 3,
            head: HeadKind::Linear,
            hidden: 128,
            pool_out: 4,
            lr0: 0.01,
            lr_decay: 0.2,
            lr_step_epochs: 10,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 30,
            batch_size: 64,
            label_fraction: 1.0,
            root_seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pool_out == 0 || self.batch_size == 0 || self.lr_step_epochs == 0 {
            return Err(Error::Config("pool_out, batch_size and lr_step_epochs must be positive".into()));
        }
        if self.head == HeadKind::Mlp && self.hidden == 0 {
            return Err(Error::Config("mlp head needs hidden > 0".into()));
        }
        if !(self.lr0 > 0.0) || !(self.lr_decay > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("probe learning-rate settings out of range".into()));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(invalid!("label_fraction must be in (0, 1], got {}", self.label_fraction));
        }
        Ok(())
    }

    fn schedule(&self) -> TrainConfig {
        TrainConfig {
            lr0: self.lr0,
            lr_decay: self.lr_decay,
            lr_step_epochs: self.lr_step_epochs,
            ..TrainConfig::default()
        }
    }
}

/// Trainable scalars of a probe head on `feature_dim` inputs.
pub fn head_param_count(cfg: &ProbeConfig, feature_dim: usize) -> usize {
    match cfg.head {
        HeadKind::Linear => (feature_dim + 1) * 2,
        HeadKind::Mlp => (feature_dim + 1) * cfg.hidden + (cfg.hidden + 1) * 2,
    }
}

/// Average-pool a [C, H, W] map to [C, p, p] with cells [⌊iH/p⌋, ⌈(i+1)H/p⌉).
pub fn adaptive_avg_pool(t: &Tensor, p: usize) -> Vec<f64> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let d = t.data();
    let mut out = Vec::with_capacity(c * p * p);
    for ch in 0..c {
        for i in 0..p {
            let (y0, y1) = (i * h / p, ((i + 1) * h).div_ceil(p));
            for j in 0..p {
                let (x0, x1) = (j * w / p, ((j + 1) * w).div_ceil(p));
                let mut s = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        s += d[(ch * h + y) * w + x];
                    }
                }
                out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    out
}

/// Pooled features of every item at every block.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    /// `blocks[b][item]` is the flattened feature vector of block b+1.
    pub blocks: Vec<Vec<Vec<f64>>>,
    pub pool_out: usize,
}

impl FeatureBank {
    pub fn compute(net: &Network, data: &EvalDataset, pool_out: usize) -> Result<Self> {
        let per_item: Vec<Result<Vec<Vec<f64>>>> = data
            .items
            .par_iter()
            .map(|it| {
                Ok(net
                    .block_outputs(&it.image)?
                    .iter()
                    .map(|t| adaptive_avg_pool(t, pool_out))
                    .collect())
            })
            .collect();
        let nb = net.config().blocks.len();
        let mut blocks = vec![Vec::with_capacity(data.items.len()); nb];
        for feats in per_item {
            for (b, f) in feats?.into_iter().enumerate() {
                blocks[b].push(f);
            }
        }
        Ok(FeatureBank { blocks, pool_out })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub block_index: usize,
    pub head: HeadKind,
    pub label_fraction: f64,
    pub train_size: usize,
    pub trainable_params: usize,
    pub best_epoch: u64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

/// Per-class stratified subsample of `train` keeping round(fraction·n_c) of each class.
pub fn subsample_train(data: &EvalDataset, fraction: f64, root_seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid!("label_fraction must be in (0, 1], got {fraction}"));
    }
    let mut out = Vec::new();
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = data
            .splits
            .train
            .iter()
            .copied()
            .filter(|&i| data.items[i].label == class)
            .collect();
        let k = (fraction * idx.len() as f64).round() as usize;
        if k < 2 {
            return Err(invalid!(
                "label_fraction {fraction} leaves {k} training examples of class {class}; need at least 2"
            ));
        }
        if k < idx.len() {
            let mut rng = RngStream::derive(
                root_seed,
                stream_id(&[TAG_SUBSAMPLE, class as u64, fraction.to_bits()]),
            );
            let pick = rng.sample_indices(idx.len(), k);
            idx = pick.into_iter().map(|j| idx[j]).collect();
            idx.sort_unstable();
        }
        out.extend(idx);
    }
    Ok(out)
}

struct Head {
    kind: HeadKind,
    params: ParamSet,
    dim: usize,
    hidden: usize,
}

impl Head {
    fn init(cfg: &ProbeConfig, dim: usize, rng: &mut RngStream) -> Result<Head> {
        let mut params = ParamSet::new();
        let mut layer = |name: &str, out: usize, inp: usize, params: &mut ParamSet| -> Result<()> {
            let bound = (6.0 / inp as f64).sqrt();
            let w = (0..out * inp).map(|_| rng.uniform(-bound, bound)).collect();
            params.insert(format!("{name}.weight"), Tensor::from_vec(&[out, inp], w)?)?;
            params.insert(format!("{name}.bias"), Tensor::zeros(&[out]))
        };
        match cfg.head {
            HeadKind::Linear => layer("head", 2, dim, &mut params)?,
            HeadKind::Mlp => {
                layer("hidden", cfg.hidden, dim, &mut params)?;
                layer("head", 2, cfg.hidden, &mut params)?;
            }
        }
        Ok(Head { kind: cfg.head, params, dim, hidden: cfg.hidden })
    }

    fn logits(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        match self.kind {
            HeadKind::Linear => (affine(&self.params, 0, x, 2), Vec::new()),
            HeadKind::Mlp => {
                let h: Vec<f64> = affine(&self.params, 0, x, self.hidden)
                    .into_iter()
                    .map(|v| v.max(0.0))
                    .collect();
                (affine(&self.params, 2, &h, 2), h)
            }
        }
    }

    fn accumulate(&self, x: &[f64], label: u8, scale: f64, g: &mut crate::net::Gradients) -> Result<()> {
        let (logits, h) = self.logits(x);
        let (_, mut dl) = deg_loss_grad(&logits, label as usize)?;
        dl.iter_mut().for_each(|v| *v *= scale);
        match self.kind {
            HeadKind::Linear => {
                outer_add(&mut g.values[0], &dl, x);
                add(&mut g.values[1], &dl);
            }
            HeadKind::Mlp => {
                outer_add(&mut g.values[2], &dl, &h);
                add(&mut g.values[3], &dl);
                let w2 = self.params.tensor(2).data();
                let mut dh = vec![0.0; self.hidden];
                for (o, &d) in dl.iter().enumerate() {
                    for (j, v) in dh.iter_mut().enumerate() {
                        *v += d * w2[o * self.hidden + j];
                    }
                }
                for (v, &a) in dh.iter_mut().zip(&h) {
                    if a <= 0.0 {
                        *v = 0.0;
                    }
                }
                outer_add(&mut g.values[0], &dh, x);
                add(&mut g.values[1], &dh);
            }
        }
        debug_assert_eq!(x.len(), self.dim);
        Ok(())
    }

    fn accuracy(&self, xs: &[Vec<f64>], labels: &[u8]) -> f64 {
        let hits = xs
            .iter()
            .zip(labels)
            .filter(|(x, &l)| {
                let (lg, _) = self.logits(x);
                (lg[1] > lg[0]) as u8 == l
            })
            .count();
        hits as f64 / xs.len() as f64
    }
}

fn affine(p: &ParamSet, at: usize, x: &[f64], out: usize) -> Vec<f64> {
    let w = p.tensor(at).data();
    let b = p.tensor(at + 1).data();
    (0..out)
        .map(|o| b[o] + w[o * x.len()..(o + 1) * x.len()].iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
        .collect()
}

fn outer_add(g: &mut [f64], dy: &[f64], x: &[f64]) {
    for (o, &d) in dy.iter().enumerate() {
        if d != 0.0 {
            for (v, &xv) in g[o * x.len()..(o + 1) * x.len()].iter_mut().zip(x) {
                *v += d * xv;
            }
        }
    }
}

fn add(g: &mut [f64], d: &[f64]) {
    for (a, b) in g.iter_mut().zip(d) {
        *a += b;
    }
}

/// Train a head on precomputed features. Features are standardized with
/// statistics of the (subsampled) training split.
pub fn probe_train_features(bank: &FeatureBank, data: &EvalDataset, cfg: &ProbeConfig) -> Result<ProbeResult> {
    cfg.validate()?;
    if cfg.block_index == 0 || cfg.block_index > bank.blocks.len() {
        return Err(invalid!("block index {} outside 1..={}", cfg.block_index, bank.blocks.len()));
    }
    if cfg.pool_out != bank.pool_out {
        return Err(invalid!("feature bank pooled to {}, config asks {}", bank.pool_out, cfg.pool_out));
    }
    let feats = &bank.blocks[cfg.block_index - 1];
    let train = subsample_train(data, cfg.label_fraction, cfg.root_seed)?;
    let dim = feats[0].len();

    let mut mean = vec![0.0; dim];
    for &i in &train {
        add(&mut mean, &feats[i]);
    }
    mean.iter_mut().for_each(|v| *v /= train.len() as f64);
    let mut sd = vec![0.0; dim];
    for &i in &train {
        for ((s, &x), &m) in sd.iter_mut().zip(&feats[i]).zip(&mean) {
            *s += (x - m) * (x - m);
        }
    }
    sd.iter_mut()
        .for_each(|v| *v = (*v / train.len() as f64).sqrt().max(1e-8));
    let norm = |idx: &[usize]| -> Vec<Vec<f64>> {
        idx.iter()
            .map(|&i| feats[i].iter().zip(&mean).zip(&sd).map(|((x, m), s)| (x - m) / s).collect())
            .collect()
    };
    let (xtr, xva, xte) = (norm(&train), norm(&data.splits.val), norm(&data.splits.test));
    let (ytr, yva, yte) = (data.labels(&train), data.labels(&data.splits.val), data.labels(&data.splits.test));

    let mut rng = RngStream::derive(
        cfg.root_seed,
        stream_id(&[TAG_PROBE, cfg.block_index as u64, cfg.label_fraction.to_bits()]),
    );
    let mut head = Head::init(cfg, dim, &mut rng)?;
    let mut velocity = head.params.zeros_like();
    let sched = cfg.schedule();
    let mut best: Option<(f64, f64, u64)> = None;
    let mut order: Vec<usize> = (0..xtr.len()).collect();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let lr = lr_at(epoch, &sched);
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = head.params.zeros_like();
            let s = 1.0 / chunk.len() as f64;
            for &i in chunk {
                head.accumulate(&xtr[i], ytr[i], s, &mut g)?;
            }
            sgd_step(&mut head.params, &mut velocity, &g, lr, cfg.momentum, cfg.weight_decay)?;
        }
        if !velocity.all_finite() {
            return Err(Error::NonFinite(format!("probe diverged at epoch {epoch}")));
        }
        let va = head.accuracy(&xva, &yva);
        if best.is_none_or(|(b, _, _)| va > b) {
            best = Some((va, head.accuracy(&xte, &yte), epoch));
        }
    }
    let (val_accuracy, test_accuracy, best_epoch) = best.unwrap_or_else(|| {
        let va = head.accuracy(&xva, &yva);
        (va, head.accuracy(&xte, &yte), 0)
    });
    Ok(ProbeResult {
        block_index: cfg.block_index,
        head: cfg.head,
        label_fraction: cfg.label_fraction,
        train_size: train.len(),
        trainable_params: head.params.num_scalars(),
        best_epoch,
        val_accuracy,
        test_accuracy,
    })
}

fn param_bits(p: &ParamSet) -> Vec<u64> {
    p.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
}

/// Probe one block of a frozen encoder. Fails if the trunk changed.
pub fn probe_train(net: &Network, data: &EvalDataset, cfg: &ProbeConfig) -> Result<ProbeResult> {
    cfg.validate()?;
    let before = param_bits(net.params());
    let bank = FeatureBank::compute(net, data, cfg.pool_out)?;
    let r = probe_train_features(&bank, data, cfg)?;
    if param_bits(net.params()) != before {
        return Err(Error::State("encoder parameters changed during probing".into()));
    }
    Ok(r)
}

/// Probe each requested block from one shared feature pass.
pub fn probe_blocks(net: &Network, data: &EvalDataset, cfg: &ProbeConfig, blocks: &[usize]) -> Result<Vec<ProbeResult>> {
    let before = param_bits(net.params());
    let bank = FeatureBank::compute(net, data, cfg.pool_out)?;
    let out = blocks
        .iter()
        .map(|&b| probe_train_features(&bank, data, &ProbeConfig { block_index: b, ..cfg.clone() }))
        .collect::<Result<Vec<_>>>()?;
    if param_bits(net.params()) != before {
        return Err(Error::State("encoder parameters changed during probing".into()));
    }
    Ok(out)
}

/// Probe accuracy as a function of the labelled fraction.
pub fn low_data_sweep(net: &Network, data: &EvalDataset, cfg: &ProbeConfig, fractions: &[f64]) -> Result<Vec<ProbeResult>> {
    if fractions.is_empty() {
        return Err(invalid!("no fractions given"));
    }
    let bank = FeatureBank::compute(net, data, cfg.pool_out)?;
    fractions
        .iter()
        .map(|&f| probe_train_features(&bank, data, &ProbeConfig { label_fraction: f, ..cfg.clone() }))
        .collect()
}
