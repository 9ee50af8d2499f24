//! Pre-training loop: Nesterov SGD with step decay, delayed triplet loss and
//! entropy-weight warm-up.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::manips::AttributeGroup;
use crate::net::{save_checkpoint, CheckpointMeta, EncoderConfig, Gradients, Network};
use crate::objectives::{
    deg_loss_grad, instance_weight, triplet_loss_grad, EntropyBase, LossSettings, DEFAULT_ALPHA,
};
use crate::pixel::{stream_id, Image, RngStream};
use crate::pretext::{synth_batch, Corpus, Split, SynthBatch, SynthOptions};

const TAG_ORDER: u64 = 0x4f52_4445; // "ORDE"
const TAG_EVAL: u64 = 0x4556_414c; // "EVAL"

/// Work units per parallel chunk. Fixed so that gradient sums are formed in
/// the same order whatever the thread count.
const UNITS_PER_CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub lr_step_epochs: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: u64,
    pub trp_activation_epoch: u64,
    pub lambda: f64,
    pub weighting_warmup_epochs: u64,
    pub alpha: f64,
    pub entropy_base: EntropyBase,
    pub ops_per_patch: usize,
    pub none_rate: f64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub encoder: EncoderConfig,
    /// Set from the run configuration's top level.
    #[serde(skip)]
    pub root_seed: u64,
    #[serde(skip)]
    pub ablation: Ablation,
}

/// Switches for ablation runs.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Ablation {
    pub exclude_attribute_groups: Vec<AttributeGroup>,
    pub disable_weighting: bool,
    pub disable_trp: bool,
    pub disable_deg: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            lr0: 0.1,
            lr_decay: 0.2,
            lr_step_epochs: 10,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 50,
            trp_activation_epoch: 30,
            lambda: 0.02,
            weighting_warmup_epochs: 5,
            alpha: DEFAULT_ALPHA,
            entropy_base: EntropyBase::Natural,
            ops_per_patch: 3,
            none_rate: 1.0 / 22.0,
            checkpoint_every: 10,
            encoder: EncoderConfig::default(),
            root_seed: 0,
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr0", self.lr0),
            ("lr_decay", self.lr_decay),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("alpha", self.alpha),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.momentum >= 1.0 {
            return Err(Error::Config("momentum must be below 1".into()));
        }
        if self.batch_size == 0 || self.lr_step_epochs == 0 {
            return Err(Error::Config("batch_size and lr_step_epochs must be positive".into()));
        }
        if self.trp_activation_epoch > self.epochs {
            return Err(Error::Config(format!(
                "trp_activation_epoch {} exceeds epochs {}",
                self.trp_activation_epoch, self.epochs
            )));
        }
        if self.ablation.disable_deg && self.ablation.disable_trp {
            return Err(Error::Config("both losses disabled; nothing to train".into()));
        }
        self.encoder.validate()
    }

    pub fn trp_active(&self, epoch: u64) -> bool {
        // Without the degradation loss the triplet loss is the whole objective
        // and runs from the start.
        !self.ablation.disable_trp
            && (self.ablation.disable_deg || epoch >= self.trp_activation_epoch)
    }

    pub fn weighting_active(&self, epoch: u64) -> bool {
        !self.ablation.disable_weighting
            && !self.ablation.disable_deg
            && epoch >= self.weighting_warmup_epochs
    }

    pub fn loss_settings(&self, epoch: u64) -> LossSettings {
        LossSettings {
            lambda: self.lambda,
            alpha: self.alpha,
            entropy_base: self.entropy_base,
            deg_active: !self.ablation.disable_deg,
            trp_active: self.trp_active(epoch),
            weighting_active: self.weighting_active(epoch),
        }
    }

    pub fn synth_options(&self, epoch: u64) -> SynthOptions {
        SynthOptions {
            root_seed: self.root_seed,
            epoch,
            ops_per_patch: self.ops_per_patch,
            none_rate: self.none_rate,
            excluded_groups: self.ablation.exclude_attribute_groups.clone(),
            emit_triplets: self.trp_active(epoch),
        }
    }
}

/// lr0 · decay^⌊epoch / step⌋.
pub fn lr_at(epoch: u64, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi((epoch / cfg.lr_step_epochs) as i32)
}

/// One Nesterov step: g' = g + wd·θ; v ← μv + g'; θ ← θ − lr·(g' + μv).
pub fn sgd_step(
    params: &mut crate::net::ParamSet,
    velocity: &mut Gradients,
    grads: &Gradients,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let n = params.len();
    if velocity.values.len() != n || grads.values.len() != n {
        return Err(invalid!("gradient buffers do not match the parameter set"));
    }
    for i in 0..n {
        let theta = params.tensor_mut(i).data_mut();
        let (v, g) = (&mut velocity.values[i], &grads.values[i]);
        if theta.len() != v.len() || theta.len() != g.len() {
            return Err(invalid!("shape mismatch for parameter {i}"));
        }
        for ((t, v), &g) in theta.iter_mut().zip(v.iter_mut()).zip(g) {
            let gp = g + weight_decay * *t;
            *v = momentum * *v + gp;
            *t -= lr * (gp + momentum * *v);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: u64,
    pub l_deg: f64,
    pub l_trp: f64,
    pub total: f64,
    pub mean_weight: f64,
    pub lr: f64,
}

pub const HISTORY_HEADER: &str = "epoch,l_deg,l_trp,total,mean_weight,lr";

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            sig9(r.l_deg),
            sig9(r.l_trp),
            sig9(r.total),
            sig9(r.mean_weight),
            sig9(r.lr)
        ));
    }
    s
}

/// Nine significant digits, scientific notation.
fn sig9(v: f64) -> String {
    format!("{v:.8e}")
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub net: Network,
    pub velocity: Gradients,
    /// Completed epochs.
    pub epoch: u64,
    /// Stream for the per-epoch patch order.
    pub rng: RngStream,
    pub history: Vec<HistoryRow>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = Network::init(cfg.encoder.clone(), cfg.root_seed)?;
        let velocity = net.params().zeros_like();
        Ok(TrainState {
            net,
            velocity,
            epoch: 0,
            rng: RngStream::derive(cfg.root_seed, stream_id(&[TAG_ORDER])),
            history: Vec::new(),
        })
    }

    pub fn checkpoint_meta(&self, cfg: &TrainConfig) -> Result<CheckpointMeta> {
        let mut meta = CheckpointMeta::new(self.net.config().clone(), self.epoch);
        meta.rng = Some(self.rng.clone());
        meta.extra = serde_json::json!({
            "root_seed": cfg.root_seed,
            "ablation": cfg.ablation,
            "train": cfg,
        });
        Ok(meta)
    }
}

/// Summed statistics of a set of work units.
#[derive(Debug, Clone, Default)]
struct Partial {
    grads: Option<Gradients>,
    deg_weighted: f64,
    deg_raw: f64,
    weight_sum: f64,
    trp: f64,
    correct: usize,
}

impl Partial {
    fn merge(&mut self, other: Partial) {
        match (&mut self.grads, other.grads) {
            (Some(a), Some(b)) => a.add_assign(&b),
            (slot @ None, Some(b)) => *slot = Some(b),
            _ => {}
        }
        self.deg_weighted += other.deg_weighted;
        self.deg_raw += other.deg_raw;
        self.weight_sum += other.weight_sum;
        self.trp += other.trp;
        self.correct += other.correct;
    }
}

enum Unit<'a> {
    Instance(&'a Image, usize),
    /// Anchor with its (mild, severe) pairs.
    Triplets(&'a Image, Vec<(&'a Image, &'a Image)>),
}

/// Loss and gradient of one synthesized batch.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub grads: Gradients,
    pub l_deg: f64,
    pub l_deg_raw: f64,
    pub l_trp: f64,
    pub total: f64,
    pub mean_weight: f64,
    pub instances: usize,
    pub triplets: usize,
    pub correct: usize,
}

/// Forward and backward over a batch, parallel over fixed chunks of units.
pub fn batch_gradients(net: &Network, batch: &SynthBatch, settings: &LossSettings) -> Result<BatchResult> {
    settings.validate()?;
    let n = batch.instances.len();
    if n == 0 {
        return Err(invalid!("batch has no instances"));
    }
    let trp_on = settings.trp_active && !batch.triplets.is_empty();
    let m = if trp_on { batch.triplets.len() } else { 0 };
    let deg_scale = if settings.deg_active { 1.0 } else { 0.0 };
    let tscale = settings.trp_scale();

    let mut units: Vec<Unit> = batch
        .instances
        .iter()
        .map(|i| Unit::Instance(&i.image, i.class_index))
        .collect();
    if trp_on {
        let mut start = 0;
        while start < batch.triplets.len() {
            let id = batch.triplets[start].patch_id;
            let end = start
                + batch.triplets[start..]
                    .iter()
                    .take_while(|t| t.patch_id == id)
                    .count();
            let group = &batch.triplets[start..end];
            units.push(Unit::Triplets(
                &group[0].anchor,
                group.iter().map(|t| (&t.mild_img, &t.severe_img)).collect(),
            ));
            start = end;
        }
    }

    let run_unit = |u: &Unit, acc: &mut Partial| -> Result<()> {
        let g = acc.grads.get_or_insert_with(|| net.params().zeros_like());
        match u {
            Unit::Instance(img, class) => {
                let t = net.forward_train(img)?;
                let logits = t.logits.data();
                let w = instance_weight(logits, settings)?;
                let (l, mut dl) = deg_loss_grad(logits, *class)?;
                if argmax(logits) == *class {
                    acc.correct += 1;
                }
                acc.deg_raw += l;
                acc.deg_weighted += w * l;
                acc.weight_sum += w;
                let s = deg_scale * w / n as f64;
                if s != 0.0 {
                    dl.iter_mut().for_each(|v| *v *= s);
                    net.backward(&t, Some(&dl), None, g)?;
                }
            }
            Unit::Triplets(anchor, pairs) => {
                let ta = net.forward_train(anchor)?;
                let mut da = vec![0.0; ta.embedding.len()];
                for (mild, severe) in pairs {
                    let tm = net.forward_train(mild)?;
                    let ts = net.forward_train(severe)?;
                    let (l, [ga, gm, gs]) = triplet_loss_grad(
                        ta.embedding.data(),
                        tm.embedding.data(),
                        ts.embedding.data(),
                    )?;
                    acc.trp += l;
                    if l > 0.0 {
                        let s = tscale / m as f64;
                        let scaled = |v: Vec<f64>| v.into_iter().map(|x| x * s).collect::<Vec<_>>();
                        net.backward(&tm, None, Some(&scaled(gm)), g)?;
                        net.backward(&ts, None, Some(&scaled(gs)), g)?;
                        for (d, x) in da.iter_mut().zip(ga) {
                            *d += x * s;
                        }
                    }
                }
                if da.iter().any(|&v| v != 0.0) {
                    net.backward(&ta, None, Some(&da), g)?;
                }
            }
        }
        Ok(())
    };

    let partials: Vec<Result<Partial>> = units
        .par_chunks(UNITS_PER_CHUNK)
        .map(|chunk| {
            let mut acc = Partial::default();
            for u in chunk {
                run_unit(u, &mut acc)?;
            }
            Ok(acc)
        })
        .collect();
    let mut total = Partial::default();
    for p in partials {
        total.merge(p?);
    }
    let l_deg = deg_scale * total.deg_weighted / n as f64;
    let l_trp = if m > 0 { total.trp / m as f64 } else { 0.0 };
    Ok(BatchResult {
        grads: total.grads.unwrap_or_else(|| net.params().zeros_like()),
        l_deg,
        l_deg_raw: total.deg_raw / n as f64,
        l_trp,
        total: l_deg + tscale * l_trp,
        mean_weight: total.weight_sum / n as f64,
        instances: n,
        triplets: m,
        correct: total.correct,
    })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Where to write checkpoints and the history file.
#[derive(Debug, Clone)]
pub struct OutputPaths {
    pub checkpoint: PathBuf,
}

impl OutputPaths {
    pub fn new(checkpoint: impl Into<PathBuf>) -> Self {
        OutputPaths {
            checkpoint: checkpoint.into(),
        }
    }

    pub fn history(&self) -> PathBuf {
        sibling(&self.checkpoint, "history.csv")
    }

    pub fn periodic(&self, epoch: u64) -> PathBuf {
        sibling(&self.checkpoint, &format!("epoch{epoch:03}.ssae"))
    }

    pub fn dump(&self) -> PathBuf {
        sibling(&self.checkpoint, "nonfinite.json")
    }
}

fn sibling(p: &Path, suffix: &str) -> PathBuf {
    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    p.with_file_name(format!("{stem}.{suffix}"))
}

/// Drives epochs over a corpus.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    train: Vec<(u64, &'a Image)>,
    pub state: TrainState,
    out: Option<OutputPaths>,
    /// Called after each epoch with the new history row.
    pub on_epoch: Option<Box<dyn FnMut(&HistoryRow) + 'a>>,
}

impl<'a> Trainer<'a> {
    pub fn new(corpus: &'a Corpus, cfg: TrainConfig, out: Option<OutputPaths>) -> Result<Self> {
        cfg.validate()?;
        let train: Vec<(u64, &Image)> = corpus
            .split(Split::Train)
            .map(|p| (p.patch_id, &p.image))
            .collect();
        if train.is_empty() {
            return Err(invalid!("corpus has no training patches"));
        }
        let s = cfg.encoder.input_size;
        if train[0].1.dims() != (s, s, cfg.encoder.in_channels) {
            return Err(invalid!(
                "corpus patches are {:?}, encoder expects {s}x{s}x{}",
                train[0].1.dims(),
                cfg.encoder.in_channels
            ));
        }
        let state = TrainState::new(&cfg)?;
        Ok(Trainer {
            cfg,
            train,
            state,
            out,
            on_epoch: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn is_done(&self) -> bool {
        self.state.epoch >= self.cfg.epochs
    }

    /// Run one epoch and append its history row.
    pub fn run_epoch(&mut self) -> Result<HistoryRow> {
        let epoch = self.state.epoch;
        let lr = lr_at(epoch, &self.cfg);
        let settings = self.cfg.loss_settings(epoch);
        let opts = self.cfg.synth_options(epoch);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        self.state.rng.shuffle(&mut order);

        let (mut deg, mut trp, mut wsum, mut n_inst, mut n_trp) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for (bi, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            let patches: Vec<(u64, &Image)> = idx.iter().map(|&i| self.train[i]).collect();
            let batch = synth_batch(&patches, &opts)?;
            let r = batch_gradients(&self.state.net, &batch, &settings)?;
            if !r.total.is_finite() || !r.grads.all_finite() {
                return Err(self.abort(epoch, bi, &patches, &r));
            }
            sgd_step(
                self.state.net.params_mut(),
                &mut self.state.velocity,
                &r.grads,
                lr,
                self.cfg.momentum,
                self.cfg.weight_decay,
            )?;
            deg += r.l_deg * r.instances as f64;
            wsum += r.mean_weight * r.instances as f64;
            trp += r.l_trp * r.triplets as f64;
            n_inst += r.instances;
            n_trp += r.triplets;
        }
        let l_deg = deg / n_inst as f64;
        let l_trp = if n_trp > 0 { trp / n_trp as f64 } else { 0.0 };
        let row = HistoryRow {
            epoch,
            l_deg,
            l_trp,
            total: l_deg + settings.trp_scale() * l_trp,
            mean_weight: wsum / n_inst as f64,
            lr,
        };
        self.state.history.push(row);
        self.state.epoch += 1;
        if let Some(out) = &self.out {
            let e = self.state.epoch;
            if self.cfg.checkpoint_every > 0 && e % self.cfg.checkpoint_every == 0 && e < self.cfg.epochs {
                save_checkpoint(&out.periodic(e), &self.state.net, &self.state.checkpoint_meta(&self.cfg)?)?;
            }
            write_file(&out.history(), history_csv(&self.state.history).as_bytes())?;
        }
        if let Some(cb) = self.on_epoch.as_mut() {
            cb(&row);
        }
        Ok(row)
    }

    fn abort(&self, epoch: u64, batch: usize, patches: &[(u64, &Image)], r: &BatchResult) -> Error {
        let msg = format!(
            "non-finite loss at epoch {epoch}, batch {batch}: l_deg={}, l_trp={}, total={}",
            r.l_deg, r.l_trp, r.total
        );
        if let Some(out) = &self.out {
            let dump = serde_json::json!({
                "epoch": epoch,
                "batch": batch,
                "patch_ids": patches.iter().map(|p| p.0).collect::<Vec<_>>(),
                "l_deg": r.l_deg.to_string(),
                "l_trp": r.l_trp.to_string(),
                "total": r.total.to_string(),
                "max_abs_grad": r.grads.max_abs().to_string(),
                "history": self.state.history,
            });
            let _ = write_file(&out.dump(), dump.to_string().as_bytes());
            let _ = save_checkpoint(&out.periodic(epoch), &self.state.net, &CheckpointMeta::new(self.state.net.config().clone(), epoch));
        }
        Error::NonFinite(msg)
    }

    /// Run the remaining epochs and write the final checkpoint.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.run_epoch()?;
        }
        if let Some(out) = &self.out {
            save_checkpoint(&out.checkpoint, &self.state.net, &self.state.checkpoint_meta(&self.cfg)?)?;
            write_file(&out.history(), history_csv(&self.state.history).as_bytes())?;
        }
        Ok(())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Train for `cfg.epochs` epochs; returns the final state.
pub fn pretrain(corpus: &Corpus, cfg: &TrainConfig, out: Option<OutputPaths>) -> Result<TrainState> {
    let mut t = Trainer::new(corpus, cfg.clone(), out)?;
    t.run()?;
    Ok(t.state)
}

/// 22-way accuracy on freshly synthesized instances of the given patches.
pub fn pretext_accuracy(net: &Network, patches: &[(u64, &Image)], cfg: &TrainConfig) -> Result<f64> {
    if patches.is_empty() {
        return Err(invalid!("no patches to evaluate"));
    }
    let mut opts = cfg.synth_options(0);
    opts.epoch = stream_id(&[TAG_EVAL]);
    opts.emit_triplets = false;
    let (mut correct, mut total) = (0, 0);
    for chunk in patches.chunks(cfg.batch_size.max(1)) {
        let batch = synth_batch(chunk, &opts)?;
        let r = evaluate_batch(net, &batch)?;
        correct += r.0;
        total += r.1;
    }
    Ok(correct as f64 / total as f64)
}

fn evaluate_batch(net: &Network, batch: &SynthBatch) -> Result<(usize, usize)> {
    let hits: Vec<Result<bool>> = batch
        .instances
        .par_iter()
        .map(|i| Ok(argmax(net.forward(&i.image)?.logits.data()) == i.class_index))
        .collect();
    let mut c = 0;
    for h in hits {
        c += h? as usize;
    }
    Ok((c, batch.instances.len()))
}

#[cfg(test)]
mod tests;
