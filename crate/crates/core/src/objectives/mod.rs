//! Pretext losses: degradation identification, ordered triplets, and the
//! entropy-based instance weights that combine them.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Default entropy-weight slope.
pub const DEFAULT_ALPHA: f64 = 5.0 / 3.0;
/// Triplet margin on squared distances of unit vectors.
pub const MARGIN: f64 = 1.0;
const UNIT_TOL: f64 = 1e-3;

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// −log softmax(logits)[class_index].
pub fn deg_loss(logits: &[f64], class_index: usize) -> Result<f64> {
    Ok(deg_loss_grad(logits, class_index)?.0)
}

/// Loss and its gradient with respect to the logits (softmax − one-hot).
pub fn deg_loss_grad(logits: &[f64], class_index: usize) -> Result<(f64, Vec<f64>)> {
    if class_index >= logits.len() {
        return Err(invalid!(
            "class index {class_index} out of range for {} logits",
            logits.len()
        ));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(crate::Error::NonFinite("logits contain non-finite values".into()));
    }
    let ls = log_softmax(logits);
    let loss = (-ls[class_index]).max(0.0);
    let mut g: Vec<f64> = ls.iter().map(|v| v.exp()).collect();
    g[class_index] -= 1.0;
    Ok((loss, g))
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !((n - 1.0).abs() <= UNIT_TOL) {
        return Err(invalid!("{what} embedding has norm {n}, expected 1"));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// max(0, ‖a − m‖² − ‖a − s‖² + 1) for unit vectors.
pub fn triplet_loss(anchor: &[f64], mild: &[f64], severe: &[f64]) -> Result<f64> {
    Ok(triplet_loss_grad(anchor, mild, severe)?.0)
}

/// Triplet gradients with respect to anchor, mild and severe embeddings.
pub type TripletGrads = [Vec<f64>; 3];

pub fn triplet_loss_grad(anchor: &[f64], mild: &[f64], severe: &[f64]) -> Result<(f64, TripletGrads)> {
    if anchor.len() != mild.len() || anchor.len() != severe.len() {
        return Err(invalid!("triplet embeddings differ in length"));
    }
    check_unit(anchor, "anchor")?;
    check_unit(mild, "mild")?;
    check_unit(severe, "severe")?;
    let raw = sq_dist(anchor, mild) - sq_dist(anchor, severe) + MARGIN;
    let d = anchor.len();
    if raw <= 0.0 {
        return Ok((0.0, [vec![0.0; d], vec![0.0; d], vec![0.0; d]]));
    }
    let ga = severe.iter().zip(mild).map(|(s, m)| 2.0 * (s - m)).collect();
    let gm = anchor.iter().zip(mild).map(|(a, m)| -2.0 * (a - m)).collect();
    let gs = anchor.iter().zip(severe).map(|(a, s)| 2.0 * (a - s)).collect();
    Ok((raw, [ga, gm, gs]))
}

/// Logarithm used for the entropy in the instance weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntropyBase {
    /// Entropy in nats.
    #[default]
    Natural,
    /// Entropy divided by ln(K), so it lies in [0, 1].
    Normalized,
}

/// max(1 − α·H(p), 0) with natural-log entropy.
pub fn entropy_weight(probs: &[f64], alpha: f64) -> Result<f64> {
    entropy_weight_base(probs, alpha, EntropyBase::Natural)
}

pub fn entropy_weight_base(probs: &[f64], alpha: f64, base: EntropyBase) -> Result<f64> {
    if probs.iter().any(|&p| !(p >= 0.0)) {
        return Err(invalid!("probabilities must be non-negative"));
    }
    let s: f64 = probs.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(invalid!("probabilities sum to {s}, expected 1"));
    }
    let mut h: f64 = probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    if base == EntropyBase::Normalized && probs.len() > 1 {
        h /= (probs.len() as f64).ln();
    }
    Ok((1.0 - alpha * h).clamp(0.0, 1.0))
}

/// Network outputs for one labelled instance.
#[derive(Debug, Clone, Copy)]
pub struct InstanceOutput<'a> {
    pub logits: &'a [f64],
    pub class_index: usize,
}

/// Normalized embeddings for one ordered triplet.
#[derive(Debug, Clone, Copy)]
pub struct TripletOutput<'a> {
    pub anchor: &'a [f64],
    pub mild: &'a [f64],
    pub severe: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSettings {
    pub lambda: f64,
    pub alpha: f64,
    pub entropy_base: EntropyBase,
    pub deg_active: bool,
    pub trp_active: bool,
    pub weighting_active: bool,
}

impl LossSettings {
    pub fn new(lambda: f64, trp_active: bool, weighting_active: bool) -> Self {
        LossSettings {
            lambda,
            alpha: DEFAULT_ALPHA,
            entropy_base: EntropyBase::Natural,
            deg_active: true,
            trp_active,
            weighting_active,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(invalid!("lambda must be a finite non-negative number"));
        }
        if !(self.alpha >= 0.0) {
            return Err(invalid!("alpha must be non-negative"));
        }
        Ok(())
    }

    /// Multiplier on the mean triplet loss. When the degradation loss is
    /// switched off the triplet term stands alone at unit weight.
    pub fn trp_scale(&self) -> f64 {
        match (self.trp_active, self.deg_active) {
            (false, _) => 0.0,
            (true, true) => self.lambda,
            (true, false) => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Weighted mean degradation loss (the term entering `total`).
    pub l_deg: f64,
    /// Unweighted mean degradation loss.
    pub l_deg_raw: f64,
    pub l_trp: f64,
    pub total: f64,
    pub per_instance_weights: Vec<f64>,
    pub lambda_used: f64,
    pub trp_active: bool,
}

impl LossReport {
    pub fn mean_weight(&self) -> f64 {
        if self.per_instance_weights.is_empty() {
            return 0.0;
        }
        self.per_instance_weights.iter().sum::<f64>() / self.per_instance_weights.len() as f64
    }
}

/// Gradients of `total` with respect to each instance's logits and each
/// triplet's three embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub dlogits: Vec<Vec<f64>>,
    pub dtriplets: Vec<TripletGrads>,
}

/// Instance weight under the given settings (1 before warm-up ends).
pub fn instance_weight(logits: &[f64], settings: &LossSettings) -> Result<f64> {
    if !settings.weighting_active {
        return Ok(1.0);
    }
    entropy_weight_base(&softmax(logits), settings.alpha, settings.entropy_base)
}

/// Combined objective: weighted mean degradation loss plus scaled mean triplet loss.
/// Weights are computed from the current logits and treated as constants.
pub fn total_loss(
    instances: &[InstanceOutput<'_>],
    triplets: &[TripletOutput<'_>],
    settings: &LossSettings,
) -> Result<(LossReport, LossGrads)> {
    let weights = instances
        .iter()
        .map(|i| instance_weight(i.logits, settings))
        .collect::<Result<Vec<_>>>()?;
    total_loss_with_weights(instances, triplets, &weights, settings)
}

/// As [`total_loss`] with the instance weights supplied by the caller.
pub fn total_loss_with_weights(
    instances: &[InstanceOutput<'_>],
    triplets: &[TripletOutput<'_>],
    weights: &[f64],
    settings: &LossSettings,
) -> Result<(LossReport, LossGrads)> {
    settings.validate()?;
    if instances.is_empty() {
        return Err(invalid!("total loss needs at least one instance"));
    }
    if weights.len() != instances.len() {
        return Err(invalid!("{} weights for {} instances", weights.len(), instances.len()));
    }
    if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
        return Err(invalid!("instance weights must lie in [0,1]"));
    }
    let n = instances.len() as f64;
    let deg_scale = if settings.deg_active { 1.0 } else { 0.0 };
    let mut l_deg = 0.0;
    let mut l_raw = 0.0;
    let mut dlogits = Vec::with_capacity(instances.len());
    for (inst, &w) in instances.iter().zip(weights) {
        let (l, mut g) = deg_loss_grad(inst.logits, inst.class_index)?;
        l_raw += l;
        l_deg += w * l;
        let s = deg_scale * w / n;
        g.iter_mut().for_each(|v| *v *= s);
        dlogits.push(g);
    }
    l_deg /= n;
    l_raw /= n;

    let tscale = settings.trp_scale();
    let mut l_trp = 0.0;
    let mut dtriplets = Vec::new();
    if settings.trp_active && !triplets.is_empty() {
        let m = triplets.len() as f64;
        for t in triplets {
            let (l, mut g) = triplet_loss_grad(t.anchor, t.mild, t.severe)?;
            l_trp += l;
            for v in g.iter_mut().flatten() {
                *v *= tscale / m;
            }
            dtriplets.push(g);
        }
        l_trp /= m;
    }
    let total = deg_scale * l_deg + tscale * l_trp;
    Ok((
        LossReport {
            l_deg: deg_scale * l_deg,
            l_deg_raw: l_raw,
            l_trp,
            total,
            per_instance_weights: weights.to_vec(),
            lambda_used: tscale,
            trp_active: settings.trp_active,
        },
        LossGrads { dlogits, dtriplets },
    ))
}
