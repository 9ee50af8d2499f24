//! Central-difference verification of the encoder's reverse pass through the
//! combined pretext objective (both heads active).

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::manips::{apply, ManipulationSpec, OpFamily};
use crate::net::{EncoderConfig, ForwardTrace, Network};
use crate::objectives::{
    total_loss_with_weights, InstanceOutput, LossSettings, TripletOutput,
};
use crate::pixel::{stream_id, Image, RngStream};
use crate::pretext::generate_procedural;

const TAG_GRADCHECK: u64 = 0x4752_4144; // "GRAD"

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub encoder: EncoderConfig,
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Gradients smaller than this are compared on an absolute scale.
    pub magnitude_floor: f64,
    pub lambda: f64,
    #[serde(skip)]
    pub root_seed: u64,
    pub max_resamples: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            encoder: EncoderConfig::tiny(),
            samples: 200,
            step: 1e-5,
            tolerance: 1e-5,
            magnitude_floor: 1e-8,
            lambda: 0.5,
            root_seed: 0,
            max_resamples: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub checks: Vec<ParamCheck>,
    /// Draws rejected because the step crossed a ReLU, pooling or hinge switch.
    pub resampled: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// The fixed problem: two labelled instances plus one ordered triplet.
struct Problem {
    images: Vec<Image>,
    classes: [usize; 2],
    weights: [f64; 2],
    settings: LossSettings,
}

/// Discrete state of the piecewise-linear parts of the computation.
#[derive(PartialEq)]
struct Switches {
    relu: Vec<Vec<bool>>,
    pool: Vec<Vec<u32>>,
    hinge: bool,
}

impl Problem {
    fn build(cfg: &GradcheckConfig) -> Result<Problem> {
        let s = cfg.encoder.input_size;
        let mut rng = RngStream::derive(cfg.root_seed, stream_id(&[TAG_GRADCHECK]));
        let clean = generate_procedural(&mut rng, s.max(16), s.max(16))?;
        let clean = if s < 16 { crate::pixel::bilinear_resize(&clean, s, s)? } else { clean };
        let mild = ManipulationSpec::lookup(OpFamily::GaussianNoise, 0.2).expect("catalog entry");
        let severe = ManipulationSpec::lookup(OpFamily::Exposure, 3.0).expect("catalog entry");
        let blur = ManipulationSpec::lookup(OpFamily::GaussianBlur, 0.8).expect("catalog entry");
        let m_img = apply(&mild.manipulation, &clean, &mut rng, None)?;
        let s_img = apply(&severe.manipulation, &clean, &mut rng, None)?;
        let b_img = apply(&blur.manipulation, &clean, &mut rng, None)?;
        Ok(Problem {
            // instances: blurred, severe; triplet: clean, mild, severe (last three)
            images: vec![b_img, clean, m_img, s_img],
            classes: [blur.class_index, severe.class_index],
            weights: [1.0, 0.6],
            settings: LossSettings::new(cfg.lambda, true, true),
        })
    }

    fn loss(&self, traces: &[ForwardTrace], grads: bool) -> Result<(f64, Option<crate::objectives::LossGrads>)> {
        let inst = [
            InstanceOutput { logits: traces[0].logits.data(), class_index: self.classes[0] },
            InstanceOutput { logits: traces[3].logits.data(), class_index: self.classes[1] },
        ];
        let trp = [TripletOutput {
            anchor: traces[1].embedding.data(),
            mild: traces[2].embedding.data(),
            severe: traces[3].embedding.data(),
        }];
        let (r, g) = total_loss_with_weights(&inst, &trp, &self.weights, &self.settings)?;
        Ok((r.total, grads.then_some(g)))
    }

    fn forward(&self, net: &Network) -> Result<Vec<ForwardTrace>> {
        self.images.iter().map(|im| net.forward_train(im)).collect()
    }

    fn switches(traces: &[ForwardTrace]) -> Switches {
        let mut relu = Vec::new();
        let mut pool = Vec::new();
        for t in traces {
            for b in &t.blocks {
                relu.push(b.relu.iter().map(|&v| v > 0.0).collect());
                pool.push(b.pool_idx.clone());
            }
        }
        let a = traces[1].embedding.data();
        let d = |x: &[f64]| a.iter().zip(x).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
        let hinge = d(traces[2].embedding.data()) - d(traces[3].embedding.data()) + 1.0 > 0.0;
        Switches { relu, pool, hinge }
    }
}

/// Analytic gradient of the gradcheck problem, flattened per parameter tensor.
fn analytic(net: &Network, prob: &Problem, traces: &[ForwardTrace]) -> Result<crate::net::Gradients> {
    let (_, g) = prob.loss(traces, true)?;
    let g = g.expect("requested");
    let mut out = net.params().zeros_like();
    let [ga, gm, gs] = &g.dtriplets[0];
    net.backward(&traces[0], Some(&g.dlogits[0]), None, &mut out)?;
    net.backward(&traces[1], None, Some(ga), &mut out)?;
    net.backward(&traces[2], None, Some(gm), &mut out)?;
    net.backward(&traces[3], Some(&g.dlogits[1]), Some(gs), &mut out)?;
    Ok(out)
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.samples == 0 || !(cfg.step > 0.0) || !(cfg.tolerance > 0.0) {
        return Err(invalid!("gradcheck needs samples > 0, step > 0 and tolerance > 0"));
    }
    let mut net = Network::init(cfg.encoder.clone(), cfg.root_seed)?;
    let prob = Problem::build(cfg)?;
    let base = prob.forward(&net)?;
    let base_sw = Problem::switches(&base);
    if !base_sw.hinge {
        return Err(invalid!("triplet hinge inactive at the check point; pick another seed"));
    }
    let grads = analytic(&net, &prob, &base)?;

    let mut rng = RngStream::derive(cfg.root_seed, stream_id(&[TAG_GRADCHECK, 1]));
    let n_tensors = net.params().len();
    let mut checks = Vec::with_capacity(cfg.samples);
    let mut resampled = 0;
    let mut draw = 0usize;
    let mut seen = std::collections::HashSet::new();
    while checks.len() < cfg.samples {
        if resampled > cfg.max_resamples {
            return Err(invalid!("too many kink crossings; gradient check cannot proceed"));
        }
        // Cycle through tensors so every layer is covered.
        let ti = draw % n_tensors;
        draw += 1;
        let len = net.params().tensor(ti).len();
        let idx = rng.below(len);
        if !seen.insert((ti, idx)) {
            if seen.len() >= net.params().num_scalars() {
                return Err(invalid!("more samples requested than parameters"));
            }
            continue;
        }
        let orig = net.params().tensor(ti).data()[idx];

        net.params_mut().tensor_mut(ti).data_mut()[idx] = orig + cfg.step;
        let up = prob.forward(&net)?;
        net.params_mut().tensor_mut(ti).data_mut()[idx] = orig - cfg.step;
        let down = prob.forward(&net)?;
        net.params_mut().tensor_mut(ti).data_mut()[idx] = orig;

        if Problem::switches(&up) != base_sw || Problem::switches(&down) != base_sw {
            resampled += 1;
            continue;
        }
        let numeric = (prob.loss(&up, false)?.0 - prob.loss(&down, false)?.0) / (2.0 * cfg.step);
        let a = grads.values[ti][idx];
        let scale = a.abs().max(numeric.abs()).max(cfg.magnitude_floor);
        checks.push(ParamCheck {
            name: net.params().name(ti).to_string(),
            index: idx,
            analytic: a,
            numeric,
            rel_error: (a - numeric).abs() / scale,
        });
    }
    let max_rel_error = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        passed: max_rel_error < cfg.tolerance,
        checks,
        resampled,
        max_rel_error,
        tolerance: cfg.tolerance,
    })
}
