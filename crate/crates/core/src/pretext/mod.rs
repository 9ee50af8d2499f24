//! Pretext corpus construction: source images, patch extraction, and the
//! per-batch synthesis of labelled degraded instances and ordered triplets.

mod corpus;
mod procedural;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::manips::{apply, degrading_specs, AttributeGroup, ManipulationSpec, OrderedPair, NUM_CLASSES};
use crate::pixel::{bilinear_resize, stream_id, Image, RngStream};

pub use corpus::{
    build_corpus, read_corpus, read_manifest, write_corpus, Corpus, CorpusConfig, CorpusPatch, CropRect,
    Manifest, ManifestEntry, SourceKind, SourceSpec, Split,
};
pub use procedural::generate_procedural;

// Stream labels. Each purpose gets its own namespace so that streams never
// collide across stages.
pub(crate) const TAG_SOURCE: u64 = 0x5352_4345; // "SRCE"
pub(crate) const TAG_CROP: u64 = 0x4352_4f50; // "CROP"
pub(crate) const TAG_SPLIT: u64 = 0x5350_4c54; // "SPLT"
pub(crate) const TAG_SYNTH: u64 = 0x5359_4e54; // "SYNT"

/// Resize the short edge to `resize_short` (aspect preserved) and take a
/// uniformly placed `crop`×`crop` window. Returns the patch and its rectangle
/// in resized coordinates.
pub fn extract_patch_with_rect(
    img: &Image,
    rng: &mut RngStream,
    resize_short: usize,
    crop: usize,
) -> Result<(Image, CropRect)> {
    if crop == 0 || resize_short == 0 || crop > resize_short {
        return Err(invalid!(
            "need 0 < crop <= resize_short, got crop {crop}, resize_short {resize_short}"
        ));
    }
    let (h, w) = (img.height(), img.width());
    let (rh, rw) = if h <= w {
        (resize_short, scaled_long_edge(w, h, resize_short))
    } else {
        (scaled_long_edge(h, w, resize_short), resize_short)
    };
    let resized = bilinear_resize(img, rh, rw)?;
    let top = rng.below(rh - crop + 1);
    let left = rng.below(rw - crop + 1);
    let patch = resized.crop(top, left, crop, crop)?;
    Ok((
        patch,
        CropRect {
            top,
            left,
            height: crop,
            width: crop,
        },
    ))
}

pub fn extract_patch(
    img: &Image,
    rng: &mut RngStream,
    resize_short: usize,
    crop: usize,
) -> Result<Image> {
    extract_patch_with_rect(img, rng, resize_short, crop).map(|(p, _)| p)
}

fn scaled_long_edge(long: usize, short: usize, target_short: usize) -> usize {
    ((long as f64 * target_short as f64 / short as f64).round() as usize).max(target_short)
}

/// A degraded patch and the class of the manipulation that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct PretextInstance {
    pub patch_id: u64,
    pub image: Image,
    pub class_index: usize,
    pub spec: ManipulationSpec,
}

/// `(p, mild(p), severe(p))` for one ordered pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub patch_id: u64,
    pub anchor: Image,
    pub mild_img: Image,
    pub severe_img: Image,
    pub pair: OrderedPair,
}

/// Knobs for [`synth_batch`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthOptions {
    pub root_seed: u64,
    /// Epoch label mixed into every per-patch stream.
    pub epoch: u64,
    pub ops_per_patch: usize,
    /// Probability of an extra identity instance per patch.
    pub none_rate: f64,
    pub excluded_groups: Vec<AttributeGroup>,
    /// Skip triplet synthesis (the images are not needed while the triplet
    /// loss is inactive).
    pub emit_triplets: bool,
}

impl SynthOptions {
    pub fn new(root_seed: u64, epoch: u64) -> Self {
        SynthOptions {
            root_seed,
            epoch,
            ops_per_patch: 3,
            none_rate: 1.0 / NUM_CLASSES as f64,
            excluded_groups: Vec::new(),
            emit_triplets: true,
        }
    }

    fn validate(&self) -> Result<Vec<ManipulationSpec>> {
        let allowed = degrading_specs(&self.excluded_groups);
        if self.ops_per_patch == 0 || self.ops_per_patch > NUM_CLASSES - 1 {
            return Err(invalid!(
                "ops_per_patch must be in [1, {}], got {}",
                NUM_CLASSES - 1,
                self.ops_per_patch
            ));
        }
        if self.ops_per_patch > allowed.len() {
            return Err(invalid!(
                "ops_per_patch {} exceeds the {} classes left after exclusions",
                self.ops_per_patch,
                allowed.len()
            ));
        }
        if !(0.0..=1.0).contains(&self.none_rate) {
            return Err(invalid!("none_rate must be in [0, 1], got {}", self.none_rate));
        }
        Ok(allowed)
    }
}

/// The manipulations drawn for one patch in one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPlan {
    pub specs: Vec<ManipulationSpec>,
    pub with_none: bool,
}

impl PatchPlan {
    /// Class indices in emission order.
    pub fn class_indices(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.specs.iter().map(|s| s.class_index).collect();
        if self.with_none {
            v.push(0);
        }
        v
    }
}

fn patch_stream(opts: &SynthOptions, patch_id: u64) -> RngStream {
    RngStream::derive(opts.root_seed, stream_id(&[TAG_SYNTH, patch_id, opts.epoch]))
}

fn draw_plan(rng: &mut RngStream, allowed: &[ManipulationSpec], opts: &SynthOptions) -> PatchPlan {
    let specs = rng
        .sample_indices(allowed.len(), opts.ops_per_patch)
        .into_iter()
        .map(|i| allowed[i])
        .collect();
    let with_none = rng.chance(opts.none_rate);
    PatchPlan { specs, with_none }
}

/// The plan [`synth_batch`] will use for `patch_id` under `opts`.
pub fn plan_patch(patch_id: u64, opts: &SynthOptions) -> Result<PatchPlan> {
    let allowed = opts.validate()?;
    Ok(draw_plan(&mut patch_stream(opts, patch_id), &allowed, opts))
}

/// Output of [`synth_batch`].
#[derive(Debug, Clone, Default)]
pub struct SynthBatch {
    pub instances: Vec<PretextInstance>,
    pub triplets: Vec<Triplet>,
}

/// Synthesize pretext instances and triplets for a batch of patches.
///
/// Each patch draws `ops_per_patch` distinct degrading classes (plus an
/// identity instance with probability `none_rate`) from its own stream, so
/// the output does not depend on scheduling. The mixup partner of patch `i`
/// is patch `i + 1` (cyclically).
pub fn synth_batch(patches: &[(u64, &Image)], opts: &SynthOptions) -> Result<SynthBatch> {
    if patches.is_empty() {
        return Err(invalid!("synth_batch needs at least one patch"));
    }
    let allowed = opts.validate()?;
    let shape = patches[0].1.dims();
    if let Some((id, _)) = patches.iter().find(|(_, p)| p.dims() != shape) {
        return Err(invalid!("patch {id} has a different shape from patch 0"));
    }
    let per_patch: Vec<Result<SynthBatch>> = (0..patches.len())
        .into_par_iter()
        .map(|i| {
            let (patch_id, image) = patches[i];
            let partner = patches[(i + 1) % patches.len()].1;
            synth_one(patch_id, image, partner, &allowed, opts)
        })
        .collect();
    let mut out = SynthBatch::default();
    for part in per_patch {
        let part = part?;
        out.instances.extend(part.instances);
        out.triplets.extend(part.triplets);
    }
    Ok(out)
}

fn synth_one(
    patch_id: u64,
    image: &Image,
    partner: &Image,
    allowed: &[ManipulationSpec],
    opts: &SynthOptions,
) -> Result<SynthBatch> {
    let mut rng = patch_stream(opts, patch_id);
    let plan = draw_plan(&mut rng, allowed, opts);
    let partner_for = |spec: &ManipulationSpec| spec.family().needs_partner().then_some(partner);
    let mut out = SynthBatch::default();
    for (slot, spec) in plan.specs.iter().enumerate() {
        let slot = slot as u64;
        let mut op_rng = rng.child(opts.root_seed, &[slot, 0]);
        let degraded = apply(&spec.manipulation, image, &mut op_rng, partner_for(spec))?;
        out.instances.push(PretextInstance {
            patch_id,
            image: degraded,
            class_index: spec.class_index,
            spec: *spec,
        });
        if !opts.emit_triplets {
            continue;
        }
        if let Some(pair) = spec.ordered_pair() {
            let mut mild_rng = rng.child(opts.root_seed, &[slot, 1]);
            let mut severe_rng = rng.child(opts.root_seed, &[slot, 2]);
            out.triplets.push(Triplet {
                patch_id,
                anchor: image.clone(),
                mild_img: apply(&pair.mild.manipulation, image, &mut mild_rng, partner_for(&pair.mild))?,
                severe_img: apply(
                    &pair.severe.manipulation,
                    image,
                    &mut severe_rng,
                    partner_for(&pair.severe),
                )?,
                pair,
            });
        }
    }
    if plan.with_none {
        out.instances.push(PretextInstance {
            patch_id,
            image: image.clone(),
            class_index: 0,
            spec: ManipulationSpec::from_class(0)?,
        });
    }
    Ok(out)
}
