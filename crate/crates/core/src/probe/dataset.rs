use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::manips::{apply, degrading_specs, ManipulationSpec};
use crate::pixel::{bilinear_resize, io::read_png, psnr, stream_id, Image, RngStream};
use crate::pretext::generate_procedural;

const TAG_EVAL_SOURCE: u64 = 0x4553_5243; // "ESRC"
const TAG_EVAL_DEGRADE: u64 = 0x4544_4547; // "EDEG"
const TAG_EVAL_SPLIT: u64 = 0x4553_504c; // "ESPL"

#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub image: Image,
    /// 1 = positive (clean), 0 = negative (degraded).
    pub label: u8,
    /// The manipulation that produced a negative item.
    pub spec: Option<ManipulationSpec>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalDataset {
    pub items: Vec<EvalItem>,
    pub splits: Splits,
}

impl EvalDataset {
    pub fn labels(&self, idx: &[usize]) -> Vec<u8> {
        idx.iter().map(|&i| self.items[i].label).collect()
    }
}

/// The clean source behind synthetic item `i`.
pub fn synthetic_source(root_seed: u64, i: usize, size: usize) -> Result<Image> {
    let mut rng = RngStream::derive(root_seed, stream_id(&[TAG_EVAL_SOURCE, i as u64]));
    generate_procedural(&mut rng, size, size)
}

/// Clean-vs-degraded set: the first ⌊n/2⌋ items are untouched procedural
/// scenes (positive), the rest are degraded by one uniformly drawn
/// non-identity catalog entry (negative). Mixup partners are the next source.
pub fn make_synthetic_aesthetic_set(n: usize, root_seed: u64, size: usize) -> Result<EvalDataset> {
    if n < 100 {
        return Err(invalid!("synthetic evaluation set needs n >= 100, got {n}"));
    }
    let specs = degrading_specs(&[]);
    let pos = n / 2;
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let src = synthetic_source(root_seed, i, size)?;
        if i < pos {
            items.push(EvalItem { image: src, label: 1, spec: None });
            continue;
        }
        let partner = synthetic_source(root_seed, (i + 1) % n, size)?;
        let mut rng = RngStream::derive(root_seed, stream_id(&[TAG_EVAL_DEGRADE, i as u64]));
        // Redraw in the rare case a manipulation leaves the image unchanged.
        let (image, spec) = loop {
            let spec = specs[rng.below(specs.len())];
            let mut op_rng = rng.child(root_seed, &[1]);
            let p = spec.family().needs_partner().then_some(&partner);
            let out = apply(&spec.manipulation, &src, &mut op_rng, p)?;
            if psnr(&out, &src)?.is_finite() {
                break (out, spec);
            }
        };
        items.push(EvalItem { image, label: 0, spec: Some(spec) });
    }
    let labels: Vec<u8> = items.iter().map(|it| it.label).collect();
    let splits = stratified_splits(&labels, root_seed)?;
    Ok(EvalDataset { items, splits })
}

/// Per-class seeded 70/10/20 split.
pub fn stratified_splits(labels: &[u8], root_seed: u64) -> Result<Splits> {
    let mut splits = Splits::default();
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        let mut rng = RngStream::derive(root_seed, stream_id(&[TAG_EVAL_SPLIT, class as u64]));
        rng.shuffle(&mut idx);
        let n = idx.len();
        let n_train = n * 7 / 10;
        let n_val = n / 10;
        if n_train == 0 || n_val == 0 || n - n_train - n_val == 0 {
            return Err(invalid!("class {class} has {n} items, too few for a 70/10/20 split"));
        }
        splits.train.extend(&idx[..n_train]);
        splits.val.extend(&idx[n_train..n_train + n_val]);
        splits.test.extend(&idx[n_train + n_val..]);
    }
    for s in [&mut splits.train, &mut splits.val, &mut splits.test] {
        s.sort_unstable();
    }
    Ok(splits)
}

/// Resize the short side to `size` and take the centred square.
fn fit_square(img: &Image, size: usize) -> Result<Image> {
    let (h, w, _) = img.dims();
    let (nh, nw) = if h <= w {
        (size, ((w * size) as f64 / h as f64).round().max(size as f64) as usize)
    } else {
        (((h * size) as f64 / w as f64).round().max(size as f64) as usize, size)
    };
    let r = bilinear_resize(img, nh, nw)?;
    r.crop((nh - size) / 2, (nw - size) / 2, size, size)
}

#[derive(Debug, Deserialize)]
struct LabelRow {
    path: String,
    label: u8,
}

/// Load a labelled folder from a `path,label` CSV. Paths are relative to the
/// CSV's directory; images are fitted to `size`×`size` RGB.
pub fn load_labeled_folder(csv_path: &Path, size: usize, root_seed: u64) -> Result<EvalDataset> {
    let base = csv_path.parent().unwrap_or(Path::new("."));
    let file = std::fs::File::open(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["path", "label"] {
        return Err(Error::Format(format!(
            "{}: header must be 'path,label'",
            csv_path.display()
        )));
    }
    let mut items = Vec::new();
    for row in rdr.deserialize() {
        let row: LabelRow = row?;
        if row.label > 1 {
            return Err(Error::Format(format!("label {} for {} is not 0 or 1", row.label, row.path)));
        }
        let img = read_png(&base.join(&row.path))?;
        let img = if img.channels() == 1 {
            Image::from_fn(img.height(), img.width(), 3, |y, x, _| img.get(y, x, 0))?
        } else {
            img
        };
        items.push(EvalItem { image: fit_square(&img, size)?, label: row.label, spec: None });
    }
    let labels: Vec<u8> = items.iter().map(|i| i.label).collect();
    let splits = stratified_splits(&labels, root_seed)?;
    Ok(EvalDataset { items, splits })
}
