use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tensor::{Gradients, ParamSet, Tensor};
use crate::error::{invalid, Error, Result};
use crate::manips::NUM_CLASSES;
use crate::pixel::{stream_id, Image, RngStream};

const TAG_INIT: u64 = 0x494e_4954; // "INIT"

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Max2,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub out_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    pub pool: Pool,
}

fn default_kernel() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub input_size: usize,
    pub blocks: Vec<BlockConfig>,
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let widths = [16, 32, 64, 64, 64];
        EncoderConfig {
            in_channels: 3,
            input_size: 64,
            blocks: widths
                .iter()
                .enumerate()
                .map(|(i, &c)| BlockConfig {
                    out_channels: c,
                    kernel: 3,
                    pool: if i < 4 { Pool::Max2 } else { Pool::None },
                })
                .collect(),
            embed_dim: 32,
            num_classes: NUM_CLASSES,
        }
    }
}

impl EncoderConfig {
    /// A five-block net small enough for exhaustive gradient checks.
    pub fn tiny() -> Self {
        let widths = [4, 6, 6, 8, 8];
        EncoderConfig {
            in_channels: 3,
            input_size: 16,
            blocks: widths
                .iter()
                .enumerate()
                .map(|(i, &c)| BlockConfig {
                    out_channels: c,
                    kernel: 3,
                    pool: if i < 3 { Pool::Max2 } else { Pool::None },
                })
                .collect(),
            embed_dim: 8,
            num_classes: NUM_CLASSES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.input_size == 0 {
            return Err(Error::Config("in_channels and input_size must be positive".into()));
        }
        if self.blocks.is_empty() {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        if self.embed_dim < 8 {
            return Err(Error::Config(format!("embed_dim must be >= 8, got {}", self.embed_dim)));
        }
        if self.num_classes != NUM_CLASSES {
            return Err(Error::Config(format!(
                "num_classes must be {NUM_CLASSES}, got {}",
                self.num_classes
            )));
        }
        let mut side = self.input_size;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_channels == 0 {
                return Err(Error::Config(format!("block {} has zero channels", i + 1)));
            }
            if b.kernel % 2 == 0 {
                return Err(Error::Config(format!("block {} kernel must be odd", i + 1)));
            }
            if b.pool == Pool::Max2 {
                side /= 2;
            }
            if side == 0 {
                return Err(Error::Config(format!(
                    "input_size {} collapses to zero at block {}",
                    self.input_size,
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// Spatial side length after each block.
    pub fn block_sides(&self) -> Vec<usize> {
        let mut side = self.input_size;
        self.blocks
            .iter()
            .map(|b| {
                if b.pool == Pool::Max2 {
                    side /= 2;
                }
                side
            })
            .collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.out_channels)
    }

    /// Parameter names and shapes in storage order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = self.in_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("conv{}.weight", i + 1), vec![b.out_channels, cin, b.kernel, b.kernel]));
            out.push((format!("conv{}.bias", i + 1), vec![b.out_channels]));
            cin = b.out_channels;
        }
        out.push(("cls.weight".into(), vec![self.num_classes, cin]));
        out.push(("cls.bias".into(), vec![self.num_classes]));
        out.push(("embed.weight".into(), vec![self.embed_dim, cin]));
        out.push(("embed.bias".into(), vec![self.embed_dim]));
        out
    }
}

/// Convolutional encoder with a classification head and a unit-norm embedding head.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    cfg: EncoderConfig,
    params: ParamSet,
}

/// Saved activations of one block.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    in_side: usize,
    cols: Vec<f64>,
    pub(crate) relu: Vec<f64>,
    pub(crate) pool_idx: Vec<u32>,
    /// Post-pool output, shape [C, side, side].
    pub output: Tensor,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub blocks: Vec<BlockTrace>,
    /// Global-average-pooled trunk features.
    pub features: Vec<f64>,
    pub logits: Tensor,
    pub embedding: Tensor,
    embed_norm: f64,
    retained: bool,
}

impl ForwardTrace {
    pub fn is_retained(&self) -> bool {
        self.retained
    }
}

impl Network {
    /// Kaiming-uniform weights (fan-in) and zero biases from a stream derived from `root_seed`.
    pub fn init(cfg: EncoderConfig, root_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngStream::derive(root_seed, stream_id(&[TAG_INIT]));
        let mut params = ParamSet::new();
        for (name, shape) in cfg.param_layout() {
            let mut t = Tensor::zeros(&shape);
            if name.ends_with(".weight") {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                for v in t.data_mut() {
                    *v = rng.uniform(-bound, bound);
                }
            }
            params.insert(name, t)?;
        }
        Ok(Network { cfg, params })
    }

    pub fn zeros(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        for (name, shape) in cfg.param_layout() {
            params.insert(name, Tensor::zeros(&shape))?;
        }
        Ok(Network { cfg, params })
    }

    /// Wrap existing parameters after checking them against the config.
    pub fn from_parts(cfg: EncoderConfig, params: ParamSet) -> Result<Self> {
        cfg.validate()?;
        let layout = cfg.param_layout();
        if layout.len() != params.len() {
            return Err(invalid!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            ));
        }
        for ((name, shape), (pn, pt)) in layout.iter().zip(params.iter()) {
            if name != pn || shape.as_slice() != pt.shape() {
                return Err(invalid!(
                    "parameter mismatch: expected {name} {shape:?}, found {pn} {:?}",
                    pt.shape()
                ));
            }
        }
        Ok(Network { cfg, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn into_parts(self) -> (EncoderConfig, ParamSet) {
        (self.cfg, self.params)
    }

    fn w(&self, i: usize) -> &[f64] {
        self.params.tensor(i).data()
    }

    fn head_index(&self) -> usize {
        2 * self.cfg.blocks.len()
    }

    /// Image in [0,1] → centred CHW input.
    pub fn image_input(&self, img: &Image) -> Result<Vec<f64>> {
        let (h, w, c) = img.dims();
        let s = self.cfg.input_size;
        if h != s || w != s || c != self.cfg.in_channels {
            return Err(invalid!(
                "expected {s}x{s}x{} input, got {h}x{w}x{c}",
                self.cfg.in_channels
            ));
        }
        let mut out = vec![0.0; h * w * c];
        for (p, px) in img.data().chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                out[ch * h * w + p] = v - 0.5;
            }
        }
        Ok(out)
    }

    fn check_chw(&self, x: &[f64]) -> Result<()> {
        let s = self.cfg.input_size;
        let n = self.cfg.in_channels * s * s;
        if x.len() != n {
            return Err(invalid!("input has {} values, expected {n}", x.len()));
        }
        Ok(())
    }

    /// Forward one image, keeping everything needed by [`Network::backward`].
    pub fn forward_train(&self, img: &Image) -> Result<ForwardTrace> {
        let x = self.image_input(img)?;
        self.forward_chw(&x, true, self.cfg.blocks.len(), true)
    }

    /// Inference forward of one image; the trace cannot be back-propagated.
    pub fn forward(&self, img: &Image) -> Result<ForwardTrace> {
        let x = self.image_input(img)?;
        self.forward_chw(&x, false, self.cfg.blocks.len(), true)
    }

    /// Forward a batch tensor [N,C,H,W] of centred inputs.
    pub fn forward_batch(&self, batch: &Tensor) -> Result<Vec<ForwardTrace>> {
        let s = self.cfg.input_size;
        let expect = [self.cfg.in_channels, s, s];
        if batch.shape().len() != 4 || batch.shape()[1..] != expect {
            return Err(invalid!(
                "batch shape {:?} does not match [N, {}, {s}, {s}]",
                batch.shape(),
                self.cfg.in_channels
            ));
        }
        let per = expect.iter().product::<usize>();
        batch
            .data()
            .par_chunks(per.max(1))
            .map(|x| self.forward_chw(x, true, self.cfg.blocks.len(), true))
            .collect()
    }

    /// Post-pool activation of block `block_index` (1-based), shape [C, side, side].
    pub fn block_output(&self, img: &Image, block_index: usize) -> Result<Tensor> {
        if block_index == 0 || block_index > self.cfg.blocks.len() {
            return Err(invalid!(
                "block index {block_index} outside 1..={}",
                self.cfg.blocks.len()
            ));
        }
        let x = self.image_input(img)?;
        let mut t = self.forward_chw(&x, false, block_index, false)?;
        Ok(t.blocks.pop().expect("at least one block").output)
    }

    /// Post-pool activations of every block from one trunk pass.
    pub fn block_outputs(&self, img: &Image) -> Result<Vec<Tensor>> {
        let x = self.image_input(img)?;
        let t = self.forward_chw(&x, false, self.cfg.blocks.len(), false)?;
        Ok(t.blocks.into_iter().map(|b| b.output).collect())
    }

    fn forward_chw(&self, x: &[f64], retain: bool, upto: usize, heads: bool) -> Result<ForwardTrace> {
        self.check_chw(x)?;
        let mut side = self.cfg.input_size;
        let mut cin = self.cfg.in_channels;
        let mut cur = x.to_vec();
        let mut blocks = Vec::with_capacity(upto);
        for (bi, b) in self.cfg.blocks.iter().take(upto).enumerate() {
            let hw = side * side;
            let cols = im2col(&cur, cin, side, b.kernel);
            let kdim = cin * b.kernel * b.kernel;
            let weight = self.w(2 * bi);
            let bias = self.w(2 * bi + 1);
            let mut act = vec![0.0; b.out_channels * hw];
            gemm(b.out_channels, kdim, hw, weight, kdim, 1, &cols, hw, 1, &mut act, hw, 1, 0.0);
            for (row, &bv) in act.chunks_exact_mut(hw).zip(bias) {
                for v in row {
                    *v = (*v + bv).max(0.0);
                }
            }
            let (out, idx, out_side) = match b.pool {
                Pool::Max2 => {
                    let (o, i) = max_pool2(&act, b.out_channels, side);
                    (o, i, side / 2)
                }
                Pool::None => (act.clone(), Vec::new(), side),
            };
            let out_t = Tensor::from_vec(&[b.out_channels, out_side, out_side], out.clone())?;
            blocks.push(BlockTrace {
                in_side: side,
                cols: if retain { cols } else { Vec::new() },
                relu: if retain { act } else { Vec::new() },
                pool_idx: if retain { idx } else { Vec::new() },
                output: out_t,
            });
            cur = out;
            side = out_side;
            cin = b.out_channels;
        }
        if !heads {
            return Ok(ForwardTrace {
                blocks,
                features: Vec::new(),
                logits: Tensor::zeros(&[0]),
                embedding: Tensor::zeros(&[0]),
                embed_norm: 0.0,
                retained: false,
            });
        }
        let hw = side * side;
        let features: Vec<f64> = cur
            .chunks_exact(hw)
            .map(|ch| ch.iter().sum::<f64>() / hw as f64)
            .collect();
        let h = self.head_index();
        let logits = affine(self.w(h), self.w(h + 1), &features);
        let z = affine(self.w(h + 2), self.w(h + 3), &features);
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let emb: Vec<f64> = z.iter().map(|v| v / norm).collect();
        Ok(ForwardTrace {
            blocks,
            features,
            logits: Tensor::from_vec(&[self.cfg.num_classes], logits)?,
            embedding: Tensor::from_vec(&[self.cfg.embed_dim], emb)?,
            embed_norm: norm,
            retained: retain,
        })
    }

    /// Accumulate parameter gradients given ∂L/∂logits and ∂L/∂embedding.
    /// Either may be `None` when that head does not enter the loss.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        dlogits: Option<&[f64]>,
        dembed: Option<&[f64]>,
        grads: &mut Gradients,
    ) -> Result<()> {
        if !trace.retained {
            return Err(Error::State("backward needs a trace from forward_train".into()));
        }
        if grads.values.len() != self.params.len() {
            return Err(invalid!("gradient buffer does not match parameters"));
        }
        let nb = self.cfg.blocks.len();
        let h = self.head_index();
        let f = &trace.features;
        let cdim = f.len();
        let mut df = vec![0.0; cdim];
        if let Some(dl) = dlogits {
            if dl.len() != self.cfg.num_classes {
                return Err(invalid!("dlogits has {} entries", dl.len()));
            }
            affine_backward(self.w(h), dl, f, &mut df, grads, h);
        }
        if let Some(dh) = dembed {
            if dh.len() != self.cfg.embed_dim {
                return Err(invalid!("dembed has {} entries", dh.len()));
            }
            let e = trace.embedding.data();
            let proj: f64 = e.iter().zip(dh).map(|(a, b)| a * b).sum();
            let dz: Vec<f64> = dh
                .iter()
                .zip(e)
                .map(|(g, hv)| (g - hv * proj) / trace.embed_norm)
                .collect();
            affine_backward(self.w(h + 2), &dz, f, &mut df, grads, h + 2);
        }
        if df.iter().all(|&v| v == 0.0) {
            return Ok(());
        }

        // Global average pool.
        let last = &trace.blocks[nb - 1];
        let side = last.output.shape()[1];
        let hw = side * side;
        let mut dcur: Vec<f64> = df
            .iter()
            .flat_map(|&g| std::iter::repeat(g / hw as f64).take(hw))
            .collect();

        for bi in (0..nb).rev() {
            let b = &self.cfg.blocks[bi];
            let t = &trace.blocks[bi];
            let in_side = t.in_side;
            let hw = in_side * in_side;
            let cin = if bi == 0 { self.cfg.in_channels } else { self.cfg.blocks[bi - 1].out_channels };
            let kdim = cin * b.kernel * b.kernel;
            let mut dact = match b.pool {
                Pool::Max2 => {
                    let mut d = vec![0.0; b.out_channels * hw];
                    for (&i, &g) in t.pool_idx.iter().zip(&dcur) {
                        d[i as usize] += g;
                    }
                    d
                }
                Pool::None => dcur,
            };
            for (g, &a) in dact.iter_mut().zip(&t.relu) {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }
            {
                let dw = &mut grads.values[2 * bi];
                gemm(b.out_channels, hw, kdim, &dact, hw, 1, &t.cols, 1, hw, dw, kdim, 1, 1.0);
            }
            for (db, row) in grads.values[2 * bi + 1].iter_mut().zip(dact.chunks_exact(hw)) {
                *db += row.iter().sum::<f64>();
            }
            if bi == 0 {
                break;
            }
            let mut dcols = vec![0.0; kdim * hw];
            gemm(kdim, b.out_channels, hw, self.w(2 * bi), 1, kdim, &dact, hw, 1, &mut dcols, hw, 1, 0.0);
            dcur = col2im(&dcols, cin, in_side, b.kernel);
        }
        Ok(())
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    w.chunks_exact(x.len())
        .zip(b)
        .map(|(row, &bv)| bv + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
        .collect()
}

fn affine_backward(w: &[f64], dy: &[f64], x: &[f64], dx: &mut [f64], grads: &mut Gradients, at: usize) {
    let n = x.len();
    {
        let dw = &mut grads.values[at];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (d, &xv) in dw[o * n..(o + 1) * n].iter_mut().zip(x) {
                *d += g * xv;
            }
        }
    }
    for (d, &g) in grads.values[at + 1].iter_mut().zip(dy) {
        *d += g;
    }
    for (o, &g) in dy.iter().enumerate() {
        for (d, &wv) in dx.iter_mut().zip(&w[o * n..(o + 1) * n]) {
            *d += g * wv;
        }
    }
}

/// Row (c, ky, kx), column (y, x): input at (y+ky-p, x+kx-p), zero outside.
fn im2col(x: &[f64], c: usize, side: usize, k: usize) -> Vec<f64> {
    let p = k / 2;
    let hw = side * side;
    let mut cols = vec![0.0; c * k * k * hw];
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ch * k + ky) * k + kx) * hw..][..hw];
                for y in 0..side {
                    let sy = y as isize + ky as isize - p as isize;
                    if sy < 0 || sy >= side as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * side..][..side];
                    let dst = &mut row[y * side..][..side];
                    let off = kx as isize - p as isize;
                    let x0 = (-off).max(0) as usize;
                    let x1 = (side as isize - off).min(side as isize) as usize;
                    for xx in x0..x1 {
                        dst[xx] = src[(xx as isize + off) as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], c: usize, side: usize, k: usize) -> Vec<f64> {
    let p = k / 2;
    let hw = side * side;
    let mut x = vec![0.0; c * hw];
    for ch in 0..c {
        let plane = &mut x[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ch * k + ky) * k + kx) * hw..][..hw];
                for y in 0..side {
                    let sy = y as isize + ky as isize - p as isize;
                    if sy < 0 || sy >= side as isize {
                        continue;
                    }
                    let off = kx as isize - p as isize;
                    let x0 = (-off).max(0) as usize;
                    let x1 = (side as isize - off).min(side as isize) as usize;
                    for xx in x0..x1 {
                        plane[sy as usize * side + (xx as isize + off) as usize] += row[y * side + xx];
                    }
                }
            }
        }
    }
    x
}

/// 2×2 stride-2 max pool (odd trailing row/column dropped). Ties go to the first element.
fn max_pool2(x: &[f64], c: usize, side: usize) -> (Vec<f64>, Vec<u32>) {
    let o = side / 2;
    let hw = side * side;
    let mut out = Vec::with_capacity(c * o * o);
    let mut idx = Vec::with_capacity(c * o * o);
    for ch in 0..c {
        for y in 0..o {
            for xx in 0..o {
                let mut best = ch * hw + 2 * y * side + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = ch * hw + (2 * y + dy) * side + 2 * xx + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(seed: u64, side: usize) -> Image {
        let mut rng = RngStream::derive(seed, 9);
        Image::from_fn(side, side, 3, |_, _, _| rng.next_f64()).unwrap()
    }

    fn naive_conv(x: &[f64], cin: usize, side: usize, w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
        let mut out = vec![0.0; cout * side * side];
        for o in 0..cout {
            for y in 0..side as isize {
                for xx in 0..side as isize {
                    let mut acc = b[o];
                    for c in 0..cin {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let sy = y + ky - 1;
                                let sx = xx + kx - 1;
                                if sy < 0 || sx < 0 || sy >= side as isize || sx >= side as isize {
                                    continue;
                                }
                                acc += w[((o * cin + c) * 3 + ky as usize) * 3 + kx as usize]
                                    * x[(c * side + sy as usize) * side + sx as usize];
                            }
                        }
                    }
                    out[(o * side + y as usize) * side + xx as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn first_block_matches_naive_convolution() {
        let net = Network::init(EncoderConfig::tiny(), 3).unwrap();
        let img = random_image(1, 16);
        let x = net.image_input(&img).unwrap();
        let cout = net.cfg.blocks[0].out_channels;
        let conv = naive_conv(&x, 3, 16, net.w(0), net.w(1), cout);
        let relu: Vec<f64> = conv.iter().map(|v| v.max(0.0)).collect();
        let (pooled, _) = max_pool2(&relu, cout, 16);
        let got = net.block_output(&img, 1).unwrap();
        for (a, b) in got.data().iter().zip(&pooled) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_network_gives_uniform_softmax() {
        let net = Network::zeros(EncoderConfig::tiny()).unwrap();
        let t = net.forward(&random_image(2, 16)).unwrap();
        assert!(t.logits.data().iter().all(|&v| v == 0.0));
        let p = 1.0 / t.logits.len() as f64;
        assert!((p - 1.0 / 22.0).abs() < 1e-15);
    }

    #[test]
    fn embedding_has_unit_norm() {
        for seed in 0..5 {
            let net = Network::init(EncoderConfig::tiny(), seed).unwrap();
            let t = net.forward(&random_image(seed + 10, 16)).unwrap();
            let n: f64 = t.embedding.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn doubling_trunk_weights_keeps_embedding_signs() {
        let mut net = Network::init(EncoderConfig::tiny(), 4).unwrap();
        let nb = net.cfg.blocks.len();
        for i in 0..net.params.len() {
            if net.params.name(i).ends_with(".bias") {
                net.params.tensor_mut(i).data_mut().fill(0.0);
            }
        }
        let img = random_image(5, 16);
        let before = net.forward(&img).unwrap();
        for bi in 0..nb {
            for v in net.params.tensor_mut(2 * bi).data_mut() {
                *v *= 2.0;
            }
        }
        let after = net.forward(&img).unwrap();
        for (a, b) in before.embedding.data().iter().zip(after.embedding.data()) {
            assert_eq!(a.signum(), b.signum());
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let net = Network::init(EncoderConfig::tiny(), 6).unwrap();
        let t = net.forward_train(&random_image(7, 16)).unwrap();
        let mut g = net.params.zeros_like();
        net.backward(&t, Some(&[0.0; 22]), Some(&[0.0; 8]), &mut g).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn inference_trace_cannot_backprop() {
        let net = Network::init(EncoderConfig::tiny(), 6).unwrap();
        let t = net.forward(&random_image(7, 16)).unwrap();
        let mut g = net.params.zeros_like();
        let err = net.backward(&t, Some(&[1.0; 22]), None, &mut g).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn embedding_gradient_is_orthogonal_to_embedding() {
        // Perturbing the pre-norm vector along h leaves h unchanged, so the
        // projected gradient must have no component along h.
        let net = Network::init(EncoderConfig::tiny(), 8).unwrap();
        let t = net.forward_train(&random_image(9, 16)).unwrap();
        let h = t.embedding.data();
        let mut dh = vec![0.0; h.len()];
        dh[0] = 1.0;
        dh[3] = -0.5;
        let proj: f64 = h.iter().zip(&dh).map(|(a, b)| a * b).sum();
        let dz: Vec<f64> = dh.iter().zip(h).map(|(g, hv)| g - hv * proj).collect();
        let along: f64 = dz.iter().zip(h).map(|(a, b)| a * b).sum();
        assert!(along.abs() < 1e-12);
        // Bias gradient of the embedding head equals dz / |z|.
        let mut g = net.params.zeros_like();
        net.backward(&t, None, Some(&dh), &mut g).unwrap();
        let eb = net.params.index_of("embed.bias").unwrap();
        let along_b: f64 = g.values[eb].iter().zip(h).map(|(a, b)| a * b).sum();
        assert!(along_b.abs() < 1e-12);
    }

    #[test]
    fn wrong_shapes_rejected() {
        let net = Network::init(EncoderConfig::tiny(), 1).unwrap();
        assert!(net.forward(&random_image(1, 15)).is_err());
        assert!(net.forward_batch(&Tensor::zeros(&[2, 3, 16, 8])).is_err());
        assert!(net.block_output(&random_image(1, 16), 6).is_err());
    }

    #[test]
    fn batch_forward_matches_single() {
        let net = Network::init(EncoderConfig::tiny(), 2).unwrap();
        let imgs: Vec<Image> = (0..3).map(|i| random_image(i, 16)).collect();
        let mut data = Vec::new();
        for im in &imgs {
            data.extend(net.image_input(im).unwrap());
        }
        let batch = Tensor::from_vec(&[3, 3, 16, 16], data).unwrap();
        let traces = net.forward_batch(&batch).unwrap();
        for (t, im) in traces.iter().zip(&imgs) {
            assert_eq!(t.logits, net.forward(im).unwrap().logits);
        }
    }

    #[test]
    fn default_config_shapes() {
        let cfg = EncoderConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.block_sides(), vec![32, 16, 8, 4, 4]);
        let tiny = Network::init(EncoderConfig::tiny(), 0).unwrap();
        assert!(tiny.params.num_scalars() <= 10_000);
    }
}
