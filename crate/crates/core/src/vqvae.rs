//! VQ-VAE: convolutional encoder, codebook quantization with a straight-through
//! estimator, and a mirrored transposed-convolution decoder.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::demodata::Frames;
use crate::error::{Error, Result};
use crate::nn::{conv_out, relu, relu_backward, Adam, Conv2d, ConvTranspose2d, Param, Real, Residual, ResidualTrace, Tensor};
use crate::rng::{substream, Rng};

/// Architecture hyperparameters shared by the VQ-VAE and the policy encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqvaeArch {
    pub image_size: usize,
    pub channels: usize,
    pub code_dim: usize,
    pub codebook_size: usize,
    pub beta: f64,
}

impl Default for VqvaeArch {
    fn default() -> Self {
        VqvaeArch { image_size: 84, channels: 256, code_dim: 64, codebook_size: 512, beta: 0.25 }
    }
}

/// Spatial sizes through the encoder: input, three stride-2 convs (the k3 s1 conv keeps size).
pub fn encoder_sizes(image_size: usize) -> Result<[usize; 4]> {
    let f = |n| conv_out(n, 4, 2, 1).filter(|&v| v > 0);
    let s1 = f(image_size);
    let s2 = s1.and_then(f);
    let s3 = s2.and_then(f);
    match (s1, s2, s3) {
        (Some(a), Some(b), Some(c)) => Ok([image_size, a, b, c]),
        _ => Err(Error::ShapeMismatch(format!("image size {image_size} too small for the encoder"))),
    }
}

#[derive(Debug, Clone)]
pub struct Encoder<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub conv3: Conv2d<T>,
    pub conv4: Conv2d<T>,
    pub res1: Residual<T>,
    pub res2: Residual<T>,
    pub image_size: usize,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct EncoderTrace<T> {
    x: Tensor<T>,
    a1: Tensor<T>,
    a2: Tensor<T>,
    a3: Tensor<T>,
    z4: Tensor<T>,
    r1: ResidualTrace<T>,
    y1: Tensor<T>,
    r2: ResidualTrace<T>,
    out: Tensor<T>,
}

impl<T: Real> Encoder<T> {
    pub fn new(image_size: usize, channels: usize, rng: &mut Rng) -> Result<Self> {
        encoder_sizes(image_size)?;
        let c = channels;
        Ok(Encoder {
            conv1: Conv2d::new("encoder.conv1", 1, c, 4, 2, 1, rng),
            conv2: Conv2d::new("encoder.conv2", c, c, 4, 2, 1, rng),
            conv3: Conv2d::new("encoder.conv3", c, c, 4, 2, 1, rng),
            conv4: Conv2d::new("encoder.conv4", c, c, 3, 1, 1, rng),
            res1: Residual::new("encoder.res1", c, rng),
            res2: Residual::new("encoder.res2", c, rng),
            image_size,
            channels,
        })
    }

    pub fn grid(&self) -> usize {
        encoder_sizes(self.image_size).expect("validated at construction")[3]
    }

    pub fn positions(&self) -> usize {
        self.grid() * self.grid()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = self.image_size;
        if x.shape.len() != 4 || x.shape[1] != 1 || x.shape[2] != s || x.shape[3] != s {
            return Err(Error::ShapeMismatch(format!("encoder expects [B, 1, {s}, {s}], got {:?}", x.shape)));
        }
        Ok(())
    }

    /// `[B, C, g, g]` feature map after the final ReLU.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, EncoderTrace<T>)> {
        self.check_input(x)?;
        let a1 = relu(&self.conv1.forward(x));
        let a2 = relu(&self.conv2.forward(&a1));
        let a3 = relu(&self.conv3.forward(&a2));
        let z4 = self.conv4.forward(&a3);
        let (y1, r1) = self.res1.forward(&z4);
        let (y2, r2) = self.res2.forward(&y1);
        let out = relu(&y2);
        let tr = EncoderTrace { x: x.clone(), a1, a2, a3, z4, r1, y1, r2, out: out.clone() };
        Ok((out, tr))
    }

    pub fn backward(&mut self, tr: &EncoderTrace<T>, dout: &Tensor<T>) {
        let dy2 = relu_backward(&tr.out, dout);
        let dy1 = self.res2.backward(&tr.y1, &tr.r2, &dy2);
        let dz4 = self.res1.backward(&tr.z4, &tr.r1, &dy1);
        let da3 = self.conv4.backward(&tr.a3, &dz4, true).unwrap();
        let da2 = self.conv3.backward(&tr.a2, &relu_backward(&tr.a3, &da3), true).unwrap();
        let da1 = self.conv2.backward(&tr.a1, &relu_backward(&tr.a2, &da2), true).unwrap();
        self.conv1.backward(&tr.x, &relu_backward(&tr.a1, &da1), false);
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::new();
        for c in [&mut self.conv1, &mut self.conv2, &mut self.conv3, &mut self.conv4] {
            v.extend(c.params_mut());
        }
        v.extend(self.res1.params_mut());
        v.extend(self.res2.params_mut());
        v
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = Vec::new();
        for c in [&self.conv1, &self.conv2, &self.conv3, &self.conv4] {
            v.extend(c.params());
        }
        v.extend(self.res1.params());
        v.extend(self.res2.params());
        v
    }
}

#[derive(Debug, Clone)]
pub struct Decoder<T> {
    pub proj: Conv2d<T>,
    pub res1: Residual<T>,
    pub res2: Residual<T>,
    pub up1: ConvTranspose2d<T>,
    pub up2: ConvTranspose2d<T>,
    pub up3: ConvTranspose2d<T>,
    pub up4: ConvTranspose2d<T>,
}

#[derive(Debug, Clone)]
pub struct DecoderTrace<T> {
    e: Tensor<T>,
    p: Tensor<T>,
    r1: ResidualTrace<T>,
    y1: Tensor<T>,
    r2: ResidualTrace<T>,
    u: Tensor<T>,
    v1: Tensor<T>,
    v2: Tensor<T>,
    v3: Tensor<T>,
}

impl<T: Real> Decoder<T> {
    /// Output paddings come from the encoder's size chain so the round trip is exact.
    pub fn new(arch: &VqvaeArch, rng: &mut Rng) -> Result<Self> {
        let s = encoder_sizes(arch.image_size)?;
        let op = |from: usize, to: usize| to - ((from - 1) * 2 + 4 - 2);
        let c = arch.channels;
        Ok(Decoder {
            proj: Conv2d::new("decoder.proj", arch.code_dim, c, 1, 1, 0, rng),
            res1: Residual::new("decoder.res1", c, rng),
            res2: Residual::new("decoder.res2", c, rng),
            up1: ConvTranspose2d::new("decoder.up1", c, c, 3, 1, 1, 0, rng),
            up2: ConvTranspose2d::new("decoder.up2", c, c, 4, 2, 1, op(s[3], s[2]), rng),
            up3: ConvTranspose2d::new("decoder.up3", c, c, 4, 2, 1, op(s[2], s[1]), rng),
            up4: ConvTranspose2d::new("decoder.up4", c, 1, 4, 2, 1, op(s[1], s[0]), rng),
        })
    }

    pub fn forward(&self, e: &Tensor<T>) -> (Tensor<T>, DecoderTrace<T>) {
        let p = self.proj.forward(e);
        let (y1, r1) = self.res1.forward(&p);
        let (y2, r2) = self.res2.forward(&y1);
        let u = relu(&y2);
        let v1 = relu(&self.up1.forward(&u));
        let v2 = relu(&self.up2.forward(&v1));
        let v3 = relu(&self.up3.forward(&v2));
        let out = self.up4.forward(&v3);
        (out, DecoderTrace { e: e.clone(), p, r1, y1, r2, u, v1, v2, v3 })
    }

    /// Returns the gradient with respect to the decoder input.
    pub fn backward(&mut self, tr: &DecoderTrace<T>, dout: &Tensor<T>) -> Tensor<T> {
        let dv3 = self.up4.backward(&tr.v3, dout, true).unwrap();
        let dv2 = self.up3.backward(&tr.v2, &relu_backward(&tr.v3, &dv3), true).unwrap();
        let dv1 = self.up2.backward(&tr.v1, &relu_backward(&tr.v2, &dv2), true).unwrap();
        let du = self.up1.backward(&tr.u, &relu_backward(&tr.v1, &dv1), true).unwrap();
        let dy1 = self.res2.backward(&tr.y1, &tr.r2, &relu_backward(&tr.u, &du));
        let dp = self.res1.backward(&tr.p, &tr.r1, &dy1);
        self.proj.backward(&tr.e, &dp, true).unwrap()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.proj.params_mut();
        v.extend(self.res1.params_mut());
        v.extend(self.res2.params_mut());
        for u in [&mut self.up1, &mut self.up2, &mut self.up3, &mut self.up4] {
            v.extend(u.params_mut());
        }
        v
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.proj.params();
        v.extend(self.res1.params());
        v.extend(self.res2.params());
        for u in [&self.up1, &self.up2, &self.up3, &self.up4] {
            v.extend(u.params());
        }
        v
    }
}

/// Per-image latent vectors, `L×D` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub values: Vec<T>,
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
}

impl<T: Real> FeatureMap<T> {
    pub fn positions(&self) -> usize {
        self.rows * self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

/// Per-image codebook indices, row-major over the encoder grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeGrid {
    pub indices: Vec<usize>,
    pub rows: usize,
    pub cols: usize,
}

impl CodeGrid {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Index of the nearest codebook row; ties go to the lowest index.
pub fn nearest_code<T: Real>(h: &[T], codebook: &[T], dim: usize) -> usize {
    let mut best = (0, T::infinity());
    for (k, e) in codebook.chunks_exact(dim).enumerate() {
        let d: T = h.iter().zip(e).map(|(&a, &b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// Nearest-neighbor quantization of every row of `h`; returns the quantized rows and codes.
pub fn quantize<T: Real>(h: &FeatureMap<T>, codebook: &Param<T>) -> (Vec<T>, CodeGrid) {
    let d = h.dim;
    assert_eq!(codebook.shape[1], d, "codebook dimension");
    let mut e = Vec::with_capacity(h.values.len());
    let mut indices = Vec::with_capacity(h.positions());
    for i in 0..h.positions() {
        let k = nearest_code(h.row(i), &codebook.value, d);
        e.extend_from_slice(&codebook.value[k * d..(k + 1) * d]);
        indices.push(k);
    }
    (e, CodeGrid { indices, rows: h.rows, cols: h.cols })
}

/// Which loss terms contribute gradients in [`Vqvae::backward`].
#[derive(Debug, Clone, Copy)]
pub struct Terms {
    pub recon: bool,
    pub codebook: bool,
    pub commit: bool,
}

impl Terms {
    pub const ALL: Terms = Terms { recon: true, codebook: true, commit: true };
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct VqLoss {
    pub total: f64,
    pub recon: f64,
    pub codebook_term: f64,
    pub commit_term: f64,
}

pub struct VqForward<T> {
    z: Tensor<T>,
    etr: EncoderTrace<T>,
    /// Pre-quantization latents `[B, D, g, g]`.
    pub h: Tensor<T>,
    /// Quantized latents, same layout as `h`.
    pub e: Tensor<T>,
    pub codes: Vec<CodeGrid>,
    pub recon: Tensor<T>,
    dtr: DecoderTrace<T>,
}

#[derive(Debug, Clone)]
pub struct Vqvae<T> {
    pub arch: VqvaeArch,
    pub encoder: Encoder<T>,
    pub proj: Conv2d<T>,
    pub codebook: Param<T>,
    pub decoder: Decoder<T>,
}

impl<T: Real> Vqvae<T> {
    pub fn new(arch: &VqvaeArch, rng: &mut Rng) -> Result<Self> {
        if arch.codebook_size < 2 {
            return Err(Error::InvalidConfig("codebook size must be at least 2".into()));
        }
        let encoder = Encoder::new(arch.image_size, arch.channels, rng)?;
        let proj = Conv2d::new("proj", arch.channels, arch.code_dim, 1, 1, 0, rng);
        let mut codebook = Param::zeros("codebook", &[arch.codebook_size, arch.code_dim]);
        let bound = 1.0 / arch.codebook_size as f64;
        codebook.value.iter_mut().for_each(|v| *v = T::lit(rng.gen_range(-bound..bound)));
        let decoder = Decoder::new(arch, rng)?;
        Ok(Vqvae { arch: arch.clone(), encoder, proj, codebook, decoder })
    }

    pub fn grid(&self) -> usize {
        self.encoder.grid()
    }

    /// Latents `[B, D, g, g]` as per-image feature maps.
    pub fn encode(&self, x: &Tensor<T>) -> Result<Vec<FeatureMap<T>>> {
        let (z, _) = self.encoder.forward(x)?;
        Ok(self.to_feature_maps(&self.proj.forward(&z)))
    }

    fn to_feature_maps(&self, h: &Tensor<T>) -> Vec<FeatureMap<T>> {
        let [b, d, g, _] = h.dims4();
        let l = g * g;
        (0..b)
            .map(|i| {
                let src = h.item(i);
                let mut values = vec![T::zero(); l * d];
                for c in 0..d {
                    for p in 0..l {
                        values[p * d + c] = src[c * l + p];
                    }
                }
                FeatureMap { values, rows: g, cols: g, dim: d }
            })
            .collect()
    }

    /// Decoder input `[B, D, g, g]` from per-image quantized rows.
    pub fn to_latent_tensor(&self, rows: &[Vec<T>]) -> Tensor<T> {
        let (d, g) = (self.arch.code_dim, self.grid());
        let l = g * g;
        let mut t = Tensor::zeros(&[rows.len(), d, g, g]);
        for (i, r) in rows.iter().enumerate() {
            let dst = t.item_mut(i);
            for p in 0..l {
                for c in 0..d {
                    dst[c * l + p] = r[p * d + c];
                }
            }
        }
        t
    }

    pub fn decode(&self, e: &Tensor<T>) -> Result<Tensor<T>> {
        let (d, g) = (self.arch.code_dim, self.grid());
        if e.shape.len() != 4 || e.shape[1..] != [d, g, g] {
            return Err(Error::ShapeMismatch(format!("decoder expects [B, {d}, {g}, {g}], got {:?}", e.shape)));
        }
        Ok(self.decoder.forward(e).0)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<VqForward<T>> {
        let (z, etr) = self.encoder.forward(x)?;
        let h = self.proj.forward(&z);
        let maps = self.to_feature_maps(&h);
        let (rows, codes): (Vec<_>, Vec<_>) = maps.iter().map(|m| quantize(m, &self.codebook)).unzip();
        let e = self.to_latent_tensor(&rows);
        let (recon, dtr) = self.decoder.forward(&e);
        Ok(VqForward { z, etr, h, e, codes, recon, dtr })
    }

    /// Mean-reduced loss terms; `total = recon + codebook + beta * commit`.
    pub fn loss(&self, x: &Tensor<T>, f: &VqForward<T>) -> VqLoss {
        loss_terms(&x.data, &f.recon.data, &f.h.data, &f.e.data, self.arch.beta)
    }

    /// Accumulates gradients of the selected terms. The reconstruction gradient at the
    /// decoder input is passed to `h` unchanged (straight-through). Returns the gradient
    /// delivered to `h`.
    pub fn backward(&mut self, x: &Tensor<T>, f: &VqForward<T>, terms: Terms) -> Tensor<T> {
        let n_pix = T::lit(x.len() as f64);
        let n_lat = T::lit(f.h.len() as f64);
        let two = T::lit(2.0);
        let mut dh = Tensor::zeros(&f.h.shape);
        if terms.recon {
            let dr = Tensor {
                shape: f.recon.shape.clone(),
                data: f.recon.data.iter().zip(&x.data).map(|(&r, &s)| two * (r - s) / n_pix).collect(),
            };
            dh = self.decoder.backward(&f.dtr, &dr);
        }
        if terms.commit {
            let b = T::lit(self.arch.beta);
            for ((g, &h), &e) in dh.data.iter_mut().zip(&f.h.data).zip(&f.e.data) {
                *g += b * two * (h - e) / n_lat;
            }
        }
        if terms.codebook {
            let [_, d, g, _] = f.h.dims4();
            let l = g * g;
            for (i, grid) in f.codes.iter().enumerate() {
                let (hi, ei) = (f.h.item(i), f.e.item(i));
                for (p, &k) in grid.indices.iter().enumerate() {
                    for c in 0..d {
                        self.codebook.grad[k * d + c] += two * (ei[c * l + p] - hi[c * l + p]) / n_lat;
                    }
                }
            }
        }
        if terms.recon || terms.commit {
            let dz = self.proj.backward(&f.z, &dh, true).unwrap();
            self.encoder.backward(&f.etr, &dz);
        }
        dh
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.encoder.params_mut();
        v.extend(self.proj.params_mut());
        v.push(&mut self.codebook);
        v.extend(self.decoder.params_mut());
        v
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.encoder.params();
        v.extend(self.proj.params());
        v.push(&self.codebook);
        v.extend(self.decoder.params());
        v
    }

    /// Code grids for every frame, computed in batches.
    pub fn code_grids(&self, frames: &Frames) -> Result<Vec<CodeGrid>> {
        let mut out = Vec::with_capacity(frames.len());
        let idx: Vec<usize> = (0..frames.len()).collect();
        for chunk in idx.chunks(256) {
            let x = batch_tensor::<T>(frames, chunk);
            let (z, _) = self.encoder.forward(&x)?;
            for m in self.to_feature_maps(&self.proj.forward(&z)) {
                out.push(quantize(&m, &self.codebook).1);
            }
        }
        Ok(out)
    }
}

/// `recon + codebook + beta * commit`, each squared norm mean-reduced. The codebook and commitment terms share a
/// value and differ only in where their gradients flow.
pub fn loss_terms<T: Real>(x: &[T], recon: &[T], h: &[T], e: &[T], beta: f64) -> VqLoss {
    let mse = |a: &[T], b: &[T]| a.iter().zip(b).map(|(&u, &v)| (u - v).to_f64().unwrap().powi(2)).sum::<f64>() / a.len() as f64;
    let recon = mse(recon, x);
    let gap = mse(h, e);
    VqLoss { total: recon + gap + beta * gap, recon, codebook_term: gap, commit_term: gap }
}

/// `[B, 1, S, S]` tensor of the selected frames, scaled to `[0, 1]`.
pub fn batch_tensor<T: Real>(frames: &Frames, idx: &[usize]) -> Tensor<T> {
    let s = frames.size;
    let mut t = Tensor::zeros(&[idx.len(), 1, s, s]);
    let scale = T::lit(1.0 / 255.0);
    for (j, &i) in idx.iter().enumerate() {
        for (v, &p) in t.item_mut(j).iter_mut().zip(frames.frame(i)) {
            *v = T::lit(p as f64) * scale;
        }
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Optimizer steps per epoch; 0 means one pass over the data.
    pub steps_per_epoch: usize,
    pub seed: u64,
}

impl Default for VqTrainConfig {
    fn default() -> Self {
        VqTrainConfig { epochs: 30, batch: 256, lr: 3e-4, steps_per_epoch: 0, seed: 0 }
    }
}

/// Shuffled index stream that reshuffles after every pass.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl BatchSampler {
    pub fn new(n: usize, rng: Rng) -> Self {
        let mut s = BatchSampler { order: (0..n).collect(), pos: n, rng };
        s.pos = s.order.len();
        s
    }

    pub fn next_batch(&mut self, b: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(b);
        while out.len() < b {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let take = (b - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

pub fn steps_per_epoch(n: usize, batch: usize, configured: usize) -> usize {
    if configured > 0 {
        configured
    } else {
        n.div_ceil(batch.max(1)).max(1)
    }
}

/// Trains with Adam; `on_epoch` receives the epoch index and mean losses.
pub fn train_vqvae(
    frames: &Frames,
    arch: &VqvaeArch,
    cfg: &VqTrainConfig,
    mut on_epoch: impl FnMut(usize, &VqLoss),
) -> Result<Vqvae<f32>> {
    if frames.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if arch.image_size != frames.size {
        return Err(Error::ShapeMismatch(format!("arch image size {} vs frames {}", arch.image_size, frames.size)));
    }
    let mut model = Vqvae::<f32>::new(arch, &mut substream(cfg.seed, "vqvae.init"))?;
    let mut opt = Adam::new(cfg.lr);
    let mut sampler = BatchSampler::new(frames.len(), substream(cfg.seed, "vqvae.batches"));
    let spe = steps_per_epoch(frames.len(), cfg.batch, cfg.steps_per_epoch);
    for epoch in 0..cfg.epochs {
        let mut acc = VqLoss::default();
        for _ in 0..spe {
            let x = batch_tensor::<f32>(frames, &sampler.next_batch(cfg.batch));
            let f = model.forward(&x)?;
            let l = model.loss(&x, &f);
            model.params_mut().iter_mut().for_each(|p| p.zero_grad());
            model.backward(&x, &f, Terms::ALL);
            opt.step(&mut model.params_mut());
            acc.total += l.total / spe as f64;
            acc.recon += l.recon / spe as f64;
            acc.codebook_term += l.codebook_term / spe as f64;
            acc.commit_term += l.commit_term / spe as f64;
        }
        on_epoch(epoch, &acc);
    }
    Ok(model)
}
