//! Behavioral-cloning policy: convolutional encoder `f`, a 512-unit head, the BC and
//! OREO losses, and the training loop.

use serde::{Deserialize, Serialize};

use crate::demodata::{Frames, Observation};
use crate::error::{Error, Result};
use crate::nn::{log_softmax, relu, relu_backward, Adam, Linear, Param, Real, Tensor};
use crate::regularizers::{self, RegularizerConfig, RegularizerKind};
use crate::rng::{substream, Rng};
use crate::vqvae::{steps_per_epoch, BatchSampler, CodeGrid, Encoder, EncoderTrace, Vqvae};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyArch {
    pub image_size: usize,
    pub channels: usize,
    pub action_count: usize,
    pub hidden: usize,
    pub frame_stack: usize,
}

impl Default for PolicyArch {
    fn default() -> Self {
        PolicyArch { image_size: 84, channels: 256, action_count: 3, hidden: 512, frame_stack: 1 }
    }
}

#[derive(Debug, Clone)]
pub struct Policy<T> {
    pub arch: PolicyArch,
    pub encoder: Encoder<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

pub struct FeatureTrace<T> {
    /// `[B·n, C, g, g]` encoder output.
    pub features: Tensor<T>,
    trace: EncoderTrace<T>,
}

impl<T: Real> Policy<T> {
    pub fn new(arch: &PolicyArch, rng: &mut Rng) -> Result<Self> {
        let encoder = Encoder::new(arch.image_size, arch.channels, rng)?;
        Self::with_encoder(arch, encoder, rng)
    }

    fn with_encoder(arch: &PolicyArch, encoder: Encoder<T>, rng: &mut Rng) -> Result<Self> {
        if arch.frame_stack == 0 || arch.action_count < 2 {
            return Err(Error::InvalidConfig("frame_stack must be ≥ 1 and action_count ≥ 2".into()));
        }
        let width = arch.frame_stack * arch.channels * encoder.positions();
        Ok(Policy {
            arch: arch.clone(),
            fc1: Linear::new("head.fc1", width, arch.hidden, rng),
            fc2: Linear::new("head.fc2", arch.hidden, arch.action_count, rng),
            encoder,
        })
    }

    /// Copies the VQ-VAE encoder (everything before its code projection) and draws a fresh head.
    pub fn init_from_vqvae(vq: &Vqvae<T>, arch: &PolicyArch, rng: &mut Rng) -> Result<Self> {
        if vq.arch.image_size != arch.image_size || vq.arch.channels != arch.channels {
            return Err(Error::ArchitectureMismatch(format!(
                "policy wants {}px/{}ch, VQ-VAE has {}px/{}ch",
                arch.image_size, arch.channels, vq.arch.image_size, vq.arch.channels
            )));
        }
        Self::with_encoder(arch, vq.encoder.clone(), rng)
    }

    pub fn positions(&self) -> usize {
        self.encoder.positions()
    }

    /// Width of the flattened head input.
    pub fn feature_len(&self) -> usize {
        self.arch.frame_stack * self.arch.channels * self.positions()
    }

    /// `x` is `[B·n, 1, S, S]` with each item's `n` frames consecutive.
    pub fn features(&self, x: &Tensor<T>) -> Result<FeatureTrace<T>> {
        if x.shape[0] % self.arch.frame_stack != 0 {
            return Err(Error::ShapeMismatch(format!("{} frames is not a multiple of the stack size", x.shape[0])));
        }
        let (features, trace) = self.encoder.forward(x)?;
        Ok(FeatureTrace { features, trace })
    }

    fn head_input(&self, ft: &FeatureTrace<T>, mult: Option<&[T]>) -> Tensor<T> {
        let b = ft.features.shape[0] / self.arch.frame_stack;
        let mut h = Tensor { shape: vec![b, self.feature_len()], data: ft.features.data.clone() };
        if let Some(m) = mult {
            h.data.iter_mut().zip(m).for_each(|(v, &k)| *v = *v * k);
        }
        h
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let ft = self.features(x)?;
        let h = self.head_input(&ft, None);
        Ok(self.fc2.forward(&relu(&self.fc1.forward(&h))))
    }

    pub fn probabilities(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(log_softmax(&self.logits(x)?).map(|v| v.exp()))
    }

    /// Greedy actions; ties go to the lowest index.
    pub fn act_batch(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let p = self.probabilities(x)?;
        Ok(p.data.chunks(self.arch.action_count).map(argmax).collect())
    }

    /// Greedy action for one stack of observations (oldest first).
    pub fn act(&self, stack: &[&Observation]) -> Result<usize> {
        Ok(self.act_batch(&observations_tensor(stack))?[0])
    }

    pub fn bc_loss(&self, x: &Tensor<T>, actions: &[usize]) -> Result<f64> {
        let ft = self.features(x)?;
        Ok(self.head_loss(&ft, actions, None)?.0)
    }

    /// Mean over `num_masks` code-mask draws of the masked BC loss.
    pub fn oreo_loss(
        &self,
        x: &Tensor<T>,
        actions: &[usize],
        grids: &[&CodeGrid],
        codebook_size: usize,
        cfg: &RegularizerConfig,
        rng: &mut Rng,
    ) -> Result<f64> {
        let mults = self.oreo_multipliers(grids, codebook_size, cfg, rng)?;
        self.masked_loss(x, actions, &mults)
    }

    /// Loss averaged over fixed feature multipliers; plain BC when `mults` is empty.
    pub fn masked_loss(&self, x: &Tensor<T>, actions: &[usize], mults: &[Vec<T>]) -> Result<f64> {
        let ft = self.features(x)?;
        if mults.is_empty() {
            return Ok(self.head_loss(&ft, actions, None)?.0);
        }
        let mut total = 0.0;
        for m in mults {
            total += self.head_loss(&ft, actions, Some(m))?.0;
        }
        Ok(total / mults.len() as f64)
    }

    /// Mean NLL and its gradient with respect to the logits.
    fn head_loss(&self, ft: &FeatureTrace<T>, actions: &[usize], mult: Option<&[T]>) -> Result<(f64, HeadCache<T>)> {
        let h = self.head_input(ft, mult);
        let b = h.shape[0];
        if actions.len() != b {
            return Err(Error::ShapeMismatch(format!("{} actions for a batch of {b}", actions.len())));
        }
        let pre = self.fc1.forward(&h);
        let hid = relu(&pre);
        let logits = self.fc2.forward(&hid);
        let lp = log_softmax(&logits);
        let a_n = self.arch.action_count;
        let mut loss = 0.0;
        let mut dlogits = Tensor::zeros(&logits.shape);
        let inv_b = T::lit(1.0 / b as f64);
        for (i, &a) in actions.iter().enumerate() {
            if a >= a_n {
                return Err(Error::InvalidAction(a));
            }
            let row = &lp.data[i * a_n..(i + 1) * a_n];
            loss -= row[a].to_f64().unwrap();
            for (j, g) in dlogits.data[i * a_n..(i + 1) * a_n].iter_mut().enumerate() {
                let onehot = if j == a { T::one() } else { T::zero() };
                *g = (row[j].exp() - onehot) * inv_b;
            }
        }
        Ok((loss / b as f64, HeadCache { h, hid, dlogits }))
    }

    /// Loss averaged over the given feature multipliers (plain BC when empty), with gradients
    /// accumulated into every parameter. The encoder runs once; the head once per multiplier.
    pub fn loss_and_grad(&mut self, x: &Tensor<T>, actions: &[usize], mults: &[Vec<T>]) -> Result<f64> {
        let ft = self.features(x)?;
        let runs: Vec<Option<&[T]>> = if mults.is_empty() { vec![None] } else { mults.iter().map(|m| Some(&m[..])).collect() };
        let scale = T::lit(1.0 / runs.len() as f64);
        let mut dfeat = Tensor::zeros(&ft.features.shape);
        let mut total = 0.0;
        for m in &runs {
            let (loss, mut cache) = self.head_loss(&ft, actions, *m)?;
            total += loss;
            cache.dlogits.data.iter_mut().for_each(|g| *g = *g * scale);
            let dhid = self.fc2.backward(&cache.hid, &cache.dlogits, true).unwrap();
            let dpre = relu_backward(&cache.hid, &dhid);
            let dh = self.fc1.backward(&cache.h, &dpre, true).unwrap();
            match m {
                Some(m) => dfeat.data.iter_mut().zip(&dh.data).zip(m.iter()).for_each(|((d, &g), &k)| *d += g * k),
                None => dfeat.data.iter_mut().zip(&dh.data).for_each(|(d, &g)| *d += g),
            }
        }
        self.encoder.backward(&ft.trace, &dfeat);
        Ok(total / runs.len() as f64)
    }

    /// `num_masks` OREO multipliers for a batch; `grids` holds one grid per frame (`B·n`).
    pub fn oreo_multipliers(
        &self,
        grids: &[&CodeGrid],
        codebook_size: usize,
        cfg: &RegularizerConfig,
        rng: &mut Rng,
    ) -> Result<Vec<Vec<T>>> {
        let (n, c, l) = (self.arch.frame_stack, self.arch.channels, self.positions());
        if let Some((i, g)) = grids.iter().enumerate().find(|(_, g)| g.len() != l) {
            return Err(Error::ShapeMismatch(format!("code grid {i} has {} cells, feature grid has {l}", g.len())));
        }
        let b = grids.len() / n;
        let mut out = Vec::with_capacity(cfg.num_masks);
        for _ in 0..cfg.num_masks {
            let mut mult = vec![T::zero(); b * n * c * l];
            for item in 0..b {
                let frames = &grids[item * n..(item + 1) * n];
                let masks = if cfg.stacked {
                    regularizers::stacked_oreo_mask(frames, codebook_size, cfg.p, rng)?
                } else {
                    frames.iter().map(|g| regularizers::oreo_mask(g, codebook_size, cfg.p, rng)).collect::<Result<_>>()?
                };
                for (f, mask) in masks.iter().enumerate() {
                    let scaled = mask.scaled();
                    let base = (item * n + f) * c * l;
                    for ch in 0..c {
                        for (pos, &s) in scaled.iter().enumerate() {
                            mult[base + ch * l + pos] = T::lit(s);
                        }
                    }
                }
            }
            out.push(mult);
        }
        Ok(out)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.encoder.params_mut();
        v.extend(self.fc1.params_mut());
        v.extend(self.fc2.params_mut());
        v
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.encoder.params();
        v.extend(self.fc1.params());
        v.extend(self.fc2.params());
        v
    }
}

struct HeadCache<T> {
    h: Tensor<T>,
    hid: Tensor<T>,
    dlogits: Tensor<T>,
}

pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn observations_tensor<T: Real>(obs: &[&Observation]) -> Tensor<T> {
    let s = obs[0].size;
    let mut t = Tensor::zeros(&[obs.len(), 1, s, s]);
    let scale = T::lit(1.0 / 255.0);
    for (i, o) in obs.iter().enumerate() {
        for (v, &p) in t.item_mut(i).iter_mut().zip(&o.pixels) {
            *v = T::lit(p as f64) * scale;
        }
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcConfig {
    pub regularizer: RegularizerConfig,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Optimizer steps per epoch; 0 means one pass over the data.
    pub steps_per_epoch: usize,
    pub seed: u64,
    pub hidden: usize,
    pub channels: usize,
    pub frame_stack: usize,
    /// Run the deployment evaluation every this many epochs; 0 disables it.
    pub eval_every: usize,
}

impl Default for BcConfig {
    fn default() -> Self {
        BcConfig {
            regularizer: RegularizerConfig::default(),
            lr: 3e-4,
            batch: 256,
            epochs: 100,
            steps_per_epoch: 0,
            seed: 0,
            hidden: 512,
            channels: 256,
            frame_stack: 1,
            eval_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub eval_score: Option<f64>,
}

/// Fraction of frames where the greedy action equals the recorded action.
pub fn validation_accuracy(policy: &Policy<f32>, frames: &Frames) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = policy.arch.frame_stack;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..frames.len()).collect();
    for chunk in idx.chunks(256) {
        let stacked: Vec<usize> = chunk.iter().flat_map(|&i| frames.stack(i, n)).collect();
        let x = crate::vqvae::batch_tensor::<f32>(frames, &stacked);
        for (&i, a) in chunk.iter().zip(policy.act_batch(&x)?) {
            correct += (a == frames.actions[i]) as usize;
        }
    }
    Ok(correct as f64 / frames.len() as f64)
}

/// BC training. With `kind = oreo` the encoder starts from the VQ-VAE and each batch is
/// averaged over `num_masks` code masks; other kinds apply their own regularizer.
/// `eval` is called on scheduled epochs and should return the deployment score.
pub fn train_bc(
    train: &Frames,
    val: &Frames,
    cfg: &BcConfig,
    vqvae: Option<&Vqvae<f32>>,
    mut eval: impl FnMut(&Policy<f32>) -> Result<f64>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Policy<f32>> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let reg = &cfg.regularizer;
    reg.validate(train.size)?;
    let arch = PolicyArch {
        image_size: train.size,
        channels: cfg.channels,
        action_count: 3,
        hidden: cfg.hidden,
        frame_stack: cfg.frame_stack,
    };
    let mut init_rng = substream(cfg.seed, "bc.init");
    let (mut policy, codes) = if reg.kind == RegularizerKind::Oreo {
        let vq = vqvae.ok_or(Error::MissingVqvae)?;
        (Policy::init_from_vqvae(vq, &arch, &mut init_rng)?, Some((vq.code_grids(train)?, vq.arch.codebook_size)))
    } else {
        (Policy::new(&arch, &mut init_rng)?, None)
    };
    let mut opt = Adam::new(cfg.lr);
    let mut sampler = BatchSampler::new(train.len(), substream(cfg.seed, "bc.batches"));
    let mut mask_rng = substream(cfg.seed, "bc.masks");
    let spe = steps_per_epoch(train.len(), cfg.batch, cfg.steps_per_epoch);
    let total_steps = (spe * cfg.epochs).max(1);
    let n = cfg.frame_stack;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        for _ in 0..spe {
            let items = sampler.next_batch(cfg.batch);
            let stacked: Vec<usize> = items.iter().flat_map(|&i| train.stack(i, n)).collect();
            let actions: Vec<usize> = items.iter().map(|&i| train.actions[i]).collect();
            let x = image_batch(train, &stacked, reg, &mut mask_rng)?;
            let mults = match reg.kind {
                RegularizerKind::Oreo => {
                    let (grids, k) = codes.as_ref().expect("codes computed for oreo");
                    let g: Vec<&CodeGrid> = stacked.iter().map(|&i| &grids[i]).collect();
                    policy.oreo_multipliers(&g, *k, reg, &mut mask_rng)?
                }
                RegularizerKind::Dropout => {
                    let m = regularizers::unit_dropout(items.len() * policy.feature_len(), reg.p, &mut mask_rng)?;
                    vec![m.into_iter().map(|v| v as f32).collect()]
                }
                RegularizerKind::Dropblock => {
                    let progress = step as f64 / total_steps as f64;
                    let g = policy.encoder.grid();
                    let per = items.len() * n;
                    let mut m = Vec::with_capacity(per * cfg.channels * g * g);
                    for _ in 0..per {
                        m.extend(
                            regularizers::block_dropout(cfg.channels, g, reg.p, reg.block_size, progress, &mut mask_rng)?
                                .into_iter()
                                .map(|v| v as f32),
                        );
                    }
                    vec![m]
                }
                _ => Vec::new(),
            };
            policy.params_mut().iter_mut().for_each(|p| p.zero_grad());
            loss_sum += policy.loss_and_grad(&x, &actions, &mults)?;
            opt.step(&mut policy.params_mut());
            step += 1;
        }
        let eval_score =
            if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 { Some(eval(&policy)?) } else { None };
        let val_accuracy = if val.is_empty() { f64::NAN } else { validation_accuracy(&policy, val)? };
        on_epoch(&EpochRecord { epoch, train_loss: loss_sum / spe as f64, val_accuracy, eval_score });
    }
    Ok(policy)
}

/// Batch tensor with image-space augmentation (cutout, random shift) applied per frame.
fn image_batch(frames: &Frames, idx: &[usize], reg: &RegularizerConfig, rng: &mut Rng) -> Result<Tensor<f32>> {
    match reg.kind {
        RegularizerKind::Cutout | RegularizerKind::RandomShift => {
            let obs = idx
                .iter()
                .map(|&i| {
                    let o = frames.observation(i);
                    if reg.kind == RegularizerKind::Cutout {
                        regularizers::cutout(&o, reg.patch_min, reg.patch_max, rng)
                    } else {
                        Ok(regularizers::random_shift(&o, reg.shift_pad, rng))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(observations_tensor(&obs.iter().collect::<Vec<_>>()))
        }
        _ => Ok(crate::vqvae::batch_tensor(frames, idx)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::vqvae::VqvaeArch;

    fn tiny_arch() -> PolicyArch {
        PolicyArch { image_size: 16, channels: 3, action_count: 3, hidden: 8, frame_stack: 1 }
    }

    fn frames(n: usize, size: usize, seed: u64) -> Frames {
        use rand::Rng as _;
        let mut r = seeded(seed);
        Frames::from_pixels(
            size,
            (0..n * size * size).map(|_| r.gen_range(0..=255u8)).collect(),
            (0..n).map(|_| r.gen_range(0..3)).collect(),
        )
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[1.0 / 3.0; 3]), 0);
    }

    #[test]
    fn uniform_policy_loss_is_ln3() {
        let mut p = Policy::<f64>::new(&tiny_arch(), &mut seeded(0)).unwrap();
        p.fc2.weight.value.iter_mut().for_each(|v| *v = 0.0);
        p.fc2.bias.value.iter_mut().for_each(|v| *v = 0.0);
        let f = frames(4, 16, 1);
        let x = crate::vqvae::batch_tensor::<f64>(&f, &[0, 1, 2, 3]);
        assert!((p.bc_loss(&x, &f.actions).unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_policy_has_near_zero_loss() {
        let mut p = Policy::<f64>::new(&tiny_arch(), &mut seeded(0)).unwrap();
        p.fc2.weight.value.iter_mut().for_each(|v| *v = 0.0);
        p.fc2.bias.value = vec![0.0, 800.0, 0.0];
        let f = frames(2, 16, 1);
        let x = crate::vqvae::batch_tensor::<f64>(&f, &[0, 1]);
        assert!(p.bc_loss(&x, &[1, 1]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn probabilities_are_a_distribution() {
        let p = Policy::<f32>::new(&tiny_arch(), &mut seeded(2)).unwrap();
        let f = frames(5, 16, 3);
        let pr = p.probabilities(&crate::vqvae::batch_tensor(&f, &[0, 1, 2, 3, 4])).unwrap();
        for row in pr.data.chunks(3) {
            assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn init_from_vqvae_copies_encoder_and_draws_fresh_head() {
        let va = VqvaeArch { image_size: 16, channels: 3, code_dim: 2, codebook_size: 4, beta: 0.25 };
        let vq = Vqvae::<f64>::new(&va, &mut seeded(5)).unwrap();
        let a = Policy::init_from_vqvae(&vq, &tiny_arch(), &mut seeded(1)).unwrap();
        let b = Policy::init_from_vqvae(&vq, &tiny_arch(), &mut seeded(2)).unwrap();
        let f = frames(2, 16, 4);
        let x = crate::vqvae::batch_tensor::<f64>(&f, &[0, 1]);
        assert_eq!(a.features(&x).unwrap().features, vq.encoder.forward(&x).unwrap().0);
        assert_ne!(a.logits(&x).unwrap(), b.logits(&x).unwrap());
        let wrong = PolicyArch { channels: 4, ..tiny_arch() };
        assert!(matches!(Policy::init_from_vqvae(&vq, &wrong, &mut seeded(1)), Err(Error::ArchitectureMismatch(_))));
    }

    #[test]
    fn oreo_with_p_zero_equals_bc() {
        let p = Policy::<f64>::new(&tiny_arch(), &mut seeded(3)).unwrap();
        let f = frames(3, 16, 5);
        let x = crate::vqvae::batch_tensor::<f64>(&f, &[0, 1, 2]);
        let g = CodeGrid { indices: vec![0, 1, 0, 2], rows: 2, cols: 2 };
        let cfg = RegularizerConfig { p: 0.0, ..RegularizerConfig::for_kind(RegularizerKind::Oreo) };
        let oreo = p.oreo_loss(&x, &f.actions, &[&g, &g, &g], 3, &cfg, &mut seeded(0)).unwrap();
        assert_eq!(oreo, p.bc_loss(&x, &f.actions).unwrap());
    }

    #[test]
    fn oreo_loss_is_the_mean_of_single_mask_losses() {
        let p = Policy::<f64>::new(&tiny_arch(), &mut seeded(3)).unwrap();
        let f = frames(3, 16, 6);
        let x = crate::vqvae::batch_tensor::<f64>(&f, &[0, 1, 2]);
        let g = CodeGrid { indices: vec![0, 1, 2, 3], rows: 2, cols: 2 };
        let grids = [&g, &g, &g];
        let five = RegularizerConfig::for_kind(RegularizerKind::Oreo);
        let one = RegularizerConfig { num_masks: 1, ..five.clone() };
        let a = p.oreo_loss(&x, &f.actions, &grids, 4, &five, &mut seeded(11)).unwrap();
        let mut rng = seeded(11);
        let b: f64 = (0..5).map(|_| p.oreo_loss(&x, &f.actions, &grids, 4, &one, &mut rng).unwrap()).sum::<f64>() / 5.0;
        assert!((a - b).abs() < 1e-12);
        let again = p.oreo_loss(&x, &f.actions, &grids, 4, &one, &mut seeded(1)).unwrap();
        assert_eq!(again, p.oreo_loss(&x, &f.actions, &grids, 4, &one, &mut seeded(1)).unwrap());
    }

    #[test]
    fn mask_positions_align_with_feature_positions() {
        // Dropping only code 1 must zero exactly the feature cells whose grid position holds code 1.
        let p = Policy::<f64>::new(&tiny_arch(), &mut seeded(3)).unwrap();
        let g = CodeGrid { indices: vec![0, 1, 0, 0], rows: 2, cols: 2 };
        let cfg = RegularizerConfig { num_masks: 1, ..RegularizerConfig::for_kind(RegularizerKind::Oreo) };
        let mut rng = seeded(0);
        for _ in 0..20 {
            let m = &p.oreo_multipliers(&[&g], 2, &cfg, &mut rng).unwrap()[0];
            for ch in 0..3 {
                assert_eq!(m[ch * 4], m[ch * 4 + 2]);
                assert_eq!(m[ch * 4], m[ch * 4 + 3]);
                assert_eq!(m[ch * 4 + 1], m[1]);
            }
        }
    }

    #[test]
    fn training_memorizes_ten_samples() {
        let f = frames(10, 16, 8);
        let cfg = BcConfig { batch: 10, epochs: 200, channels: 4, hidden: 32, lr: 1e-3, ..BcConfig::default() };
        let mut last = f64::INFINITY;
        train_bc(&f, &Frames::default(), &cfg, None, |_| Ok(0.0), |r| last = r.train_loss).unwrap();
        assert!(last < 0.05, "final loss {last}");
    }

    #[test]
    fn oreo_training_requires_a_vqvae() {
        let f = frames(4, 16, 8);
        let cfg = BcConfig {
            regularizer: RegularizerConfig::for_kind(RegularizerKind::Oreo),
            channels: 3,
            ..BcConfig::default()
        };
        let r = train_bc(&f, &Frames::default(), &cfg, None, |_| Ok(0.0), |_| {});
        assert!(matches!(r, Err(Error::MissingVqvae)));
        assert!(matches!(
            train_bc(&Frames::default(), &f, &cfg, None, |_| Ok(0.0), |_| {}),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn encoder_weights_move_after_one_step() {
        let va = VqvaeArch { image_size: 16, channels: 3, code_dim: 2, codebook_size: 4, beta: 0.25 };
        let vq = Vqvae::<f32>::new(&va, &mut seeded(5)).unwrap();
        let f = frames(8, 16, 9);
        let cfg = BcConfig {
            regularizer: RegularizerConfig::for_kind(RegularizerKind::Oreo),
            channels: 3,
            hidden: 8,
            batch: 8,
            epochs: 1,
            steps_per_epoch: 1,
            ..BcConfig::default()
        };
        let p = train_bc(&f, &Frames::default(), &cfg, Some(&vq), |_| Ok(0.0), |_| {}).unwrap();
        let norm = |v: &[f32]| v.iter().map(|x| x * x).sum::<f32>();
        assert_ne!(norm(&p.encoder.conv1.weight.value), norm(&vq.encoder.conv1.weight.value));
    }

    #[test]
    fn stacked_policy_runs_end_to_end() {
        let f = frames(6, 16, 10);
        for kind in [RegularizerKind::Dropout, RegularizerKind::Dropblock, RegularizerKind::Cutout, RegularizerKind::RandomShift] {
            let mut reg = RegularizerConfig::for_kind(kind);
            reg.patch_min = 2;
            reg.patch_max = 6;
            let cfg = BcConfig { regularizer: reg, channels: 2, hidden: 4, batch: 3, epochs: 1, frame_stack: 2, ..BcConfig::default() };
            let p = train_bc(&f, &f, &cfg, None, |_| Ok(0.0), |r| assert!(r.train_loss.is_finite())).unwrap();
            assert_eq!(p.feature_len(), 2 * 2 * 4);
        }
    }
}
