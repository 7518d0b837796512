//! OREO code masks and the baseline regularizers (unit dropout, DropBlock,
//! Cutout, RandomShift).
//!
//! Feature-space regularizers produce a multiplier per feature unit; the policy
//! multiplies its flattened feature map by it before the head.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::demodata::Observation;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::vqvae::CodeGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegularizerKind {
    Oreo,
    Dropout,
    Dropblock,
    Cutout,
    RandomShift,
    None,
}

impl FromStr for RegularizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "oreo" => Self::Oreo,
            "dropout" => Self::Dropout,
            "dropblock" => Self::Dropblock,
            "cutout" => Self::Cutout,
            "randomshift" | "random_shift" => Self::RandomShift,
            "none" => Self::None,
            _ => return Err(Error::InvalidConfig(format!("unknown regularizer {s:?}"))),
        })
    }
}

impl fmt::Display for RegularizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Oreo => "oreo",
            Self::Dropout => "dropout",
            Self::Dropblock => "dropblock",
            Self::Cutout => "cutout",
            Self::RandomShift => "randomshift",
            Self::None => "none",
        })
    }
}

impl RegularizerKind {
    pub fn default_p(self) -> f64 {
        match self {
            Self::Dropblock => 0.3,
            _ => 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    pub kind: RegularizerKind,
    pub p: f64,
    pub block_size: usize,
    pub patch_min: usize,
    pub patch_max: usize,
    pub shift_pad: usize,
    pub num_masks: usize,
    /// Share one code draw across all stacked frames.
    pub stacked: bool,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self::for_kind(RegularizerKind::None)
    }
}

impl RegularizerConfig {
    pub fn for_kind(kind: RegularizerKind) -> Self {
        RegularizerConfig {
            kind,
            p: kind.default_p(),
            block_size: 3,
            patch_min: 10,
            patch_max: 30,
            shift_pad: 4,
            num_masks: 5,
            stacked: true,
        }
    }

    pub fn validate(&self, image_size: usize) -> Result<()> {
        check_p(self.p)?;
        let cutout = self.kind == RegularizerKind::Cutout;
        if cutout && (self.patch_min == 0 || self.patch_min > self.patch_max || self.patch_max > image_size) {
            return Err(Error::InvalidConfig(format!(
                "cutout patch range [{}, {}] invalid for image size {image_size}",
                self.patch_min, self.patch_max
            )));
        }
        if self.num_masks == 0 || self.block_size == 0 {
            return Err(Error::InvalidConfig("num_masks and block_size must be positive".into()));
        }
        Ok(())
    }
}

fn check_p(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidProbability(p))
    }
}

/// Binary keep-mask over the L grid positions, shared by every channel.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTensor {
    pub bits: Vec<bool>,
    pub drop_probability: f64,
}

impl MaskTensor {
    /// Per-position multiplier `M_i / (1 - p)`.
    pub fn scaled(&self) -> Vec<f64> {
        let s = 1.0 / (1.0 - self.drop_probability);
        self.bits.iter().map(|&b| if b { s } else { 0.0 }).collect()
    }
}

/// `m_k ~ Bernoulli(1 - p)` for each of the `k` codes.
pub fn sample_code_bits(k: usize, p: f64, rng: &mut Rng) -> Result<Vec<bool>> {
    check_p(p)?;
    Ok((0..k).map(|_| rng.gen::<f64>() >= p).collect())
}

/// `M_i = m_{q(i)}`.
pub fn mask_from_bits(grid: &CodeGrid, bits: &[bool], p: f64) -> MaskTensor {
    MaskTensor { bits: grid.indices.iter().map(|&q| bits[q]).collect(), drop_probability: p }
}

pub fn oreo_mask(grid: &CodeGrid, codebook_size: usize, p: f64, rng: &mut Rng) -> Result<MaskTensor> {
    let bits = sample_code_bits(codebook_size, p, rng)?;
    Ok(mask_from_bits(grid, &bits, p))
}

/// One shared draw of `{m_k}` applied to every frame of a stack.
pub fn stacked_oreo_mask(grids: &[&CodeGrid], codebook_size: usize, p: f64, rng: &mut Rng) -> Result<Vec<MaskTensor>> {
    if let Some(first) = grids.first() {
        if grids.iter().any(|g| g.len() != first.len()) {
            return Err(Error::ShapeMismatch("stacked code grids differ in length".into()));
        }
    }
    let bits = sample_code_bits(codebook_size, p, rng)?;
    Ok(grids.iter().map(|g| mask_from_bits(g, &bits, p)).collect())
}

/// Applies a mask to a channel-major `[C, L]` feature map. Identity when not training.
pub fn apply_mask(feature: &[f64], channels: usize, mask: &MaskTensor, training: bool) -> Result<Vec<f64>> {
    let l = mask.bits.len();
    if feature.len() != channels * l {
        return Err(Error::ShapeMismatch(format!("feature has {} values, mask expects {channels}×{l}", feature.len())));
    }
    if !training {
        return Ok(feature.to_vec());
    }
    let m = mask.scaled();
    Ok(feature.iter().enumerate().map(|(i, &v)| v * m[i % l]).collect())
}

/// i.i.d. unit dropout multipliers, kept units scaled by `1 / (1 - p)`.
pub fn unit_dropout(n: usize, p: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    check_p(p)?;
    let s = 1.0 / (1.0 - p);
    Ok((0..n).map(|_| if rng.gen::<f64>() >= p { s } else { 0.0 }).collect())
}

/// Effective DropBlock rate under the linear schedule.
pub fn dropblock_rate(p_target: f64, progress: f64) -> f64 {
    progress.clamp(0.0, 1.0) * p_target
}

/// DropBlock multipliers for a `[C, g, g]` map: block seeds are drawn where a whole
/// block fits, each seed zeroes a `block×block` square, and survivors are rescaled
/// by `total / kept`.
pub fn block_dropout(channels: usize, grid: usize, p_target: f64, block: usize, progress: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    check_p(p_target)?;
    let p = dropblock_rate(p_target, progress);
    let n = channels * grid * grid;
    let mut keep = vec![true; n];
    let bs = block.min(grid);
    if p > 0.0 {
        let valid = grid - bs + 1;
        let gamma = p / (bs * bs) as f64 * (grid * grid) as f64 / (valid * valid) as f64;
        for c in 0..channels {
            for y in 0..valid {
                for x in 0..valid {
                    if rng.gen::<f64>() < gamma {
                        for dy in 0..bs {
                            for dx in 0..bs {
                                keep[(c * grid + y + dy) * grid + x + dx] = false;
                            }
                        }
                    }
                }
            }
        }
    }
    let kept = keep.iter().filter(|&&k| k).count();
    let scale = if kept == 0 { 0.0 } else { n as f64 / kept as f64 };
    Ok(keep.iter().map(|&k| if k { scale } else { 0.0 }).collect())
}

/// Zeroes one square patch with side drawn uniformly in `[patch_min, patch_max]`.
pub fn cutout(obs: &Observation, patch_min: usize, patch_max: usize, rng: &mut Rng) -> Result<Observation> {
    let s = obs.size;
    if patch_min == 0 || patch_min > patch_max || patch_max > s {
        return Err(Error::ShapeMismatch(format!("patch range [{patch_min}, {patch_max}] for image size {s}")));
    }
    let side = rng.gen_range(patch_min..=patch_max);
    let y0 = rng.gen_range(0..=s - side);
    let x0 = rng.gen_range(0..=s - side);
    let mut out = obs.clone();
    for y in y0..y0 + side {
        out.pixels[y * s + x0..y * s + x0 + side].fill(0);
    }
    Ok(out)
}

/// Edge-replicate pad by `pad`, then crop the window at offset `(ox, oy)` in `[0, 2·pad]`.
pub fn shift_by(obs: &Observation, pad: usize, ox: usize, oy: usize) -> Observation {
    let s = obs.size as isize;
    let mut out = obs.clone();
    for y in 0..s {
        let sy = (y + oy as isize - pad as isize).clamp(0, s - 1);
        for x in 0..s {
            let sx = (x + ox as isize - pad as isize).clamp(0, s - 1);
            out.pixels[(y * s + x) as usize] = obs.pixels[(sy * s + sx) as usize];
        }
    }
    out
}

pub fn random_shift(obs: &Observation, pad: usize, rng: &mut Rng) -> Observation {
    let ox = rng.gen_range(0..=2 * pad);
    let oy = rng.gen_range(0..=2 * pad);
    shift_by(obs, pad, ox, oy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn grid(ix: Vec<usize>) -> CodeGrid {
        let n = ix.len();
        CodeGrid { indices: ix, rows: 1, cols: n }
    }

    #[test]
    fn p_zero_keeps_everything() {
        let m = oreo_mask(&grid(vec![3, 1, 0, 3]), 4, 0.0, &mut seeded(0)).unwrap();
        assert!(m.bits.iter().all(|&b| b));
    }

    #[test]
    fn mask_follows_code_bits() {
        let bits = vec![true, false, true];
        assert_eq!(mask_from_bits(&grid(vec![1, 1, 2, 2]), &bits, 0.5).bits, vec![false, false, true, true]);
    }

    #[test]
    fn invalid_probability_is_rejected() {
        assert!(matches!(oreo_mask(&grid(vec![0]), 2, 1.0, &mut seeded(0)), Err(Error::InvalidProbability(_))));
        assert!(matches!(unit_dropout(3, -0.1, &mut seeded(0)), Err(Error::InvalidProbability(_))));
    }

    #[test]
    fn dropped_code_fraction_matches_p() {
        let mut rng = seeded(1);
        let mut dropped = 0usize;
        for _ in 0..10_000 {
            dropped += sample_code_bits(1, 0.5, &mut rng).unwrap().iter().filter(|&&b| !b).count();
        }
        let f = dropped as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&f), "{f}");
    }

    #[test]
    fn apply_mask_scales_and_is_identity_at_eval() {
        let m = MaskTensor { bits: vec![true, false], drop_probability: 0.5 };
        assert_eq!(apply_mask(&[3.0, 1.0], 1, &m, true).unwrap(), vec![6.0, 0.0]);
        assert_eq!(apply_mask(&[3.0, 1.0], 1, &m, false).unwrap(), vec![3.0, 1.0]);
        assert!(matches!(apply_mask(&[1.0; 3], 1, &m, true), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn dropblock_schedule_and_blocks() {
        assert!((dropblock_rate(0.3, 0.5) - 0.15).abs() < 1e-15);
        let m = block_dropout(2, 5, 0.3, 3, 0.0, &mut seeded(0)).unwrap();
        assert!(m.iter().all(|&v| v == 1.0));
        let mut rng = seeded(3);
        let mut kept = 0.0;
        let mut total = 0.0;
        for _ in 0..2000 {
            let m = block_dropout(1, 10, 0.3, 3, 1.0, &mut rng).unwrap();
            kept += m.iter().filter(|&&v| v > 0.0).count() as f64;
            total += m.len() as f64;
            let s: f64 = m.iter().sum();
            assert!(s == 0.0 || (s - 100.0).abs() < 1e-9);
        }
        // Overlapping blocks make the realized rate a little under the target.
        let rate = 1.0 - kept / total;
        assert!((0.2..0.32).contains(&rate), "{rate}");
    }

    #[test]
    fn cutout_patch_side_in_range() {
        let obs = Observation { size: 84, pixels: vec![200; 84 * 84] };
        let mut rng = seeded(4);
        for _ in 0..200 {
            let out = cutout(&obs, 10, 30, &mut rng).unwrap();
            let zeros = out.pixels.iter().filter(|&&v| v == 0).count();
            let side = (zeros as f64).sqrt() as usize;
            assert_eq!(side * side, zeros);
            assert!((10..=30).contains(&side));
        }
    }

    #[test]
    fn random_shift_is_a_translate_of_the_padded_image() {
        let s = 12;
        let obs = Observation { size: s, pixels: (0..s * s).map(|i| (i * 7 % 256) as u8).collect() };
        let mut rng = seeded(5);
        let padded = |x: isize, y: isize| {
            let c = |v: isize| v.clamp(0, s as isize - 1) as usize;
            obs.pixels[c(y) * s + c(x)]
        };
        for _ in 0..50 {
            let out = random_shift(&obs, 4, &mut rng);
            let found = (-4..=4).any(|dy: isize| {
                (-4..=4).any(|dx: isize| {
                    (0..s).all(|y| (0..s).all(|x| out.pixels[y * s + x] == padded(x as isize + dx, y as isize + dy)))
                })
            });
            assert!(found);
        }
    }

    #[test]
    fn stacked_masks_share_one_draw() {
        let g1 = grid(vec![7, 1, 7]);
        let g2 = grid(vec![2, 7, 3]);
        let mut rng = seeded(6);
        for _ in 0..100 {
            let m = stacked_oreo_mask(&[&g1, &g2], 8, 0.5, &mut rng).unwrap();
            assert_eq!(m[0].bits[0], m[1].bits[1]);
            assert_eq!(m[0].bits[2], m[1].bits[1]);
        }
        let single = stacked_oreo_mask(&[&g1], 8, 0.5, &mut seeded(9)).unwrap();
        assert_eq!(single[0], oreo_mask(&g1, 8, 0.5, &mut seeded(9)).unwrap());
    }

    #[test]
    fn disjoint_codes_give_uncorrelated_frames() {
        let g1 = grid(vec![0, 1]);
        let g2 = grid(vec![2, 3]);
        let mut rng = seeded(7);
        let n = 20_000;
        let (mut sa, mut sb, mut sab) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let m = stacked_oreo_mask(&[&g1, &g2], 4, 0.5, &mut rng).unwrap();
            let a = m[0].bits[0] as u8 as f64;
            let b = m[1].bits[0] as u8 as f64;
            sa += a;
            sb += b;
            sab += a * b;
        }
        let cov = sab / n as f64 - (sa / n as f64) * (sb / n as f64);
        assert!(cov.abs() < 0.01, "{cov}");
    }
}
