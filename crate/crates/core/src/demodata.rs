//! Expert demonstrations and their on-disk format.
//!
//! A dataset directory holds `manifest.json` plus one `episode_NNNNN.bin` per episode:
//! magic `OREO`, u32 LE step count, then per step `H·W` pixel bytes and one action byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::envsim::{self, EnvConfig};
use crate::error::{Error, Result};
use crate::rng::substream;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"OREO";

/// Square grayscale frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub size: usize,
    pub pixels: Vec<u8>,
}

impl Observation {
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.size + x]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub observations: Vec<Observation>,
    pub actions: Vec<usize>,
    pub total_return: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub env: EnvConfig,
    pub episode_count: usize,
    pub transition_count: usize,
    pub action_count: usize,
    pub image_size: usize,
    pub episode_returns: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoDataset {
    pub episodes: Vec<Episode>,
    pub manifest: Manifest,
}

/// Contiguous frames and actions, the layout trainers consume.
#[derive(Debug, Clone, Default)]
pub struct Frames {
    pub size: usize,
    pub pixels: Vec<u8>,
    pub actions: Vec<usize>,
    /// Position of each frame within its episode.
    pub episode_step: Vec<usize>,
}

impl Frames {
    /// Flat frames with no episode structure (every frame starts an episode).
    pub fn from_pixels(size: usize, pixels: Vec<u8>, actions: Vec<usize>) -> Self {
        let n = actions.len();
        Frames { size, pixels, actions, episode_step: vec![0; n] }
    }

    /// Indices of the `n` frames ending at `i`, oldest first, repeating the
    /// episode's first frame when the history is short.
    pub fn stack(&self, i: usize, n: usize) -> Vec<usize> {
        (0..n).rev().map(|k| i - k.min(self.episode_step[i])).collect()
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn frame(&self, i: usize) -> &[u8] {
        let n = self.size * self.size;
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn observation(&self, i: usize) -> Observation {
        Observation { size: self.size, pixels: self.frame(i).to_vec() }
    }
}

impl DemoDataset {
    pub fn new(env: EnvConfig, episodes: Vec<Episode>) -> Self {
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            episode_count: episodes.len(),
            transition_count: episodes.iter().map(|e| e.actions.len()).sum(),
            action_count: env.action_count,
            image_size: env.image_size,
            episode_returns: episodes.iter().map(|e| e.total_return).collect(),
            env,
        };
        DemoDataset { episodes, manifest }
    }

    pub fn transition_count(&self) -> usize {
        self.manifest.transition_count
    }

    pub fn frames(&self) -> Frames {
        let mut f = Frames { size: self.manifest.image_size, ..Frames::default() };
        for e in &self.episodes {
            for (t, (o, &a)) in e.observations.iter().zip(&e.actions).enumerate() {
                f.pixels.extend(&o.pixels);
                f.actions.push(a);
                f.episode_step.push(t);
            }
        }
        f
    }

    /// Train/validation split by whole episodes: the last `val_episodes` are held out.
    pub fn split(&self, val_episodes: usize) -> (DemoDataset, DemoDataset) {
        let cut = self.episodes.len().saturating_sub(val_episodes);
        let env = self.manifest.env.clone();
        (
            DemoDataset::new(env.clone(), self.episodes[..cut].to_vec()),
            DemoDataset::new(env, self.episodes[cut..].to_vec()),
        )
    }
}

/// Runs the scripted expert in `config.confounder_mode` and records every step.
pub fn collect(config: &EnvConfig, n_episodes: usize, seed: u64) -> Result<DemoDataset> {
    config.validate()?;
    if n_episodes == 0 {
        return Err(Error::InvalidConfig("n_episodes must be at least 1".into()));
    }
    let mut seeds = substream(seed, "collect");
    let mut episodes = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let (mut observations, mut actions) = (Vec::new(), Vec::new());
        let total_return = envsim::play(config, seeds.next_u64(), |s, o| {
            let a = envsim::expert_action(s);
            observations.push(o.clone());
            actions.push(a);
            a
        })?;
        episodes.push(Episode { observations, actions, total_return });
    }
    Ok(DemoDataset::new(config.clone(), episodes))
}

/// Pixels scaled to `[0, 1]`.
pub fn preprocess(obs: &Observation) -> Vec<f32> {
    obs.pixels.iter().map(|&p| p as f32 / 255.0).collect()
}

fn episode_file(i: usize) -> String {
    format!("episode_{i:05}.bin")
}

pub fn save(dataset: &DemoDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let hw = dataset.manifest.image_size * dataset.manifest.image_size;
    for (i, e) in dataset.episodes.iter().enumerate() {
        let mut buf = Vec::with_capacity(8 + e.actions.len() * (hw + 1));
        buf.extend(MAGIC);
        buf.extend((e.actions.len() as u32).to_le_bytes());
        for (o, &a) in e.observations.iter().zip(&e.actions) {
            buf.extend(&o.pixels);
            buf.push(a as u8);
        }
        fs::File::create(dir.join(episode_file(i)))?.write_all(&buf)?;
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&dataset.manifest)?)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<DemoDataset> {
    let text = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", dir.join("manifest.json").display())))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::CorruptManifest(format!("unreadable manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::FormatVersionMismatch { expected: FORMAT_VERSION, found: manifest.format_version });
    }
    let size = manifest.image_size;
    let hw = size * size;
    let corrupt = |m: String| Error::CorruptManifest(m);
    if manifest.episode_returns.len() != manifest.episode_count {
        return Err(corrupt("episode_returns length disagrees with episode_count".into()));
    }
    let mut episodes = Vec::with_capacity(manifest.episode_count);
    for i in 0..manifest.episode_count {
        let bytes = fs::read(dir.join(episode_file(i))).map_err(|e| corrupt(format!("{}: {e}", episode_file(i))))?;
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(corrupt(format!("{}: bad header", episode_file(i))));
        }
        let steps = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() != 8 + steps * (hw + 1) {
            return Err(corrupt(format!("{}: payload length disagrees with step count", episode_file(i))));
        }
        let mut observations = Vec::with_capacity(steps);
        let mut actions = Vec::with_capacity(steps);
        for chunk in bytes[8..].chunks_exact(hw + 1) {
            let a = chunk[hw] as usize;
            if a >= manifest.action_count {
                return Err(corrupt(format!("{}: action {a} out of range", episode_file(i))));
            }
            observations.push(Observation { size, pixels: chunk[..hw].to_vec() });
            actions.push(a);
        }
        episodes.push(Episode { observations, actions, total_return: manifest.episode_returns[i] });
    }
    let actual: usize = episodes.iter().map(|e| e.actions.len()).sum();
    if actual != manifest.transition_count {
        return Err(corrupt(format!("transition_count {} but payload holds {actual}", manifest.transition_count)));
    }
    Ok(DemoDataset { episodes, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_env() -> EnvConfig {
        EnvConfig {
            image_size: 24,
            balls_per_episode: 2,
            glyph_region: envsim::Rect { x: 0, y: 17, w: 6, h: 6 },
            ..EnvConfig::default()
        }
    }

    #[test]
    fn expert_episode_returns_full_score() {
        let d = collect(&EnvConfig::default(), 1, 0).unwrap();
        assert_eq!(d.episodes[0].total_return, 20);
        assert_eq!(d.transition_count(), 20 * 16);
    }

    #[test]
    fn collection_is_deterministic() {
        assert_eq!(collect(&small_env(), 3, 9).unwrap(), collect(&small_env(), 3, 9).unwrap());
    }

    #[test]
    fn preprocess_scales_to_unit_interval() {
        let o = Observation { size: 2, pixels: vec![0, 255, 128, 128] };
        let p = preprocess(&o);
        assert_eq!(p[0], 0.0);
        assert_eq!(p[1], 1.0);
        assert!((p[2] - 128.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn save_load_round_trip_and_corruption() {
        let d = collect(&small_env(), 3, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&d, dir.path()).unwrap();
        assert_eq!(load(dir.path()).unwrap(), d);

        let mut m = d.manifest.clone();
        m.transition_count += 1;
        fs::write(dir.path().join("manifest.json"), serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::CorruptManifest(_))));

        save(&d, dir.path()).unwrap();
        let f = dir.path().join(episode_file(1));
        let bytes = fs::read(&f).unwrap();
        fs::write(&f, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::CorruptManifest(_))));

        save(&d, dir.path()).unwrap();
        let mut m = d.manifest.clone();
        m.format_version = 99;
        fs::write(dir.path().join("manifest.json"), serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::FormatVersionMismatch { .. })));
    }

    #[test]
    fn stacks_clamp_at_episode_start() {
        let d = collect(&small_env(), 2, 3).unwrap();
        let f = d.frames();
        let n0 = d.episodes[0].actions.len();
        assert_eq!(f.stack(1, 4), vec![0, 0, 0, 1]);
        assert_eq!(f.stack(n0 + 2, 3), vec![n0, n0 + 1, n0 + 2]);
        assert_eq!(f.stack(n0, 2), vec![n0, n0]);
    }

    #[test]
    fn split_is_by_whole_episodes() {
        let d = collect(&small_env(), 7, 2).unwrap();
        let (tr, va) = d.split(5);
        assert_eq!(tr.episodes.len(), 2);
        assert_eq!(va.episodes, d.episodes[2..].to_vec());
        assert_eq!(d.split(5).0, tr);
    }
}
