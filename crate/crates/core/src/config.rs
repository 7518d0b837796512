//! Plain-text run configuration.
//!
//! ```text
//! seed = 0
//! [env]
//! image_size = 84
//! [bc]
//! regularizer = oreo
//! p = 0.5
//! ```
//!
//! Keys live under `[section]` headers or are written dotted (`bc.p = 0.5`).
//! `#` starts a comment. Every key has a default; unknown keys are an error.
//! Run `oreo config` for the full list with defaults.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::crlr::CrlrConfig;
use crate::envsim::{ConfounderMode, EnvConfig};
use crate::error::{Error, Result};
use crate::policy::BcConfig;
use crate::regularizers::RegularizerKind;
use crate::vqvae::{VqTrainConfig, VqvaeArch};

/// Environment variable that replaces `paths.root`.
pub const OUTPUT_ROOT_VAR: &str = "OREO_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Expert episodes collected, validation included.
    pub episodes: usize,
    /// Trailing episodes held out for validation accuracy.
    pub val_episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_episodes: usize,
    pub modes: Vec<ConfounderMode>,
    /// `policy`, `expert` or `random`.
    pub agent: String,
    pub anchor_episodes: usize,
    pub attention_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathsConfig {
    pub root: PathBuf,
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub metrics: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub p: Vec<f64>,
    pub codebook_sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Root of every substream; `env.seed` is not a separate key.
    pub seed: u64,
    pub env: EnvConfig,
    pub data: DataConfig,
    pub vqvae: VqvaeArch,
    pub vqvae_train: VqTrainConfig,
    pub bc: BcConfig,
    pub crlr: CrlrConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    /// Desk-scale defaults: 47px frames (2px cells, 15px padding holding the glyph),
    /// 32 channels, 500 BC steps. Full scale is 84px, 256 channels, batch 1024, 1000 epochs.
    fn default() -> Self {
        let env = EnvConfig {
            image_size: 47,
            glyph_region: crate::envsim::Rect { x: 0, y: 35, w: 12, h: 12 },
            glyph_style: crate::envsim::GlyphStyle::Lamps,
            ..EnvConfig::default()
        };
        let mut bc = BcConfig { batch: 64, epochs: 10, steps_per_epoch: 50, channels: 32, hidden: 256, ..BcConfig::default() };
        bc.regularizer.patch_min = 6;
        bc.regularizer.patch_max = 17;
        RunConfig {
            seed: 0,
            data: DataConfig { episodes: 200, val_episodes: 5 },
            vqvae: VqvaeArch { image_size: env.image_size, channels: 32, code_dim: 64, codebook_size: 512, beta: 0.25 },
            vqvae_train: VqTrainConfig { epochs: 10, batch: 64, steps_per_epoch: 50, ..VqTrainConfig::default() },
            bc,
            crlr: CrlrConfig::default(),
            eval: EvalConfig {
                n_episodes: 10,
                modes: vec![ConfounderMode::Confounded, ConfounderMode::Masked],
                agent: "policy".into(),
                anchor_episodes: 200,
                attention_frames: 50,
            },
            paths: PathsConfig {
                root: "runs".into(),
                dataset: "data".into(),
                checkpoints: "checkpoints".into(),
                metrics: "metrics".into(),
            },
            sweep: SweepConfig { p: vec![0.25, 0.5, 0.75], codebook_sizes: vec![64, 128, 512] },
            env,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse().map_err(|e| Error::ConfigParse(format!("{key} = {v}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(s) = line.strip_prefix('[') {
                section = s
                    .strip_suffix(']')
                    .ok_or_else(|| Error::ConfigParse(format!("line {}: unterminated section header", n + 1)))?
                    .trim()
                    .to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::ConfigParse(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            let key = if section.is_empty() || k.contains('.') { k.to_string() } else { format!("{section}.{k}") };
            pairs.push((n + 1, key, v.trim().to_string()));
        }
        for (n, key, v) in Self::kind_first(pairs) {
            cfg.set(&key, &v).map_err(|e| Error::ConfigParse(format!("line {n}: {e}")))?;
        }
        cfg.check()?;
        Ok(cfg)
    }

    /// Moves `bc.regularizer` ahead of other keys, since choosing a kind resets `bc.p`
    /// to that kind's default.
    pub fn kind_first<T>(mut pairs: Vec<(T, String, String)>) -> Vec<(T, String, String)> {
        pairs.sort_by_key(|(_, k, _)| k != "bc.regularizer");
        pairs
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ConfigParse(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Cross-field checks after all keys are set.
    pub fn check(&self) -> Result<()> {
        self.env.validate()?;
        if self.data.episodes <= self.data.val_episodes {
            return Err(Error::ConfigParse("data.episodes must exceed data.val_episodes".into()));
        }
        if !["policy", "expert", "random"].contains(&self.eval.agent.as_str()) {
            return Err(Error::ConfigParse(format!("eval.agent must be policy, expert or random, got {}", self.eval.agent)));
        }
        self.bc.regularizer.validate(self.env.image_size)
    }

    /// Sets one dotted key. Unknown keys are an error.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let e = &mut self.env;
        let r = &mut self.bc.regularizer;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "env.grid_width" => e.grid_width = parse(key, v)?,
            "env.grid_height" => e.grid_height = parse(key, v)?,
            "env.image_size" => {
                e.image_size = parse(key, v)?;
                self.vqvae.image_size = e.image_size;
            }
            "env.action_count" => e.action_count = parse(key, v)?,
            "env.balls_per_episode" => e.balls_per_episode = parse(key, v)?,
            "env.confounder_mode" => e.confounder_mode = parse(key, v)?,
            "env.glyph_x" => e.glyph_region.x = parse(key, v)?,
            "env.glyph_y" => e.glyph_region.y = parse(key, v)?,
            "env.glyph_w" => e.glyph_region.w = parse(key, v)?,
            "env.glyph_h" => e.glyph_region.h = parse(key, v)?,
            "env.glyph_style" => e.glyph_style = parse(key, v)?,
            "env.glyph_intensity" => e.glyph_intensity = parse(key, v)?,
            "env.gamma" => e.gamma = parse(key, v)?,
            "data.episodes" => self.data.episodes = parse(key, v)?,
            "data.val_episodes" => self.data.val_episodes = parse(key, v)?,
            "vqvae.codebook_size" => self.vqvae.codebook_size = parse(key, v)?,
            "vqvae.code_dim" => self.vqvae.code_dim = parse(key, v)?,
            "vqvae.beta" => self.vqvae.beta = parse(key, v)?,
            "vqvae.channels" => {
                self.vqvae.channels = parse(key, v)?;
                self.bc.channels = self.vqvae.channels;
            }
            "vqvae.lr" => self.vqvae_train.lr = parse(key, v)?,
            "vqvae.batch" => self.vqvae_train.batch = parse(key, v)?,
            "vqvae.epochs" => self.vqvae_train.epochs = parse(key, v)?,
            "vqvae.steps_per_epoch" => self.vqvae_train.steps_per_epoch = parse(key, v)?,
            "bc.regularizer" => {
                let kind: RegularizerKind = parse(key, v)?;
                if kind != r.kind {
                    r.p = kind.default_p();
                }
                r.kind = kind;
            }
            "bc.p" => r.p = parse(key, v)?,
            "bc.block_size" => r.block_size = parse(key, v)?,
            "bc.patch_min" => r.patch_min = parse(key, v)?,
            "bc.patch_max" => r.patch_max = parse(key, v)?,
            "bc.shift_pad" => r.shift_pad = parse(key, v)?,
            "bc.num_masks" => r.num_masks = parse(key, v)?,
            "bc.stacked" => r.stacked = parse(key, v)?,
            "bc.lr" => self.bc.lr = parse(key, v)?,
            "bc.batch" => self.bc.batch = parse(key, v)?,
            "bc.epochs" => self.bc.epochs = parse(key, v)?,
            "bc.steps_per_epoch" => self.bc.steps_per_epoch = parse(key, v)?,
            "bc.hidden" => self.bc.hidden = parse(key, v)?,
            "bc.frame_stack" => self.bc.frame_stack = parse(key, v)?,
            "bc.eval_every" => self.bc.eval_every = parse(key, v)?,
            "crlr.lambda" => self.crlr.lambda = parse(key, v)?,
            "crlr.iterations" => self.crlr.iterations = parse(key, v)?,
            "crlr.lr" => self.crlr.lr = parse(key, v)?,
            "crlr.weight_lr" => self.crlr.weight_lr = parse(key, v)?,
            "eval.n_episodes" => self.eval.n_episodes = parse(key, v)?,
            "eval.modes" => self.eval.modes = parse_list(key, v)?,
            "eval.agent" => self.eval.agent = v.to_string(),
            "eval.anchor_episodes" => self.eval.anchor_episodes = parse(key, v)?,
            "eval.attention_frames" => self.eval.attention_frames = parse(key, v)?,
            "paths.root" => self.paths.root = v.into(),
            "paths.dataset" => self.paths.dataset = v.into(),
            "paths.checkpoints" => self.paths.checkpoints = v.into(),
            "paths.metrics" => self.paths.metrics = v.into(),
            "sweep.p" => self.sweep.p = parse_list(key, v)?,
            "sweep.codebook_sizes" => self.sweep.codebook_sizes = parse_list(key, v)?,
            _ => return Err(Error::ConfigParse(format!("unknown key `{key}`"))),
        }
        self.bc.seed = self.seed;
        self.vqvae_train.seed = self.seed;
        self.env.seed = self.seed;
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let e = &self.env;
        let r = &self.bc.regularizer;
        vec![
            ("seed", self.seed.to_string()),
            ("env.grid_width", e.grid_width.to_string()),
            ("env.grid_height", e.grid_height.to_string()),
            ("env.image_size", e.image_size.to_string()),
            ("env.action_count", e.action_count.to_string()),
            ("env.balls_per_episode", e.balls_per_episode.to_string()),
            ("env.confounder_mode", e.confounder_mode.to_string()),
            ("env.glyph_x", e.glyph_region.x.to_string()),
            ("env.glyph_y", e.glyph_region.y.to_string()),
            ("env.glyph_w", e.glyph_region.w.to_string()),
            ("env.glyph_h", e.glyph_region.h.to_string()),
            ("env.glyph_style", e.glyph_style.to_string()),
            ("env.glyph_intensity", e.glyph_intensity.to_string()),
            ("env.gamma", e.gamma.to_string()),
            ("data.episodes", self.data.episodes.to_string()),
            ("data.val_episodes", self.data.val_episodes.to_string()),
            ("vqvae.codebook_size", self.vqvae.codebook_size.to_string()),
            ("vqvae.code_dim", self.vqvae.code_dim.to_string()),
            ("vqvae.beta", self.vqvae.beta.to_string()),
            ("vqvae.channels", self.vqvae.channels.to_string()),
            ("vqvae.lr", self.vqvae_train.lr.to_string()),
            ("vqvae.batch", self.vqvae_train.batch.to_string()),
            ("vqvae.epochs", self.vqvae_train.epochs.to_string()),
            ("vqvae.steps_per_epoch", self.vqvae_train.steps_per_epoch.to_string()),
            ("bc.regularizer", r.kind.to_string()),
            ("bc.p", r.p.to_string()),
            ("bc.block_size", r.block_size.to_string()),
            ("bc.patch_min", r.patch_min.to_string()),
            ("bc.patch_max", r.patch_max.to_string()),
            ("bc.shift_pad", r.shift_pad.to_string()),
            ("bc.num_masks", r.num_masks.to_string()),
            ("bc.stacked", r.stacked.to_string()),
            ("bc.lr", self.bc.lr.to_string()),
            ("bc.batch", self.bc.batch.to_string()),
            ("bc.epochs", self.bc.epochs.to_string()),
            ("bc.steps_per_epoch", self.bc.steps_per_epoch.to_string()),
            ("bc.hidden", self.bc.hidden.to_string()),
            ("bc.frame_stack", self.bc.frame_stack.to_string()),
            ("bc.eval_every", self.bc.eval_every.to_string()),
            ("crlr.lambda", self.crlr.lambda.to_string()),
            ("crlr.iterations", self.crlr.iterations.to_string()),
            ("crlr.lr", self.crlr.lr.to_string()),
            ("crlr.weight_lr", self.crlr.weight_lr.to_string()),
            ("eval.n_episodes", self.eval.n_episodes.to_string()),
            ("eval.modes", list(&self.eval.modes)),
            ("eval.agent", self.eval.agent.clone()),
            ("eval.anchor_episodes", self.eval.anchor_episodes.to_string()),
            ("eval.attention_frames", self.eval.attention_frames.to_string()),
            ("paths.root", self.paths.root.display().to_string()),
            ("paths.dataset", self.paths.dataset.display().to_string()),
            ("paths.checkpoints", self.paths.checkpoints.display().to_string()),
            ("paths.metrics", self.paths.metrics.display().to_string()),
            ("sweep.p", list(&self.sweep.p)),
            ("sweep.codebook_sizes", list(&self.sweep.codebook_sizes)),
        ]
    }

    /// Config file text with `[section]` headers; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, value) in self.entries() {
            let (s, k) = key.split_once('.').unwrap_or(("", key));
            if s != section {
                out.push_str(&format!("\n[{s}]\n"));
                section = s;
            }
            out.push_str(&format!("{k} = {value}\n"));
        }
        out.trim_start().to_string()
    }

    /// `paths.root`, replaced by `$OREO_OUT` when set.
    pub fn root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_VAR) {
            Some(v) if !v.is_empty() => v.into(),
            _ => self.paths.root.clone(),
        }
    }

    fn under_root(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root().join(p)
        }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.under_root(&self.paths.dataset)
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.under_root(&self.paths.checkpoints)
    }

    pub fn metrics_dir(&self) -> PathBuf {
        self.under_root(&self.paths.metrics)
    }
}
