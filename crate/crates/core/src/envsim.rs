//! ConfoundedCatcher: a falling-ball catch game whose frames carry a glyph of the
//! previous action, with a scripted expert.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::demodata::Observation;
use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};

pub const LEFT: usize = 0;
pub const STAY: usize = 1;
pub const RIGHT: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfounderMode {
    Confounded,
    Masked,
    Scrambled,
}

impl FromStr for ConfounderMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "confounded" => Ok(Self::Confounded),
            "masked" => Ok(Self::Masked),
            "scrambled" => Ok(Self::Scrambled),
            _ => Err(Error::InvalidConfig(format!("unknown confounder mode {s:?}"))),
        }
    }
}

impl fmt::Display for ConfounderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Confounded => "confounded",
            Self::Masked => "masked",
            Self::Scrambled => "scrambled",
        })
    }
}

/// How an action is drawn inside the glyph region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlyphStyle {
    /// Region split into `action_count` vertical bars; bar `a` is lit.
    Bars,
    /// One square lamp per action along the region's middle row; lamp `a` is lit.
    Lamps,
}

impl FromStr for GlyphStyle {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bars" => Ok(Self::Bars),
            "lamps" => Ok(Self::Lamps),
            _ => Err(Error::InvalidConfig(format!("unknown glyph style {s:?}"))),
        }
    }
}

impl fmt::Display for GlyphStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Bars => "bars",
            Self::Lamps => "lamps",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub grid_width: usize,
    pub grid_height: usize,
    pub image_size: usize,
    pub action_count: usize,
    pub balls_per_episode: usize,
    pub confounder_mode: ConfounderMode,
    pub glyph_region: Rect,
    pub glyph_style: GlyphStyle,
    pub glyph_intensity: u8,
    pub seed: u64,
    /// Discount factor, carried as metadata only; nothing is discounted.
    pub gamma: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            grid_width: 16,
            grid_height: 16,
            image_size: 84,
            action_count: 3,
            balls_per_episode: 20,
            confounder_mode: ConfounderMode::Confounded,
            glyph_region: Rect { x: 0, y: 63, w: 12, h: 12 },
            glyph_style: GlyphStyle::Bars,
            glyph_intensity: 255,
            seed: 0,
            gamma: 0.99,
        }
    }
}

impl EnvConfig {
    /// Pixels per logical cell; the image remainder is padding on the right/bottom.
    pub fn cell(&self) -> usize {
        (self.image_size / self.grid_width).min(self.image_size / self.grid_height)
    }

    pub fn episode_len(&self) -> usize {
        self.balls_per_episode * self.grid_height
    }

    pub fn paddle_row_pixels(&self) -> std::ops::Range<usize> {
        let c = self.cell();
        (self.grid_height - 1) * c..self.grid_height * c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.action_count != 3 {
            return bad(format!("action_count must be 3, got {}", self.action_count));
        }
        if self.grid_width < 2 || self.grid_height < 2 || self.balls_per_episode == 0 {
            return bad("grid must be at least 2×2 with at least one ball".into());
        }
        if self.cell() == 0 {
            return bad(format!("image_size {} smaller than the grid", self.image_size));
        }
        let g = self.glyph_region;
        if g.w == 0 || g.h == 0 || g.x + g.w > self.image_size || g.y + g.h > self.image_size {
            return bad(format!("glyph region {g:?} outside the {0}×{0} image", self.image_size));
        }
        let paddle = self.paddle_row_pixels();
        if g.y < paddle.end && g.y + g.h > paddle.start {
            return bad("glyph region overlaps the paddle row".into());
        }
        if g.y < self.cell() && g.x < self.grid_width * self.cell() {
            return bad("glyph region overlaps the ball spawn row".into());
        }
        Ok(())
    }

    /// Pixel pattern for `action` inside the glyph region, row-major `h×w`.
    pub fn glyph(&self, action: usize) -> Vec<u8> {
        let Rect { w, h, .. } = self.glyph_region;
        let mut g = vec![0u8; w * h];
        let n = self.action_count;
        match self.glyph_style {
            GlyphStyle::Bars => {
                let bw = w / n;
                for y in 0..h {
                    for x in action * bw..(action + 1) * bw {
                        g[y * w + x] = self.glyph_intensity;
                    }
                }
            }
            GlyphStyle::Lamps => {
                let side = (w / (2 * n - 1)).max(1).min(h);
                let y0 = (h - side) / 2;
                let x0 = action * (w - side) / (n - 1);
                for y in y0..y0 + side {
                    for x in x0..x0 + side {
                        g[y * w + x] = self.glyph_intensity;
                    }
                }
            }
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub ball_col: usize,
    pub ball_row: usize,
    pub paddle_col: usize,
    pub previous_action: usize,
    /// Action drawn in the glyph (differs from `previous_action` only when scrambled).
    pub glyph_action: usize,
    pub score: i64,
    pub steps: usize,
    pub balls_resolved: usize,
    pub rng: Rng,
}

impl EnvState {
    pub fn done(&self, config: &EnvConfig) -> bool {
        self.balls_resolved >= config.balls_per_episode
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: i64,
    pub done: bool,
}

pub fn reset(config: &EnvConfig, seed: u64) -> (EnvState, Observation) {
    let mut rng = seeded(seed);
    let ball_col = rng.gen_range(0..config.grid_width);
    let glyph_action = match config.confounder_mode {
        ConfounderMode::Scrambled => rng.gen_range(0..config.action_count),
        _ => STAY,
    };
    let state = EnvState {
        ball_col,
        ball_row: 0,
        paddle_col: config.grid_width / 2,
        previous_action: STAY,
        glyph_action,
        score: 0,
        steps: 0,
        balls_resolved: 0,
        rng,
    };
    let obs = render(&state, config);
    (state, obs)
}

/// Paddle moves first, then the ball either falls one row or resolves on the paddle row.
pub fn step(config: &EnvConfig, state: &mut EnvState, action: usize) -> Result<StepOutcome> {
    if state.done(config) {
        return Err(Error::StepAfterDone);
    }
    if action >= config.action_count {
        return Err(Error::InvalidAction(action));
    }
    state.paddle_col = match action {
        LEFT => state.paddle_col.saturating_sub(1),
        RIGHT => (state.paddle_col + 1).min(config.grid_width - 1),
        _ => state.paddle_col,
    };
    let mut reward = 0;
    if state.ball_row == config.grid_height - 1 {
        reward = if state.ball_col == state.paddle_col { 1 } else { -1 };
        state.balls_resolved += 1;
        state.ball_row = 0;
        state.ball_col = state.rng.gen_range(0..config.grid_width);
    } else {
        state.ball_row += 1;
    }
    state.score += reward;
    state.steps += 1;
    state.previous_action = action;
    state.glyph_action = match config.confounder_mode {
        ConfounderMode::Scrambled => state.rng.gen_range(0..config.action_count),
        _ => action,
    };
    Ok(StepOutcome { observation: render(state, config), reward, done: state.done(config) })
}

pub fn render(state: &EnvState, config: &EnvConfig) -> Observation {
    let s = config.image_size;
    let c = config.cell();
    let mut px = vec![0u8; s * s];
    let mut fill = |row: usize, col: usize| {
        for y in row * c..(row + 1) * c {
            px[y * s + col * c..y * s + (col + 1) * c].fill(255);
        }
    };
    fill(state.ball_row, state.ball_col);
    fill(config.grid_height - 1, state.paddle_col);
    if config.confounder_mode != ConfounderMode::Masked {
        let g = config.glyph_region;
        let pattern = config.glyph(state.glyph_action);
        for y in 0..g.h {
            px[(g.y + y) * s + g.x..(g.y + y) * s + g.x + g.w].copy_from_slice(&pattern[y * g.w..(y + 1) * g.w]);
        }
    }
    Observation { size: s, pixels: px }
}

/// Move toward the ball; ties stay.
pub fn expert_action(state: &EnvState) -> usize {
    use std::cmp::Ordering::*;
    match state.ball_col.cmp(&state.paddle_col) {
        Less => LEFT,
        Greater => RIGHT,
        Equal => STAY,
    }
}

/// Plays one episode with `policy`, returning the total score.
pub fn play<F: FnMut(&EnvState, &Observation) -> usize>(config: &EnvConfig, seed: u64, mut policy: F) -> Result<i64> {
    let (mut state, mut obs) = reset(config, seed);
    loop {
        let a = policy(&state, &obs);
        let out = step(config, &mut state, a)?;
        if out.done {
            return Ok(state.score);
        }
        obs = out.observation;
    }
}
