//! Deployment evaluation, normalized scoring and spatial attention maps.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rand::{Rng as _, RngCore};
use serde::{Deserialize, Serialize};

use crate::demodata::Observation;
use crate::envsim::{self, ConfounderMode, EnvConfig, EnvState};
use crate::error::{Error, Result};
use crate::policy::{observations_tensor, Policy};
use crate::rng::substream;

/// Expert and random-policy mean scores anchoring the normalized score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchors {
    pub expert: f64,
    pub random: f64,
}

impl Anchors {
    pub fn compute(env: &EnvConfig, episodes: usize, seed: u64) -> Result<Self> {
        let expert = mean(&run_episodes(env, episodes, env.confounder_mode, seed, &mut Agent::Expert)?);
        let mut random = Agent::Random(substream(seed, "anchors"));
        let random = mean(&run_episodes(env, episodes, env.confounder_mode, seed, &mut random)?);
        Ok(Anchors { expert, random })
    }

    pub fn normalize(&self, score: f64) -> f64 {
        (score - self.random) / (self.expert - self.random)
    }

    fn key(env: &EnvConfig) -> String {
        // Anchors do not depend on the glyph, so the mode is left out of the key.
        let e = EnvConfig { confounder_mode: ConfounderMode::Confounded, ..env.clone() };
        serde_json::to_string(&e).expect("config serializes")
    }

    /// Cached anchors for `env`, computed and written on a miss.
    pub fn load_or_compute(path: &Path, env: &EnvConfig, episodes: usize, seed: u64) -> Result<Self> {
        if let Some(a) = Self::load(path, env)? {
            return Ok(a);
        }
        let a = Self::compute(env, episodes, seed)?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let text = format!("env = {}\nexpert = {}\nrandom = {}\n", Self::key(env), a.expert, a.random);
        fs::write(path, text)?;
        Ok(a)
    }

    /// Reads a cache file; `None` when missing or written for a different environment.
    pub fn load(path: &Path, env: &EnvConfig) -> Result<Option<Self>> {
        let Ok(text) = fs::read_to_string(path) else { return Ok(None) };
        let mut key = None;
        let (mut expert, mut random) = (None, None);
        for line in text.lines() {
            if let Some((k, v)) = line.split_once(" = ") {
                match k {
                    "env" => key = Some(v.to_string()),
                    "expert" => expert = v.parse().ok(),
                    "random" => random = v.parse().ok(),
                    _ => {}
                }
            }
        }
        Ok(match (key, expert, random) {
            (Some(k), Some(expert), Some(random)) if k == Self::key(env) => Some(Anchors { expert, random }),
            _ => None,
        })
    }
}

pub enum Agent<'a> {
    Expert,
    Random(crate::rng::Rng),
    Policy(&'a Policy<f32>),
}

impl Agent<'_> {
    fn frame_stack(&self) -> usize {
        match self {
            Agent::Policy(p) => p.arch.frame_stack,
            _ => 1,
        }
    }

    fn act(&mut self, states: &[&EnvState], stacks: &[Vec<&Observation>]) -> Result<Vec<usize>> {
        match self {
            Agent::Expert => Ok(states.iter().map(|s| envsim::expert_action(s)).collect()),
            Agent::Random(rng) => Ok(states.iter().map(|_| rng.gen_range(0..3)).collect()),
            Agent::Policy(p) => {
                let flat: Vec<&Observation> = stacks.iter().flatten().copied().collect();
                p.act_batch(&observations_tensor(&flat))
            }
        }
    }
}

/// Runs `n` episodes in lockstep; episode `i` is seeded from the `eval` substream.
/// In confounded mode the glyph shows the agent's own previous action.
pub fn run_episodes(env: &EnvConfig, n: usize, mode: ConfounderMode, seed: u64, agent: &mut Agent) -> Result<Vec<i64>> {
    if n == 0 {
        return Err(Error::InvalidConfig("n_episodes must be at least 1".into()));
    }
    let env = EnvConfig { confounder_mode: mode, ..env.clone() };
    env.validate()?;
    let mut seeds = substream(seed, "eval");
    let k = agent.frame_stack();
    let mut states = Vec::with_capacity(n);
    let mut hist: Vec<VecDeque<Observation>> = Vec::with_capacity(n);
    for _ in 0..n {
        let (s, o) = envsim::reset(&env, seeds.next_u64());
        states.push(s);
        hist.push(std::iter::repeat(o).take(k).collect());
    }
    let mut done = vec![false; n];
    while done.iter().any(|d| !d) {
        let live: Vec<usize> = (0..n).filter(|&i| !done[i]).collect();
        let st: Vec<&EnvState> = live.iter().map(|&i| &states[i]).collect();
        let stacks: Vec<Vec<&Observation>> = live.iter().map(|&i| hist[i].iter().collect()).collect();
        let actions = agent.act(&st, &stacks)?;
        for (&i, a) in live.iter().zip(actions) {
            let out = envsim::step(&env, &mut states[i], a)?;
            done[i] = out.done;
            hist[i].pop_front();
            hist[i].push_back(out.observation);
        }
    }
    Ok(states.iter().map(|s| s.score).collect())
}

fn mean(v: &[i64]) -> f64 {
    v.iter().sum::<i64>() as f64 / v.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_score: f64,
    pub std_score: f64,
    pub n_episodes: usize,
    pub mode: ConfounderMode,
    pub normalized_score: f64,
    pub per_episode_scores: Vec<i64>,
}

impl EvalReport {
    pub fn from_scores(scores: Vec<i64>, mode: ConfounderMode, anchors: &Anchors) -> Self {
        let m = mean(&scores);
        let var = scores.iter().map(|&s| (s as f64 - m).powi(2)).sum::<f64>() / scores.len() as f64;
        EvalReport {
            mean_score: m,
            std_score: var.sqrt(),
            n_episodes: scores.len(),
            mode,
            normalized_score: anchors.normalize(m),
            per_episode_scores: scores,
        }
    }
}

pub fn evaluate_agent(
    agent: &mut Agent,
    env: &EnvConfig,
    n_episodes: usize,
    mode: ConfounderMode,
    seed: u64,
    anchors: Option<&Anchors>,
) -> Result<EvalReport> {
    let anchors = anchors.ok_or(Error::MissingAnchors)?;
    let scores = run_episodes(env, n_episodes, mode, seed, agent)?;
    Ok(EvalReport::from_scores(scores, mode, anchors))
}

pub fn evaluate(
    policy: &Policy<f32>,
    env: &EnvConfig,
    n_episodes: usize,
    mode: ConfounderMode,
    seed: u64,
    anchors: Option<&Anchors>,
) -> Result<EvalReport> {
    evaluate_agent(&mut Agent::Policy(policy), env, n_episodes, mode, seed, anchors)
}

#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub grid: usize,
    /// Spatial softmax over the L positions, row-major.
    pub softmax: Vec<f64>,
    /// Nearest-neighbor upscaling to the image size.
    pub upscaled: Vec<f64>,
    /// Image multiplied by the min-max normalized upscaled map.
    pub overlay: Observation,
}

/// Grid position covering pixel `(x, y)` under nearest-neighbor upscaling.
pub fn pixel_to_position(x: usize, y: usize, size: usize, grid: usize) -> usize {
    (y * grid / size) * grid + x * grid / size
}

/// Attention of the final encoder feature map for the newest frame of `stack`.
pub fn attention_map(policy: &Policy<f32>, stack: &[&Observation]) -> Result<AttentionMap> {
    let ft = policy.features(&observations_tensor(stack))?;
    let [n, c, g, _] = ft.features.dims4();
    let l = g * g;
    let last = &ft.features.item(n - 1);
    let score: Vec<f64> = (0..l).map(|p| (0..c).map(|ch| last[ch * l + p].abs() as f64).sum::<f64>() / c as f64).collect();
    let mx = score.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = score.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    let softmax: Vec<f64> = e.iter().map(|v| v / z).collect();
    let obs = stack[n - 1];
    let s = obs.size;
    let upscaled: Vec<f64> = (0..s * s).map(|i| softmax[pixel_to_position(i % s, i / s, s, g)]).collect();
    let (lo, hi) = upscaled.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let pixels = upscaled
        .iter()
        .zip(&obs.pixels)
        .map(|(&v, &p)| {
            let w = if hi > lo { (v - lo) / (hi - lo) } else { 1.0 };
            (w * p as f64).round() as u8
        })
        .collect();
    Ok(AttentionMap { grid: g, softmax, upscaled, overlay: Observation { size: s, pixels } })
}

/// Softmax mass on grid positions whose pixels touch the ball or paddle cell.
pub fn relevant_mass(map: &AttentionMap, state: &EnvState, env: &EnvConfig) -> f64 {
    let (c, s) = (env.cell(), env.image_size);
    let mut hit = vec![false; map.softmax.len()];
    for (row, col) in [(state.ball_row, state.ball_col), (env.grid_height - 1, state.paddle_col)] {
        for y in row * c..(row + 1) * c {
            for x in col * c..(col + 1) * c {
                hit[pixel_to_position(x, y, s, map.grid)] = true;
            }
        }
    }
    map.softmax.iter().zip(&hit).filter(|(_, &h)| h).map(|(v, _)| v).sum()
}

/// Binary PGM (P5).
pub fn write_pgm(path: &Path, obs: &Observation) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut buf = format!("P5\n{} {}\n255\n", obs.size, obs.size).into_bytes();
    buf.extend(&obs.pixels);
    fs::write(path, buf)?;
    Ok(())
}

/// Frames with their states from one expert episode, for attention studies.
pub fn sample_frames(env: &EnvConfig, n: usize, seed: u64) -> Result<Vec<(EnvState, Observation)>> {
    let mut out = Vec::with_capacity(n);
    let mut episode = 0u64;
    while out.len() < n {
        envsim::play(env, seed.wrapping_add(episode), |s, o| {
            if out.len() < n {
                out.push((s.clone(), o.clone()));
            }
            envsim::expert_action(s)
        })?;
        episode += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyArch;
    use crate::rng::seeded;

    fn env() -> EnvConfig {
        EnvConfig { image_size: 32, glyph_region: envsim::Rect { x: 0, y: 20, w: 6, h: 6 }, ..EnvConfig::default() }
    }

    #[test]
    fn anchors_give_expert_one_and_random_zero() {
        let a = Anchors::compute(&env(), 200, 0).unwrap();
        assert_eq!(a.expert, 20.0);
        let r = evaluate_agent(&mut Agent::Expert, &env(), 20, ConfounderMode::Confounded, 9, Some(&a)).unwrap();
        assert_eq!(r.normalized_score, 1.0);
        let mut rnd = Agent::Random(substream(99, "other"));
        let r = evaluate_agent(&mut rnd, &env(), 200, ConfounderMode::Confounded, 77, Some(&a)).unwrap();
        assert!(r.normalized_score.abs() < 0.05, "{}", r.normalized_score);
    }

    #[test]
    fn missing_anchors_error() {
        assert!(matches!(
            evaluate_agent(&mut Agent::Expert, &env(), 1, ConfounderMode::Masked, 0, None),
            Err(Error::MissingAnchors)
        ));
    }

    #[test]
    fn anchor_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("anchors.txt");
        let a = Anchors::load_or_compute(&p, &env(), 20, 0).unwrap();
        assert_eq!(Anchors::load(&p, &env()).unwrap(), Some(a));
        let other = EnvConfig { balls_per_episode: 3, ..env() };
        assert_eq!(Anchors::load(&p, &other).unwrap(), None);
    }

    #[test]
    fn policy_evaluation_is_deterministic() {
        let arch = PolicyArch { image_size: 32, channels: 2, action_count: 3, hidden: 4, frame_stack: 1 };
        let p = Policy::<f32>::new(&arch, &mut seeded(0)).unwrap();
        let a = Anchors { expert: 20.0, random: -17.0 };
        let r1 = evaluate(&p, &env(), 3, ConfounderMode::Confounded, 5, Some(&a)).unwrap();
        let r2 = evaluate(&p, &env(), 3, ConfounderMode::Confounded, 5, Some(&a)).unwrap();
        assert_eq!(r1, r2);
        let m: f64 = r1.per_episode_scores.iter().sum::<i64>() as f64 / 3.0;
        assert_eq!(r1.mean_score, m);
    }

    #[test]
    fn attention_is_a_distribution() {
        let arch = PolicyArch { image_size: 32, channels: 3, action_count: 3, hidden: 4, frame_stack: 1 };
        let p = Policy::<f32>::new(&arch, &mut seeded(1)).unwrap();
        for (state, obs) in sample_frames(&env(), 20, 3).unwrap() {
            let m = attention_map(&p, &[&obs]).unwrap();
            assert!((m.softmax.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(m.softmax.iter().all(|&v| v >= 0.0));
            assert_eq!(m.overlay.pixels.len(), 32 * 32);
            let r = relevant_mass(&m, &state, &env());
            assert!((0.0..=1.0 + 1e-9).contains(&r));
        }
    }

    #[test]
    fn constant_features_give_uniform_attention() {
        let arch = PolicyArch { image_size: 32, channels: 2, action_count: 3, hidden: 4, frame_stack: 1 };
        let mut p = Policy::<f32>::new(&arch, &mut seeded(1)).unwrap();
        // Zero every weight so the map is constant (bias-only).
        for q in p.encoder.params_mut() {
            if q.name.ends_with("weight") {
                q.value.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let obs = sample_frames(&env(), 1, 0).unwrap().remove(0).1;
        let m = attention_map(&p, &[&obs]).unwrap();
        let l = m.softmax.len() as f64;
        assert!(m.softmax.iter().all(|&v| (v - 1.0 / l).abs() < 1e-12));
    }

    #[test]
    fn pgm_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        write_pgm(&p, &Observation { size: 2, pixels: vec![0, 1, 2, 3] }).unwrap();
        let b = fs::read(p).unwrap();
        assert!(b.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&b[b.len() - 4..], &[0, 1, 2, 3]);
    }
}
