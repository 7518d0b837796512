//! Command implementations behind the `oreo` binary. Every command takes a resolved
//! [`RunConfig`] and reads or writes artifacts under its paths.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use oreo_core::crlr::{self, CodedSample};
use oreo_core::evalviz::{self, Agent, Anchors, EvalReport};
use oreo_core::policy::{self, EpochRecord};
use oreo_core::rng::substream;
use oreo_core::vqvae::{self, Vqvae};
use oreo_core::{demodata, Checkpoint, ConfounderMode, DemoDataset, Error, Frames, Policy, RegularizerKind, RunConfig};
use serde_json::json;

/// Applies `--key value` / `--key=value` overrides. Keys without a section resolve when
/// exactly one section has them (`--regularizer` means `--bc.regularizer`).
pub fn apply_overrides(cfg: &mut RunConfig, args: &[String]) -> Result<()> {
    let keys: Vec<&str> = cfg.entries().into_iter().map(|(k, _)| k).collect();
    let mut pairs = Vec::new();
    let mut it = args.iter();
    while let Some(tok) = it.next() {
        let Some(flag) = tok.strip_prefix("--") else { bail!("unexpected argument `{tok}`") };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => (flag.to_string(), it.next().with_context(|| format!("flag --{flag} needs a value"))?.clone()),
        };
        let key = if key.contains('.') || key == "seed" {
            key
        } else {
            let hits: Vec<&&str> = keys.iter().filter(|k| k.rsplit('.').next() == Some(key.as_str())).collect();
            match hits.as_slice() {
                [one] => one.to_string(),
                [] => bail!("unknown key `{key}`"),
                _ => bail!("ambiguous key `{key}`; use one of {}", hits.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(", ")),
            }
        };
        pairs.push(((), key, value));
    }
    for (_, key, value) in RunConfig::kind_first(pairs) {
        cfg.set(&key, &value)?;
    }
    cfg.check()?;
    Ok(())
}

pub fn anchors_path(cfg: &RunConfig) -> PathBuf {
    cfg.root().join("anchors.txt")
}

pub fn vqvae_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint_dir().join(format!("vqvae_k{}.ckpt", cfg.vqvae.codebook_size))
}

pub fn policy_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint_dir().join(format!("policy_{}.ckpt", cfg.bc.regularizer.kind))
}

pub fn bc_metrics_path(cfg: &RunConfig) -> PathBuf {
    cfg.metrics_dir().join(format!("train_bc_{}.jsonl", cfg.bc.regularizer.kind))
}

fn log_line(w: &mut impl Write, v: serde_json::Value) -> Result<()> {
    writeln!(w, "{v}")?;
    w.flush()?;
    Ok(())
}

fn create_log(path: &Path) -> Result<BufWriter<File>> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

/// One metrics record; `eval_score` appears only on scheduled epochs.
pub fn epoch_json(r: &EpochRecord) -> serde_json::Value {
    let mut v = json!({ "epoch": r.epoch, "train_loss": r.train_loss, "val_accuracy": r.val_accuracy });
    if let Some(s) = r.eval_score {
        v["eval_score"] = json!(s);
    }
    v
}

pub fn collect(cfg: &RunConfig) -> Result<DemoDataset> {
    let d = demodata::collect(&cfg.env, cfg.data.episodes, cfg.seed)?;
    demodata::save(&d, &cfg.dataset_dir())?;
    eprintln!("collected {} episodes ({} transitions) in {} mode", d.episodes.len(), d.transition_count(), cfg.env.confounder_mode);
    Ok(d)
}

pub fn load_dataset(cfg: &RunConfig) -> Result<DemoDataset> {
    let d = demodata::load(&cfg.dataset_dir())?;
    if d.manifest.image_size != cfg.env.image_size {
        bail!(Error::ArchitectureMismatch(format!(
            "dataset has {}px frames but env.image_size is {}",
            d.manifest.image_size, cfg.env.image_size
        )));
    }
    Ok(d)
}

/// Training and validation frames.
pub fn split_frames(cfg: &RunConfig, d: &DemoDataset) -> (Frames, Frames) {
    let (tr, va) = d.split(cfg.data.val_episodes);
    (tr.frames(), va.frames())
}

pub fn train_vqvae(cfg: &RunConfig) -> Result<Vqvae<f32>> {
    let d = load_dataset(cfg)?;
    let (train, _) = split_frames(cfg, &d);
    train_vqvae_on(cfg, &train, &vqvae_path(cfg), &cfg.metrics_dir().join(format!("train_vqvae_k{}.jsonl", cfg.vqvae.codebook_size)))
}

pub fn train_vqvae_on(cfg: &RunConfig, train: &Frames, ckpt: &Path, metrics: &Path) -> Result<Vqvae<f32>> {
    let mut log = create_log(metrics)?;
    let mut err = Ok(());
    let model = vqvae::train_vqvae(train, &cfg.vqvae, &cfg.vqvae_train, |epoch, l| {
        eprintln!("vqvae epoch {epoch}: loss {:.5} (recon {:.5})", l.total, l.recon);
        if err.is_ok() {
            err = log_line(&mut log, json!({ "epoch": epoch, "train_loss": l.total, "recon": l.recon, "codebook": l.codebook_term }));
        }
    })?;
    err?;
    Checkpoint::from_vqvae(&model, &cfg.to_text(), &substream(cfg.seed, "vqvae.batches"))?.save(ckpt)?;
    Ok(model)
}

pub fn load_anchors(cfg: &RunConfig) -> Result<Anchors> {
    Ok(Anchors::load_or_compute(&anchors_path(cfg), &cfg.env, cfg.eval.anchor_episodes, cfg.seed)?)
}

pub fn train_bc(cfg: &RunConfig) -> Result<Policy<f32>> {
    let d = load_dataset(cfg)?;
    let (train, val) = split_frames(cfg, &d);
    let vq = if cfg.bc.regularizer.kind == RegularizerKind::Oreo {
        let path = vqvae_path(cfg);
        if !path.exists() {
            bail!(Error::MissingArtifact(format!("{} (run train-vqvae first)", path.display())));
        }
        Some(Checkpoint::load(&path)?.to_vqvae()?)
    } else {
        None
    };
    train_bc_on(cfg, &train, &val, vq.as_ref(), &policy_path(cfg), &bc_metrics_path(cfg))
}

pub fn train_bc_on(
    cfg: &RunConfig,
    train: &Frames,
    val: &Frames,
    vq: Option<&Vqvae<f32>>,
    ckpt: &Path,
    metrics: &Path,
) -> Result<Policy<f32>> {
    let anchors = if cfg.bc.eval_every > 0 { Some(load_anchors(cfg)?) } else { None };
    let mode = cfg.eval.modes.first().copied().unwrap_or(ConfounderMode::Confounded);
    let eval = |p: &Policy<f32>| {
        Ok(evalviz::evaluate(p, &cfg.env, cfg.eval.n_episodes, mode, cfg.seed, anchors.as_ref())?.normalized_score)
    };
    let mut log = create_log(metrics)?;
    let mut err = Ok(());
    let kind = cfg.bc.regularizer.kind;
    let policy = policy::train_bc(train, val, &cfg.bc, vq, eval, |r| {
        eprintln!(
            "bc[{kind}] epoch {}: loss {:.4} val_acc {:.3}{}",
            r.epoch,
            r.train_loss,
            r.val_accuracy,
            r.eval_score.map(|s| format!(" eval {s:.3}")).unwrap_or_default()
        );
        if err.is_ok() {
            err = log_line(&mut log, epoch_json(r));
        }
    })?;
    err?;
    Checkpoint::from_policy(&policy, &cfg.to_text(), &substream(cfg.seed, "bc.masks"))?.save(ckpt)?;
    Ok(policy)
}

pub fn load_policy(cfg: &RunConfig) -> Result<Policy<f32>> {
    let path = policy_path(cfg);
    if !path.exists() {
        bail!(Error::MissingArtifact(format!("{} (run train-bc first)", path.display())));
    }
    Ok(Checkpoint::load(&path)?.to_policy()?)
}

/// Evaluates the configured agent in every `eval.modes` mode and writes the reports.
pub fn eval(cfg: &RunConfig) -> Result<Vec<EvalReport>> {
    let anchors = load_anchors(cfg)?;
    let policy = if cfg.eval.agent == "policy" { Some(load_policy(cfg)?) } else { None };
    let mut reports = Vec::new();
    for &mode in &cfg.eval.modes {
        let mut agent = match (cfg.eval.agent.as_str(), &policy) {
            ("expert", _) => Agent::Expert,
            ("random", _) => Agent::Random(substream(cfg.seed, "eval.random")),
            (_, Some(p)) => Agent::Policy(p),
            _ => unreachable!("eval.agent validated by the config"),
        };
        let r = evalviz::evaluate_agent(&mut agent, &cfg.env, cfg.eval.n_episodes, mode, cfg.seed, Some(&anchors))?;
        println!("{mode}: mean score {:.2} ± {:.2} over {} episodes, normalized {:.3}", r.mean_score, r.std_score, r.n_episodes, r.normalized_score);
        reports.push(r);
    }
    let name = match cfg.eval.agent.as_str() {
        "policy" => format!("eval_{}.json", cfg.bc.regularizer.kind),
        a => format!("eval_{a}.json"),
    };
    let path = cfg.metrics_dir().join(name);
    fs::create_dir_all(cfg.metrics_dir())?;
    fs::write(&path, serde_json::to_string_pretty(&reports)?)?;
    Ok(reports)
}

/// Mean attention mass on ball and paddle cells over the sampled frames.
pub fn attention_mass(cfg: &RunConfig, policy: &Policy<f32>, out_dir: Option<&Path>) -> Result<f64> {
    let frames = evalviz::sample_frames(&cfg.env, cfg.eval.attention_frames, cfg.seed)?;
    let mut total = 0.0;
    for (i, (state, obs)) in frames.iter().enumerate() {
        let stack: Vec<_> = std::iter::repeat(obs).take(policy.arch.frame_stack).collect();
        let map = evalviz::attention_map(policy, &stack)?;
        total += evalviz::relevant_mass(&map, state, &cfg.env);
        if let Some(dir) = out_dir {
            evalviz::write_pgm(&dir.join(format!("frame_{i:03}.pgm")), obs)?;
            evalviz::write_pgm(&dir.join(format!("overlay_{i:03}.pgm")), &map.overlay)?;
        }
    }
    Ok(total / frames.len().max(1) as f64)
}

pub fn attention(cfg: &RunConfig) -> Result<f64> {
    let policy = load_policy(cfg)?;
    let kind = cfg.bc.regularizer.kind;
    let dir = cfg.root().join("attention").join(kind.to_string());
    let mass = attention_mass(cfg, &policy, Some(&dir))?;
    println!("{kind}: mean attention mass on ball and paddle cells {mass:.4}; overlays in {}", dir.display());
    let mut summary = json!({ "kind": kind.to_string(), "relevant_mass": mass, "frames": cfg.eval.attention_frames });
    if kind != RegularizerKind::None {
        let mut base = cfg.clone();
        base.bc.regularizer.kind = RegularizerKind::None;
        if policy_path(&base).exists() {
            let bc = attention_mass(cfg, &load_policy(&base)?, None)?;
            println!("ratio {kind} / none: {:.3}", mass / bc);
            summary["ratio_vs_none"] = json!(mass / bc);
        }
    }
    fs::create_dir_all(cfg.metrics_dir())?;
    fs::write(cfg.metrics_dir().join(format!("attention_{kind}.json")), summary.to_string())?;
    Ok(mass)
}

pub struct CrlrSummary {
    pub regularizer_start: f64,
    pub regularizer_end: f64,
    pub val_accuracy: f64,
}

pub fn crlr(cfg: &RunConfig) -> Result<CrlrSummary> {
    let d = load_dataset(cfg)?;
    let (train, val) = split_frames(cfg, &d);
    let path = vqvae_path(cfg);
    if !path.exists() {
        bail!(Error::MissingArtifact(format!("{} (run train-vqvae first)", path.display())));
    }
    let vq = Checkpoint::load(&path)?.to_vqvae()?;
    crlr_on(cfg, &vq, &train, &val, &cfg.metrics_dir().join("crlr.jsonl"))
}

pub fn coded_samples(vq: &Vqvae<f32>, frames: &Frames) -> Result<Vec<CodedSample>> {
    Ok(vq.code_grids(frames)?.iter().zip(&frames.actions).map(|(g, &a)| CodedSample::from_grid(g, a)).collect())
}

pub fn crlr_on(cfg: &RunConfig, vq: &Vqvae<f32>, train: &Frames, val: &Frames, metrics: &Path) -> Result<CrlrSummary> {
    let samples = coded_samples(vq, train)?;
    let k = vq.arch.codebook_size;
    let start = crlr::causal_regularizer(&samples, k, &crlr::SampleWeights::ones(samples.len()).effective())?;
    let mut log = create_log(metrics)?;
    let mut err = Ok(());
    let res = crlr::train_crlr(&samples, k, cfg.env.action_count, &cfg.crlr, |r| {
        if err.is_ok() {
            err = log_line(&mut log, json!({ "iteration": r.iteration, "loss": r.loss, "regularizer": r.regularizer }));
        }
    })?;
    err?;
    let end = crlr::causal_regularizer(&samples, k, &res.weights.effective())?;
    let vs = coded_samples(vq, val)?;
    let val_accuracy = if vs.is_empty() {
        f64::NAN
    } else {
        vs.iter().filter(|s| res.classifier.act(s) == s.action).count() as f64 / vs.len() as f64
    };
    if res.degenerate {
        eprintln!("warning: every code slot has a single occupied category; the regularizer is 0");
    }
    println!("crlr: regularizer {start:.4} -> {end:.4}, val accuracy {val_accuracy:.3}");
    Ok(CrlrSummary { regularizer_start: start, regularizer_end: end, val_accuracy })
}

/// OREO over the `sweep.p × sweep.codebook_sizes` grid; one metrics log per point.
pub fn sweep(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let d = load_dataset(cfg)?;
    let (train, val) = split_frames(cfg, &d);
    let dir = cfg.metrics_dir().join("sweep");
    let ck = cfg.checkpoint_dir().join("sweep");
    let mut logs = Vec::new();
    for &k in &cfg.sweep.codebook_sizes {
        let mut c = cfg.clone();
        c.set("vqvae.codebook_size", &k.to_string())?;
        let vq = train_vqvae_on(&c, &train, &ck.join(format!("vqvae_k{k}.ckpt")), &dir.join(format!("vqvae_k{k}.jsonl")))?;
        for &p in &cfg.sweep.p {
            c.set("bc.regularizer", "oreo")?;
            c.set("bc.p", &p.to_string())?;
            c.check()?;
            let log = dir.join(format!("oreo_p{p}_k{k}.jsonl"));
            train_bc_on(&c, &train, &val, Some(&vq), &ck.join(format!("policy_p{p}_k{k}.ckpt")), &log)?;
            logs.push(log);
        }
    }
    Ok(logs)
}

pub fn run(command: &str, cfg: &RunConfig) -> Result<()> {
    match command {
        "collect" => collect(cfg).map(drop),
        "train-vqvae" => train_vqvae(cfg).map(drop),
        "train-bc" => train_bc(cfg).map(drop),
        "eval" => eval(cfg).map(drop),
        "attention" => attention(cfg).map(drop),
        "crlr" => crlr(cfg).map(drop),
        "sweep" => sweep(cfg).map(|logs| println!("wrote {} metrics logs", logs.len())),
        "config" => {
            print!("{}", cfg.to_text());
            Ok(())
        }
        other => bail!("unknown command `{other}`"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn overrides_resolve_dotted_short_and_inline_forms() {
        let mut c = RunConfig::default();
        apply_overrides(&mut c, &args("--bc.p 0.25 --regularizer oreo --vqvae.codebook_size=64 --seed 9")).unwrap();
        assert_eq!(c.bc.regularizer.kind, RegularizerKind::Oreo);
        assert_eq!(c.bc.regularizer.p, 0.25);
        assert_eq!(c.vqvae.codebook_size, 64);
        assert_eq!(c.seed, 9);
        let mut c = RunConfig::default();
        apply_overrides(&mut c, &args("--regularizer dropblock")).unwrap();
        assert_eq!(c.bc.regularizer.p, 0.3, "a new kind starts from its default p");
    }

    #[test]
    fn bad_overrides_fail() {
        for a in ["--nope 1", "--lr 0.1", "bare", "--bc.p"] {
            assert!(apply_overrides(&mut RunConfig::default(), &args(a)).is_err(), "{a}");
        }
    }

    #[test]
    fn metrics_record_omits_unscheduled_eval() {
        let r = EpochRecord { epoch: 2, train_loss: 0.5, val_accuracy: 0.9, eval_score: None };
        let v = epoch_json(&r);
        assert!(v.get("eval_score").is_none());
        let v = epoch_json(&EpochRecord { eval_score: Some(0.3), ..r });
        assert_eq!(v["eval_score"], 0.3);
    }
}
