//! One function per subcommand.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use contourlab::contour::{group_by_recording, read_contours, segment_track, write_contours, Contour};
use contourlab::fsutil::write_atomic;
use contourlab::ingest::{self, load_manifest_file};
use contourlab::matrix::Matrix;
use contourlab::models::{embed as embed_matrix, load_checkpoint, save_checkpoint};
use contourlab::pipeline::{
    self, combine_features, contour_labels, crossval_eval, encode_labels, parse_reports, render_report,
    sample_contiguous_pairs, sample_contours, sample_file_pairs, sample_triples, seeded, train_pseudotask_with,
    EvalReport, TaskKind,
};
use contourlab::statfeat::feature_matrix;
use contourlab::verify::{run_suite, VerifyConfig, GRADCHECK_TOLERANCE};
use log::info;
use serde::Serialize;

use crate::config::RunConfig;

pub enum Source {
    Contours(PathBuf),
    Manifest(PathBuf),
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn echo_beside(cfg: &RunConfig, file: &Path) -> Result<()> {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".config.toml");
    let path = file.with_file_name(name);
    write_atomic(&path, cfg.to_toml().as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn echo_in(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let path = dir.join("config.toml");
    write_atomic(&path, cfg.to_toml().as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn segment_manifest(cfg: &RunConfig, manifest: &Path) -> Result<Vec<Contour>> {
    let m = load_manifest_file(manifest)?;
    let mut out = Vec::new();
    for track in m.load_tracks(cfg.frame_period)? {
        out.extend(segment_track(&track, cfg.voicing_threshold)?.contours);
    }
    Ok(out)
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (tracks, manifest) = ingest::generate_synthetic_corpus(&cfg.synth)?;
    let path = ingest::write_corpus(out, &tracks, &manifest)?;
    echo_in(cfg, out)?;
    info!("wrote {} recordings, manifest {}", tracks.len(), path.display());
    Ok(())
}

pub fn segment(cfg: &RunConfig, manifest: &Path, out: &Path, sample: Option<usize>) -> Result<()> {
    let mut contours = segment_manifest(cfg, manifest)?;
    if let Some(n) = sample {
        contours = sample_contours(&contours, n, &mut seeded(cfg.seed, 2));
    }
    write_contours(out, &contours)?;
    echo_beside(cfg, out)?;
    info!("wrote {} contours to {}", contours.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct PairRow<'a> {
    a: (&'a str, usize),
    b: (&'a str, usize),
    label: usize,
}

#[derive(Serialize)]
struct TripleRow<'a> {
    recording_id: &'a str,
    start_frames: [usize; 3],
}

pub fn pairs(cfg: &RunConfig, contours: &Path, task: &str, count: Option<usize>, out: &Path) -> Result<()> {
    let kind: TaskKind = task.parse()?;
    let seqs = group_by_recording(read_contours(contours)?);
    let n = count.unwrap_or(cfg.train.train_samples);
    let mut rng = seeded(cfg.seed, 2);
    let text = match kind {
        TaskKind::SlotFill => {
            let t = sample_triples(&seqs, n, &mut rng)?;
            let rows: Vec<TripleRow> = t
                .iter()
                .map(|t| TripleRow {
                    recording_id: &t.p1.recording_id,
                    start_frames: [t.p1.start_frame, t.p2.start_frame, t.p3.start_frame],
                })
                .collect();
            serde_json::to_string_pretty(&rows)?
        }
        _ => {
            let p = if kind == TaskKind::File {
                sample_file_pairs(&seqs, n, &mut rng)?
            } else {
                sample_contiguous_pairs(&seqs, n, &mut rng)?
            };
            let rows: Vec<PairRow> = p
                .iter()
                .map(|p| PairRow {
                    a: (&p.a.recording_id, p.a.start_frame),
                    b: (&p.b.recording_id, p.b.start_frame),
                    label: p.label,
                })
                .collect();
            serde_json::to_string_pretty(&rows)?
        }
    };
    write_atomic(out, (text + "\n").as_bytes()).with_context(|| format!("writing {}", out.display()))?;
    echo_beside(cfg, out)?;
    info!("wrote {n} {kind} samples to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct History<'a> {
    task: String,
    best_epoch: usize,
    baseline_val_loss: f64,
    epochs: &'a [pipeline::EpochRecord],
}

#[derive(Serialize)]
struct SplitDoc<'a> {
    train: &'a [String],
    val: &'a [String],
}

pub fn train(cfg: &RunConfig, task: &str, src: &Source, out: &Path) -> Result<()> {
    let kind: TaskKind = task.parse()?;
    let contours = match src {
        Source::Contours(p) => read_contours(p)?,
        Source::Manifest(p) => segment_manifest(cfg, p)?,
    };
    let corpus = group_by_recording(contours);
    let outcome = train_pseudotask_with(kind, &corpus, &cfg.train, |r| {
        match (r.val_accuracy, r.val_terms) {
            (Some(acc), _) => info!(
                "epoch {:3} train {:.4} val {:.4} acc {:.3} lr {:.1e}",
                r.epoch, r.train_loss, r.val_metric, acc, r.lr
            ),
            (None, Some(t)) => info!(
                "epoch {:3} train {:.4} val {:.4} [{:.4} {:.4} {:.4}] lr {:.1e}",
                r.epoch, r.train_loss, r.val_metric, t[0], t[1], t[2], r.lr
            ),
            _ => info!("epoch {:3} train {:.4} val {:.4}", r.epoch, r.train_loss, r.val_metric),
        }
        std::ops::ControlFlow::Continue(())
    })?;
    save_checkpoint(&outcome.checkpoint, &out.join("model.ckpt.json"))?;
    write_json(
        &out.join("history.json"),
        &History {
            task: kind.to_string(),
            best_epoch: outcome.best_epoch,
            baseline_val_loss: outcome.baseline_metric,
            epochs: &outcome.history,
        },
    )?;
    write_json(
        &out.join("split.json"),
        &SplitDoc {
            train: &outcome.train_recordings,
            val: &outcome.val_recordings,
        },
    )?;
    echo_in(cfg, out)?;
    info!("best epoch {} val loss {:.4}", outcome.best_epoch, outcome.best().val_metric);
    Ok(())
}

pub fn embed(cfg: &RunConfig, checkpoint: &Path, contours: &Path, out: &Path) -> Result<()> {
    let bundle = load_checkpoint(checkpoint)?;
    let m = embed_matrix(&bundle, &read_contours(contours)?)?;
    m.write_csv(out)?;
    echo_beside(cfg, out)?;
    info!("wrote {}x{} embeddings to {}", m.rows, m.columns.len(), out.display());
    Ok(())
}

pub fn features(cfg: &RunConfig, contours: &Path, out: &Path) -> Result<()> {
    let m = feature_matrix(&read_contours(contours)?, cfg.frame_period)?;
    m.write_csv(out)?;
    echo_beside(cfg, out)?;
    info!("wrote {}x{} features to {}", m.rows, m.columns.len(), out.display());
    Ok(())
}

fn named_block(spec: &str) -> Result<(String, PathBuf)> {
    match spec.split_once('=') {
        Some((name, path)) if !name.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        Some(_) => bail!("feature block `{spec}` has an empty name"),
        None => {
            let p = PathBuf::from(spec);
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .with_context(|| format!("cannot name feature block `{spec}`"))?;
            Ok((name, p))
        }
    }
}

fn read_blocks(specs: &[String]) -> Result<Vec<(String, Matrix)>> {
    specs
        .iter()
        .map(|s| {
            let (name, path) = named_block(s)?;
            let m = Matrix::read_csv(&path).with_context(|| format!("reading {}", path.display()))?;
            Ok((name, m))
        })
        .collect()
}

pub fn combine(cfg: &RunConfig, specs: &[String], out: &Path) -> Result<()> {
    let (name, m) = combine_features(&read_blocks(specs)?)?;
    m.write_csv(out)?;
    echo_beside(cfg, out)?;
    info!("wrote {name} ({}x{}) to {}", m.rows, m.columns.len(), out.display());
    Ok(())
}

fn task_labels(labels: &Path, contours: Option<&Path>, task: &str) -> Result<Vec<String>> {
    let is_csv = labels.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let text = std::fs::read_to_string(labels).with_context(|| format!("reading {}", labels.display()))?;
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap_or_default().split(',').map(str::trim).collect();
        let col = header
            .iter()
            .position(|h| *h == task)
            .with_context(|| format!("{} has no `{task}` column", labels.display()))?;
        lines
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                l.split(',')
                    .nth(col)
                    .map(|v| v.trim().to_string())
                    .with_context(|| format!("{} row {} is short", labels.display(), i + 1))
            })
            .collect()
    } else {
        let contours = contours.context("--contours is required when --labels is a manifest")?;
        let manifest = load_manifest_file(labels)?;
        Ok(contour_labels(&read_contours(contours)?, &manifest, task)?)
    }
}

pub fn eval(
    cfg: &RunConfig,
    features: &[String],
    labels: &Path,
    contours: Option<&Path>,
    tasks: &[String],
    out: &Path,
) -> Result<()> {
    let blocks = read_blocks(features)?;
    let mut reports: Vec<EvalReport> = Vec::new();
    for task in tasks {
        let (ids, classes) = encode_labels(&task_labels(labels, contours, task)?);
        for (name, m) in &blocks {
            let r = crossval_eval(m, &ids, &classes, task, name, &cfg.eval)?;
            info!(
                "{task} / {name}: acc {:.3} ± {:.3}, macro-F1 {:.3}, chance {:.3}",
                r.mean_acc, r.std_acc, r.mean_f1, r.chance
            );
            reports.push(r);
        }
    }
    write_json(out, &reports)?;
    echo_beside(cfg, out)
}

pub fn report(inputs: &[PathBuf], out: &Path) -> Result<()> {
    let mut all = Vec::new();
    for p in inputs {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        all.extend(parse_reports(&text).with_context(|| format!("parsing {}", p.display()))?);
    }
    let r = render_report(&all);
    write_atomic(&out.join("report.json"), r.json.as_bytes()).context("writing report.json")?;
    write_atomic(&out.join("report.txt"), r.table.as_bytes()).context("writing report.txt")?;
    print!("{}", r.table);
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, seeds: u64, out: Option<&Path>) -> Result<()> {
    let vc = VerifyConfig {
        seeds: (cfg.seed..cfg.seed + seeds).collect(),
        ..VerifyConfig::default()
    };
    let lines = run_suite(&vc, |l| {
        println!(
            "{} seed {} max_rel_error {:.3e} over {} entries ({} skipped at kinks): {}",
            l.check,
            l.seed,
            l.max_rel_error,
            l.checked,
            l.skipped,
            if l.passed() { "ok" } else { "FAILED" }
        )
    })?;
    if let Some(p) = out {
        write_json(p, &lines)?;
    }
    let failed = lines.iter().filter(|l| !l.passed()).count();
    if failed > 0 {
        bail!("gradcheck: {failed} of {} checks exceed {GRADCHECK_TOLERANCE:e}", lines.len());
    }
    Ok(())
}
