//! Pseudotask datasets, training loops and downstream evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::ControlFlow;
use std::str::FromStr;

use contourlab_autodiff::{adam_step, AdamState, ParamSet, PlateauSchedule, Tape};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contour::{Contour, ContourSequence};
use crate::ingest::Manifest;
use crate::matrix::Matrix;
use crate::models::{
    AnyModel, Architecture, CheckpointBundle, DownstreamMlp, MlpConfig, ModelError, SlotFillConfig,
    VggConfig, SLOT_HIDDEN,
};
use crate::statfeat::{FeatureError, ZStats};
use crate::CONTOUR_LEN;

/// Start-frame distance between adjacent contours.
pub const HOP: usize = CONTOUR_LEN;
const EVAL_BATCH: usize = 250;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("infeasible corpus: {0}")]
    Infeasible(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite training loss at epoch {epoch}, batch {batch} (lr {lr:e}, last finite loss {last_finite})")]
    NonFinite {
        epoch: usize,
        batch: usize,
        lr: f64,
        last_finite: f64,
    },
    #[error("class `{class}` has {count} samples, at least {needed} are needed")]
    InsufficientClass {
        class: String,
        count: usize,
        needed: usize,
    },
    #[error("row mismatch: {0}")]
    Rows(String),
    #[error("missing label: {0}")]
    Label(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

impl From<contourlab_autodiff::AutodiffError> for PipelineError {
    fn from(e: contourlab_autodiff::AutodiffError) -> Self {
        PipelineError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Which criterion produced a pair label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairScheme {
    File,
    Contiguous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub a: Contour,
    pub b: Contour,
    pub label: usize,
    pub scheme: PairScheme,
}

/// Label a pair receives under `scheme`.
pub fn pair_label(scheme: PairScheme, a: &Contour, b: &Contour) -> usize {
    let same = a.recording_id == b.recording_id;
    let adjacent = a.start_frame.abs_diff(b.start_frame) == HOP;
    match scheme {
        PairScheme::File => same as usize,
        PairScheme::Contiguous => (same && adjacent) as usize,
    }
}

/// Three consecutive contours of one recording.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripleSample {
    pub p1: Contour,
    pub p2: Contour,
    pub p3: Contour,
}

fn distinct_pair(rng: &mut impl Rng, n: usize) -> (usize, usize) {
    let i = rng.random_range(0..n);
    let mut j = rng.random_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    (i, j)
}

fn cross_pair(
    rng: &mut impl Rng,
    seqs: &[&ContourSequence],
    scheme: PairScheme,
) -> PairSample {
    let (r1, r2) = distinct_pair(rng, seqs.len());
    let a = &seqs[r1].contours[rng.random_range(0..seqs[r1].len())];
    let b = &seqs[r2].contours[rng.random_range(0..seqs[r2].len())];
    PairSample {
        a: a.clone(),
        b: b.clone(),
        label: 0,
        scheme,
    }
}

/// Same-recording vs different-recording pairs, ⌈n/2⌉ positives.
///
/// Positives pick a recording uniformly among those with two or more
/// contours; negatives pick two distinct recordings uniformly.
pub fn sample_file_pairs(
    seqs: &[ContourSequence],
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<PairSample>> {
    let nonempty: Vec<&ContourSequence> = seqs.iter().filter(|s| !s.is_empty()).collect();
    if nonempty.len() < 2 {
        return Err(PipelineError::Infeasible(format!(
            "file pairs need at least 2 recordings with contours, found {}",
            nonempty.len()
        )));
    }
    let multi: Vec<&ContourSequence> = nonempty.iter().copied().filter(|s| s.len() >= 2).collect();
    let n_pos = n.div_ceil(2);
    if n_pos > 0 && multi.is_empty() {
        return Err(PipelineError::Infeasible(
            "no recording has two contours to form a positive pair".into(),
        ));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n_pos {
        let s = multi[rng.random_range(0..multi.len())];
        let (i, j) = distinct_pair(rng, s.len());
        out.push(PairSample {
            a: s.contours[i].clone(),
            b: s.contours[j].clone(),
            label: 1,
            scheme: PairScheme::File,
        });
    }
    for _ in n_pos..n {
        out.push(cross_pair(rng, &nonempty, PairScheme::File));
    }
    out.shuffle(rng);
    Ok(out)
}

fn adjacencies(s: &ContourSequence) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..s.contours.len() {
        for j in i + 1..s.contours.len() {
            let d = s.contours[j].start_frame - s.contours[i].start_frame;
            if d == HOP {
                out.push((i, j));
            }
            if d >= HOP {
                break;
            }
        }
    }
    out
}

/// Some ordered pair of distinct contours is further apart than one hop.
fn has_distant_pair(s: &ContourSequence) -> bool {
    match (s.contours.first(), s.contours.last()) {
        (Some(a), Some(b)) => b.start_frame - a.start_frame > HOP,
        _ => false,
    }
}

/// Adjacent vs non-adjacent pairs. Positives are ordered earlier-first;
/// negatives are half same-recording at any other separation (either
/// order) and half cross-recording, the odd one going cross-recording.
pub fn sample_contiguous_pairs(
    seqs: &[ContourSequence],
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<PairSample>> {
    let nonempty: Vec<&ContourSequence> = seqs.iter().filter(|s| !s.is_empty()).collect();
    let adj: Vec<(&ContourSequence, Vec<(usize, usize)>)> = nonempty
        .iter()
        .map(|s| (*s, adjacencies(s)))
        .filter(|(_, a)| !a.is_empty())
        .collect();
    let distant: Vec<&ContourSequence> = nonempty.iter().copied().filter(|s| has_distant_pair(s)).collect();
    let n_pos = n.div_ceil(2);
    let n_neg = n - n_pos;
    let n_same = n_neg / 2;
    let n_cross = n_neg - n_same;
    if n_pos > 0 && adj.is_empty() {
        return Err(PipelineError::Infeasible("no adjacent contours anywhere".into()));
    }
    if n_same > 0 && distant.is_empty() {
        return Err(PipelineError::Infeasible(
            "no recording has non-adjacent contours for same-file negatives".into(),
        ));
    }
    if n_cross > 0 && nonempty.len() < 2 {
        return Err(PipelineError::Infeasible(format!(
            "cross-file negatives need at least 2 recordings, found {}",
            nonempty.len()
        )));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n_pos {
        let (s, pairs) = &adj[rng.random_range(0..adj.len())];
        let (i, j) = pairs[rng.random_range(0..pairs.len())];
        out.push(PairSample {
            a: s.contours[i].clone(),
            b: s.contours[j].clone(),
            label: 1,
            scheme: PairScheme::Contiguous,
        });
    }
    for _ in 0..n_same {
        let s = distant[rng.random_range(0..distant.len())];
        let (a, b) = loop {
            let (i, j) = distinct_pair(rng, s.len());
            let (a, b) = (&s.contours[i], &s.contours[j]);
            if a.start_frame.abs_diff(b.start_frame) != HOP {
                break (a, b);
            }
        };
        out.push(PairSample {
            a: a.clone(),
            b: b.clone(),
            label: 0,
            scheme: PairScheme::Contiguous,
        });
    }
    for _ in 0..n_cross {
        out.push(cross_pair(rng, &nonempty, PairScheme::Contiguous));
    }
    out.shuffle(rng);
    Ok(out)
}

/// All `(s, s+100, s+200)` windows, as (sequence, index of p1, p2, p3).
fn triple_windows(seqs: &[ContourSequence]) -> Vec<(usize, [usize; 3])> {
    let mut out = Vec::new();
    for (si, s) in seqs.iter().enumerate() {
        let c = &s.contours;
        for i in 0..c.len().saturating_sub(2) {
            if c[i + 1].start_frame == c[i].start_frame + HOP
                && c[i + 2].start_frame == c[i].start_frame + 2 * HOP
            {
                out.push((si, [i, i + 1, i + 2]));
            }
        }
    }
    out
}

/// Uniform draws (with replacement) over every consecutive window.
pub fn sample_triples(
    seqs: &[ContourSequence],
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<TripleSample>> {
    let windows = triple_windows(seqs);
    if windows.is_empty() {
        return Err(PipelineError::Infeasible(
            "no recording has three consecutive contours".into(),
        ));
    }
    Ok((0..n)
        .map(|_| {
            let (si, [i, j, k]) = windows[rng.random_range(0..windows.len())];
            let c = &seqs[si].contours;
            TripleSample {
                p1: c[i].clone(),
                p2: c[j].clone(),
                p3: c[k].clone(),
            }
        })
        .collect())
}

/// Shuffles recordings and holds out `fraction` of them (at least
/// `min_each`, leaving at least `min_each` for training).
pub fn split_by_recording(
    seqs: &[ContourSequence],
    fraction: f64,
    min_each: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<ContourSequence>, Vec<ContourSequence>)> {
    let usable: Vec<usize> = (0..seqs.len()).filter(|&i| !seqs[i].is_empty()).collect();
    if usable.len() < 2 * min_each {
        return Err(PipelineError::Infeasible(format!(
            "{} recordings with contours cannot be split into training and validation sets of at least {min_each}",
            usable.len()
        )));
    }
    let mut order = usable.clone();
    order.shuffle(rng);
    let n_val = ((fraction * usable.len() as f64).round() as usize)
        .max(min_each)
        .min(usable.len() - min_each);
    let val_set: std::collections::HashSet<usize> = order[..n_val].iter().copied().collect();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for i in usable {
        if val_set.contains(&i) {
            val.push(seqs[i].clone());
        } else {
            train.push(seqs[i].clone());
        }
    }
    Ok((train, val))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    File,
    Contiguous,
    #[serde(rename = "slotfill")]
    SlotFill,
}

impl FromStr for TaskKind {
    type Err = PipelineError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "file" => Ok(TaskKind::File),
            "contiguous" => Ok(TaskKind::Contiguous),
            "slotfill" => Ok(TaskKind::SlotFill),
            _ => Err(PipelineError::Config(format!(
                "unknown task `{s}` (expected file, contiguous or slotfill)"
            ))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::File => "file",
            TaskKind::Contiguous => "contiguous",
            TaskKind::SlotFill => "slotfill",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub initial_lr: f64,
    pub lr_floor: f64,
    pub decay_factor: f64,
    pub patience: usize,
    pub seed: u64,
    pub width_multiplier: f64,
    pub augmentation: bool,
    pub max_shift_cents: f64,
    /// Pairs or triples in the training set.
    pub train_samples: usize,
    pub val_samples: usize,
    pub val_fraction: f64,
    /// Draw a fresh training set every epoch instead of reusing one.
    pub resample_each_epoch: bool,
    pub slot_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 50,
            max_epochs: 60,
            initial_lr: 1e-4,
            lr_floor: 1e-7,
            decay_factor: 0.1,
            patience: 5,
            seed: 0,
            width_multiplier: 1.0,
            augmentation: true,
            max_shift_cents: crate::contour::DEFAULT_MAX_SHIFT,
            train_samples: 2000,
            val_samples: 500,
            val_fraction: 0.1,
            resample_each_epoch: false,
            slot_hidden: SLOT_HIDDEN,
        }
    }
}

pub const EPOCH_RANGE: std::ops::RangeInclusive<usize> = 30..=100;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !EPOCH_RANGE.contains(&self.max_epochs) {
            return bad(format!(
                "max_epochs {} outside {}..={}",
                self.max_epochs,
                EPOCH_RANGE.start(),
                EPOCH_RANGE.end()
            ));
        }
        if !(self.initial_lr > 0.0 && self.lr_floor > 0.0 && self.lr_floor <= self.initial_lr) {
            return bad("need 0 < lr_floor <= initial_lr".into());
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) || self.patience == 0 {
            return bad("need decay_factor in (0, 1) and patience >= 1".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction {} outside (0, 1)", self.val_fraction));
        }
        if self.train_samples == 0 || self.val_samples == 0 {
            return bad("train_samples and val_samples must be positive".into());
        }
        if self.max_shift_cents < 0.0 {
            return bad("max_shift_cents must be non-negative".into());
        }
        Ok(())
    }

    pub fn architecture(&self, kind: TaskKind) -> Architecture {
        match kind {
            TaskKind::File | TaskKind::Contiguous => {
                Architecture::Siamese(VggConfig::with_width(self.width_multiplier))
            }
            TaskKind::SlotFill => Architecture::SlotFill(SlotFillConfig {
                hidden: self.slot_hidden,
                ..SlotFillConfig::default()
            }),
        }
    }

    pub fn schedule(&self) -> PlateauSchedule {
        PlateauSchedule {
            floor_lr: self.lr_floor,
            decay_factor: self.decay_factor,
            patience: self.patience,
            ..PlateauSchedule::new(self.initial_lr)
        }
    }
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation loss; lower is better.
    pub val_metric: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    /// Slot-fill loss terms: reconstruction of p1, of p3, prediction of p2.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_terms: Option<[f64; 3]>,
}

/// Learning-rate and best-epoch bookkeeping shared by every training loop.
#[derive(Clone, Debug)]
pub struct EpochDriver {
    schedule: PlateauSchedule,
    best: f64,
    best_epoch: usize,
    epoch: usize,
}

impl EpochDriver {
    /// `baseline` is the validation metric before the first update.
    pub fn new(schedule: PlateauSchedule, baseline: Option<f64>) -> Self {
        let schedule = match baseline {
            Some(b) => schedule.with_baseline(b),
            None => schedule,
        };
        EpochDriver {
            schedule,
            best: f64::INFINITY,
            best_epoch: 0,
            epoch: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.schedule.current_lr
    }

    /// Records the metric of the epoch just finished; true if it is the best
    /// so far.
    pub fn finish_epoch(&mut self, metric: f64) -> bool {
        self.epoch += 1;
        self.schedule.update(metric);
        if metric < self.best {
            self.best = metric;
            self.best_epoch = self.epoch;
            true
        } else {
            false
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: CheckpointBundle,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub baseline_metric: f64,
    pub train_recordings: Vec<String>,
    pub val_recordings: Vec<String>,
}

impl TrainOutcome {
    pub fn best(&self) -> &EpochRecord {
        &self.history[self.best_epoch - 1]
    }
}

enum Dataset {
    Pairs(Vec<PairSample>),
    Triples(Vec<TripleSample>),
}

impl Dataset {
    fn len(&self) -> usize {
        match self {
            Dataset::Pairs(p) => p.len(),
            Dataset::Triples(t) => t.len(),
        }
    }
}

fn sample_dataset(kind: TaskKind, seqs: &[ContourSequence], n: usize, rng: &mut impl Rng) -> Result<Dataset> {
    Ok(match kind {
        TaskKind::File => Dataset::Pairs(sample_file_pairs(seqs, n, rng)?),
        TaskKind::Contiguous => Dataset::Pairs(sample_contiguous_pairs(seqs, n, rng)?),
        TaskKind::SlotFill => Dataset::Triples(sample_triples(seqs, n, rng)?),
    })
}

fn shifted(c: &Contour, shift: f64) -> Vec<f64> {
    let mut v = c.values_cents.clone();
    v[..c.valid_length].iter_mut().for_each(|x| *x += shift);
    v
}

struct Shifts {
    max: f64,
}

impl Shifts {
    fn draw(&self, rng: &mut impl Rng) -> f64 {
        if self.max > 0.0 {
            rng.random_range(-self.max..=self.max)
        } else {
            0.0
        }
    }
}

struct BatchResult {
    loss_sum: f64,
    correct: usize,
    terms_sum: [f64; 3],
}

/// Forward (and, when `train` is given, backward + Adam) over one batch.
fn run_batch(
    model: &mut AnyModel<f32>,
    data: &Dataset,
    idx: &[usize],
    augment: Option<(&Shifts, &mut ChaCha8Rng)>,
    train: Option<&mut AdamState<f32>>,
) -> Result<BatchResult> {
    let n = idx.len() as f64;
    let mut out = BatchResult {
        loss_sum: 0.0,
        correct: 0,
        terms_sum: [0.0; 3],
    };
    let grads = match (data, &*model) {
        (Dataset::Pairs(pairs), AnyModel::Siamese(m)) => {
            let (mut a, mut b) = (Vec::with_capacity(idx.len()), Vec::with_capacity(idx.len()));
            let labels: Vec<usize> = idx.iter().map(|&i| pairs[i].label).collect();
            match augment {
                Some((s, rng)) => {
                    for &i in idx {
                        a.push(shifted(&pairs[i].a, s.draw(rng)));
                        b.push(shifted(&pairs[i].b, s.draw(rng)));
                    }
                }
                None => {
                    for &i in idx {
                        a.push(pairs[i].a.values_cents.clone());
                        b.push(pairs[i].b.values_cents.clone());
                    }
                }
            }
            let ar: Vec<&[f64]> = a.iter().map(Vec::as_slice).collect();
            let br: Vec<&[f64]> = b.iter().map(Vec::as_slice).collect();
            let mut tape = Tape::new(&m.params);
            let (loss, g) = m.pair_loss(&mut tape, &ar, &br, &labels)?;
            out.loss_sum = tape.value(loss)[0] as f64 * n;
            let logits = tape.value(g.logits);
            out.correct = labels
                .iter()
                .enumerate()
                .filter(|&(k, &y)| ((logits[2 * k + 1] > logits[2 * k]) as usize) == y)
                .count();
            match train {
                Some(_) if out.loss_sum.is_finite() => Some(tape.backward(loss)?),
                _ => None,
            }
        }
        (Dataset::Triples(triples), AnyModel::SlotFill(m)) => {
            let mut rows: [Vec<Vec<f64>>; 3] = Default::default();
            let mut aug = augment;
            for &i in idx {
                let t = &triples[i];
                // One shift per triple: the difference objective cannot
                // recover independent offsets.
                let s = match aug.as_mut() {
                    Some((s, rng)) => s.draw(rng),
                    None => 0.0,
                };
                rows[0].push(shifted(&t.p1, s));
                rows[1].push(shifted(&t.p2, s));
                rows[2].push(shifted(&t.p3, s));
            }
            let r: Vec<Vec<&[f64]>> = rows.iter().map(|v| v.iter().map(Vec::as_slice).collect()).collect();
            let mut tape = Tape::new(&m.params);
            let g = m.triple_loss(&mut tape, &r[0], &r[1], &r[2])?;
            out.loss_sum = tape.value(g.loss)[0] as f64 * n;
            for (k, v) in [g.recon_first, g.recon_last, g.predict_middle].into_iter().enumerate() {
                out.terms_sum[k] = tape.value(v)[0] as f64 * n;
            }
            match train {
                Some(_) if out.loss_sum.is_finite() => Some(tape.backward(g.loss)?),
                _ => None,
            }
        }
        _ => {
            return Err(PipelineError::Config(
                "dataset kind does not match model architecture".into(),
            ))
        }
    };
    if let (Some(grads), Some(state)) = (grads, train) {
        let params = model.params_mut();
        grads.accumulate_into(params)?;
        adam_step(params, state)?;
        params.zero_grad();
    }
    Ok(out)
}

struct Evaluation {
    loss: f64,
    accuracy: Option<f64>,
    terms: Option<[f64; 3]>,
}

fn evaluate(model: &mut AnyModel<f32>, data: &Dataset) -> Result<Evaluation> {
    let n = data.len();
    let all: Vec<usize> = (0..n).collect();
    let (mut loss, mut correct, mut terms) = (0.0, 0, [0.0; 3]);
    for chunk in all.chunks(EVAL_BATCH) {
        let r = run_batch(model, data, chunk, None, None)?;
        loss += r.loss_sum;
        correct += r.correct;
        terms.iter_mut().zip(r.terms_sum).for_each(|(t, v)| *t += v);
    }
    let n = n as f64;
    Ok(match data {
        Dataset::Pairs(_) => Evaluation {
            loss: loss / n,
            accuracy: Some(correct as f64 / n),
            terms: None,
        },
        Dataset::Triples(_) => Evaluation {
            loss: loss / n,
            accuracy: None,
            terms: Some(terms.map(|t| t / n)),
        },
    })
}

/// ChaCha8 generator for `seed` on an independent `stream`.
pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Trains one pseudotask on a by-recording split of `corpus` and returns the
/// best-validation checkpoint along with the per-epoch history.
pub fn train_pseudotask(
    kind: TaskKind,
    corpus: &[ContourSequence],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_pseudotask_with(kind, corpus, config, |_| ControlFlow::Continue(()))
}

/// [`train_pseudotask`] with a callback after every epoch; returning
/// `Break` ends training early.
pub fn train_pseudotask_with(
    kind: TaskKind,
    corpus: &[ContourSequence],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let min_each = match kind {
        TaskKind::SlotFill => 1,
        _ => 2,
    };
    let (train, val) = split_by_recording(corpus, config.val_fraction, min_each, &mut seeded(config.seed, 1))?;
    let mut sample_rng = seeded(config.seed, 2);
    let mut epoch_rng = seeded(config.seed, 3);
    let mut train_set = sample_dataset(kind, &train, config.train_samples, &mut sample_rng)?;
    let val_set = sample_dataset(kind, &val, config.val_samples, &mut sample_rng)?;

    let arch = config.architecture(kind);
    let mut model = AnyModel::<f32>::new(arch, config.seed)?;
    let mut adam = AdamState::new(model.params(), config.initial_lr);
    let baseline = evaluate(&mut model, &val_set)?.loss;
    let mut driver = EpochDriver::new(config.schedule(), Some(baseline));
    let mut best: ParamSet<f32> = model.params().clone();
    let shifts = Shifts {
        max: if config.augmentation { config.max_shift_cents } else { 0.0 },
    };
    let mut history = Vec::with_capacity(config.max_epochs);
    let mut last_finite = baseline;

    for epoch in 1..=config.max_epochs {
        if config.resample_each_epoch && epoch > 1 {
            train_set = sample_dataset(kind, &train, config.train_samples, &mut sample_rng)?;
        }
        let lr = driver.lr();
        adam.lr = lr;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut epoch_rng);
        let mut loss_sum = 0.0;
        for (bi, batch) in order.chunks(config.batch_size).enumerate() {
            let aug = config.augmentation.then_some((&shifts, &mut epoch_rng));
            let r = run_batch(&mut model, &train_set, batch, aug, Some(&mut adam))?;
            if !r.loss_sum.is_finite() {
                return Err(PipelineError::NonFinite {
                    epoch,
                    batch: bi + 1,
                    lr,
                    last_finite,
                });
            }
            last_finite = r.loss_sum / batch.len() as f64;
            loss_sum += r.loss_sum;
        }
        let ev = evaluate(&mut model, &val_set)?;
        if !ev.loss.is_finite() {
            return Err(PipelineError::NonFinite {
                epoch,
                batch: 0,
                lr,
                last_finite,
            });
        }
        if driver.finish_epoch(ev.loss) {
            best = model.params().clone();
        }
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_metric: ev.loss,
            lr,
            val_accuracy: ev.accuracy,
            val_terms: ev.terms,
        };
        log::info!(
            "{kind} epoch {epoch}: train {:.5} val {:.5}{} lr {lr:e}",
            rec.train_loss,
            rec.val_metric,
            rec.val_accuracy.map(|a| format!(" acc {a:.4}")).unwrap_or_default()
        );
        let flow = on_epoch(&rec);
        history.push(rec);
        if flow.is_break() {
            break;
        }
    }

    *model.params_mut() = best;
    let mut snapshot = serde_json::to_value(config).expect("config serializes");
    snapshot["task"] = serde_json::Value::String(kind.to_string());
    let checkpoint = CheckpointBundle::from_model(&model, config.seed).with_train_config(snapshot);
    let ids = |s: &[ContourSequence]| s.iter().map(|q| q.recording_id.clone()).collect();
    Ok(TrainOutcome {
        checkpoint,
        best_epoch: driver.best_epoch(),
        history,
        baseline_metric: baseline,
        train_recordings: ids(&train),
        val_recordings: ids(&val),
    })
}

/// Up to `n` contours, drawn without replacement when the pool is large
/// enough and with replacement otherwise; returned in draw order.
pub fn sample_contours(contours: &[Contour], n: usize, rng: &mut impl Rng) -> Vec<Contour> {
    if contours.is_empty() {
        return Vec::new();
    }
    if n <= contours.len() {
        rand::seq::index::sample(rng, contours.len(), n)
            .into_iter()
            .map(|i| contours[i].clone())
            .collect()
    } else {
        (0..n)
            .map(|_| contours[rng.random_range(0..contours.len())].clone())
            .collect()
    }
}

/// Looks up `key` in each contour's recording labels.
pub fn contour_labels(contours: &[Contour], manifest: &Manifest, key: &str) -> Result<Vec<String>> {
    contours
        .iter()
        .map(|c| {
            manifest
                .get(&c.recording_id)
                .and_then(|r| r.labels.get(key))
                .cloned()
                .ok_or_else(|| {
                    PipelineError::Label(format!("recording `{}` has no `{key}` label", c.recording_id))
                })
        })
        .collect()
}

/// Maps label strings to class ids in sorted name order.
pub fn encode_labels(labels: &[String]) -> (Vec<usize>, Vec<String>) {
    let names: Vec<String> = labels
        .iter()
        .cloned()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let ids = labels
        .iter()
        .map(|l| names.binary_search(l).expect("name collected"))
        .collect();
    (ids, names)
}

/// Z-scores each block on its own statistics and concatenates columns.
/// Column names are prefixed with the block name.
pub fn combine_features(blocks: &[(String, Matrix)]) -> Result<(String, Matrix)> {
    let Some((_, first)) = blocks.first() else {
        return Err(PipelineError::Rows("no feature blocks given".into()));
    };
    let rows = first.rows;
    if let Some((name, m)) = blocks.iter().find(|(_, m)| m.rows != rows) {
        return Err(PipelineError::Rows(format!(
            "block `{name}` has {} rows, expected {rows}",
            m.rows
        )));
    }
    let scaled = blocks
        .iter()
        .map(|(_, m)| Ok(ZStats::fit(m)?.apply(m)?))
        .collect::<Result<Vec<Matrix>>>()?;
    let mut columns = Vec::new();
    for ((name, _), m) in blocks.iter().zip(&scaled) {
        columns.extend(m.columns.iter().map(|c| format!("{name}.{c}")));
    }
    let mut data = Vec::with_capacity(rows * columns.len());
    for i in 0..rows {
        for m in &scaled {
            data.extend_from_slice(m.row(i));
        }
    }
    let name = blocks.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>().join("-");
    let matrix = Matrix::new(columns, rows, data).map_err(|e| PipelineError::Rows(e.to_string()))?;
    Ok((name, matrix))
}

/// Indices (ascending) keeping `min_count` uniformly chosen samples of each
/// of the `n_classes` classes.
pub fn undersample(labels: &[usize], n_classes: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let mut by_class = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= n_classes {
            return Err(PipelineError::Label(format!("class id {l} outside 0..{n_classes}")));
        }
        by_class[l].push(i);
    }
    if n_classes < 2 {
        return Err(PipelineError::Label("undersampling needs at least 2 classes".into()));
    }
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(PipelineError::InsufficientClass {
            class: c.to_string(),
            count: 0,
            needed: 1,
        });
    }
    let keep = by_class.iter().map(Vec::len).min().unwrap_or(0);
    let mut out: Vec<usize> = by_class
        .iter()
        .flat_map(|idx| {
            let mut chosen: Vec<usize> = rand::seq::index::sample(rng, idx.len(), keep)
                .into_iter()
                .map(|k| idx[k])
                .collect();
            chosen.sort_unstable();
            chosen
        })
        .collect();
    out.sort_unstable();
    Ok(out)
}

/// Fold id per sample: each class is shuffled and dealt round-robin.
pub fn stratified_folds(labels: &[usize], n_classes: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut fold = vec![0; labels.len()];
    let mut offset = 0;
    for c in 0..n_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(rng);
        for (pos, i) in idx.into_iter().enumerate() {
            fold[i] = (pos + offset) % k;
        }
        // Rotate so small classes do not all pile into the first folds.
        offset += labels.iter().filter(|&&l| l == c).count();
    }
    fold
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub folds: usize,
    pub initial_lr: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub lr_floor: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            folds: 5,
            initial_lr: 1e-3,
            max_epochs: 100,
            batch_size: 50,
            patience: 5,
            lr_floor: 1e-7,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub feature_set: String,
    pub fold_accuracy: Vec<f64>,
    pub mean_acc: f64,
    /// Population standard deviation across folds.
    pub std_acc: f64,
    pub macro_f1: Vec<f64>,
    pub mean_f1: f64,
    /// `confusion[true][predicted]`, summed over folds.
    pub confusion: Vec<Vec<usize>>,
    pub chance: f64,
    pub n_per_class: usize,
    #[serde(default)]
    pub classes: Vec<String>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

fn macro_f1(confusion: &[Vec<usize>]) -> f64 {
    let k = confusion.len();
    let mut total = 0.0;
    for c in 0..k {
        let tp = confusion[c][c] as f64;
        let fn_: f64 = (0..k).filter(|&j| j != c).map(|j| confusion[c][j] as f64).sum();
        let fp: f64 = (0..k).filter(|&j| j != c).map(|j| confusion[j][c] as f64).sum();
        let denom = 2.0 * tp + fp + fn_;
        total += if denom > 0.0 { 2.0 * tp / denom } else { 0.0 };
    }
    total / k as f64
}

fn train_mlp(x: &Matrix, y: &[usize], n_classes: usize, config: &EvalConfig, seed: u64) -> Result<DownstreamMlp<f32>> {
    let mut mlp = DownstreamMlp::<f32>::new(MlpConfig::new(x.cols, n_classes), seed)?;
    let mut adam = AdamState::new(&mlp.params, config.initial_lr);
    let mut driver = EpochDriver::new(
        PlateauSchedule {
            floor_lr: config.lr_floor,
            patience: config.patience,
            ..PlateauSchedule::new(config.initial_lr)
        },
        None,
    );
    let mut rng = seeded(seed, 7);
    let mut order: Vec<usize> = (0..x.rows).collect();
    for _ in 0..config.max_epochs {
        adam.lr = driver.lr();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let data: Vec<f32> = batch.iter().flat_map(|&i| x.row(i).iter().map(|&v| v as f32)).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
            let grads = {
                let mut tape = Tape::new(&mlp.params);
                let input = tape.constant(contourlab_autodiff::Tensor::from_vec(vec![batch.len(), x.cols], data));
                let logits = mlp.logits(&mut tape, input)?;
                let loss = tape.softmax_cross_entropy(logits, &labels)?;
                let l = tape.value(loss)[0] as f64;
                if !l.is_finite() {
                    return Err(PipelineError::NonFinite {
                        epoch: 0,
                        batch: 0,
                        lr: adam.lr,
                        last_finite: loss_sum,
                    });
                }
                loss_sum += l * batch.len() as f64;
                tape.backward(loss)?
            };
            grads.accumulate_into(&mut mlp.params)?;
            adam_step(&mut mlp.params, &mut adam)?;
            mlp.params.zero_grad();
        }
        // No inner validation split: the plateau rule watches training loss.
        driver.finish_epoch(loss_sum / x.rows as f64);
    }
    Ok(mlp)
}

fn predict(mlp: &DownstreamMlp<f32>, x: &Matrix) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(x.rows);
    let k = mlp.config.n_classes;
    let all: Vec<usize> = (0..x.rows).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let data: Vec<f32> = chunk.iter().flat_map(|&i| x.row(i).iter().map(|&v| v as f32)).collect();
        let mut tape = Tape::new(&mlp.params);
        let input = tape.constant(contourlab_autodiff::Tensor::from_vec(vec![chunk.len(), x.cols], data));
        let logits = mlp.logits(&mut tape, input)?;
        for row in tape.value(logits).chunks(k) {
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Stratified k-fold evaluation of the downstream MLP.
///
/// The whole set is first undersampled to balance (so held-out folds are
/// balanced and chance is 1/n_classes); each training fold is undersampled
/// again and z-scored on its own statistics.
pub fn crossval_eval(
    features: &Matrix,
    labels: &[usize],
    classes: &[String],
    task: &str,
    feature_set: &str,
    config: &EvalConfig,
) -> Result<EvalReport> {
    if features.rows != labels.len() {
        return Err(PipelineError::Rows(format!(
            "{} feature rows but {} labels",
            features.rows,
            labels.len()
        )));
    }
    let k = classes.len();
    if config.folds < 2 {
        return Err(PipelineError::Config("need at least 2 folds".into()));
    }
    let mut counts = vec![0usize; k];
    for &l in labels {
        if l >= k {
            return Err(PipelineError::Label(format!("class id {l} outside 0..{k}")));
        }
        counts[l] += 1;
    }
    if let Some((c, &n)) = counts.iter().enumerate().min_by_key(|(_, &n)| n) {
        if n < config.folds {
            return Err(PipelineError::InsufficientClass {
                class: classes[c].clone(),
                count: n,
                needed: config.folds,
            });
        }
    }
    let mut rng = seeded(config.seed, 5);
    let kept = undersample(labels, k, &mut rng)?;
    let x = features.select_rows(&kept);
    let y: Vec<usize> = kept.iter().map(|&i| labels[i]).collect();
    let n_per_class = y.len() / k;
    let fold_of = stratified_folds(&y, k, config.folds, &mut rng);

    let results = (0..config.folds)
        .into_par_iter()
        .map(|f| -> Result<(f64, f64, Vec<Vec<usize>>)> {
            let fold_seed = config.seed.wrapping_add(1000 + f as u64);
            let train_idx: Vec<usize> = (0..y.len()).filter(|&i| fold_of[i] != f).collect();
            let test_idx: Vec<usize> = (0..y.len()).filter(|&i| fold_of[i] == f).collect();
            let train_y: Vec<usize> = train_idx.iter().map(|&i| y[i]).collect();
            let keep = undersample(&train_y, k, &mut seeded(fold_seed, 6))?;
            let train_idx: Vec<usize> = keep.iter().map(|&j| train_idx[j]).collect();
            let xtr = x.select_rows(&train_idx);
            let ytr: Vec<usize> = train_idx.iter().map(|&i| y[i]).collect();
            let stats = ZStats::fit(&xtr)?;
            let xtr = stats.apply(&xtr)?;
            let xte = stats.apply(&x.select_rows(&test_idx))?;
            let mlp = train_mlp(&xtr, &ytr, k, config, fold_seed)?;
            let pred = predict(&mlp, &xte)?;
            let mut confusion = vec![vec![0usize; k]; k];
            for (&i, &p) in test_idx.iter().zip(&pred) {
                confusion[y[i]][p] += 1;
            }
            let correct = (0..k).map(|c| confusion[c][c]).sum::<usize>();
            Ok((correct as f64 / test_idx.len() as f64, macro_f1(&confusion), confusion))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut confusion = vec![vec![0usize; k]; k];
    for (_, _, c) in &results {
        for (row, add) in confusion.iter_mut().zip(c) {
            row.iter_mut().zip(add).for_each(|(a, b)| *a += b);
        }
    }
    let fold_accuracy: Vec<f64> = results.iter().map(|r| r.0).collect();
    let f1: Vec<f64> = results.iter().map(|r| r.1).collect();
    let (mean_acc, std_acc) = mean_std(&fold_accuracy);
    let (mean_f1, _) = mean_std(&f1);
    Ok(EvalReport {
        task: task.to_string(),
        feature_set: feature_set.to_string(),
        fold_accuracy,
        mean_acc,
        std_acc,
        macro_f1: f1,
        mean_f1,
        confusion,
        chance: 1.0 / k as f64,
        n_per_class,
        classes: classes.to_vec(),
    })
}

/// A rendered report: JSON array of the input reports and a text table with
/// one row per feature set, one column per task, plus a chance row.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedReport {
    pub json: String,
    pub table: String,
}

pub fn render_report(reports: &[EvalReport]) -> RenderedReport {
    let json = serde_json::to_string_pretty(reports).expect("reports serialize");
    let mut tasks: Vec<&str> = Vec::new();
    let mut sets: Vec<&str> = Vec::new();
    let mut cells: BTreeMap<(&str, &str), f64> = BTreeMap::new();
    let mut chance: BTreeMap<&str, f64> = BTreeMap::new();
    for r in reports {
        if !tasks.contains(&r.task.as_str()) {
            tasks.push(&r.task);
        }
        if !sets.contains(&r.feature_set.as_str()) {
            sets.push(&r.feature_set);
        }
        cells.insert((&r.feature_set, &r.task), r.mean_acc);
        chance.insert(&r.task, r.chance);
    }
    let pct = |v: Option<f64>| v.map(|v| format!("{:.1}", 100.0 * v)).unwrap_or_else(|| "-".into());
    let mut rows: Vec<Vec<String>> = vec![std::iter::once("Features".to_string())
        .chain(tasks.iter().map(|t| t.to_string()))
        .collect()];
    for s in &sets {
        rows.push(
            std::iter::once(s.to_string())
                .chain(tasks.iter().map(|t| pct(cells.get(&(*s, *t)).copied())))
                .collect(),
        );
    }
    rows.push(
        std::iter::once("Chance".to_string())
            .chain(tasks.iter().map(|t| pct(chance.get(t).copied())))
            .collect(),
    );
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut table = String::new();
    for (ri, r) in rows.iter().enumerate() {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, v)| {
                if c == 0 {
                    format!("{v:<w$}", w = widths[c])
                } else {
                    format!("{v:>w$}", w = widths[c])
                }
            })
            .collect();
        table.push_str(line.join("  ").trim_end());
        table.push('\n');
        if ri == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            table.push_str(&"-".repeat(total));
            table.push('\n');
        }
    }
    RenderedReport { json, table }
}

pub fn parse_reports(json: &str) -> serde_json::Result<Vec<EvalReport>> {
    serde_json::from_str(json)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(id: &str, n: usize) -> ContourSequence {
        ContourSequence {
            recording_id: id.into(),
            contours: (0..n)
                .map(|i| Contour {
                    recording_id: id.into(),
                    start_frame: i * HOP,
                    valid_length: CONTOUR_LEN,
                    values_cents: vec![i as f64; CONTOUR_LEN],
                    values_hz: vec![440.0; CONTOUR_LEN],
                })
                .collect(),
        }
    }

    #[test]
    fn file_pairs_balance_and_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = sample_file_pairs(&[seq("a", 3), seq("b", 2)], 10, &mut rng).unwrap();
        assert_eq!(p.iter().filter(|s| s.label == 1).count(), 5);
        let e = sample_file_pairs(&[seq("a", 3)], 10, &mut rng).unwrap_err();
        assert!(e.to_string().contains("infeasible corpus"));
    }

    #[test]
    fn two_contour_recording_gives_no_same_file_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = sample_contiguous_pairs(&[seq("a", 2), seq("b", 4)], 200, &mut rng).unwrap();
        assert!(p.iter().any(|s| s.label == 1 && s.a.recording_id == "a"));
        assert!(!p
            .iter()
            .any(|s| s.label == 0 && s.a.recording_id == "a" && s.b.recording_id == "a"));
    }

    #[test]
    fn short_sequences_give_no_triples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_triples(&[seq("a", 2)], 5, &mut rng).is_err());
        let t = sample_triples(&[seq("a", 2), seq("b", 3)], 5, &mut rng).unwrap();
        assert!(t.iter().all(|t| t.p1.recording_id == "b"));
    }

    #[test]
    fn undersample_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let labels: Vec<usize> = [vec![0; 10], vec![1; 4]].concat();
        let kept = undersample(&labels, 2, &mut rng).unwrap();
        assert_eq!(kept.len(), 8);
        assert!(kept[4..].iter().all(|&i| i >= 10));
        let bal = vec![0, 1, 0, 1];
        assert_eq!(undersample(&bal, 2, &mut rng).unwrap(), vec![0, 1, 2, 3]);
        assert!(undersample(&[0, 0], 2, &mut rng).is_err());
    }

    #[test]
    fn macro_f1_perfect_and_degenerate() {
        assert_eq!(macro_f1(&[vec![3, 0], vec![0, 3]]), 1.0);
        assert!((macro_f1(&[vec![3, 0], vec![3, 0]]) - (2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn task_names_parse() {
        for t in ["file", "contiguous", "slotfill"] {
            assert_eq!(t.parse::<TaskKind>().unwrap().to_string(), t);
        }
        assert!("pairs".parse::<TaskKind>().is_err());
    }
}
