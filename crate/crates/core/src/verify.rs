//! 64-bit finite-difference verification of every primitive and of the
//! full Siamese and slot-fill losses.

use contourlab_autodiff::gradcheck::{grad_check, primitive_checks, GradCheckReport, Selection};
use contourlab_autodiff::{AutodiffError, ParamSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::models::{ModelError, SiameseModel, SlotFillConfig, SlotFillModel, VggConfig};
use crate::CONTOUR_LEN;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct VerifyConfig {
    pub seeds: Vec<u64>,
    pub siamese_width: f64,
    pub siamese_pairs: usize,
    pub slot_hidden: usize,
    pub slot_triples: usize,
    /// Elements perturbed per model parameter.
    pub per_param: usize,
    pub eps: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seeds: (0..10).collect(),
            siamese_width: 0.25,
            siamese_pairs: 8,
            slot_hidden: 64,
            slot_triples: 4,
            per_param: 3,
            eps: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckLine {
    pub check: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub skipped: usize,
}

impl CheckLine {
    fn new(check: &str, seed: u64, r: GradCheckReport) -> Self {
        CheckLine {
            check: check.to_string(),
            seed,
            max_rel_error: r.max_rel_error,
            worst: r.worst,
            checked: r.checked,
            skipped: r.skipped,
        }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

fn lower(e: ModelError) -> AutodiffError {
    match e {
        ModelError::Autodiff(e) => e,
        other => AutodiffError::Shape {
            op: "model",
            detail: other.to_string(),
        },
    }
}

/// Random centred contours with a few hundred cents of spread.
fn random_contours(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..CONTOUR_LEN).map(|_| rng.random_range(-300.0..300.0)).collect())
        .collect()
}

pub fn siamese_check(seed: u64, cfg: &VerifyConfig) -> Result<GradCheckReport, ModelError> {
    let mut model = SiameseModel::<f64>::new(VggConfig::with_width(cfg.siamese_width), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5157);
    let a = random_contours(&mut rng, cfg.siamese_pairs);
    let b = random_contours(&mut rng, cfg.siamese_pairs);
    let labels: Vec<usize> = (0..cfg.siamese_pairs).map(|_| rng.random_range(0..2)).collect();
    let ar: Vec<&[f64]> = a.iter().map(Vec::as_slice).collect();
    let br: Vec<&[f64]> = b.iter().map(Vec::as_slice).collect();
    let mut params: ParamSet<f64> = std::mem::take(&mut model.params);
    let sel = Selection::Sample {
        per_param: cfg.per_param,
        seed,
    };
    Ok(grad_check(&mut params, sel, cfg.eps, |tape| {
        model.pair_loss(tape, &ar, &br, &labels).map(|(l, _)| l).map_err(lower)
    })?)
}

pub fn slotfill_check(seed: u64, cfg: &VerifyConfig) -> Result<GradCheckReport, ModelError> {
    let config = SlotFillConfig {
        hidden: cfg.slot_hidden,
        ..SlotFillConfig::default()
    };
    let mut model = SlotFillModel::<f64>::new(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x510f);
    let p: Vec<Vec<Vec<f64>>> = (0..3).map(|_| random_contours(&mut rng, cfg.slot_triples)).collect();
    let r: Vec<Vec<&[f64]>> = p.iter().map(|v| v.iter().map(Vec::as_slice).collect()).collect();
    let mut params: ParamSet<f64> = std::mem::take(&mut model.params);
    let sel = Selection::Sample {
        per_param: cfg.per_param,
        seed,
    };
    Ok(grad_check(&mut params, sel, cfg.eps, |tape| {
        model.triple_loss(tape, &r[0], &r[1], &r[2]).map(|g| g.loss).map_err(lower)
    })?)
}

/// Runs every check for every seed, reporting each line as it completes.
pub fn run_suite(cfg: &VerifyConfig, mut on_line: impl FnMut(&CheckLine)) -> Result<Vec<CheckLine>, ModelError> {
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let mut lines: Vec<CheckLine> = primitive_checks(seed)?
            .into_iter()
            .map(|(name, r)| CheckLine::new(name, seed, r))
            .collect();
        lines.push(CheckLine::new("siamese_loss", seed, siamese_check(seed, cfg)?));
        lines.push(CheckLine::new("slotfill_loss", seed, slotfill_check(seed, cfg)?));
        for l in lines {
            on_line(&l);
            out.push(l);
        }
    }
    Ok(out)
}
