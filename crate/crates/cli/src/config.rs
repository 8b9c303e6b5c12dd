//! Run configuration: defaults, then a TOML file, then command-line flags.

use std::path::Path;

use anyhow::{Context, Result};
use contourlab::ingest::SynthSpec;
use contourlab::pipeline::{EvalConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; the synth, train and eval seeds are set from it.
    pub seed: u64,
    pub voicing_threshold: f64,
    pub frame_period: f64,
    pub synth: SynthSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            voicing_threshold: 0.5,
            frame_period: contourlab::FRAME_PERIOD,
            synth: SynthSpec::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Flag values that override the file; `None` leaves the file value.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub voicing_threshold: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub width: Option<f64>,
    pub folds: Option<usize>,
    pub recordings: Option<usize>,
    pub frames: Option<usize>,
    pub stratify: bool,
    pub no_augmentation: bool,
    pub train_samples: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("invalid config {}", p.display()))
            }
        }
    }

    pub fn apply(mut self, o: &Overrides) -> Self {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.voicing_threshold {
            self.voicing_threshold = v;
        }
        if let Some(v) = o.epochs {
            self.train.max_epochs = v;
        }
        if let Some(v) = o.batch_size {
            self.train.batch_size = v;
        }
        if let Some(v) = o.lr {
            self.train.initial_lr = v;
        }
        if let Some(v) = o.width {
            self.train.width_multiplier = v;
        }
        if let Some(v) = o.folds {
            self.eval.folds = v;
        }
        if let Some(v) = o.recordings {
            self.synth.n_recordings = v;
        }
        if let Some(v) = o.frames {
            self.synth.frames_per_recording = v;
        }
        if o.stratify {
            self.synth.stratify_rates = true;
        }
        if o.no_augmentation {
            self.train.augmentation = false;
        }
        if let Some(v) = o.train_samples {
            self.train.train_samples = v;
        }
        self.synth.seed = self.seed;
        self.synth.frame_period = self.frame_period;
        self.train.seed = self.seed;
        self.eval.seed = self.seed;
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
