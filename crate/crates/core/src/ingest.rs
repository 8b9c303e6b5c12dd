//! Pitch-track and manifest ingestion, plus deterministic synthetic corpora.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::FRAME_PERIOD;

/// Tolerance on the spacing of consecutive frame times, seconds.
pub const FRAME_TIME_TOLERANCE: f64 = 1e-6;
/// Frames at or above this confidence (with f0 > 0) count as voiced.
pub const DEFAULT_VOICING_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("structural error at line {line}: {msg}")]
    Structure { line: usize, msg: String },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("duplicate recording id `{0}`")]
    DuplicateId(String),
    #[error("recording `{id}`: path {path} does not exist")]
    MissingPath { id: String, path: PathBuf },
    #[error("unknown split `{0}` (expected train, validation or test)")]
    UnknownSplit(String),
    #[error("invalid synthesis spec: {0}")]
    Synth(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, IngestError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub time: f64,
    /// Hz; 0 marks an unvoiced frame.
    pub f0: f64,
    pub confidence: f64,
}

/// F0 trajectory of one recording.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PitchTrack {
    pub recording_id: String,
    pub frame_period: f64,
    pub frames: Vec<Frame>,
}

impl PitchTrack {
    pub fn is_voiced(frame: &Frame, threshold: f64) -> bool {
        frame.f0 > 0.0 && frame.confidence >= threshold
    }

    pub fn voiced_count(&self, threshold: f64) -> usize {
        self.frames
            .iter()
            .filter(|f| Self::is_voiced(f, threshold))
            .count()
    }

    /// CREPE-style CSV with a header row.
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(32 * (self.frames.len() + 1));
        s.push_str("time,frequency,confidence\n");
        for f in &self.frames {
            let _ = writeln!(s, "{:.6},{:.6},{:.6}", f.time, f.f0, f.confidence);
        }
        s
    }
}

/// Parses `time,frequency,confidence` rows. A first line whose leading
/// field is not numeric is treated as a header.
pub fn parse_pitch_track(text: &str, recording_id: &str, frame_period: f64) -> Result<PitchTrack> {
    let mut frames: Vec<Frame> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let row = raw.trim();
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        if idx == 0 && fields[0].parse::<f64>().is_err() {
            continue;
        }
        if fields.len() != 3 {
            return Err(IngestError::Parse {
                line,
                msg: format!("expected 3 fields (time,frequency,confidence), got {}", fields.len()),
            });
        }
        let mut vals = [0.0f64; 3];
        for (v, (name, field)) in vals
            .iter_mut()
            .zip(["time", "frequency", "confidence"].iter().zip(&fields))
        {
            *v = field
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| IngestError::Parse {
                    line,
                    msg: format!("{name} field `{field}` is not a number"),
                })?;
        }
        let [time, f0, confidence] = vals;
        if let Some(prev) = frames.last() {
            if time <= prev.time {
                return Err(IngestError::Structure {
                    line,
                    msg: format!("time {time} does not increase past {}", prev.time),
                });
            }
            if ((time - prev.time) - frame_period).abs() > FRAME_TIME_TOLERANCE {
                return Err(IngestError::Structure {
                    line,
                    msg: format!(
                        "frame spacing {} differs from frame period {frame_period}",
                        time - prev.time
                    ),
                });
            }
        }
        if f0 < 0.0 || (f0 > 0.0 && f0 <= 20.0) {
            return Err(IngestError::Structure {
                line,
                msg: format!("frequency {f0} Hz is neither 0 (unvoiced) nor above 20 Hz"),
            });
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(IngestError::Structure {
                line,
                msg: format!("confidence {confidence} outside [0, 1]"),
            });
        }
        frames.push(Frame {
            time,
            f0,
            confidence,
        });
    }
    Ok(PitchTrack {
        recording_id: recording_id.to_string(),
        frame_period,
        frames,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for Split {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(IngestError::UnknownSplit(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordingMeta {
    #[serde(rename = "id")]
    pub recording_id: String,
    pub path: String,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Manifest {
    pub split: Split,
    pub recordings: Vec<RecordingMeta>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub root: PathBuf,
}

#[derive(Deserialize)]
struct RawManifest {
    split: String,
    recordings: Vec<RawRecording>,
}

#[derive(Deserialize)]
struct RawRecording {
    id: String,
    path: String,
    #[serde(default)]
    labels: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    pub fn resolve(&self, rec: &RecordingMeta) -> PathBuf {
        self.root.join(&rec.path)
    }

    pub fn get(&self, recording_id: &str) -> Option<&RecordingMeta> {
        self.recordings
            .iter()
            .find(|r| r.recording_id == recording_id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    /// Loads and parses every recording's pitch track.
    pub fn load_tracks(&self, frame_period: f64) -> Result<Vec<PitchTrack>> {
        self.recordings
            .iter()
            .map(|rec| {
                let path = self.resolve(rec);
                let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
                parse_pitch_track(&text, &rec.recording_id, frame_period)
            })
            .collect()
    }
}

/// Parses a JSON manifest, resolving paths against `root`.
pub fn load_manifest(text: &str, root: &Path) -> Result<Manifest> {
    let raw: RawManifest =
        serde_json::from_str(text).map_err(|e| IngestError::Manifest(e.to_string()))?;
    let split: Split = raw.split.parse()?;
    if raw.recordings.is_empty() {
        return Err(IngestError::Manifest("recording list is empty".into()));
    }
    let mut seen = HashSet::new();
    let mut recordings = Vec::with_capacity(raw.recordings.len());
    for r in raw.recordings {
        if !seen.insert(r.id.clone()) {
            return Err(IngestError::DuplicateId(r.id));
        }
        let full = root.join(&r.path);
        if !full.exists() {
            return Err(IngestError::MissingPath {
                id: r.id,
                path: full,
            });
        }
        let labels = r
            .labels
            .into_iter()
            .map(|(k, v)| {
                let v = match v {
                    serde_json::Value::String(s) => s,
                    other => other.to_string(),
                };
                (k, v)
            })
            .collect();
        recordings.push(RecordingMeta {
            recording_id: r.id,
            path: r.path,
            labels,
        });
    }
    Ok(Manifest {
        split,
        recordings,
        root: root.to_path_buf(),
    })
}

pub fn load_manifest_file(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let root = path.parent().unwrap_or_else(|| Path::new("."));
    load_manifest(&text, root)
}

/// Closed interval `[lo, hi]`; `lo == hi` pins the value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub const fn fixed(v: f64) -> Self {
        Interval { lo: v, hi: v }
    }

    fn draw(&self, rng: &mut impl Rng) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..self.hi)
        } else {
            self.lo
        }
    }

    fn valid(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi
    }
}

/// Parameters of a synthetic vibrato-plus-drift corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_recordings: usize,
    pub frames_per_recording: usize,
    pub frame_period: f64,
    /// Hz.
    pub vibrato_rate_range: Interval,
    /// Cents.
    pub vibrato_depth_range: Interval,
    /// Cents per second.
    pub drift_slope_range: Interval,
    /// Hz.
    pub base_pitch_range: Interval,
    /// Cents, per frame.
    pub noise_std: f64,
    /// Spread vibrato rates evenly (one jittered stratum per recording)
    /// instead of drawing them independently.
    pub stratify_rates: bool,
    /// Number of equal-width vibrato-rate bins used for the `rate_class` label.
    pub rate_classes: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_recordings: 40,
            frames_per_recording: 3000,
            frame_period: FRAME_PERIOD,
            vibrato_rate_range: Interval::new(4.0, 7.0),
            vibrato_depth_range: Interval::new(20.0, 80.0),
            drift_slope_range: Interval::new(-150.0, 150.0),
            base_pitch_range: Interval::new(150.0, 500.0),
            noise_std: 3.0,
            stratify_rates: false,
            rate_classes: 3,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(IngestError::Synth(m.to_string()));
        if self.n_recordings == 0 || self.frames_per_recording == 0 {
            return bad("need at least one recording and one frame");
        }
        if !(self.frame_period > 0.0) {
            return bad("frame period must be positive");
        }
        for (name, r) in [
            ("vibrato_rate_range", self.vibrato_rate_range),
            ("vibrato_depth_range", self.vibrato_depth_range),
            ("drift_slope_range", self.drift_slope_range),
            ("base_pitch_range", self.base_pitch_range),
        ] {
            if !r.valid() {
                return Err(IngestError::Synth(format!("{name} must satisfy lo <= hi")));
            }
        }
        if self.vibrato_rate_range.lo < 0.0 || self.vibrato_depth_range.lo < 0.0 {
            return bad("vibrato rate and depth must be non-negative");
        }
        if self.base_pitch_range.lo <= 20.0 {
            return bad("base pitch must exceed 20 Hz");
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be non-negative");
        }
        if self.rate_classes == 0 {
            return bad("rate_classes must be at least 1");
        }
        Ok(())
    }

    /// Bin index of `rate` among `rate_classes` equal-width bins.
    pub fn rate_class(&self, rate: f64) -> usize {
        let Interval { lo, hi } = self.vibrato_rate_range;
        if hi <= lo {
            return 0;
        }
        let k = self.rate_classes;
        (((rate - lo) / (hi - lo) * k as f64).floor().max(0.0) as usize).min(k - 1)
    }
}

/// Per-recording generative parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StyleTuple {
    pub vibrato_rate: f64,
    pub vibrato_depth: f64,
    pub drift_slope: f64,
    pub base_pitch: f64,
}

impl StyleTuple {
    fn labels(&self, id: &str, spec: &SynthSpec) -> BTreeMap<String, String> {
        let sign = if self.drift_slope > 0.0 {
            "up"
        } else if self.drift_slope < 0.0 {
            "down"
        } else {
            "flat"
        };
        BTreeMap::from([
            ("recording_id".to_string(), id.to_string()),
            ("rate_class".to_string(), format!("r{}", spec.rate_class(self.vibrato_rate))),
            ("slope_sign".to_string(), sign.to_string()),
            ("vibrato_rate_hz".to_string(), format!("{:.6}", self.vibrato_rate)),
            ("vibrato_depth_cents".to_string(), format!("{:.6}", self.vibrato_depth)),
            ("drift_slope_cents_per_s".to_string(), format!("{:.6}", self.drift_slope)),
            ("base_pitch_hz".to_string(), format!("{:.6}", self.base_pitch)),
        ])
    }

    /// Inverse of the manifest labels written by the generator.
    pub fn from_labels(labels: &BTreeMap<String, String>) -> Option<Self> {
        let get = |k: &str| labels.get(k)?.parse::<f64>().ok();
        Some(StyleTuple {
            vibrato_rate: get("vibrato_rate_hz")?,
            vibrato_depth: get("vibrato_depth_cents")?,
            drift_slope: get("drift_slope_cents_per_s")?,
            base_pitch: get("base_pitch_hz")?,
        })
    }
}

pub fn synthetic_id(i: usize) -> String {
    format!("syn{i:04}")
}

/// Generates `n_recordings` tracks with
/// `f0(t) = base · 2^((slope·t + depth·sin(2π·rate·t) + noise) / 1200)`,
/// with the style tuple held constant within a recording.
pub fn generate_synthetic_corpus(spec: &SynthSpec) -> Result<(Vec<PitchTrack>, Manifest)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| IngestError::Synth(e.to_string()))?;
    let n = spec.n_recordings;

    let rates: Vec<f64> = if spec.stratify_rates {
        let Interval { lo, hi } = spec.vibrato_rate_range;
        let mut strata: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(strata.as_mut_slice(), &mut rng);
        strata
            .into_iter()
            .map(|s| lo + (hi - lo) * (s as f64 + rng.random_range(0.0..1.0)) / n as f64)
            .collect()
    } else {
        (0..n).map(|_| spec.vibrato_rate_range.draw(&mut rng)).collect()
    };

    let mut tracks = Vec::with_capacity(n);
    let mut recordings = Vec::with_capacity(n);
    for (i, &vibrato_rate) in rates.iter().enumerate() {
        let style = StyleTuple {
            vibrato_rate,
            vibrato_depth: spec.vibrato_depth_range.draw(&mut rng),
            drift_slope: spec.drift_slope_range.draw(&mut rng),
            base_pitch: spec.base_pitch_range.draw(&mut rng),
        };
        let id = synthetic_id(i);
        let frames = (0..spec.frames_per_recording)
            .map(|j| {
                let t = j as f64 * spec.frame_period;
                let jitter = if spec.noise_std > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                let cents = style.drift_slope * t
                    + style.vibrato_depth * (2.0 * std::f64::consts::PI * style.vibrato_rate * t).sin()
                    + jitter;
                Frame {
                    time: t,
                    f0: style.base_pitch * (cents / 1200.0).exp2(),
                    confidence: 1.0,
                }
            })
            .collect();
        recordings.push(RecordingMeta {
            labels: style.labels(&id, spec),
            path: format!("tracks/{id}.csv"),
            recording_id: id.clone(),
        });
        tracks.push(PitchTrack {
            recording_id: id,
            frame_period: spec.frame_period,
            frames,
        });
    }
    Ok((
        tracks,
        Manifest {
            split: Split::Train,
            recordings,
            root: PathBuf::new(),
        },
    ))
}

/// Writes `manifest.json` and one CSV per track under `dir`.
pub fn write_corpus(dir: &Path, tracks: &[PitchTrack], manifest: &Manifest) -> Result<PathBuf> {
    for (track, rec) in tracks.iter().zip(&manifest.recordings) {
        let path = dir.join(&rec.path);
        write_atomic(&path, track.to_csv().as_bytes()).map_err(io_err(&path))?;
    }
    let path = dir.join("manifest.json");
    write_atomic(&path, manifest.to_json().as_bytes()).map_err(io_err(&path))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_rows() {
        let t = parse_pitch_track("0.000,440.0,0.9\n0.012,441.0,0.9\n0.024,442.0,0.9\n", "a", 0.012)
            .unwrap();
        assert_eq!(t.frames.len(), 3);
        assert_eq!(t.frame_period, 0.012);
        assert_eq!(t.frames[2].f0, 442.0);
    }

    #[test]
    fn header_is_skipped() {
        let t = parse_pitch_track("time,frequency,confidence\n0.0,220.0,1.0\n", "a", 0.012).unwrap();
        assert_eq!(t.frames.len(), 1);
    }

    #[test]
    fn bad_number_names_line() {
        let e = parse_pitch_track("0.000,440.0,0.9\n0.012,abc,0.9\n", "a", 0.012).unwrap_err();
        assert!(matches!(e, IngestError::Parse { line: 2, .. }), "{e}");
    }

    #[test]
    fn wrong_arity_and_extra_columns() {
        let e = parse_pitch_track("0.0,440.0\n", "a", 0.012).unwrap_err();
        assert!(matches!(e, IngestError::Parse { line: 1, .. }));
        let e = parse_pitch_track("0.0,440.0,0.9,1\n", "a", 0.012).unwrap_err();
        assert!(matches!(e, IngestError::Parse { line: 1, .. }));
    }

    #[test]
    fn non_increasing_time() {
        let e = parse_pitch_track("0.012,440,1\n0.012,440,1\n", "a", 0.012).unwrap_err();
        assert!(matches!(e, IngestError::Structure { line: 2, .. }));
        let e = parse_pitch_track("0.0,440,1\n0.02,440,1\n", "a", 0.012).unwrap_err();
        assert!(matches!(e, IngestError::Structure { line: 2, .. }));
    }

    #[test]
    fn f0_sentinel_rules() {
        assert!(parse_pitch_track("0.0,0,0.1\n", "a", 0.012).is_ok());
        assert!(parse_pitch_track("0.0,10,0.9\n", "a", 0.012).is_err());
        assert!(parse_pitch_track("0.0,100,1.5\n", "a", 0.012).is_err());
    }

    fn manifest_dir(files: &[&str]) -> tempfile::TempDir {
        let d = tempfile::tempdir().unwrap();
        for f in files {
            std::fs::write(d.path().join(f), "0.0,440,1\n").unwrap();
        }
        d
    }

    #[test]
    fn manifest_ok_and_errors() {
        let d = manifest_dir(&["a.csv", "b.csv"]);
        let ok = r#"{"split":"train","recordings":[
            {"id":"f1","path":"a.csv","labels":{"gender":"f","take":2}},
            {"id":"f2","path":"b.csv"}]}"#;
        let m = load_manifest(ok, d.path()).unwrap();
        assert_eq!(m.recordings.len(), 2);
        assert_eq!(m.split, Split::Train);
        assert_eq!(m.recordings[0].labels["take"], "2");

        let dup = r#"{"split":"train","recordings":[
            {"id":"f1","path":"a.csv"},{"id":"f1","path":"b.csv"}]}"#;
        assert!(matches!(load_manifest(dup, d.path()), Err(IngestError::DuplicateId(id)) if id == "f1"));

        let empty = r#"{"split":"test","recordings":[]}"#;
        assert!(matches!(load_manifest(empty, d.path()), Err(IngestError::Manifest(_))));

        let missing = r#"{"split":"test","recordings":[{"id":"x","path":"nope.csv"}]}"#;
        assert!(matches!(load_manifest(missing, d.path()), Err(IngestError::MissingPath { .. })));

        let split = r#"{"split":"dev","recordings":[{"id":"x","path":"a.csv"}]}"#;
        assert!(matches!(load_manifest(split, d.path()), Err(IngestError::UnknownSplit(_))));
    }

    #[test]
    fn synthesis_is_deterministic() {
        let spec = SynthSpec {
            n_recordings: 3,
            frames_per_recording: 200,
            seed: 7,
            ..SynthSpec::default()
        };
        let (a, ma) = generate_synthetic_corpus(&spec).unwrap();
        let (b, mb) = generate_synthetic_corpus(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma.to_json(), mb.to_json());
        let csv_a: Vec<String> = a.iter().map(PitchTrack::to_csv).collect();
        let csv_b: Vec<String> = b.iter().map(PitchTrack::to_csv).collect();
        assert_eq!(csv_a, csv_b);
    }

    #[test]
    fn degenerate_signal_is_constant() {
        let spec = SynthSpec {
            n_recordings: 2,
            frames_per_recording: 50,
            vibrato_depth_range: Interval::fixed(0.0),
            drift_slope_range: Interval::fixed(0.0),
            noise_std: 0.0,
            ..SynthSpec::default()
        };
        let (tracks, manifest) = generate_synthetic_corpus(&spec).unwrap();
        for (t, rec) in tracks.iter().zip(&manifest.recordings) {
            let base = StyleTuple::from_labels(&rec.labels).unwrap().base_pitch;
            assert!(t.frames.iter().all(|f| (f.f0 - t.frames[0].f0).abs() < 1e-12));
            assert!((t.frames[0].f0 - base).abs() < 1e-6);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = SynthSpec::default();
        s.vibrato_rate_range = Interval::new(7.0, 4.0);
        assert!(s.validate().is_err());
        let s = SynthSpec {
            base_pitch_range: Interval::new(10.0, 20.0),
            ..SynthSpec::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn rate_classes_are_injective_bins() {
        let spec = SynthSpec::default();
        assert_eq!(spec.rate_class(4.0), 0);
        assert_eq!(spec.rate_class(5.01), 1);
        assert_eq!(spec.rate_class(6.99), 2);
        assert_eq!(spec.rate_class(7.0), 2);
    }
}
