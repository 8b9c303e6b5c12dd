//! Fixed-length cents contours.
//!
//! Voiced frames of a track are concatenated, converted to cents against
//! 440 Hz, cut into consecutive 100-frame windows (the last one zero-padded)
//! and median-centered over each window's valid region.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::ingest::PitchTrack;
use crate::CONTOUR_LEN;

pub const CENTS_REFERENCE_HZ: f64 = 440.0;
pub const DEFAULT_MAX_SHIFT: f64 = 1200.0;

#[derive(Debug, Error)]
pub enum ContourError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("malformed contour {index}: {msg}")]
    Malformed { index: usize, msg: String },
    #[error("contour file: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ContourError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contour {
    pub recording_id: String,
    /// Offset of the first frame within the recording's voiced-frame
    /// sequence; consecutive contours of a recording differ by 100.
    pub start_frame: usize,
    pub valid_length: usize,
    pub values_cents: Vec<f64>,
    pub values_hz: Vec<f64>,
}

impl Contour {
    pub fn valid_cents(&self) -> &[f64] {
        &self.values_cents[..self.valid_length]
    }

    pub fn valid_hz(&self) -> &[f64] {
        &self.values_hz[..self.valid_length]
    }

    fn check(&self, index: usize) -> Result<()> {
        let bad = |msg: String| Err(ContourError::Malformed { index, msg });
        if self.values_cents.len() != CONTOUR_LEN || self.values_hz.len() != CONTOUR_LEN {
            return bad(format!("expected {CONTOUR_LEN} values per domain"));
        }
        if self.valid_length == 0 || self.valid_length > CONTOUR_LEN {
            return bad(format!("valid_length {} outside [1, {CONTOUR_LEN}]", self.valid_length));
        }
        let padded = self.values_cents[self.valid_length..]
            .iter()
            .chain(&self.values_hz[self.valid_length..]);
        if padded.into_iter().any(|&v| v != 0.0) {
            return bad("non-zero value in pad region".into());
        }
        if self.values_cents.iter().chain(&self.values_hz).any(|v| !v.is_finite()) {
            return bad("non-finite value".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContourSequence {
    pub recording_id: String,
    pub contours: Vec<Contour>,
}

impl ContourSequence {
    pub fn len(&self) -> usize {
        self.contours.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contours.is_empty()
    }
}

pub fn hz_to_cents(f: f64, reference: f64) -> Result<f64> {
    if !(f > 0.0) || !(reference > 0.0) {
        return Err(ContourError::Domain(format!(
            "cents need positive frequencies, got {f} Hz against {reference} Hz"
        )));
    }
    Ok(1200.0 * (f / reference).log2())
}

/// Median of a non-empty slice; the mean of the middle two for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Subtracts the median of `values[..valid_length]` from that prefix; the
/// remainder is copied unchanged.
pub fn center_median(values: &[f64], valid_length: usize) -> Result<Vec<f64>> {
    if valid_length == 0 {
        return Err(ContourError::Domain("valid_length must be at least 1".into()));
    }
    if valid_length > values.len() {
        return Err(ContourError::Domain(format!(
            "valid_length {valid_length} exceeds {} values",
            values.len()
        )));
    }
    let m = median(&values[..valid_length]);
    let mut out = values.to_vec();
    out[..valid_length].iter_mut().for_each(|v| *v -= m);
    Ok(out)
}

/// Splits a track's voiced frames into centered 100-frame contours.
pub fn segment_track(track: &PitchTrack, voicing_threshold: f64) -> Result<ContourSequence> {
    if track.frames.is_empty() {
        return Err(ContourError::Domain(format!(
            "track `{}` has no frames",
            track.recording_id
        )));
    }
    let voiced: Vec<f64> = track
        .frames
        .iter()
        .filter(|f| PitchTrack::is_voiced(f, voicing_threshold))
        .map(|f| f.f0)
        .collect();
    let mut contours = Vec::with_capacity(voiced.len().div_ceil(CONTOUR_LEN));
    for (i, chunk) in voiced.chunks(CONTOUR_LEN).enumerate() {
        let n = chunk.len();
        let mut cents = vec![0.0; CONTOUR_LEN];
        let mut hz = vec![0.0; CONTOUR_LEN];
        for (j, &f) in chunk.iter().enumerate() {
            cents[j] = hz_to_cents(f, CENTS_REFERENCE_HZ)?;
            hz[j] = f;
        }
        contours.push(Contour {
            recording_id: track.recording_id.clone(),
            start_frame: i * CONTOUR_LEN,
            valid_length: n,
            values_cents: center_median(&cents, n)?,
            values_hz: hz,
        });
    }
    Ok(ContourSequence {
        recording_id: track.recording_id.clone(),
        contours,
    })
}

/// Adds a constant `shift` (cents) to the valid region.
pub fn transpose(c: &Contour, shift: f64) -> Contour {
    let mut out = c.clone();
    out.values_cents[..c.valid_length]
        .iter_mut()
        .for_each(|v| *v += shift);
    out
}

/// Transposes by one draw from `Uniform[-max_shift, max_shift]`.
pub fn augment_transpose(c: &Contour, rng: &mut impl Rng, max_shift: f64) -> Contour {
    let s = if max_shift > 0.0 {
        rng.random_range(-max_shift..=max_shift)
    } else {
        0.0
    };
    transpose(c, s)
}

/// Regroups a flat contour list into per-recording sequences sorted by
/// `start_frame`, preserving first-appearance order of recordings.
pub fn group_by_recording(contours: Vec<Contour>) -> Vec<ContourSequence> {
    let mut seqs: Vec<ContourSequence> = Vec::new();
    let mut index = std::collections::HashMap::new();
    for c in contours {
        let at = *index.entry(c.recording_id.clone()).or_insert_with(|| {
            seqs.push(ContourSequence {
                recording_id: c.recording_id.clone(),
                contours: Vec::new(),
            });
            seqs.len() - 1
        });
        seqs[at].contours.push(c);
    }
    for s in &mut seqs {
        s.contours.sort_by_key(|c| c.start_frame);
    }
    seqs
}

pub fn contours_to_json(contours: &[Contour]) -> String {
    serde_json::to_string(contours).expect("contours serialize")
}

pub fn contours_from_json(text: &str) -> Result<Vec<Contour>> {
    let list: Vec<Contour> =
        serde_json::from_str(text).map_err(|e| ContourError::Format(e.to_string()))?;
    for (i, c) in list.iter().enumerate() {
        c.check(i)?;
    }
    Ok(list)
}

pub fn write_contours(path: &Path, contours: &[Contour]) -> Result<()> {
    write_atomic(path, contours_to_json(contours).as_bytes()).map_err(|source| ContourError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_contours(path: &Path) -> Result<Vec<Contour>> {
    let text = std::fs::read_to_string(path).map_err(|source| ContourError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    contours_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Frame;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn track(f0s: &[f64], conf: &[f64]) -> PitchTrack {
        PitchTrack {
            recording_id: "r".into(),
            frame_period: 0.012,
            frames: f0s
                .iter()
                .zip(conf)
                .enumerate()
                .map(|(i, (&f0, &confidence))| Frame {
                    time: i as f64 * 0.012,
                    f0,
                    confidence,
                })
                .collect(),
        }
    }

    #[test]
    fn cents_conversion() {
        assert_eq!(hz_to_cents(440.0, 440.0).unwrap(), 0.0);
        assert!((hz_to_cents(880.0, 440.0).unwrap() - 1200.0).abs() < 1e-12);
        assert!((hz_to_cents(261.626, 440.0).unwrap() + 899.99).abs() < 0.05);
        assert!(hz_to_cents(0.0, 440.0).is_err());
        assert!(hz_to_cents(440.0, -1.0).is_err());
    }

    #[test]
    fn median_centering() {
        assert_eq!(center_median(&[100.0, 200.0, 300.0], 3).unwrap(), [-100.0, 0.0, 100.0]);
        assert_eq!(center_median(&[0.0, 0.0, 0.0], 3).unwrap(), [0.0; 3]);
        assert_eq!(
            center_median(&[100.0, 200.0, 300.0, 400.0], 4).unwrap(),
            [-150.0, -50.0, 50.0, 150.0]
        );
        assert_eq!(center_median(&[5.0, 1.0, 0.0], 2).unwrap(), [2.0, -2.0, 0.0]);
        assert!(center_median(&[1.0], 0).is_err());
    }

    #[test]
    fn split_and_pad() {
        let f: Vec<f64> = (0..250).map(|i| 200.0 + i as f64).collect();
        let seq = segment_track(&track(&f, &vec![0.9; 250]), 0.5).unwrap();
        let lens: Vec<usize> = seq.contours.iter().map(|c| c.valid_length).collect();
        assert_eq!(lens, [100, 100, 50]);
        let starts: Vec<usize> = seq.contours.iter().map(|c| c.start_frame).collect();
        assert_eq!(starts, [0, 100, 200]);
        let last = &seq.contours[2];
        assert!(last.values_cents[50..].iter().all(|&v| v == 0.0));
        assert!(last.values_hz[50..].iter().all(|&v| v == 0.0));
        assert_eq!(last.values_hz[0], 400.0);
    }

    #[test]
    fn exactly_one_window() {
        let seq = segment_track(&track(&[300.0; 100], &[1.0; 100]), 0.5).unwrap();
        assert_eq!(seq.len(), 1);
        assert_eq!(seq.contours[0].valid_length, 100);
    }

    #[test]
    fn unvoiced_frames_are_dropped() {
        let seq = segment_track(&track(&[0.0, 300.0, 0.0], &[0.1, 0.9, 0.1]), 0.5).unwrap();
        assert_eq!(seq.contours[0].valid_length, 1);
        let all_unvoiced = segment_track(&track(&[220.0; 10], &[0.2; 10]), 0.5).unwrap();
        assert!(all_unvoiced.is_empty());
    }

    #[test]
    fn forced_zero_shift_and_pad_invariance() {
        let f: Vec<f64> = (0..50).map(|i| 200.0 + 3.0 * i as f64).collect();
        let c = segment_track(&track(&f, &[1.0; 50]), 0.5).unwrap().contours.remove(0);
        assert_eq!(transpose(&c, 0.0), c);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a = augment_transpose(&c, &mut rng, DEFAULT_MAX_SHIFT);
            assert!(a.values_cents[50..].iter().all(|&v| v == 0.0));
            assert_eq!(a.values_hz, c.values_hz);
            assert_eq!(a.valid_length, 50);
        }
    }

    #[test]
    fn shift_distribution_is_centered_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let c = Contour {
            recording_id: "r".into(),
            start_frame: 0,
            valid_length: 1,
            values_cents: vec![0.0; CONTOUR_LEN],
            values_hz: {
                let mut v = vec![0.0; CONTOUR_LEN];
                v[0] = 440.0;
                v
            },
        };
        let shifts: Vec<f64> = (0..10_000)
            .map(|_| augment_transpose(&c, &mut rng, 1200.0).values_cents[0])
            .collect();
        assert!(shifts.iter().all(|s| (-1200.0..=1200.0).contains(s)));
        let mean = shifts.iter().sum::<f64>() / shifts.len() as f64;
        assert!(mean.abs() < 25.0, "mean {mean}");
    }

    #[test]
    fn json_container_validates() {
        let seq = segment_track(&track(&[300.0; 120], &[1.0; 120]), 0.5).unwrap();
        let text = contours_to_json(&seq.contours);
        assert_eq!(contours_from_json(&text).unwrap(), seq.contours);
        let mut bad = seq.contours.clone();
        bad[1].values_hz[99] = 1.0;
        assert!(contours_from_json(&contours_to_json(&bad)).is_err());
    }
}
