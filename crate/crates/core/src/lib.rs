//! Self-supervised pseudotasks over sung pitch contours.
//!
//! The pipeline runs from CREPE-style pitch tracks to downstream
//! classification reports:
//!
//! * [`ingest`]: pitch-track CSV and JSON manifest parsing, synthetic corpora.
//! * [`contour`]: 100-frame, median-centered cents contours and augmentation.
//! * [`statfeat`]: the 17-value statistical baseline per contour.
//! * [`models`]: Siamese VGG19-1D, slot-filling encoder/decoder, downstream MLP,
//!   checkpoints.
//! * [`pipeline`]: pair/triple samplers, training loops, embedding,
//!   feature combination, cross-validation and report rendering.
//!
//! Numeric heavy lifting goes through [`contourlab_autodiff`].

pub mod contour;
pub mod ingest;
pub mod matrix;
pub mod models;
pub mod pipeline;
pub mod statfeat;
pub mod verify;

pub use contourlab_autodiff as autodiff;

/// Frames per contour.
pub const CONTOUR_LEN: usize = 100;
/// Default CREPE hop, seconds.
pub const FRAME_PERIOD: f64 = 0.012;

pub mod fsutil {
    //! Atomic file output.

    use std::fs;
    use std::io::{self, Write};
    use std::path::Path;

    /// Writes `bytes` to a sibling temp file, then renames it over `path`.
    pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        fs::create_dir_all(dir)?;
        let name = path
            .file_name()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
        let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)
    }
}
