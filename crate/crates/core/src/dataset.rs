//! Paired training examples: a noisy slice window and the clean central slice.

use std::path::Path;

use crate::error::{Error, Result};
use crate::phantom::{load_studies, Manifest, Split};
use crate::volume::{extract_window, SliceWindow, Volume3D};

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSlice {
    /// Low-count window centred on the target slice.
    pub window: SliceWindow,
    /// Full-count central slice.
    pub target: Vec<f32>,
    pub dose_bq: f64,
    pub count_fraction: f64,
}

/// One example per slice of a (full, low-count) volume pair.
pub fn paired_slices(full: &Volume3D, low: &Volume3D, n: usize) -> Result<Vec<PairedSlice>> {
    if full.dims() != low.dims() {
        return Err(Error::arg(format!(
            "full-count dims {:?} differ from low-count dims {:?}",
            full.dims(),
            low.dims()
        )));
    }
    (0..full.num_slices())
        .map(|s| {
            Ok(PairedSlice {
                window: extract_window(low, s, n)?,
                target: full.slice_data(s).to_vec(),
                dose_bq: low.meta.dose_bq,
                count_fraction: low.meta.count_fraction,
            })
        })
        .collect()
}

/// All paired slices of one split, optionally restricted to some fractions.
pub fn load_pairs(
    manifest: &Manifest,
    root: impl AsRef<Path>,
    split: Split,
    n: usize,
    fractions: Option<&[f64]>,
) -> Result<Vec<PairedSlice>> {
    let mut out = Vec::new();
    for study in load_studies(manifest, root, split, fractions)? {
        for low in &study.low {
            out.extend(paired_slices(&study.full, low, n)?);
        }
    }
    Ok(out)
}
