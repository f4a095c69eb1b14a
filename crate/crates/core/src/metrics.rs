//! Image-quality metrics restricted to voxels where the reference is
//! nonzero, plus a slice-to-slice consistency score and suite aggregation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::phantom::{Manifest, Split};
use crate::volume::{load_volume, Volume3D};

/// `true` where the reference voxel is nonzero.
pub fn reference_mask(reference: &[f32]) -> Vec<bool> {
    reference.iter().map(|&r| r != 0.0).collect()
}

fn check_pair(x: &[f32], r: &[f32], mask: &[bool]) -> Result<()> {
    if x.len() != r.len() || mask.len() != r.len() {
        return Err(Error::arg(format!(
            "length mismatch: x {}, reference {}, mask {}",
            x.len(),
            r.len(),
            mask.len()
        )));
    }
    Ok(())
}

fn check_volumes(x: &Volume3D, r: &Volume3D) -> Result<()> {
    if x.dims() != r.dims() {
        return Err(Error::arg(format!(
            "dims {:?} differ from reference dims {:?}",
            x.dims(),
            r.dims()
        )));
    }
    Ok(())
}

/// Masked mean squared error and the number of masked voxels.
fn masked_mse(x: &[f32], r: &[f32], mask: &[bool]) -> Result<(f64, usize)> {
    check_pair(x, r, mask)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for ((&a, &b), &m) in x.iter().zip(r).zip(mask) {
        if m {
            sum += (a as f64 - b as f64).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Metric("mask is empty".into()));
    }
    Ok((sum / n as f64, n))
}

/// PSNR in dB with the peak taken as the reference maximum over the mask.
/// Returns `+inf` when the masked error is zero.
pub fn psnr_with(x: &[f32], r: &[f32], mask: &[bool]) -> Result<f64> {
    let (mse, _) = masked_mse(x, r, mask)?;
    let peak = r
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// PSNR over the voxels where `r` is nonzero.
pub fn masked_psnr(x: &[f32], r: &[f32]) -> Result<f64> {
    psnr_with(x, r, &reference_mask(r))
}

pub fn psnr(x: &Volume3D, r: &Volume3D) -> Result<f64> {
    check_volumes(x, r)?;
    masked_psnr(x.data(), r.data())
}

/// Masked RMSE divided by the masked RMS of the reference.
pub fn nrmse_with(x: &[f32], r: &[f32], mask: &[bool]) -> Result<f64> {
    let (mse, n) = masked_mse(x, r, mask)?;
    let ref_ms = r
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| (v as f64).powi(2))
        .sum::<f64>()
        / n as f64;
    if ref_ms == 0.0 {
        return Err(Error::Metric("reference is zero under the mask".into()));
    }
    Ok((mse / ref_ms).sqrt())
}

pub fn nrmse(x: &Volume3D, r: &Volume3D) -> Result<f64> {
    check_volumes(x, r)?;
    nrmse_with(x.data(), r.data(), &reference_mask(r.data()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    /// Edge length of the cubic window (odd).
    pub window: usize,
    pub c1: f64,
    pub c2: f64,
}

impl SsimParams {
    pub const K1: f64 = 0.01;
    pub const K2: f64 = 0.03;

    /// 7-voxel window and constants from the masked reference dynamic range.
    ///
    /// A constant reference has zero range; its magnitude is used instead so
    /// the constants stay positive.
    pub fn from_reference(r: &[f32], mask: &[bool]) -> Result<Self> {
        let vals = r.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v as f64);
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if lo > hi {
            return Err(Error::Metric("mask is empty".into()));
        }
        let range = if hi > lo { hi - lo } else { hi.abs().max(lo.abs()) };
        Ok(Self {
            window: 7,
            c1: (Self::K1 * range).powi(2),
            c2: (Self::K2 * range).powi(2),
        })
    }
}

/// 3D summed-area table with a zero border: `t[(z+1, y+1, x+1)]` holds the
/// sum over `[0..=z] x [0..=y] x [0..=x]`.
struct Integral {
    dims: [usize; 3],
    t: Vec<f64>,
}

impl Integral {
    fn new(dims: [usize; 3], f: impl Fn(usize) -> f64) -> Self {
        let [s, h, w] = dims;
        let (sh, sw) = (h + 1, w + 1);
        let mut t = vec![0.0; (s + 1) * sh * sw];
        let idx = |z: usize, y: usize, x: usize| (z * sh + y) * sw + x;
        for z in 0..s {
            for y in 0..h {
                let mut row = 0.0;
                for x in 0..w {
                    row += f((z * h + y) * w + x);
                    t[idx(z + 1, y + 1, x + 1)] =
                        row + t[idx(z + 1, y, x + 1)] + t[idx(z, y + 1, x + 1)] - t[idx(z, y, x + 1)];
                }
            }
        }
        Self { dims, t }
    }

    /// Sum over the half-open box `lo..hi`.
    fn sum(&self, lo: [usize; 3], hi: [usize; 3]) -> f64 {
        let (sh, sw) = (self.dims[1] + 1, self.dims[2] + 1);
        let v = |z: usize, y: usize, x: usize| self.t[(z * sh + y) * sw + x];
        v(hi[0], hi[1], hi[2]) - v(lo[0], hi[1], hi[2]) - v(hi[0], lo[1], hi[2]) - v(hi[0], hi[1], lo[2])
            + v(lo[0], lo[1], hi[2])
            + v(lo[0], hi[1], lo[2])
            + v(hi[0], lo[1], lo[2])
            - v(lo[0], lo[1], lo[2])
    }
}

fn local_ssim(n: f64, sx: f64, sy: f64, sxx: f64, syy: f64, sxy: f64, p: &SsimParams) -> f64 {
    let (mx, my) = (sx / n, sy / n);
    let vx = sxx / n - mx * mx;
    let vy = syy / n - my * my;
    let cxy = sxy / n - mx * my;
    ((2.0 * mx * my + p.c1) * (2.0 * cxy + p.c2)) / ((mx * mx + my * my + p.c1) * (vx + vy + p.c2))
}

/// Mean local SSIM over windows centred on masked voxels.
///
/// Each window is clipped to the volume and its statistics (population
/// moments) use only the masked voxels inside it.
pub fn ssim_with(x: &[f32], r: &[f32], dims: [usize; 3], mask: &[bool], params: &SsimParams) -> Result<f64> {
    check_pair(x, r, mask)?;
    if dims.iter().product::<usize>() != x.len() {
        return Err(Error::arg("dims do not match the data length"));
    }
    if params.window.is_multiple_of(2) {
        return Err(Error::arg("SSIM window must be odd"));
    }
    let m = |i: usize| if mask[i] { 1.0 } else { 0.0 };
    let xv = |i: usize| m(i) * x[i] as f64;
    let rv = |i: usize| m(i) * r[i] as f64;
    let tables = [
        Integral::new(dims, m),
        Integral::new(dims, xv),
        Integral::new(dims, rv),
        Integral::new(dims, |i| xv(i) * x[i] as f64),
        Integral::new(dims, |i| rv(i) * r[i] as f64),
        Integral::new(dims, |i| xv(i) * r[i] as f64),
    ];
    let half = params.window / 2;
    let [s, h, w] = dims;
    let per_slice: Vec<(f64, usize)> = (0..s)
        .into_par_iter()
        .map(|z| {
            let (mut total, mut count) = (0.0, 0usize);
            for y in 0..h {
                for xx in 0..w {
                    if !mask[(z * h + y) * w + xx] {
                        continue;
                    }
                    let lo = [z.saturating_sub(half), y.saturating_sub(half), xx.saturating_sub(half)];
                    let hi = [(z + half + 1).min(s), (y + half + 1).min(h), (xx + half + 1).min(w)];
                    let st: Vec<f64> = tables.iter().map(|t| t.sum(lo, hi)).collect();
                    total += local_ssim(st[0], st[1], st[2], st[3], st[4], st[5], params);
                    count += 1;
                }
            }
            (total, count)
        })
        .collect();
    let (total, count) = per_slice.iter().fold((0.0, 0), |(a, b), (c, d)| (a + c, b + d));
    if count == 0 {
        return Err(Error::Metric("no SSIM window contains a masked voxel".into()));
    }
    Ok(total / count as f64)
}

pub fn ssim(x: &Volume3D, r: &Volume3D) -> Result<f64> {
    check_volumes(x, r)?;
    let mask = reference_mask(r.data());
    let params = SsimParams::from_reference(r.data(), &mask)?;
    ssim_with(x.data(), r.data(), r.dims(), &mask, &params)
}

/// Mean absolute difference between adjacent slices.
pub fn z_consistency(x: &Volume3D) -> Result<f64> {
    let s = x.num_slices();
    if s < 2 {
        return Err(Error::Metric(format!("need at least 2 slices, got {s}")));
    }
    let n = x.slice_len();
    let total: f64 = (0..s - 1)
        .map(|i| {
            x.slice_data(i)
                .iter()
                .zip(x.slice_data(i + 1))
                .map(|(&a, &b)| (b as f64 - a as f64).abs())
                .sum::<f64>()
        })
        .sum();
    Ok(total / ((s - 1) * n) as f64)
}

/// `|sum(x) - sum(r)| / |sum(r)|` over the whole volume.
pub fn activity_rel_error(x: &Volume3D, r: &Volume3D) -> Result<f64> {
    check_volumes(x, r)?;
    let tr = r.total_activity();
    if tr == 0.0 {
        return Err(Error::Metric("reference has zero total activity".into()));
    }
    Ok((x.total_activity() - tr).abs() / tr.abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricSet {
    pub psnr: f64,
    pub nrmse: f64,
    pub ssim: f64,
    pub z_consistency: f64,
    pub activity_rel_error: f64,
}

pub fn evaluate_volume(x: &Volume3D, r: &Volume3D) -> Result<MetricSet> {
    Ok(MetricSet {
        psnr: psnr(x, r)?,
        nrmse: nrmse(x, r)?,
        ssim: ssim(x, r)?,
        z_consistency: z_consistency(x)?,
        activity_rel_error: activity_rel_error(x, r)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyMetrics {
    pub method: String,
    pub study: String,
    pub fraction: f64,
    pub metrics: MetricSet,
}

// Flat field list so rows serialize to CSV (csv cannot write flattened maps).
impl Serialize for StudyMetrics {
    fn serialize<Ser: serde::Serializer>(&self, s: Ser) -> std::result::Result<Ser::Ok, Ser::Error> {
        use serde::ser::SerializeStruct;
        let m = &self.metrics;
        let mut st = s.serialize_struct("StudyMetrics", 8)?;
        st.serialize_field("method", &self.method)?;
        st.serialize_field("study", &self.study)?;
        st.serialize_field("fraction", &self.fraction)?;
        st.serialize_field("psnr", &m.psnr)?;
        st.serialize_field("nrmse", &m.nrmse)?;
        st.serialize_field("ssim", &m.ssim)?;
        st.serialize_field("z_consistency", &m.z_consistency)?;
        st.serialize_field("activity_rel_error", &m.activity_rel_error)?;
        st.end()
    }
}

/// One line of the summary table: mean and sample standard deviation of
/// each metric for a method at one count fraction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteRow {
    pub method: String,
    pub fraction: f64,
    pub count: usize,
    pub psnr: f64,
    pub psnr_std: f64,
    pub nrmse: f64,
    pub nrmse_std: f64,
    pub ssim: f64,
    pub ssim_std: f64,
    pub z_consistency: f64,
    pub z_consistency_std: f64,
    pub activity_rel_error: f64,
    pub activity_rel_error_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups per-study results by (method, fraction). Methods keep their first
/// appearance order; fractions are ascending.
pub fn aggregate(results: &[StudyMetrics]) -> Vec<SuiteRow> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<(usize, u64), Vec<&MetricSet>> = BTreeMap::new();
    for r in results {
        let mi = match order.iter().position(|m| *m == r.method) {
            Some(i) => i,
            None => {
                order.push(&r.method);
                order.len() - 1
            }
        };
        groups.entry((mi, r.fraction.to_bits())).or_default().push(&r.metrics);
    }
    let mut rows: Vec<SuiteRow> = groups
        .into_iter()
        .map(|((mi, fb), ms)| {
            let col = |f: fn(&MetricSet) -> f64| mean_std(&ms.iter().map(|m| f(m)).collect::<Vec<_>>());
            let (psnr, psnr_std) = col(|m| m.psnr);
            let (nrmse, nrmse_std) = col(|m| m.nrmse);
            let (ssim, ssim_std) = col(|m| m.ssim);
            let (z, z_std) = col(|m| m.z_consistency);
            let (a, a_std) = col(|m| m.activity_rel_error);
            SuiteRow {
                method: order[mi].to_string(),
                fraction: f64::from_bits(fb),
                count: ms.len(),
                psnr,
                psnr_std,
                nrmse,
                nrmse_std,
                ssim,
                ssim_std,
                z_consistency: z,
                z_consistency_std: z_std,
                activity_rel_error: a,
                activity_rel_error_std: a_std,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        let ia = order.iter().position(|m| *m == a.method);
        let ib = order.iter().position(|m| *m == b.method);
        ia.cmp(&ib).then(a.fraction.total_cmp(&b.fraction))
    });
    rows
}

pub fn write_csv<W: Write, T: Serialize>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn write_csv_file<T: Serialize>(rows: &[T], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(rows, file)
}

/// File name of a method's output for one study and count fraction.
pub fn output_file_name(study: &str, fraction: f64) -> String {
    format!("{study}_{fraction:.4}.vol")
}

/// Where a method's volumes live.
#[derive(Debug, Clone, PartialEq)]
pub enum OutputSource {
    /// The low-count inputs listed in the manifest.
    Input,
    /// `<dir>/<study>_<fraction>.vol` files.
    Dir(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutputs {
    pub method: String,
    pub source: OutputSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub rows: Vec<SuiteRow>,
    pub studies: Vec<StudyMetrics>,
    /// Expected output files that could not be found.
    pub missing: Vec<PathBuf>,
}

/// Scores every method on every study of `split` at the given fractions
/// (all manifest fractions when `None`). Missing outputs are reported, not
/// fatal.
pub fn evaluate_suite(
    manifest: &Manifest,
    root: impl AsRef<Path>,
    split: Split,
    fractions: Option<&[f64]>,
    methods: &[MethodOutputs],
) -> Result<SuiteReport> {
    let root = root.as_ref();
    let mut jobs = Vec::new();
    let mut missing = Vec::new();
    for m in methods {
        for study in manifest.studies_in(split) {
            for low in &study.low {
                if fractions.is_some_and(|fs| !fs.iter().any(|f| (f - low.fraction).abs() < 1e-12)) {
                    continue;
                }
                let path = match &m.source {
                    OutputSource::Input => root.join(&low.path),
                    OutputSource::Dir(d) => d.join(output_file_name(&study.id, low.fraction)),
                };
                if path.exists() {
                    jobs.push((m.method.clone(), study, low.fraction, path));
                } else {
                    missing.push(path);
                }
            }
        }
    }
    let studies = jobs
        .par_iter()
        .map(|(method, study, fraction, path)| {
            let truth = load_volume(root.join(&study.full))?;
            let x = load_volume(path)?;
            Ok(StudyMetrics {
                method: method.clone(),
                study: study.id.clone(),
                fraction: *fraction,
                metrics: evaluate_volume(&x, &truth)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    for p in &missing {
        log::warn!("missing output {}", p.display());
    }
    Ok(SuiteReport {
        rows: aggregate(&studies),
        studies,
        missing,
    })
}
