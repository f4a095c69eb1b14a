//! Synthetic activity phantoms and image-space low-count simulation.
//!
//! Low-count volumes are produced by Poisson thinning: each voxel's expected
//! count is `value * events_per_unit * fraction`, and the drawn count is
//! scaled back so the simulated image is an unbiased estimate of the truth.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::volume::{load_volume, save_volume, StudyMeta, Volume3D};

/// Uniform-activity ellipsoid in voxel-index coordinates `(z, y, x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub activity: f64,
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

/// Small sphere that multiplies local uptake by `contrast`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub center: [f64; 3],
    pub radius: f64,
    pub contrast: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub id: String,
    pub dims: [usize; 3],
    pub voxel_size_mm: [f64; 3],
    pub organs: Vec<Ellipsoid>,
    pub lesions: Vec<Lesion>,
    /// Activity added to every voxel.
    pub background: f64,
    /// Full injected activity is drawn uniformly from this range (Bq).
    pub dose_range_bq: [f64; 2],
    pub seed: u64,
}

fn within(center: [f64; 3], radii: [f64; 3], dims: [usize; 3]) -> bool {
    (0..3).all(|i| center[i] - radii[i] >= -0.5 && center[i] + radii[i] <= dims[i] as f64 - 0.5)
}

impl PhantomSpec {
    pub fn empty(id: impl Into<String>, dims: [usize; 3]) -> Self {
        Self {
            id: id.into(),
            dims,
            voxel_size_mm: [2.0, 2.0, 2.0],
            organs: Vec::new(),
            lesions: Vec::new(),
            background: 0.0,
            dose_range_bq: [1.5e8, 3.5e8],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Spec(format!("dims must be >= 1, got {:?}", self.dims)));
        }
        if !(self.background >= 0.0) {
            return Err(Error::Spec("background must be >= 0".into()));
        }
        let [lo, hi] = self.dose_range_bq;
        if !(lo >= 0.0 && lo <= hi) {
            return Err(Error::Spec(format!("bad dose range {lo}..{hi}")));
        }
        for (i, o) in self.organs.iter().enumerate() {
            if !(o.activity >= 0.0) || o.radii.iter().any(|&r| !(r > 0.0)) {
                return Err(Error::Spec(format!("organ {i} has invalid activity or radii")));
            }
            if !within(o.center, o.radii, self.dims) {
                return Err(Error::Spec(format!("organ {i} extends outside the volume")));
            }
        }
        for (i, l) in self.lesions.iter().enumerate() {
            if !(l.contrast >= 0.0) || !(l.radius > 0.0) {
                return Err(Error::Spec(format!("lesion {i} has invalid contrast or radius")));
            }
            if !within(l.center, [l.radius; 3], self.dims) {
                return Err(Error::Spec(format!("lesion {i} extends outside the volume")));
            }
        }
        Ok(())
    }

    /// A body ellipsoid with a few brighter organs and small hot lesions,
    /// all drawn from `seed`.
    pub fn random(id: impl Into<String>, dims: [usize; 3], seed: u64) -> Self {
        let mut rng = stream(seed, "phantom-spec", 0);
        let mid = dims.map(|d| (d as f64 - 1.0) / 2.0);
        let half = dims.map(|d| d as f64 / 2.0 - 0.5);
        let body = Ellipsoid {
            center: mid,
            radii: [
                half[0] * rng.random_range(0.85..0.97),
                half[1] * rng.random_range(0.75..0.92),
                half[2] * rng.random_range(0.6..0.8),
            ],
            activity: rng.random_range(0.15..0.3),
        };
        let mut organs = vec![body.clone()];
        let inside = |rng: &mut rand_chacha::ChaCha8Rng, frac: f64| -> [f64; 3] {
            loop {
                let p = [0, 1, 2].map(|i| mid[i] + body.radii[i] * frac * rng.random_range(-1.0..1.0));
                if body.contains(p) {
                    return p;
                }
            }
        };
        for _ in 0..rng.random_range(2..=4) {
            let center = inside(&mut rng, 0.6);
            let mut radii = [0, 1, 2].map(|i| dims[i] as f64 * rng.random_range(0.1..0.22));
            // Shrink until the organ fits inside the volume.
            while !within(center, radii, dims) {
                radii = radii.map(|r| r * 0.9);
            }
            organs.push(Ellipsoid {
                center,
                radii: radii.map(|r| r.max(0.75)),
                activity: rng.random_range(0.15..0.9),
            });
        }
        organs.retain(|o| within(o.center, o.radii, dims));
        let mut lesions = Vec::new();
        for _ in 0..rng.random_range(1..=3) {
            let radius = rng.random_range(1.0..2.2);
            let center = inside(&mut rng, 0.7);
            if within(center, [radius; 3], dims) {
                lesions.push(Lesion {
                    center,
                    radius,
                    contrast: rng.random_range(2.0..4.0),
                });
            }
        }
        Self {
            id: id.into(),
            dims,
            voxel_size_mm: [2.0, 2.0, 2.0],
            organs,
            lesions,
            background: 0.0,
            dose_range_bq: [1.5e8, 3.5e8],
            seed,
        }
    }
}

/// Rasterizes a phantom: voxel centres at integer `(z, y, x)` coordinates.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Volume3D> {
    spec.validate()?;
    let [s, h, w] = spec.dims;
    let mut data = vec![0.0f32; s * h * w];
    for z in 0..s {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                let mut a = spec.background;
                for o in &spec.organs {
                    if o.contains(p) {
                        a += o.activity;
                    }
                }
                for l in &spec.lesions {
                    let d2: f64 = (0..3).map(|i| (p[i] - l.center[i]).powi(2)).sum();
                    if d2 <= l.radius * l.radius {
                        a *= l.contrast;
                    }
                }
                data[(z * h + y) * w + x] = a as f32;
            }
        }
    }
    let mut rng = stream(spec.seed, "phantom-dose", 0);
    let [lo, hi] = spec.dose_range_bq;
    let dose = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let meta = StudyMeta::new(spec.id.clone(), dose, 1.0)?;
    Volume3D::new(spec.dims, spec.voxel_size_mm, data, meta)
}

/// Poisson-thinned low-count version of `v`.
pub fn simulate_low_count<R: Rng>(v: &Volume3D, fraction: f64, events_per_unit: f64, rng: &mut R) -> Result<Volume3D> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::arg(format!("count fraction must lie in (0, 1], got {fraction}")));
    }
    if !(events_per_unit > 0.0) {
        return Err(Error::arg(format!(
            "events_per_unit must be > 0, got {events_per_unit}"
        )));
    }
    let scale = events_per_unit * fraction;
    let mut data = Vec::with_capacity(v.len());
    for &x in v.data() {
        let lambda = x as f64 * scale;
        if lambda < 0.0 {
            return Err(Error::Domain("negative activity cannot be Poisson sampled".into()));
        }
        let k = if lambda == 0.0 {
            0.0
        } else {
            Poisson::new(lambda)
                .map_err(|e| Error::Domain(format!("Poisson rate {lambda}: {e}")))?
                .sample(rng)
        };
        data.push((k / scale) as f32);
    }
    let mut out = v.with_data(data)?;
    out.meta.count_fraction = v.meta.count_fraction * fraction;
    out.meta.dose_bq = v.meta.dose_bq * fraction;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowCountEntry {
    pub fraction: f64,
    pub path: PathBuf,
    pub dose_bq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyEntry {
    pub id: String,
    pub split: Split,
    pub full: PathBuf,
    pub full_dose_bq: f64,
    pub low: Vec<LowCountEntry>,
}

/// Index of a generated dataset. Paths are relative to the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub dims: [usize; 3],
    pub seed: u64,
    pub events_per_unit: f64,
    pub fractions: Vec<f64>,
    pub studies: Vec<StudyEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Loads `manifest.json` from a directory, or the given file directly.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
        let m: Manifest = serde_json::from_slice(&bytes)?;
        if m.version != 1 {
            return Err(Error::Version {
                found: m.version,
                expected: 1,
            });
        }
        Ok(m)
    }

    pub fn studies_in(&self, split: Split) -> impl Iterator<Item = &StudyEntry> {
        self.studies.iter().filter(move |s| s.split == split)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_phantoms: usize,
    pub dims: [usize; 3],
    pub fractions: Vec<f64>,
    pub events_per_unit: f64,
    /// Train / val / test proportions.
    pub split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_phantoms: 20,
            dims: [64, 64, 64],
            fractions: vec![0.01, 0.02, 0.05, 0.10, 0.25, 0.50],
            events_per_unit: 300.0,
            split: [0.4, 0.1, 0.5],
        }
    }
}

/// Number of studies per split: `floor(n * p)` for val and test, the rest
/// to train.
pub fn split_counts(n: usize, proportions: [f64; 3]) -> Result<[usize; 3]> {
    if proportions.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (proportions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::arg(format!(
            "split proportions {proportions:?} must be in [0,1] and sum to 1"
        )));
    }
    let val = (n as f64 * proportions[1] + 1e-9).floor() as usize;
    let test = (n as f64 * proportions[2] + 1e-9).floor() as usize;
    Ok([n - val - test, val, test])
}

fn fraction_tag(f: f64) -> String {
    format!("{f:.4}")
}

pub fn low_count_file_name(fraction: f64) -> String {
    format!("low_{}.vol", fraction_tag(fraction))
}

/// Writes full-count phantoms plus one low-count volume per fraction, and
/// the manifest indexing them.
pub fn build_dataset(config: &DataConfig, out_dir: impl AsRef<Path>, seed: u64) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    if config.fractions.is_empty() {
        return Err(Error::arg("at least one count fraction is required"));
    }
    for &f in &config.fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::arg(format!("count fraction {f} outside (0, 1]")));
        }
    }
    let counts = split_counts(config.num_phantoms, config.split)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut studies = Vec::with_capacity(config.num_phantoms);
    for i in 0..config.num_phantoms {
        let id = format!("phantom_{i:03}");
        let split = if i < counts[0] {
            Split::Train
        } else if i < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
        let spec = PhantomSpec::random(&id, config.dims, crate::rng::derive_seed(seed, "phantom", i as u64));
        let full = generate_phantom(&spec)?;
        let rel_dir = PathBuf::from(&id);
        let dir = out_dir.join(&rel_dir);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_volume(&full, dir.join("full.vol"))?;
        let mut low = Vec::new();
        for (j, &fraction) in config.fractions.iter().enumerate() {
            let mut rng = stream(seed, &format!("low-count/{i}"), j as u64);
            let v = simulate_low_count(&full, fraction, config.events_per_unit, &mut rng)?;
            let name = low_count_file_name(fraction);
            save_volume(&v, dir.join(&name))?;
            low.push(LowCountEntry {
                fraction,
                path: rel_dir.join(name),
                dose_bq: v.meta.dose_bq,
            });
        }
        studies.push(StudyEntry {
            id,
            split,
            full: rel_dir.join("full.vol"),
            full_dose_bq: full.meta.dose_bq,
            low,
        });
    }
    let manifest = Manifest {
        version: 1,
        dims: config.dims,
        seed,
        events_per_unit: config.events_per_unit,
        fractions: config.fractions.clone(),
        studies,
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

/// A study loaded into memory: ground truth plus its low-count versions.
#[derive(Debug, Clone)]
pub struct LoadedStudy {
    pub id: String,
    pub full: Volume3D,
    pub low: Vec<Volume3D>,
}

pub fn load_studies(
    manifest: &Manifest,
    root: impl AsRef<Path>,
    split: Split,
    fractions: Option<&[f64]>,
) -> Result<Vec<LoadedStudy>> {
    let root = root.as_ref();
    manifest
        .studies_in(split)
        .map(|s| {
            let low = s
                .low
                .iter()
                .filter(|l| fractions.is_none_or(|fs| fs.iter().any(|f| (f - l.fraction).abs() < 1e-12)))
                .map(|l| load_volume(root.join(&l.path)))
                .collect::<Result<Vec<_>>>()?;
            Ok(LoadedStudy {
                id: s.id.clone(),
                full: load_volume(root.join(&s.full))?,
                low,
            })
        })
        .collect()
}
