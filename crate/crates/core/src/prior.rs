//! Direct regression denoiser producing the starting estimate for sampling.
//!
//! The network maps a noisy `n`-slice window plus the injected dose to the
//! clean central slice. It shares the backbone with the diffusion model but
//! has a single output channel and sees no timestep.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::PairedSlice;
use crate::denoiser::{load_hyper, save_model};
use crate::error::{Error, Result};
use crate::nn::optim::{LrSchedule, Optimizer, OptimizerConfig};
use crate::nn::{sinusoidal_features, Backbone, BackboneConfig, DoseEncoding, EmbeddingMode, ForwardCache, Scalar};
use crate::rng::stream;
use crate::train::accumulate_gradients;
use crate::volume::{extract_window, SliceWindow, Volume3D};

pub const KIND: &str = "prior";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub window: usize,
    pub base_width: usize,
    pub embed_dim: usize,
    pub dose_encoding: DoseEncoding,
    /// How the timestep/dose embedding modulates each stage.
    pub embedding: EmbeddingMode,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            window: 5,
            base_width: 16,
            embed_dim: 32,
            dose_encoding: DoseEncoding::Log10,
            embedding: EmbeddingMode::Add,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window.is_multiple_of(2) {
            return Err(Error::arg(format!("window must be odd, got {}", self.window)));
        }
        self.backbone().validate()
    }

    fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            in_channels: self.window,
            out_channels: 1,
            base_width: self.base_width,
            embed_dim: self.embed_dim,
            embedding: self.embedding,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PriorNet<S = f32> {
    config: PriorConfig,
    net: Backbone<S>,
    pub trained_steps: u64,
}

impl<S: Scalar> PriorNet<S> {
    pub fn zeros(config: PriorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            net: Backbone::new(config.backbone())?,
            trained_steps: 0,
        })
    }

    pub fn init<R: Rng>(config: PriorConfig, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        p.net.params_mut().init_uniform(rng);
        Ok(p)
    }

    pub fn config(&self) -> &PriorConfig {
        &self.config
    }

    pub fn net(&self) -> &Backbone<S> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Backbone<S> {
        &mut self.net
    }

    pub fn features(&self, dose_bq: f64) -> Result<Vec<S>> {
        if !(dose_bq >= 0.0) {
            return Err(Error::Domain(format!("dose must be >= 0, got {dose_bq}")));
        }
        Ok(
            sinusoidal_features(self.config.dose_encoding.scalar(dose_bq), self.config.embed_dim)?
                .into_iter()
                .map(S::lit)
                .collect(),
        )
    }

    /// Runs the network on `n` stacked slices; the output is `cache.output`.
    pub fn forward(&self, cond: &[S], rows: usize, cols: usize, dose_bq: f64) -> Result<ForwardCache<S>> {
        if cond.len() != self.config.window * rows * cols {
            return Err(Error::arg(format!(
                "expected {} conditioning values, got {}",
                self.config.window * rows * cols,
                cond.len()
            )));
        }
        self.net.forward(cond, rows, cols, &self.features(dose_bq)?)
    }
}

impl PriorNet<f32> {
    pub fn predict(&self, window: &SliceWindow, dose_bq: f64) -> Result<Vec<f32>> {
        if window.width != self.config.window {
            return Err(Error::arg(format!(
                "window width {} does not match the prior's n = {}",
                window.width, self.config.window
            )));
        }
        Ok(self
            .forward(&window.channels, window.rows, window.cols, dose_bq)?
            .output)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_model(path.as_ref(), KIND, self.config, &self.net, self.trained_steps)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (hyper, ck) = load_hyper::<PriorConfig>(path.as_ref(), KIND)?;
        let mut p = Self::zeros(hyper.config)?;
        ck.load_into(p.net.params_mut())?;
        p.trained_steps = hyper.trained_steps;
        Ok(p)
    }
}

/// Denoises every slice of `v` and assembles the result with `v`'s metadata.
pub fn denoise_prior(prior: &PriorNet, v: &Volume3D) -> Result<Volume3D> {
    if prior.trained_steps == 0 {
        return Err(Error::arg("prior network is untrained"));
    }
    let [s, h, w] = v.dims();
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::arg(format!("slice size {h}x{w} must be a multiple of 4")));
    }
    let n = prior.config().window;
    let slices = (0..s)
        .into_par_iter()
        .map(|i| prior.predict(&extract_window(v, i, n)?, v.meta.dose_bq))
        .collect::<Result<Vec<_>>>()?;
    v.with_data(slices.concat())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for PriorTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Constant,
            optimizer: OptimizerConfig::default(),
            seed: 0,
        }
    }
}

/// Mean squared error of the prior over `samples`.
pub fn prior_loss(prior: &PriorNet, samples: &[PairedSlice]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::arg("empty sample set"));
    }
    let sums = samples
        .par_iter()
        .map(|s| {
            let out = prior.predict(&s.window, s.dose_bq)?;
            Ok(mse(&out, &s.target))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(sums.iter().sum::<f64>() / samples.len() as f64)
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64
}

/// Fits `prior` to `samples` by minibatch gradient descent on the MSE.
///
/// Returns the training loss of every step.
pub fn fit_prior(prior: &mut PriorNet, samples: &[PairedSlice], config: &PriorTrainConfig) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::arg("prior training needs at least one sample"));
    }
    if config.batch_size == 0 {
        return Err(Error::arg("batch size must be >= 1"));
    }
    let mut opt = Optimizer::new(config.optimizer, prior.net.num_params());
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut rng = stream(config.seed, "prior-step", step as u64);
        let batch: Vec<&PairedSlice> = (0..config.batch_size)
            .map(|_| &samples[rng.random_range(0..samples.len())])
            .collect();
        let scale = 1.0 / config.batch_size as f32;
        let net = &*prior;
        let (loss, grads) = accumulate_gradients(&batch, net.net.num_params(), |s, grads| {
            let w = &s.window;
            let cache = net.forward(&w.channels, w.rows, w.cols, s.dose_bq)?;
            let p = cache.output.len() as f32;
            let g: Vec<f32> = cache
                .output
                .iter()
                .zip(&s.target)
                .map(|(&o, &t)| 2.0 * (o - t) / p * scale)
                .collect();
            net.net.backward(&cache, &g, grads)?;
            Ok(mse(&cache.output, &s.target))
        })?;
        let loss = loss.iter().sum::<f64>() / config.batch_size as f64;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                step,
                detail: format!("non-finite prior loss {loss}"),
            });
        }
        let lr = config.lr_schedule.rate(config.learning_rate, step, config.steps);
        opt.step(prior.net.params_mut().values_mut(), &grads, lr)?;
        prior.trained_steps += 1;
        losses.push(loss);
        if step % 100 == 0 {
            log::debug!("prior step {step}: loss {loss:.6}");
        }
    }
    Ok(losses)
}

/// Initializes a prior from `config.seed` and fits it.
pub fn train_prior(
    samples: &[PairedSlice],
    model: PriorConfig,
    config: &PriorTrainConfig,
) -> Result<(PriorNet, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::arg("prior training needs at least one sample"));
    }
    let mut prior = PriorNet::init(model, &mut stream(config.seed, "prior-init", 0))?;
    let losses = fit_prior(&mut prior, samples, config)?;
    Ok((prior, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::paired_slices;
    use crate::volume::StudyMeta;

    fn small() -> PriorConfig {
        PriorConfig {
            window: 3,
            base_width: 4,
            embed_dim: 8,
            dose_encoding: DoseEncoding::Log10,
            embedding: EmbeddingMode::Add,
        }
    }

    fn smooth_volume(seed: u64, dims: [usize; 3]) -> Volume3D {
        let mut rng = stream(seed, "vol", 0);
        let (a, b): (f32, f32) = (rng.random_range(0.5..1.5), rng.random_range(0.1..0.4));
        let [s, h, w] = dims;
        let data = (0..s * h * w)
            .map(|i| {
                let (y, x) = ((i / w) % h, i % w);
                a + b * ((x as f32 * 0.7).sin() + (y as f32 * 0.5).cos())
            })
            .collect();
        Volume3D::new(dims, [1.0; 3], data, StudyMeta::new("v", 1e8, 1.0).unwrap()).unwrap()
    }

    fn adam(steps: usize) -> PriorTrainConfig {
        PriorTrainConfig {
            steps,
            batch_size: 1,
            learning_rate: 3e-3,
            optimizer: OptimizerConfig::adam(),
            ..Default::default()
        }
    }

    #[test]
    fn empty_dataset_is_an_argument_error() {
        assert!(matches!(train_prior(&[], small(), &adam(1)), Err(Error::Argument(_))));
    }

    #[test]
    fn single_sample_overfits() {
        let v = smooth_volume(1, [1, 8, 8]);
        let noisy = v
            .with_data(
                v.data()
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x + 0.1 * ((i * 7 % 5) as f32 - 2.0))
                    .collect(),
            )
            .unwrap();
        let samples = paired_slices(&v, &noisy, 3).unwrap();
        let (prior, losses) = train_prior(&samples, small(), &adam(5000)).unwrap();
        let initial = losses[0];
        let last = prior_loss(&prior, &samples).unwrap();
        assert!(last < 1e-3 * initial, "initial {initial}, final {last}");
    }

    #[test]
    fn identity_data_is_learned_and_returned() {
        let vols: Vec<_> = (0..3).map(|i| smooth_volume(i, [2, 8, 8])).collect();
        let samples: Vec<_> = vols.iter().flat_map(|v| paired_slices(v, v, 3).unwrap()).collect();
        let (prior, losses) = train_prior(
            &samples,
            small(),
            &PriorTrainConfig {
                batch_size: 4,
                ..adam(1500)
            },
        )
        .unwrap();
        assert!(losses.last().unwrap() < &(1e-2 * losses[0]));
        let out = denoise_prior(&prior, &vols[0]).unwrap();
        assert_eq!(out.dims(), vols[0].dims());
        assert_eq!(out.meta, vols[0].meta);
        let rel = mse(out.data(), vols[0].data()).sqrt() / mse(vols[0].data(), &vec![0.0; 128]).sqrt();
        assert!(rel < 0.05, "relative error {rel}");
    }

    #[test]
    fn untrained_and_mismatched_inputs_are_rejected() {
        let prior = PriorNet::<f32>::zeros(small()).unwrap();
        let v = smooth_volume(0, [2, 8, 8]);
        assert!(denoise_prior(&prior, &v).is_err());
        let mut trained = prior.clone();
        trained.trained_steps = 1;
        assert!(denoise_prior(&trained, &smooth_volume(0, [2, 6, 8])).is_err());
        assert!(trained.predict(&extract_window(&v, 0, 5).unwrap(), 1e8).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = PriorNet::<f32>::init(small(), &mut stream(2, "x", 0)).unwrap();
        p.trained_steps = 12;
        let path = dir.path().join("prior.ckpt");
        p.save(&path).unwrap();
        let back = PriorNet::load(&path).unwrap();
        assert_eq!(back.net().params(), p.net().params());
        assert_eq!(back.trained_steps, 12);
        assert!(crate::denoiser::Denoiser::load(&path).is_err());
    }
}
