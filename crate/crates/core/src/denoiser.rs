//! Conditional noise-prediction network.
//!
//! Input channels are `[x_t, window_0 .. window_{n-1}]`; output channel 0 is
//! the noise estimate and channel 1 the variance interpolant `v`, squashed
//! into `[0, 1]` by a logistic map.

use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint::{sidecar_path, Checkpoint};
use crate::nn::{
    dose_time_features, sigmoid, Backbone, BackboneConfig, DoseEncoding, EmbeddingMode, ForwardCache, Scalar,
};
use crate::volume::SliceWindow;

pub const KIND: &str = "denoiser";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Number of conditioning slices `n` (odd).
    pub window: usize,
    pub base_width: usize,
    pub embed_dim: usize,
    pub dose_encoding: DoseEncoding,
    /// How the timestep/dose embedding modulates each stage.
    pub embedding: EmbeddingMode,
}

impl Default for DenoiserConfig {
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

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window.is_multiple_of(2) {
            return Err(Error::arg(format!("window must be odd, got {}", self.window)));
        }
        self.backbone().validate()
    }

    fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            in_channels: self.window + 1,
            out_channels: 2,
            base_width: self.base_width,
            embed_dim: self.embed_dim,
            embedding: self.embedding,
        }
    }
}

/// JSON sidecar written next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHyper<C> {
    pub kind: String,
    pub config: C,
    pub stages: usize,
    pub widths: [usize; 2],
    pub num_params: usize,
    pub trained_steps: u64,
}

pub(crate) fn save_model<C: Serialize, S: Scalar>(
    path: &Path,
    kind: &str,
    config: C,
    net: &Backbone<S>,
    trained_steps: u64,
) -> Result<()> {
    Checkpoint::from_params(kind, net.params()).save(path)?;
    let hyper = ModelHyper {
        kind: kind.to_string(),
        config,
        stages: 2,
        widths: [net.config().base_width, 2 * net.config().base_width],
        num_params: net.num_params(),
        trained_steps,
    };
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_vec_pretty(&hyper)?).map_err(|e| Error::io(&side, e))
}

pub(crate) fn load_hyper<C: for<'de> Deserialize<'de>>(path: &Path, kind: &str) -> Result<(ModelHyper<C>, Checkpoint)> {
    let side = sidecar_path(path);
    let text = fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let hyper: ModelHyper<C> = serde_json::from_slice(&text)?;
    if hyper.kind != kind {
        return Err(Error::Format(format!(
            "expected a {kind} checkpoint, found {}",
            hyper.kind
        )));
    }
    let ck = Checkpoint::load(path)?;
    if ck.kind != kind {
        return Err(Error::Format(format!(
            "expected a {kind} checkpoint, found {}",
            ck.kind
        )));
    }
    Ok((hyper, ck))
}

/// One evaluation of the network.
#[derive(Debug, Clone)]
pub struct Prediction<S> {
    pub eps_hat: Vec<S>,
    pub v: Vec<S>,
    pub cache: ForwardCache<S>,
}

#[derive(Debug, Clone)]
pub struct Denoiser<S = f32> {
    config: DenoiserConfig,
    net: Backbone<S>,
    /// Optimizer steps applied to these parameters.
    pub trained_steps: u64,
}

impl<S: Scalar> Denoiser<S> {
    /// Network with all parameters zero.
    pub fn zeros(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            net: Backbone::new(config.backbone())?,
            trained_steps: 0,
        })
    }

    pub fn init<R: Rng>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        let mut d = Self::zeros(config)?;
        d.net.params_mut().init_uniform(rng);
        Ok(d)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn net(&self) -> &Backbone<S> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Backbone<S> {
        &mut self.net
    }

    pub fn cast<T: Scalar>(&self) -> Denoiser<T> {
        Denoiser {
            config: self.config,
            net: self.net.cast(),
            trained_steps: self.trained_steps,
        }
    }

    /// Sinusoidal timestep + dose features fed to the embedding MLP.
    pub fn features(&self, t: usize, dose_bq: f64) -> Result<Vec<S>> {
        Ok(
            dose_time_features(t, dose_bq, self.config.embed_dim, self.config.dose_encoding)?
                .into_iter()
                .map(S::lit)
                .collect(),
        )
    }

    /// Runs the network on `x_t` (one slice) and `cond` (`n` stacked slices).
    pub fn forward(
        &self,
        x_t: &[S],
        cond: &[S],
        rows: usize,
        cols: usize,
        t: usize,
        dose_bq: f64,
    ) -> Result<Prediction<S>> {
        let hw = rows * cols;
        if x_t.len() != hw || cond.len() != self.config.window * hw {
            return Err(Error::arg(format!(
                "expected x_t of {hw} and {} conditioning values, got {} and {}",
                self.config.window * hw,
                x_t.len(),
                cond.len()
            )));
        }
        let mut input = Vec::with_capacity(hw * (self.config.window + 1));
        input.extend_from_slice(x_t);
        input.extend_from_slice(cond);
        let features = self.features(t, dose_bq)?;
        let cache = self.net.forward(&input, rows, cols, &features)?;
        let eps_hat = cache.output[..hw].to_vec();
        let v = cache.output[hw..].iter().map(|&r| sigmoid(r)).collect();
        Ok(Prediction { eps_hat, v, cache })
    }

    /// Accumulates parameter gradients of `<g_eps, eps_hat> + <g_v, v>`.
    pub fn backward(&self, pred: &Prediction<S>, grad_eps: &[S], grad_v: &[S], grads: &mut [S]) -> Result<()> {
        let hw = pred.eps_hat.len();
        if grad_eps.len() != hw || grad_v.len() != hw {
            return Err(Error::arg("upstream gradients do not match the output shape"));
        }
        let mut g = Vec::with_capacity(2 * hw);
        g.extend_from_slice(grad_eps);
        g.extend(grad_v.iter().zip(&pred.v).map(|(&gv, &v)| gv * v * (S::one() - v)));
        self.net.backward(&pred.cache, &g, grads)
    }
}

impl Denoiser<f32> {
    pub fn predict(&self, x_t: &[f32], window: &SliceWindow, t: usize, dose_bq: f64) -> Result<Prediction<f32>> {
        if window.width != self.config.window {
            return Err(Error::arg(format!(
                "window width {} does not match the model's n = {}",
                window.width, self.config.window
            )));
        }
        self.forward(x_t, &window.channels, window.rows, window.cols, t, dose_bq)
    }

    /// Evaluates independent inputs; results are in input order.
    pub fn predict_batch(&self, items: &[(&[f32], &SliceWindow, usize, f64)]) -> Result<Vec<Prediction<f32>>> {
        items
            .par_iter()
            .map(|(x, w, t, d)| self.predict(x, w, *t, *d))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_model(path.as_ref(), KIND, self.config, &self.net, self.trained_steps)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (hyper, ck) = load_hyper::<DenoiserConfig>(path.as_ref(), KIND)?;
        let mut d = Self::zeros(hyper.config)?;
        ck.load_into(d.net.params_mut())?;
        d.trained_steps = hyper.trained_steps;
        Ok(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            window: 3,
            base_width: 4,
            embed_dim: 8,
            dose_encoding: DoseEncoding::Log10,
            embedding: EmbeddingMode::Add,
        }
    }

    fn window(n: usize, rows: usize, cols: usize, seed: u64) -> SliceWindow {
        let mut rng = stream(seed, "window", 0);
        SliceWindow {
            center_index: 0,
            width: n,
            rows,
            cols,
            channels: (0..n * rows * cols).map(|_| rng.random_range(0.0..2.0)).collect(),
        }
    }

    #[test]
    fn zero_network_predicts_zero_noise_and_half_variance() {
        let d = Denoiser::<f32>::zeros(tiny()).unwrap();
        let w = window(3, 8, 8, 1);
        let p = d.predict(&[0.3; 64], &w, 17, 2e8).unwrap();
        assert!(p.eps_hat.iter().all(|&e| e == 0.0));
        assert!(p.v.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn conditioning_channel_changes_output() {
        let d = Denoiser::<f32>::init(tiny(), &mut stream(2, "init", 0)).unwrap();
        let w = window(3, 8, 8, 3);
        let x = vec![0.1; 64];
        let base = d.predict(&x, &w, 100, 1e8).unwrap();
        let mut w2 = w.clone();
        w2.channels[2 * 64 + 20] += 0.5;
        let moved = d.predict(&x, &w2, 100, 1e8).unwrap();
        let diff: f32 = base
            .eps_hat
            .iter()
            .zip(&moved.eps_hat)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 0.0);
    }

    #[test]
    fn batch_matches_single_and_is_deterministic() {
        let d = Denoiser::<f32>::init(tiny(), &mut stream(4, "init", 0)).unwrap();
        let ws: Vec<SliceWindow> = (0..3).map(|i| window(3, 8, 8, 10 + i)).collect();
        let xs: Vec<Vec<f32>> = (0..3).map(|i| vec![i as f32 * 0.2; 64]).collect();
        let items: Vec<(&[f32], &SliceWindow, usize, f64)> = (0..3)
            .map(|i| (xs[i].as_slice(), &ws[i], 10 * i + 1, 1e7 * (i + 1) as f64))
            .collect();
        let batch = d.predict_batch(&items).unwrap();
        for (i, p) in batch.iter().enumerate() {
            let single = d.predict(&xs[i], &ws[i], 10 * i + 1, 1e7 * (i + 1) as f64).unwrap();
            assert_eq!(single.eps_hat, p.eps_hat);
            assert_eq!(single.v, p.v);
        }
    }

    #[test]
    fn variance_head_stays_in_unit_interval() {
        let d = Denoiser::<f32>::init(tiny(), &mut stream(5, "init", 0)).unwrap();
        let mut w = window(3, 8, 8, 6);
        w.channels.iter_mut().for_each(|c| *c *= 1e4);
        let p = d.predict(&vec![-1e4; 64], &w, 999, 3e8).unwrap();
        assert!(p.v.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(p.eps_hat.iter().all(|e| e.is_finite()));
    }

    #[test]
    fn shape_mismatches_are_errors() {
        let d = Denoiser::<f32>::zeros(tiny()).unwrap();
        let w = window(5, 8, 8, 1);
        assert!(d.predict(&[0.0; 64], &w, 1, 1.0).is_err());
        let w = window(3, 6, 6, 1);
        assert!(d.predict(&[0.0; 36], &w, 1, 1.0).is_err());
        let w = window(3, 8, 8, 1);
        assert!(d.predict(&[0.0; 63], &w, 1, 1.0).is_err());
        assert!(Denoiser::<f32>::zeros(DenoiserConfig { window: 4, ..tiny() }).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let d = Denoiser::<f32>::init(tiny(), &mut stream(6, "init", 0)).unwrap();
        let w = window(3, 8, 8, 7);
        let p = d.predict(&[0.2; 64], &w, 50, 1e8).unwrap();
        let mut g = d.net().params().zeros_like();
        d.backward(&p, &[0.0; 64], &[0.0; 64], &mut g).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut d = Denoiser::<f32>::init(tiny(), &mut stream(8, "init", 0)).unwrap();
        d.trained_steps = 12;
        d.save(&path).unwrap();
        let back = Denoiser::load(&path).unwrap();
        assert_eq!(back.config(), d.config());
        assert_eq!(back.trained_steps, 12);
        assert_eq!(back.net().params().values(), d.net().params().values());
        assert!(sidecar_path(&path).exists());
    }
}
