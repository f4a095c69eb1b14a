//! Diffusion training with the hybrid objective: noise-prediction MSE plus a
//! weighted variational term that trains the variance interpolant `v`.
//!
//! Every step draws its minibatch, timesteps and noise from a stream keyed by
//! the global step index, so a run resumed from a checkpoint continues
//! exactly as an uninterrupted one would.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::PairedSlice;
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::metrics::masked_psnr;
use crate::nn::checkpoint::{sidecar_path, Checkpoint, NamedArray};
use crate::nn::optim::{LrSchedule, Optimizer, OptimizerConfig};
use crate::nn::Scalar;
use crate::rng::{standard_normal_vec, stream};
use crate::schedule::{q_sample, NoiseSchedule, ScheduleConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Minibatch size `N_b`.
    pub batch_size: usize,
    /// Total optimizer steps.
    pub steps: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub optimizer: OptimizerConfig,
    /// Number of conditioning slices; must match the model.
    pub window: usize,
    pub schedule: ScheduleConfig,
    pub seed: u64,
    /// When false the network always sees dose 0.
    pub dose_embedding: bool,
    /// Weight of the variance term.
    pub lambda_var: f64,
    /// Validation interval in steps (0 disables).
    pub validate_every: usize,
    /// Checkpoint interval in steps (0 writes only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            steps: 2000,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Constant,
            optimizer: OptimizerConfig::default(),
            window: 5,
            schedule: ScheduleConfig::default(),
            seed: 0,
            dose_embedding: true,
            lambda_var: 0.001,
            validate_every: 200,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::arg("batch size must be >= 1"));
        }
        if self.window.is_multiple_of(2) {
            return Err(Error::arg(format!("window must be odd, got {}", self.window)));
        }
        if !(self.lambda_var >= 0.0) {
            return Err(Error::arg("lambda_var must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossTerms {
    pub total: f64,
    pub noise: f64,
    pub var: f64,
}

impl LossTerms {
    fn add(self, o: LossTerms) -> LossTerms {
        LossTerms {
            total: self.total + o.total,
            noise: self.noise + o.noise,
            var: self.var + o.var,
        }
    }

    fn scale(self, k: f64) -> LossTerms {
        LossTerms {
            total: self.total * k,
            noise: self.noise * k,
            var: self.var * k,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.noise.is_finite() && self.var.is_finite()
    }
}

/// Hybrid loss of one slice and its gradients with respect to `eps_hat` and
/// `v`.
///
/// The variance term is the KL divergence from the true posterior
/// `q(x_{t-1} | x_t, x_0)` to the model transition, with the mean built from
/// a stop-gradient copy of `eps_hat`. At `t = 1` it is the Gaussian negative
/// log-likelihood of `x_0`. Both terms are means over pixels.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_loss<S: Scalar>(
    x0: &[S],
    x_t: &[S],
    eps: &[S],
    eps_hat: &[S],
    v: &[S],
    t: usize,
    sched: &NoiseSchedule,
    lambda: f64,
) -> Result<(LossTerms, Vec<S>, Vec<S>)> {
    let p = x0.len();
    if [x_t.len(), eps.len(), eps_hat.len(), v.len()].iter().any(|&l| l != p) || p == 0 {
        return Err(Error::arg("hybrid loss inputs differ in length"));
    }
    let (cx, c0) = sched.posterior_mean_coefs(t)?;
    let beta = sched.beta(t);
    let ab = sched.alpha_bar(t);
    let sqrt_alpha = sched.alpha(t).sqrt();
    let c_eps = beta / (1.0 - ab).sqrt();
    let bt = sched.beta_tilde(t);
    // beta_tilde_1 is 0; its log is clipped to the next step's value.
    let bt_clip = if t > 1 {
        bt
    } else if sched.len() >= 2 {
        sched.beta_tilde(2)
    } else {
        beta
    };
    let (log_beta, log_bt) = (beta.ln(), bt_clip.ln());
    let two_pi = 2.0 * std::f64::consts::PI;

    let mut noise = 0.0;
    let mut var = 0.0;
    let mut g_eps = Vec::with_capacity(p);
    let mut g_v = Vec::with_capacity(p);
    let inv_p = 1.0 / p as f64;
    for i in 0..p {
        let (x0i, xti) = (x0[i].to_f64().unwrap(), x_t[i].to_f64().unwrap());
        let (e, eh, vi) = (
            eps[i].to_f64().unwrap(),
            eps_hat[i].to_f64().unwrap(),
            v[i].to_f64().unwrap(),
        );
        noise += (e - eh).powi(2);
        g_eps.push(S::lit(2.0 * (eh - e) * inv_p));

        let mu_q = cx * xti + c0 * x0i;
        let mu_theta = (xti - c_eps * eh) / sqrt_alpha;
        let d2 = (mu_q - mu_theta).powi(2);
        let log_sigma = vi * log_beta + (1.0 - vi) * log_bt;
        let sigma = log_sigma.exp();
        let (term, d_log_sigma) = if t == 1 {
            (0.5 * ((two_pi * sigma).ln() + d2 / sigma), 0.5 * (1.0 - d2 / sigma))
        } else {
            (
                0.5 * (log_sigma - bt.ln() + (bt + d2) / sigma - 1.0),
                0.5 * (1.0 - (bt + d2) / sigma),
            )
        };
        var += term;
        g_v.push(S::lit(lambda * d_log_sigma * (log_beta - log_bt) * inv_p));
    }
    let noise = noise * inv_p;
    let var = var * inv_p;
    Ok((
        LossTerms {
            total: noise + lambda * var,
            noise,
            var,
        },
        g_eps,
        g_v,
    ))
}

/// Evaluates `f` on every item in parallel, each with its own zeroed
/// gradient buffer, and sums the buffers in item order.
pub(crate) fn accumulate_gradients<T, R, S, F>(items: &[T], num_params: usize, f: F) -> Result<(Vec<R>, Vec<S>)>
where
    T: Sync,
    R: Send,
    S: Scalar,
    F: Fn(&T, &mut [S]) -> Result<R> + Sync,
{
    let parts = items
        .par_iter()
        .map(|item| {
            let mut g = vec![S::zero(); num_params];
            let r = f(item, &mut g)?;
            Ok((r, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = vec![S::zero(); num_params];
    let mut results = Vec::with_capacity(parts.len());
    for (r, g) in parts {
        total.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b);
        results.push(r);
    }
    Ok((results, total))
}

/// One sampled training example: timestep and noise for a paired slice.
struct Draw<'a> {
    sample: &'a PairedSlice,
    t: usize,
    eps: Vec<f32>,
}

fn draw<'a, R: Rng>(sample: &'a PairedSlice, sched: &NoiseSchedule, rng: &mut R) -> Draw<'a> {
    Draw {
        sample,
        t: rng.random_range(1..=sched.len()),
        eps: standard_normal_vec(rng, sample.target.len()),
    }
}

/// Loss and gradients of one drawn example, scaled by `scale`.
fn item_loss(
    model: &Denoiser,
    d: &Draw,
    sched: &NoiseSchedule,
    config: &TrainConfig,
    scale: f32,
    grads: Option<&mut [f32]>,
) -> Result<(LossTerms, Vec<f32>)> {
    let s = d.sample;
    let w = &s.window;
    let x_t = q_sample(&s.target, d.t, &d.eps, sched)?;
    let dose = if config.dose_embedding { s.dose_bq } else { 0.0 };
    let pred = model.forward(&x_t, &w.channels, w.rows, w.cols, d.t, dose)?;
    let (terms, mut ge, mut gv) = hybrid_loss(
        &s.target,
        &x_t,
        &d.eps,
        &pred.eps_hat,
        &pred.v,
        d.t,
        sched,
        config.lambda_var,
    )?;
    if let Some(grads) = grads {
        ge.iter_mut().chain(gv.iter_mut()).for_each(|g| *g *= scale);
        model.backward(&pred, &ge, &gv, grads)?;
    }
    let ab = sched.alpha_bar(d.t);
    let x0_hat = x_t
        .iter()
        .zip(&pred.eps_hat)
        .map(|(&x, &e)| ((x as f64 - (1.0 - ab).sqrt() * e as f64) / ab.sqrt()) as f32)
        .collect();
    Ok((terms, x0_hat))
}

/// Applies one optimizer step on `batch` and returns the batch-mean losses.
///
/// Timesteps `t ~ U{1..T}` and noise are drawn per item from `rng` before
/// any compute, in batch order.
#[allow(clippy::too_many_arguments)]
pub fn training_step<R: Rng>(
    model: &mut Denoiser,
    optimizer: &mut Optimizer<f32>,
    batch: &[&PairedSlice],
    sched: &NoiseSchedule,
    config: &TrainConfig,
    rng: &mut R,
    lr: f64,
    step: usize,
) -> Result<LossTerms> {
    if batch.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    let draws: Vec<Draw> = batch.iter().map(|s| draw(s, sched, rng)).collect();
    let scale = 1.0 / batch.len() as f32;
    let net = &*model;
    let (terms, grads) = accumulate_gradients(&draws, net.net().num_params(), |d, g| {
        Ok(item_loss(net, d, sched, config, scale, Some(g))?.0)
    })?;
    let mean = terms
        .into_iter()
        .fold(LossTerms::default(), LossTerms::add)
        .scale(1.0 / batch.len() as f64);
    if !mean.is_finite() {
        return Err(Error::Training {
            step,
            detail: format!(
                "non-finite loss (noise {}, variance {}) at learning rate {lr}",
                mean.noise, mean.var
            ),
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Training {
            step,
            detail: format!("non-finite gradient at parameter {i}"),
        });
    }
    let backup = (model.net().params().values().to_vec(), optimizer.clone());
    optimizer.step(model.net_mut().params_mut().values_mut(), &grads, lr)?;
    if model.net().params().values().iter().any(|p| !p.is_finite()) {
        model.net_mut().params_mut().values_mut().copy_from_slice(&backup.0);
        *optimizer = backup.1;
        return Err(Error::Training {
            step,
            detail: format!("update at learning rate {lr} produced non-finite parameters"),
        });
    }
    model.trained_steps += 1;
    Ok(mean)
}

/// Mean hybrid loss and one-shot `x0` PSNR over `samples`, with timesteps
/// and noise drawn from fixed per-sample streams.
pub fn evaluate(
    model: &Denoiser,
    samples: &[PairedSlice],
    sched: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<(LossTerms, f64)> {
    if samples.is_empty() {
        return Err(Error::arg("empty validation set"));
    }
    let out = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let d = draw(s, sched, &mut stream(config.seed, "validation", i as u64));
            item_loss(model, &d, sched, config, 1.0, None)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut terms = LossTerms::default();
    let (mut x, mut r) = (Vec::new(), Vec::new());
    for ((t, x0_hat), s) in out.into_iter().zip(samples) {
        terms = terms.add(t);
        x.extend(x0_hat);
        r.extend_from_slice(&s.target);
    }
    let psnr = masked_psnr(&x, &r).unwrap_or(f64::NAN);
    Ok((terms.scale(1.0 / samples.len() as f64), psnr))
}

/// Model and optimizer state; everything needed to resume a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Denoiser,
    pub optimizer: Optimizer<f32>,
}

pub const MODEL_FILE: &str = "denoiser.ckpt";
pub const OPTIMIZER_FILE: &str = "optimizer.ckpt";
pub const LOG_FILE: &str = "train_log.csv";

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    config: OptimizerConfig,
    steps: u64,
}

impl TrainState {
    pub fn new(model: DenoiserConfig, config: &TrainConfig) -> Result<Self> {
        let model = Denoiser::init(model, &mut stream(config.seed, "denoiser-init", 0))?;
        let optimizer = Optimizer::new(config.optimizer, model.net().num_params());
        Ok(Self { model, optimizer })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.model.save(dir.join(MODEL_FILE))?;
        let arr = |name: &str, data: &[f32]| NamedArray {
            name: name.into(),
            shape: vec![data.len()],
            data: data.to_vec(),
        };
        let ck = Checkpoint {
            kind: "optimizer".into(),
            arrays: vec![
                arr("first", &self.optimizer.first),
                arr("second", &self.optimizer.second),
            ],
        };
        let path = dir.join(OPTIMIZER_FILE);
        ck.save(&path)?;
        let meta = OptimizerMeta {
            config: self.optimizer.config,
            steps: self.optimizer.steps,
        };
        let side = sidecar_path(&path);
        fs::write(&side, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&side, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let model = Denoiser::load(dir.join(MODEL_FILE))?;
        let path = dir.join(OPTIMIZER_FILE);
        let side = sidecar_path(&path);
        let meta: OptimizerMeta = serde_json::from_slice(&fs::read(&side).map_err(|e| Error::io(&side, e))?)?;
        let ck = Checkpoint::load(&path)?;
        let get = |name: &str| {
            ck.get(name)
                .map(|a| a.data.clone())
                .ok_or_else(|| Error::Format(format!("optimizer state is missing {name}")))
        };
        let optimizer = Optimizer {
            config: meta.config,
            steps: meta.steps,
            first: get("first")?,
            second: get("second")?,
        };
        if optimizer.first.len() != model.net().num_params() {
            return Err(Error::Format("optimizer state does not match the model".into()));
        }
        Ok(Self { model, optimizer })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub noise_loss: f64,
    pub var_loss: f64,
    pub lr: f64,
    pub val_loss: Option<f64>,
    pub val_psnr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LogRow>,
}

/// Runs training from `state` until `config.steps` optimizer steps have been
/// applied in total.
///
/// With `out_dir`, the log is appended to `train_log.csv` and the state is
/// checkpointed periodically and at the end. If the loss turns non-finite the
/// last good state is written before the error is returned.
pub fn train(
    data: &[PairedSlice],
    val: &[PairedSlice],
    mut state: TrainState,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    if state.model.config().window != config.window {
        return Err(Error::arg(format!(
            "model window {} differs from training window {}",
            state.model.config().window,
            config.window
        )));
    }
    if let Some(s) = data.iter().find(|s| s.window.width != config.window) {
        return Err(Error::arg(format!(
            "sample window width {} differs from n = {}",
            s.window.width, config.window
        )));
    }
    let sched = config.schedule.build()?;
    let mut writer = match out_dir {
        Some(dir) => Some(open_log(dir, state.model.trained_steps > 0)?),
        None => None,
    };
    let mut log = Vec::new();
    while (state.model.trained_steps as usize) < config.steps {
        let step = state.model.trained_steps as usize;
        let mut rng = stream(config.seed, "train-step", step as u64);
        let batch: Vec<&PairedSlice> = (0..config.batch_size)
            .map(|_| &data[rng.random_range(0..data.len())])
            .collect();
        let lr = config.lr_schedule.rate(config.learning_rate, step, config.steps);
        let terms = match training_step(
            &mut state.model,
            &mut state.optimizer,
            &batch,
            &sched,
            config,
            &mut rng,
            lr,
            step,
        ) {
            Ok(t) => t,
            Err(e) => {
                if let Some(dir) = out_dir {
                    state.save(dir)?;
                }
                return Err(e);
            }
        };
        let done = step + 1;
        let (val_loss, val_psnr) = if !val.is_empty()
            && config.validate_every > 0
            && (done.is_multiple_of(config.validate_every) || done == config.steps)
        {
            let (t, p) = evaluate(&state.model, val, &sched, config)?;
            log::info!(
                "step {done}: loss {:.5} val loss {:.5} val psnr {p:.2}",
                terms.total,
                t.total
            );
            (Some(t.total), Some(p))
        } else {
            (None, None)
        };
        let row = LogRow {
            step: done,
            loss: terms.total,
            noise_loss: terms.noise,
            var_loss: terms.var,
            lr,
            val_loss,
            val_psnr,
        };
        if let Some(w) = writer.as_mut() {
            w.serialize(&row)?;
            w.flush().map_err(|e| Error::io(log_path(out_dir.unwrap()), e))?;
        }
        log.push(row);
        if let Some(dir) = out_dir {
            if config.checkpoint_every > 0 && done.is_multiple_of(config.checkpoint_every) {
                state.save(dir)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        state.save(dir)?;
    }
    Ok(TrainOutcome { state, log })
}

fn log_path(dir: &Path) -> PathBuf {
    dir.join(LOG_FILE)
}

fn open_log(dir: &Path, append: bool) -> Result<csv::Writer<fs::File>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = log_path(dir);
    let append = append && path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(!append).from_writer(file))
}
