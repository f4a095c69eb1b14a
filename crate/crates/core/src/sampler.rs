//! Reverse-process sampling.
//!
//! A volume is denoised slice by slice. Each slice starts from the prior
//! estimate re-noised to depth `T'` with starting latents shared by every
//! slice, then follows a step plan of deterministic DDIM jumps with a
//! stochastic DDPM step every `interleave_period` steps.

use std::sync::atomic::{AtomicUsize, Ordering};

use num_traits::Float;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::prior::{denoise_prior, PriorNet};
use crate::rng::{standard_normal_vec, stream};
use crate::schedule::NoiseSchedule;
use crate::volume::{extract_window, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    Ddim,
    Ddpm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub t: usize,
    pub t_next: usize,
    pub kind: StepKind,
}

/// Ablation switches; all off is the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Start from pure noise at `t = T` instead of the re-noised prior.
    pub no_prior: bool,
    /// Draw fresh starting latents for every slice.
    pub no_fix_eps: bool,
    /// Skip the second branch averaged at the first reverse step.
    pub single_eps: bool,
    /// Feed dose 0 to the network.
    pub no_dose: bool,
}

impl Ablation {
    pub const NAMES: [&'static str; 4] = ["no_prior", "no_fix_eps", "single_eps", "no_dose"];

    /// Sets the switch called `name`.
    pub fn enable(&mut self, name: &str) -> Result<()> {
        match name {
            "no_prior" => self.no_prior = true,
            "no_fix_eps" => self.no_fix_eps = true,
            "single_eps" => self.single_eps = true,
            "no_dose" => self.no_dose = true,
            other => {
                return Err(Error::arg(format!(
                    "unknown ablation {other:?}; expected one of {}",
                    Self::NAMES.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn only(name: &str) -> Result<Self> {
        let mut a = Self::default();
        a.enable(name)?;
        Ok(a)
    }

    /// `"proposed"` when nothing is ablated, otherwise the enabled switches
    /// joined by `+`.
    pub fn label(&self) -> String {
        let on: Vec<&str> = Self::NAMES
            .iter()
            .zip([self.no_prior, self.no_fix_eps, self.single_eps, self.no_dose])
            .filter(|(_, b)| *b)
            .map(|(n, _)| *n)
            .collect();
        if on.is_empty() {
            "proposed".into()
        } else {
            on.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    /// Depth to which the prior is re-noised.
    pub t_prime: usize,
    pub num_steps: usize,
    /// Every `interleave_period`-th step is a DDPM step.
    pub interleave_period: usize,
    /// Conditioning window; must match the denoiser.
    pub window: usize,
    pub seed: u64,
    pub ablation: Ablation,
    /// Worker threads for slice-parallel sampling (0 uses the global pool).
    pub threads: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            t_prime: 250,
            num_steps: 25,
            interleave_period: 5,
            window: 5,
            seed: 0,
            ablation: Ablation::default(),
            threads: 0,
        }
    }
}

impl SampleConfig {
    /// Timestep the reverse process starts from.
    pub fn start(&self, sched: &NoiseSchedule) -> usize {
        if self.ablation.no_prior {
            sched.len()
        } else {
            self.t_prime
        }
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.t_prime == 0 || self.t_prime > sched.len() {
            return Err(Error::arg(format!(
                "T' = {} must lie in [1, {}]",
                self.t_prime,
                sched.len()
            )));
        }
        let start = self.start(sched);
        if self.num_steps == 0 || self.num_steps > start {
            return Err(Error::arg(format!(
                "num_steps = {} must lie in [1, {start}]",
                self.num_steps
            )));
        }
        if self.interleave_period == 0 {
            return Err(Error::arg("interleave_period must be >= 1"));
        }
        if self.window.is_multiple_of(2) {
            return Err(Error::arg(format!("window must be odd, got {}", self.window)));
        }
        Ok(())
    }
}

/// Evenly spaced, strictly decreasing timesteps from the start depth to 0:
/// step `i` goes from `floor(start (N - i) / N)` to the next such value.
pub fn build_step_plan(config: &SampleConfig, sched: &NoiseSchedule) -> Result<Vec<PlanStep>> {
    config.validate(sched)?;
    let start = config.start(sched);
    let n = config.num_steps;
    let ts: Vec<usize> = (0..=n).map(|i| start * (n - i) / n).collect();
    let mut plan = Vec::with_capacity(n);
    for k in 0..n {
        let (t, t_next) = (ts[k], ts[k + 1]);
        if t_next >= t {
            return Err(Error::Plan(format!("timesteps collide at step {k}: {t} -> {t_next}")));
        }
        let kind = if (k + 1) % config.interleave_period == 0 {
            StepKind::Ddpm
        } else {
            StepKind::Ddim
        };
        plan.push(PlanStep { t, t_next, kind });
    }
    Ok(plan)
}

fn check_jump(t: usize, t_next: usize, sched: &NoiseSchedule) -> Result<()> {
    if t > sched.len() || t_next >= t {
        return Err(Error::arg(format!(
            "need 0 <= t_next < t <= {}, got t = {t}, t_next = {t_next}",
            sched.len()
        )));
    }
    Ok(())
}

fn lit<S: Float>(x: f64) -> S {
    S::from(x).unwrap()
}

/// Deterministic DDIM update from `t` to `t_next`.
pub fn ddim_step<S: Float>(x_t: &[S], eps_hat: &[S], t: usize, t_next: usize, sched: &NoiseSchedule) -> Result<Vec<S>> {
    check_jump(t, t_next, sched)?;
    if x_t.len() != eps_hat.len() {
        return Err(Error::arg("x_t and eps_hat differ in length"));
    }
    let (ab, an) = (sched.alpha_bar(t), sched.alpha_bar(t_next));
    let (s1, s0) = (lit::<S>((1.0 - ab).sqrt()), lit::<S>(ab.sqrt()));
    let (n0, n1) = (lit::<S>(an.sqrt()), lit::<S>((1.0 - an).sqrt()));
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .map(|(&x, &e)| {
            let x0 = (x - s1 * e) / s0;
            n0 * x0 + n1 * e
        })
        .collect())
}

/// Stochastic update from `t` to `t_next` with learned variance.
///
/// For a jump over several timesteps the chain is respaced: the effective
/// `beta' = 1 - ab_t / ab_next`, and the posterior variance follows from it.
/// For `t_next = t - 1` these are the schedule's own `beta_t` and
/// `beta_tilde_t`. The variance is `exp(v log beta' + (1 - v) log beta_tilde')`
/// and the noise `z` is ignored when `t_next = 0`.
#[allow(clippy::too_many_arguments)]
pub fn ddpm_jump<S: Float>(
    x_t: &[S],
    eps_hat: &[S],
    v: &[S],
    t: usize,
    t_next: usize,
    sched: &NoiseSchedule,
    z: &[S],
) -> Result<Vec<S>> {
    check_jump(t, t_next, sched)?;
    if x_t.len() != eps_hat.len() || x_t.len() != v.len() || (t_next > 0 && z.len() != x_t.len()) {
        return Err(Error::arg("x_t, eps_hat, v and z differ in length"));
    }
    let ab = sched.alpha_bar(t);
    let (beta, beta_tilde) = if t_next + 1 == t {
        (sched.beta(t), sched.beta_tilde(t))
    } else {
        let an = sched.alpha_bar(t_next);
        let b = 1.0 - ab / an;
        (b, b * (1.0 - an) / (1.0 - ab))
    };
    let c_eps = lit::<S>(beta / (1.0 - ab).sqrt());
    let inv_sqrt_alpha = lit::<S>(1.0 / (1.0 - beta).sqrt());
    let mean = x_t.iter().zip(eps_hat).map(|(&x, &e)| (x - c_eps * e) * inv_sqrt_alpha);
    if t_next == 0 {
        return Ok(mean.collect());
    }
    let (lb, lbt) = (beta.ln(), beta_tilde.ln());
    Ok(mean
        .zip(v)
        .zip(z)
        .map(|((m, &vi), &zi)| {
            let vi = vi.to_f64().unwrap();
            let sigma = (0.5 * (vi * lb + (1.0 - vi) * lbt)).exp();
            m + lit::<S>(sigma) * zi
        })
        .collect())
}

/// Single DDPM transition `t -> t - 1`.
pub fn ddpm_step<S: Float>(
    x_t: &[S],
    eps_hat: &[S],
    v: &[S],
    t: usize,
    sched: &NoiseSchedule,
    z: &[S],
) -> Result<Vec<S>> {
    if t == 0 {
        return Err(Error::arg("DDPM step needs t >= 1"));
    }
    ddpm_jump(x_t, eps_hat, v, t, t - 1, sched, z)
}

/// Output of [`sample_volume`] with evaluation counters.
#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub volume: Volume3D,
    pub network_evaluations: usize,
    /// Network calls made for the averaged second branch.
    pub branch_b_evaluations: usize,
}

/// Denoises `v_noisy` slice by slice.
///
/// Every random draw comes from a stream keyed by seed, slice and step, so
/// the result does not depend on the number of threads.
pub fn sample_volume(
    v_noisy: &Volume3D,
    prior: Option<&PriorNet>,
    denoiser: &Denoiser,
    sched: &NoiseSchedule,
    config: &SampleConfig,
) -> Result<SampleOutput> {
    let plan = build_step_plan(config, sched)?;
    if denoiser.config().window != config.window {
        return Err(Error::arg(format!(
            "sampler window {} differs from the denoiser's n = {}",
            config.window,
            denoiser.config().window
        )));
    }
    let ab = &config.ablation;
    let x_prior = if ab.no_prior {
        None
    } else {
        let prior = prior.ok_or_else(|| Error::arg("a prior network is required unless no_prior is set"))?;
        Some(denoise_prior(prior, v_noisy)?)
    };
    let [num_slices, h, w] = v_noisy.dims();
    let hw = h * w;
    let start = plan[0].t;
    let dose = if ab.no_dose { 0.0 } else { v_noisy.meta.dose_bq };
    let latent = |name: &str, s: usize| {
        let item = if ab.no_fix_eps { s as u64 + 1 } else { 0 };
        standard_normal_vec(&mut stream(config.seed, name, item), hw)
    };
    let (shared_a, shared_b) = (latent("eps_a", 0), latent("eps_b", 0));
    let network = AtomicUsize::new(0);
    let branch_b = AtomicUsize::new(0);

    let start_point = |eps: &[f32], s: usize| -> Vec<f32> {
        let (a, b) = (
            sched.alpha_bar(start).sqrt() as f32,
            (1.0 - sched.alpha_bar(start)).sqrt() as f32,
        );
        match &x_prior {
            Some(p) => p.slice_data(s).iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect(),
            None => eps.iter().map(|&e| b * e).collect(),
        }
    };

    let run_slice = |s: usize| -> Result<Vec<f32>> {
        let window = extract_window(v_noisy, s, config.window)?;
        let (eps_a, eps_b) = if ab.no_fix_eps {
            (latent("eps_a", s), latent("eps_b", s))
        } else {
            (shared_a.clone(), shared_b.clone())
        };
        let mut x_a = start_point(&eps_a, s);
        for (k, step) in plan.iter().enumerate() {
            let z = match step.kind {
                StepKind::Ddpm if step.t_next > 0 => {
                    standard_normal_vec(&mut stream(config.seed, &format!("z/{s}"), k as u64), hw)
                }
                _ => Vec::new(),
            };
            let advance = |x: &[f32]| -> Result<Vec<f32>> {
                let pred = denoiser.predict(x, &window, step.t, dose)?;
                network.fetch_add(1, Ordering::Relaxed);
                match step.kind {
                    StepKind::Ddim => ddim_step(x, &pred.eps_hat, step.t, step.t_next, sched),
                    StepKind::Ddpm => ddpm_jump(x, &pred.eps_hat, &pred.v, step.t, step.t_next, sched, &z),
                }
            };
            let next_a = advance(&x_a)?;
            x_a = if k == 0 && !ab.single_eps {
                let x_b = start_point(&eps_b, s);
                let next_b = advance(&x_b)?;
                branch_b.fetch_add(1, Ordering::Relaxed);
                next_a.iter().zip(&next_b).map(|(a, b)| 0.5 * (a + b)).collect()
            } else {
                next_a
            };
        }
        Ok(x_a)
    };

    let run_all = || {
        (0..num_slices)
            .into_par_iter()
            .map(run_slice)
            .collect::<Result<Vec<_>>>()
    };
    let slices = if config.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| Error::arg(format!("cannot build thread pool: {e}")))?
            .install(run_all)?
    } else {
        run_all()?
    };
    Ok(SampleOutput {
        volume: v_noisy.with_data(slices.concat())?,
        network_evaluations: network.into_inner(),
        branch_b_evaluations: branch_b.into_inner(),
    })
}
