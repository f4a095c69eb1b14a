//! Diffusion noise schedule and the closed-form forward / posterior terms.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// Schedule parameters as they appear in the JSON config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            schedule: ScheduleKind::Linear,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.steps, self.schedule, self.beta_start, self.beta_end)
    }
}

/// Per-timestep tables for a chain of length `T`.
///
/// All tables are indexed by the timestep itself. `alpha_bar[0] = 1`, and
/// `beta`, `alpha` and `beta_tilde` hold a zero placeholder at index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_tilde: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, kind: ScheduleKind, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::arg("schedule length T must be >= 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::arg(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} / {beta_end}"
            )));
        }
        let mut beta = vec![0.0; steps + 1];
        match kind {
            ScheduleKind::Linear => {
                for (t, b) in beta.iter_mut().enumerate().skip(1) {
                    *b = if steps == 1 {
                        beta_start
                    } else {
                        beta_start + (beta_end - beta_start) * (t - 1) as f64 / (steps - 1) as f64
                    };
                }
            }
        }
        Ok(Self::from_betas(beta))
    }

    /// Builds the derived tables from `beta[1..=T]` (index 0 ignored).
    fn from_betas(mut beta: Vec<f64>) -> Self {
        beta[0] = 0.0;
        let steps = beta.len() - 1;
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = vec![1.0; steps + 1];
        for t in 1..=steps {
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        }
        let mut beta_tilde = vec![0.0; steps + 1];
        for t in 1..=steps {
            beta_tilde[t] = beta[t] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]);
        }
        Self {
            steps,
            beta,
            alpha,
            alpha_bar,
            beta_tilde,
        }
    }

    /// A schedule with the same `beta` at every step.
    pub fn constant(steps: usize, beta: f64) -> Result<Self> {
        Self::new(steps, ScheduleKind::Linear, beta, beta)
    }

    /// Chain length `T`.
    pub fn len(&self) -> usize {
        self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.steps == 0
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.steps {
            return Err(Error::arg(format!("timestep {t} outside [{min}, {}]", self.steps)));
        }
        Ok(())
    }

    /// Variance of `q(x_{t-1} | x_t, x_0)`.
    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        self.check_t(t, 1)?;
        Ok(self.beta_tilde[t])
    }

    /// Coefficients `(c_xt, c_x0)` of the posterior mean
    /// `mu_q = c_xt * x_t + c_x0 * x_0`.
    pub fn posterior_mean_coefs(&self, t: usize) -> Result<(f64, f64)> {
        self.check_t(t, 1)?;
        let ab = self.alpha_bar[t];
        let ab_prev = self.alpha_bar[t - 1];
        let denom = 1.0 - ab;
        Ok((
            self.alpha[t].sqrt() * (1.0 - ab_prev) / denom,
            ab_prev.sqrt() * self.beta[t] / denom,
        ))
    }
}

/// Draws `x_t` directly from `x_0`: `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn q_sample<S: Float>(x0: &[S], t: usize, eps: &[S], sched: &NoiseSchedule) -> Result<Vec<S>> {
    sched.check_t(t, 0)?;
    if x0.len() != eps.len() {
        return Err(Error::arg(format!(
            "x0 has {} elements but eps has {}",
            x0.len(),
            eps.len()
        )));
    }
    let ab = sched.alpha_bar(t);
    let a = S::from(ab.sqrt()).unwrap();
    let b = S::from((1.0 - ab).sqrt()).unwrap();
    Ok(x0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect())
}

/// Mean of the tractable reverse posterior `q(x_{t-1} | x_t, x_0)`.
pub fn posterior_mean<S: Float>(x_t: &[S], x0: &[S], t: usize, sched: &NoiseSchedule) -> Result<Vec<S>> {
    if x_t.len() != x0.len() {
        return Err(Error::arg("x_t and x0 differ in length"));
    }
    let (cx, c0) = sched.posterior_mean_coefs(t)?;
    let (cx, c0) = (S::from(cx).unwrap(), S::from(c0).unwrap());
    Ok(x_t.iter().zip(x0).map(|(&a, &b)| cx * a + c0 * b).collect())
}

pub fn posterior_variance(t: usize, sched: &NoiseSchedule) -> Result<f64> {
    sched.posterior_variance(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1e-300)
    }

    #[test]
    fn constant_beta_cumulative_product() {
        let s = NoiseSchedule::constant(4, 0.1).unwrap();
        let expected = [1.0, 0.9, 0.81, 0.729, 0.6561];
        for (t, e) in expected.iter().enumerate() {
            assert!(close(s.alpha_bar(t), *e, 1e-12), "t={t}");
        }
        assert_eq!(s.beta_tilde(1), 0.0);
    }

    #[test]
    fn linear_default_reaches_near_zero() {
        let s = ScheduleConfig::default().build().unwrap();
        // Independent evaluation: sum of log(1 - beta_t) over the linear ramp.
        let log_ab: f64 = (0..1000)
            .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln())
            .sum();
        assert!(close(s.alpha_bar(1000), log_ab.exp(), 1e-9));
        assert!(s.alpha_bar(1000) < 1e-4);
        assert!(close(s.beta(1), 1e-4, 1e-12) && close(s.beta(1000), 0.02, 1e-12));
    }

    #[test]
    fn invalid_parameters() {
        assert!(NoiseSchedule::new(0, ScheduleKind::Linear, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::new(10, ScheduleKind::Linear, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::new(10, ScheduleKind::Linear, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::new(10, ScheduleKind::Linear, 1e-4, 1.0).is_err());
    }

    #[test]
    fn table_invariants() {
        let s = ScheduleConfig::default().build().unwrap();
        for t in 1..=s.len() {
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.beta_tilde(t) <= s.beta(t));
        }
        // beta_tilde grows with t on the linear ramp.
        for t in 2..s.len() {
            assert!(s.beta_tilde(t + 1) > s.beta_tilde(t));
        }
    }

    #[test]
    fn q_sample_cases() {
        let s = NoiseSchedule::constant(4, 0.1).unwrap();
        let x0 = [1.5f64, -2.0];
        assert_eq!(q_sample(&x0, 0, &[3.0, 4.0], &s).unwrap(), x0.to_vec());
        let out = q_sample(&x0, 3, &[0.0, 0.0], &s).unwrap();
        assert!(close(out[0], 0.729f64.sqrt() * 1.5, 1e-12));
        assert!(q_sample(&x0, 1, &[1.0], &s).is_err());
        assert!(q_sample(&x0, 5, &[1.0, 1.0], &s).is_err());

        // alpha_bar = 0.25 requires a schedule with a single beta = 0.75.
        let quarter = NoiseSchedule::constant(1, 0.75).unwrap();
        let out = q_sample(&[1.0f64], 1, &[2.0], &quarter).unwrap();
        assert!(close(out[0], 0.5 + 0.75f64.sqrt() * 2.0, 1e-12));
    }

    #[test]
    fn posterior_mean_cases() {
        let s = NoiseSchedule::constant(3, 0.1).unwrap();
        let x0 = [0.7f64, -1.2];
        let xt = [2.0f64, 0.3];
        let mu = posterior_mean(&xt, &x0, 1, &s).unwrap();
        assert!(close(mu[0], x0[0], 1e-12) && close(mu[1], x0[1], 1e-12));
        assert_eq!(posterior_mean(&[0.0f64], &[0.0], 2, &s).unwrap(), vec![0.0]);
        assert!(posterior_mean(&xt, &x0, 0, &s).is_err());

        // t=3: ab_2 = 0.81, ab_3 = 0.729, alpha_3 = 0.9.
        let mu = posterior_mean(&[2.0f64], &[0.7], 3, &s).unwrap()[0];
        let hand = (0.9f64.sqrt() * (1.0 - 0.81) * 2.0 + 0.81f64.sqrt() * 0.1 * 0.7) / (1.0 - 0.729);
        assert!(close(mu, hand, 1e-12));
    }

    #[test]
    fn posterior_variance_cases() {
        let s = NoiseSchedule::constant(3, 0.1).unwrap();
        assert_eq!(posterior_variance(1, &s).unwrap(), 0.0);
        assert!(close(
            posterior_variance(2, &s).unwrap(),
            0.1 * (1.0 - 0.9) / (1.0 - 0.81),
            1e-12
        ));
        assert!(posterior_variance(0, &s).is_err());
        assert!(posterior_variance(4, &s).is_err());
    }

    /// `q(x_t | x_0)` versus `t` successive single-step transitions.
    #[test]
    fn direct_sampling_matches_chained_transitions() {
        let s = NoiseSchedule::constant(3, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = 0.8f64;
        let trials = 100_000;
        let (mut direct, mut chained) = (Vec::with_capacity(trials), Vec::with_capacity(trials));
        for _ in 0..trials {
            let e: f64 = StandardNormal.sample(&mut rng);
            direct.push(q_sample(&[x0], 3, &[e], &s).unwrap()[0]);
            let mut x = x0;
            for t in 1..=3 {
                let z: f64 = StandardNormal.sample(&mut rng);
                x = (1.0 - s.beta(t)).sqrt() * x + s.beta(t).sqrt() * z;
            }
            chained.push(x);
        }
        let stats = |v: &[f64]| {
            let n = v.len() as f64;
            let m = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
            (m, var)
        };
        let (m1, v1) = stats(&direct);
        let (m2, v2) = stats(&chained);
        let n = trials as f64;
        let se_mean = ((v1 + v2) / n).sqrt();
        let se_var = (v1 * v1 + v2 * v2).sqrt() * (2.0 / (n - 1.0)).sqrt();
        assert!((m1 - m2).abs() < 3.0 * se_mean, "{m1} vs {m2}");
        assert!((v1 - v2).abs() < 3.0 * se_var, "{v1} vs {v2}");
    }
}
