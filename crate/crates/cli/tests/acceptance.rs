//! Acceptance suite: prints one PASS/FAIL line per criterion and fails if any
//! criterion fails.
//!
//! Criteria 4-9 and 11 share one desk-scale pipeline run driven through the
//! CLI entry point.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use dosediff::denoiser::{Denoiser, DenoiserConfig};
use dosediff::metrics::{nrmse, psnr, ssim};
use dosediff::nn::{DoseEncoding, EmbeddingMode};
use dosediff::phantom::{Manifest, Split};
use dosediff::rng::stream;
use dosediff::sampler::{build_step_plan, ddim_step, ddpm_step, SampleConfig, StepKind};
use dosediff::schedule::{q_sample, NoiseSchedule};
use dosediff::{StudyMeta, Volume3D};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;

const SEED: u64 = 2024;
const LOW_FRACTIONS: [f64; 3] = [0.01, 0.02, 0.05];

struct Verdict {
    id: u32,
    title: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

/// Writes straight to stderr so the lines show up even when libtest
/// captures output.
fn announce(v: &Verdict) {
    let line = format!(
        "criterion {:>2} {:<28} {}  ({:.1}s) {}\n",
        v.id,
        v.title,
        if v.pass { "PASS" } else { "FAIL" },
        v.elapsed.as_secs_f64(),
        v.detail
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn check(id: u32, title: &'static str, f: impl FnOnce() -> (bool, String)) -> Verdict {
    timed(id, title, None, f)
}

/// Like `check`, but the criterion also fails past `limit`.
fn timed(id: u32, title: &'static str, limit: Option<Duration>, f: impl FnOnce() -> (bool, String)) -> Verdict {
    let start = Instant::now();
    let (mut pass, mut detail) = f();
    let elapsed = start.elapsed();
    if let Some(limit) = limit {
        if elapsed > limit {
            pass = false;
            detail.push_str(&format!(" [over the {}s limit]", limit.as_secs()));
        }
    }
    let v = Verdict {
        id,
        title,
        pass,
        detail,
        elapsed,
    };
    announce(&v);
    v
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn default_sched() -> NoiseSchedule {
    NoiseSchedule::new(1000, Default::default(), 1e-4, 0.02).unwrap()
}

fn criterion_1() -> (bool, String) {
    let sched = default_sched();
    let n = 100_000;
    let x0 = 0.8f64;
    let mut ok = sched.beta_tilde(1) == 0.0;
    let mut detail = format!("beta_tilde_1 = {:e};", sched.beta_tilde(1));
    for t in [1, 500, 1000] {
        let mut rng = stream(SEED, "acceptance/q-sample", t as u64);
        let eps: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let xs = q_sample(&vec![x0; n], t, &eps, &sched).unwrap();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let ab = sched.alpha_bar(t);
        let (m, v) = (ab.sqrt() * x0, 1.0 - ab);
        let se_m = (v / n as f64).sqrt();
        let se_v = v * (2.0 / (n as f64 - 1.0)).sqrt();
        let zm = (mean - m).abs() / se_m;
        let zv = (var - v).abs() / se_v;
        ok &= zm < 3.0 && zv < 3.0;
        let _ = write!(detail, " t={t}: mean {zm:.2} SE, var {zv:.2} SE;");
    }
    (ok, detail)
}

fn gradient_check(embedding: EmbeddingMode) -> (usize, f64) {
    let cfg = DenoiserConfig {
        window: 3,
        base_width: 4,
        embed_dim: 8,
        dose_encoding: DoseEncoding::Log10,
        embedding,
    };
    let mut rng = stream(SEED, "acceptance/grad", 0);
    let mut model = Denoiser::<f64>::init(cfg, &mut rng).unwrap();
    let p = model.net().num_params();
    let (rows, cols) = (8, 8);
    let hw = rows * cols;
    let x_t: Vec<f64> = (0..hw).map(|_| normal(&mut rng)).collect();
    let cond: Vec<f64> = (0..3 * hw).map(|_| rng.random::<f64>()).collect();
    let g_eps: Vec<f64> = (0..hw).map(|_| normal(&mut rng)).collect();
    let g_v: Vec<f64> = (0..hw).map(|_| normal(&mut rng)).collect();
    let (t, dose) = (417, 2.3e8);
    let objective = |m: &Denoiser<f64>| {
        let pred = m.forward(&x_t, &cond, rows, cols, t, dose).unwrap();
        pred.eps_hat.iter().zip(&g_eps).map(|(a, b)| a * b).sum::<f64>()
            + pred.v.iter().zip(&g_v).map(|(a, b)| a * b).sum::<f64>()
    };
    let pred = model.forward(&x_t, &cond, rows, cols, t, dose).unwrap();
    let mut grads = vec![0.0; p];
    model.backward(&pred, &g_eps, &g_v, &mut grads).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..128 {
        let i = rng.random_range(0..p);
        let orig = model.net().params().values()[i];
        model.net_mut().params_mut().values_mut()[i] = orig + h;
        let up = objective(&model);
        model.net_mut().params_mut().values_mut()[i] = orig - h;
        let down = objective(&model);
        model.net_mut().params_mut().values_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let scale = grads[i].abs().max(fd.abs());
        let rel = if scale == 0.0 {
            0.0
        } else {
            (grads[i] - fd).abs() / scale
        };
        worst = worst.max(rel);
    }
    (p, worst)
}

fn criterion_2() -> (bool, String) {
    let mut ok = true;
    let mut detail = String::new();
    for mode in [EmbeddingMode::Add, EmbeddingMode::ScaleShift] {
        let (p, worst) = gradient_check(mode);
        ok &= p <= 10_000 && worst < 1e-4;
        let _ = write!(
            detail,
            " {mode:?}: {p} params, 128 coordinates, max relative error {worst:.2e};"
        );
    }
    (ok, detail.trim().to_string())
}

fn criterion_3() -> (bool, String) {
    // x0 ~ N(m, s2) on a 3-step chain; with the optimal noise predictor each
    // reverse step is affine plus Gaussian noise.
    let sched = NoiseSchedule::new(3, Default::default(), 0.1, 0.3).unwrap();
    let (m, s2) = (-0.7f64, 0.5f64);
    let eps_opt = |x: f64, t: usize| {
        let ab = sched.alpha_bar(t);
        (1.0 - ab).sqrt() * (x - ab.sqrt() * m) / (ab * s2 + 1.0 - ab)
    };
    let ab3 = sched.alpha_bar(3);
    let (mut mean, mut var) = (ab3.sqrt() * m, ab3 * s2 + 1.0 - ab3);
    for t in (1..=3).rev() {
        let ab = sched.alpha_bar(t);
        let k = (1.0 - ab).sqrt() / (ab * s2 + 1.0 - ab);
        let c = sched.beta(t) / (1.0 - ab).sqrt();
        let inv = 1.0 / sched.alpha(t).sqrt();
        let slope = inv * (1.0 - c * k);
        mean = slope * mean + inv * c * k * ab.sqrt() * m;
        var = slope * slope * var + if t > 1 { sched.beta_tilde(t) } else { 0.0 };
    }
    let runs = 100_000;
    let mut rng = stream(SEED, "acceptance/chain", 0);
    let mut out = Vec::with_capacity(runs);
    for _ in 0..runs {
        let x0 = m + s2.sqrt() * normal(&mut rng);
        let mut x = q_sample(&[x0], 3, &[normal(&mut rng)], &sched).unwrap();
        for t in (1..=3).rev() {
            let z = [normal(&mut rng)];
            x = ddpm_step(&x, &[eps_opt(x[0], t)], &[0.0], t, &sched, &z).unwrap();
        }
        out.push(x[0]);
    }
    let n = runs as f64;
    let mc_mean = out.iter().sum::<f64>() / n;
    let mc_var = out.iter().map(|x| (x - mc_mean).powi(2)).sum::<f64>() / (n - 1.0);
    let zm = (mc_mean - mean).abs() / (var / n).sqrt();
    let zv = (mc_var - var).abs() / (var * (2.0 / (n - 1.0)).sqrt());

    let big = default_sched();
    let mut worst = 0.0f64;
    for t in [1, 10, 100, 250, 500, 750, 1000] {
        let x0: Vec<f64> = (0..256)
            .map(|_| {
                let mag = rng.random_range(0.1..5.0);
                if rng.random::<bool>() {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        let eps: Vec<f64> = (0..256).map(|_| normal(&mut rng)).collect();
        let x_t = q_sample(&x0, t, &eps, &big).unwrap();
        let back = ddim_step(&x_t, &eps, t, 0, &big).unwrap();
        for (a, b) in back.iter().zip(&x0) {
            worst = worst.max((a - b).abs() / b.abs());
        }
    }
    (
        zm < 3.0 && zv < 3.0 && worst <= 1e-5,
        format!("chain mean {zm:.2} SE, var {zv:.2} SE; DDIM identity max relative error {worst:.1e}"),
    )
}

fn criterion_10() -> (bool, String) {
    let sched = default_sched();
    let plan = build_step_plan(&SampleConfig::default(), &sched).unwrap();
    let ddpm = plan.iter().filter(|s| s.kind == StepKind::Ddpm).count();
    let mut ok = plan.len() == 25 && ddpm == 5;
    let mut runner = TestRunner::new(PropConfig {
        cases: 512,
        ..PropConfig::default()
    });
    let strategy = (1usize..=1000, 1usize..=1000, 1usize..=12, any::<bool>());
    let prop = runner.run(&strategy, |(t_prime, steps, period, no_prior)| {
        let mut cfg = SampleConfig {
            t_prime,
            interleave_period: period,
            ..SampleConfig::default()
        };
        cfg.ablation.no_prior = no_prior;
        let start = if no_prior { 1000 } else { t_prime };
        cfg.num_steps = 1 + steps % start;
        let plan = build_step_plan(&cfg, &sched).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(plan.len(), cfg.num_steps);
        prop_assert_eq!(plan[0].t, start);
        prop_assert_eq!(plan.last().unwrap().t_next, 0);
        for w in plan.windows(2) {
            prop_assert_eq!(w[0].t_next, w[1].t);
        }
        prop_assert!(plan.iter().all(|s| s.t > s.t_next));
        Ok(())
    });
    ok &= prop.is_ok();
    (
        ok,
        format!(
            "default plan {} steps, {ddpm} DDPM; 512 random plans: {}",
            plan.len(),
            match prop {
                Ok(()) => "monotone, end at 0".to_string(),
                Err(e) => e.to_string(),
            }
        ),
    )
}

fn vol(dims: [usize; 3], data: Vec<f32>) -> Volume3D {
    Volume3D::new(dims, [1.0; 3], data, StudyMeta::new("v", 1e8, 1.0).unwrap()).unwrap()
}

struct Direct {
    psnr: f64,
    nrmse: f64,
    ssim: f64,
}

/// Straight loops over the definitions, no shared code with the library.
fn direct_metrics(x: &[f32], r: &[f32], d: usize) -> Direct {
    let idx = |z: usize, y: usize, xx: usize| (z * d + y) * d + xx;
    let masked: Vec<usize> = (0..r.len()).filter(|&i| r[i] != 0.0).collect();
    let n = masked.len() as f64;
    let mse = masked.iter().map(|&i| (x[i] as f64 - r[i] as f64).powi(2)).sum::<f64>() / n;
    let peak = masked.iter().map(|&i| r[i] as f64).fold(f64::MIN, f64::max);
    let low = masked.iter().map(|&i| r[i] as f64).fold(f64::MAX, f64::min);
    let rms = (masked.iter().map(|&i| (r[i] as f64).powi(2)).sum::<f64>() / n).sqrt();
    let range = peak - low;
    let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
    let mut total = 0.0;
    for z in 0..d {
        for y in 0..d {
            for xx in 0..d {
                if r[idx(z, y, xx)] == 0.0 {
                    continue;
                }
                let mut vals = Vec::new();
                for zz in z.saturating_sub(3)..(z + 4).min(d) {
                    for yy in y.saturating_sub(3)..(y + 4).min(d) {
                        for xw in xx.saturating_sub(3)..(xx + 4).min(d) {
                            let i = idx(zz, yy, xw);
                            if r[i] != 0.0 {
                                vals.push((x[i] as f64, r[i] as f64));
                            }
                        }
                    }
                }
                let k = vals.len() as f64;
                let mx = vals.iter().map(|v| v.0).sum::<f64>() / k;
                let my = vals.iter().map(|v| v.1).sum::<f64>() / k;
                let vx = vals.iter().map(|v| (v.0 - mx).powi(2)).sum::<f64>() / k;
                let vy = vals.iter().map(|v| (v.1 - my).powi(2)).sum::<f64>() / k;
                let cxy = vals.iter().map(|v| (v.0 - mx) * (v.1 - my)).sum::<f64>() / k;
                total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    Direct {
        psnr: 10.0 * (peak * peak / mse).log10(),
        nrmse: mse.sqrt() / rms,
        ssim: total / n,
    }
}

fn criterion_12() -> (bool, String) {
    let d = 8;
    let dims = [d; 3];
    let mut rng = stream(SEED, "acceptance/metrics", 0);
    let mut worst = 0.0f64;
    let mut exact = true;
    for _ in 0..20 {
        let r: Vec<f32> = (0..d * d * d)
            .map(|_| {
                if rng.random::<f64>() < 0.3 {
                    0.0
                } else {
                    rng.random_range(0.1f32..4.0)
                }
            })
            .collect();
        let x: Vec<f32> = r.iter().map(|&v| v + 0.4 * normal(&mut rng) as f32).collect();
        let (xv, rv) = (vol(dims, x.clone()), vol(dims, r.clone()));
        let want = direct_metrics(&x, &r, d);
        let got = [
            psnr(&xv, &rv).unwrap(),
            nrmse(&xv, &rv).unwrap(),
            ssim(&xv, &rv).unwrap(),
        ];
        for (g, w) in got.iter().zip([want.psnr, want.nrmse, want.ssim]) {
            worst = worst.max((g - w).abs() / w.abs());
        }
        // Values outside the reference support must not matter at all.
        let scrambled: Vec<f32> = x
            .iter()
            .zip(&r)
            .map(|(&a, &b)| if b == 0.0 { rng.random_range(-50.0f32..50.0) } else { a })
            .collect();
        let sv = vol(dims, scrambled);
        exact &= psnr(&sv, &rv).unwrap().to_bits() == got[0].to_bits()
            && nrmse(&sv, &rv).unwrap().to_bits() == got[1].to_bits()
            && ssim(&sv, &rv).unwrap().to_bits() == got[2].to_bits();
    }
    (
        worst <= 1e-6 && exact,
        format!("20 random 8^3 pairs: max relative deviation {worst:.1e}; masked-out changes exact: {exact}"),
    )
}

// ---------------------------------------------------------------------------
// Desk-scale pipeline

const DESK_CONFIG: &str = r#"{
  "data": {"num_phantoms": 20, "dims": [16, 32, 32], "split": [0.4, 0.1, 0.5]},
  "model": {"window": 5, "base_width": 16, "embed_dim": 32, "embedding": "scale_shift"},
  "prior": {"window": 5, "base_width": 16, "embed_dim": 32},
  "prior_train": {"steps": 3000, "batch_size": 8, "learning_rate": 1e-3,
                  "optimizer": {"kind": "adam", "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
                  "lr_schedule": {"kind": "cosine", "final_fraction": 0.1}},
  "train": {"steps": 6000, "batch_size": 8, "learning_rate": 1e-3,
            "optimizer": {"kind": "adam", "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
            "lr_schedule": {"kind": "cosine", "final_fraction": 0.1},
            "validate_every": 1000, "checkpoint_every": 1000}
}"#;

fn cli(args: &[&str]) -> i32 {
    let mut argv = vec!["dosediff".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    dosediff_cli::run(argv)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[derive(Debug, Deserialize)]
struct StudyRow {
    method: String,
    study: String,
    fraction: f64,
    psnr: f64,
    z_consistency: f64,
    activity_rel_error: f64,
}

#[derive(Debug, Deserialize)]
struct TableRow {
    method: String,
    fraction: f64,
    nrmse: f64,
}

struct Pipeline {
    root: PathBuf,
    steps: Vec<(String, i32)>,
    elapsed: Duration,
    studies: Vec<StudyRow>,
    table: Vec<TableRow>,
}

impl Pipeline {
    fn ok(&self) -> bool {
        self.steps.iter().all(|(_, c)| *c == 0) && !self.studies.is_empty()
    }

    fn rows(&self, method: &str, fraction: f64) -> Vec<&StudyRow> {
        self.studies
            .iter()
            .filter(|r| r.method == method && (r.fraction - fraction).abs() < 1e-9)
            .collect()
    }

    fn mean(&self, method: &str, fraction: f64, f: impl Fn(&StudyRow) -> f64) -> f64 {
        let rows = self.rows(method, fraction);
        rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64
    }
}

fn run_pipeline(root: &Path) -> Pipeline {
    let cfg = root.join("config.json");
    fs::write(&cfg, DESK_CONFIG).unwrap();
    let seed = SEED.to_string();
    let (data, prior, run) = (root.join("data"), root.join("prior"), root.join("run"));
    let (den, eval, abl) = (root.join("denoised"), root.join("eval"), root.join("ablation"));
    let common = ["--config", p(&cfg), "--seed", &seed];
    let with = |rest: &[&str]| -> Vec<String> { common.iter().chain(rest).map(|s| s.to_string()).collect() };
    let stages: Vec<(&str, Vec<String>)> = vec![
        ("gen-data", with(&["gen-data", "--out", p(&data)])),
        (
            "train-prior",
            with(&["train-prior", "--data", p(&data), "--out", p(&prior)]),
        ),
        ("train", with(&["train", "--data", p(&data), "--out", p(&run)])),
        (
            "denoise",
            with(&[
                "denoise",
                "--checkpoint",
                p(&run),
                "--prior-checkpoint",
                p(&prior),
                "--data",
                p(&data),
                "--fractions",
                "0.05",
                "--out",
                p(&den),
            ]),
        ),
        (
            "eval",
            with(&[
                "eval",
                "--data",
                p(&data),
                "--method",
                &format!("proposed={}", p(&den)),
                "--fractions",
                "0.05",
                "--out",
                p(&eval.join("summary.csv")),
                "--panels",
                p(&eval.join("panels")),
            ]),
        ),
        (
            "ablate",
            with(&[
                "ablate",
                "--checkpoint",
                p(&run),
                "--prior-checkpoint",
                p(&prior),
                "--data",
                p(&data),
                "--out",
                p(&abl),
            ]),
        ),
    ];
    let start = Instant::now();
    let mut steps = Vec::new();
    for (name, args) in stages {
        let t = Instant::now();
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let code = cli(&refs);
        let _ = std::io::stderr()
            .write_all(format!("  {name}: exit {code} in {:.0}s\n", t.elapsed().as_secs_f64()).as_bytes());
        steps.push((name.to_string(), code));
        if code != 0 {
            break;
        }
    }
    let elapsed = start.elapsed();
    let read = |path: PathBuf| -> Option<csv::Reader<fs::File>> { csv::Reader::from_path(path).ok() };
    let studies = read(abl.join("ablation_studies.csv"))
        .map(|mut r| {
            r.deserialize()
                .collect::<Result<Vec<StudyRow>, _>>()
                .unwrap_or_default()
        })
        .unwrap_or_default();
    let table = read(abl.join("ablation.csv"))
        .map(|mut r| {
            r.deserialize()
                .collect::<Result<Vec<TableRow>, _>>()
                .unwrap_or_default()
        })
        .unwrap_or_default();
    Pipeline {
        root: root.to_path_buf(),
        steps,
        elapsed,
        studies,
        table,
    }
}

fn criterion_4(pl: &Pipeline) -> (bool, String) {
    let data = pl.root.join("data");
    let manifest = Manifest::load(&data).unwrap();
    let inputs: Vec<PathBuf> = manifest
        .studies_in(Split::Test)
        .take(2)
        .map(|s| data.join(&s.low.iter().find(|l| (l.fraction - 0.05).abs() < 1e-9).unwrap().path))
        .collect();
    let (run, prior) = (pl.root.join("run"), pl.root.join("prior"));
    let mut digests: Vec<(String, Vec<Vec<u8>>)> = Vec::new();
    for (label, threads) in [("t1", "1"), ("t1-again", "1"), ("t2", "2"), ("t8", "8")] {
        let out = pl.root.join(format!("det-{label}"));
        let mut args = vec![
            "--seed",
            "7",
            "--threads",
            threads,
            "denoise",
            "--checkpoint",
            p(&run),
            "--prior-checkpoint",
            p(&prior),
            "--out",
            p(&out),
        ];
        for i in &inputs {
            args.extend(["--input", p(i)]);
        }
        if cli(&args) != 0 {
            return (false, format!("denoise with {threads} threads failed"));
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&out)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|e| e == "vol"))
            .collect();
        files.sort();
        digests.push((label.to_string(), files.iter().map(|f| fs::read(f).unwrap()).collect()));
    }
    let reference = &digests[0].1;
    let same = digests.iter().all(|(_, d)| d == reference) && reference.len() == inputs.len();
    (
        same,
        format!(
            "{} volumes, runs {}: byte-identical {same}",
            reference.len(),
            digests.iter().map(|d| d.0.as_str()).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn criterion_5(pl: &Pipeline) -> (bool, String) {
    let fixed: BTreeMap<&str, f64> = pl
        .rows("proposed", 0.05)
        .iter()
        .map(|r| (r.study.as_str(), r.z_consistency))
        .collect();
    let free: BTreeMap<&str, f64> = pl
        .rows("no_fix_eps", 0.05)
        .iter()
        .map(|r| (r.study.as_str(), r.z_consistency))
        .collect();
    let total = fixed.len();
    let wins = fixed
        .iter()
        .filter(|(s, z)| free.get(*s).is_some_and(|f| *z < f))
        .count();
    (
        total >= 10 && free.len() == total && wins * 10 >= total * 9,
        format!(
            "5%: proposed smoother on {wins}/{total} volumes (mean z {:.4} vs {:.4})",
            pl.mean("proposed", 0.05, |r| r.z_consistency),
            pl.mean("no_fix_eps", 0.05, |r| r.z_consistency)
        ),
    )
}

fn criterion_6(pl: &Pipeline) -> (bool, String) {
    let avg =
        |m: &str, f: &dyn Fn(&StudyRow) -> f64| LOW_FRACTIONS.iter().map(|&fr| pl.mean(m, fr, f)).sum::<f64>() / 3.0;
    let (pp, pn) = (avg("proposed", &|r| r.psnr), avg("no_prior", &|r| r.psnr));
    let (ap, an) = (
        avg("proposed", &|r| r.activity_rel_error),
        avg("no_prior", &|r| r.activity_rel_error),
    );
    (
        pp - pn >= 3.0 && ap < an,
        format!(
            "1-5%: PSNR {pp:.2} vs no_prior {pn:.2} dB (gap {:.2}); activity error {ap:.4} vs {an:.4}",
            pp - pn
        ),
    )
}

fn criterion_7(pl: &Pipeline) -> (bool, String) {
    let mut ok = true;
    let mut strict_low = false;
    let mut detail = String::new();
    for fr in [0.01, 0.05, 0.25, 0.50] {
        let (a, b) = (pl.mean("proposed", fr, |r| r.psnr), pl.mean("no_dose", fr, |r| r.psnr));
        ok &= a >= b;
        if fr <= 0.05 && a > b {
            strict_low = true;
        }
        let _ = write!(detail, " {:.0}%: {a:.2} vs {b:.2};", fr * 100.0);
    }
    (ok && strict_low, format!("proposed vs no_dose PSNR{detail}"))
}

fn criterion_8(pl: &Pipeline) -> (bool, String) {
    let (a, b) = (pl.mean("proposed", 0.5, |r| r.psnr), pl.mean("prior", 0.5, |r| r.psnr));
    let input = pl.mean("input", 0.5, |r| r.psnr);
    (
        a >= b,
        format!("50%: proposed {a:.2} dB, prior {b:.2} dB, input {input:.2} dB"),
    )
}

fn criterion_9(pl: &Pipeline) -> (bool, String) {
    let mut rows: Vec<&TableRow> = pl.table.iter().filter(|r| r.method == "input").collect();
    rows.sort_by(|a, b| a.fraction.total_cmp(&b.fraction));
    let values: Vec<f64> = rows.iter().map(|r| r.nrmse).collect();
    let decreasing = values.windows(2).all(|w| w[1] < w[0]);
    (
        rows.len() == 6 && decreasing,
        format!(
            "input NRMSE by fraction: {}",
            rows.iter()
                .map(|r| format!("{:.0}%={:.4}", r.fraction * 100.0, r.nrmse))
                .collect::<Vec<_>>()
                .join(" ")
        ),
    )
}

fn criterion_11(pl: &Pipeline) -> (bool, String) {
    let methods: Vec<&str> = {
        let mut m: Vec<&str> = pl.table.iter().map(|r| r.method.as_str()).collect();
        m.dedup();
        m
    };
    let expected = [
        "input",
        "prior",
        "proposed",
        "no_prior",
        "no_fix_eps",
        "single_eps",
        "no_dose",
    ];
    let complete = expected.iter().all(|e| methods.contains(e)) && pl.table.len() == expected.len() * 6;
    let panels = pl.root.join("eval").join("panels");
    let has_panels = fs::read_dir(&panels).map(|d| d.count() > 0).unwrap_or(false);
    (
        pl.ok() && complete && has_panels && pl.elapsed < Duration::from_secs(4 * 3600),
        format!(
            "stages {}; {} ablation rows over {}; {:.1} min",
            pl.steps
                .iter()
                .map(|(n, c)| format!("{n}={c}"))
                .collect::<Vec<_>>()
                .join(" "),
            pl.table.len(),
            methods.join("/"),
            pl.elapsed.as_secs_f64() / 60.0
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let mut verdicts = vec![
        timed(
            1,
            "schedule/forward exactness",
            Some(Duration::from_secs(10)),
            criterion_1,
        ),
        timed(2, "gradient correctness", Some(Duration::from_secs(60)), criterion_2),
        timed(3, "sampler oracle", Some(Duration::from_secs(120)), criterion_3),
        check(10, "step-plan conformance", criterion_10),
        check(12, "metric oracles", criterion_12),
    ];
    let dir = tempfile::tempdir().unwrap();
    let pipeline = run_pipeline(dir.path());
    let gated = |id, title, f: fn(&Pipeline) -> (bool, String)| {
        check(id, title, || {
            if pipeline.ok() {
                f(&pipeline)
            } else {
                (false, "pipeline did not complete".into())
            }
        })
    };
    verdicts.push(check(11, "end-to-end desk run", || criterion_11(&pipeline)));
    verdicts.push(gated(4, "determinism", criterion_4));
    verdicts.push(gated(5, "fixed-latent consistency", criterion_5));
    verdicts.push(gated(6, "prior quantification", criterion_6));
    verdicts.push(gated(7, "dose awareness", criterion_7));
    verdicts.push(gated(8, "superiority to prior at 50%", criterion_8));
    verdicts.push(gated(9, "input noise ordering", criterion_9));
    verdicts.sort_by_key(|v| v.id);
    let _ = std::io::stderr().write_all(b"\nacceptance summary\n");
    for v in &verdicts {
        announce(v);
    }
    let failed: Vec<u32> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
