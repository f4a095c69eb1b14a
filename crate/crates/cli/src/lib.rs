//! Command-line pipeline: dataset generation, prior and diffusion training,
//! volume denoising, ablations and evaluation.
//!
//! Every command that writes artifacts also writes `run_<command>.json`
//! beside them with the argument vector, the fully resolved configuration
//! and SHA-256 hashes of its inputs and outputs.

pub mod config;
mod panels;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use dosediff::dataset::load_pairs;
use dosediff::denoiser::Denoiser;
use dosediff::metrics::{evaluate_suite, output_file_name, write_csv_file, MethodOutputs, OutputSource};
use dosediff::phantom::{build_dataset, Manifest, Split, MANIFEST_FILE};
use dosediff::prior::{denoise_prior, prior_loss, train_prior, PriorNet};
use dosediff::sampler::{sample_volume, Ablation, SampleConfig};
use dosediff::schedule::{NoiseSchedule, ScheduleConfig};
use dosediff::train::{train, TrainState, MODEL_FILE};
use dosediff::volume::{load_volume, save_volume, Volume3D};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub use config::RunConfig;

pub const PRIOR_FILE: &str = "prior.ckpt";
pub const SCHEDULE_FILE: &str = "schedule.json";

#[derive(Debug, Parser)]
#[command(
    name = "dosediff",
    version,
    about = "Dose-aware diffusion denoising of low-count volumes"
)]
struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override any config key, e.g. `--set train.steps=500`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate phantoms and their low-count versions.
    GenData(GenDataArgs),
    /// Train the direct regression prior.
    TrainPrior(TrainPriorArgs),
    /// Train the conditional diffusion model.
    Train(TrainArgs),
    /// Denoise volumes with the diffusion sampler.
    Denoise(DenoiseArgs),
    /// Run the full method and its ablations, then score them.
    Ablate(AblateArgs),
    /// Score method outputs against ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Dataset directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Number of phantoms (overrides `data.num_phantoms`).
    #[arg(long)]
    num_phantoms: Option<usize>,
    /// Volume size as `S,H,W`.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    /// Count fractions to simulate.
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
struct TrainPriorArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Optimizer steps (overrides `prior_train.steps`).
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    out: PathBuf,
    /// Optimizer steps (overrides `train.steps`).
    #[arg(long)]
    steps: Option<usize>,
    /// Continue from the state saved in `--out`.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Args)]
struct SamplerArgs {
    /// Denoiser checkpoint file or training directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prior checkpoint file or directory.
    #[arg(long)]
    prior_checkpoint: Option<PathBuf>,
    /// Reverse steps (overrides `sample.num_steps`).
    #[arg(long)]
    steps: Option<usize>,
    /// Depth the prior is re-noised to (overrides `sample.t_prime`).
    #[arg(long)]
    t_prime: Option<usize>,
    /// Count fractions to process.
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DenoiseArgs {
    #[command(flatten)]
    common: SamplerArgs,
    /// Ablation switch (repeatable): no_prior, no_fix_eps, single_eps, no_dose.
    #[arg(long)]
    ablate: Vec<String>,
    /// Volume files to denoise.
    #[arg(long)]
    input: Vec<PathBuf>,
    /// Dataset directory; denoises the configured split.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    common: SamplerArgs,
    /// Ablations to compare against the full method (default: all four).
    #[arg(long)]
    ablate: Vec<String>,
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Method outputs as `NAME=DIR` (repeatable).
    #[arg(long)]
    method: Vec<String>,
    /// Count fractions to score.
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    /// Summary CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Directory for PNG slice panels.
    #[arg(long)]
    panels: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Pipeline(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Pipeline(e)
    }
}

impl From<dosediff::Error> for Failure {
    fn from(e: dosediff::Error) -> Self {
        Failure::Pipeline(e.into())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code: 0 on success, 1 on pipeline failure, 2 on usage
/// errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli, argv) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            2
        }
        Err(Failure::Pipeline(e)) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn execute(cli: Cli, argv: Vec<String>) -> Outcome {
    let mut cfg = RunConfig::resolve(cli.config.as_deref(), &cli.set).map_err(|e| usage(format!("{e:#}")))?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.sample.threads = t;
    }
    let threads = cfg.sample.threads;
    let mut ctx = Session {
        cfg,
        argv,
        inputs: Vec::new(),
    };
    let job = move || match cli.command {
        Command::GenData(a) => ctx.gen_data(a),
        Command::TrainPrior(a) => ctx.train_prior(a),
        Command::Train(a) => ctx.train(a),
        Command::Denoise(a) => ctx.denoise(a),
        Command::Ablate(a) => ctx.ablate(a),
        Command::Eval(a) => ctx.eval(a),
    };
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| usage(format!("cannot build a {threads}-thread pool: {e}")))?
            .install(job)
    } else {
        job()
    }
}

#[derive(Debug, Serialize)]
struct FileHash {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'static str,
    argv: &'a [String],
    seed: u64,
    config: &'a RunConfig,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
}

fn hash_file(path: &Path) -> anyhow::Result<FileHash> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(FileHash {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

/// Regular files under `dir`, sorted, excluding run manifests.
fn files_under(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).with_context(|| format!("listing {}", d.display()))? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("run_")) {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn require(path: &Path, what: &str) -> Outcome {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

/// Accepts a checkpoint file or a directory holding `default_name`.
fn checkpoint_path(path: &Path, default_name: &str, what: &str) -> Outcome<PathBuf> {
    let p = if path.is_dir() {
        path.join(default_name)
    } else {
        path.to_path_buf()
    };
    require(&p, what)?;
    require(&dosediff::nn::checkpoint::sidecar_path(&p), &format!("{what} sidecar"))?;
    Ok(p)
}

fn data_manifest(dir: &Path) -> Outcome<Manifest> {
    require(&dir.join(MANIFEST_FILE), "dataset manifest")?;
    Ok(Manifest::load(dir)?)
}

fn parse_ablations(names: &[String]) -> Outcome<Vec<String>> {
    for n in names {
        if !Ablation::NAMES.contains(&n.as_str()) {
            return Err(usage(format!(
                "unknown ablation {n:?}; expected one of {}",
                Ablation::NAMES.join(", ")
            )));
        }
    }
    Ok(names.to_vec())
}

/// One low-count volume to denoise and the file name of its output.
struct Job {
    input: PathBuf,
    output_name: String,
}

fn split_jobs(m: &Manifest, root: &Path, split: Split, fractions: Option<&[f64]>) -> Vec<Job> {
    let mut jobs = Vec::new();
    for s in m.studies_in(split) {
        for l in &s.low {
            if fractions.is_none_or(|fs| fs.iter().any(|f| (f - l.fraction).abs() < 1e-12)) {
                jobs.push(Job {
                    input: root.join(&l.path),
                    output_name: output_file_name(&s.id, l.fraction),
                });
            }
        }
    }
    jobs
}

struct Models {
    denoiser: Denoiser,
    prior: Option<PriorNet>,
    sched: NoiseSchedule,
}

struct Session {
    cfg: RunConfig,
    argv: Vec<String>,
    inputs: Vec<PathBuf>,
}

impl Session {
    fn write_manifest(&self, command: &str, dir: &Path, outputs: &[PathBuf]) -> Outcome {
        let manifest = RunManifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            argv: &self.argv,
            seed: self.cfg.seed,
            config: &self.cfg,
            inputs: self
                .inputs
                .iter()
                .map(|p| hash_file(p))
                .collect::<anyhow::Result<_>>()?,
            outputs: outputs.iter().map(|p| hash_file(p)).collect::<anyhow::Result<_>>()?,
        };
        let path = dir.join(format!("run_{command}.json"));
        fs::write(
            &path,
            serde_json::to_vec_pretty(&manifest).map_err(anyhow::Error::from)?,
        )
        .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    fn gen_data(&mut self, a: GenDataArgs) -> Outcome {
        let d = &mut self.cfg.data;
        if let Some(n) = a.num_phantoms {
            d.num_phantoms = n;
        }
        if let Some(dims) = a.dims {
            d.dims = <[usize; 3]>::try_from(dims.as_slice()).map_err(|_| usage("--dims expects S,H,W"))?;
        }
        if let Some(f) = a.fractions {
            d.fractions = f;
        }
        self.cfg.finalize();
        if self.cfg.data.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(usage("count fractions must lie in (0, 1]"));
        }
        let m = build_dataset(&self.cfg.data, &a.out, self.cfg.seed)?;
        log::info!("wrote {} studies to {}", m.studies.len(), a.out.display());
        let outputs = files_under(&a.out)?;
        self.write_manifest("gen-data", &a.out, &outputs)
    }

    fn train_prior(&mut self, a: TrainPriorArgs) -> Outcome {
        if let Some(s) = a.steps {
            self.cfg.prior_train.steps = s;
        }
        self.cfg.finalize();
        let manifest = data_manifest(&a.data)?;
        self.inputs.push(a.data.join(MANIFEST_FILE));
        let n = self.cfg.prior.window;
        let pairs = load_pairs(&manifest, &a.data, Split::Train, n, None)?;
        if pairs.is_empty() {
            return Err(usage("the dataset has no training studies"));
        }
        let val = load_pairs(&manifest, &a.data, Split::Val, n, None)?;
        let (prior, losses) = train_prior(&pairs, self.cfg.prior, &self.cfg.prior_train)?;
        fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
        let ckpt = a.out.join(PRIOR_FILE);
        prior.save(&ckpt)?;
        #[derive(Serialize)]
        struct Row {
            step: usize,
            loss: f64,
        }
        let rows: Vec<Row> = losses
            .iter()
            .enumerate()
            .map(|(i, &loss)| Row { step: i + 1, loss })
            .collect();
        let log_path = a.out.join("prior_log.csv");
        write_csv_file(&rows, &log_path)?;
        if !val.is_empty() {
            log::info!("prior validation MSE {:.6}", prior_loss(&prior, &val)?);
        }
        let outputs = vec![ckpt.clone(), dosediff::nn::checkpoint::sidecar_path(&ckpt), log_path];
        self.write_manifest("train-prior", &a.out, &outputs)
    }

    fn train(&mut self, a: TrainArgs) -> Outcome {
        if let Some(s) = a.steps {
            self.cfg.train.steps = s;
        }
        self.cfg.finalize();
        let manifest = data_manifest(&a.data)?;
        self.inputs.push(a.data.join(MANIFEST_FILE));
        let n = self.cfg.model.window;
        let pairs = load_pairs(&manifest, &a.data, Split::Train, n, None)?;
        if pairs.is_empty() {
            return Err(usage("the dataset has no training studies"));
        }
        let val = load_pairs(&manifest, &a.data, Split::Val, n, None)?;
        let state = if a.resume && a.out.join(MODEL_FILE).exists() {
            let s = TrainState::load(&a.out)?;
            if *s.model.config() != self.cfg.model {
                return Err(usage("resumed checkpoint was trained with a different model config"));
            }
            s
        } else {
            TrainState::new(self.cfg.model, &self.cfg.train)?
        };
        train(&pairs, &val, state, &self.cfg.train, Some(&a.out))?;
        let sched_path = a.out.join(SCHEDULE_FILE);
        fs::write(
            &sched_path,
            serde_json::to_vec_pretty(&self.cfg.schedule).map_err(anyhow::Error::from)?,
        )
        .with_context(|| format!("writing {}", sched_path.display()))?;
        let outputs = files_under(&a.out)?;
        self.write_manifest("train", &a.out, &outputs)
    }

    /// Validates sampler flags and loads the models. Everything is checked
    /// before any output is written.
    fn prepare_sampler(&mut self, a: &SamplerArgs, ablations: &[Ablation]) -> Outcome<Models> {
        if let Some(s) = a.steps {
            self.cfg.sample.num_steps = s;
        }
        if let Some(t) = a.t_prime {
            self.cfg.sample.t_prime = t;
        }
        if let Some(f) = &a.fractions {
            self.cfg.eval.fractions = Some(f.clone());
        }
        self.cfg.finalize();
        let ckpt = checkpoint_path(&a.checkpoint, MODEL_FILE, "denoiser checkpoint")?;
        let needs_prior = ablations.iter().any(|x| !x.no_prior);
        let prior_path = match (&a.prior_checkpoint, needs_prior) {
            (Some(p), _) => Some(checkpoint_path(p, PRIOR_FILE, "prior checkpoint")?),
            (None, true) => return Err(usage("--prior-checkpoint is required unless every run uses no_prior")),
            (None, false) => None,
        };
        let denoiser = Denoiser::load(&ckpt)?;
        self.inputs.push(ckpt.clone());
        let prior = match prior_path {
            Some(p) => {
                self.inputs.push(p.clone());
                Some(PriorNet::load(&p)?)
            }
            None => None,
        };
        let sched_file = ckpt.parent().unwrap_or(Path::new(".")).join(SCHEDULE_FILE);
        let sched_cfg: ScheduleConfig = if sched_file.exists() {
            self.inputs.push(sched_file.clone());
            serde_json::from_slice(&fs::read(&sched_file).with_context(|| format!("reading {}", sched_file.display()))?)
                .map_err(anyhow::Error::from)?
        } else {
            self.cfg.schedule.clone()
        };
        if sched_cfg != self.cfg.schedule {
            log::warn!("using the schedule saved with the checkpoint instead of the configured one");
            self.cfg.schedule = sched_cfg.clone();
        }
        self.cfg.model = *denoiser.config();
        self.cfg.finalize();
        let sched = sched_cfg.build()?;
        for ab in ablations {
            let c = SampleConfig {
                ablation: *ab,
                ..self.cfg.sample.clone()
            };
            dosediff::sampler::build_step_plan(&c, &sched).map_err(|e| usage(e.to_string()))?;
        }
        Ok(Models { denoiser, prior, sched })
    }

    fn run_jobs(&self, models: &Models, jobs: &[Job], ablation: Ablation, dir: &Path) -> Outcome<Vec<PathBuf>> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let cfg = SampleConfig {
            ablation,
            ..self.cfg.sample.clone()
        };
        let mut written = Vec::new();
        for job in jobs {
            let v = load_volume(&job.input)?;
            let out = sample_volume(&v, models.prior.as_ref(), &models.denoiser, &models.sched, &cfg)?;
            let path = dir.join(&job.output_name);
            save_volume(&out.volume, &path)?;
            log::info!("{} -> {}", job.input.display(), path.display());
            written.push(path);
        }
        Ok(written)
    }

    fn denoise(&mut self, a: DenoiseArgs) -> Outcome {
        let mut ablation = self.cfg.sample.ablation;
        for name in parse_ablations(&a.ablate)? {
            ablation.enable(&name)?;
        }
        self.cfg.sample.ablation = ablation;
        let jobs = match (&a.data, a.input.is_empty()) {
            (Some(_), false) => return Err(usage("use either --input or --data, not both")),
            (None, true) => return Err(usage("nothing to denoise: pass --input or --data")),
            (Some(d), true) => {
                let m = data_manifest(d)?;
                self.inputs.push(d.join(MANIFEST_FILE));
                let fr = a.common.fractions.clone().or(self.cfg.eval.fractions.clone());
                split_jobs(&m, d, self.cfg.eval.split, fr.as_deref())
            }
            (None, false) => {
                let mut jobs = Vec::new();
                for p in &a.input {
                    require(p, "input volume")?;
                    let v = load_volume(p)?;
                    jobs.push(Job {
                        input: p.clone(),
                        output_name: output_file_name(&v.meta.id, v.meta.count_fraction),
                    });
                }
                jobs
            }
        };
        let models = self.prepare_sampler(&a.common, &[ablation])?;
        self.inputs.extend(jobs.iter().map(|j| j.input.clone()));
        let written = self.run_jobs(&models, &jobs, ablation, &a.common.out)?;
        self.write_manifest("denoise", &a.common.out, &written)
    }

    fn ablate(&mut self, a: AblateArgs) -> Outcome {
        let names = if a.ablate.is_empty() {
            Ablation::NAMES.iter().map(|s| s.to_string()).collect()
        } else {
            parse_ablations(&a.ablate)?
        };
        let mut variants = vec![Ablation::default()];
        for n in &names {
            variants.push(Ablation::only(n)?);
        }
        let m = data_manifest(&a.data)?;
        self.inputs.push(a.data.join(MANIFEST_FILE));
        let models = self.prepare_sampler(&a.common, &variants)?;
        let fractions = self.cfg.eval.fractions.clone();
        let jobs = split_jobs(&m, &a.data, self.cfg.eval.split, fractions.as_deref());
        if jobs.is_empty() {
            return Err(usage("no studies match the requested split and fractions"));
        }
        let out = &a.common.out;
        let mut written = Vec::new();
        let mut methods = vec![MethodOutputs {
            method: "input".into(),
            source: OutputSource::Input,
        }];
        if let Some(prior) = &models.prior {
            let dir = out.join("prior");
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            for job in &jobs {
                let v = denoise_prior(prior, &load_volume(&job.input)?)?;
                let p = dir.join(&job.output_name);
                save_volume(&v, &p)?;
                written.push(p);
            }
            methods.push(MethodOutputs {
                method: "prior".into(),
                source: OutputSource::Dir(dir),
            });
        }
        for v in &variants {
            let label = v.label();
            let dir = out.join(&label);
            log::info!("running {label}");
            written.extend(self.run_jobs(&models, &jobs, *v, &dir)?);
            methods.push(MethodOutputs {
                method: label,
                source: OutputSource::Dir(dir),
            });
        }
        let report = evaluate_suite(&m, &a.data, self.cfg.eval.split, fractions.as_deref(), &methods)?;
        let table = out.join("ablation.csv");
        let studies = out.join("ablation_studies.csv");
        write_csv_file(&report.rows, &table)?;
        write_csv_file(&report.studies, &studies)?;
        written.push(table);
        written.push(studies);
        self.write_manifest("ablate", out, &written)
    }

    fn eval(&mut self, a: EvalArgs) -> Outcome {
        if let Some(f) = &a.fractions {
            self.cfg.eval.fractions = Some(f.clone());
        }
        self.cfg.finalize();
        let m = data_manifest(&a.data)?;
        self.inputs.push(a.data.join(MANIFEST_FILE));
        let mut methods = vec![MethodOutputs {
            method: "input".into(),
            source: OutputSource::Input,
        }];
        for spec in &a.method {
            let (name, dir) = spec
                .split_once('=')
                .ok_or_else(|| usage(format!("--method expects NAME=DIR, got {spec:?}")))?;
            let dir = PathBuf::from(dir);
            require(&dir, "method output directory")?;
            methods.push(MethodOutputs {
                method: name.to_string(),
                source: OutputSource::Dir(dir),
            });
        }
        let fractions = self.cfg.eval.fractions.clone();
        let split = self.cfg.eval.split;
        let report = evaluate_suite(&m, &a.data, split, fractions.as_deref(), &methods)?;
        if !report.missing.is_empty() {
            log::warn!("{} expected outputs are missing", report.missing.len());
        }
        if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        write_csv_file(&report.rows, &a.out)?;
        let stem = a
            .out
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "eval".into());
        let studies = a.out.with_file_name(format!("{stem}_studies.csv"));
        write_csv_file(&report.studies, &studies)?;
        let mut written = vec![a.out.clone(), studies];
        if let Some(dir) = &a.panels {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            written.extend(self.panels(&m, &a.data, &methods, dir)?);
        }
        let dir = a
            .out
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        self.write_manifest("eval", dir, &written)
    }

    /// One panel pair per fraction for the first study of the split: truth,
    /// then each method's output.
    fn panels(&self, m: &Manifest, root: &Path, methods: &[MethodOutputs], dir: &Path) -> Outcome<Vec<PathBuf>> {
        let Some(study) = m.studies_in(self.cfg.eval.split).next() else {
            return Ok(Vec::new());
        };
        let truth = load_volume(root.join(&study.full))?;
        let mut written = Vec::new();
        for low in &study.low {
            if self
                .cfg
                .eval
                .fractions
                .as_ref()
                .is_some_and(|fs| !fs.iter().any(|f| (f - low.fraction).abs() < 1e-12))
            {
                continue;
            }
            let mut vols: Vec<Volume3D> = vec![truth.clone()];
            for method in methods {
                let p = match &method.source {
                    OutputSource::Input => root.join(&low.path),
                    OutputSource::Dir(d) => d.join(output_file_name(&study.id, low.fraction)),
                };
                if p.exists() {
                    vols.push(load_volume(&p)?);
                }
            }
            let refs: Vec<&Volume3D> = vols.iter().collect();
            let stem = format!("{}_{:.4}", study.id, low.fraction);
            written.extend(panels::write_panels(&refs, dir, &stem).map_err(|e| anyhow!(e))?);
        }
        Ok(written)
    }
}
