//! Command-line front end. The `diffflow` binary forwards its arguments to
//! [`main_with`].
//!
//! Exit codes: 0 success, 2 usage, 3 numeric failure, 4 I/O.

use std::ffi::OsString;
use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{s, Array2};

use crate::baselines::{nf_mode_nll, sample_trained};
use crate::config::Config;
use crate::datasets::{
    self, generate_2d, load_tabular, manifest_path, write_matrix, Dataset2DKind, Dataset2DSpec,
};
use crate::dynamics::TimeGrid;
use crate::error::{Error, Result};
use crate::evaluation::{
    bits_per_dim, density_grid, elbo_nll_bound, heatmap_svg, ode_nll, write_density_csv, Lattice,
    OdeOptions, SamplerConfig, TraceMethod,
};
use crate::gradcheck::{run_gradcheck, ORACLE_TOLERANCE};
use crate::model::{Mode, Model};
use crate::training::{read_train_state, train, TrainConfig, TrainSink, TrainState};

/// Keys describing the training data, accepted alongside [`TrainConfig::KEYS`].
pub const DATA_KEYS: &[&str] = &[
    "dataset",
    "data_path",
    "n_data",
    "n_test",
    "data_seed",
    "split",
];

/// Keys a resumed run may change.
const RESUMABLE_KEYS: &[&str] = &["iterations", "workers", "checkpoint_every"];

const DEFAULT_N_DATA: u64 = 20_000;
const DEFAULT_N_TEST: u64 = 2_000;

#[derive(Debug, Parser)]
#[command(name = "diffflow", version, about = "Diffusion normalizing flow lab")]
pub struct Cli {
    /// Worker threads for parallel sections; results do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; artifacts go to a run directory.
    Train(TrainArgs),
    /// Draw samples from a checkpoint with the lambda-family sampler.
    Sample(SampleArgs),
    /// Per-point negative log-likelihood of a CSV of points.
    EvalNll(EvalArgs),
    /// Generate a synthetic 2-D dataset.
    GenData(GenArgs),
    /// Compare adjoint gradients against the unrolled oracle on random instances.
    Gradcheck(GradcheckArgs),
    /// Log-density on a 2-D lattice as CSV, optionally as an SVG heatmap.
    ExportDensity(ExportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// diffflow, ddpm or nf.
    #[arg(long)]
    pub mode: Option<String>,
    /// Continue from a checkpoint; artifacts stay in its directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Exact run directory instead of `<runs-root>/<timestamp>-<hash>`.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    pub runs_root: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Use the raw parameters instead of their moving average.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// Defaults to the step count in force at the end of training.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Finish with a Tweedie posterior-mean step.
    #[arg(long)]
    pub denoise: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NllMethod {
    Ode,
    Bound,
    Nf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TraceArg {
    Auto,
    Exact,
    Hutchinson,
}

#[derive(Debug, Args)]
pub struct OdeArgs {
    #[arg(long, default_value_t = 1e-5)]
    pub atol: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub rtol: f64,
    #[arg(long, value_enum, default_value_t = TraceArg::Auto)]
    pub trace: TraceArg,
    #[arg(long, default_value_t = 16)]
    pub probes: usize,
}

impl OdeArgs {
    fn options(&self, seed: u64) -> OdeOptions {
        OdeOptions {
            atol: self.atol,
            rtol: self.rtol,
            trace: match self.trace {
                TraceArg::Auto => TraceMethod::Auto,
                TraceArg::Exact => TraceMethod::Exact,
                TraceArg::Hutchinson => TraceMethod::Hutchinson {
                    probes: self.probes,
                },
            },
            seed,
            ..OdeOptions::default()
        }
    }

    fn record(&self, c: &mut Config) {
        c.insert("atol", self.atol);
        c.insert("rtol", self.rtol);
        c.insert("trace", format!("{:?}", self.trace).to_lowercase());
        c.insert("probes", self.probes as i64);
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// CSV of points in model coordinates.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = NllMethod::Ode)]
    pub method: NllMethod,
    /// Per-point report; the summary line always goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub ode: OdeArgs,
    /// Trajectories per point for the bound.
    #[arg(long, default_value_t = 64)]
    pub n_mc: usize,
    /// Grid steps for the bound and the discrete flow.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Log-determinant of the preprocessing, added before converting to bits.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub rescale_log_det: f64,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub dataset: String,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 2)]
    pub dims: usize,
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of instances, seeded `seed, seed + 1, ...`.
    #[arg(long, default_value_t = 1)]
    pub instances: u64,
    #[arg(long, default_value_t = 20)]
    pub fd_coords: usize,
    /// Use zero-parameter networks.
    #[arg(long)]
    pub zero_nets: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Lattice points per axis.
    #[arg(long, default_value_t = 100)]
    pub grid: usize,
    /// `x_min,x_max,y_min,y_max`.
    #[arg(long, default_value = "-4,4,-4,4", allow_hyphen_values = true)]
    pub bounds: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub svg: Option<PathBuf>,
    /// Overlay this many model samples on the heatmap.
    #[arg(long, default_value_t = 0)]
    pub samples: usize,
    #[command(flatten)]
    pub ode: OdeArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<i32> {
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(Error::config("`--workers` must be positive"));
        }
        // a second initialization in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global();
    }
    match cli.command {
        Command::Train(a) => cmd_train(&a, cli.workers).map(|_| 0),
        Command::Sample(a) => cmd_sample(&a).map(|_| 0),
        Command::EvalNll(a) => cmd_eval_nll(&a).map(|_| 0),
        Command::GenData(a) => cmd_gen_data(&a).map(|_| 0),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::ExportDensity(a) => cmd_export_density(&a).map(|_| 0),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_manifest(out: &Path, c: &Config) -> Result<()> {
    write_text(&manifest_path(out), &c.render())
}

fn command_config(command: &str) -> Config {
    let mut c = Config::new();
    c.insert("command", command);
    c.insert("version", env!("CARGO_PKG_VERSION"));
    c
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

/// Training data and held-out points, both in model coordinates.
pub struct TrainingData {
    pub train: Array2<f64>,
    pub valid: Option<Array2<f64>>,
    pub test: Array2<f64>,
    /// Nats to add to model-space NLLs for raw-data units.
    pub rescale_log_det: f64,
}

/// Resolves the data keys of a training config.
pub fn training_data(c: &Config, seed: u64) -> Result<TrainingData> {
    let data_seed = c.u64("data_seed")?.unwrap_or(seed);
    match (c.str("dataset")?, c.str("data_path")?) {
        (Some(name), None) => {
            let kind = Dataset2DKind::from_name(&name)?;
            let n = c.u64("n_data")?.unwrap_or(DEFAULT_N_DATA) as usize;
            let n_test = c.u64("n_test")?.unwrap_or(DEFAULT_N_TEST) as usize;
            if n == 0 {
                return Err(Error::config("`n_data`: must be positive"));
            }
            let all = generate_2d(&Dataset2DSpec::new(kind, n + n_test, data_seed));
            Ok(TrainingData {
                train: all.slice(s![..n, ..]).to_owned(),
                valid: None,
                test: all.slice(s![n.., ..]).to_owned(),
                rescale_log_det: 0.0,
            })
        }
        (None, Some(path)) => {
            let split = match c.f64_list("split")? {
                Some(v) if v.len() == 3 => (v[0], v[1], v[2]),
                Some(_) => return Err(Error::config("`split`: expected three ratios")),
                None => (0.8, 0.1, 0.1),
            };
            let src = load_tabular(Path::new(&path), split, data_seed)?;
            Ok(TrainingData {
                rescale_log_det: src.normalization.rescale_log_det(),
                train: src.train,
                valid: Some(src.valid),
                test: src.test,
            })
        }
        (Some(_), Some(_)) => Err(Error::config(
            "`dataset` and `data_path` are mutually exclusive",
        )),
        (None, None) => Err(Error::config("`dataset` or `data_path` is required")),
    }
}

fn resolve_train_config(a: &TrainArgs, workers: Option<usize>) -> Result<Config> {
    let mut c = match &a.config {
        Some(p) => Config::load(p)?,
        None => Config::new(),
    };
    for s in &a.set {
        c.set(s)?;
    }
    if let Some(seed) = a.seed {
        c.insert("seed", seed as i64);
    }
    if let Some(m) = &a.mode {
        c.insert("mode", Mode::from_name(m)?.name());
    }
    if let Some(w) = workers {
        c.insert("workers", w as i64);
    }
    let known: Vec<&str> = TrainConfig::KEYS.iter().chain(DATA_KEYS).copied().collect();
    c.check_known(&known)?;
    Ok(c)
}

fn resumed_state(path: &Path, user: &Config) -> Result<TrainState> {
    let mut state = read_train_state(path)?;
    let saved = state.config.to_config();
    let mut merged = user.clone();
    merged.merge_defaults(&saved);
    let wanted = TrainConfig::from_config(&merged)?;
    let wanted_cfg = wanted.to_config();
    for key in TrainConfig::KEYS {
        if !RESUMABLE_KEYS.contains(key) && wanted_cfg.subset(&[key]) != saved.subset(&[key]) {
            return Err(Error::config(format!(
                "`{key}`: cannot change when resuming"
            )));
        }
    }
    if wanted.iterations < state.iteration {
        return Err(Error::config(format!(
            "`iterations`: checkpoint is already at iteration {}",
            state.iteration
        )));
    }
    state.config.iterations = wanted.iterations;
    state.config.workers = wanted.workers;
    state.config.checkpoint_every = wanted.checkpoint_every;
    Ok(state)
}

/// Returns the run directory.
pub fn cmd_train(a: &TrainArgs, workers: Option<usize>) -> Result<PathBuf> {
    let user = resolve_train_config(a, workers)?;
    let (state, run_dir, data) = match &a.resume {
        Some(ckpt) => {
            let st = resumed_state(ckpt, &user)?;
            let data = training_data(&user, st.config.seed)?;
            let dir = a
                .run_dir
                .clone()
                .unwrap_or_else(|| ckpt.parent().map(Path::to_path_buf).unwrap_or_default());
            (st, dir, data)
        }
        None => {
            let tc = TrainConfig::from_config(&user)?;
            let data = training_data(&user, tc.seed)?;
            let mut resolved = tc.to_config();
            resolved.merge_defaults(&user.subset(DATA_KEYS));
            let dir = a.run_dir.clone().unwrap_or_else(|| {
                let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
                a.runs_root.join(format!("{stamp}-{}", resolved.hash_hex()))
            });
            (TrainState::fresh(&tc, data.train.ncols())?, dir, data)
        }
    };
    if data.train.ncols() != state.model.dim() {
        return Err(Error::config(format!(
            "data has {} columns but the model has dimension {}",
            data.train.ncols(),
            state.model.dim()
        )));
    }
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;

    let mut manifest = state.config.to_config();
    manifest.merge_defaults(&user.subset(DATA_KEYS));
    let hash = manifest.hash_hex();
    manifest.merge_defaults(&command_config("train"));
    manifest.insert("config_hash", hash);
    manifest.insert("data_dim", data.train.ncols() as i64);
    manifest.insert("rescale_log_det", data.rescale_log_det);
    write_text(&run_dir.join("manifest.toml"), &manifest.render())?;
    write_matrix(&run_dir.join("test.csv"), &[], data.test.view())?;
    if let Some(v) = &data.valid {
        write_matrix(&run_dir.join("valid.csv"), &[], v.view())?;
    }

    let log_path = run_dir.join("train_log.csv");
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(state.iteration > 0)
        .truncate(state.iteration == 0)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let ckpt = run_dir.join("checkpoint.ckpt");
    let start = state.iteration;
    let mut last = None;
    let mut observer = |row: &crate::training::LogRow| last = Some(row.loss);
    let final_state = train(
        data.train.view(),
        state,
        TrainSink {
            log: Some(&mut log),
            checkpoint: Some(&ckpt),
            observer: Some(&mut observer),
        },
    )?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    println!(
        "run_dir={} iterations={}..{} final_loss={}",
        run_dir.display(),
        start,
        final_state.iteration,
        last.map_or("n/a".to_string(), |l| format!("{l:.6}"))
    );
    Ok(run_dir)
}

fn load_model(m: &ModelArgs) -> Result<(TrainState, Model)> {
    let st = read_train_state(&m.checkpoint)?;
    let model = if m.raw {
        st.model.clone()
    } else {
        st.ema_model()
    };
    Ok((st, model))
}

fn model_config(command: &str, m: &ModelArgs, st: &TrainState) -> Config {
    let mut c = command_config(command);
    c.insert("checkpoint", path_str(&m.checkpoint));
    c.insert("checkpoint_iteration", st.iteration as i64);
    c.insert("checkpoint_config_hash", st.config.to_config().hash_hex());
    c.insert("ema", !m.raw);
    c
}

fn column_names(d: usize) -> Vec<String> {
    (1..=d).map(|k| format!("x{k}")).collect()
}

pub fn cmd_sample(a: &SampleArgs) -> Result<()> {
    let (st, model) = load_model(&a.model)?;
    let cfg = SamplerConfig {
        lambda: a.lambda,
        steps: a.steps.unwrap_or_else(|| st.config.steps_at(st.iteration)),
        beta: a.beta,
        final_denoise: a.denoise,
        seed: a.seed,
    };
    let x = sample_trained(a.n, &cfg, st.config.mode, st.config.beta, &model)?;
    let names = column_names(model.dim());
    let header: Vec<&str> = names.iter().map(String::as_str).collect();
    write_matrix(&a.out, &header, x.view())?;
    let mut c = model_config("sample", &a.model, &st);
    c.insert("lambda", cfg.lambda);
    c.insert("steps", cfg.steps as i64);
    c.insert("beta", cfg.beta);
    c.insert("n", a.n as i64);
    c.insert("denoise", cfg.final_denoise);
    c.insert("seed", cfg.seed as i64);
    c.insert("out", path_str(&a.out));
    write_manifest(&a.out, &c)?;
    println!("wrote {} samples to {}", a.n, a.out.display());
    Ok(())
}

fn eval_grid(st: &TrainState, model: &Model, steps: Option<usize>) -> Result<TimeGrid> {
    let n = steps.unwrap_or_else(|| st.config.steps_at(st.iteration));
    TimeGrid::fixed(n, model.horizon, st.config.beta)
}

/// Per-row estimates and their standard errors.
pub fn evaluate_nll(
    a: &EvalArgs,
    st: &TrainState,
    model: &Model,
    x: &Array2<f64>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    match a.method {
        NllMethod::Ode => {
            let rep = ode_nll(x.view(), model, &a.ode.options(a.seed))?;
            Ok((rep.nats, rep.std_err))
        }
        NllMethod::Bound => {
            let grid = eval_grid(st, model, a.steps)?;
            let est = elbo_nll_bound(x.view(), &grid, model, a.n_mc, a.seed)?;
            Ok((
                est.iter().map(|e| e.mean).collect(),
                est.iter().map(|e| e.std_err).collect(),
            ))
        }
        NllMethod::Nf => {
            let grid = eval_grid(st, model, a.steps)?;
            let v = nf_mode_nll(x.view(), &grid, model)?;
            let n = v.len();
            Ok((v, vec![0.0; n]))
        }
    }
}

pub fn cmd_eval_nll(a: &EvalArgs) -> Result<()> {
    let (st, model) = load_model(&a.model)?;
    let table = datasets::read_matrix(&a.data)?;
    let x = table.data;
    if x.nrows() == 0 || x.ncols() != model.dim() {
        return Err(Error::config(format!(
            "`--data` must hold at least one row with {} columns",
            model.dim()
        )));
    }
    let (nats, se) = evaluate_nll(a, &st, &model, &x)?;
    let m = nats.len() as f64;
    let mean = nats.iter().sum::<f64>() / m;
    let sem = if nats.len() > 1 {
        (nats.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0) / m).sqrt()
    } else {
        0.0
    };
    let method = format!("{:?}", a.method).to_lowercase();
    let bpd = bits_per_dim(mean, model.dim(), a.rescale_log_det);
    let summary = format!(
        "method={method} rows={} mean_nll={mean:.6} sem={sem:.6} bits_per_dim={bpd:.6}",
        nats.len()
    );
    if let Some(out) = &a.out {
        let f = std::fs::File::create(out).map_err(|e| Error::io(out, e))?;
        let mut w = BufWriter::new(f);
        let mut body = String::from("row,nll,std_err\n");
        for (i, (v, e)) in nats.iter().zip(&se).enumerate() {
            body.push_str(&format!("{i},{v},{e}\n"));
        }
        w.write_all(body.as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(out, e))?;
        let mut c = model_config("eval-nll", &a.model, &st);
        c.insert("data", path_str(&a.data));
        c.insert("method", method.as_str());
        a.ode.record(&mut c);
        c.insert("n_mc", a.n_mc as i64);
        c.insert("steps", eval_grid(&st, &model, a.steps)?.steps() as i64);
        c.insert("seed", a.seed as i64);
        c.insert("rescale_log_det", a.rescale_log_det);
        c.insert("mean_nll", mean);
        c.insert("sem", sem);
        c.insert("out", path_str(out));
        write_manifest(out, &c)?;
    }
    println!("{summary}");
    Ok(())
}

pub fn cmd_gen_data(a: &GenArgs) -> Result<()> {
    let spec = Dataset2DSpec::new(Dataset2DKind::from_name(&a.dataset)?, a.n, a.seed);
    datasets::write_2d(&spec, &generate_2d(&spec), &a.out)?;
    println!("wrote {} {} points to {}", a.n, a.dataset, a.out.display());
    Ok(())
}

/// Exit code 0 if every instance passes, 3 otherwise.
pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<i32> {
    let mut c = command_config("gradcheck");
    c.insert("dims", a.dims as i64);
    c.insert("steps", a.steps as i64);
    c.insert("seed", a.seed as i64);
    c.insert("instances", a.instances as i64);
    c.insert("fd_coords", a.fd_coords as i64);
    c.insert("zero_nets", a.zero_nets);
    c.insert("oracle_tolerance", ORACLE_TOLERANCE);
    let mut lines = Vec::new();
    for line in c.render().lines() {
        lines.push(format!("# {line}"));
    }
    lines.push("seed,dims,steps,params,oracle_rel_err,fd_rel_err,status".to_string());
    let mut all = true;
    for i in 0..a.instances {
        let r = run_gradcheck(a.dims, a.steps, a.seed + i, a.zero_nets, a.fd_coords)?;
        all &= r.passed();
        lines.push(format!(
            "{},{},{},{},{:.3e},{:.3e},{}",
            r.seed,
            r.dims,
            r.steps,
            r.num_params,
            r.oracle_error,
            r.fd_error,
            if r.passed() { "PASS" } else { "FAIL" }
        ));
    }
    let text = lines.join("\n") + "\n";
    print!("{text}");
    if let Some(out) = &a.out {
        write_text(out, &text)?;
        write_manifest(out, &c)?;
    }
    Ok(if all { 0 } else { 3 })
}

fn parse_bounds(s: &str, n: usize) -> Result<Lattice> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::config(format!("`--bounds`: expected four numbers, got {s:?}")))?;
    if v.len() != 4 {
        return Err(Error::config(format!(
            "`--bounds`: expected four numbers, got {s:?}"
        )));
    }
    let lat = Lattice {
        x_min: v[0],
        x_max: v[1],
        y_min: v[2],
        y_max: v[3],
        nx: n,
        ny: n,
    };
    lat.validate()?;
    Ok(lat)
}

pub fn cmd_export_density(a: &ExportArgs) -> Result<()> {
    let (st, model) = load_model(&a.model)?;
    let lattice = parse_bounds(&a.bounds, a.grid)?;
    let rows = density_grid(&model, &lattice, &a.ode.options(a.seed))?;
    let f = std::fs::File::create(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut w = BufWriter::new(f);
    write_density_csv(&rows, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&a.out, e))?;
    let mut c = model_config("export-density", &a.model, &st);
    c.insert("grid", a.grid as i64);
    c.insert("bounds", a.bounds.as_str());
    a.ode.record(&mut c);
    c.insert("seed", a.seed as i64);
    c.insert("samples", a.samples as i64);
    c.insert("out", path_str(&a.out));
    if let Some(svg) = &a.svg {
        let overlay = if a.samples > 0 {
            let mut cfg = SamplerConfig::new(1.0, st.config.steps_at(st.iteration));
            cfg.seed = a.seed;
            Some(sample_trained(
                a.samples,
                &cfg,
                st.config.mode,
                st.config.beta,
                &model,
            )?)
        } else {
            None
        };
        write_text(
            svg,
            &heatmap_svg(&rows, &lattice, overlay.as_ref().map(|x| x.view())),
        )?;
        c.insert("svg", path_str(svg));
    }
    write_manifest(&a.out, &c)?;
    println!("wrote {} lattice points to {}", rows.len(), a.out.display());
    Ok(())
}
