//! Command-line surface.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tabdiff_core::data::{fit_standardization, split_rows};
use tabdiff_core::eval::{self, CalibrationReport, Histogram};
use tabdiff_core::{Checkpoint, FeatureId, FeatureRegistry, Model, ModelConfig, Preset, RawTable, Trainer};

use crate::checkpoint;
use crate::config;
use crate::error::{CliError, Result};
use crate::export;
use crate::parallel;
use crate::table::{load_csv, DEFAULT_MISSING};

#[derive(Debug, Parser)]
#[command(name = "tabdiff", version, about = "Conditional density estimation for tabular data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model on a CSV dataset and write a checkpoint.
    Train(TrainArgs),
    /// Sample one feature given conditions and export a histogram.
    Density(DensityArgs),
    /// Draw joint samples one feature at a time.
    SampleJoint(JointArgs),
    /// Quantile calibration on the held-out split.
    Calibrate(CalibrateArgs),
    /// Predict one feature for each held-out row from its other features.
    Summarize(SummarizeArgs),
    /// Parameter counts per tensor and per module.
    ReportParams(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PresetArg {
    Paper,
    Housing,
    Debug,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Paper => Preset::Paper,
            PresetArg::Housing => Preset::Housing,
            PresetArg::Debug => Preset::Debug,
        }
    }
}

#[derive(Debug, Args)]
pub struct Common {
    /// Seed for every random choice; a random one is drawn and logged if omitted.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct DensityArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub request: String,
    /// `NAME=VALUE`, repeatable.
    #[arg(long = "cond")]
    pub conditions: Vec<String>,
    #[arg(long, default_value_t = 1024)]
    pub n: usize,
    #[arg(long, default_value_t = 50)]
    pub bins: usize,
    /// Histogram range as `LO,HI`; defaults to the sample extent.
    #[arg(long, allow_hyphen_values = true)]
    pub range: Option<String>,
    /// Histogram file; written to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct JointArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Requested features in generation order; repeatable or comma-separated.
    #[arg(long = "request", required = true, value_delimiter = ',')]
    pub requests: Vec<String>,
    #[arg(long = "cond")]
    pub conditions: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset to split; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub trials: usize,
    /// Samples per density.
    #[arg(long, default_value_t = 256)]
    pub n: usize,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub request: String,
    /// Cap on held-out rows evaluated.
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long, default_value_t = 1024)]
    pub n: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, conflicts_with = "preset")]
    pub checkpoint: Option<PathBuf>,
    /// Report a freshly initialized preset sized for its reference table.
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs the command, and returns the
/// process exit status. Diagnostics go to stderr as one line.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => train(a),
        Command::Density(a) => density(a),
        Command::SampleJoint(a) => sample_joint(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Summarize(a) => summarize(a),
        Command::ReportParams(a) => report_params(a),
    }
}

fn resolve_seed(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = rand::random();
        eprintln!("seed: {s}");
        s
    })
}

fn resolve_threads(threads: Option<usize>) -> Result<usize> {
    match threads {
        Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
        Some(t) => Ok(t),
        None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| CliError::io(path, e)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::io("<stdout>", e)),
    }
}

/// Up to three registry names closest to `name`.
pub fn nearest_names<'r>(registry: &'r FeatureRegistry, name: &str) -> Vec<&'r str> {
    let lower = name.to_lowercase();
    let mut scored: Vec<(usize, &str)> = registry
        .names()
        .iter()
        .map(|n| (strsim::levenshtein(&n.to_lowercase(), &lower), n.as_str()))
        .collect();
    scored.sort();
    scored.into_iter().take(3).map(|(_, n)| n).collect()
}

pub fn lookup_feature(registry: &FeatureRegistry, name: &str) -> Result<FeatureId> {
    registry.id(name).map_err(|_| {
        CliError::Usage(format!(
            "unknown feature `{name}`; nearest: {}",
            nearest_names(registry, name).join(", ")
        ))
    })
}

/// `NAME=VALUE` flags to conditions, in order. Splits on the first `=`.
pub fn parse_condition_flags(flags: &[String], registry: &FeatureRegistry) -> Result<Vec<(FeatureId, f64)>> {
    flags
        .iter()
        .map(|flag| {
            let (name, value) = flag
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("condition `{flag}` is not NAME=VALUE")))?;
            let id = lookup_feature(registry, name.trim())?;
            let v: f64 = value
                .trim()
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| CliError::Usage(format!("condition `{flag}`: `{value}` is not a finite number")))?;
            Ok((id, v))
        })
        .collect()
}

fn parse_range(text: &str) -> Result<(f64, f64)> {
    let bad = || CliError::Usage(format!("--range `{text}` is not LO,HI with LO < HI"));
    let (lo, hi) = text.split_once(',').ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(bad());
    }
    Ok((lo, hi))
}

/// Reorders `table` to registry column order, matching by name.
pub fn align_columns(table: &RawTable, registry: &FeatureRegistry) -> Result<RawTable> {
    if table.columns() == registry.names() {
        return Ok(table.clone());
    }
    let index: Vec<usize> = registry
        .names()
        .iter()
        .map(|n| {
            table
                .columns()
                .iter()
                .position(|c| c == n)
                .ok_or_else(|| CliError::Core(tabdiff_core::Error::Data(format!("dataset lacks column `{n}`"))))
        })
        .collect::<Result<_>>()?;
    let rows = table
        .rows()
        .map(|row| index.iter().map(|&c| row[c]).collect())
        .collect();
    Ok(RawTable::new(registry.names().to_vec(), rows)?)
}

/// Training configuration with flags applied over the config file.
pub fn resolve_train_config(a: &TrainArgs) -> Result<tabdiff_core::TrainConfig> {
    let mut pairs = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            config::parse_pairs(&text)?
        }
        None => Default::default(),
    };
    if let Some(p) = a.preset {
        pairs.insert("preset".into(), Preset::from(p).name().into());
    }
    let has_seed = pairs.contains_key("seed");
    let mut c = config::from_pairs(&pairs, Preset::Housing)?;
    if a.common.seed.is_some() || !has_seed {
        c.seed = resolve_seed(a.common.seed);
    }
    if let Some(d) = &a.dataset {
        c.dataset = d.to_string_lossy().into_owned();
    }
    if let Some(p) = &a.checkpoint {
        c.checkpoint = p.to_string_lossy().into_owned();
    }
    if c.dataset.is_empty() {
        return Err(CliError::Usage("no dataset: pass --dataset or set `dataset` in the config".into()));
    }
    c.validate()?;
    Ok(c)
}

/// Training and held-out rows of `dataset` under the split recorded in
/// `config`.
pub fn split_dataset(table: &RawTable, c: &tabdiff_core::TrainConfig) -> (RawTable, RawTable) {
    let (train, test) = split_rows(table.n_rows(), c.seed, c.test_fraction);
    (table.select_rows(&train), table.select_rows(&test))
}

fn train(a: TrainArgs) -> Result<()> {
    let c = resolve_train_config(&a)?;
    let table = load_csv(Path::new(&c.dataset), DEFAULT_MISSING)?;
    let (train_rows, _) = split_dataset(&table, &c);
    let registry = fit_standardization(&train_rows)?;
    let path = PathBuf::from(&c.checkpoint);
    let cycle = c.cycle_length_epochs;
    let mut trainer = Trainer::new(c, train_rows, registry)?;
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "epoch\tlr\tmean_loss");
    while !trainer.is_finished() {
        match trainer.run_epoch() {
            Ok(s) => {
                let _ = writeln!(stdout, "{}\t{:?}\t{:?}", s.epoch, s.lr, s.mean_loss);
                if trainer.epoch() % cycle == 0 && !trainer.is_finished() {
                    checkpoint::save(&trainer.checkpoint(), &path)?;
                }
            }
            Err(e) => {
                // the trainer rolled back to the last good epoch
                checkpoint::save(&trainer.checkpoint(), &path)?;
                return Err(e.into());
            }
        }
    }
    checkpoint::save(&trainer.checkpoint(), &path)
}

fn density(a: DensityArgs) -> Result<()> {
    let range = a.range.as_deref().map(parse_range).transpose()?;
    if a.bins == 0 {
        return Err(CliError::Usage("--bins must be at least 1".into()));
    }
    let ck = checkpoint::load(&a.checkpoint)?;
    let reg = ck.model.registry();
    let request = lookup_feature(reg, &a.request)?;
    let conds = parse_condition_flags(&a.conditions, reg)?;
    let seed = resolve_seed(a.common.seed);
    let threads = resolve_threads(a.common.threads)?;
    let est = parallel::estimate_density(&ck.model, &conds, request, a.n, seed, threads)?;
    let hist = Histogram::from_samples(&est.samples, a.bins, range)?;
    let summary = export::density_summary(&est, reg);
    emit(a.out.as_deref(), &export::histogram_tsv(&hist))?;
    if a.out.is_some() {
        emit(None, &summary)
    } else {
        eprint!("{summary}");
        Ok(())
    }
}

fn sample_joint(a: JointArgs) -> Result<()> {
    let ck = checkpoint::load(&a.checkpoint)?;
    let reg = ck.model.registry();
    let requests = a
        .requests
        .iter()
        .map(|r| lookup_feature(reg, r.trim()))
        .collect::<Result<Vec<_>>>()?;
    let base = parse_condition_flags(&a.conditions, reg)?;
    let seed = resolve_seed(a.common.seed);
    let threads = resolve_threads(a.common.threads)?;
    let rows = joint_parallel(&ck.model, &requests, &base, a.n, seed, threads)?;
    let names: Vec<&str> = requests.iter().map(|&r| reg.name(r)).collect();
    emit(a.out.as_deref(), &export::samples_tsv(&names, &rows))
}

/// Joint draws split across workers by draw index.
pub fn joint_parallel(
    model: &Model,
    requests: &[FeatureId],
    base: &[(FeatureId, f64)],
    n: usize,
    seed: u64,
    threads: usize,
) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let threads = threads.clamp(1, n) as u64;
    let per = (n as u64).div_ceil(threads);
    let parts: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                let range = (w * per).min(n as u64)..((w + 1) * per).min(n as u64);
                s.spawn(move || eval::sequential_joint_range(model, requests, base, range, seed))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut rows = Vec::with_capacity(n);
    for p in parts {
        rows.extend(p?);
    }
    Ok(rows)
}

fn held_out_rows(ck: &Checkpoint, dataset: Option<&Path>) -> Result<RawTable> {
    let path = dataset.map_or_else(|| PathBuf::from(&ck.config.dataset), Path::to_path_buf);
    let table = load_csv(&path, DEFAULT_MISSING)?;
    let (_, test) = split_dataset(&table, &ck.config);
    if test.n_rows() == 0 {
        return Err(CliError::Core(tabdiff_core::Error::Data(
            "the held-out split is empty (test_fraction is 0)".into(),
        )));
    }
    align_columns(&test, ck.model.registry())
}

/// Calibration with trials evaluated across `threads` workers.
pub fn calibrate_parallel(
    model: &Model,
    test: &RawTable,
    seed: u64,
    trials: usize,
    n: usize,
    bins: usize,
    threads: usize,
) -> Result<CalibrationReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trials = eval::calibration_trials(model, test, &mut rng, trials)?;
    let values = model.values();
    let threads = threads.clamp(1, trials.len());
    let per = trials.len().div_ceil(threads);
    let parts: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = trials
            .chunks(per)
            .map(|chunk| {
                let values = &values;
                s.spawn(move || {
                    chunk
                        .iter()
                        .map(|t| eval::trial_quantile(model, values, t, n))
                        .collect::<tabdiff_core::Result<Vec<_>>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut quantiles = Vec::with_capacity(trials.len());
    for p in parts {
        quantiles.extend(p?);
    }
    Ok(CalibrationReport::from_quantiles(quantiles, bins)?)
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    if a.bins == 0 || a.n == 0 || a.trials == 0 {
        return Err(CliError::Usage("--trials, --n, and --bins must be at least 1".into()));
    }
    let ck = checkpoint::load(&a.checkpoint)?;
    let test = held_out_rows(&ck, a.dataset.as_deref())?;
    let seed = resolve_seed(a.common.seed);
    let threads = resolve_threads(a.common.threads)?;
    let report = calibrate_parallel(&ck.model, &test, seed, a.trials, a.n, a.bins, threads)?;
    emit(a.out.as_deref(), &export::calibration_tsv(&report))
}

fn summarize(a: SummarizeArgs) -> Result<()> {
    let ck = checkpoint::load(&a.checkpoint)?;
    let reg = ck.model.registry();
    let request = lookup_feature(reg, &a.request)?;
    let test = held_out_rows(&ck, a.dataset.as_deref())?;
    let seed = resolve_seed(a.common.seed);
    let threads = resolve_threads(a.common.threads)?;
    let limit = a.trials.unwrap_or(usize::MAX);
    let mut table = String::from("row\ttruth\tmedian\trobust_std\tquantile\n");
    let (mut abs_err, mut covered, mut rows) = (Vec::new(), 0usize, 0usize);
    for r in 0..test.n_rows() {
        if rows == limit {
            break;
        }
        let row = test.row(r);
        let Some(truth) = row[request.0] else { continue };
        let conds: Vec<(FeatureId, f64)> = row
            .iter()
            .enumerate()
            .filter(|&(c, v)| c != request.0 && v.is_some())
            .map(|(c, v)| (FeatureId(c), v.unwrap()))
            .collect();
        let est = parallel::estimate_density(&ck.model, &conds, request, a.n, seed.wrapping_add(r as u64), threads)?;
        let q = eval::quantile_of_truth(&est.samples, truth);
        table.push_str(&format!("{r}\t{truth:?}\t{:?}\t{:?}\t{q:?}\n", est.median, est.robust_std));
        abs_err.push((truth - est.median).abs());
        if (truth - est.median).abs() <= est.robust_std {
            covered += 1;
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(CliError::Core(tabdiff_core::Error::Data(format!(
            "no held-out row observes {}",
            a.request
        ))));
    }
    let report = format!(
        "request\t{}\nrows\t{rows}\nmedian_abs_error\t{:?}\nwithin_robust_std\t{:?}\n\n{table}",
        a.request,
        eval::median(&abs_err),
        covered as f64 / rows as f64
    );
    emit(a.out.as_deref(), &report)
}

fn report_params(a: ReportArgs) -> Result<()> {
    let model = match (&a.checkpoint, a.preset) {
        (Some(path), _) => checkpoint::load(path)?.model,
        (None, Some(p)) => preset_model(p.into())?,
        (None, None) => return Err(CliError::Usage("pass --checkpoint or --preset".into())),
    };
    let r = model.parameter_report();
    let mut out = format!(
        "embedding\t{}\ntransformer\t{}\nencoder\t{}\nhead\t{}\ntotal\t{}\nhead_fraction\t{:?}\n\ntensor\tcount\n",
        r.embedding,
        r.transformer,
        r.encoder(),
        r.head,
        r.total,
        r.head_fraction()
    );
    for (name, n) in &r.tensors {
        out.push_str(&format!("{name}\t{n}\n"));
    }
    emit(a.out.as_deref(), &out)
}

/// A preset model over placeholder features, sized like its reference
/// table.
pub fn preset_model(preset: Preset) -> Result<Model> {
    let n = preset.reference_features();
    let names = (0..n).map(|i| format!("feature{i}")).collect();
    let stats = vec![tabdiff_core::Standardization { mean: 0.0, scale: 1.0 }; n];
    let registry = FeatureRegistry::new(names, stats)?;
    Ok(Model::new(ModelConfig::preset(preset), registry, &mut ChaCha8Rng::seed_from_u64(0))?)
}
