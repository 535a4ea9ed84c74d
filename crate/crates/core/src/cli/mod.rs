//! The `regla` command line.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or configuration
//! error, 3 output write failure, 4 unparseable input, 5 missing data.

pub mod ppm;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::DEFAULT_EPS;
use crate::bench::{self, Mechanism};
use crate::distill::{self, ProjectionHeads, TeacherFeatures};
use crate::error::Error;
use crate::memory;
use crate::model::weights::TensorFile;
use crate::model::{stage_resolutions, Model, ModelConfig, Variant};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::verify::{self, Scope};

pub const EXIT_OK: u8 = 0;
pub const EXIT_VERIFY: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_WRITE: u8 = 3;
pub const EXIT_PARSE: u8 = 4;
pub const EXIT_MISSING: u8 = 5;

#[derive(Parser, Debug)]
#[command(
    name = "regla",
    version,
    about = "ReLU gated linear attention backbone toolkit"
)]
pub struct Cli {
    /// Seed for weights, inputs and trials.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    /// key=value model configuration applied on top of the chosen variant.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Csv,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Stage layout, parameter counts and multiply-accumulates of a variant.
    Describe {
        variant: String,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        /// Square input side used for the operation count.
        #[arg(long, default_value_t = 224)]
        resolution: usize,
    },
    /// Compare the factored attention kernel with the quadratic form.
    Equiv {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, hide = true)]
        epsilon_zero: bool,
    },
    /// Finite-difference gradient checks in 64-bit precision.
    Gradcheck {
        /// primitives, attention, blocks, model or distill.
        scope: String,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Time softmax and linear attention over a sweep of token counts.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = [256usize, 1024, 4096, 16384])]
        n: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value = "bench_attention.csv")]
        out: PathBuf,
        /// Run only one mechanism (softmax or relu_linear).
        #[arg(long)]
        mechanism: Option<String>,
        /// Narrow the wall-time slope bands tenfold.
        #[arg(long, conflicts_with = "loose")]
        strict: bool,
        /// Widen the wall-time slope bands tenfold.
        #[arg(long)]
        loose: bool,
    },
    /// Run a forward pass and print the top logits.
    Forward {
        variant: String,
        /// Binary PPM (P6) input image.
        #[arg(long, conflicts_with = "random")]
        image: Option<PathBuf>,
        /// Seeded random input of the given size, e.g. 224x224.
        #[arg(long)]
        random: Option<String>,
        /// Weights file to load instead of seeded initialization.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        /// Write the stage outputs (`stage/1` … `stage/4`) and logits here.
        #[arg(long)]
        dump_features: Option<PathBuf>,
    },
    /// Evaluate the multi-teacher loss on stored features.
    DistillLoss {
        #[arg(long)]
        student: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        teacher: Vec<PathBuf>,
    },
}

/// A message plus the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Dimension(_) | Error::Alignment(_) => EXIT_USAGE,
            Error::Format(_) => EXIT_PARSE,
            Error::Missing(_) => EXIT_MISSING,
            Error::Io(_) => EXIT_WRITE,
            Error::Evaluation(_) | Error::Fit(_) => EXIT_VERIFY,
        };
        Self::new(code, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::new(EXIT_WRITE, format!("write failed: {e}"))
    }
}

type CliResult = Result<u8, Failure>;

/// Parses `args` and runs the command, writing reports to `out` and
/// diagnostics to `err`. Returns the exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match dispatch(&cli, out) {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> CliResult {
    match &cli.command {
        Command::Describe {
            variant,
            format,
            resolution,
        } => describe(cli, variant, *format, *resolution, out),
        Command::Equiv {
            trials,
            epsilon_zero,
        } => match cli.precision {
            Precision::F32 => equiv::<f32>(cli, *trials, *epsilon_zero, out),
            Precision::F64 => equiv::<f64>(cli, *trials, *epsilon_zero, out),
        },
        Command::Gradcheck { scope, seeds } => gradcheck(cli, scope, *seeds, out),
        Command::Bench {
            n,
            d,
            repeats,
            out: path,
            mechanism,
            strict,
            loose,
        } => {
            let scale = if *strict {
                0.1
            } else if *loose {
                10.0
            } else {
                1.0
            };
            run_bench(cli, n, *d, *repeats, path, mechanism.as_deref(), scale, out)
        }
        Command::Forward {
            variant,
            image,
            random,
            weights,
            top_k,
            dump_features,
        } => {
            let args = ForwardArgs {
                variant,
                image: image.as_deref(),
                random: random.as_deref(),
                weights: weights.as_deref(),
                top_k: *top_k,
                dump: dump_features.as_deref(),
            };
            match cli.precision {
                Precision::F32 => forward::<f32>(cli, &args, out),
                Precision::F64 => forward::<f64>(cli, &args, out),
            }
        }
        Command::DistillLoss { student, teacher } => match cli.precision {
            Precision::F32 => distill_loss::<f32>(cli, student, teacher, out),
            Precision::F64 => distill_loss::<f64>(cli, student, teacher, out),
        },
    }
}

fn read_input(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path)
        .map_err(|e| Failure::new(EXIT_PARSE, format!("cannot read {}: {e}", path.display())))
}

fn load_tensor_file(path: &Path) -> Result<TensorFile, Failure> {
    let bytes = read_input(path)?;
    TensorFile::read_from(bytes.as_slice())
        .map_err(|e| Failure::new(EXIT_PARSE, format!("{}: {e}", path.display())))
}

fn save_tensor_file(file: &TensorFile, path: &Path) -> Result<(), Failure> {
    let mut buf = Vec::new();
    file.write_to(&mut buf)?;
    fs::write(path, buf)
        .map_err(|e| Failure::new(EXIT_WRITE, format!("cannot write {}: {e}", path.display())))
}

/// The variant's configuration with the `--config` file applied on top.
fn resolve_config(cli: &Cli, variant: &str) -> Result<ModelConfig, Failure> {
    let v: Variant = variant.parse()?;
    match &cli.config {
        None => Ok(ModelConfig::variant(v)),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                Failure::new(
                    EXIT_USAGE,
                    format!("cannot read config {}: {e}", path.display()),
                )
            })?;
            let (cfg, _) = ModelConfig::parse_kv(&format!("variant={v}\n{text}"))?;
            Ok(cfg)
        }
    }
}

/// `--seed` unless the config file sets one.
fn effective_seed(cli: &Cli) -> Result<u64, Failure> {
    if let Some(path) = &cli.config {
        if let Ok(text) = fs::read_to_string(path) {
            if let (_, Some(seed)) = ModelConfig::parse_kv(&text)? {
                return Ok(seed);
            }
        }
    }
    Ok(cli.seed)
}

#[allow(clippy::needless_range_loop)]
fn describe(
    cli: &Cli,
    variant: &str,
    format: Format,
    res: usize,
    out: &mut dyn Write,
) -> CliResult {
    let cfg = resolve_config(cli, variant)?;
    let model = Model::<f32>::build(&cfg, 0)?;
    let params = model.count_params();
    let flops = bench::model_flops_of(&model, res, res)?;
    let sides = stage_resolutions(res);
    match format {
        Format::Csv => {
            let mut w = csv::WriterBuilder::new()
                .terminator(csv::Terminator::Any(b'\n'))
                .from_writer(Vec::new());
            w.write_record([
                "variant",
                "stage",
                "blocks",
                "channels",
                "resolution",
                "params",
                "flops",
                "total_params",
                "total_flops",
            ])
            .map_err(bench::csv_err)?;
            for i in 0..4 {
                w.write_record([
                    cfg.name.clone(),
                    (i + 1).to_string(),
                    cfg.blocks[i].to_string(),
                    cfg.channels[i].to_string(),
                    format!("{0}x{0}", sides[i]),
                    params.stages[i].to_string(),
                    flops.stages[i].to_string(),
                    params.total.to_string(),
                    flops.total.to_string(),
                ])
                .map_err(bench::csv_err)?;
            }
            let bytes = w
                .into_inner()
                .map_err(|e| Failure::new(EXIT_WRITE, e.to_string()))?;
            out.write_all(&bytes)?;
        }
        Format::Table => {
            writeln!(
                out,
                "variant {}: gate {}, post-attention {}, early stages {}, ffn expansion {}, {} classes",
                cfg.name, cfg.gate_variant, cfg.post_attn, cfg.early_stage_kind, cfg.ffn_expansion,
                cfg.num_classes
            )?;
            writeln!(
                out,
                "{:<6} {:>6} {:>8} {:>10} {:>12} {:>14}",
                "stage", "blocks", "channels", "resolution", "params", "MACs"
            )?;
            writeln!(
                out,
                "{:<6} {:>6} {:>8} {:>10} {:>12} {:>14}",
                "stem",
                "-",
                cfg.channels[0],
                format!("{0}x{0}", sides[0]),
                params.stem,
                flops.stem
            )?;
            for i in 0..4 {
                writeln!(
                    out,
                    "{:<6} {:>6} {:>8} {:>10} {:>12} {:>14}",
                    i + 1,
                    cfg.blocks[i],
                    cfg.channels[i],
                    format!("{0}x{0}", sides[i]),
                    params.stages[i],
                    flops.stages[i]
                )?;
            }
            writeln!(
                out,
                "{:<6} {:>6} {:>8} {:>10} {:>12} {:>14}",
                "head", "-", cfg.num_classes, "1x1", params.head, flops.head
            )?;
            let reference = Variant::ALL
                .into_iter()
                .find(|v| v.as_str() == cfg.name)
                .map(|v| format!(" (reference {:.1}M)", v.reference_params_m()))
                .unwrap_or_default();
            writeln!(
                out,
                "total params {} = {:.2}M{reference}; {:.3} GMACs at {res}x{res}",
                params.total,
                params.total as f64 / 1e6,
                flops.total as f64 / 1e9
            )?;
        }
    }
    Ok(EXIT_OK)
}

fn equiv<T: Scalar>(
    cli: &Cli,
    trials: usize,
    epsilon_zero: bool,
    out: &mut dyn Write,
) -> CliResult {
    let eps = if epsilon_zero { 0.0 } else { DEFAULT_EPS };
    let results = verify::equiv_trials::<T>(cli.seed, trials, eps)?;
    writeln!(
        out,
        "{trials} trials, seed {}, {} kernel vs f64 quadratic oracle, tolerance {:.0e}",
        cli.seed,
        T::NAME,
        verify::EQUIV_TOL
    )?;
    let worst = results
        .iter()
        .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
        .expect("at least one trial");
    writeln!(
        out,
        "worst relative error {:.3e} at trial {} (N={}, d={}, e={})",
        worst.rel_err, worst.index, worst.n, worst.d, worst.e
    )?;
    let failed: Vec<_> = results.iter().filter(|t| !t.passed()).collect();
    for t in &failed {
        writeln!(
            out,
            "FAIL trial {} (N={}, d={}, e={}{}): relative error {:.3e}",
            t.index,
            t.n,
            t.d,
            t.e,
            if t.all_negative_q {
                ", all-negative Q"
            } else {
                ""
            },
            t.rel_err
        )?;
    }
    if failed.is_empty() {
        writeln!(out, "PASS {trials}/{trials}")?;
        Ok(EXIT_OK)
    } else {
        writeln!(
            out,
            "{} of {trials} trials failed; reproduce with `regla equiv --seed {} --trials {trials}`",
            failed.len(),
            cli.seed
        )?;
        Ok(EXIT_VERIFY)
    }
}

fn gradcheck(cli: &Cli, scope: &str, seeds: usize, out: &mut dyn Write) -> CliResult {
    let scope: Scope = scope.parse()?;
    if seeds == 0 {
        return Err(Failure::new(EXIT_USAGE, "at least one seed is required"));
    }
    let reports = verify::gradcheck(scope, cli.seed, seeds)?;
    writeln!(
        out,
        "gradcheck {scope}: f64, seeds {}..{}, step {:.0e}, tolerance {:.0e}",
        cli.seed,
        cli.seed + seeds as u64,
        crate::autodiff::FD_STEP,
        verify::GRAD_TOL
    )?;
    writeln!(
        out,
        "{:<28} {:>12} {:>10}  result",
        "unit", "max rel err", "worst seed"
    )?;
    let mut failed = Vec::new();
    for r in &reports {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        writeln!(
            out,
            "{:<28} {:>12.3e} {:>10}  {verdict}",
            r.name, r.max_rel_err, r.worst_seed
        )?;
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        writeln!(out, "all {} units passed", reports.len())?;
        Ok(EXIT_OK)
    } else {
        writeln!(out, "failed units: {}", failed.join(", "))?;
        Ok(EXIT_VERIFY)
    }
}

#[allow(clippy::too_many_arguments)]
fn run_bench(
    cli: &Cli,
    n_values: &[usize],
    d: usize,
    repeats: usize,
    path: &Path,
    mechanism: Option<&str>,
    band_scale: f64,
    out: &mut dyn Write,
) -> CliResult {
    let mechanisms: Vec<Mechanism> = match mechanism {
        Some(m) => vec![m.parse()?],
        None => Mechanism::ALL.to_vec(),
    };
    let file = fs::File::create(path)
        .map_err(|e| Failure::new(EXIT_WRITE, format!("cannot write {}: {e}", path.display())))?;
    let mut all = Vec::new();
    let mut ok = true;
    for m in mechanisms {
        let records = bench::sweep_attention(m, n_values, d, repeats, cli.seed)?;
        for r in &records {
            writeln!(
                out,
                "cell {m} N={} d={} flops={} peak_alloc_bytes={}",
                r.n, r.d, r.flops, r.peak_alloc_bytes
            )?;
            writeln!(
                out,
                "timing: {m} N={} median {:.6e} s{}",
                r.n,
                r.wall_time_s,
                if r.flagged {
                    " (below timer resolution, not fitted)"
                } else {
                    ""
                }
            )?;
        }
        let flop_pts: Vec<(f64, f64)> = records
            .iter()
            .map(|r| (r.n as f64, r.flops as f64))
            .collect();
        let flop_fit = bench::fit_loglog(&flop_pts)?;
        writeln!(out, "{m} analytic flop exponent {:.6}", flop_fit.slope)?;
        let (center, half) = m.slope_band();
        let (lo, hi) = (center - half * band_scale, center + half * band_scale);
        match bench::fit_loglog_slope(&records) {
            Ok(fit) => {
                let pass = (lo..=hi).contains(&fit.slope) && fit.r2 >= 0.95;
                ok &= pass;
                writeln!(
                    out,
                    "timing: {m} wall-time slope {:.3} (R² {:.4}, {} points), band [{lo:.2}, {hi:.2}]: {}",
                    fit.slope,
                    fit.r2,
                    fit.points,
                    if pass { "PASS" } else { "FAIL" }
                )?;
            }
            Err(e) => {
                ok = false;
                writeln!(out, "timing: {m} wall-time fit unavailable: {e}: FAIL")?;
            }
        }
        all.extend(records);
    }
    bench::write_csv(std::io::BufWriter::new(file), &all)
        .map_err(|e| Failure::new(EXIT_WRITE, format!("cannot write {}: {e}", path.display())))?;
    writeln!(
        out,
        "wrote {} rows to {}",
        all.iter().map(|r| r.times.len()).sum::<usize>(),
        path.display()
    )?;
    Ok(if ok { EXIT_OK } else { EXIT_VERIFY })
}

struct ForwardArgs<'a> {
    variant: &'a str,
    image: Option<&'a Path>,
    random: Option<&'a str>,
    weights: Option<&'a Path>,
    top_k: usize,
    dump: Option<&'a Path>,
}

fn parse_size(s: &str) -> Result<(usize, usize), Failure> {
    let bad = || Failure::new(EXIT_USAGE, format!("invalid size `{s}`, expected HxW"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((
        h.trim().parse().map_err(|_| bad())?,
        w.trim().parse().map_err(|_| bad())?,
    ))
}

fn forward<T: Scalar>(cli: &Cli, args: &ForwardArgs, out: &mut dyn Write) -> CliResult {
    let cfg = resolve_config(cli, args.variant)?;
    let seed = effective_seed(cli)?;
    let x: Tensor<T> = match (args.image, args.random) {
        (Some(path), _) => ppm::Ppm::parse(&read_input(path)?)?.to_tensor(),
        (None, random) => {
            let (h, w) = parse_size(random.unwrap_or("224x224"))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a9e);
            Tensor::randn(&[cfg.in_channels, h, w], 1.0, &mut rng)
        }
    };
    let mut model = Model::<T>::build(&cfg, seed)?;
    model.check_input(&x)?;
    if let Some(path) = args.weights {
        let file = load_tensor_file(path)?;
        model.load_tensor_file(&file)?;
    }
    let result = model.forward(&x)?;
    let (c, h, w) = x.chw()?;
    writeln!(
        out,
        "variant {} input {c}x{h}x{w} seed {seed} precision {}",
        cfg.name,
        T::NAME
    )?;
    for (i, f) in result.stage_features.iter().enumerate() {
        let s = f.shape();
        writeln!(out, "stage {}: {}x{}x{}", i + 1, s[0], s[1], s[2])?;
    }
    let mut order: Vec<usize> = (0..result.logits.len()).collect();
    order.sort_by(|&a, &b| {
        result.logits.data()[b]
            .as_f64()
            .total_cmp(&result.logits.data()[a].as_f64())
            .then(a.cmp(&b))
    });
    writeln!(
        out,
        "top-{} of {} logits:",
        args.top_k.min(order.len()),
        order.len()
    )?;
    for (rank, &i) in order.iter().take(args.top_k).enumerate() {
        writeln!(
            out,
            "  #{:<3} class {:>5}  {:+.6e}",
            rank + 1,
            i,
            result.logits.data()[i].as_f64()
        )?;
    }
    let mut code = EXIT_OK;
    if memory::is_installed() && result.attention_max_tokens > 0 {
        let tokens = result.attention_max_tokens;
        let quadratic = tokens * tokens * std::mem::size_of::<T>();
        let pass = result.attention_budget_violations == 0;
        writeln!(
            out,
            "attention scratch peak {} bytes (an N×N score matrix at N={tokens} would need {quadratic}); linear budget: {}",
            result.attention_peak_bytes,
            if pass { "PASS" } else { "FAIL" }
        )?;
        if !pass {
            code = EXIT_VERIFY;
        }
    }
    if let Some(path) = args.dump {
        let mut file = TensorFile::new();
        distill::stage_features_to_file(&result.stage_features, &mut file);
        file.push("logits", &result.logits);
        save_tensor_file(&file, path)?;
        writeln!(out, "wrote features to {}", path.display())?;
    }
    Ok(code)
}

fn distill_loss<T: Scalar>(
    cli: &Cli,
    student: &Path,
    teachers: &[PathBuf],
    out: &mut dyn Write,
) -> CliResult {
    let sfile = load_tensor_file(student)?;
    let feats: Vec<Tensor<T>> = distill::stage_features_from_file(&sfile)?;
    let mut all: Vec<TeacherFeatures<T>> = Vec::new();
    for path in teachers {
        let file = load_tensor_file(path)?;
        let found = TeacherFeatures::from_file(&file)?;
        if found.is_empty() {
            return Err(Failure::new(
                EXIT_MISSING,
                format!("{}: no `teacher/<id>/patch` tensors", path.display()),
            ));
        }
        all.extend(found);
    }
    let ids: Vec<String> = all.iter().map(|t| t.id.clone()).collect();
    let heads = if ProjectionHeads::<T>::present_in(&sfile) {
        let mut unique = ids.clone();
        unique.dedup();
        ProjectionHeads::from_file(&sfile, &unique, feats.len())?
    } else {
        let channels: Vec<usize> = feats.iter().map(|f| f.dim(0)).collect();
        let mut widths: Vec<(String, usize)> = Vec::new();
        for t in &all {
            if !widths.iter().any(|(id, _)| id == &t.id) {
                widths.push((t.id.clone(), t.dim()));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
        ProjectionHeads::random(&channels, &widths, 0.02, &mut rng)
    };
    let loss = distill::multi_teacher_loss(&feats, &all, &heads)?;
    for (id, v) in &loss.per_teacher {
        writeln!(out, "teacher {id} loss {v}")?;
    }
    writeln!(out, "total {}", loss.total)?;
    Ok(EXIT_OK)
}

/// Applies `REGLA_THREADS` (default 1) to the data-parallel pool.
pub fn init_threads_from_env() {
    let n = std::env::var("REGLA_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1);
    crate::par::init_threads(n);
}
