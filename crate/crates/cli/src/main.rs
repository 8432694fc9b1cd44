use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use circconv::analysis::{cost_report, evaluate_scheme, flop_count, presets, FlopConventions, LayerSpec, ModelSpec};
use circconv::circulant::{expand, CirculantBaseTensor};
use circconv::convops::{circ_forward, conv_naive};
use circconv::model_io::{load_model, load_scheme_file, load_tensor, save_model, save_tensor, scheme_for_network, Precision};
use circconv::nn::{
    convert_network, evaluate, forward_pass, train, Network, PlantedTask, SgdConfig, TaskConfig,
};
use circconv::spectral::{flop_counter, reset_flop_counter};
use circconv::{CompressionScheme, ConvGeometry, PartitionConfig, Tensor3};

#[derive(Parser)]
#[command(name = "circconv", version, about = "Block-circulant convolution toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter and FLOP report for a preset or a model file.
    Analyze(AnalyzeArgs),
    /// Project a model's convolutions onto block-circulant kernels.
    Convert(ConvertArgs),
    /// Run the built-in property checks.
    Verify(VerifyArgs),
    /// Time the FFT path against the dense path.
    Bench(BenchArgs),
    /// Train on the planted-teacher task, from scratch or from a model.
    Train(TrainArgs),
    /// Run a model on one input tensor.
    Infer(InferArgs),
}

#[derive(Args)]
struct SchemeArgs {
    /// Partition sizes, one per compression unit, e.g. `1-2-2-2-2`.
    #[arg(long)]
    scheme: Option<String>,
    /// TOML table mapping convolution layer names to partition sizes.
    #[arg(long, conflicts_with = "scheme")]
    scheme_file: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Preset name (alexnet, alexnet-grouped, alexnet-ungrouped, resnet32) or a model file.
    #[arg(long)]
    model: String,
    #[command(flatten)]
    scheme: SchemeArgs,
    /// Report the dense baseline itself.
    #[arg(long, conflicts_with_all = ["scheme", "scheme_file"])]
    baseline: bool,
    /// JSON file overriding FLOP-counting constants.
    #[arg(long)]
    flop_conventions: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F64,
    F32,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F64 => Precision::F64,
            PrecisionArg::F32 => Precision::F32,
        }
    }
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    scheme: SchemeArgs,
    #[arg(long)]
    output: PathBuf,
    /// Print the per-layer approximation error.
    #[arg(long)]
    report: bool,
    #[arg(long, value_enum, default_value = "f64")]
    precision: PrecisionArg,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 40)]
    instances: usize,
    #[arg(long, default_value_t = 8)]
    max_spatial: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Partition sizes; each case uses one N x N channel block.
    #[arg(long, value_delimiter = ',', default_value = "4,16,64,256")]
    n: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    spatial: usize,
    #[arg(long, default_value_t = 1)]
    kernel: usize,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Built-in task name.
    #[arg(long, default_value = "planted")]
    task: String,
    /// Partition sizes for the student's convolutions (from scratch) or for conversion (with --from-model).
    #[arg(long)]
    scheme: Option<String>,
    /// Start from this model instead of a fresh network.
    #[arg(long)]
    from_model: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    conv_channels: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed of the synthetic task.
    #[arg(long, default_value_t = 0)]
    task_seed: u64,
    /// JSON-lines training log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Final model file.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

/// Output files written so far; removed if the command fails.
#[derive(Default)]
struct Outputs(Vec<PathBuf>);

impl Outputs {
    fn claim(&mut self, path: &Path) -> PathBuf {
        self.0.push(path.to_path_buf());
        path.to_path_buf()
    }

    fn remove_all(&self) {
        for p in &self.0 {
            let _ = fs::remove_file(p);
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut outputs = Outputs::default();
    match run(cli.command, &mut outputs) {
        Ok(code) => code,
        Err(e) => {
            outputs.remove_all();
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command, outputs: &mut Outputs) -> Result<ExitCode> {
    match command {
        Command::Analyze(a) => analyze(a),
        Command::Convert(a) => convert(a, outputs),
        Command::Verify(a) => verify(a),
        Command::Bench(a) => bench(a),
        Command::Train(a) => train_cmd(a, outputs),
        Command::Infer(a) => infer(a, outputs),
    }
}

fn parse_scheme(text: &str) -> Result<CompressionScheme> {
    text.parse::<CompressionScheme>()
        .with_context(|| format!("invalid scheme `{text}`"))
}

/// Scheme for a network from `--scheme` or `--scheme-file`.
fn network_scheme(args: &SchemeArgs, net: &Network) -> Result<Option<CompressionScheme>> {
    Ok(match (&args.scheme, &args.scheme_file) {
        (Some(s), _) => Some(parse_scheme(s)?),
        (None, Some(path)) => Some(scheme_for_network(net, &load_scheme_file(path)?)?),
        (None, None) => None,
    })
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json serializes"));
}

fn analyze(a: AnalyzeArgs) -> Result<ExitCode> {
    let conv = match &a.flop_conventions {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<FlopConventions>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => FlopConventions::default(),
    };
    let (model, scheme) = match presets::by_name(&a.model) {
        Some(model) => {
            if a.scheme.scheme_file.is_some() {
                bail!("--scheme-file applies to model files; use --scheme with presets");
            }
            let scheme = a.scheme.scheme.as_deref().map(parse_scheme).transpose()?;
            (model, scheme)
        }
        None => {
            let path = Path::new(&a.model);
            if !path.exists() {
                bail!("`{}` is neither a preset ({}) nor a model file", a.model, presets::NAMES.join(", "));
            }
            let net = load_model(path)?;
            let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
            let scheme = network_scheme(&a.scheme, &net)?;
            (ModelSpec::from_network(name, &net)?, scheme)
        }
    };
    let baseline = model.densified();
    let report = match (&scheme, a.baseline) {
        (Some(s), _) => evaluate_scheme(&model, s, &baseline, &conv)?,
        (None, true) => cost_report(&baseline, &baseline, &conv)?,
        (None, false) => cost_report(&model, &baseline, &conv)?,
    };
    if a.json {
        print_json(&report.to_json());
    } else {
        print!("{}", report.to_table());
    }
    Ok(ExitCode::SUCCESS)
}

fn convert(a: ConvertArgs, outputs: &mut Outputs) -> Result<ExitCode> {
    let net = load_model(&a.input)?;
    let Some(scheme) = network_scheme(&a.scheme, &net)? else {
        bail!("convert needs --scheme or --scheme-file");
    };
    let conversion = convert_network(&net, &scheme)?;
    let out = outputs.claim(&a.output);
    save_model(&conversion.network, &out, a.precision.into())?;
    if a.json {
        print_json(&json!({
            "output": out.display().to_string(),
            "scheme": scheme.to_string(),
            "params_before": net.param_count(),
            "params_after": conversion.network.param_count(),
            "layers": conversion.layers,
        }));
    } else {
        println!(
            "wrote {} (scheme {scheme}, {} -> {} parameters)",
            out.display(),
            net.param_count(),
            conversion.network.param_count()
        );
        if a.report {
            println!("{:<12} {:>4} {:>14} {:>8}", "layer", "N", "rel_error", "padded");
            for l in &conversion.layers {
                println!(
                    "{:<12} {:>4} {:>14.6e} {:>8}",
                    l.layer, l.n, l.relative_error, l.partially_padded_blocks
                );
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn verify(a: VerifyArgs) -> Result<ExitCode> {
    let results = circconv::verify::run_all(&circconv::verify::VerifyConfig {
        seed: a.seed,
        instances: a.instances,
        max_spatial: a.max_spatial,
    });
    let all = results.iter().all(|r| r.passed);
    if a.json {
        print_json(&json!({ "passed": all, "properties": results }));
    } else {
        for r in &results {
            println!("{}", r.line());
        }
        println!("{} of {} properties passed", results.iter().filter(|r| r.passed).count(), results.len());
    }
    Ok(if all { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn min_time<T>(reps: usize, mut f: impl FnMut() -> Result<T>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        std::hint::black_box(f()?);
        best = best.min(start.elapsed().as_secs_f64());
    }
    Ok(best)
}

fn bench(a: BenchArgs) -> Result<ExitCode> {
    if a.n.contains(&0) || a.spatial == 0 || a.kernel == 0 {
        bail!("--n, --spatial and --kernel must be positive");
    }
    let conv = FlopConventions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut rows = Vec::new();
    for &n in &a.n {
        let cfg = PartitionConfig::new(n, n, n)?;
        let base = CirculantBaseTensor::random_he(a.kernel, a.kernel, cfg, &mut rng);
        let dense = expand(&base);
        let x = Tensor3::random((a.spatial, a.spatial, n), &mut rng);
        let geometry = ConvGeometry::valid();
        let out = geometry.output_dims((a.spatial, a.spatial), (a.kernel, a.kernel))?;
        let spec = LayerSpec {
            output: out,
            input: (a.spatial, a.spatial),
            ..LayerSpec::conv("bench", a.kernel, n, n, a.spatial, out.0, 1, None)
        };
        reset_flop_counter();
        circ_forward(&x, &base, geometry)?;
        let measured = flop_counter();
        let fft_time = min_time(a.repetitions, || Ok(circ_forward(&x, &base, geometry)?))?;
        let naive_time = min_time(a.repetitions, || Ok(conv_naive(&x, &dense, geometry)?))?;
        rows.push(json!({
            "N": n,
            "dense_flops": flop_count(&spec, &conv),
            "fft_flops": flop_count(&spec.with_partition(n), &conv),
            "fft_flops_measured": measured,
            "naive_seconds": naive_time,
            "fft_seconds": fft_time,
            "speedup": naive_time / fft_time,
        }));
    }
    if a.json {
        print_json(&json!({ "spatial": a.spatial, "kernel": a.kernel, "cases": rows }));
    } else {
        println!(
            "{:>6} {:>14} {:>14} {:>14} {:>12} {:>12} {:>8}",
            "N", "dense_flops", "fft_flops", "fft_measured", "naive_s", "fft_s", "speedup"
        );
        for r in &rows {
            println!(
                "{:>6} {:>14} {:>14} {:>14} {:>12.3e} {:>12.3e} {:>8.2}",
                r["N"].as_u64().unwrap_or(0),
                r["dense_flops"].as_u64().unwrap_or(0),
                r["fft_flops"].as_u64().unwrap_or(0),
                r["fft_flops_measured"].as_u64().unwrap_or(0),
                r["naive_seconds"].as_f64().unwrap_or(f64::NAN),
                r["fft_seconds"].as_f64().unwrap_or(f64::NAN),
                r["speedup"].as_f64().unwrap_or(f64::NAN)
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn train_cmd(a: TrainArgs, outputs: &mut Outputs) -> Result<ExitCode> {
    if a.task != "planted" {
        bail!("unknown task `{}`; available: planted", a.task);
    }
    let sgd = SgdConfig {
        learning_rate: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        batch_size: a.batch_size,
    };
    sgd.validate()?;
    let scheme = a.scheme.as_deref().map(parse_scheme).transpose()?;
    let task_cfg = TaskConfig {
        seed: a.task_seed,
        ..TaskConfig::default()
    };
    let task = PlantedTask::generate(&task_cfg)?;
    let mut log_file = match &a.log {
        Some(p) => {
            let path = outputs.claim(p);
            Some(std::io::BufWriter::new(
                fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?,
            ))
        }
        None => None,
    };
    let mut log_err = None;
    let mut write_log = |rec: &circconv::nn::StepRecord| {
        if let Some(f) = log_file.as_mut() {
            if let Err(e) = writeln!(f, "{}", serde_json::to_string(rec).expect("record serializes")) {
                log_err.get_or_insert(e);
            }
        }
    };

    let (net, summary) = match &a.from_model {
        Some(path) => {
            let start = load_model(path)?;
            let scheme = scheme.unwrap_or(CompressionScheme::uniform(
                ModelSpec::from_network("m", &start)?.units().len(),
                1,
            )?);
            let (pre, _) = evaluate(&start, &task.train_inputs, &task.train_labels)?;
            let conversion = convert_network(&start, &scheme)?;
            let mut net = conversion.network;
            let (post, _) = evaluate(&net, &task.train_inputs, &task.train_labels)?;
            train(&mut net, &task.train_inputs, &task.train_labels, &sgd, a.steps, a.seed, |_, rec| {
                write_log(rec);
                true
            })?;
            let summary = json!({
                "scheme": scheme.to_string(),
                "pre_conversion_loss": pre,
                "post_conversion_loss": post,
                "layers": conversion.layers,
            });
            (net, summary)
        }
        None => {
            let partition = match scheme.as_ref().map(|s| s.ratios()) {
                None => None,
                Some([1]) => None,
                Some([n]) => Some(*n),
                Some(_) => bail!("a fresh network has one convolution layer; give a single partition size"),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let mut net = Network::classifier(task_cfg.dims, a.conv_channels, task_cfg.classes, partition, &mut rng)?;
            train(&mut net, &task.train_inputs, &task.train_labels, &sgd, a.steps, a.seed, |_, rec| {
                write_log(rec);
                true
            })?;
            (net, serde_json::Value::Null)
        }
    };
    if let Some(e) = log_err {
        return Err(e).context("writing training log");
    }
    if let Some(mut f) = log_file {
        f.flush().context("writing training log")?;
    }
    let (train_loss, train_acc) = evaluate(&net, &task.train_inputs, &task.train_labels)?;
    let (eval_loss, eval_acc) = evaluate(&net, &task.eval_inputs, &task.eval_labels)?;
    let out = outputs.claim(&a.output);
    save_model(&net, &out, Precision::F64)?;
    let result = json!({
        "output": out.display().to_string(),
        "params": net.param_count(),
        "train": { "loss": train_loss, "accuracy": train_acc },
        "eval": { "loss": eval_loss, "accuracy": eval_acc },
        "retrain": summary,
    });
    if a.json {
        print_json(&result);
    } else {
        println!(
            "trained {} steps: train loss {train_loss:.4} acc {train_acc:.3}, eval loss {eval_loss:.4} acc {eval_acc:.3}; wrote {}",
            a.steps,
            out.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn infer(a: InferArgs, outputs: &mut Outputs) -> Result<ExitCode> {
    let net = load_model(&a.model)?;
    let x = load_tensor(&a.input)?;
    let cache = forward_pass(&net, &[x])?;
    let y = match &cache.outputs()[0] {
        circconv::nn::Activation::Map(t) => t.clone(),
        circconv::nn::Activation::Vector(v) => Tensor3::from_vec((1, 1, v.len()), v.clone())?,
    };
    let out = outputs.claim(&a.output);
    save_tensor(&y, &out, Precision::F64)?;
    println!("wrote {} with dims {:?}", out.display(), y.dims());
    Ok(ExitCode::SUCCESS)
}
