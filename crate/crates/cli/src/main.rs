//! `focus`: synthetic data, training, map generation and evaluation.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use focus_core::dataset::{load, write_synthetic};
use focus_core::evalharness::{merge_reports, render_table, train_eval_model, EvalConfig, EvalReport};
use focus_core::imaging::SyntheticSpec;
use focus_core::model::TrainConfig;
use focus_core::pnm::write_atomic;
use focus_core::trainer::{
    export_baseline, export_focus_maps, generate_maps, gradcheck_model, train, Checkpoint, Generator, MapMode,
};
use focus_core::Error;

#[derive(Parser, Debug)]
#[command(name = "focus", version, about = "Weakly supervised manipulation maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate paired real/fake images with ground-truth masks.
    Synth(SynthArgs),
    /// Train the two-branch map generator.
    Train(TrainArgs),
    /// Export manipulation maps from a trained checkpoint.
    Maps(MapsArgs),
    /// Export comparison-based or reference maps.
    Baseline(BaselineArgs),
    /// Train the evaluation model on a map set and report metrics.
    Eval(EvalArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Merge evaluation reports into one table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of real/fake pairs.
    #[arg(long, default_value_t = 100)]
    count: u64,
    /// Image side in pixels.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of the image covered by the spliced region.
    #[arg(long, default_value_t = 0.2)]
    area: f64,
    /// Standard deviation of the noise added to every fake pixel.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Feathering width at the splice boundary, in pixels.
    #[arg(long, default_value_t = 2.0)]
    blend: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file to write.
    #[arg(long)]
    out: PathBuf,
    /// TrainConfig JSON; every field except use_class_token is required.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Line-delimited JSON log [default: <out>.log.jsonl].
    #[arg(long)]
    log: Option<PathBuf>,
    /// Override the config seed [default: from config, else 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Override the iteration count [default: from config, else 1500].
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Args, Debug)]
struct MapsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output map directory.
    #[arg(long)]
    out: PathBuf,
    /// Give real samples the fake-class-only map instead of zeros; maps are
    /// exported unnormalized.
    #[arg(long, default_value_t = false)]
    fake_only: bool,
    /// Skip per-image min-max normalization of fake-sample maps.
    #[arg(long, default_value_t = false)]
    raw: bool,
}

#[derive(Args, Debug)]
struct BaselineArgs {
    /// One of ssim, pixdiff, pixdiff@0.1, gt, zero.
    #[arg(long)]
    method: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Map directory providing supervision for every sample.
    #[arg(long)]
    maps: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report JSON to write.
    #[arg(long)]
    out: PathBuf,
    /// EvalConfig JSON [default: built-in].
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the iteration count.
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// TrainConfig JSON [default: the tiny 16×16 configuration].
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of parameter coordinates to check.
    #[arg(long, default_value_t = 250)]
    coords: usize,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// EvalReport JSON files.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Write the merged reports as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

type CliResult = Result<(), Box<dyn std::error::Error>>;

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Box<dyn std::error::Error>> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?)
}

fn synth(args: SynthArgs) -> CliResult {
    let spec = SyntheticSpec {
        image_size: args.size,
        patch_area_frac: args.area,
        global_noise_sigma: args.noise,
        blend_width: args.blend,
        seed: args.seed,
    };
    eprintln!("{}", serde_json::to_string(&spec)?);
    let entries = write_synthetic(&args.out, &spec, args.count)?;
    println!("wrote {} samples to {}", entries.len(), args.out.display());
    Ok(())
}

fn run_train(args: TrainArgs) -> CliResult {
    let mut config = match &args.config {
        Some(p) => read_json::<TrainConfig>(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(i) = args.iterations {
        config.iterations = i;
    }
    config.validate()?;
    let dataset = load(&args.data)?;
    let log_path = args
        .log
        .unwrap_or_else(|| PathBuf::from(format!("{}.log.jsonl", args.out.display())));
    let mut log = fs::File::create(&log_path).map_err(|e| format!("{}: {e}", log_path.display()))?;
    let echo = serde_json::json!({ "config": config });
    eprintln!("{echo}");
    writeln!(log, "{echo}")?;
    let outcome = train(&config, &dataset, |step| {
        writeln!(log, "{}", serde_json::to_string(step)?).map_err(|e| Error::Input(format!("log write failed: {e}")))
    })?;
    outcome.checkpoint.save(&args.out)?;
    let last = outcome.history.last().expect("at least one iteration");
    println!(
        "trained {} iterations; final total loss {:.6}; checkpoint {}",
        outcome.history.len(),
        last.total,
        args.out.display()
    );
    Ok(())
}

fn run_maps(args: MapsArgs) -> CliResult {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let dataset = load(&args.data)?;
    let mode = if args.fake_only {
        MapMode::FakeOnly
    } else {
        MapMode::Supervision
    };
    let maps = generate_maps(&checkpoint.model, &dataset, mode)?;
    let normalize = !(args.raw || args.fake_only);
    export_focus_maps(&checkpoint, &maps, normalize, &args.out)?;
    println!("wrote {} maps to {}", maps.len(), args.out.display());
    Ok(())
}

fn run_baseline(args: BaselineArgs) -> CliResult {
    let generator = Generator::parse(&args.method)?;
    let dataset = load(&args.data)?;
    let n = export_baseline(&dataset, generator, &args.out)?;
    println!("wrote {n} {} maps to {}", generator.name(), args.out.display());
    Ok(())
}

fn run_eval(args: EvalArgs) -> CliResult {
    let mut config = match &args.config {
        Some(p) => read_json::<EvalConfig>(p)?,
        None => EvalConfig::default(),
    };
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(i) = args.iterations {
        config.iterations = i;
    }
    config.validate()?;
    eprintln!("{}", serde_json::json!({ "config": config }));
    let dataset = load(&args.data)?;
    let run = train_eval_model(&args.maps, &dataset, &config)?;
    write_atomic(&args.out, serde_json::to_string_pretty(&run.report)?.as_bytes())?;
    print!("{}", render_table(std::slice::from_ref(&run.report)));
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> CliResult {
    let config = match &args.config {
        Some(p) => read_json::<TrainConfig>(p)?,
        None => TrainConfig::tiny(),
    };
    let started = std::time::Instant::now();
    let report = gradcheck_model(&config, args.coords, args.eps)?;
    println!(
        "max relative error {:.3e} over {} of {} parameters ({:.2}s)",
        report.max_relative_error,
        report.coordinates,
        report.parameters,
        started.elapsed().as_secs_f64()
    );
    if report.max_relative_error < args.tolerance {
        println!("PASS (< {:e})", args.tolerance);
        Ok(())
    } else {
        Err(format!("gradient check failed: {:.3e} >= {:e}", report.max_relative_error, args.tolerance).into())
    }
}

fn run_report(args: ReportArgs) -> CliResult {
    let reports = args
        .reports
        .iter()
        .map(|p| read_json::<EvalReport>(p))
        .collect::<Result<Vec<_>, _>>()?;
    let merged = merge_reports(&reports);
    print!("{}", render_table(&merged));
    if let Some(out) = &args.out {
        write_atomic(out, serde_json::to_string_pretty(&merged)?.as_bytes())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => run_train(a),
        Command::Maps(a) => run_maps(a),
        Command::Baseline(a) => run_baseline(a),
        Command::Eval(a) => run_eval(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Report(a) => run_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
