use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ood_lab::experiment::{
    analyze, bound_curve, bound_curve_csv, calibrate_rows, emit_plotdata, load_models, log_grid, measure_shift,
    results_from_csv, results_to_csv, run_experiment, train_models, w1_csv, write_analysis, write_artifacts,
    write_datasets, write_models, ArtifactWriter, ExperimentConfig, ExperimentKind, TheoryConfig,
};
use ood_lab::gevrey::BoundInputs;
use ood_lab::{Error, Result};

#[derive(Parser)]
#[command(name = "ood-lab", version, about = "Transformer generalization under structured distribution shift")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config; missing fields take the experiment's preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sets the root, model-init, and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (defaults to the config's out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// meancalc | permutation | scaling
    #[arg(long)]
    experiment: Option<String>,
    /// Dotted KEY=VALUE config override; VALUE is parsed as JSON when possible.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Dump the experiment's datasets as JSON lines.
    GenData(Common),
    /// Train the experiment's models and write checkpoints and loss curves.
    Train(Common),
    /// Evaluate checkpoints from a previous `train` run, measure shifts, calibrate.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory holding the checkpoints (defaults to the output directory).
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Exact and closed-form Wasserstein-1 shift sizes for the sweep.
    W1(Common),
    /// Print the three-term bound over a log-spaced grid of shift sizes.
    Bound(BoundArgs),
    /// Fit theory curves to the OOD rows of a results table.
    Calibrate {
        /// results.csv from `eval` or `experiment`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = TheoryConfig::default().s)]
        s: f64,
        #[arg(long, default_value_t = TheoryConfig::default().c_exp)]
        c_exp: f64,
    },
    /// Train, evaluate, measure, calibrate, and write every artifact.
    Experiment(Common),
    /// Write the figure-analog CSV for a results table.
    EmitPlotdata {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct BoundArgs {
    #[arg(long, default_value_t = 1.0)]
    a: f64,
    #[arg(long, default_value_t = 1.0)]
    c_exp: f64,
    #[arg(long, default_value_t = 2.0)]
    s: f64,
    #[arg(long, default_value_t = 0.0)]
    eps: f64,
    #[arg(long, default_value_t = 0.0)]
    lip: f64,
    #[arg(long, default_value_t = 1e-3)]
    d_min: f64,
    #[arg(long, default_value_t = 10.0)]
    d_max: f64,
    #[arg(long, default_value_t = 50)]
    n_points: usize,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn resolve(c: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let doc = match &c.config {
        Some(p) => Some(serde_json::from_str(&fs::read_to_string(p)?)?),
        None => None,
    };
    let kind = c.experiment.as_deref().map(str::parse::<ExperimentKind>).transpose()?;
    let mut cfg = ExperimentConfig::resolve(doc, kind, c.seed, &c.overrides)?;
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    let dir = cfg.out_dir.clone();
    Ok((cfg, dir))
}

fn writer(cfg: &ExperimentConfig, dir: &Path) -> Result<ArtifactWriter> {
    let mut w = ArtifactWriter::new(dir)?;
    w.write("config.json", (serde_json::to_string_pretty(cfg)? + "\n").as_bytes())?;
    Ok(w)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(c) => {
            let (cfg, dir) = resolve(&c).map_err(|e| e.at("config"))?;
            let mut w = writer(&cfg, &dir)?;
            write_datasets(&cfg, &mut w).map_err(|e| e.at("gen-data"))?;
            w.finish(&cfg)?;
            println!("datasets written to {}", dir.display());
        }
        Command::Train(c) => {
            let (cfg, dir) = resolve(&c).map_err(|e| e.at("config"))?;
            let models = train_models(&cfg).map_err(|e| e.at("train"))?;
            let mut w = writer(&cfg, &dir)?;
            write_models(&mut w, &models)?;
            w.finish(&cfg)?;
            for m in &models {
                println!("{}: final loss {:.6}", m.name, m.report.curve.last().copied().unwrap_or(f64::NAN));
            }
        }
        Command::Eval { common, checkpoints } => {
            let (cfg, dir) = resolve(&common).map_err(|e| e.at("config"))?;
            let models = load_models(&cfg, checkpoints.as_deref().unwrap_or(&dir)).map_err(|e| e.at("load"))?;
            let out = analyze(&cfg, models)?;
            let mut w = writer(&cfg, &dir)?;
            write_analysis(&mut w, &out)?;
            w.finish(&cfg)?;
            print!("{}", results_to_csv(&out.rows)?);
        }
        Command::W1(c) => {
            let (cfg, dir) = resolve(&c).map_err(|e| e.at("config"))?;
            let shifts = measure_shift(&cfg).map_err(|e| e.at("w1"))?;
            let text = w1_csv(&shifts)?;
            let mut w = writer(&cfg, &dir)?;
            w.write("w1.csv", text.as_bytes())?;
            w.finish(&cfg)?;
            print!("{text}");
        }
        Command::Bound(b) => {
            let base = BoundInputs { a: b.a, c_exp: b.c_exp, s: b.s, eps: b.eps, lip: b.lip, d: b.d_min };
            let text = bound_curve_csv(&bound_curve(&base, &log_grid(b.d_min, b.d_max, b.n_points)?)?)?;
            match b.out {
                Some(p) => fs::write(p, text)?,
                None => print!("{text}"),
            }
        }
        Command::Calibrate { input, out, s, c_exp } => {
            let mut rows = results_from_csv(&fs::read_to_string(input)?).map_err(|e| e.at("load"))?;
            let cals = calibrate_rows(&mut rows, &TheoryConfig { s, c_exp }).map_err(|e| e.at("calibrate"))?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("results.csv"), results_to_csv(&rows)?)?;
            fs::write(out.join("calibration.json"), serde_json::to_string_pretty(&cals)? + "\n")?;
            for c in &cals {
                println!("{}: A = {:e} (binding point {})", c.series, c.calibration.a, c.calibration.binding);
            }
        }
        Command::Experiment(c) => {
            let (cfg, dir) = resolve(&c).map_err(|e| e.at("config"))?;
            let out = run_experiment(&cfg)?;
            write_artifacts(&out, &dir)?;
            print!("{}", results_to_csv(&out.rows)?);
        }
        Command::EmitPlotdata { input, out } => {
            let rows = results_from_csv(&fs::read_to_string(input)?).map_err(|e| e.at("load"))?;
            let (name, text) = emit_plotdata(&rows).map_err(|e| e.at("emit-plotdata"))?;
            fs::create_dir_all(&out)?;
            fs::write(out.join(&name), text)?;
            println!("{}", out.join(name).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_byte(&e))
        }
    }
}

fn exit_byte(e: &Error) -> u8 {
    u8::try_from(e.exit_code()).unwrap_or(1)
}
