use std::path::PathBuf;
use std::process::ExitCode;

use anomaly_synth::commands::{
    cmd_build_shapes, cmd_evaluate, cmd_make_phantoms, cmd_make_validation, cmd_score, cmd_synthesize,
};
use anomaly_synth::corruption::{EdgeMode, ShapeMode};
use anomaly_synth::evaluation::{Subset, Task};
use anomaly_synth::{Dims, Error, RunConfig, ValidationFamily};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "anosynth",
    version,
    about = "Synthetic 3D anomalies, validation sets, score fusion and AP evaluation"
)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every random draw of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Output does not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory of the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the random-walk brush shape library.
    BuildShapes {
        #[arg(long)]
        count: Option<usize>,
        /// Cubic canvas edge length.
        #[arg(long)]
        canvas: Option<usize>,
    },
    /// Write corrupted training samples with alpha labels.
    Synthesize {
        /// Samples per source volume.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<EdgeArg>,
        #[arg(long, value_enum)]
        shapes: Option<ShapeArg>,
        #[arg(long)]
        library: Option<PathBuf>,
        /// Source volumes (.rvol).
        sources: Vec<PathBuf>,
    },
    /// Build the multi-family validation set from held-out volumes.
    MakeValidation {
        /// Keep only these families, comma separated.
        #[arg(long, value_delimiter = ',')]
        families: Vec<ValidationFamily>,
        /// Held-out volumes (.rvol).
        held_out: Vec<PathBuf>,
    },
    /// Score validation cases with the gradient baseline or by fusing window scores.
    Score {
        #[arg(long)]
        validation: Option<PathBuf>,
        /// Directory of per-case window score directories.
        #[arg(long)]
        patches: Option<PathBuf>,
    },
    /// Average precision of score maps against validation truth.
    Evaluate {
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
        #[arg(long, value_enum)]
        subset: Option<SubsetArg>,
        #[arg(long, value_delimiter = ',')]
        families: Vec<ValidationFamily>,
        #[arg(long)]
        validation: Option<PathBuf>,
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Write smooth synthetic stand-in volumes.
    MakePhantoms {
        #[arg(long)]
        count: Option<usize>,
        /// Cubic edge length.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Print the effective configuration as TOML.
    PrintConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum EdgeArg {
    Hard,
    Smoothed,
    Mixed,
}

#[derive(Clone, Copy, ValueEnum)]
enum ShapeArg {
    Cuboid,
    Sphere,
    Brush,
    Complex,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Pixel,
    Sample,
}

#[derive(Clone, Copy, ValueEnum)]
enum SubsetArg {
    Baseline,
    Full,
}

fn apply_overrides(cli: &Cli, cfg: &mut RunConfig) {
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli.out.clone();
    let p = &mut cfg.paths;
    match &cli.command {
        Command::BuildShapes { count, canvas } => {
            if let Some(c) = count {
                cfg.shapes.count = *c;
            }
            if let Some(n) = canvas {
                cfg.shapes.canvas = Dims::cube(*n);
            }
            if let Some(o) = out {
                p.library = o;
            }
        }
        Command::Synthesize {
            count,
            mode,
            shapes,
            library,
            sources,
        } => {
            if let Some(c) = count {
                cfg.synthesis.count_per_volume = *c;
            }
            let g = &mut cfg.dataset.generation;
            if let Some(m) = mode {
                g.edges = match m {
                    EdgeArg::Hard => EdgeMode::Hard,
                    EdgeArg::Smoothed => EdgeMode::Smoothed,
                    EdgeArg::Mixed => EdgeMode::Mixed,
                };
            }
            if let Some(s) = shapes {
                g.shapes = match s {
                    ShapeArg::Cuboid => ShapeMode::Cuboid,
                    ShapeArg::Sphere => ShapeMode::Sphere,
                    ShapeArg::Brush => ShapeMode::Brush,
                    ShapeArg::Complex => ShapeMode::Complex,
                };
            }
            if let Some(l) = library {
                p.library = l.clone();
            }
            if !sources.is_empty() {
                p.sources = sources.clone();
            }
            if let Some(o) = out {
                p.dataset = o;
            }
        }
        Command::MakeValidation { families, held_out } => {
            if !families.is_empty() {
                cfg.validation.counts = cfg.validation.counts.only(families);
            }
            if !held_out.is_empty() {
                p.held_out = held_out.clone();
            }
            if let Some(o) = out {
                p.validation = o;
            }
        }
        Command::Score { validation, patches } => {
            if let Some(v) = validation {
                p.validation = v.clone();
            }
            if let Some(d) = patches {
                p.patches = Some(d.clone());
            }
            if let Some(o) = out {
                p.scores = o;
            }
        }
        Command::Evaluate {
            task,
            subset,
            families,
            validation,
            scores,
        } => {
            let e = &mut cfg.evaluation;
            if let Some(t) = task {
                e.task = match t {
                    TaskArg::Pixel => Task::Pixel,
                    TaskArg::Sample => Task::Sample,
                };
            }
            if let Some(s) = subset {
                e.subset = match s {
                    SubsetArg::Baseline => Subset::Baseline,
                    SubsetArg::Full => Subset::Full,
                };
            }
            if !families.is_empty() {
                e.families = families.clone();
            }
            if let Some(v) = validation {
                p.validation = v.clone();
            }
            if let Some(s) = scores {
                p.scores = s.clone();
            }
            if let Some(o) = out {
                p.report = o;
            }
        }
        Command::MakePhantoms { count, size } => {
            if let Some(c) = count {
                cfg.phantoms.count = *c;
            }
            if let Some(n) = size {
                cfg.phantoms.spec.dims = Dims::cube(*n);
            }
            if let Some(o) = out {
                p.phantoms = o;
            }
        }
        Command::PrintConfig => {}
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    apply_overrides(cli, &mut cfg);
    cfg.validate()?;

    match &cli.command {
        Command::BuildShapes { .. } => {
            let summary = cmd_build_shapes(&cfg)?;
            print!("{summary}");
            println!("library written to {}", cfg.paths.library.display());
        }
        Command::Synthesize { .. } => {
            let report = cmd_synthesize(&cfg)?;
            println!(
                "{} samples written to {}",
                report.manifest.len(),
                cfg.paths.dataset.display()
            );
            if !report.errors.is_empty() {
                for e in &report.errors {
                    eprintln!("error: {}: {}", e.item, e.message);
                }
                return Err(Error::Generation(format!("{} items failed", report.errors.len())));
            }
        }
        Command::MakeValidation { .. } => {
            let entries = cmd_make_validation(&cfg)?;
            for f in ValidationFamily::ALL {
                let n = entries.iter().filter(|e| e.family == f).count();
                if n > 0 {
                    println!("{f:<24} {n}");
                }
            }
            println!("{} cases written to {}", entries.len(), cfg.paths.validation.display());
        }
        Command::Score { .. } => {
            let s = cmd_score(&cfg)?;
            let how = if s.fused {
                "fused window scores"
            } else {
                "gradient baseline"
            };
            println!(
                "{} score maps ({how}) written to {}",
                s.cases,
                cfg.paths.scores.display()
            );
        }
        Command::Evaluate { .. } => {
            let r = cmd_evaluate(&cfg)?;
            println!("task {:?}, {} cases, AP {:.4}", r.task, r.n_cases, r.ap_overall);
            for (family, ap) in &r.ap_by_family {
                let n = r.cases_by_family.get(family).copied().unwrap_or(0);
                match ap {
                    Some(ap) => println!("  {family:<24} n={n:<4} AP {ap:.4}"),
                    None => println!("  {family:<24} n={n:<4} AP n/a"),
                }
            }
        }
        Command::MakePhantoms { .. } => {
            let paths = cmd_make_phantoms(&cfg)?;
            println!("{} phantoms written to {}", paths.len(), cfg.paths.phantoms.display());
        }
        Command::PrintConfig => print!("{}", cfg.to_toml_string()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.workers {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| run(&cli)),
            Err(e) => Err(Error::Invalid {
                field: "workers".into(),
                message: e.to_string(),
            }),
        },
        None => run(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
