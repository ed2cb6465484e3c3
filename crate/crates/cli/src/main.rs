use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use geomatch::assignment::Selection;
use geomatch::cfi::AttentionKind;
use geomatch::dataset::SceneKind;
use geomatch::pipeline::CovisibleSource;
use geomatch::synthscene::ScaleBucket;
use geomatch_cli::commands::{cmd_eval, cmd_gen, cmd_match, cmd_refine_external};
use geomatch_cli::selftest::{format_checks, run_checks};
use geomatch_cli::{CliError, CliResult, RunConfig};

#[derive(Parser)]
#[command(name = "geomatch", version, about = "Geometry-aware local feature matching on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic pair dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        gen: GenFlags,
    },
    /// Run the matching pipeline over a dataset.
    Match {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        matching: MatchFlags,
    },
    /// Refine matches proposed by an external score matrix.
    RefineExternal {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        /// Container with an `N_A × N_B` tensor named `scores`.
        #[arg(long)]
        scores: PathBuf,
        /// Container with the fine descriptor grid of A (`desc`, H×W×C).
        #[arg(long)]
        fine_a: PathBuf,
        #[arg(long)]
        fine_b: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long)]
        heatmap_temperature: Option<f64>,
    },
    /// Evaluate match files against dataset ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Directory holding `<pair>/matches.csv`.
        #[arg(long)]
        matches: PathBuf,
        #[command(flatten)]
        ransac: RansacFlags,
    },
    /// Run invariant checks on built-in fixtures.
    Selftest,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,
    /// Output directory (GEOMATCH_OUT takes precedence).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct ModelFlags {
    /// Weight container; without it the weights are seeded from --seed.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, value_enum)]
    attention: Option<Attention>,
}

#[derive(Args)]
struct MatchFlags {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    match_threshold: Option<f64>,
    #[arg(long)]
    covisible_threshold: Option<f64>,
    /// Similarity temperature r.
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    heatmap_temperature: Option<f64>,
    #[arg(long, value_enum)]
    covisible: Option<Covisible>,
    #[arg(long, value_enum)]
    selection: Option<SelectionFlag>,
    /// Stop after patch-level matching.
    #[arg(long)]
    no_refine: bool,
}

#[derive(Args)]
struct GenFlags {
    #[arg(long)]
    pairs_per_bucket: Option<usize>,
    /// Comma-separated buckets: 1-2, 2-3, 3-4, 4-inf.
    #[arg(long, value_delimiter = ',')]
    buckets: Vec<String>,
    #[arg(long, value_enum)]
    kind: Option<Kind>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    max_rotation: Option<f64>,
    #[arg(long)]
    max_translation: Option<f64>,
}

#[derive(Args)]
struct RansacFlags {
    #[arg(long)]
    ransac_iterations: Option<usize>,
    #[arg(long)]
    homography_threshold: Option<f64>,
    #[arg(long)]
    epipolar_threshold: Option<f64>,
    #[arg(long)]
    ransac_seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Attention {
    Linear,
    Softmax,
}

#[derive(Clone, Copy, ValueEnum)]
enum Covisible {
    Predicted,
    Gt,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectionFlag {
    Argmax,
    AllAbove,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Planar,
    Posed,
}

fn parse_bucket(s: &str) -> CliResult<ScaleBucket> {
    let label = match s {
        "1-2" => "[1,2)",
        "2-3" => "[2,3)",
        "3-4" => "[3,4)",
        "4-inf" => "[4,inf)",
        other => other,
    };
    ScaleBucket::parse(label).ok_or_else(|| CliError::Config(format!("unknown scale bucket {s}")))
}

fn base_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if common.out.is_some() {
        cfg.out = common.out.clone();
    }
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn apply_model(cfg: &mut RunConfig, model: &ModelFlags) {
    if model.weights.is_some() {
        cfg.weights = model.weights.clone();
    }
    if let Some(a) = model.attention {
        cfg.attention = match a {
            Attention::Linear => AttentionKind::Linear,
            Attention::Softmax => AttentionKind::Softmax,
        };
    }
}

fn apply_match(cfg: &mut RunConfig, m: &MatchFlags) {
    let c = &mut cfg.matching;
    if m.dataset.is_some() {
        cfg.dataset = m.dataset.clone();
    }
    if let Some(v) = m.match_threshold {
        c.match_threshold = v;
    }
    if let Some(v) = m.covisible_threshold {
        c.covisible_threshold = v;
    }
    if let Some(v) = m.temperature {
        c.temperature = v;
    }
    if m.heatmap_temperature.is_some() {
        c.refine_config.temperature = m.heatmap_temperature;
    }
    if let Some(v) = m.covisible {
        c.covisible = match v {
            Covisible::Predicted => CovisibleSource::Predicted,
            Covisible::Gt => CovisibleSource::GroundTruth,
            Covisible::Off => CovisibleSource::Off,
        };
    }
    if let Some(v) = m.selection {
        c.selection = match v {
            SelectionFlag::Argmax => Selection::Argmax,
            SelectionFlag::AllAbove => Selection::AllAbove,
        };
    }
    if m.no_refine {
        c.refine = false;
    }
}

fn apply_gen(cfg: &mut RunConfig, g: &GenFlags) -> CliResult<()> {
    let gen = &mut cfg.generate;
    if let Some(v) = g.pairs_per_bucket {
        gen.pairs_per_bucket = v;
    }
    if !g.buckets.is_empty() {
        gen.buckets = g.buckets.iter().map(|b| parse_bucket(b)).collect::<CliResult<_>>()?;
    }
    if let Some(k) = g.kind {
        gen.kind = match k {
            Kind::Planar => SceneKind::Planar,
            Kind::Posed => SceneKind::Posed,
        };
    }
    if let Some(v) = g.noise {
        gen.noise_sigma = v;
    }
    if let Some(v) = g.max_rotation {
        gen.max_rotation_deg = v;
    }
    if let Some(v) = g.max_translation {
        gen.max_translation = v;
    }
    Ok(())
}

fn apply_ransac(cfg: &mut RunConfig, r: &RansacFlags) {
    let c = &mut cfg.ransac;
    if let Some(v) = r.ransac_iterations {
        c.iterations = v;
    }
    if let Some(v) = r.homography_threshold {
        c.homography_threshold = v;
    }
    if let Some(v) = r.epipolar_threshold {
        c.epipolar_threshold = v;
    }
    if let Some(v) = r.ransac_seed {
        c.seed = v;
    }
}

/// Prints the configuration instead of running when requested.
fn printed(common: &Common, cfg: &RunConfig) -> CliResult<bool> {
    if common.print_config {
        cfg.validate()?;
        println!("{}", cfg.to_json());
    }
    Ok(common.print_config)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Gen { common, gen } => {
            let mut cfg = base_config(&common)?;
            apply_gen(&mut cfg, &gen)?;
            if printed(&common, &cfg)? {
                return Ok(());
            }
            let dirs = cmd_gen(&cfg)?;
            println!("generated {} pairs", dirs.len());
        }
        Command::Match { common, model, matching } => {
            let mut cfg = base_config(&common)?;
            apply_model(&mut cfg, &model);
            apply_match(&mut cfg, &matching);
            if printed(&common, &cfg)? {
                return Ok(());
            }
            let summary = cmd_match(&cfg)?;
            println!("matched {} pairs", summary.pairs.len());
        }
        Command::RefineExternal { common, model, scores, fine_a, fine_b, threshold, heatmap_temperature } => {
            let mut cfg = base_config(&common)?;
            apply_model(&mut cfg, &model);
            if heatmap_temperature.is_some() {
                cfg.matching.refine_config.temperature = heatmap_temperature;
            }
            if printed(&common, &cfg)? {
                return Ok(());
            }
            let out = cfg.output_dir()?.join("refined.csv");
            let n = cmd_refine_external(&cfg, &scores, &fine_a, &fine_b, threshold, &out)?;
            println!("refined {n} matches");
        }
        Command::Eval { common, dataset, matches, ransac } => {
            let mut cfg = base_config(&common)?;
            if dataset.is_some() {
                cfg.dataset = dataset;
            }
            apply_ransac(&mut cfg, &ransac);
            if printed(&common, &cfg)? {
                return Ok(());
            }
            let report = cmd_eval(&cfg, &matches)?;
            println!("evaluated {} pairs", report.records.len());
        }
        Command::Selftest => {
            let checks = run_checks();
            print!("{}", format_checks(&checks));
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(CliError::Selftest { failed, total: checks.len() });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::Config(first.to_string()).line());
            return ExitCode::from(2);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit_code()
        }
    }
}
