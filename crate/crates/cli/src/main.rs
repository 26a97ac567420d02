use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use tafs::analysis::{block_average, write_table, PairMode};
use tafs::harness::plot::{plot_histogram, plot_level_grid, plot_report, plot_surface, write_surface_csv};
use tafs::harness::{
    analyze_episode, backbone_for, evaluate, load_dataset, load_episode, quick_infer, read_soft_map,
    save_episode, synthesize_suite, write_mask, write_soft_map, Predictor, QueryPrediction, RunConfig,
    SynthSpec, TaskSession,
};
use tafs::metrics::{read_records, Counts};
use tafs::segment::{binarize, RefinementDecision};

#[derive(Parser)]
#[command(name = "tafs", version, about = "Test-time adapted few-shot segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment the queries of one episode.
    Run(RunArgs),
    /// Evaluate a predictor over a dataset or a synthetic suite.
    Eval(EvalArgs),
    /// Write a synthetic suite of episodes.
    Synth(SynthArgs),
    /// Embedding similarity table before and after adaptation.
    Analyze(AnalyzeArgs),
    /// Render a report or the maps of a run.
    Plot(PlotArgs),
    /// Metric utilities.
    Metrics {
        #[command(subcommand)]
        command: MetricsCommand,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file with one `key=value` per line.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').with_context(|| format!("expected KEY=VALUE, got `{kv}`"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    episode: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Fit once on the first query and reuse the heads for the rest.
    #[arg(long)]
    quick_infer: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of episode directories.
    #[arg(long, conflicts_with = "synth")]
    dataset: Option<PathBuf>,
    /// Evaluate on this many synthetic episodes instead.
    #[arg(long)]
    synth: Option<usize>,
    #[arg(long, default_value_t = 0)]
    synth_seed: u64,
    #[arg(long, default_value_t = 1.0)]
    separation: f64,
    #[arg(long, default_value_t = 1)]
    shots: usize,
    #[arg(long, conflicts_with_all = ["random", "oracle"])]
    naive: bool,
    #[arg(long, value_name = "P", conflicts_with = "oracle")]
    random: Option<f64>,
    #[arg(long)]
    oracle: bool,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "eval")]
    out: PathBuf,
    /// Also write predicted masks.
    #[arg(long)]
    masks: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    count: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    separation: f64,
    /// Side length in pixels.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    shots: usize,
    #[arg(long, default_value_t = 1)]
    queries: usize,
    #[arg(long, default_value_t = 12.0)]
    noise: f64,
    #[arg(long, default_value_t = 1.0)]
    color_weight: f64,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    episode: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    /// `records.jsonl` from `eval`.
    #[arg(long, conflicts_with = "maps", required_unless_present = "maps")]
    report: Option<PathBuf>,
    /// Output directory of `run`.
    #[arg(long)]
    maps: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum MetricsCommand {
    /// Expected random-predictor mIoU and FB-IoU over a ratio grid.
    Surface {
        /// `.csv` for values, anything else renders a PNG.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        grid: usize,
    },
}

#[derive(Serialize)]
struct QuerySummary {
    query: usize,
    threshold: f64,
    refined: bool,
    decision: Option<RefinementDecision>,
    counts: Option<Counts>,
    fg_iou: Option<f64>,
    loss_trace: Vec<f64>,
    adapters: Option<String>,
    fit_seconds: f64,
    infer_seconds: f64,
}

fn summarize(p: &QueryPrediction, adapters: Option<String>) -> QuerySummary {
    QuerySummary {
        query: p.query,
        threshold: p.threshold,
        refined: p.refined,
        decision: p.decision,
        counts: p.counts,
        fg_iou: p.counts.and_then(|c| c.fg_iou()),
        loss_trace: p.loss_trace.clone(),
        adapters,
        fit_seconds: p.fit_seconds,
        infer_seconds: p.infer_seconds,
    }
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    cfg.quick_infer |= args.quick_infer;
    let episode = load_episode(&args.episode)?;
    let backbone = backbone_for(&cfg)?;
    let session = TaskSession::new(&episode, &cfg, backbone)?;
    for sub in ["masks", "soft", "adapters"] {
        fs::create_dir_all(args.out.join(sub))?;
    }
    let mut predictions = Vec::new();
    let mut summaries = Vec::new();
    if cfg.quick_infer {
        let first = session.prepare_query(&episode.queries[0].image)?;
        let task = session.fit(&first)?;
        let archive = "adapters/adapters.bin".to_string();
        task.stack.save_file(&args.out.join(&archive))?;
        for p in quick_infer(&session, &task, &episode)?.predictions {
            summaries.push(summarize(&p, Some(archive.clone())));
            predictions.push(p);
        }
    } else {
        for (j, query) in episode.queries.iter().enumerate() {
            let prepared = session.prepare_query(&query.image)?;
            let task = session.fit(&prepared)?;
            let archive = format!("adapters/adapters_{j}.bin");
            task.stack.save_file(&args.out.join(&archive))?;
            let mut p = session.infer(&task, j, query, &prepared)?;
            p.fit_seconds = task.fit_seconds;
            summaries.push(summarize(&p, Some(archive)));
            predictions.push(p);
        }
    }
    for p in &predictions {
        let j = p.query;
        write_mask(&args.out.join(format!("masks/pred_{j}.png")), &p.mask)?;
        write_soft_map(&args.out.join(format!("soft/fused_{j}.png")), &p.fused)?;
        for (l, m) in p.per_level.iter().enumerate() {
            write_soft_map(&args.out.join(format!("soft/level{l}_{j}.png")), m)?;
        }
        match p.counts.and_then(|c| c.fg_iou()) {
            Some(iou) => info!("query {j}: fg IoU {iou:.4}, refined {}", p.refined),
            None => info!("query {j}: refined {}", p.refined),
        }
    }
    let file = BufWriter::new(File::create(args.out.join("predictions.json"))?);
    serde_json::to_writer_pretty(file, &summaries)?;
    fs::write(args.out.join("config.txt"), cfg.to_text())?;
    println!("wrote {} predictions to {}", predictions.len(), args.out.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    cfg.shots = args.shots;
    let episodes = match (&args.dataset, args.synth) {
        (Some(root), _) => load_dataset(root, args.shots)?,
        (None, Some(count)) => {
            let spec = SynthSpec { separation: args.separation, shots: args.shots, ..SynthSpec::default() };
            synthesize_suite(count, args.synth_seed, &spec)?
        }
        (None, None) => bail!("either --dataset or --synth is required"),
    };
    let predictor = if args.naive {
        Predictor::Naive
    } else if let Some(p) = args.random {
        Predictor::Random { p }
    } else if args.oracle {
        Predictor::Oracle
    } else {
        Predictor::Pipeline
    };
    let report = evaluate(&episodes, &cfg, predictor)?;
    report.write(&args.out, args.masks)?;
    let s = &report.summary;
    println!(
        "{} episodes, {} queries: mIoU {:.2}  FB-IoU {:.2}  %FG {:.1}  (naive mIoU {:.2}  FB-IoU {:.2})",
        s.episodes,
        s.queries,
        100.0 * s.miou,
        100.0 * s.fbiou,
        s.fg_percent,
        100.0 * report.naive.miou,
        100.0 * report.naive.fbiou
    );
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        width: args.size,
        height: args.size,
        shots: args.shots,
        queries: args.queries,
        separation: args.separation,
        noise: args.noise,
        color_weight: args.color_weight,
        ..SynthSpec::default()
    };
    let suite = synthesize_suite(args.count, args.seed, &spec)?;
    for ep in &suite {
        save_episode(&args.out.join(&ep.id), ep)?;
    }
    println!("wrote {} episodes to {}", suite.len(), args.out.display());
    Ok(())
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let episode = load_episode(&args.episode)?;
    let backbone = backbone_for(&cfg)?;
    let blocks = backbone.spec().blocks.clone();
    let cmp = analyze_episode(&episode, &cfg, backbone, PairMode::Exact)?;
    let before = block_average(&cmp.before, &blocks)?;
    let after = block_average(&cmp.after, &blocks)?;
    match &args.out {
        Some(path) => write_table(BufWriter::new(File::create(path)?), &before, &after, 1)?,
        None => write_table(io::stdout().lock(), &before, &after, 1)?,
    }
    Ok(())
}

fn indexed_files(dir: &Path, prefix: &str) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(j) = name.strip_prefix(prefix).and_then(|r| r.strip_suffix(".png")).and_then(|r| r.parse().ok()) {
            out.push((j, path));
        }
    }
    out.sort();
    Ok(out)
}

fn cmd_plot(args: &PlotArgs) -> Result<()> {
    fs::create_dir_all(&args.out)?;
    if let Some(report) = &args.report {
        let records = read_records(BufReader::new(File::open(report)?))?;
        plot_report(&records, &args.out.join("report.png"))?;
        println!("plotted {} records", records.len());
        return Ok(());
    }
    let soft = args.maps.as_ref().expect("clap enforces --maps").join("soft");
    let fused = indexed_files(&soft, "fused_")?;
    if fused.is_empty() {
        bail!("no fused maps under {}", soft.display());
    }
    for (j, path) in &fused {
        let map = read_soft_map(path)?;
        let mut levels = Vec::new();
        while let Ok(m) = read_soft_map(&soft.join(format!("level{}_{j}.png", levels.len()))) {
            levels.push(m);
        }
        let t = tafs::segment::threshold(&map);
        plot_histogram(&map, t, &args.out.join(format!("hist_{j}.png")))?;
        plot_level_grid(&levels, &map, &binarize(&map), &args.out.join(format!("levels_{j}.png")))?;
    }
    println!("plotted {} queries", fused.len());
    Ok(())
}

fn cmd_metrics(cmd: &MetricsCommand) -> Result<()> {
    match cmd {
        MetricsCommand::Surface { out, grid } => {
            if *grid == 0 {
                bail!("--grid must be positive");
            }
            if out.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
                let mut w = BufWriter::new(File::create(out)?);
                write_surface_csv(*grid, &mut w)?;
                w.flush()?;
            } else {
                plot_surface(*grid, out)?;
            }
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Plot(a) => cmd_plot(a),
        Command::Metrics { command } => cmd_metrics(command),
    }
}
