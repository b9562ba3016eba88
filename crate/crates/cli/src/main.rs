//! `chord-refine` command-line tool.
//!
//! Exit codes: 0 success, 1 input or validation failure, 2 runtime failure.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};
use serde_json::json;

use chord_refine::beat_align::{build_grid, snap_timeline};
use chord_refine::corpus::{parse_beat_lab, parse_chord_lab, Manifest};
use chord_refine::gateway::HttpTransport;
use chord_refine::parallel;
use chord_refine::refine::{build_reasoner, run_pipeline, Backend, ChordTimeline, PipelineRun, RefinementConfig, StageSet};
use chord_refine::report::build_report;
use chord_refine::synth::{generate_corpus, write_corpus, SynthConfig};
use chord_refine::{evaluate_corpus, evaluate_pair, EvalScores, Execution, Metric};

#[derive(Parser)]
#[command(name = "chord-refine", version, about = "Refine and evaluate chord recognition outputs")]
struct Cli {
    /// Only print errors.
    #[arg(long, global = true, conflicts_with = "verbose")]
    quiet: bool,
    /// Print per-stage details.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse every file named by a manifest and report problems.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Run the refinement pipeline over every song of a manifest.
    Refine {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Score estimates against the manifest's references.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory written by `refine`; without it the full-mix input is
        /// scored.
        #[arg(long)]
        estimates: Option<PathBuf>,
        /// Snapshot to score from `--estimates`.
        #[arg(long, default_value_t = 5)]
        stage: u8,
        /// Write the scores as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Snap one chord lab onto the sixteenth-note grid of a beat lab.
    Align {
        #[arg(long)]
        chords: PathBuf,
        #[arg(long)]
        beats: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output lab; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-stage score table (CSV and JSON) from `refine` outputs.
    Report {
        #[arg(long)]
        manifest: PathBuf,
        /// Where `report.csv` and `report.json` go.
        #[arg(long)]
        out: PathBuf,
        /// Directory written by `refine`; defaults to `--out`.
        #[arg(long)]
        refined: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Write a seeded synthetic corpus with references.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        songs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "synthetic")]
        dataset: String,
    },
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `pipeline.backend`: rulebook or llm.
    #[arg(long)]
    backend: Option<String>,
    /// Overrides `pipeline.stages`, e.g. `1,2,5` or `1-3`.
    #[arg(long)]
    stages: Option<String>,
}

enum CliError {
    Input(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

fn input(e: impl fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet {
        log::LevelFilter::Error
    } else if cli.verbose {
        log::LevelFilter::Debug
    } else {
        log::LevelFilter::Info
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).format_target(false).init();

    let result = match cli.command {
        Command::Validate { manifest } => validate(&manifest),
        Command::Refine {
            manifest,
            out,
            pipeline,
            jobs,
        } => with_jobs(jobs, |exec| refine(&manifest, &out, &pipeline, exec)),
        Command::Evaluate {
            manifest,
            estimates,
            stage,
            out,
            jobs,
        } => with_jobs(jobs, |exec| evaluate(&manifest, estimates.as_deref(), stage, out.as_deref(), exec)),
        Command::Align { chords, beats, config, out } => align(&chords, &beats, config.as_deref(), out.as_deref()),
        Command::Report {
            manifest,
            out,
            refined,
            jobs,
        } => with_jobs(jobs, |exec| report(&manifest, &out, refined.as_deref().unwrap_or(&out), exec)),
        Command::Synth { out, songs, seed, dataset } => synth(&out, songs, seed, &dataset),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.code())
        }
    }
}

/// Runs `f` inside a pool of `jobs` threads.
fn with_jobs(jobs: usize, f: impl FnOnce(Execution) -> Result<(), CliError> + Send) -> Result<(), CliError> {
    if jobs == 0 {
        return Err(input("--jobs must be at least 1"));
    }
    if jobs == 1 {
        return f(Execution::Sequential);
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(runtime)?;
    pool.install(|| f(Execution::Parallel))
}

fn load_manifest(path: &Path) -> Result<Manifest, CliError> {
    Manifest::load(path).map_err(input)
}

fn validate(path: &Path) -> Result<(), CliError> {
    let manifest = load_manifest(path)?;
    let problems = manifest.diagnose();
    for p in &problems {
        println!("{p}");
    }
    if problems.is_empty() {
        info!("{} songs valid", manifest.songs.len());
        Ok(())
    } else {
        Err(CliError::Input(format!("{} problem(s) found", problems.len())))
    }
}

fn load_config(args: &PipelineArgs) -> Result<RefinementConfig, CliError> {
    let mut config = match &args.config {
        Some(p) => RefinementConfig::load(p).map_err(input)?,
        None => RefinementConfig::default(),
    };
    if let Some(b) = &args.backend {
        config.pipeline.backend = b.parse::<Backend>().map_err(input)?;
    }
    if let Some(s) = &args.stages {
        config.pipeline.stages = s.parse::<StageSet>().map_err(input)?;
    }
    Ok(config)
}

fn stage_file(dir: &Path, id: &str, k: usize) -> PathBuf {
    dir.join(format!("{id}.stage{k}.lab"))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

enum SongOutcome {
    Done { run: PipelineRun, stage_failures: Vec<String> },
    Failed(String),
}

fn refine(manifest_path: &Path, out: &Path, args: &PipelineArgs, exec: Execution) -> Result<(), CliError> {
    let manifest = load_manifest(manifest_path)?;
    let config = load_config(args)?;
    let transport = Arc::new(HttpTransport::new(Duration::from_secs_f64(config.llm.gateway.timeout_secs.max(0.001))));
    let reasoner = build_reasoner(&config, transport).map_err(input)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    let backend = match config.pipeline.backend {
        Backend::Rulebook => "rulebook",
        Backend::Llm => "llm",
    };

    let outcomes = parallel::map(&manifest.songs, exec, |entry| {
        let started = Instant::now();
        let outcome = match manifest.load_song(entry) {
            Err(e) => SongOutcome::Failed(e.to_string()),
            Ok(bundle) => match run_pipeline(&bundle, &config, reasoner.as_ref()) {
                Err(e) => SongOutcome::Failed(e.to_string()),
                Ok(run) => {
                    let stage_failures = run
                        .traces
                        .iter()
                        .filter_map(|t| t.failure.as_ref().map(|f| format!("stage {} ({}): {f}", t.stage.number(), t.title)))
                        .collect();
                    SongOutcome::Done { run, stage_failures }
                }
            },
        };
        (started.elapsed(), outcome)
    });

    let mut failures = Vec::new();
    for (entry, (elapsed, outcome)) in manifest.songs.iter().zip(outcomes) {
        match outcome {
            SongOutcome::Failed(reason) => {
                warn!("song={} status=failed reason={reason:?}", entry.id);
                failures.push(json!({"song": entry.id, "error": reason}));
            }
            SongOutcome::Done { run, stage_failures } => {
                for (k, snapshot) in run.snapshots.iter().enumerate() {
                    write(&stage_file(out, &entry.id, k), &snapshot.to_lab())?;
                }
                write(&out.join(format!("{}.trace.json", entry.id)), &run.trace_json(backend))?;
                let changes: usize = run.traces.iter().map(|t| t.diffs.len()).sum();
                if stage_failures.is_empty() {
                    info!("song={} status=ok changes={changes} elapsed_ms={}", entry.id, elapsed.as_millis());
                } else {
                    warn!("song={} status=degraded failures={}", entry.id, stage_failures.len());
                    for f in stage_failures {
                        failures.push(json!({"song": entry.id, "error": f}));
                    }
                }
            }
        }
    }

    let summary = json!({
        "dataset": manifest.dataset,
        "backend": backend,
        "stages": config.pipeline.stages.to_string(),
        "songs": manifest.songs.len(),
        "failures": failures,
    });
    write(&out.join("summary.json"), &serde_json::to_string_pretty(&summary).expect("json"))?;
    if failures.is_empty() {
        info!("refined {} songs into {}", manifest.songs.len(), out.display());
        Ok(())
    } else {
        for f in &failures {
            eprintln!("failure: {}: {}", f["song"].as_str().unwrap_or(""), f["error"].as_str().unwrap_or(""));
        }
        Err(CliError::Input(format!("{} failure(s); see summary.json", failures.len())))
    }
}

fn read_chord_lab(path: &Path) -> Result<ChordTimeline, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    parse_chord_lab(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn evaluate(manifest_path: &Path, estimates: Option<&Path>, stage: u8, out: Option<&Path>, exec: Execution) -> Result<(), CliError> {
    if stage > 5 {
        return Err(input("--stage must be between 0 and 5"));
    }
    let manifest = load_manifest(manifest_path)?;
    let mut pairs = Vec::new();
    for entry in &manifest.songs {
        let bundle = manifest.load_song(entry).map_err(input)?;
        let Some(reference) = bundle.reference else {
            warn!("song={} has no reference; excluded", entry.id);
            continue;
        };
        let estimate = match estimates {
            Some(dir) => read_chord_lab(&stage_file(dir, &entry.id, stage as usize))?,
            None => bundle.acr_full.expect("loaded songs have every track"),
        };
        pairs.push((entry.id.clone(), reference, estimate));
    }
    if pairs.is_empty() {
        return Err(input("no song has a reference"));
    }

    let per_song = parallel::map(&pairs, exec, |(_, r, e)| evaluate_pair(r, e));
    let refs: Vec<(&ChordTimeline, &ChordTimeline)> = pairs.iter().map(|(_, r, e)| (r, e)).collect();
    let corpus = evaluate_corpus(&refs, exec).map_err(runtime)?;

    let pct = |s: Option<f64>| s.map_or_else(|| "-".to_string(), |v| format!("{:.2}", v * 100.0));
    let header: Vec<&str> = Metric::ALL.iter().map(|m| m.name()).collect();
    println!("song,{}", header.join(","));
    let mut songs_json = Vec::new();
    for ((id, _, _), scores) in pairs.iter().zip(&per_song) {
        let cells: Vec<String> = Metric::ALL.iter().map(|&m| pct(scores.score(m))).collect();
        println!("{id},{}", cells.join(","));
        songs_json.push(json!({
            "song": id,
            "scores": percent_map(scores),
        }));
    }
    let cells: Vec<String> = Metric::ALL.iter().map(|&m| pct(corpus.score(m))).collect();
    println!("corpus,{}", cells.join(","));

    if let Some(path) = out {
        let doc = json!({
            "dataset": manifest.dataset,
            "stage": estimates.map(|_| stage),
            "songs": songs_json,
            "corpus": percent_map(&corpus),
        });
        write(path, &serde_json::to_string_pretty(&doc).expect("json"))?;
    }
    Ok(())
}

fn percent_map(scores: &EvalScores) -> serde_json::Value {
    Metric::ALL
        .iter()
        .map(|&m| (m.name().to_string(), json!(scores.score(m).map(|s| s * 100.0))))
        .collect::<serde_json::Map<_, _>>()
        .into()
}

fn align(chords: &Path, beats: &Path, config: Option<&Path>, out: Option<&Path>) -> Result<(), CliError> {
    let config = match config {
        Some(p) => RefinementConfig::load(p).map_err(input)?,
        None => RefinementConfig::default(),
    };
    let timeline = read_chord_lab(chords)?;
    let text = std::fs::read_to_string(beats).map_err(|e| CliError::Input(format!("cannot read {}: {e}", beats.display())))?;
    let beat_timeline = parse_beat_lab(&text).map_err(|e| CliError::Input(format!("{}: {e}", beats.display())))?;
    let grid = build_grid(&beat_timeline).map_err(|e| CliError::Input(format!("{}: {e}", beats.display())))?;
    let (snapped, report) = snap_timeline(&timeline, &grid, &config.beat_align);
    if report.skipped {
        warn!(
            "alignment skipped: {} of {} boundaries exceed the threshold",
            report.over_threshold, report.boundaries
        );
    } else {
        info!(
            "moved {} of {} boundaries (max {:.3}s, mean {:.3}s)",
            report.moved, report.boundaries, report.max_displacement, report.mean_displacement
        );
    }
    match out {
        Some(path) => write(path, &snapped.to_lab()),
        None => {
            print!("{}", snapped.to_lab());
            Ok(())
        }
    }
}

fn report(manifest_path: &Path, out: &Path, refined: &Path, exec: Execution) -> Result<(), CliError> {
    let manifest = load_manifest(manifest_path)?;
    let mut runs = Vec::new();
    for entry in &manifest.songs {
        let bundle = manifest.load_song(entry).map_err(input)?;
        let Some(reference) = bundle.reference else {
            warn!("song={} has no reference; excluded", entry.id);
            continue;
        };
        let mut snapshots = vec![bundle.acr_full.expect("loaded songs have every track")];
        for k in 1..=5 {
            snapshots.push(read_chord_lab(&stage_file(refined, &entry.id, k))?);
        }
        runs.push((
            reference,
            PipelineRun {
                song_id: entry.id.clone(),
                snapshots,
                traces: Vec::new(),
            },
        ));
    }
    if runs.is_empty() {
        return Err(input("no song has a reference"));
    }
    let report = build_report(&manifest.dataset, &runs, exec).map_err(runtime)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    write(&out.join("report.csv"), &report.to_csv())?;
    write(&out.join("report.json"), &report.to_json())?;
    print!("{}", report.to_table());
    Ok(())
}

fn synth(out: &Path, songs: Option<usize>, seed: Option<u64>, dataset: &str) -> Result<(), CliError> {
    let mut config = SynthConfig::default();
    if let Some(n) = songs {
        config.songs = n;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    let corpus = generate_corpus(&config);
    let path = write_corpus(out, dataset, &corpus).map_err(runtime)?;
    info!("wrote {} songs; manifest {}", corpus.len(), path.display());
    Ok(())
}
