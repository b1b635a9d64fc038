use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use diaper_core::bench::{bench_decoders, timings_csv, BenchConfig};
use diaper_core::eda::{eend_eda_layout, EdaConfig};
use diaper_core::frame_encoder::{read_features, BASE_PERIOD_S};
use diaper_core::inference::diarize;
use diaper_core::kv::KvMap;
use diaper_core::model::{count_params, load_checkpoint, load_checkpoint_for};
use diaper_core::rttm::{parse_rttm, write_rttm};
use diaper_core::scoring::{der_csv, score_all, vad_osd_pr, CountConfusion, DerReport};
use diaper_core::simdata::{counting_set, read_dataset, recording_seed, simulate_recording, write_dataset, DatasetEntry};
use diaper_core::trainer::{train, Mode, TrainConfig, TrainSample};
use diaper_core::{DiaPer, Error, InferOptions, ModelConfig, ScConfig, SegmentList};

#[derive(Parser)]
#[command(name = "diaper", version, about = "Speaker diarization with Perceiver-based attractors")]
struct Cli {
    /// Seed for every random choice; overrides seeds in config files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-recording (or per-sample) work.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    jobs: u64,
    /// Log progress to standard error.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a simulated-conversation dataset.
    Simulate(SimulateArgs),
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Continue training from a checkpoint with a fresh schedule.
    Adapt(TrainArgs),
    /// Continue training from a checkpoint at a fixed learning rate.
    Finetune(TrainArgs),
    /// Diarize recordings and write RTTM.
    Infer(InferArgs),
    /// Score hypothesis RTTM against a reference.
    Score(ScoreArgs),
    /// Print the parameter count of a configuration.
    CountParams(CountArgs),
    /// Time the Perceiver and LSTM attractor decoders over recording length.
    BenchDecoder(BenchArgs),
    /// Speaker-count confusion matrix of a model on a dataset.
    Confusion(ConfusionArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value = "sim")]
    prefix: String,
    #[arg(long, default_value_t = 2)]
    min_speakers: usize,
    #[arg(long, default_value_t = 2)]
    max_speakers: usize,
    /// Recording length in seconds.
    #[arg(long, default_value_t = 60.0)]
    duration: f64,
    #[arg(long, default_value_t = 1.0)]
    pause_mean: f64,
    #[arg(long, default_value_t = 0.2)]
    overlap_prob: f64,
    #[arg(long, default_value_t = 3.0)]
    turn_mean: f64,
    #[arg(long, default_value_t = 0.1)]
    noise_std: f64,
    /// Instead of `--count` recordings, make this many for every speaker
    /// count from 1 to `--max-speakers`.
    #[arg(long)]
    per_count: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest written by `simulate`.
    #[arg(long)]
    data: PathBuf,
    /// key = value file with model and training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting checkpoint (required for adapt and finetune).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Directory for checkpoints and metrics.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest; every recording in it is diarized.
    #[arg(long, conflicts_with = "features")]
    data: Option<PathBuf>,
    /// A single feature file.
    #[arg(long, required_unless_present = "data")]
    features: Option<PathBuf>,
    /// Recording id for `--features` (defaults to the file stem).
    #[arg(long)]
    id: Option<String>,
    /// Output RTTM file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    subsample: usize,
    /// Scoring collar the output is meant for; median filtering is applied
    /// only when it is positive.
    #[arg(long, default_value_t = 0.25)]
    collar: f64,
    #[arg(long, default_value_t = 0.5)]
    act_thresh: f64,
    #[arg(long, default_value_t = 0.5)]
    exist_thresh: f64,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long, default_value_t = 0.25)]
    collar: f64,
    /// Also write per-recording results as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Also report frame-level VAD and OSD precision and recall.
    #[arg(long)]
    vad_osd: bool,
}

#[derive(Args)]
struct CountArgs {
    /// key = value model configuration; defaults to the reference model.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also count an EEND-EDA model with the same encoder.
    #[arg(long)]
    eda: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated recording lengths in minutes.
    #[arg(long, value_delimiter = ',', default_value = "1,10,60")]
    minutes: Vec<f64>,
    /// Minimum timed runs per length; the fastest is reported.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Keep repeating short lengths until each decoder has run this long.
    #[arg(long, default_value_t = 2000.0)]
    min_total_ms: f64,
    #[arg(long, default_value_t = 128)]
    model_dim: usize,
    #[arg(long, default_value_t = 256)]
    eda_hidden: usize,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConfusionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest; without it a counting set is simulated.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    max_speakers: usize,
    #[arg(long, default_value_t = 10)]
    per_count: usize,
    #[arg(long, default_value_t = 10)]
    subsample: usize,
    #[arg(long, default_value_t = 0.5)]
    exist_thresh: f64,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn write_out(path: Option<&Path>, text: &str) -> Result<(), Error> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn pool(jobs: u64) -> Result<rayon::ThreadPool, Error> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs as usize)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} worker threads: {e}")))
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> Result<(), Error> {
    let cfg = ScConfig {
        min_speakers: a.min_speakers,
        max_speakers: a.max_speakers,
        duration_s: a.duration,
        pause_mean_s: a.pause_mean,
        overlap_prob: a.overlap_prob,
        turn_mean_s: a.turn_mean,
        noise_std: a.noise_std,
        seed: cli.seed.unwrap_or(0),
        ..ScConfig::default()
    };
    cfg.validate()?;
    let recordings = match a.per_count {
        Some(n) => counting_set(&cfg, a.max_speakers, n)?,
        None => pool(cli.jobs)?.install(|| {
            (0..a.count)
                .into_par_iter()
                .map(|i| simulate_recording(&cfg, &format!("{}{i:04}", a.prefix), recording_seed(cfg.seed, i)))
                .collect::<Result<Vec<_>, _>>()
        })?,
    };
    let entries: Vec<DatasetEntry> = recordings.iter().map(DatasetEntry::from).collect();
    let manifest = write_dataset(&a.out, &entries)?;
    println!("{} recordings, manifest {}", entries.len(), manifest.display());
    Ok(())
}

fn run_training(cli: &Cli, a: &TrainArgs, mode: Mode) -> Result<(), Error> {
    let mut kv = match &a.config {
        Some(p) => KvMap::read(p)?,
        None => KvMap::default(),
    };
    let mut tcfg = TrainConfig::default();
    tcfg.update_from(&mut kv)?;
    let (mut mcfg, init_path) = match (&a.init, mode) {
        (Some(p), _) => (load_checkpoint(p)?.config, Some(p)),
        (None, Mode::Train) => (ModelConfig::default(), None),
        (None, _) => return Err(Error::Usage("--init is required for adapt and finetune".into())),
    };
    mcfg.update_from(&mut kv)?;
    kv.finish()?;
    if let Some(seed) = cli.seed {
        tcfg.seed = seed;
        mcfg.seed = seed;
    }
    if let Some(e) = a.epochs {
        tcfg.epochs = e;
    }
    let model = DiaPer::new(mcfg.clone())?;
    let params = match init_path {
        Some(p) => load_checkpoint_for(p, &mcfg)?.params,
        None => model.init_params(),
    };
    let data = read_dataset(&a.data)?
        .iter()
        .map(|e| TrainSample::from_entry(e, tcfg.subsample))
        .collect::<Result<Vec<_>, _>>()?;
    let outcome = train(&model, params, &data, &tcfg, mode, cli.jobs as usize, Some(&a.out))?;
    if let Some(last) = outcome.history.last() {
        println!("{} updates, final loss {:.4}", last.step, last.total);
    }
    for p in outcome.checkpoints.iter().chain(&outcome.averaged) {
        println!("{}", p.display());
    }
    Ok(())
}

fn infer(cli: &Cli, a: &InferArgs) -> Result<(), Error> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let model = DiaPer::new(ckpt.config)?;
    let opts = InferOptions {
        subsample: a.subsample,
        act_thresh: a.act_thresh,
        exist_thresh: a.exist_thresh,
        ..InferOptions::for_collar(a.collar)
    };
    let inputs: Vec<(String, diaper_core::Tensor)> = match (&a.data, &a.features) {
        (Some(m), _) => read_dataset(m)?.into_iter().map(|e| (e.id, e.features)).collect(),
        (None, Some(f)) => {
            let id = a
                .id
                .clone()
                .or_else(|| f.file_stem().map(|s| s.to_string_lossy().into_owned()))
                .unwrap_or_else(|| "rec".into());
            vec![(id, read_features(f)?)]
        }
        (None, None) => return Err(Error::Usage("give --data or --features".into())),
    };
    let lists = pool(cli.jobs)?.install(|| {
        inputs
            .par_iter()
            .map(|(id, x)| diarize(&model, &ckpt.params, x, id, &opts).map(|d| d.segments))
            .collect::<Result<Vec<SegmentList>, _>>()
    })?;
    write_rttm(&a.out, &lists.iter().collect::<Vec<_>>())?;
    let segments: usize = lists.iter().map(|l| l.segments.len()).sum();
    println!("{} recordings, {segments} segments, {}", lists.len(), a.out.display());
    Ok(())
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn score(a: &ScoreArgs) -> Result<(), Error> {
    let reference = parse_rttm(&a.reference)?;
    let hypothesis = parse_rttm(&a.hyp)?;
    let rows = score_all(&reference, &hypothesis, a.collar)?;
    println!("{:<24} {:>8} {:>8} {:>8} {:>8}", "recording", "DER", "miss", "FA", "conf");
    for (id, r) in &rows {
        println!("{id:<24} {:>8} {:>8} {:>8} {:>8}", pct(r.der), pct(r.miss), pct(r.fa), pct(r.confusion));
    }
    let all = DerReport::aggregate(&rows.iter().map(|(_, r)| r.clone()).collect::<Vec<_>>());
    println!(
        "DER {} (miss {}, FA {}, confusion {}) over {:.2} s of reference speech, collar {} s",
        pct(all.der),
        pct(all.miss),
        pct(all.fa),
        pct(all.confusion),
        all.total_ref_speech_s,
        a.collar
    );
    if all.empty_reference {
        eprintln!("warning: no scored reference speech");
    }
    if a.vad_osd {
        let empty = SegmentList::default();
        for (id, r) in &reference {
            let s = vad_osd_pr(r, hypothesis.get(id).unwrap_or(&empty), BASE_PERIOD_S);
            println!(
                "{id}: VAD P {:.4} R {:.4}  OSD P {:.4} R {:.4}",
                s.vad.precision, s.vad.recall, s.osd.precision, s.osd.recall
            );
        }
    }
    if let Some(p) = &a.csv {
        write_out(Some(p), &der_csv(&rows))?;
    }
    Ok(())
}

fn count(a: &CountArgs) -> Result<(), Error> {
    let cfg = match &a.config {
        Some(p) => {
            let mut kv = KvMap::read(p)?;
            let mut cfg = ModelConfig::default();
            cfg.update_from(&mut kv)?;
            kv.finish()?;
            cfg
        }
        None => ModelConfig::default(),
    };
    let count = count_params(&cfg)?;
    for (name, n) in &count.breakdown {
        println!("{name:<24} {n:>10}");
    }
    println!("{:<24} {:>10}  ({:.2}M)", "total", count.total, count.total as f64 / 1e6);
    if a.eda {
        let (layout, _) = eend_eda_layout(&cfg.encoder, cfg.feature_dim, &EdaConfig::default())?;
        let n = layout.num_scalars();
        println!("{:<24} {:>10}  ({:.2}M)", "eend-eda total", n, n as f64 / 1e6);
    }
    Ok(())
}

fn bench(cli: &Cli, a: &BenchArgs) -> Result<(), Error> {
    let defaults = BenchConfig::default();
    let cfg = BenchConfig {
        model_dim: a.model_dim,
        eda: EdaConfig {
            hidden_dim: a.eda_hidden,
            ..defaults.eda.clone()
        },
        repeats: a.repeats,
        min_total_ms: a.min_total_ms,
        seed: cli.seed.unwrap_or(0),
        ..defaults
    };
    let rows = bench_decoders(&a.minutes, &cfg)?;
    write_out(a.out.as_deref(), &timings_csv(&rows))
}

fn confusion(cli: &Cli, a: &ConfusionArgs) -> Result<(), Error> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let model = DiaPer::new(ckpt.config)?;
    let entries: Vec<DatasetEntry> = match &a.data {
        Some(m) => read_dataset(m)?,
        None => {
            let base = ScConfig {
                seed: cli.seed.unwrap_or(0),
                ..ScConfig::default()
            };
            counting_set(&base, a.max_speakers, a.per_count)?
                .iter()
                .map(DatasetEntry::from)
                .collect()
        }
    };
    let opts = InferOptions {
        subsample: a.subsample,
        exist_thresh: a.exist_thresh,
        ..InferOptions::default()
    };
    let counts = pool(cli.jobs)?.install(|| {
        entries
            .par_iter()
            .map(|e| {
                let d = diarize(&model, &ckpt.params, &e.features, &e.id, &opts)?;
                Ok((e.labels.num_speakers(), d.activity.num_speakers()))
            })
            .collect::<Result<Vec<_>, Error>>()
    })?;
    let mut matrix = CountConfusion::new();
    for (r, p) in counts {
        matrix.add(r, p);
    }
    log::info!(
        "counting accuracy {:.3}; diagonal-dominant rows {:?}",
        matrix.accuracy(),
        matrix.diagonal_dominant_rows()
    );
    write_out(a.out.as_deref(), &matrix.to_csv())
}

fn run(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Simulate(a) => simulate(cli, a),
        Command::Train(a) => run_training(cli, a, Mode::Train),
        Command::Adapt(a) => run_training(cli, a, Mode::Adapt),
        Command::Finetune(a) => run_training(cli, a, Mode::Finetune),
        Command::Infer(a) => infer(cli, a),
        Command::Score(a) => score(a),
        Command::CountParams(a) => count(a),
        Command::BenchDecoder(a) => bench(cli, a),
        Command::Confusion(a) => confusion(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
