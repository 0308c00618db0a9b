//! `unienc` command-line driver.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use unienc::data::{
    detokenize, load_manifest, load_vocab, read_manifest, synth_generate, write_dataset, DataError,
    SynthTaskSpec, Utterance, Vocab,
};
use unienc::decoding::{
    decode_greedy_ctc, decode_utterance, DecodeError, DecodeOptions, DecodeSchedule, DecodeStatus,
};
use unienc::eval::{wer, EvalError};
use unienc::model::{Model, ModelError};
use unienc::numerics::NumericsError;
use unienc::training::{
    gradcheck_config, gradient_check, load_checkpoint, save_checkpoint, Trainer, TrainingError,
};

use unienc::config::{schema_help, ConfigError, RunConfig};

/// Failure classes, one per exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn message(&self) -> String {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m.clone(),
        }
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.0)
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Usage(e.to_string()),
            ModelError::Numerics(
                NumericsError::NonFinite(_) | NumericsError::NonFiniteProbe { .. },
            ) => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DecodeError> for CliError {
    fn from(e: DecodeError) -> Self {
        match e {
            DecodeError::Schedule(_) => CliError::Usage(e.to_string()),
            DecodeError::Model(m) => m.into(),
        }
    }
}

impl From<TrainingError> for CliError {
    fn from(e: TrainingError) -> Self {
        match e {
            TrainingError::Model(m) => m.into(),
            TrainingError::Decode(d) => d.into(),
            TrainingError::Config(_) => CliError::Usage(e.to_string()),
            TrainingError::Diverged { .. } | TrainingError::Numerics(_) => {
                CliError::Numerical(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Parser)]
#[command(
    name = "unienc",
    version,
    about = "Two-pass encoder-only speech recognizer on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with gold alignments.
    Synth(SynthArgs),
    /// Train a model and write logs and checkpoints.
    #[command(after_help = schema_help())]
    Train(TrainArgs),
    /// Decode a manifest with a trained checkpoint.
    Decode(DecodeArgs),
    /// Score a hypothesis file against a reference manifest.
    Eval(EvalArgs),
    /// Compare backpropagated gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    num_utts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Task override such as `noise_scale=0.5` or `frames_per_token=2,5`.
    #[arg(long = "spec", value_name = "KEY=VALUE")]
    spec: Vec<String>,
    /// Write into a non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override a config key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Continue from a checkpoint written by a previous run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Vocabulary file; defaults to vocab.txt next to the manifest.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value = "25,2")]
    schedule: String,
    #[arg(long, default_value_t = 0.9)]
    threshold: f64,
    /// Required when the schedule samples.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Write every ranked hypothesis here.
    #[arg(long)]
    nbest: Option<PathBuf>,
    /// Greedy CTC on the first pass only.
    #[arg(long)]
    greedy: bool,
    /// Utterances decoded concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    hyp: PathBuf,
    /// Per-utterance breakdown TSV.
    #[arg(long)]
    per_utt: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Comma-separated `d=`, `blocks=` and `vocab=` settings.
    #[arg(long, default_value = "d=8,blocks=2")]
    dims: String,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Encoder frames of the random utterance.
    #[arg(long, default_value_t = 12)]
    frames: usize,
    /// Target tokens of the random utterance.
    #[arg(long, default_value_t = 3)]
    tokens: usize,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("UNIENC_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Decode(a) => decode(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn parse_range(key: &str, v: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Usage(format!("--spec {key} expects lo,hi, got {v:?}"));
    let (lo, hi) = v.split_once([',', '-']).ok_or_else(bad)?;
    Ok((
        lo.trim().parse().map_err(|_| bad())?,
        hi.trim().parse().map_err(|_| bad())?,
    ))
}

fn apply_spec(spec: &mut SynthTaskSpec, kv: &str) -> Result<(), CliError> {
    let (key, v) = kv
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--spec expects key=value, got {kv:?}")))?;
    let key = key.trim();
    let num = |v: &str| {
        v.trim()
            .parse::<f64>()
            .map_err(|_| CliError::Usage(format!("--spec {key}: bad number {v:?}")))
    };
    let int = |v: &str| {
        v.trim()
            .parse::<u64>()
            .map_err(|_| CliError::Usage(format!("--spec {key}: bad integer {v:?}")))
    };
    match key {
        "vocab_size" => spec.vocab_size = int(v)? as usize,
        "frames_per_token" => spec.frames_per_token = parse_range(key, v)?,
        "silence_frames" => spec.silence_frames = parse_range(key, v)?,
        "tokens_per_utt" => spec.tokens_per_utt = parse_range(key, v)?,
        "feat_dim" => spec.feat_dim = int(v)? as usize,
        "frame_rate_multiple" => spec.frame_rate_multiple = int(v)? as usize,
        "noise_scale" => spec.noise_scale = num(v)?,
        "task_seed" => spec.task_seed = int(v)?,
        _ => return Err(CliError::Usage(format!("unknown --spec key {key}"))),
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<(), CliError> {
    let mut spec = SynthTaskSpec {
        seed: a.seed,
        ..SynthTaskSpec::default()
    };
    for kv in &a.spec {
        apply_spec(&mut spec, kv)?;
    }
    spec.validate().map_err(CliError::Usage)?;
    if a.out.exists() && !a.force {
        let non_empty = std::fs::read_dir(&a.out)
            .map_err(io_err(&a.out))?
            .next()
            .is_some();
        if non_empty {
            return Err(CliError::Usage(format!(
                "{} exists and is not empty; pass --force to overwrite",
                a.out.display()
            )));
        }
    }
    let ds = synth_generate(&spec, a.num_utts).map_err(CliError::Usage)?;
    write_dataset(&a.out, &ds)?;
    let frames: usize = ds.utterances.iter().map(|u| u.features.rows()).sum();
    println!(
        "wrote {} utterances ({frames} frames) to {}",
        ds.utterances.len(),
        a.out.display()
    );
    Ok(())
}

fn load_split(data: &Path, rel: &str, vocab: &Vocab) -> Result<Vec<Utterance>, CliError> {
    Ok(load_manifest(&data.join(rel), vocab)?)
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(&a.config, &a.set)?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    cfg.weights.validate()?;
    let vocab = load_vocab(&a.data.join(&cfg.data.vocab))?;
    if vocab.size() != cfg.model.vocab_size {
        return Err(CliError::Usage(format!(
            "model.vocab_size is {} but {} lists {} tokens",
            cfg.model.vocab_size,
            cfg.data.vocab,
            vocab.size()
        )));
    }
    let train_set = load_split(&a.data, &cfg.data.train_manifest, &vocab)?;
    let valid_set = load_split(&a.data, &cfg.data.valid_manifest, &vocab)?;
    for u in train_set.iter().chain(&valid_set) {
        if u.features.cols() != cfg.model.feat_dim {
            return Err(CliError::Data(format!(
                "utterance {} has {} feature columns, model.feat_dim is {}",
                u.id,
                u.features.cols(),
                cfg.model.feat_dim
            )));
        }
    }
    std::fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;

    let mut trainer = match &a.resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if ck.model.config() != &cfg.model {
                return Err(CliError::Usage(format!(
                    "checkpoint {} was trained with a different model config",
                    p.display()
                )));
            }
            log::info!("resuming at epoch {} step {}", ck.meta.epoch, ck.meta.step);
            Trainer::resume(ck, cfg.train.clone(), cfg.weights)?
        }
        None => Trainer::new(
            Model::new(cfg.model.clone(), cfg.train.seed)?,
            cfg.train.clone(),
            cfg.weights,
        )?,
    };
    trainer.unknown_id = vocab.unk();
    let conf_path = a.out.join("config.conf");
    std::fs::write(&conf_path, cfg.render()).map_err(io_err(&conf_path))?;

    let skipped = train_set.iter().filter(|u| !trainer.feasible(u)).count();
    if skipped > 0 {
        log::warn!("skipping {skipped} infeasible training utterances");
    }
    let log_path = a.out.join("train_log.jsonl");
    let mut log_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    let last = a.out.join("last.ckpt");
    let best = a.out.join("best.ckpt");
    let started = Instant::now();

    let outcome = trainer.fit(&train_set, &valid_set, |rec, t| {
        writeln!(log_file, "{}", rec.to_json_line()).map_err(|source| TrainingError::Io {
            path: log_path.clone(),
            source,
        })?;
        save_checkpoint(&last, &t.model, Some(&t.adam), &t.meta)?;
        if t.meta.bad_epochs == 0 {
            save_checkpoint(&best, &t.model, None, &t.meta)?;
        }
        log::info!(
            "epoch {} step {} l_dec {:.4} l_ctc1 {:.4} l_ctc2 {:.4} valid_wer {:.4}",
            rec.epoch,
            rec.step,
            rec.l_dec,
            rec.l_ctc1,
            rec.l_ctc2,
            rec.valid_wer_greedy
        );
        Ok(())
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(e @ TrainingError::Diverged { .. }) => {
            save_checkpoint(&last, &trainer.model, Some(&trainer.adam), &trainer.meta)?;
            log::error!("saved last good state to {}", last.display());
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };

    let best_model = trainer.best_model();
    if !best.exists() {
        save_checkpoint(&best, best_model, None, &trainer.meta)?;
    }
    let greedy = trainer.greedy_wer(best_model, &valid_set);
    let unienc = if cfg.final_unienc_eval {
        let schedule = DecodeSchedule::parse(&cfg.decode.schedule, cfg.decode.threshold)?;
        Some(trainer.unienc_wer(best_model, &valid_set, &schedule, cfg.decode.seed))
    } else {
        None
    };
    let summary = serde_json::json!({
        "epochs": trainer.meta.epoch,
        "step": trainer.meta.step,
        "stop": format!("{:?}", outcome.stop),
        "skipped": outcome.skipped,
        "train_secs": started.elapsed().as_secs_f64(),
        "valid_wer_greedy": greedy,
        "valid_wer_unienc": unienc,
    });
    let summary_path = a.out.join("summary.json");
    std::fs::write(&summary_path, format!("{summary}\n")).map_err(io_err(&summary_path))?;
    println!("{summary}");
    Ok(())
}

fn decode(a: DecodeArgs) -> Result<(), CliError> {
    let schedule = DecodeSchedule::parse(&a.schedule, a.threshold)?;
    if !a.greedy && schedule.samples_randomly() && a.seed.is_none() {
        return Err(CliError::Usage(format!(
            "--seed is required when schedule {} samples (threshold {})",
            a.schedule, a.threshold
        )));
    }
    if a.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let model = load_checkpoint(&a.checkpoint)?.model;
    let vocab_path = a.vocab.clone().unwrap_or_else(|| {
        a.manifest
            .parent()
            .unwrap_or(Path::new("."))
            .join("vocab.txt")
    });
    let vocab = load_vocab(&vocab_path)?;
    let cfg = model.config();
    if vocab.size() != cfg.vocab_size {
        return Err(CliError::Data(format!(
            "checkpoint has {} output tokens, {} lists {}",
            cfg.vocab_size,
            vocab_path.display(),
            vocab.size()
        )));
    }
    let utts = load_manifest(&a.manifest, &vocab)?;
    if let Some(u) = utts.iter().find(|u| u.features.cols() != cfg.feat_dim) {
        return Err(CliError::Data(format!(
            "utterance {} has {} feature columns, checkpoint expects {}",
            u.id,
            u.features.cols(),
            cfg.feat_dim
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs)
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let opts = DecodeOptions {
        seed: a.seed.unwrap_or(0),
        ..DecodeOptions::default()
    };
    let started = Instant::now();
    let results: Vec<_> = pool.install(|| {
        utts.par_iter()
            .map(|u| {
                if a.greedy {
                    decode_greedy_ctc(&model, &u.features)
                        .map(|h| (h.tokens.clone(), vec![h], DecodeStatus::Ok))
                } else {
                    decode_utterance(&model, &u.features, &schedule, &opts)
                        .map(|r| (r.best, r.hypotheses, r.status))
                }
            })
            .collect::<Result<_, DecodeError>>()
    })?;
    let wall = started.elapsed().as_secs_f64();

    let mut hyp = String::new();
    let mut nbest = String::new();
    let mut fallbacks = 0;
    for (u, (best, hyps, status)) in utts.iter().zip(&results) {
        hyp.push_str(&format!("{}\t{}\n", u.id, detokenize(best, &vocab)));
        if *status == DecodeStatus::FallbackGreedy {
            fallbacks += 1;
        }
        for (rank, h) in hyps.iter().enumerate() {
            let trace: Vec<String> = h.trace.iter().map(usize::to_string).collect();
            nbest.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                u.id,
                rank + 1,
                h.score,
                trace.join(","),
                detokenize(&h.tokens, &vocab)
            ));
        }
    }
    std::fs::write(&a.out, hyp).map_err(io_err(&a.out))?;
    if let Some(p) = &a.nbest {
        std::fs::write(p, nbest).map_err(io_err(p))?;
    }
    let audio: f64 = utts.iter().map(|u| u.duration).sum();
    println!("utterances: {}", utts.len());
    println!("decode_secs: {wall:.4}");
    println!("audio_secs: {audio:.2}");
    if audio > 0.0 {
        println!("rtf: {:.5}", wall / audio);
    }
    if fallbacks > 0 {
        println!("greedy_fallbacks: {fallbacks}");
    }
    Ok(())
}

fn read_hyps(path: &Path) -> Result<Vec<(String, Vec<String>)>, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, words) = line.split_once('\t').ok_or_else(|| {
            CliError::Data(format!(
                "{}:{}: expected id<TAB>transcript",
                path.display(),
                i + 1
            ))
        })?;
        out.push((
            id.to_string(),
            words.split_whitespace().map(String::from).collect(),
        ));
    }
    Ok(out)
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let refs: Vec<(String, Vec<String>)> = read_manifest(&a.reference)?
        .into_iter()
        .map(|r| {
            (
                r.id,
                r.transcript.split_whitespace().map(String::from).collect(),
            )
        })
        .collect();
    let hyps = read_hyps(&a.hyp)?;
    let report = wer(&refs, &hyps)?;
    println!("{report}");
    if let Some(p) = &a.per_utt {
        std::fs::write(p, report.to_tsv()).map_err(io_err(p))?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let (mut d, mut blocks, mut vocab) = (8usize, 2usize, 4usize);
    for part in a.dims.split(',').filter(|s| !s.trim().is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("--dims expects key=value pairs, got {part:?}"))
        })?;
        let v: usize = v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("--dims {k}: bad value {v:?}")))?;
        match k.trim() {
            "d" => d = v,
            "blocks" => blocks = v,
            "vocab" => vocab = v,
            other => return Err(CliError::Usage(format!("unknown --dims key {other}"))),
        }
    }
    if !(a.eps > 0.0) || a.trials == 0 {
        return Err(CliError::Usage(
            "--eps must be positive and --trials at least 1".into(),
        ));
    }
    let config = gradcheck_config(d, blocks, vocab);
    config.validate()?;
    let report = gradient_check(&config, a.frames, a.tokens, a.eps, a.trials, a.seed)?;
    println!(
        "worst relative error: {:e} ({}) over {} coordinates, {} trial(s)",
        report.worst_rel_error, report.worst_param, report.coordinates, report.trials
    );
    if !(report.worst_rel_error <= a.tolerance) {
        return Err(CliError::Numerical(format!(
            "gradient check failed: {:e} exceeds tolerance {:e}",
            report.worst_rel_error, a.tolerance
        )));
    }
    println!("pass");
    Ok(())
}
