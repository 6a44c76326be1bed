use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use myokey::augment::AugmentConfig;
use myokey::dataio::{read_session, write_session, GenConfig, Session};
use myokey::decode::{
    apply_correction, beam_decode, greedy_decode, CorrectionMode, Corrector, DecodeConfig, HttpCorrector,
    LiteralGuard, MockCorrector,
};
use myokey::encoders::{load_checkpoint, save_checkpoint, ArchConfig, ArchKind, Model, Scale};
use myokey::frontend::{channel_correlation, log_spectrogram};
use myokey::lm::{NgramModel, CORPUS};
use myokey::metrics::{align_text, CSV_HEADER};
use myokey::stream::{latency_bench, LatencyReport, StreamConfig, StreamMode};
use myokey::train::{evaluate, generate_dataset, metrics_csv, train, EvalConfig, Split, TrainConfig};
use myokey::{Error, Result};

/// Surface-EMG keystroke decoding: data generation, training, evaluation,
/// decoding and streaming benchmarks.
#[derive(Parser, Debug)]
#[command(name = "myokey", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic sessions.
    GenData(GenDataArgs),
    /// Train an encoder with CTC.
    Train(TrainArgs),
    /// Character error rate of a checkpoint on a set of sessions.
    Eval(EvalArgs),
    /// Transcribe one session.
    Decode(DecodeArgs),
    /// Train a character n-gram language model.
    LmTrain(LmTrainArgs),
    /// Streaming latency benchmark.
    Bench(BenchArgs),
    /// Inter-channel correlation matrix of a session.
    Correlate(CorrelateArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ArchArg {
    Tds,
    TdsTransformer,
    Conformer,
}

impl From<ArchArg> for ArchKind {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Tds => ArchKind::Tds,
            ArchArg::TdsTransformer => ArchKind::TdsTransformer,
            ArchArg::Conformer => ArchKind::Conformer,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ScaleArg {
    Paper,
    Toy,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum SplitArg {
    Generic,
    Personalized,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum DecoderArg {
    Greedy,
    Beam,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum CorrectionArg {
    None,
    Space,
    Sentence,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ModeArg {
    Offline,
    Online,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value_t = 4)]
    users: usize,
    #[arg(long, default_value_t = 5)]
    sessions_per_user: usize,
    /// Session length in seconds.
    #[arg(long, default_value_t = 60.0)]
    duration: f64,
    /// Keystrokes per second.
    #[arg(long, default_value_t = 3.0)]
    typing_rate: f64,
    /// Additive noise standard deviation (ADC units).
    #[arg(long, default_value_t = 40.0)]
    noise_std: f64,
    /// Fraction of each burst leaking onto neighbouring electrodes.
    #[arg(long, default_value_t = 0.3)]
    leakage: f64,
    #[arg(long, default_value_t = 40.0)]
    lead_time_ms: f64,
    #[arg(long, default_value_t = 0.03)]
    typo_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DecoderFlags {
    #[arg(long, value_enum, default_value_t = DecoderArg::Greedy)]
    decoder: DecoderArg,
    #[arg(long, default_value_t = 32)]
    beam_width: usize,
    /// LM weight α.
    #[arg(long, default_value_t = 0.5)]
    lm_weight: f64,
    /// Per-character bonus β.
    #[arg(long, default_value_t = 0.0)]
    length_bonus: f64,
    /// Language model file; the bundled corpus model is used when absent.
    #[arg(long)]
    lm: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = CorrectionArg::None)]
    correction: CorrectionArg,
    /// HTTP correction endpoint; the in-process lexicon corrector is used
    /// when absent.
    #[arg(long)]
    corrector_url: Option<String>,
    /// Comma-separated tokens never sent for correction (enables the guard).
    #[arg(long, value_delimiter = ',')]
    literal_spans: Vec<String>,
    /// Leave tokens with digits, symbols or capitals untouched.
    #[arg(long, default_value_t = false)]
    literal_mode: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum, default_value_t = ArchArg::Conformer)]
    arch: ArchArg,
    #[arg(long, value_enum, default_value_t = ScaleArg::Toy)]
    scale: ScaleArg,
    #[arg(long, value_enum, default_value_t = SplitArg::Generic)]
    split: SplitArg,
    /// Directory of session files.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Generic split: number of users (highest seeds) held out.
    #[arg(long, default_value_t = 1)]
    eval_users: usize,
    /// Personalized split: index of the user among the sorted user seeds.
    #[arg(long, default_value_t = 0)]
    user: usize,
    /// Personalized split: number of that user's sessions held out.
    #[arg(long, default_value_t = 1)]
    eval_sessions: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    /// Optimizer steps per epoch; 0 runs every batch.
    #[arg(long, default_value_t = 0)]
    steps_per_epoch: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 1.0)]
    grad_clip: f64,
    /// Training window length in seconds.
    #[arg(long, default_value_t = 2.0)]
    window_s: f64,
    /// Training window hop in seconds.
    #[arg(long, default_value_t = 1.0)]
    hop_s: f64,
    /// Disable all augmentation.
    #[arg(long, default_value_t = false)]
    no_augment: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for model.emgm and metrics.csv.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "data")]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Offline)]
    mode: ModeArg,
    /// Streaming context in seconds (online mode).
    #[arg(long, default_value_t = 4.0)]
    window_s: f64,
    /// Streaming hop in seconds (online mode).
    #[arg(long, default_value_t = 4.0)]
    hop_s: f64,
    #[command(flatten)]
    decoder: DecoderFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV report path.
    #[arg(long, default_value = "eval.csv")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    session: PathBuf,
    #[command(flatten)]
    decoder: DecoderFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// AlignmentReport CSV path.
    #[arg(long, default_value = "decode.csv")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct LmTrainArgs {
    /// Text corpus, one sentence per line; the bundled corpus when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 6)]
    order: usize,
    #[arg(long, default_value_t = 0.75)]
    discount: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "lm.emgl")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Checkpoint to benchmark; a freshly initialized model otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ArchArg::Conformer)]
    arch: ArchArg,
    #[arg(long, value_enum, default_value_t = ScaleArg::Toy)]
    scale: ScaleArg,
    /// Streaming context in seconds.
    #[arg(long, default_value_t = 4.0)]
    window_s: f64,
    /// Streaming hop in seconds.
    #[arg(long, default_value_t = 0.05)]
    hop_s: f64,
    /// Timed windows after warmup.
    #[arg(long, default_value_t = 100)]
    windows: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "latency.csv")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CorrelateArgs {
    #[arg(long)]
    session: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "correlation.csv")]
    out: PathBuf,
}

/// Prefixes an error with the flag whose value caused it.
fn flag<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Input(format!("--{name}: {io}")),
        Error::Config(m) => Error::Config(format!("--{name}: {m}")),
        Error::Input(m) => Error::Input(format!("--{name}: {m}")),
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("--{name}: {message}"),
        },
        other => other,
    })
}

fn write_file(name: &str, path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        flag(name, fs::create_dir_all(dir).map_err(Error::from))?;
    }
    flag(name, fs::write(path, contents).map_err(Error::from))
}

fn load_sessions(dir: &Path) -> Result<Vec<Session>> {
    let entries = flag("data", fs::read_dir(dir).map_err(Error::from))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "emgs"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Input(format!("--data: no .emgs files in {}", dir.display())));
    }
    paths.iter().map(|p| flag("data", read_session(p))).collect()
}

fn load_lm(path: Option<&Path>) -> Result<NgramModel> {
    match path {
        Some(p) => flag("lm", NgramModel::load(p)),
        None => NgramModel::train(CORPUS, 6, 0.75),
    }
}

fn decode_config(d: &DecoderFlags) -> Result<Option<DecodeConfig>> {
    if d.decoder == DecoderArg::Greedy {
        if d.correction != CorrectionArg::None {
            return Err(Error::Config("--correction needs --decoder beam".into()));
        }
        return Ok(None);
    }
    let cfg = DecodeConfig {
        beam_width: d.beam_width,
        lm_weight: d.lm_weight,
        length_bonus: d.length_bonus,
        correction_mode: match d.correction {
            CorrectionArg::None => CorrectionMode::None,
            CorrectionArg::Space => CorrectionMode::Space,
            CorrectionArg::Sentence => CorrectionMode::Sentence,
        },
        literal_mode: d.literal_mode || !d.literal_spans.is_empty(),
    };
    flag("beam-width", cfg.validate())?;
    Ok(Some(cfg))
}

fn corrector(d: &DecoderFlags, lm: &NgramModel) -> Box<dyn Corrector> {
    match &d.corrector_url {
        Some(url) => Box::new(HttpCorrector::new(url.clone())),
        None => Box::new(MockCorrector::new(myokey::dataio::WORDS.lines(), Some(lm.clone()))),
    }
}

fn guard(d: &DecoderFlags) -> LiteralGuard {
    LiteralGuard {
        enabled: d.literal_mode || !d.literal_spans.is_empty(),
        spans: d.literal_spans.clone(),
    }
}

fn arch(kind: ArchArg, scale: ScaleArg) -> ArchConfig {
    ArchConfig::new(
        kind.into(),
        match scale {
            ScaleArg::Paper => Scale::Paper,
            ScaleArg::Toy => Scale::Toy,
        },
    )
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = GenConfig {
        duration_s: a.duration,
        typing_rate: a.typing_rate,
        template_sharpness: GenConfig::default().template_sharpness,
        noise_std: a.noise_std,
        leakage: a.leakage,
        lead_time_ms: a.lead_time_ms,
        typo_rate: a.typo_rate,
    };
    let sessions = flag("duration", generate_dataset(&cfg, a.users, a.sessions_per_user, a.seed))?;
    flag("out", fs::create_dir_all(&a.out).map_err(Error::from))?;
    for s in &sessions {
        let path = a.out.join(format!("u{:06}_s{:09}.emgs", s.user_seed, s.session_seed));
        flag("out", write_session(s, &path))?;
    }
    println!("wrote {} sessions to {}", sessions.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let sessions = load_sessions(&a.data)?;
    let mut users: Vec<u64> = sessions.iter().map(|s| s.user_seed).collect();
    users.sort_unstable();
    users.dedup();
    let split = match a.split {
        SplitArg::Generic => {
            if a.eval_users == 0 || a.eval_users >= users.len() {
                return Err(Error::Config(format!(
                    "--eval-users {} must be in 1..{} for {} users",
                    a.eval_users,
                    users.len(),
                    users.len()
                )));
            }
            Split::Generic {
                eval_users: users[users.len() - a.eval_users..].to_vec(),
            }
        }
        SplitArg::Personalized => {
            let user = *users
                .get(a.user)
                .ok_or_else(|| Error::Config(format!("--user {} but only {} users", a.user, users.len())))?;
            let mut own: Vec<u64> = sessions.iter().filter(|s| s.user_seed == user).map(|s| s.session_seed).collect();
            own.sort_unstable();
            if a.eval_sessions == 0 || a.eval_sessions >= own.len() {
                return Err(Error::Config(format!(
                    "--eval-sessions {} must be in 1..{} for this user",
                    a.eval_sessions,
                    own.len()
                )));
            }
            Split::Personalized {
                user,
                eval_sessions: own[own.len() - a.eval_sessions..].to_vec(),
            }
        }
    };
    let mut augment = if a.no_augment { AugmentConfig::none() } else { AugmentConfig::default() };
    augment.seed = a.seed;
    let cfg = TrainConfig {
        arch: arch(a.arch, a.scale),
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        grad_clip: a.grad_clip,
        seed: a.seed,
        augment,
        split,
        window_s: a.window_s,
        hop_s: a.hop_s,
        max_steps_per_epoch: (a.steps_per_epoch > 0).then_some(a.steps_per_epoch),
    };
    let out = train(&cfg, &sessions)?;
    flag("out", fs::create_dir_all(&a.out).map_err(Error::from))?;
    flag("out", save_checkpoint(&out.best, a.out.join("model.emgm")))?;
    write_file("out", &a.out.join("metrics.csv"), &metrics_csv(&out.log))?;
    print!("{}", metrics_csv(&out.log));
    println!(
        "best epoch {} (train CER {:.4}); checkpoint {}",
        out.best_epoch,
        out.train_cer.cer(),
        a.out.join("model.emgm").display()
    );
    if let Some(step) = out.diverged_at {
        return Err(Error::Diverged { step });
    }
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let model = flag("checkpoint", load_checkpoint(&a.checkpoint))?;
    let sessions = load_sessions(&a.data)?;
    let beam = decode_config(&a.decoder)?;
    let lm = load_lm(a.decoder.lm.as_deref())?;
    let corr = corrector(&a.decoder, &lm);
    let online = match a.mode {
        ModeArg::Offline => None,
        ModeArg::Online => {
            let sc = StreamConfig {
                context_s: a.window_s,
                hop_s: a.hop_s,
                mode: if a.hop_s < a.window_s { StreamMode::LowLatency } else { StreamMode::PaperOnline },
            };
            flag("window-s", sc.validate(model.receptive_field()))?;
            Some(sc)
        }
    };
    let cfg = EvalConfig {
        beam,
        lm: Some(&lm),
        online,
        corrector: Some(corr.as_ref()),
        guard: guard(&a.decoder),
    };
    let report = evaluate(&model, &sessions, &cfg)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    write_file("out", &a.out, &report.to_csv())?;
    println!("{} CER {:.4} over {} characters", report.mode, report.cer(), report.totals.ref_len);
    Ok(())
}

fn decode_cmd(a: &DecodeArgs) -> Result<()> {
    let model = flag("checkpoint", load_checkpoint(&a.checkpoint))?;
    let session = flag("session", read_session(&a.session))?;
    let beam = decode_config(&a.decoder)?;
    let lattice = model.forward(&flag("session", log_spectrogram(&session.samples))?)?;
    let text = match &beam {
        None => greedy_decode(&lattice),
        Some(cfg) => {
            let lm = load_lm(a.decoder.lm.as_deref())?;
            let text = beam_decode(&lattice, cfg, Some(&lm))?.text;
            let out = apply_correction(&text, corrector(&a.decoder, &lm).as_ref(), cfg.correction_mode, &guard(&a.decoder));
            if let Some(w) = out.warning {
                eprintln!("warning: {w}");
            }
            out.text
        }
    };
    let report = align_text(&session.prompt, &text);
    println!("{text}");
    write_file("out", &a.out, &format!("{CSV_HEADER}\n{}\n", report.csv_row()))?;
    println!("CER {:.4} (S {} D {} I {} N {})", report.cer, report.substitutions, report.deletions, report.insertions, report.ref_len);
    Ok(())
}

fn lm_train(a: &LmTrainArgs) -> Result<()> {
    let (text, source) = match &a.corpus {
        Some(p) => (flag("corpus", fs::read_to_string(p).map_err(Error::from))?, p.display().to_string()),
        None => (CORPUS.to_string(), "bundled corpus".to_string()),
    };
    let mut lm = flag("order", NgramModel::train(&text, a.order, a.discount))?;
    lm.set_comment(format!("trained on {source}"));
    flag("out", lm.save(&a.out))?;
    println!("wrote {}-gram model to {}", lm.order(), a.out.display());
    Ok(())
}

fn bench(a: &BenchArgs) -> Result<()> {
    let model = match &a.checkpoint {
        Some(p) => flag("checkpoint", load_checkpoint(p))?,
        None => Model::new(arch(a.arch, a.scale), a.seed)?,
    };
    let cfg = StreamConfig {
        context_s: a.window_s,
        hop_s: a.hop_s,
        mode: if a.hop_s < a.window_s { StreamMode::LowLatency } else { StreamMode::PaperOnline },
    };
    flag("hop-s", cfg.validate(model.receptive_field()))?;
    let report = flag("windows", latency_bench(&model, &cfg, a.windows))?;
    write_file("out", &a.out, &report.to_csv())?;
    println!("{report}");
    println!("{}", LatencyReport::CSV_HEADER);
    println!("{}", report.csv_row());
    Ok(())
}

fn correlate(a: &CorrelateArgs) -> Result<()> {
    let session = flag("session", read_session(&a.session))?;
    let m = flag("session", channel_correlation(&session.samples))?;
    write_file("out", &a.out, &m.to_csv())?;
    for d in 0..=4 {
        println!("mean |r| at electrode distance {d}: {:.4}", m.mean_abs_at_distance(d));
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Decode(a) => decode_cmd(a),
        Command::LmTrain(a) => lm_train(a),
        Command::Bench(a) => bench(a),
        Command::Correlate(a) => correlate(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    println!("config: {:?}", cli.command);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_internal() { 2 } else { 1 })
        }
    }
}
