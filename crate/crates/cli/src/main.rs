//! `affectgen`: build a corpus, train the reference model, generate steered
//! text, run knob sweeps and serve the HTTP API.
//!
//! Exit status is 0 on success, 1 for invalid arguments or inputs and 2 when
//! a run fails after its inputs were accepted.

use std::fmt::Display;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use affectgen_core::corpus::synthetic_corpus;
use affectgen_core::eval::{intensity_score, run_baseline, run_sweep, write_csv_file, SweepSpec};
use affectgen_core::lexicon::demo_lexicon;
use affectgen_core::loss::{DEFAULT_GD_ITERATIONS, DEFAULT_KNOB, DEFAULT_STEP_SIZE, DEFAULT_VARIANCE};
use affectgen_core::model::{load_checkpoint, save_checkpoint, train_reference, TrainOptions};
use affectgen_core::steer::{generate_session, StepEvent};
use affectgen_core::{
    AffectBag, ControlConfig, EmotionCategory, GradientScaling, Lexicon, LossWeights, ReferenceLm, ReferenceLmConfig,
    SamplerSettings, SamplingMode, TopicBag,
};
use affectgen_service::{AppState, ModelSlot, ServiceConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "affectgen", version, about = "Emotion- and topic-steered text generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic training corpus.
    Corpus(CorpusArgs),
    /// Train the reference model and save a checkpoint.
    Train(TrainArgs),
    /// Generate one steered continuation.
    Generate(GenerateArgs),
    /// Run a knob sweep and write per-cell aggregates as CSV.
    Sweep(SweepArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Args)]
struct LexiconArg {
    /// Word-emotion intensity file (word, emotion, score per line); the
    /// bundled lexicon is used when absent.
    #[arg(long, env = "AFFECTGEN_LEXICON")]
    lexicon: Option<PathBuf>,
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 120_000)]
    tokens: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    lexicon: LexiconArg,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 32)]
    context: usize,
    #[arg(long, default_value_t = 1000)]
    vocab_size: usize,
    #[arg(long, default_value_t = 12)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long)]
    emotion: Option<String>,
    #[arg(long, default_value_t = DEFAULT_KNOB)]
    knob: f64,
    #[arg(long = "var", default_value_t = DEFAULT_VARIANCE)]
    variance: f64,
    /// Built-in topic name or a file with one word per line.
    #[arg(long)]
    topic: Option<String>,
    #[arg(long, default_value_t = 20)]
    length: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = LossWeights::default().kl_scale)]
    kl_scale: f64,
    #[arg(long, default_value_t = LossWeights::default().affect_scale)]
    affect_scale: f64,
    #[arg(long, default_value_t = LossWeights::default().topic_scale)]
    topic_scale: f64,
    #[arg(long, default_value_t = DEFAULT_STEP_SIZE)]
    step_size: f64,
    #[arg(long, default_value_t = DEFAULT_GD_ITERATIONS)]
    iterations: usize,
    /// Perturb only the most recent positions of the history.
    #[arg(long)]
    window: Option<usize>,
    /// Scale each gradient tensor to unit norm before the update.
    #[arg(long)]
    normalize_gradients: bool,
    /// Continue from the perturbed history instead of the unperturbed one.
    #[arg(long)]
    carry_history: bool,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long)]
    greedy: bool,
    /// Print per-token losses to stderr.
    #[arg(long)]
    trace: bool,
    /// Print the full generation record as JSON.
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    lexicon: LexiconArg,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also run the grid with steering disabled and write it here.
    #[arg(long)]
    baseline_out: Option<PathBuf>,
    #[command(flatten)]
    lexicon: LexiconArg,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "AFFECTGEN_MODEL")]
    model: PathBuf,
    #[arg(long, env = "AFFECTGEN_HOST", default_value = "127.0.0.1")]
    host: String,
    #[arg(long, env = "AFFECTGEN_PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, env = "AFFECTGEN_SESSION_LIMIT", default_value_t = 4)]
    session_limit: usize,
    #[arg(long, env = "AFFECTGEN_MAX_LENGTH", default_value_t = 200)]
    max_length: usize,
    #[arg(long, env = "AFFECTGEN_TIMEOUT_SECS", default_value_t = 60)]
    timeout_secs: u64,
    #[command(flatten)]
    lexicon: LexiconArg,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

type Outcome<T = ()> = Result<T, Failure>;

trait Classify<T> {
    fn usage(self, context: impl Display) -> Outcome<T>;
    fn runtime(self, context: impl Display) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self, context: impl Display) -> Outcome<T> {
        self.map_err(|e| Failure::Usage(e.into().context(context.to_string())))
    }

    fn runtime(self, context: impl Display) -> Outcome<T> {
        self.map_err(|e| Failure::Runtime(e.into().context(context.to_string())))
    }
}

fn usage_error(message: impl Display) -> Failure {
    Failure::Usage(anyhow::anyhow!("{message}"))
}

fn load_lexicon(arg: &LexiconArg) -> Outcome<Lexicon> {
    match &arg.lexicon {
        Some(path) => Lexicon::load_nrc_eil(path).usage("loading lexicon"),
        None => Ok(demo_lexicon()),
    }
}

fn load_model(path: &Path) -> Outcome<ReferenceLm> {
    load_checkpoint(path).usage(format!("loading model {}", path.display()))
}

fn corpus(args: CorpusArgs) -> Outcome {
    let lexicon = load_lexicon(&args.lexicon)?;
    let text = synthetic_corpus(&lexicon, args.tokens, args.seed).usage("building corpus")?;
    std::fs::write(&args.out, text).runtime(format!("writing {}", args.out.display()))
}

fn train(args: TrainArgs) -> Outcome {
    let text = std::fs::read_to_string(&args.corpus).usage(format!("reading corpus {}", args.corpus.display()))?;
    let config = ReferenceLmConfig {
        layers: args.layers,
        heads: args.heads,
        dim: args.dim,
        context: args.context,
        vocab_size: args.vocab_size,
        seed: args.seed,
    };
    config.validate().usage("model configuration")?;
    let options = TrainOptions {
        epochs: args.epochs,
        learning_rate: args.lr,
        batch_size: args.batch_size,
        ..Default::default()
    };
    if !(args.lr > 0.0 && args.lr.is_finite()) {
        return Err(usage_error("--lr must be positive"));
    }
    let started = Instant::now();
    let (model, report) = train_reference(&text, config, &options, |epoch, loss| {
        eprintln!("epoch {:>3}  loss {loss:.4}", epoch + 1);
    })
    .map_err(|e| match e {
        affectgen_core::Error::NonFinite { .. } => Failure::Runtime(anyhow::Error::new(e).context("training")),
        other => Failure::Usage(anyhow::Error::new(other).context("training")),
    })?;
    save_checkpoint(&model, &args.out).runtime(format!("writing {}", args.out.display()))?;
    eprintln!(
        "trained on {} tokens in {:.1} s, vocabulary {}",
        report.corpus_tokens,
        started.elapsed().as_secs_f64(),
        affectgen_core::LanguageModel::vocabulary(&model).len()
    );
    Ok(())
}

fn generate(args: GenerateArgs) -> Outcome {
    let lexicon = load_lexicon(&args.lexicon)?;
    let emotion = args
        .emotion
        .as_deref()
        .map(str::parse::<EmotionCategory>)
        .transpose()
        .usage("--emotion")?;
    let sampler = SamplerSettings {
        mode: if args.greedy {
            SamplingMode::Greedy
        } else {
            SamplingMode::TopK
        },
        k: args.top_k,
        temperature: args.temperature,
        seed: args.seed,
    };
    sampler.validate().usage("sampler")?;
    if args.length == 0 {
        return Err(usage_error("--length must be positive"));
    }
    let mut config = ControlConfig {
        knob: args.knob,
        variance: args.variance,
        step_size: args.step_size,
        gd_iterations: args.iterations,
        weights: LossWeights {
            kl_scale: args.kl_scale,
            topic_scale: args.topic_scale,
            affect_scale: args.affect_scale,
        },
        window: args.window,
        gradient_scaling: if args.normalize_gradients {
            GradientScaling::PerTensorNorm
        } else {
            GradientScaling::Raw
        },
        carry_perturbed_history: args.carry_history,
        ..Default::default()
    };
    config.validate().usage("steering configuration")?;

    let model = load_model(&args.model)?;
    let vocab = affectgen_core::LanguageModel::vocabulary(&model);
    if vocab.encode(&args.prompt).is_empty() {
        return Err(usage_error("--prompt must contain at least one token"));
    }
    if let Some(e) = emotion {
        config.affect = Some(Arc::new(AffectBag::build(&lexicon, e, vocab).usage("--emotion")?));
    }
    if let Some(topic) = &args.topic {
        config.topic = Some(Arc::new(TopicBag::load(topic, vocab).usage("--topic")?));
    }

    let trace = args.trace;
    let record = generate_session(
        &model,
        &args.prompt,
        args.length,
        &config,
        sampler,
        0,
        |e: &StepEvent| {
            if trace {
                eprintln!(
                    "step {:>3}  {:<16} loss {:>10.5}  kl {:.3e}{}",
                    e.index,
                    e.text,
                    e.loss_total,
                    e.kl,
                    if e.flagged { "  flagged" } else { "" }
                );
            }
            ControlFlow::Continue(())
        },
    )
    .runtime("generation")?;

    let mut stdout = std::io::stdout().lock();
    if args.json {
        let json = record.to_json();
        writeln!(stdout, "{json}").runtime("writing output")?;
    } else {
        writeln!(stdout, "{} {}", args.prompt, record.text).runtime("writing output")?;
    }
    let mut summary = format!("{} tokens, mean kl {:.3e}", record.tokens.len(), record.mean_kl());
    if let Some(e) = emotion {
        let s = intensity_score(&record.text, e, &lexicon);
        summary.push_str(&format!(", {e} intensity {:.3} over {} words", s.score, s.matched));
    }
    if !record.flagged_steps.is_empty() {
        summary.push_str(&format!(", flagged steps {:?}", record.flagged_steps));
    }
    eprintln!("{summary}, {} ms", record.duration_ms);
    Ok(())
}

fn sweep(args: SweepArgs) -> Outcome {
    let lexicon = load_lexicon(&args.lexicon)?;
    let spec = SweepSpec::load(&args.spec).usage(format!("sweep spec {}", args.spec.display()))?;
    let model = load_model(&args.model)?;
    let started = Instant::now();
    let cells = run_sweep(&model, &spec, &lexicon).map_err(|e| match e {
        affectgen_core::Error::Unprojectable { .. } | affectgen_core::Error::InvalidConfig { .. } => {
            Failure::Usage(anyhow::Error::new(e).context("sweep"))
        }
        other => Failure::Runtime(anyhow::Error::new(other).context("sweep")),
    })?;
    write_csv_file(&cells, &args.out).runtime(format!("writing {}", args.out.display()))?;
    if let Some(path) = &args.baseline_out {
        let base = run_baseline(&model, &spec, &lexicon).runtime("baseline")?;
        write_csv_file(&base, path).runtime(format!("writing {}", path.display()))?;
    }
    eprintln!("{} cells in {:.1} s", cells.len(), started.elapsed().as_secs_f64());
    Ok(())
}

fn serve(args: ServeArgs) -> Outcome {
    let lexicon = Arc::new(load_lexicon(&args.lexicon)?);
    if args.session_limit == 0 || args.max_length == 0 {
        return Err(usage_error("--session-limit and --max-length must be positive"));
    }
    if !args.model.exists() {
        return Err(usage_error(format!("model {} does not exist", args.model.display())));
    }
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let runtime = tokio::runtime::Runtime::new().runtime("starting runtime")?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind((args.host.as_str(), args.port))
            .await
            .usage(format!("binding {}:{}", args.host, args.port))?;
        let slot = ModelSlot::default();
        let state = AppState::new(
            slot.clone(),
            lexicon,
            ServiceConfig {
                max_length: args.max_length,
                timeout: Duration::from_secs(args.timeout_secs),
                session_limit: args.session_limit,
            },
        );
        // Requests get 503 until the checkpoint has loaded.
        let path = args.model.clone();
        let loader = tokio::task::spawn_blocking(move || load_checkpoint(&path));
        let server = tokio::spawn(affectgen_service::serve(listener, state));
        let model = loader.await.runtime("loading model")?.runtime("loading model")?;
        slot.set(Arc::new(model));
        eprintln!("serving on {}:{}", args.host, args.port);
        server.await.runtime("server")?.runtime("server")
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
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
        Command::Corpus(a) => corpus(a),
        Command::Train(a) => train(a),
        Command::Generate(a) => generate(a),
        Command::Sweep(a) => sweep(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
