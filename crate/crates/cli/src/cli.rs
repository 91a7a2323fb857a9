//! Command-line front end.

use std::collections::BTreeMap;
use std::fs;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _};
use clap::{Args, Parser, Subcommand};
use picto_core::corpus::{generate_corpus, read_corpus, write_corpus, Grammar, Mode, Role};
use picto_core::eval::{compare, DEFAULT_K_LIST};
use picto_core::mlm::{ModelConfig, TrainConfig};
use picto_core::pipeline::{train_for_mode, train_tokenizer, DEFAULT_VOCAB_TARGET};
use picto_core::prediction::{Board, Prediction};

use crate::service::{self, load_predictor, PredictRequest, Service, ServiceConfig};

#[derive(Debug, Parser)]
#[command(
    name = "picto",
    version,
    about = "Role-tagged masked-LM card prediction for AAC boards"
)]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a disjoint train/test corpus from a slot grammar.
    GenerateCorpus(GenerateCorpusArgs),
    /// Train a cs or flat model from scratch.
    Train(TrainArgs),
    /// Precompute the card decoder for a model and board.
    EncodeBoard(EncodeBoardArgs),
    /// Rank the board's cards for one masked slot.
    Predict(PredictArgs),
    /// Compare a cs and a flat model on a test corpus.
    Eval(EvalArgs),
    /// Serve the board and predictions over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenerateCorpusArgs {
    /// Grammar TOML; the built-in grammar when omitted.
    #[arg(long)]
    pub grammar: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub train: usize,
    #[arg(long, default_value_t = 200)]
    pub test: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Output prefix: writes `<out>.train` and `<out>.test`.
    #[arg(long, default_value = "corpus")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub mode: Mode,
    /// Training corpus (JSONL).
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub board: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Training recipe: desk or paper.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Subword vocabulary budget for the base tokenizer.
    #[arg(long, default_value_t = DEFAULT_VOCAB_TARGET)]
    pub vocab_size: usize,
    /// Also write the model's vocabulary file here.
    #[arg(long)]
    pub vocab_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EncodeBoardArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub board: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub board: PathBuf,
    /// Precomputed card decoder; built from the board when omitted.
    #[arg(long)]
    pub decoder: Option<PathBuf>,
    /// Filled slot as `role=text`; repeatable.
    #[arg(long = "slot", value_parser = parse_slot)]
    pub slots: Vec<(Role, String)>,
    /// Role of the slot to predict.
    #[arg(long = "mask")]
    pub mask_role: Option<Role>,
    /// Flat mode: text to complete instead of slots.
    #[arg(long, conflicts_with = "slots")]
    pub prefix: Option<String>,
    /// Query mode; defaults to the mode the model was trained for.
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long, default_value_t = 12)]
    pub k: usize,
    /// Print the same JSON document as `POST /predict`.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model_cs: PathBuf,
    #[arg(long)]
    pub model_flat: PathBuf,
    /// Test corpus (JSONL).
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub board: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_K_LIST)]
    pub k: Vec<usize>,
    /// Machine-readable report.
    #[arg(long, default_value = "report.json")]
    pub report: PathBuf,
    /// Per-case top-K cards and log-probabilities for both models.
    #[arg(long)]
    pub dump_rankings: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub board: PathBuf,
    #[arg(long)]
    pub decoder: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    /// Listening port; `PICTO_PORT` takes precedence.
    #[arg(long, default_value_t = service::DEFAULT_PORT)]
    pub port: u16,
    /// Directory served at `/` (the board UI build).
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
    /// Default K for requests that omit it.
    #[arg(long, default_value_t = 12)]
    pub k: usize,
    /// Override a role colour as `role=color`; repeatable.
    #[arg(long = "role-color", value_parser = parse_slot)]
    pub role_colors: Vec<(Role, String)>,
}

fn parse_slot(s: &str) -> Result<(Role, String), String> {
    let (role, text) = s
        .split_once('=')
        .ok_or_else(|| format!("expected role=text, got `{s}`"))?;
    let role: Role = role.trim().parse().map_err(|e| format!("{e}"))?;
    Ok((role, text.trim().to_owned()))
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenerateCorpus(a) => generate(a),
        Command::Train(a) => train(a),
        Command::EncodeBoard(a) => encode_board(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a),
    }
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn generate(a: GenerateCorpusArgs) -> anyhow::Result<()> {
    let grammar = match &a.grammar {
        Some(path) => Grammar::load(path)?,
        None => Grammar::default_grammar(),
    };
    let split = generate_corpus(&grammar, a.train, a.test, a.seed)?;
    let (train, test) = (with_suffix(&a.out, ".train"), with_suffix(&a.out, ".test"));
    write_corpus(&train, &split.train)?;
    write_corpus(&test, &split.test)?;
    println!(
        "wrote {} training sentences to {} and {} test sentences to {}",
        split.train.len(),
        train.display(),
        split.test.len(),
        test.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = TrainConfig::preset(&a.preset)?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    let sentences = read_corpus(&a.corpus)?;
    let board = Board::load(&a.board)?;
    let base = train_tokenizer(&sentences, &board, a.vocab_size)?;
    log::info!("base vocabulary: {} tokens", base.len());
    let template = ModelConfig::desk(base.len());
    let (ckpt, report) = train_for_mode(a.mode, &base, &sentences, &board, &template, &cfg)?;
    for (epoch, loss) in report.loss_trace.iter().enumerate() {
        log::info!("epoch {:>3}  loss {loss:.4}", epoch + 1);
    }
    ckpt.save(&a.out)?;
    if let Some(path) = &a.vocab_out {
        ckpt.vocab.save(path)?;
    }
    println!(
        "trained {} model for {} epochs ({} steps), final loss {:.4}, fingerprint {}, saved to {}",
        a.mode,
        report.loss_trace.len(),
        report.steps,
        report.loss_trace.last().copied().unwrap_or(f64::NAN),
        ckpt.fingerprint()?,
        a.out.display()
    );
    Ok(())
}

fn encode_board(a: EncodeBoardArgs) -> anyhow::Result<()> {
    let predictor = load_predictor(&a.model, &a.board, None)?;
    predictor.decoder().save(&a.out)?;
    println!(
        "encoded {} cards for model {} into {}",
        predictor.decoder().len(),
        predictor.fingerprint(),
        a.out.display()
    );
    Ok(())
}

/// The request `picto predict` sends through the same path as the service.
pub fn predict_request(a: &PredictArgs) -> PredictRequest {
    PredictRequest {
        mode: a.mode,
        slots: a.slots.iter().cloned().collect(),
        mask_role: a.mask_role,
        prefix: a.prefix.clone(),
        k: Some(a.k),
    }
}

fn predict(a: PredictArgs) -> anyhow::Result<()> {
    let predictor = load_predictor(&a.model, &a.board, a.decoder.as_deref())?;
    let prediction = service::answer(&predictor, &predict_request(&a), a.k)?;
    if a.json {
        println!("{}", serde_json::to_string(&prediction)?);
    } else {
        print!("{}", render_prediction(&prediction));
    }
    Ok(())
}

pub fn render_prediction(p: &Prediction) -> String {
    let mut out = format!("{}\n", p.query);
    for c in &p.predictions {
        let role = c.role.map(Role::as_str).unwrap_or("-");
        out.push_str(&format!("{:>3}  {:<28} {:<8} {:.4}\n", c.rank, c.card_id, role, c.prob));
    }
    out
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let cs = load_predictor(&a.model_cs, &a.board, None)?;
    let flat = load_predictor(&a.model_flat, &a.board, None)?;
    for (name, p, want) in [("--model-cs", &cs, Mode::Cs), ("--model-flat", &flat, Mode::Flat)] {
        if let Some(mode) = p.mode().filter(|m| *m != want) {
            bail!("{name} was trained in {mode} mode");
        }
    }
    let test = read_corpus(&a.test)?;
    let board = cs.board().clone();
    let cmp = compare(&cs, &flat, &test, &board, &a.k)?;
    print!("{}", cmp.render_table());
    fs::write(&a.report, serde_json::to_string_pretty(&cmp)?)
        .with_context(|| format!("writing {}", a.report.display()))?;
    if let Some(path) = &a.dump_rankings {
        fs::write(path, cmp.rankings_json()?).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

/// Port from `PICTO_PORT` if set, else `flag`.
pub fn resolve_port(env: Option<&str>, flag: u16) -> anyhow::Result<u16> {
    match env {
        Some(v) => v
            .trim()
            .parse()
            .with_context(|| format!("{} is not a port: `{v}`", service::PORT_ENV)),
        None => Ok(flag),
    }
}

fn serve(a: ServeArgs) -> anyhow::Result<()> {
    let env = std::env::var(service::PORT_ENV).ok();
    let port = resolve_port(env.as_deref(), a.port)?;
    let mut role_colors: BTreeMap<Role, String> = service::default_role_colors();
    role_colors.extend(a.role_colors.iter().cloned());
    let config = ServiceConfig {
        addr: SocketAddr::new(a.host, port),
        model: a.model,
        board: a.board,
        decoder: a.decoder,
        default_k: a.k,
        static_dir: a.static_dir,
        role_colors,
    };
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let service = Service::bind(&config).await?;
        println!("listening on http://{}", service.local_addr()?);
        service
            .run(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })
}
