use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mlkv_core::bench::{self, SweepOptions, Timing, DEFAULT_GEN, DEFAULT_PREFILL};
use mlkv_core::convert::{merge_kv, Checkpoint};
use mlkv_core::trainer::{self, CorpusFormat, PackedDataset, TrainPlan, EOS};
use mlkv_core::{Error, Model, ModelConfig, ShareConfig};

/// Seed used when `--seed` is not given.
const DEFAULT_SEED: u64 = 1234;

#[derive(Parser)]
#[command(
    name = "mlkv",
    version,
    about = "Transformer engine with multi-layer key/value sharing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Merge KV heads of a checkpoint into a coarser sharing scheme.
    Convert(ConvertArgs),
    /// Train a fresh model or continue training a checkpoint.
    Train(TrainArgs),
    /// Greedy decoding from a checkpoint.
    Generate(GenerateArgs),
    /// Mean next-token loss of a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Memory and throughput sweep over batch sizes.
    Bench(BenchArgs),
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    ckpt_in: PathBuf,
    #[arg(long)]
    ckpt_out: PathBuf,
    /// Target number of KV-owning layers.
    #[arg(long)]
    m: usize,
    /// Target number of KV heads per owning layer.
    #[arg(long)]
    g: usize,
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Read the corpus as JSON lines with a "text" field.
    #[arg(long)]
    jsonl: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Model config for a fresh model (ignored with --ckpt-in).
    #[arg(long, required_unless_present = "ckpt_in")]
    config: Option<PathBuf>,
    /// Checkpoint to continue from.
    #[arg(long)]
    ckpt_in: Option<PathBuf>,
    #[arg(long)]
    ckpt_out: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Loss history CSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 6e-4)]
    lr: f64,
    /// Fraction of packed rows to train on.
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    ckpt_in: PathBuf,
    #[arg(long, default_value = "")]
    prompt: String,
    /// Number of tokens to generate.
    #[arg(long, default_value_t = 64)]
    tokens: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt_in: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
}

#[derive(Args)]
struct BenchArgs {
    /// Model configs to sweep (repeatable).
    #[arg(long, required = true)]
    config: Vec<PathBuf>,
    /// Override the sharing scheme of every config; requires --g.
    #[arg(long, requires = "g")]
    m: Option<usize>,
    #[arg(long, requires = "m")]
    g: Option<usize>,
    /// Comma-separated batch sizes.
    #[arg(long, value_delimiter = ',', required = true)]
    batches: Vec<usize>,
    #[arg(long)]
    budget_bytes: u64,
    /// Timed decode steps per cell.
    #[arg(long, default_value_t = DEFAULT_GEN)]
    tokens: usize,
    /// Bench CSV output.
    #[arg(long)]
    out: PathBuf,
    /// Gnuplot data output.
    #[arg(long)]
    dat: Option<PathBuf>,
    /// Skip timing; report the memory model only.
    #[arg(long)]
    memory_only: bool,
    /// Run timing cells one after another (cells never overlap in this build).
    #[arg(long)]
    strict_timing: bool,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
}

struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Capacity { .. } | Error::SequenceTooLong { .. } => (3, "capacity"),
            Error::NonFinite { .. } | Error::Diverged { .. } => (4, "numeric"),
            Error::Io(_) => (5, "io"),
            _ => (2, "validation"),
        };
        Failure {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        kind: "validation",
        message: message.into(),
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let first = text
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("error code=2 kind=usage: {first}");
            return ExitCode::from(2);
        }
    };
    let result = thread_cap().and_then(|_| match cli.command {
        Command::Convert(a) => convert(a),
        Command::Train(a) => train(a),
        Command::Generate(a) => generate(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => run_bench(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!(
                "error code={} kind={}: {}",
                f.code,
                f.kind,
                f.message.replace('\n', " ")
            );
            ExitCode::from(f.code)
        }
    }
}

/// Worker cap from `MLKV_THREADS` (0 or unset: automatic). All commands
/// currently run on a single thread, which satisfies any cap.
fn thread_cap() -> Result<usize, Failure> {
    match std::env::var("MLKV_THREADS") {
        Err(_) => Ok(0),
        Ok(v) => v.trim().parse().map_err(|_| {
            invalid(format!(
                "MLKV_THREADS must be a non-negative integer, got {v:?}"
            ))
        }),
    }
}

fn distinct(input: &Path, output: &Path) -> CmdResult {
    let same = match (input.canonicalize(), output.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    };
    if same {
        return Err(invalid(format!(
            "output {} would overwrite input",
            output.display()
        )));
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    Ok(BufWriter::new(File::create(path).map_err(Error::from)?))
}

fn convert(a: ConvertArgs) -> CmdResult {
    distinct(&a.ckpt_in, &a.ckpt_out)?;
    let src = Checkpoint::load(&a.ckpt_in)?;
    let s = src.config().share;
    let target = ShareConfig::new(s.layers(), s.heads(), a.m, a.g, s.head_dim())?;
    let out = merge_kv(&src, target)?;
    out.write(&a.ckpt_out)?;
    println!(
        "converted {} -> {}: d_ff {:?}, {} parameters",
        s,
        target,
        out.config().d_ff,
        mlkv_core::param_count(out.config())
    );
    Ok(())
}

fn load_rows(args: &CorpusArgs, max_seq: usize) -> Result<PackedDataset, Failure> {
    let format = if args.jsonl {
        CorpusFormat::Jsonl
    } else {
        CorpusFormat::Lines
    };
    let docs: Vec<Vec<usize>> = trainer::read_corpus(&args.corpus, format)?
        .iter()
        .map(|d| trainer::encode_bytes(d))
        .collect();
    let data = trainer::pack_documents(&docs, max_seq + 1, EOS)?;
    if data.rows.is_empty() {
        return Err(invalid(format!(
            "corpus {} is too small to fill one row of {} tokens",
            args.corpus.display(),
            max_seq + 1
        )));
    }
    Ok(data)
}

fn train(a: TrainArgs) -> CmdResult {
    let mut model: Model<f32> = match (&a.ckpt_in, &a.config) {
        (Some(path), _) => {
            distinct(path, &a.ckpt_out)?;
            Checkpoint::load(path)?.to_model()?
        }
        (None, Some(cfg)) => Model::init(ModelConfig::load(cfg)?, a.seed)?,
        (None, None) => return Err(invalid("train needs --config or --ckpt-in")),
    };
    let data = load_rows(&a.corpus, model.config().max_seq)?;
    let data = if a.fraction < 1.0 {
        data.subset(a.fraction, a.seed)?
    } else {
        data
    };
    let mut plan = TrainPlan::new(a.batch, a.steps, a.seed);
    plan.base_lr = a.lr;
    let history = trainer::uptrain(&mut model, &data, &plan)?;
    trainer::write_loss_csv(create(&a.out)?, &history)?;
    Checkpoint::from_model(&model).write(&a.ckpt_out)?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        println!(
            "trained {} steps on {} rows: loss {:.4} -> {:.4}",
            history.len(),
            data.row_count(),
            first.loss,
            last.loss
        );
    }
    Ok(())
}

fn generate(a: GenerateArgs) -> CmdResult {
    let model: Model<f32> = Checkpoint::load(&a.ckpt_in)?.to_model()?;
    let mut prompt = vec![trainer::BOS];
    prompt.extend(trainer::encode_bytes(&a.prompt));
    let total = prompt.len() + a.tokens;
    if total > model.config().max_seq {
        return Err(Error::SequenceTooLong {
            length: total,
            max_seq: model.config().max_seq,
        }
        .into());
    }
    let mut cache = model.new_cache(1, total)?;
    let mut logits = model.decode_step(&[prompt], &mut cache)?;
    let mut out = Vec::with_capacity(a.tokens);
    for _ in 0..a.tokens {
        let row = logits.row_slice(logits.rows() - 1);
        let next = (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best });
        out.push(next);
        if out.len() == a.tokens {
            break;
        }
        logits = model.decode_step(&[vec![next]], &mut cache)?;
    }
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{}{}", a.prompt, trainer::decode_bytes(&out)).map_err(Error::from)?;
    Ok(())
}

fn eval(a: EvalArgs) -> CmdResult {
    let model: Model<f32> = Checkpoint::load(&a.ckpt_in)?.to_model()?;
    let data = load_rows(&a.corpus, model.config().max_seq)?;
    let loss = trainer::eval_loss(&model, &data)?;
    println!("{loss:.6}");
    Ok(())
}

fn run_bench(a: BenchArgs) -> CmdResult {
    let mut configs = Vec::with_capacity(a.config.len());
    for path in &a.config {
        let mut cfg = ModelConfig::load(path)?;
        if let (Some(m), Some(g)) = (a.m, a.g) {
            let s = cfg.share;
            cfg = cfg.with_share(ShareConfig::new(s.layers(), s.heads(), m, g, s.head_dim())?)?;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("config");
        let s = cfg.share;
        configs.push((format!("{stem}-m{}g{}", s.kv_layers(), s.kv_groups()), cfg));
    }
    let seq = configs.iter().map(|(_, c)| c.max_seq).min().unwrap_or(0);
    let tokens = if a.memory_only {
        a.tokens.min(seq)
    } else {
        a.tokens
    };
    if tokens == 0 || tokens > seq {
        return Err(invalid(format!("--tokens must lie in 1..={seq}")));
    }
    let prefill = DEFAULT_PREFILL.min(seq - tokens);
    let timing = if a.memory_only {
        Timing::MemoryOnly
    } else {
        Timing::Measure {
            prefill,
            gen: tokens,
            seed: a.seed,
        }
    };
    let options = SweepOptions {
        seq: prefill + tokens,
        bytes_per_element: 4,
        timing,
    };
    let reports = bench::sweep(&configs, &a.batches, a.budget_bytes, options)?;
    bench::write_csv(create(&a.out)?, &reports)?;
    if let Some(dat) = &a.dat {
        bench::write_dat(create(dat)?, &reports)?;
    }
    for r in &reports {
        match r.max_fitting_batch() {
            Some(b) => println!("{}: max fitting batch {b}", r.config_id),
            None => println!("{}: no batch fits the budget", r.config_id),
        }
    }
    Ok(())
}
