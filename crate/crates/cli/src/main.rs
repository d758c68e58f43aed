//! `linearize`: pretrain a tiny byte-level transformer, linearize its attention,
//! adjust it with low-rank adapters, and measure or plan the result.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use linearize_core::bench::{bench_generation, BenchMode, BenchResult};
use linearize_core::config::RunConfig;
use linearize_core::model::{
    detokenize, generate_greedy, load_checkpoint, save_checkpoint, Model, PrefillMode, BOS,
};
use linearize_core::plan::{plan_blockwise_storage, DEFAULT_PRECISION_BYTES};
use linearize_core::train::{layerwise_diagnostics, pretrain, train_adjust, train_transfer, Diagnostics};
use linearize_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "linearize", version, about)]
struct Cli {
    /// Seed for initialization, data order and every stage; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Checkpoint to start from.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Where to write the stage's checkpoint or report.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the softmax-attention teacher on next-token prediction.
    Pretrain {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Swap in hybrid attention and train it to match the teacher's attention outputs.
    Transfer {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train low-rank adapters on the linearized model.
    Adjust {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Greedy continuation of a prompt, written to stdout.
    Generate {
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, value_enum, default_value_t = Prefill::Chunked)]
        prefill: Prefill,
    },
    /// Per-layer attention-matching error and entropy as CSV.
    Diag,
    /// Generation throughput and state/cache memory.
    Bench {
        #[arg(long, value_enum, default_value_t = Mode::Both)]
        mode: Mode,
        #[arg(long)]
        gen_len: Option<usize>,
    },
    /// Disk needed to store block boundaries for block-wise transfer.
    Plan {
        #[arg(long)]
        tokens: u64,
        #[arg(long)]
        dim: u64,
        #[arg(long)]
        layers: u64,
        #[arg(long)]
        block: u64,
        #[arg(long, default_value_t = DEFAULT_PRECISION_BYTES)]
        precision: u64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Prefill {
    Chunked,
    Naive,
    Stepwise,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum Mode {
    Hybrid,
    Softmax,
    Both,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn load(path: &Path) -> Result<Model> {
    log::info!("loading {}", path.display());
    load_checkpoint(path)
}

fn save(model: &Model, path: &Path) -> Result<()> {
    save_checkpoint(model, path)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn out_or(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// The starting model: the given checkpoint, or a fresh pretrained teacher.
fn teacher(cli: &Cli, cfg: &RunConfig) -> Result<Model> {
    if let Some(p) = &cli.checkpoint {
        return load(p);
    }
    let mut model = Model::build(cfg.model_config()?)?;
    if cfg.pretrain.steps > 0 {
        let (train, eval) = cfg.corpora()?;
        let r = pretrain(&mut model, &cfg.pretrain, &train, &eval)?;
        log::info!("pretrain eval loss {:.4} -> {:.4}", r.initial_eval_loss, r.final_eval_loss);
    }
    Ok(model)
}

fn diagnostics(model: &Model, cfg: &RunConfig) -> Result<Diagnostics> {
    let (_, eval) = cfg.corpora()?;
    let t = &cfg.transfer;
    let batches = eval.fixed_batches(t.eval_batches.max(1), t.batch_size, t.seq_len)?;
    layerwise_diagnostics(model, &batches)
}

fn bench_lines(r: &BenchResult) -> String {
    format!(
        "mode={:?} batch_size={} prompt_len={} gen_len={} tokens_per_sec={:.1} peak_state_bytes={} peak_cache_bytes={} wall_time_secs={:.3}\n",
        r.mode, r.batch_size, r.prompt_len, r.gen_len, r.tokens_per_sec, r.peak_state_bytes, r.peak_cache_bytes, r.wall_time_secs
    )
    .to_lowercase()
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::Pretrain { steps } => cfg.pretrain.steps = steps.unwrap_or(cfg.pretrain.steps),
        Command::Transfer { steps } => cfg.transfer.steps = steps.unwrap_or(cfg.transfer.steps),
        Command::Adjust { steps } => cfg.adjust.steps = steps.unwrap_or(cfg.adjust.steps),
        Command::Bench { gen_len, .. } => cfg.bench.gen_len = gen_len.unwrap_or(cfg.bench.gen_len),
        _ => {}
    }
    log::info!("resolved config:\n{}", cfg.resolved());

    match &cli.command {
        Command::Pretrain { .. } => {
            let mut model = Model::build(cfg.model_config()?)?;
            let (train, eval) = cfg.corpora()?;
            let r = pretrain(&mut model, &cfg.pretrain, &train, &eval)?;
            log::info!("pretrain eval loss {:.4} -> {:.4} in {:.1}s", r.initial_eval_loss, r.final_eval_loss, r.wall_time_secs);
            save(&model, &out_or(&cli, "runs/pretrained.lolc"))
        }
        Command::Transfer { .. } => {
            let mut model = teacher(&cli, &cfg)?;
            if !model.is_converted() {
                model.convert(cfg.hybrid_spec(), cfg.seed)?;
            }
            let (train, eval) = cfg.corpora()?;
            let r = train_transfer(&mut model, &cfg.transfer, &train, &eval)?;
            log::info!("transfer eval mse {:.4e} -> {:.4e} in {:.1}s", r.initial_eval_loss, r.final_eval_loss, r.wall_time_secs);
            let out = out_or(&cli, "runs/transfer.lolc");
            save(&model, &out)?;
            let csv = out.with_extension("csv");
            r.diagnostics.write_csv(&csv)?;
            log::info!("wrote {}", csv.display());
            Ok(())
        }
        Command::Adjust { .. } => {
            let path = cli.checkpoint.clone().unwrap_or_else(|| PathBuf::from("runs/transfer.lolc"));
            let mut model = load(&path)?;
            let (train, eval) = cfg.corpora()?;
            let r = train_adjust(&mut model, &cfg.adjust, &train, &eval)?;
            log::info!("adjust eval loss {:.4} -> {:.4} in {:.1}s", r.initial_eval_loss, r.final_eval_loss, r.wall_time_secs);
            save(&model, &out_or(&cli, "runs/adjust.lolc"))
        }
        Command::Generate { prompt, n, prefill } => {
            let model = match &cli.checkpoint {
                Some(p) => load(p)?,
                None => {
                    log::warn!("no checkpoint given; generating from untrained weights");
                    Model::build(cfg.model_config()?)?
                }
            };
            let mut ids = vec![BOS];
            ids.extend(prompt.bytes().map(u32::from));
            let mode = match prefill {
                Prefill::Chunked => PrefillMode::Chunked,
                Prefill::Naive => PrefillMode::Naive,
                Prefill::Stepwise => PrefillMode::Stepwise,
            };
            let out = generate_greedy(&model, &ids, *n, mode)?;
            let bytes = detokenize(&out, model.config().vocab_size)?;
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(&bytes)
                .and_then(|_| stdout.flush())
                .map_err(|e| Error::Io {
                    path: PathBuf::from("<stdout>"),
                    source: e,
                })
        }
        Command::Diag => {
            let path = cli.checkpoint.clone().unwrap_or_else(|| PathBuf::from("runs/transfer.lolc"));
            let model = load(&path)?;
            let d = diagnostics(&model, &cfg)?;
            log::info!("mean effective sequence length {:.3}", d.mean_esl);
            match &cli.out {
                Some(p) => d.write_csv(p),
                None => {
                    print!("{}", d.to_csv());
                    Ok(())
                }
            }
        }
        Command::Bench { mode, .. } => {
            let model = match &cli.checkpoint {
                Some(p) => load(p)?,
                None => {
                    let mut m = Model::build(cfg.model_config()?)?;
                    m.convert(cfg.hybrid_spec(), cfg.seed)?;
                    m
                }
            };
            let modes: &[BenchMode] = match mode {
                Mode::Hybrid => &[BenchMode::Hybrid],
                Mode::Softmax => &[BenchMode::Softmax],
                Mode::Both => &[BenchMode::Hybrid, BenchMode::Softmax],
            };
            let mut report = String::new();
            for &m in modes {
                report += &bench_lines(&bench_generation(&model, m, &cfg.bench)?);
            }
            print!("{report}");
            match &cli.out {
                Some(p) => write_text(p, &report),
                None => Ok(()),
            }
        }
        Command::Plan {
            tokens,
            dim,
            layers,
            block,
            precision,
        } => {
            let report = plan_blockwise_storage(*tokens, *dim, *layers, *block, *precision)?.report();
            print!("{report}");
            match &cli.out {
                Some(p) => write_text(p, &report),
                None => Ok(()),
            }
        }
    }
}
