mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use asrtts::data::{gen_corpus, Corpus, GenConfig, MANIFEST_NAME};
use asrtts::harness::{evaluate_split, init_checkpoint, pretrain, train_cycle, Checkpoint, Mode, Models, TrainConfig, Which};
use asrtts::Error;
use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};

#[derive(Parser)]
#[command(name = "asrtts", version, about = "Cycle-consistency ASR/TTS training on synthetic corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and its manifest.
    GenData {
        /// Corpus generation config (JSON); defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain one model on supervised data.
    Pretrain {
        #[arg(long, value_enum)]
        which: WhichArg,
        /// Training config (JSON); defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus manifest.
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for the checkpoint and metrics.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Cycle training from pretrained checkpoints.
    Train {
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Training config (JSON); defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus manifest.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        asr: PathBuf,
        /// Required for so, to and st.
        #[arg(long)]
        tts: Option<PathBuf>,
        /// Required for so and st.
        #[arg(long)]
        lm: Option<PathBuf>,
        /// Output directory for final.ckpt and metrics.csv.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Greedy-decode a split and report token error rate and NLL.
    Eval {
        /// Checkpoint holding an ASR model.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        split: String,
        /// Corpus manifest.
        #[arg(long)]
        manifest: PathBuf,
        /// Also write the result as JSON to this path.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Longest hypothesis decoded.
        #[arg(long, default_value_t = 12)]
        max_len: usize,
    },
    /// Render a metrics CSV as an SVG plus a downsampled CSV.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        /// SVG path; the downsampled CSV is written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Maximum points kept per series.
        #[arg(long, default_value_t = 500)]
        max_points: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum WhichArg {
    Asr,
    Tts,
    Lm,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ModeArg {
    Baseline,
    So,
    To,
    St,
}

/// A failure with its process exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }

    fn io(message: impl Into<String>) -> Self {
        Failure { code: 3, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Contract(_) | Error::Shape { .. } => 2,
            Error::Io { .. } | Error::Format { .. } => 3,
            Error::Numeric(_) => 4,
        };
        Failure { code, message: e.to_string() }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::GenData { config, out, seed } => {
            let mut cfg = match config {
                Some(p) => {
                    let cfg: GenConfig = serde_json::from_str(&read_config(&p)?)
                        .map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
                    cfg
                }
                None => GenConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            gen_corpus(&cfg, &out)?;
            println!("{}", out.join(MANIFEST_NAME).display());
        }
        Command::Pretrain {
            which,
            config,
            manifest,
            out,
            seed,
        } => {
            let cfg = train_config(config.as_deref(), seed)?;
            let corpus = Corpus::load(&manifest)?;
            let which = match which {
                WhichArg::Asr => Which::Asr,
                WhichArg::Tts => Which::Tts,
                WhichArg::Lm => Which::Lm,
            };
            let label = format!("{which:?}").to_lowercase();
            let outcome = pretrain(which, &cfg, &corpus)?;
            create_dir(&out)?;
            let ckpt = out.join(format!("{label}.ckpt"));
            outcome.checkpoint.save(&ckpt)?;
            write(&out.join(format!("{label}.metrics.csv")), &outcome.metrics.to_csv())?;
            if let Some(e) = outcome.diverged {
                return Err(Failure {
                    code: 4,
                    message: format!("{e}; last finite checkpoint written to {}", ckpt.display()),
                });
            }
            println!("{}", ckpt.display());
        }
        Command::Train {
            mode,
            config,
            manifest,
            asr,
            tts,
            lm,
            out,
            seed,
        } => {
            let mut cfg = train_config(config.as_deref(), seed)?;
            cfg.mode = match mode {
                ModeArg::Baseline => Mode::Baseline,
                ModeArg::So => Mode::So,
                ModeArg::To => Mode::To,
                ModeArg::St => Mode::St,
            };
            let needs_tts = mode != ModeArg::Baseline;
            let needs_lm = matches!(mode, ModeArg::So | ModeArg::St);
            if needs_tts && tts.is_none() {
                return Err(Failure::usage(format!("--tts is required for --mode {:?}", cfg.mode).to_lowercase()));
            }
            if needs_lm && lm.is_none() {
                return Err(Failure::usage(format!("--lm is required for --mode {:?}", cfg.mode).to_lowercase()));
            }
            if mode == ModeArg::Baseline && (tts.is_some() || lm.is_some()) {
                warn!("baseline mode ignores --tts and --lm");
            }
            if mode == ModeArg::To && lm.is_some() {
                warn!("to mode ignores --lm");
            }
            let corpus = Corpus::load(&manifest)?;
            let asr_model = load_model(&asr, "asr", |c| c.asr)?;
            let tts_model = match tts.filter(|_| needs_tts) {
                Some(p) => load_model(&p, "tts", |c| c.tts)?,
                None => init_checkpoint(Which::Tts, &cfg, &corpus).tts.expect("initialised"),
            };
            let lm_model = match lm.filter(|_| needs_lm) {
                Some(p) => load_model(&p, "lm", |c| c.lm)?,
                None => init_checkpoint(Which::Lm, &cfg, &corpus).lm.expect("initialised"),
            };
            let models = Models {
                asr: asr_model,
                tts: tts_model,
                lm: lm_model,
            };
            let outcome = train_cycle(&cfg, &corpus, models, None)?;
            create_dir(&out)?;
            outcome.checkpoint.save(&out.join("final.ckpt"))?;
            write(&out.join("metrics.csv"), &outcome.metrics.to_csv())?;
            info!("wrote {}", out.join("final.ckpt").display());
        }
        Command::Eval {
            ckpt,
            split,
            manifest,
            json,
            max_len,
        } => {
            let corpus = Corpus::load(&manifest)?;
            let asr = load_model(&ckpt, "asr", |c| c.asr)?;
            let r = evaluate_split(&asr, &corpus, &split, None, max_len)?;
            println!("ter={:.4} nll={:.4}", r.ter, r.nll);
            if let Some(p) = json {
                let v = serde_json::json!({ "split": split, "ter": r.ter, "nll": r.nll });
                write(&p, &format!("{v}\n"))?;
            }
        }
        Command::Plot { metrics, out, max_points } => {
            let text = fs::read_to_string(&metrics).map_err(|e| Failure::io(format!("{}: {e}", metrics.display())))?;
            let series = plot::parse_metrics(&text).map_err(|e| Failure::io(format!("{}: {e}", metrics.display())))?;
            let series = plot::downsample(series, max_points.max(2));
            write(&out, &plot::render_svg(&series))?;
            write(&out.with_extension("csv"), &plot::render_csv(&series))?;
        }
    }
    Ok(())
}

fn read_config(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))
}

fn train_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig, Failure> {
    let mut cfg = match path {
        Some(p) => TrainConfig::from_json(&read_config(p)?).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_model<T>(path: &Path, what: &str, take: impl FnOnce(Checkpoint) -> Option<T>) -> Result<T, Failure> {
    let ck = Checkpoint::load(path)?;
    take(ck).ok_or_else(|| Failure::usage(format!("checkpoint {} holds no {what} model", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::io(format!("{}: {e}", dir.display())))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}
