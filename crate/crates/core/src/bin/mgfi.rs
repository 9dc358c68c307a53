use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use mgfi::checks::{self, GRAD_TOL};
use mgfi::data::{load_checkpoint, read_dataset, synth_generate, write_dataset, SplitName};
use mgfi::loss::CannyConfig;
use mgfi::metrics::csv_table;
use mgfi::network::NetworkParams;
use mgfi::ops::{self, Mode};
use mgfi::params::Module;
use mgfi::train::{ablate, ablation_csv, evaluate, infer, train, EpochRecord, TrainConfig, ABLATION_FILE};
use mgfi::{Error, Result, Shape, Tensor};

#[derive(Parser)]
#[command(name = "mgfi", version, about = "Multi-grained feature integration segmentation network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset described by a training config.
    SynthData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with early stopping; writes best.ckpt and report.json.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on one split of a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitName,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        /// Score the ground truth itself instead of the network output.
        #[arg(long)]
        oracle: bool,
    },
    /// Segment one image; writes `<stem>_mask.pgm` and `<stem>_edge.pgm`.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, conflicts_with = "all")]
        op: Option<String>,
        #[arg(long)]
        all: bool,
        /// List the available checks.
        #[arg(long)]
        list: bool,
    },
    /// Train and test the full model and the four ablation variants.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter and multiply-accumulate counts of a model config.
    Stats {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Input height and width.
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    let Some(path) = path else { return Ok(TrainConfig::default()) };
    let text = fs::read_to_string(path).map_err(|e| Error::Invalid(format!("config {}: {e}", path.display())))?;
    let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("config {}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn print_epoch(prefix: &str, start: Instant, r: &EpochRecord) {
    eprintln!(
        "{prefix}epoch {:>3}  loss {:.4} (ce {:.4} dice {:.4} boundary {:.4})  val dice {:.4} iou {:.4}  {:.1}s",
        r.epoch,
        r.train.total,
        r.train.ce,
        r.train.dice,
        r.train.boundary,
        r.val.dice,
        r.val.iou,
        start.elapsed().as_secs_f64()
    );
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::SynthData { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let samples = synth_generate(&cfg.synth)?;
            let m = write_dataset(&out, &samples, cfg.seed, Some(&cfg.synth))?;
            println!("wrote {} samples to {}", m.files.len(), out.display());
        }
        Command::Train { config, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if out.is_some() {
                cfg.out_dir = out;
            }
            let dir = cfg.out_dir.get_or_insert_with(|| PathBuf::from("runs/train")).clone();
            let start = Instant::now();
            let outcome = train(&cfg, |r| print_epoch("", start, r))?;
            let r = &outcome.report;
            println!("best epoch {} (val dice {:.4}), checkpoint {}", r.best_epoch, r.best_val_dice, dir.join("best.ckpt").display());
            if let Some(t) = &r.test {
                print!("{}", csv_table(&[("mgfi".into(), *t)]));
            }
        }
        Command::Eval { ckpt, data, split, batch, oracle } => {
            let mut params = load_checkpoint(&ckpt)?;
            let ds = read_dataset(&data)?;
            let samples = ds.part(split);
            if samples.is_empty() {
                return Err(Error::Data(format!("split {split:?} of {} is empty", data.display())));
            }
            let ev = evaluate(&mut params, samples, batch, &CannyConfig::default(), oracle)?;
            let name = if oracle { "oracle" } else { "mgfi" };
            print!("{}", csv_table(&[(name.into(), ev.metrics)]));
        }
        Command::Infer { ckpt, image, out } => {
            let mut params = load_checkpoint(&ckpt)?;
            let o = infer(&mut params, &image, &out)?;
            println!("{}", o.mask.display());
            if let Some(e) = o.edge {
                println!("{}", e.display());
            }
        }
        Command::Gradcheck { op, all, list } => {
            if list {
                checks::CHECKS.iter().for_each(|c| println!("{c}"));
                return Ok(ExitCode::SUCCESS);
            }
            let names: Vec<&str> = match (op.as_deref(), all) {
                (Some(name), _) => vec![name],
                (None, _) => checks::CHECKS.to_vec(),
            };
            let mut failed = 0;
            for name in names {
                let r = checks::run_check(name)?;
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                println!("{:<22} {:>10.3e}  {}  ({} cases, {} evaluations)", r.name, r.max_rel_error, verdict, r.cases, r.evaluations);
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                eprintln!("{failed} check(s) above the {GRAD_TOL:e} tolerance");
                return Ok(ExitCode::from(3));
            }
        }
        Command::Ablate { config, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if out.is_some() {
                cfg.out_dir = out;
            }
            let dir = cfg.out_dir.get_or_insert_with(|| PathBuf::from("runs/ablate")).clone();
            fs::create_dir_all(&dir)?;
            let start = Instant::now();
            let rows = ablate(&cfg, |name, r| print_epoch(&format!("[{name}] "), start, r))?;
            print!("{}", ablation_csv(&rows));
            eprintln!("table written to {}", dir.join(ABLATION_FILE).display());
        }
        Command::Stats { config, size } => {
            let cfg = load_config(config.as_deref())?;
            let model = cfg.model_config();
            let mut params = NetworkParams::<f32>::init(&model)?;
            let x = Tensor::zeros(Shape::new(1, model.input_channels, size, size));
            model.check_input(x.shape())?;
            let (_, macs) = ops::measure_macs(|| params.forward(&x, Mode::Eval));
            println!("parameters {}", params.parameter_count());
            println!("tensors {}", params.named_tensors().len());
            println!("macs_per_image {macs} ({size}x{size})");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
