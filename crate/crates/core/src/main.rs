use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dcelanm::backbone::BlockKind;
use dcelanm::data::{synth_dataset, write_dataset, Manifest, Split};
use dcelanm::error::{Error, ErrorClass, Result};
use dcelanm::gradsuite;
use dcelanm::train::{Checkpoint, RunConfig, Stage, Trainer, CHECKPOINT_FILE, REPORT_FILE};
use dcelanm::Rng;

#[derive(Parser)]
#[command(name = "dcelanm", version, about = "Polyp and lesion segmentation with a dual-channel ELAN network and a micro masked autoencoder")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Self-supervised pretraining of the bottleneck autoencoder.
    PretrainMae {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Keep the convolutional encoder fixed (features are computed once).
        #[arg(long)]
        freeze_cnn: bool,
    },
    /// Segmentation training with the combined objective.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Scores a checkpoint on a dataset split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Writes a binary mask for one image at its original resolution.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
    },
    /// Finite-difference check of every op and block.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Emits a synthetic dataset in the images/ + masks/ layout.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 256)]
        side: usize,
    },
    /// Prints the parameter count and a per-component table.
    Info {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Clone, Default)]
struct Common {
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory (output file for `predict`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    block: Option<BlockArg>,
    #[arg(long, value_enum)]
    mae: Option<Switch>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset directory (images/ + masks/ or manifest.tsv) or manifest file.
    #[arg(long)]
    data: PathBuf,
    /// Train and monitor on every sample instead of the train/val splits.
    #[arg(long)]
    all_splits: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum BlockArg {
    Elan,
    Dcelan,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl Common {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(b) = self.block {
            cfg.net.block = match b {
                BlockArg::Elan => BlockKind::Elan,
                BlockArg::Dcelan => BlockKind::Dcelan,
            };
        }
        if let Some(m) = self.mae {
            cfg.net.use_mae = matches!(m, Switch::On);
        }
        if let Some(r) = self.mask_ratio {
            cfg.net.mask_ratio = r;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(b) = self.batch {
            cfg.train.batch = b;
        }
        if let Some(lr) = self.lr {
            cfg.train.lr = lr;
        }
        if let Some(t) = self.threshold {
            cfg.train.threshold = t;
        }
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()
    }

    /// Defaults, then the config file, then flags.
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        self.apply(&mut cfg)?;
        Ok(cfg)
    }

    fn out_dir(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }

    fn require_checkpoint(&self) -> Result<Checkpoint> {
        let p = self
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("--checkpoint is required".into()))?;
        Checkpoint::load(p)
    }

    /// Trainer from a checkpoint, with the threshold flag honoured.
    fn trainer_from_checkpoint(&self) -> Result<Trainer> {
        let ck = self.require_checkpoint()?;
        let mut t = Trainer::resume(&ck)?;
        if let Some(th) = self.threshold {
            t.cfg.train.threshold = th;
            t.cfg.validate()?;
        }
        Ok(t)
    }
}

/// Training and monitoring samples.
fn load_splits(args: &DataArgs) -> Result<(Vec<dcelanm::data::SegSample>, Vec<dcelanm::data::SegSample>)> {
    let m = Manifest::open(&args.data)?;
    if args.all_splits {
        let all = m.load_all()?;
        return Ok((all.clone(), all));
    }
    let train = m.with_split(Split::Train).load_all()?;
    if train.is_empty() {
        return Err(Error::Data(format!("{}: no samples in the train split", args.data.display())));
    }
    let val = m.with_split(Split::Val).load_all()?;
    let monitor = if val.is_empty() { train.clone() } else { val };
    Ok((train, monitor))
}

fn pretrain(common: &Common, data: &DataArgs, freeze_cnn: bool) -> Result<()> {
    let mut cfg = common.config()?;
    cfg.train.freeze_cnn |= freeze_cnn;
    if !cfg.net.use_mae {
        return Err(Error::Config("pretrain-mae needs the MAE enabled".into()));
    }
    let (train, _) = load_splits(data)?;
    let out = common.out_dir("runs/pretrain");
    let mut t = match &common.checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.state.stage != Stage::Pretrain {
                return Err(Error::Checkpoint("not a pretraining checkpoint".into()));
            }
            Trainer::resume(&ck)?
        }
        None => Trainer::new(cfg)?,
    };
    let losses = t.pretrain(&train, Some(&out))?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!("reconstruction loss {first:.6e} -> {last:.6e} over {} epochs", losses.len());
    }
    println!("checkpoint {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn train(common: &Common, data: &DataArgs) -> Result<()> {
    let (train, monitor) = load_splits(data)?;
    let out = common.out_dir("runs/train");
    let mut t = match &common.checkpoint {
        None => Trainer::new(common.config()?)?,
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            match ck.state.stage {
                Stage::Pretrain => {
                    let mut t = Trainer::new(common.config()?)?;
                    let n = t.load_pretrained_mae(&ck)?;
                    log::info!("initialised {n} autoencoder tensors from {}", p.display());
                    t
                }
                Stage::Train => {
                    let mut cfg = ck.config.clone();
                    common.apply(&mut cfg)?;
                    if cfg.net != ck.config.net {
                        return Err(Error::Checkpoint("network flags differ from the checkpoint being resumed".into()));
                    }
                    let mut t = Trainer::resume(&ck)?;
                    t.cfg = cfg;
                    t
                }
            }
        }
    };
    let summary = t.fit(&train, &monitor, Some(&out))?;
    match &summary.last_report {
        Some(r) => println!("{r}"),
        None => println!("final loss {:.6}", summary.final_loss),
    }
    println!("checkpoint {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn eval(common: &Common, data: &Path, split: SplitArg) -> Result<()> {
    let t = common.trainer_from_checkpoint()?;
    let m = Manifest::open(data)?;
    let m = match split {
        SplitArg::All => m,
        SplitArg::Train => m.with_split(Split::Train),
        SplitArg::Val => m.with_split(Split::Val),
        SplitArg::Test => m.with_split(Split::Test),
    };
    let samples = m.load_all()?;
    let report = t.evaluate(&samples)?;
    let text = report.to_text();
    if let Some(dir) = &common.out {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        let p = dir.join(REPORT_FILE);
        std::fs::write(&p, &text).map_err(|e| Error::Io { path: p, source: e })?;
    }
    print!("{text}");
    Ok(())
}

fn predict(common: &Common, image: &Path) -> Result<()> {
    let t = common.trainer_from_checkpoint()?;
    let out = match &common.out {
        Some(p) if p.is_dir() => p.join(mask_name(image)),
        Some(p) => p.clone(),
        None => PathBuf::from(mask_name(image)),
    };
    t.predict_file(image, &out)?;
    println!("{}", out.display());
    Ok(())
}

fn mask_name(image: &Path) -> String {
    format!("{}_mask.png", image.file_stem().unwrap_or_default().to_string_lossy())
}

fn gradcheck(common: &Common) -> Result<bool> {
    let results = gradsuite::run(common.seed.unwrap_or(0))?;
    let mut ok = true;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        ok &= r.passed();
        println!("{status:<4} {:<40} rel err {:.2e} (tol {:.0e}, {} inputs)", r.name, r.max_rel_err, r.tolerance, r.input_len);
    }
    println!("{} of {} checks passed", results.iter().filter(|r| r.passed()).count(), results.len());
    Ok(ok)
}

fn synth(common: &Common, count: usize, side: usize) -> Result<()> {
    let out = common.out_dir("synth");
    let samples = synth_dataset(count, side, &mut Rng::new(common.seed.unwrap_or(0)))?;
    let m = write_dataset(&out, &samples)?;
    println!("{} samples written to {}", m.entries.len(), out.display());
    Ok(())
}

fn info(common: &Common) -> Result<()> {
    let cfg = match &common.checkpoint {
        Some(p) => {
            let mut c = Checkpoint::load(p)?.config;
            common.apply(&mut c)?;
            c
        }
        None => common.config()?,
    };
    let t = Trainer::new(cfg)?;
    for (name, n) in t.net.layer_table() {
        println!("{name:<16} {n:>12}");
    }
    println!("{:<16} {:>12}", "total", t.net.param_count());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Command::PretrainMae { common, data, freeze_cnn } => pretrain(&common, &data, freeze_cnn)?,
        Command::Train { common, data } => train(&common, &data)?,
        Command::Eval { common, data, split } => eval(&common, &data, split)?,
        Command::Predict { common, image } => predict(&common, &image)?,
        Command::Gradcheck { common } => return gradcheck(&common),
        Command::Synth { common, count, side } => synth(&common, count, side)?,
        Command::Info { common } => info(&common)?,
    }
    Ok(true)
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Checkpoint => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
