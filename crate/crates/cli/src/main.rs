//! `tmu`: dataset generation, source pretraining, transfer training,
//! evaluation and transfer-gate inspection.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tmu::checkpoint::Checkpoint;
use tmu::data::{BlobConfig, Dataset, Generator, GlyphConfig, Split, SplitSizes};
use tmu::network::{CellKind, NetworkConfig, Predictor};
use tmu::train::{evaluate, model_from_checkpoint, network_for, Mode, Profile, TrainConfig, Trainer};
use tmu::transfer::{beta_warning, DEFAULT_BETA};
use tmu::{encode_kv, file_digest, write_atomic, Error, Result, Tensor};

#[derive(Parser, Debug)]
#[command(name = "tmu", version, about = "Transferable-memory video prediction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a procedural dataset file.
    GenData(GenDataArgs),
    /// Train a ConvLSTM source model from scratch.
    Pretrain(PretrainArgs),
    /// Train a TMU target model (scratch, finetune or transfer).
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Evaluate(EvaluateArgs),
    /// Mean transfer-gate activation per source.
    InspectGates(InspectArgs),
    /// Describe a dataset or checkpoint file, or list the built-in profiles.
    Info(InfoArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Glyphs,
    Blobs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, value_enum, default_value = "glyphs")]
    kind: Kind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training sequences; validation and test splits are sized from it.
    #[arg(long)]
    count: Option<usize>,
    /// Frame side length in pixels.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, default_value_t = 1)]
    num_glyphs: usize,
    /// Fraction of near-empty blob sequences.
    #[arg(long, default_value_t = 0.0)]
    aridity: f64,
    #[arg(long)]
    input_len: Option<usize>,
    #[arg(long)]
    predict_len: Option<usize>,
    /// Use the small profile's defaults.
    #[arg(long)]
    tiny: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ArchArgs {
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    filter_size: Option<usize>,
    #[arg(long)]
    subscale: Option<usize>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Checkpoint path; the metric log is written next to it with a `.log` suffix.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    /// Fraction of the training split to sample minibatches from.
    #[arg(long, default_value_t = 1.0)]
    subset_fraction: f64,
    /// Iterations between validations.
    #[arg(long)]
    val_every: Option<usize>,
    /// Validations without improvement before stopping early.
    #[arg(long)]
    patience: Option<usize>,
    /// Iterations between checkpoint writes (defaults to the validation cadence).
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Continue from `--out` if it exists. Training settings come from the
    /// checkpoint, except that `--iters` may extend the budget.
    #[arg(long)]
    resume: bool,
    /// Use the small profile's defaults.
    #[arg(long)]
    tiny: bool,
    #[command(flatten)]
    arch: ArchArgs,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_parser = parse_mode)]
    mode: Mode,
    /// Source checkpoint; repeat for several sources, in bank order.
    #[arg(long)]
    source: Vec<PathBuf>,
    /// Weight of the distillation loss.
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Intensity threshold in [0, 1] for the CSI column.
    #[arg(long)]
    csi_threshold: Option<f64>,
    /// Score only the leading fraction of the split.
    #[arg(long, default_value_t = 1.0)]
    subset_fraction: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Write the report as key=value lines.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write per-frame curves as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InfoArgs {
    path: Option<PathBuf>,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    Mode::parse(s).map_err(|e| e.to_string())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) => 1,
        Error::Format(_) | Error::Io(_) | Error::ShapeMismatch { .. } => 2,
        Error::Numeric(_) => 3,
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
    let result = match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Pretrain(a) => train(&a.run, Mode::Scratch, CellKind::ConvLstm, &[], DEFAULT_BETA),
        Command::Train(a) => train(&a.run, a.mode, CellKind::Tmu, &a.source, a.beta),
        Command::Evaluate(a) => evaluate_cmd(&a),
        Command::InspectGates(a) => inspect_gates(&a),
        Command::Info(a) => info(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn profile(tiny: bool) -> Profile {
    if tiny {
        Profile::tiny()
    } else {
        Profile::desk()
    }
}

fn print_kv(prefix: &str, kv: &[(String, String)]) {
    for (k, v) in kv {
        println!("{prefix}{k}={v}");
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let p = profile(a.tiny);
    let size = a.size.unwrap_or(p.frame_size);
    let count = a.count.unwrap_or(p.train_count);
    let input_len = a.input_len.unwrap_or(p.input_len);
    let predict_len = a.predict_len.unwrap_or(p.predict_len);
    let generator: Box<dyn Generator> = match a.kind {
        Kind::Glyphs => {
            let mut g = GlyphConfig::new(a.num_glyphs, size);
            g.input_len = input_len;
            g.predict_len = predict_len;
            Box::new(g)
        }
        Kind::Blobs => {
            let mut b = BlobConfig::new(size, a.aridity);
            b.input_len = input_len;
            b.predict_len = predict_len;
            Box::new(b)
        }
    };
    let sizes = SplitSizes::from_train(count);
    println!("command=gen-data");
    println!("seed={}", a.seed);
    println!("generator={}", generator.name());
    print_kv("", &generator.config_kv());
    println!("train={} val={} test={}", sizes.train, sizes.val, sizes.test);
    let data = Dataset::generate(generator.as_ref(), a.seed, sizes)?;
    data.save(&a.out)?;
    println!("out={}", a.out.display());
    Ok(())
}

fn log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log");
    PathBuf::from(s)
}

fn line_iter(line: &str) -> Option<usize> {
    line.strip_prefix("iter=")?.split(' ').next()?.parse().ok()
}

struct LoadedSource {
    path: PathBuf,
    digest: String,
    model: Predictor,
}

fn load_source(path: &Path) -> Result<LoadedSource> {
    let digest = file_digest(path)?;
    let model = model_from_checkpoint(&Checkpoint::load(path)?)?;
    if model.num_sources() != 0 {
        return Err(Error::Usage(format!(
            "{} was itself trained with sources; only plain predictors can serve as sources",
            path.display()
        )));
    }
    Ok(LoadedSource {
        path: path.to_path_buf(),
        digest,
        model,
    })
}

fn resolve_arch(run: &RunArgs, p: &Profile, kind: CellKind) -> NetworkConfig {
    let mut net = p.network.clone();
    net.kind = kind;
    if let Some(v) = run.arch.layers {
        net.num_layers = v;
    }
    if let Some(v) = run.arch.channels {
        net.channels = v;
    }
    if let Some(v) = run.arch.filter_size {
        net.filter_size = v;
    }
    if let Some(v) = run.arch.subscale {
        net.subscale_factor = v;
    }
    net
}

fn train(run: &RunArgs, mode: Mode, kind: CellKind, source_paths: &[PathBuf], beta: f64) -> Result<()> {
    let p = profile(run.tiny);
    let data = Dataset::load(&run.dataset)?;
    let loaded = source_paths.iter().map(|s| load_source(s)).collect::<Result<Vec<_>>>()?;
    let models: Vec<Predictor> = loaded.iter().map(|s| s.model.clone()).collect();
    let log_file = log_path(&run.out);

    let resuming = run.resume && run.out.exists();
    let (mut trainer, mut log) = if resuming {
        let ckpt = Checkpoint::load(&run.out)?;
        let mut t = Trainer::resume(&ckpt, &data, &models)?;
        let done = t.iteration();
        if let Some(iters) = run.iters {
            if iters < done {
                return Err(Error::Usage(format!("--iters {iters} is below the {done} iterations already run")));
            }
            t.config.max_iters = iters;
        }
        let previous = fs::read_to_string(&log_file).unwrap_or_default();
        let kept: Vec<String> = previous
            .lines()
            .filter(|l| line_iter(l).is_some_and(|i| i <= done))
            .map(str::to_string)
            .collect();
        (t, kept)
    } else {
        let config = TrainConfig {
            mode,
            lr: run.lr.unwrap_or(TrainConfig::default().lr),
            batch_size: run.batch_size.unwrap_or(p.batch_size),
            max_iters: run.iters.unwrap_or(match kind {
                CellKind::ConvLstm => p.source_iters,
                CellKind::Tmu => p.target_iters,
            }),
            beta,
            seed: run.seed,
            val_every: run.val_every.unwrap_or(TrainConfig::default().val_every),
            patience: run.patience.unwrap_or(TrainConfig::default().patience),
            subset_fraction: run.subset_fraction,
            ..TrainConfig::default()
        };
        let net = network_for(&resolve_arch(run, &p, kind), &data);
        (Trainer::new(config, net, &data, &models)?, Vec::new())
    };

    println!("command={}", if kind == CellKind::ConvLstm { "pretrain" } else { "train" });
    println!("seed={}", trainer.config.seed);
    println!("profile={}", p.name);
    println!("dataset={}", run.dataset.display());
    println!("dataset.generator={} dataset.seed={}", data.generator, data.seed);
    print_kv("train.", &trainer.config.to_kv());
    print_kv("net.", &trainer.model().config.to_kv());
    for (i, s) in loaded.iter().enumerate() {
        println!("source{i}={} sha256={}", s.path.display(), s.digest);
    }
    if resuming {
        println!("resume_from_iter={}", trainer.iteration());
    }
    if trainer.config.mode == Mode::Transfer {
        if let Some(w) = beta_warning(trainer.config.beta) {
            eprintln!("warning: {w}");
        }
    }

    let every = run.checkpoint_every.unwrap_or(trainer.config.val_every).max(1);
    let save = |t: &Trainer, log: &[String]| -> Result<()> {
        let mut ckpt = t.checkpoint();
        for (i, s) in loaded.iter().enumerate() {
            ckpt.config.push((format!("source{i}.path"), s.path.display().to_string()));
            ckpt.config.push((format!("source{i}.sha256"), s.digest.clone()));
        }
        ckpt.save(&run.out)?;
        let mut text = log.join("\n");
        text.push('\n');
        write_atomic(&log_file, text.as_bytes())
    };
    while !trainer.is_done() {
        let target = (trainer.iteration() / every + 1) * every;
        let before = trainer.log().len();
        let outcome = trainer.run_until(target);
        for line in &trainer.log()[before..] {
            if !line.contains("pred_loss") {
                eprintln!("{line}");
            }
        }
        log.extend_from_slice(&trainer.log()[before..]);
        if let Err(e) = outcome {
            // Keep everything up to the failure for diagnosis.
            let mut text = log.join("\n");
            text.push('\n');
            let _ = write_atomic(&log_file, text.as_bytes());
            return Err(e);
        }
        save(&trainer, &log)?;
    }
    save(&trainer, &log)?;

    trainer.verify_sources()?;
    for s in &loaded {
        let now = file_digest(&s.path)?;
        if now != s.digest {
            return Err(Error::Numeric(format!("source file {} changed during training", s.path.display())));
        }
    }
    let best = trainer.best_model()?;
    let report = evaluate(&best, data.split(Split::Test), trainer.config.batch_size, None)?.report;
    println!("best_val_mse={}", trainer.best_val_mse().map_or("none".into(), |v| v.to_string()));
    println!("test_mse={} test_mae={}", report.mse, report.mae);
    println!("checkpoint={}", run.out.display());
    println!("log={}", log_file.display());
    Ok(())
}

fn leading_clips(clips: &Tensor, fraction: f64) -> Result<Tensor> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Usage(format!("subset fraction must lie in (0, 1], got {fraction}")));
    }
    let n = clips.shape()[0];
    let keep = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
    let per: usize = clips.shape()[1..].iter().product();
    let mut shape = clips.shape().to_vec();
    shape[0] = keep;
    Tensor::new(&shape, clips.data()[..keep * per].to_vec())
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<()> {
    if let Some(t) = a.csi_threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Usage(format!("CSI threshold must lie in [0, 1], got {t}")));
        }
    }
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = model_from_checkpoint(&ckpt)?;
    let data = Dataset::load(&a.dataset)?;
    let split: Split = a.split.into();
    let clips = leading_clips(data.split(split), a.subset_fraction)?;
    println!("command=evaluate");
    println!("checkpoint={}", a.checkpoint.display());
    println!("dataset={} split={}", a.dataset.display(), split.as_str());
    println!("clips={}", clips.shape()[0]);
    let report = evaluate(&model, &clips, a.batch_size, a.csi_threshold)?.report;
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        write_atomic(out, report.to_kv().as_bytes())?;
    }
    if let Some(csv) = &a.csv {
        write_atomic(csv, report.to_csv().as_bytes())?;
    }
    Ok(())
}

fn inspect_gates(a: &InspectArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = model_from_checkpoint(&ckpt)?;
    if model.num_sources() == 0 {
        return Err(Error::Usage(format!(
            "{} was not trained in transfer mode and has no transfer gates",
            a.checkpoint.display()
        )));
    }
    let data = Dataset::load(&a.dataset)?;
    let split: Split = a.split.into();
    let gates = evaluate(&model, data.split(split), a.batch_size, None)?.gates;
    let layers = gates.num_layers();
    let mut table = String::from("source");
    for k in 0..layers {
        table.push_str(&format!("\tlayer{k}"));
    }
    table.push_str("\tmean\tcheckpoint\n");
    for (m, mean) in gates.source_means().iter().enumerate() {
        table.push_str(&format!("{}", m + 1));
        for k in 0..layers {
            table.push_str(&format!("\t{:.4}", gates.layer_mean(k, m)));
        }
        let name = ckpt.get(&format!("source{m}.path")).unwrap_or("?");
        table.push_str(&format!("\t{mean:.4}\t{name}\n"));
    }
    print!("{table}");
    if let Some(out) = &a.out {
        write_atomic(out, table.as_bytes())?;
    }
    Ok(())
}

fn info(a: &InfoArgs) -> Result<()> {
    let Some(path) = &a.path else {
        println!("tmu {}", env!("CARGO_PKG_VERSION"));
        for p in [Profile::tiny(), Profile::desk()] {
            println!(
                "profile={} frame={} train_count={} source_iters={} target_iters={} horizon={}+{} layers={} channels={} filter={} subscale={}",
                p.name,
                p.frame_size,
                p.train_count,
                p.source_iters,
                p.target_iters,
                p.input_len,
                p.predict_len,
                p.network.num_layers,
                p.network.channels,
                p.network.filter_size,
                p.network.subscale_factor
            );
        }
        return Ok(());
    };
    let mut magic = [0u8; 4];
    fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut magic))
        .map_err(|e| Error::Usage(format!("cannot read {}: {e}", path.display())))?;
    match &magic {
        b"TMUD" => {
            let d = Dataset::load(path)?;
            println!("kind=dataset");
            println!("generator={}", d.generator);
            println!("seed={}", d.seed);
            print_kv("", &d.config);
            for s in Split::ALL {
                println!("split.{}={:?}", s.as_str(), d.split(s).shape());
            }
        }
        b"TMUC" => {
            let c = Checkpoint::load(path)?;
            println!("kind=checkpoint");
            print!("{}", encode_kv(&c.config));
            let model = model_from_checkpoint(&c)?;
            println!("parameters={}", model.store.num_scalars());
            println!("tensors={}", c.tensors.len());
            println!("optimizer={}", c.optimizer.as_ref().map_or("none".into(), |o| format!("adam step={}", o.step)));
            println!("rng={}", if c.rng.is_some() { "present" } else { "none" });
        }
        _ => return Err(Error::Format(format!("{} is neither a dataset nor a checkpoint", path.display()))),
    }
    Ok(())
}
