use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ical_core::data::{load_image, synth_generate, synth_vocab, write_dataset, Dataset, RasterOptions, Sample, SynthOptions};
use ical_core::flops::estimate_flops;
use ical_core::gradcheck::{run_component, Component};
use ical_core::infer::{implicit_readout, recognize, BeamOptions, DEFAULT_BEAM, DEFAULT_MAX_LEN};
use ical_core::loss::LossReport;
use ical_core::metrics::evaluate;
use ical_core::tensor::{DType, Params, Scalar};
use ical_core::train::{load_model, EpochLog, Precision, TrainConfig, Trainer};
use ical_core::vocab::{ImplicitVocab, Vocab};
use ical_core::{Error, Model, ModelConfig, Preset};
use serde::Serialize;

const VOCAB_FILE: &str = "vocab.txt";
const MANIFEST_FILE: &str = "manifest.json";
const LOG_FILE: &str = "train.log";

#[derive(Parser)]
#[command(name = "ical", version, about = "Handwritten math expression recognition with implicit-character modelling")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Training configuration (TOML); unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
    /// Beam width for decoding; 1 means greedy left-to-right.
    #[arg(long, global = true)]
    beam: Option<usize>,
    #[arg(long, global = true)]
    no_implicit_loss: bool,
    #[arg(long, global = true)]
    no_fusion_loss: bool,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Paper,
    Toy,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Paper => Preset::Paper,
            PresetArg::Toy => Preset::Toy,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic labelled dataset.
    Synth {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = SynthOptions::default().scale)]
        scale: usize,
    },
    /// Train (or resume) a model.
    Train {
        /// Training data: a synth/image directory or a directory of .inkml files.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_enum)]
        precision: Option<PrecisionArg>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Decode a labelled dataset and report ExpRate, <=1 and <=2.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
        max_len: usize,
    },
    /// Decode images; prints `<id>\t<tokens>` per sample.
    Predict {
        checkpoint: PathBuf,
        /// A dataset directory.
        #[arg(long, conflicts_with = "image")]
        data: Option<PathBuf>,
        /// A single PNG/PGM image.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Treat dark pixels as ink.
        #[arg(long)]
        invert: bool,
        #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
        max_len: usize,
        /// Append the implicit-character stream predicted for each output.
        #[arg(long)]
        dump_implicit: bool,
    },
    /// Finite-difference gradient checks at 64-bit.
    Gradcheck {
        /// Components to check (all when omitted).
        #[arg(long = "component")]
        components: Vec<String>,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Parameter count and analytic FLOPs.
    Params {
        #[arg(long, default_value_t = 113)]
        vocab: usize,
        #[arg(long, default_value_t = 120)]
        height: usize,
        #[arg(long, default_value_t = 800)]
        width: usize,
        /// Decoded tokens per direction.
        #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
        seq_len: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let g = cli.global;
    match cli.command {
        Command::Synth { n, scale } => synth(&g, n, scale),
        Command::Train { train, val, epochs, precision, resume } => cmd_train(&g, train, val, epochs, precision, resume),
        Command::Eval { checkpoint, data, max_len } => match dtype_of(&checkpoint)? {
            DType::F32 => cmd_eval::<f32>(&g, &checkpoint, &data, max_len),
            DType::F64 => cmd_eval::<f64>(&g, &checkpoint, &data, max_len),
        },
        Command::Predict { checkpoint, data, image, invert, max_len, dump_implicit } => {
            let input = match (data, image) {
                (Some(d), None) => Input::Data(d),
                (None, Some(i)) => Input::Image(i, invert),
                _ => return Err(Error::Config("predict needs --data or --image".into())),
            };
            match dtype_of(&checkpoint)? {
                DType::F32 => cmd_predict::<f32>(&g, &checkpoint, &input, max_len, dump_implicit),
                DType::F64 => cmd_predict::<f64>(&g, &checkpoint, &input, max_len, dump_implicit),
            }
        }
        Command::Gradcheck { components, seeds } => cmd_gradcheck(&g, &components, seeds),
        Command::Params { vocab, height, width, seq_len } => cmd_params(&g, vocab, height, width, seq_len),
    }
}

fn out_dir(g: &Global, fallback: &str) -> PathBuf {
    g.out.clone().unwrap_or_else(|| PathBuf::from(fallback))
}

fn dtype_of(path: &Path) -> Result<DType, Error> {
    Ok(Params::<f32>::peek_dtype(path)?)
}

#[derive(Serialize)]
struct Manifest {
    seed: u64,
    count: usize,
    scale: usize,
    margin: usize,
    max_depth: usize,
    max_items: usize,
}

fn synth(g: &Global, n: usize, scale: usize) -> Result<(), Error> {
    if n == 0 || scale == 0 {
        return Err(Error::Config("--n and --scale must be positive".into()));
    }
    let seed = g.seed.unwrap_or(7);
    let opts = SynthOptions { scale, ..SynthOptions::default() };
    let dir = out_dir(g, "synth");
    let samples = synth_generate(seed, n, &opts);
    write_dataset(&dir, &samples)?;
    fs::write(dir.join(VOCAB_FILE), synth_vocab().to_file_string())?;
    let manifest = Manifest { seed, count: n, scale, margin: opts.margin, max_depth: opts.max_depth, max_items: opts.max_items };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n")?;
    println!("wrote {n} samples to {}", dir.display());
    Ok(())
}

fn load_data(dir: &Path) -> Result<Dataset, Error> {
    let d = Dataset::load(dir, &RasterOptions::default())?;
    if d.is_empty() {
        return Err(ical_core::data::DataError::EmptyBatch.into());
    }
    Ok(d)
}

/// `vocab.txt` beside the data, else every symbol in order of appearance.
fn data_vocab(dir: &Path, data: &Dataset) -> Result<Vocab, Error> {
    let path = dir.join(VOCAB_FILE);
    Ok(if path.is_file() { Vocab::load(&path)? } else { Vocab::new(&data.symbols())? })
}

fn check_labels(data: &Dataset, vocab: &Vocab) -> Result<(), Error> {
    for s in &data.samples {
        vocab.encode(&s.tokens)?;
    }
    Ok(())
}

/// One `key value` line per epoch; absent loss components are omitted.
fn log_line(l: &EpochLog) -> String {
    let r: &LossReport = &l.loss;
    let mut s = format!("epoch {} total {:.6} initial {:.6}", l.epoch, r.total, r.initial);
    if let Some(v) = r.implicit {
        write!(s, " implicit {v:.6}").unwrap();
    }
    if let Some(v) = r.fusion {
        write!(s, " fusion {v:.6}").unwrap();
    }
    write!(s, " lr {}", l.lr).unwrap();
    if let Some(m) = l.metric {
        write!(s, " exprate {m:.4}").unwrap();
    }
    write!(s, " seconds {:.2}", l.seconds).unwrap();
    s
}

fn cmd_train(
    g: &Global,
    train: Option<PathBuf>,
    val: Option<PathBuf>,
    epochs: Option<usize>,
    precision: Option<PrecisionArg>,
    resume: Option<PathBuf>,
) -> Result<(), Error> {
    let dtype = match (&resume, precision) {
        (Some(ckpt), _) => dtype_of(ckpt)?,
        (None, Some(PrecisionArg::F64)) => DType::F64,
        (None, Some(PrecisionArg::F32)) => DType::F32,
        (None, None) => match &g.config {
            Some(p) if TrainConfig::load(p)?.precision == Precision::F64 => DType::F64,
            _ => DType::F32,
        },
    };
    let plan = TrainPlan { train, val, epochs, resume };
    match dtype {
        DType::F32 => train_with::<f32>(g, plan),
        DType::F64 => train_with::<f64>(g, plan),
    }
}

struct TrainPlan {
    train: Option<PathBuf>,
    val: Option<PathBuf>,
    epochs: Option<usize>,
    resume: Option<PathBuf>,
}

fn apply_overrides(g: &Global, plan: &TrainPlan, cfg: &mut TrainConfig) {
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(p) = g.preset {
        cfg.preset = p.into();
    }
    if g.no_implicit_loss {
        cfg.toggles.implicit = false;
    }
    if g.no_fusion_loss {
        cfg.toggles.fusion = false;
    }
    if let Some(o) = &g.out {
        cfg.out_dir = Some(o.clone());
    }
    if let Some(t) = &plan.train {
        cfg.train_dir = Some(t.clone());
    }
    if let Some(v) = &plan.val {
        cfg.val_dir = Some(v.clone());
    }
    if let Some(e) = plan.epochs {
        cfg.epochs = e;
    }
}

fn train_with<T: Scalar>(g: &Global, plan: TrainPlan) -> Result<(), Error> {
    let mut trainer = match &plan.resume {
        Some(ckpt) => {
            let mut t = Trainer::<T>::load(ckpt)?;
            // the architecture and seed stream belong to the checkpoint
            let (seed, preset) = (t.config.seed, t.config.preset);
            apply_overrides(g, &plan, &mut t.config);
            t.config.seed = seed;
            t.config.preset = preset;
            t
        }
        None => {
            let mut cfg = match &g.config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            apply_overrides(g, &plan, &mut cfg);
            cfg.precision = if T::DTYPE == DType::F64 { Precision::F64 } else { Precision::F32 };
            cfg.validate()?;
            let dir = cfg.train_dir.clone().ok_or_else(|| Error::Config("no training data: pass --train or set train_dir".into()))?;
            let data = load_data(&dir)?;
            let vocab = data_vocab(&dir, &data)?;
            Trainer::<T>::new(cfg, vocab)?
        }
    };
    let cfg = trainer.config.clone();
    cfg.validate()?;
    let train_dir = cfg.train_dir.clone().ok_or_else(|| Error::Config("no training data: pass --train or set train_dir".into()))?;
    let data = load_data(&train_dir)?;
    check_labels(&data, &trainer.vocab)?;
    let val = match &cfg.val_dir {
        Some(d) => {
            let v = load_data(d)?;
            check_labels(&v, &trainer.vocab)?;
            Some(v)
        }
        None => None,
    };
    let out = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("run"));
    trainer.config.out_dir = Some(out.clone());
    fs::create_dir_all(&out)?;
    let effective = trainer.config.to_toml();
    fs::write(out.join("config.toml"), &effective)?;
    fs::write(out.join(VOCAB_FILE), trainer.vocab.to_file_string())?;

    let mut log = fs::OpenOptions::new().create(true).append(true).open(out.join(LOG_FILE))?;
    writeln!(log, "# config")?;
    for line in effective.lines() {
        writeln!(log, "# {line}")?;
    }
    if let Some(ckpt) = &plan.resume {
        writeln!(log, "# resumed from {} at epoch {}", ckpt.display(), trainer.state.epoch)?;
    }
    let mut io_err = None;
    trainer.fit(&data, val.as_ref(), |l| {
        let line = log_line(l);
        println!("{line}");
        if let Err(e) = writeln!(log, "{line}") {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    println!("checkpoints in {}", out.display());
    Ok(())
}

fn beam_options(g: &Global, max_len: usize) -> Result<BeamOptions, Error> {
    let beam = g.beam.unwrap_or(DEFAULT_BEAM);
    if beam == 0 || max_len == 0 {
        return Err(Error::Config("--beam and --max-len must be positive".into()));
    }
    Ok(BeamOptions { beam, max_len, ..BeamOptions::default() })
}

/// Readout follows the training toggles unless the command line narrows it.
fn readout_for<T: Scalar>(g: &Global, model: &Model<T>, mut toggles: ical_core::LossToggles) -> ical_core::Readout {
    if g.no_fusion_loss {
        toggles.fusion = false;
    }
    model.readout(toggles)
}

fn cmd_eval<T: Scalar>(g: &Global, ckpt: &Path, data_dir: &Path, max_len: usize) -> Result<(), Error> {
    let opts = beam_options(g, max_len)?;
    let (model, vocab, toggles) = load_model::<T>(ckpt)?;
    let data = load_data(data_dir)?;
    let readout = readout_for(g, &model, toggles);
    let r = evaluate(&model, &vocab, &data, readout, &opts)?;
    print!("{}", r.report());
    if let Some(out) = &g.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("metrics.txt"), r.report())?;
        fs::write(out.join("samples.csv"), r.csv())?;
    }
    Ok(())
}

enum Input {
    Data(PathBuf),
    Image(PathBuf, bool),
}

fn cmd_predict<T: Scalar>(g: &Global, ckpt: &Path, input: &Input, max_len: usize, dump_implicit: bool) -> Result<(), Error> {
    let opts = beam_options(g, max_len)?;
    let (model, vocab, toggles) = load_model::<T>(ckpt)?;
    let readout = readout_for(g, &model, toggles);
    let samples: Vec<Sample> = match input {
        Input::Data(dir) => load_data(dir)?.samples,
        Input::Image(path, invert) => {
            let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            vec![Sample { id, image: load_image(path, *invert)?, tokens: Vec::new() }]
        }
    };
    let mut text = String::new();
    for s in &samples {
        let ids = recognize(&model, &s.image, readout, &opts)?;
        let tokens = vocab.decode_ids(&ids)?;
        write!(text, "{}\t{tokens}", s.id).unwrap();
        if dump_implicit {
            let imp = implicit_readout(&model, &s.image, &ids)?;
            let names: Vec<&str> = imp.iter().map(|&i| ImplicitVocab::symbol(i).unwrap_or("?")).collect();
            write!(text, "\t{}", names.join(" ")).unwrap();
        }
        text.push('\n');
    }
    match &g.out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(path, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_gradcheck(g: &Global, names: &[String], seeds: u64) -> Result<(), Error> {
    let components: Vec<Component> = if names.is_empty() {
        Component::ALL.to_vec()
    } else {
        names
            .iter()
            .map(|n| {
                Component::parse(n).ok_or_else(|| {
                    let known: Vec<&str> = Component::ALL.iter().map(|c| c.name()).collect();
                    Error::Config(format!("unknown component `{n}` (one of {})", known.join(", ")))
                })
            })
            .collect::<Result<_, _>>()?
    };
    let first = g.seed.unwrap_or(0);
    let mut failed = Vec::new();
    for c in components {
        let (mut checked, mut skipped, mut worst, mut bad) = (0, 0, 0.0f64, 0);
        for seed in first..first + seeds {
            let r = run_component(c, seed)?;
            checked += r.checked;
            skipped += r.skipped;
            worst = worst.max(r.max_rel_err);
            bad += usize::from(!r.passed());
        }
        let status = if bad == 0 { "ok" } else { "FAIL" };
        println!("{:<12} {status:<4} seeds {seeds} checked {checked} skipped {skipped} max_rel_err {worst:.3e}", c.name());
        if bad > 0 {
            failed.push(c.name());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient mismatch in {}", failed.join(", "))))
    }
}

fn cmd_params(g: &Global, vocab: usize, height: usize, width: usize, seq_len: usize) -> Result<(), Error> {
    let preset: Preset = g.preset.map_or(Preset::Paper, Into::into);
    let mut cfg = ModelConfig::preset(preset, vocab);
    cfg.validate()?;
    let full = Model::<f32>::new(cfg.clone(), 0)?.param_count();
    let f = estimate_flops(&cfg, height, width, seq_len, 2);
    cfg.iccm = false;
    let base = Model::<f32>::new(cfg.clone(), 0)?.param_count();
    let fb = estimate_flops(&cfg, height, width, seq_len, 2);
    let name = match preset {
        Preset::Paper => "paper",
        Preset::Toy => "toy",
    };
    println!("preset: {name}");
    println!("vocab: {vocab}");
    println!("params: {full}");
    println!("params_baseline: {base}");
    println!("params_delta: {}", full - base);
    println!("input: 1x1x{height}x{width}");
    println!("seq_len: {seq_len}");
    println!("directions: 2");
    println!("gflops: {:.3}", f.gflops());
    println!("gflops_encoder: {:.3}", f.encoder as f64 / 1e9);
    println!("gflops_decoder: {:.3}", f.decoder as f64 / 1e9);
    println!("gflops_iccm: {:.3}", f.iccm as f64 / 1e9);
    println!("gflops_heads: {:.3}", f.heads as f64 / 1e9);
    println!("gflops_baseline: {:.3}", fb.gflops());
    Ok(())
}
