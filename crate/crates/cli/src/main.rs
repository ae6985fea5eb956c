//! `cgd`: data generation, training, denoising, evaluation, ablation and benchmarking.

mod image_io;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cgd_core::checkpoint::Checkpoint;
use cgd_core::config::TrainConfig;
use cgd_core::dataset::{Dataset, DatasetSpec};
use cgd_core::model::Denoiser;
use cgd_core::nn::InitMode;
use cgd_core::noise::{EnhanceParams, NoiseParams};
use cgd_core::sequence::{gen_sequence, Sequence, SequenceSpec};
use cgd_core::track::{
    build_variant, compare_pipelines, curves_csv, table_csv, table_text, Degrade, ModelSet, Variant, SEARCH_SCALE,
    VARIANT_NAMES,
};
use cgd_core::train::{bench_throughput, evaluate_psnr, log_path, train_loop, Trainer, BENCH_PATCH, LOG_HEADER};
use clap::{Args, Parser, Subcommand};

/// Environment variable naming the default data root.
const DATA_ROOT_ENV: &str = "CGD_DATA_ROOT";
/// Name of the final checkpoint written by `train`.
const FINAL_CKPT: &str = "final";

#[derive(Parser, Debug)]
#[command(name = "cgd", version, about = "Conditional generative real-noise denoiser")]
struct Cli {
    /// Log level (error, warn, info, debug, trace).
    #[arg(long, global = true, env = "CGD_LOG", default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a paired clean/noisy dataset.
    ///
    /// Writes OUT/manifest.txt and OUT/pair_<i>_{clean,noisy}.f32 (little-endian f32, CHW).
    GenData(GenDataArgs),
    /// Generate synthetic tracking sequences.
    ///
    /// Writes OUT/seq_<i>/{spec.txt, boxes.csv, frame_<j>.f32}.
    GenSequences(GenSequencesArgs),
    /// Train a model.
    ///
    /// Writes OUT/train_log.csv, OUT/config.txt, OUT/final and, with
    /// checkpoint_every > 0, OUT/ckpt_<iter>.bin.
    Train(TrainArgs),
    /// Denoise one PNG or PPM image.
    ///
    /// Pixels are read as 8-bit and scaled to [0, 1]; the output is quantized
    /// as round(255·clamp(v, 0, 1)). The format follows the output extension.
    Denoise(DenoiseArgs),
    /// Mean PSNR of a checkpoint on a dataset, with the noisy baseline.
    EvalPsnr(EvalPsnrArgs),
    /// Tracking precision and success with and without a denoiser.
    ///
    /// Writes the table to OUT (CSV) when given.
    EvalTrack(EvalTrackArgs),
    /// Train the full model and both ablations, then compare them on tracking.
    ///
    /// Writes the table to OUT (CSV) and mean curves to --curves when given.
    Ablate(AblateArgs),
    /// Inference throughput in frames per second.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Clone)]
struct DegradeArgs {
    /// Signal-dependent noise variance gain.
    #[arg(long, default_value_t = 0.02)]
    noise_a: f64,
    /// Signal-independent noise variance.
    #[arg(long, default_value_t = 5e-4)]
    noise_b: f64,
    /// Darkening factor in (0, 1].
    #[arg(long, default_value_t = 0.3)]
    gain: f64,
    /// Enhancement exponent.
    #[arg(long, default_value_t = 2.2)]
    gamma: f64,
}

impl DegradeArgs {
    fn params(&self, seed: u64) -> cgd_core::Result<(NoiseParams, EnhanceParams)> {
        Ok((NoiseParams::new(self.noise_a, self.noise_b, seed)?, EnhanceParams::new(self.gain, self.gamma)?))
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    pairs: usize,
    /// Patch side in pixels.
    #[arg(long, default_value_t = 48)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    degrade: DegradeArgs,
}

#[derive(Args, Debug)]
struct GenSequencesArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 24)]
    frames: usize,
    #[arg(long, default_value_t = 128)]
    frame_size: usize,
    #[arg(long, default_value_t = 32)]
    target_size: usize,
    /// Maximum speed per axis in pixels per frame.
    #[arg(long, default_value_t = 3)]
    max_speed: i64,
    /// Target texture amplitude in (0, 1].
    #[arg(long, default_value_t = 0.1)]
    contrast: f64,
    #[arg(long, default_value_t = 100)]
    seed: u64,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key (repeatable), e.g. `--set kl_weight=1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    kl_weight: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    /// Defaults, then the config file, then command-line overrides. The crop
    /// schedule is rescaled to the iteration count unless set explicitly.
    fn resolve(&self) -> Result<TrainConfig, Failure> {
        let mut cfg = TrainConfig::default();
        let mut schedule_set = false;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| Failure::io("reading config", path, e))?;
            schedule_set |= text
                .lines()
                .any(|l| l.split('#').next().unwrap_or("").split_once('=').is_some_and(|(k, _)| k.trim() == "schedule"));
            cfg.apply_text(&text).map_err(|e| Failure::new("parsing config", e))?;
        }
        let mut pairs: Vec<(String, String)> = Vec::new();
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Failure::usage(format!("--set expects KEY=VALUE, got `{o}`")))?;
            pairs.push((k.trim().into(), v.trim().into()));
        }
        let flags = [
            ("total_iters", self.iters.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("kl_weight", self.kl_weight.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
        ];
        pairs.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
        for (k, v) in &pairs {
            schedule_set |= k == "schedule";
            cfg.set(k, v).map_err(|e| Failure::new("applying overrides", e))?;
        }
        if !schedule_set {
            cfg.schedule = TrainConfig::default_schedule(cfg.total_iters);
        }
        cfg.validate().map_err(|e| Failure::new("validating config", e))?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training dataset (default: $CGD_DATA_ROOT/train).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct DenoiseArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct EvalPsnrArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Held-out dataset (default: $CGD_DATA_ROOT/test).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalTrackArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Sequence root (default: $CGD_DATA_ROOT/sequences).
    #[arg(long)]
    sequences: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed of the per-frame degradation noise.
    #[arg(long, default_value_t = 7)]
    noise_seed: u64,
    #[command(flatten)]
    degrade: DegradeArgs,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Training dataset (default: $CGD_DATA_ROOT/train).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Sequence root (default: $CGD_DATA_ROOT/sequences).
    #[arg(long)]
    sequences: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Mean precision and success curves as CSV.
    #[arg(long)]
    curves: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    noise_seed: u64,
    #[command(flatten)]
    degrade: DegradeArgs,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Checkpoint to benchmark (default: an untrained model of the default size).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = BENCH_PATCH)]
    size: usize,
    #[arg(long, default_value_t = 10)]
    frames: usize,
}

/// A failed stage, with the exit code it maps to.
#[derive(Debug)]
struct Failure {
    stage: String,
    message: String,
    code: u8,
}

impl Failure {
    fn new(stage: &str, e: cgd_core::Error) -> Self {
        use cgd_core::Error as E;
        let code = match e {
            E::Config(_) | E::Parameter(_) => 2,
            _ => 1,
        };
        Self {
            stage: stage.into(),
            message: e.to_string(),
            code,
        }
    }

    fn io(stage: &str, path: &Path, e: impl std::fmt::Display) -> Self {
        Self {
            stage: stage.into(),
            message: format!("{}: {e}", path.display()),
            code: 1,
        }
    }

    fn usage(message: String) -> Self {
        Self {
            stage: "arguments".into(),
            message,
            code: 2,
        }
    }
}

trait Stage<T> {
    fn stage(self, name: &str) -> Result<T, Failure>;
}

impl<T> Stage<T> for cgd_core::Result<T> {
    fn stage(self, name: &str) -> Result<T, Failure> {
        self.map_err(|e| Failure::new(name, e))
    }
}

fn data_path(given: &Option<PathBuf>, sub: &str, flag: &str) -> Result<PathBuf, Failure> {
    if let Some(p) = given {
        return Ok(p.clone());
    }
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) => Ok(Path::new(&root).join(sub)),
        None => Err(Failure::usage(format!("{flag} is required when {DATA_ROOT_ENV} is unset"))),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Failure::io("creating output directory", parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Failure::io("writing output", path, e))
}

fn load_model(path: &Path) -> Result<Denoiser<f32>, Failure> {
    let ck = Checkpoint::load(path).map_err(|e| Failure::new(&format!("loading checkpoint {}", path.display()), e))?;
    let cfg = TrainConfig::from_text(&ck.config_text).stage("reading checkpoint config")?;
    let mut model = Denoiser::new(cfg.model, InitMode::IdentityAnchored, cfg.seed).stage("building model")?;
    ck.apply(&mut model).stage("loading weights")?;
    Ok(model)
}

fn read_dataset(path: &Path) -> Result<Dataset, Failure> {
    Dataset::read(path).map_err(|e| Failure::new(&format!("reading dataset {}", path.display()), e))
}

fn read_sequences(root: &Path) -> Result<Vec<Sequence>, Failure> {
    let entries = fs::read_dir(root).map_err(|e| Failure::io("listing sequences", root, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("spec.txt").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Failure::io("listing sequences", root, "no sequence directories"));
    }
    dirs.iter()
        .map(|d| Sequence::read(d).map_err(|e| Failure::new(&format!("reading sequence {}", d.display()), e)))
        .collect()
}

fn gen_data(a: &GenDataArgs) -> Result<(), Failure> {
    let (noise, enhance) = a.degrade.params(a.seed).stage("checking parameters")?;
    let spec = DatasetSpec {
        count: a.pairs,
        height: a.size,
        width: a.size,
        noise,
        enhance,
    };
    let d = Dataset::generate(spec).stage("generating pairs")?;
    d.write(&a.out).stage("writing dataset")?;
    println!("wrote {} pairs of {}×{} to {}", d.len(), a.size, a.size, a.out.display());
    Ok(())
}

fn gen_sequences(a: &GenSequencesArgs) -> Result<(), Failure> {
    for i in 0..a.count {
        let spec = SequenceSpec::random(a.frames, a.frame_size, a.target_size, a.max_speed, a.contrast, a.seed + i as u64)
            .stage("building sequence spec")?;
        let seq = gen_sequence(&spec).stage("rendering sequence")?;
        seq.write(&a.out.join(format!("seq_{i:03}"))).stage("writing sequence")?;
    }
    println!("wrote {} sequences to {}", a.count, a.out.display());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<(), Failure> {
    let cfg = a.config.resolve()?;
    let data = read_dataset(&data_path(&a.data, "train", "--data")?)?;
    fs::create_dir_all(&a.out).map_err(|e| Failure::io("creating output directory", &a.out, e))?;
    write_file(&a.out.join("config.txt"), cfg.to_text())?;
    let log = log_path(&a.out);
    let ckpt = match &a.resume {
        None => train_loop(&data.pairs, &cfg, Some(&log), Some(&a.out)).stage("training")?.checkpoint,
        Some(path) => {
            let ck = Checkpoint::load(path).stage("loading resume checkpoint")?;
            let mut t = Trainer::resume(cfg.clone(), &ck).stage("resuming")?;
            let mut w = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&log)
                .map_err(|e| Failure::io("opening log", &log, e))?;
            if w.metadata().map(|m| m.len() == 0).unwrap_or(false) {
                use std::io::Write;
                writeln!(w, "{LOG_HEADER}").map_err(|e| Failure::io("writing log", &log, e))?;
            }
            t.run(&data.pairs, cfg.total_iters, Some(&mut w), Some(&a.out)).stage("training")?;
            t.checkpoint()
        }
    };
    let final_path = a.out.join(FINAL_CKPT);
    ckpt.save(&final_path).stage("saving checkpoint")?;
    println!("trained {} iterations; checkpoint {}", ckpt.iteration, final_path.display());
    Ok(())
}

fn denoise(a: &DenoiseArgs) -> Result<(), Failure> {
    let model = load_model(&a.ckpt)?;
    let img = image_io::read(&a.input).map_err(|e| Failure::io("reading image", &a.input, e))?;
    let out = model.denoise(&img).stage("denoising")?;
    image_io::write(&a.output, &out).map_err(|e| Failure::io("writing image", &a.output, e))?;
    println!("wrote {}", a.output.display());
    Ok(())
}

fn eval_psnr(a: &EvalPsnrArgs) -> Result<(), Failure> {
    let model = load_model(&a.ckpt)?;
    let data = read_dataset(&data_path(&a.data, "test", "--data")?)?;
    let r = evaluate_psnr(&data.pairs, &model).stage("evaluating")?;
    println!("pairs: {}", r.count);
    println!("noisy PSNR: {:.3} dB", r.noisy);
    println!("denoised PSNR: {:.3} dB", r.denoised);
    println!("delta: {:+.3} dB", r.delta);
    Ok(())
}

fn emit_table(rows: &[cgd_core::track::VariantRow], out: Option<&Path>, curves: Option<&Path>) -> Result<(), Failure> {
    print!("{}", table_text(rows));
    if let Some(p) = out {
        write_file(p, table_csv(rows))?;
    }
    if let Some(p) = curves {
        write_file(p, curves_csv(rows))?;
    }
    Ok(())
}

fn eval_track(a: &EvalTrackArgs) -> Result<(), Failure> {
    let model = load_model(&a.ckpt)?;
    let seqs = read_sequences(&data_path(&a.sequences, "sequences", "--sequences")?)?;
    let (noise, enhance) = a.degrade.params(a.noise_seed).stage("checking parameters")?;
    let degrade = Degrade { noise, enhance };
    let models = ModelSet {
        full: Some(&model),
        ..ModelSet::default()
    };
    let variants: Vec<Variant> = ["baseline", "full"]
        .iter()
        .map(|n| build_variant(n, degrade, &models))
        .collect::<cgd_core::Result<_>>()
        .stage("building pipelines")?;
    let rows = compare_pipelines(&seqs, &variants, SEARCH_SCALE).stage("tracking")?;
    emit_table(&rows, a.out.as_deref(), None)
}

fn ablate(a: &AblateArgs) -> Result<(), Failure> {
    let cfg = a.config.resolve()?;
    let data = read_dataset(&data_path(&a.data, "train", "--data")?)?;
    let seqs = read_sequences(&data_path(&a.sequences, "sequences", "--sequences")?)?;
    let (noise, enhance) = a.degrade.params(a.noise_seed).stage("checking parameters")?;
    let mut trained = Vec::new();
    for (name, use_nrtc, use_mkcr) in [("full", true, true), ("no-mkcr", true, false), ("no-nrtc", false, true)] {
        let mut c = cfg.clone();
        c.model.use_nrtc = use_nrtc;
        c.model.use_mkcr = use_mkcr;
        log::info!("training {name}");
        trained.push(train_loop(&data.pairs, &c, None, None).stage(&format!("training {name}"))?.model);
    }
    let models = ModelSet {
        full: Some(&trained[0]),
        no_mkcr: Some(&trained[1]),
        no_nrtc: Some(&trained[2]),
    };
    let variants: Vec<Variant> = VARIANT_NAMES
        .iter()
        .map(|n| build_variant(n, Degrade { noise, enhance }, &models))
        .collect::<cgd_core::Result<_>>()
        .stage("building pipelines")?;
    let rows = compare_pipelines(&seqs, &variants, SEARCH_SCALE).stage("tracking")?;
    emit_table(&rows, Some(&a.out), a.curves.as_deref())
}

fn bench(a: &BenchArgs) -> Result<(), Failure> {
    let model = match &a.ckpt {
        Some(p) => load_model(p)?,
        None => Denoiser::new(Default::default(), InitMode::Random, 0).stage("building model")?,
    };
    let r = bench_throughput(&model, a.size, a.frames).stage("benchmarking")?;
    println!("patch: {}×{}", r.patch_size, r.patch_size);
    println!("frames: {}", r.frames);
    println!("fps: {:.3}", r.fps);
    println!("hardware: {}", r.hardware);
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::GenSequences(a) => gen_sequences(a),
        Command::Train(a) => train(a),
        Command::Denoise(a) => denoise(a),
        Command::EvalPsnr(a) => eval_psnr(a),
        Command::EvalTrack(a) => eval_track(a),
        Command::Ablate(a) => ablate(a),
        Command::Bench(a) => bench(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log_level).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error [{}]: {}", f.stage, f.message);
            ExitCode::from(f.code)
        }
    }
}
