//! Command-line entry point: dataset generation, training, evaluation,
//! inference, the pixel-difference baseline, gradient checks, and the
//! shape audit. Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use csrtd::dataset::{build_dataset, load_split, worker_count, SplitSpec};
use csrtd::error::{Error, Result};
use csrtd::fusion::Ablation;
use csrtd::gradcheck::{model_fd_spot_check, primitive_checks, MODEL_TOL, PRIMITIVE_TOL};
use csrtd::imageio::{read_ppm, write_pgm, GrayImage};
use csrtd::metrics::{pixel_difference_baseline, tune_theta, EvalAccum};
use csrtd::model::{audit_shapes, ModelConfig, RtdModel};
use csrtd::param::count_params;
use csrtd::train::{
    evaluate_checkpoint, load_checkpoint, save_checkpoint, train, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "csrtd",
    about = "Change-mask detector over goal/current image pairs, with a synthetic scene generator",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (train/val/test splits plus manifest)
    Generate(GenerateArgs),
    /// Train a model and write the best checkpoint
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split
    Eval(EvalArgs),
    /// Predict a change mask for one goal/current image pair
    Infer(InferArgs),
    /// Pixel-difference baseline over a split
    Baseline(BaselineArgs),
    /// Finite-difference gradient verification in 64-bit mode
    Gradcheck(GradcheckArgs),
    /// Audit every intermediate tensor shape against the symbolic schedule
    Shapes(ShapesArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Square image side in pixels
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Training split size
    #[arg(long, default_value_t = 500, value_parser = clap::value_parser!(u32).range(1..))]
    train: u32,
    /// Validation split size
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u32).range(1..))]
    val: u32,
    /// Test split size
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u32).range(1..))]
    test: u32,
    /// Base seed; every sample derives deterministically from it
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (as written by generate); optional with --dry-run
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint output path
    #[arg(long)]
    out: PathBuf,
    /// Model size preset
    #[arg(long, default_value = "desk", value_parser = ["paper", "desk"])]
    config: String,
    /// Fusion variant: ii = no cross-attention, iii = cross then self, iv = full
    #[arg(long, default_value = "iv", value_parser = ["ii", "iii", "iv"])]
    ablation: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Build the model, report shapes and parameter count, skip training
    #[arg(long, default_value_t = false)]
    dry_run: bool,
    /// Epoch cap (early stopping usually fires first)
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    split: String,
    #[arg(long)]
    ckpt: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    /// Goal-state image (PPM)
    #[arg(long)]
    goal: PathBuf,
    /// Current-state image (PPM)
    #[arg(long)]
    cur: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Output mask path (PGM, 0/255)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    data: PathBuf,
    /// RGB distance threshold; tuned on the val split when omitted
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    split: String,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random seeds per primitive
    #[arg(long, default_value_t = 10)]
    rounds: u64,
}

#[derive(Args)]
struct ShapesArgs {
    #[arg(long, default_value = "desk", value_parser = ["paper", "desk"])]
    config: String,
    #[arg(long, default_value = "iv", value_parser = ["ii", "iii", "iv"])]
    ablation: String,
}

fn model_config(preset: &str, ablation: &str) -> Result<ModelConfig> {
    let mut cfg = if preset == "paper" { ModelConfig::paper() } else { ModelConfig::desk() };
    cfg.ablation = Ablation::from_label(ablation)?;
    Ok(cfg)
}

fn print_resolved(label: &str, body: &str) {
    println!("resolved {label}:");
    for line in body.lines() {
        println!("  {line}");
    }
}

fn run_generate(a: &GenerateArgs) -> Result<()> {
    let spec = SplitSpec {
        train: a.train as usize,
        val: a.val as usize,
        test: a.test as usize,
        base_seed: a.seed,
    };
    let workers = worker_count();
    print_resolved(
        "config",
        &format!(
            "out={}\nsize={}\ntrain={}\nval={}\ntest={}\nseed={}\nworkers={workers}",
            a.out.display(),
            a.size,
            spec.train,
            spec.val,
            spec.test,
            a.seed
        ),
    );
    let n = build_dataset(&spec, a.size, &a.out, workers)?;
    println!(
        "wrote {n} samples ({} train, {} val, {} test) under {}",
        spec.train,
        spec.val,
        spec.test,
        a.out.display()
    );
    println!("manifest: {}", a.out.join("manifest.txt").display());
    Ok(())
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let model_cfg = model_config(&a.config, &a.ablation)?;
    let mut cfg = if a.config == "paper" { TrainConfig::paper(a.seed) } else { TrainConfig::desk(a.seed) };
    cfg.model = model_cfg;
    if let Some(m) = a.max_epochs {
        cfg.max_epochs = m;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    cfg.validate()?;
    print_resolved(
        "config",
        &format!(
            "{}batch_size={}\npatience={}\nmax_epochs={}\nseed={}\nlr={}\nbetas={},{}\nout={}\ndry_run={}",
            cfg.model.to_kv(),
            cfg.batch_size,
            cfg.patience,
            cfg.max_epochs,
            cfg.seed,
            cfg.adam.lr,
            cfg.adam.beta1,
            cfg.adam.beta2,
            a.out.display(),
            a.dry_run
        ),
    );
    if a.dry_run {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = RtdModel::<f32>::new(cfg.model.clone(), &mut rng)?;
        println!("parameters: {}", count_params(&model));
        let audit = audit_shapes(&cfg.model, cfg.seed)?;
        println!("shape audit: {} tensors checked", audit.trace.len());
        if !audit.mismatches.is_empty() {
            return Err(Error::Contract(format!("shape audit failed: {:?}", audit.mismatches)));
        }
        println!("dry run complete; no training performed");
        return Ok(());
    }
    let data = a.data.as_deref().ok_or_else(|| Error::Config("--data is required unless --dry-run".into()))?;
    let train_set = load_split(data, "train")?;
    let val_set = load_split(data, "val")?;
    if let Some(s) = train_set.first() {
        if s.goal.width != cfg.model.s || s.goal.height != cfg.model.s {
            return Err(Error::Config(format!(
                "model expects {0}x{0} images but the dataset holds {1}x{2}",
                cfg.model.s, s.goal.width, s.goal.height
            )));
        }
    }
    println!("loaded {} train / {} val samples", train_set.len(), val_set.len());
    let mut log_sink = std::io::stdout();
    let outcome = train::<f32>(&cfg, &train_set, &val_set, &mut log_sink)?;
    save_checkpoint(&a.out, &outcome.best)?;
    let log_path = a.out.with_extension("log");
    let text: String = outcome.logs.iter().map(|l| l.line() + "\n").collect();
    std::fs::write(&log_path, text).map_err(|e| Error::io(log_path.display().to_string(), e))?;
    println!(
        "best epoch {} (val_loss={:.6}); checkpoint {}; log {}",
        outcome.best.epoch,
        outcome.best.best_val_loss,
        a.out.display(),
        log_path.display()
    );
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let workers = worker_count();
    print_resolved(
        "config",
        &format!(
            "{}data={}\nsplit={}\nckpt={}\nepoch={}\nworkers={workers}",
            ckpt.config.to_kv(),
            a.data.display(),
            a.split,
            a.ckpt.display(),
            ckpt.epoch
        ),
    );
    let samples = load_split(&a.data, &a.split)?;
    let weights = csrtd::loss::LossWeights::default();
    let (loss, report) = evaluate_checkpoint(&ckpt, &samples, &weights, workers)?;
    println!("split={} mean_loss={loss:.6}", a.split);
    print!("{}", report.render());
    Ok(())
}

fn run_infer(a: &InferArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    print_resolved(
        "config",
        &format!(
            "{}goal={}\ncur={}\nckpt={}\nout={}",
            ckpt.config.to_kv(),
            a.goal.display(),
            a.cur.display(),
            a.ckpt.display(),
            a.out.display()
        ),
    );
    let goal = read_ppm(&a.goal)?;
    let cur = read_ppm(&a.cur)?;
    let s = ckpt.config.s;
    if goal.width != s || goal.height != s || cur.width != s || cur.height != s {
        return Err(Error::Config(format!(
            "checkpoint expects {s}x{s} images, got goal {}x{} and cur {}x{}",
            goal.width, goal.height, cur.width, cur.height
        )));
    }
    let (model, _) = ckpt.restore::<f32>()?;
    let gt = csrtd::dataset::image_to_tensor::<f32>(&goal)?;
    let ct = csrtd::dataset::image_to_tensor::<f32>(&cur)?;
    let mask = model.predict_mask(&gt, &ct)?;
    let changed = mask.iter().filter(|&&v| v == 1).count();
    let img = GrayImage {
        width: s,
        height: s,
        data: mask.iter().map(|&v| v * 255).collect(),
    };
    write_pgm(&a.out, &img)?;
    println!(
        "wrote {} ({} of {} pixels marked changed, {:.2}%)",
        a.out.display(),
        changed,
        s * s,
        100.0 * changed as f64 / (s * s) as f64
    );
    Ok(())
}

fn run_baseline(a: &BaselineArgs) -> Result<()> {
    let (theta, tuned_note) = match a.theta {
        Some(t) => (t, String::new()),
        None => {
            let val = load_split(&a.data, "val")?;
            let pairs: Vec<_> = val
                .into_iter()
                .map(|s| (s.goal, s.cur, s.mask))
                .collect();
            let (t, f1) = tune_theta(&pairs)?;
            (t, format!(" (tuned on val, f1={f1:.6})"))
        }
    };
    print_resolved(
        "config",
        &format!("data={}\nsplit={}\ntheta={theta}{tuned_note}", a.data.display(), a.split),
    );
    let samples = load_split(&a.data, &a.split)?;
    let mut accum = EvalAccum::default();
    for s in &samples {
        let pred = pixel_difference_baseline(&s.goal, &s.cur, theta)?;
        accum.add_sample(&pred, &s.mask)?;
    }
    let report = accum.finish();
    println!("theta={theta}");
    print!("{}", report.render());
    Ok(())
}

fn run_gradcheck(a: &GradcheckArgs) -> Result<()> {
    print_resolved("config", &format!("seed={}\nrounds={}", a.seed, a.rounds));
    let mut failed = false;
    for (name, check) in primitive_checks() {
        let mut worst = 0.0f64;
        for round in 0..a.rounds {
            let rel = check(a.seed.wrapping_add(round))?;
            if rel > worst {
                worst = rel;
            }
        }
        let ok = worst < PRIMITIVE_TOL;
        failed |= !ok;
        println!(
            "{}: {} (max rel err {worst:.3e}, tol {PRIMITIVE_TOL:.0e})",
            name,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    let out = model_fd_spot_check(a.seed, 2)?;
    let ok = out.max_rel_err < MODEL_TOL;
    failed |= !ok;
    println!(
        "end_to_end_model: {} (max rel err {:.3e} over {} coords, tol {MODEL_TOL:.0e})",
        if ok { "PASS" } else { "FAIL" },
        out.max_rel_err,
        out.coords_checked
    );
    if failed {
        return Err(Error::Contract("gradient check failed".into()));
    }
    Ok(())
}

fn run_shapes(a: &ShapesArgs) -> Result<()> {
    let cfg = model_config(&a.config, &a.ablation)?;
    print_resolved("config", &cfg.to_kv());
    let audit = audit_shapes(&cfg, 0)?;
    for (name, shape) in &audit.trace {
        println!("{name}: {shape:?}");
    }
    let zc = cfg.z_channels();
    println!("fused channels per stage: {zc:?}");
    if a.config == "paper" {
        println!(
            "note: stage-2 fused channels are 320 (= 64 + 2*128 from the channel rule); \
             a 384-wide variant would need the stage-1 skip to bypass its downsample, \
             which contradicts the downsample output type"
        );
    }
    if audit.mismatches.is_empty() {
        println!("shape audit: PASS ({} tensors match the symbolic schedule)", audit.trace.len());
        Ok(())
    } else {
        for m in &audit.mismatches {
            println!("mismatch: {m}");
        }
        Err(Error::Contract(format!("{} shape mismatches", audit.mismatches.len())))
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => run_generate(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Infer(a) => run_infer(a),
        Command::Baseline(a) => run_baseline(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Shapes(a) => run_shapes(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
