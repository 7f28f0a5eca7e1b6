//! Operator surface: dataset generation, training, evaluation, and static
//! visualization. Exit codes: 0 ok, 2 configuration, 3 i/o or format,
//! 4 numerical failure.

use clap::{Args, Parser, Subcommand};
use ldp_core::checkpoint::{load_checkpoint, save_checkpoint};
use ldp_core::config::RunConfig;
use ldp_core::dataset::{
    compose_multi_mnist, generate_multi_shapes, parse_idx, Dataset, GlyphBank, HoldoutRole,
};
use ldp_core::em::{run_em, Method};
use ldp_core::error::LdpError;
use ldp_core::metrics::{component_reconstructions, evaluate_dataset};
use ldp_core::mixture::PriorDist;
use ldp_core::nets::Networks;
use ldp_core::rng::Rng;
use ldp_core::train::train_bptt;
use ldp_core::viz::{assignment_rgb, gray_rgb, write_ppm};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "ldp",
    about = "Unsupervised perceptual grouping with a spatial mixture model and learnable deep priors",
    after_help = default_keys_help()
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn default_keys_help() -> String {
    let mut out = String::from(
        "CONFIGURATION KEYS (via --config file or --set KEY=VALUE; defaults shown):\n",
    );
    for line in RunConfig::default().to_text().lines() {
        let _ = writeln!(out, "  {}", line);
    }
    out
}

#[derive(Args, Clone)]
struct Shared {
    /// Plain key=value configuration file applied over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra KEY=VALUE overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Master seed (overrides the config key).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for training and generation (results do not depend on it).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
}

impl Shared {
    fn build_config(&self) -> Result<RunConfig, LdpError> {
        let mut config = RunConfig::default();
        if let Some(path) = &self.config {
            config.apply_file(path)?;
        }
        for pair in &self.set {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| LdpError::Config(format!("--set expects KEY=VALUE, got {:?}", pair)))?;
            config.apply(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(workers) = self.workers {
            config.workers = workers;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate datasets.
    #[command(subcommand)]
    Generate(GenerateCmd),
    /// Train a model with BPTT through the unrolled inner loop.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset (AMI and permutation-minimal MSE).
    Eval(EvalArgs),
    /// Render inputs, assignment maps and component reconstructions as PPM.
    Visualize(VizArgs),
}

#[derive(Subcommand)]
enum GenerateCmd {
    /// Binary scenes of simple sprites at random positions.
    Shapes(ShapesArgs),
    /// Two-glyph 48x48 scenes composed from an IDX image file.
    Mnist(MnistArgs),
}

#[derive(Args)]
struct ShapesArgs {
    #[command(flatten)]
    shared: Shared,
    /// Canvas side length.
    #[arg(long)]
    size: Option<usize>,
    /// Sprites per scene.
    #[arg(long)]
    objects: Option<usize>,
    /// Training samples.
    #[arg(long)]
    n: Option<usize>,
    /// Validation samples (0 = no file).
    #[arg(long)]
    n_val: Option<usize>,
    /// Test samples (0 = no file).
    #[arg(long)]
    n_test: Option<usize>,
}

#[derive(Args)]
struct MnistArgs {
    #[command(flatten)]
    shared: Shared,
    /// IDX image file with the 28x28 glyphs.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Distinct glyph budget: a count or "all".
    #[arg(long)]
    unique: Option<String>,
    /// Disjoint glyph pools between train/val and test (for unique=all).
    #[arg(long)]
    holdout: bool,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    shared: Shared,
    /// Training dataset container.
    #[arg(long)]
    data: PathBuf,
    /// Validation dataset container (scored every epoch).
    #[arg(long)]
    val: Option<PathBuf>,
    /// ldp, ldp-softmax or nem.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// bernoulli or gaussian.
    #[arg(long)]
    model: Option<String>,
    /// Resume from a checkpoint (same method and architecture).
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    shared: Shared,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct VizArgs {
    #[command(flatten)]
    shared: Shared,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated sample indices.
    #[arg(long, default_value = "0,1,2,3")]
    samples: String,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(GenerateCmd::Shapes(args)) => cmd_generate_shapes(args),
        Command::Generate(GenerateCmd::Mnist(args)) => cmd_generate_mnist(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Visualize(args) => cmd_visualize(args),
    };
    if let Err(e) = result {
        eprintln!("error: {}", e);
        std::process::exit(e.exit_code());
    }
}

fn ensure_out(dir: &Path) -> Result<(), LdpError> {
    std::fs::create_dir_all(dir).map_err(|e| LdpError::io(dir, e))
}

fn print_summary(name: &str, d: &Dataset) {
    println!(
        "{}: {} samples, {}x{}, {} objects, overlap fraction {:.4}",
        name,
        d.len(),
        d.height,
        d.width,
        d.max_objects,
        d.overlap_fraction()
    );
}

fn cmd_generate_shapes(args: ShapesArgs) -> Result<(), LdpError> {
    let mut config = args.shared.build_config()?;
    if let Some(v) = args.size {
        config.size = v;
    }
    if let Some(v) = args.objects {
        config.objects = v;
    }
    if let Some(v) = args.n {
        config.n = v;
    }
    if let Some(v) = args.n_val {
        config.n_val = v;
    }
    if let Some(v) = args.n_test {
        config.n_test = v;
    }
    ensure_out(&args.shared.out)?;
    let splits: [(&str, usize, u64); 3] = [
        ("train", config.n, 0),
        ("val", config.n_val, config.n as u64),
        ("test", config.n_test, (config.n + config.n_val) as u64),
    ];
    for (name, count, start) in splits {
        if count == 0 {
            continue;
        }
        let d = generate_multi_shapes(count, config.size, config.objects, config.seed, start)?;
        let path = args.shared.out.join(format!("{}.ldpd", name));
        d.write_file(&path)?;
        print_summary(&path.display().to_string(), &d);
    }
    Ok(())
}

fn cmd_generate_mnist(args: MnistArgs) -> Result<(), LdpError> {
    let mut config = args.shared.build_config()?;
    if let Some(v) = args.unique {
        config.unique = v;
    }
    if args.holdout {
        config.holdout = true;
    }
    if let Some(v) = args.n {
        config.n = v;
    }
    if let Some(v) = args.n_val {
        config.n_val = v;
    }
    if let Some(v) = args.n_test {
        config.n_test = v;
    }
    let images = args
        .images
        .ok_or_else(|| LdpError::Config("generate mnist requires --images <idx file>".into()))?;
    let bytes = std::fs::read(&images).map_err(|e| LdpError::io(&images, e))?;
    let idx = parse_idx(&bytes)?;
    let bank = GlyphBank::from_idx(&idx)?;
    let unique = config.unique_subset(bank.len())?;
    ensure_out(&args.shared.out)?;
    let role = |is_test: bool| {
        if !config.holdout {
            HoldoutRole::None
        } else if is_test {
            HoldoutRole::Test
        } else {
            HoldoutRole::TrainVal
        }
    };
    let splits: [(&str, usize, u64, bool); 3] = [
        ("train", config.n, 0, false),
        ("val", config.n_val, config.n as u64, false),
        ("test", config.n_test, (config.n + config.n_val) as u64, true),
    ];
    for (name, count, start, is_test) in splits {
        if count == 0 {
            continue;
        }
        let d = compose_multi_mnist(&bank, count, unique, config.seed, role(is_test), start)?;
        let path = args.shared.out.join(format!("{}.ldpd", name));
        d.write_file(&path)?;
        print_summary(&path.display().to_string(), &d);
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), LdpError> {
    let mut config = args.shared.build_config()?;
    if let Some(m) = &args.method {
        config.method = m.parse()?;
    }
    if let Some(m) = &args.model {
        config.apply("model", m)?;
    }
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    let data = Dataset::read_file(&args.data)?;
    let val = match &args.val {
        Some(p) => Some(Dataset::read_file(p)?),
        None => None,
    };
    let method = config.method;
    let em_config = config.em_config()?;
    let arch = config.arch(data.height as usize, data.width as usize);
    let (eta_s, eta_theta) = config.eta_inits(arch.pixels());

    let (mut store, nets, start_epoch) = match &args.resume {
        Some(ckpt_path) => {
            let ck = load_checkpoint(ckpt_path)?;
            if ck.method != method {
                return Err(LdpError::Config(format!(
                    "checkpoint was trained with method {} but this run uses {}",
                    ck.method.name(),
                    method.name()
                )));
            }
            if ck.height != data.height as usize || ck.width != data.width as usize {
                return Err(LdpError::Config(format!(
                    "checkpoint is for {}x{} images, dataset is {}x{}",
                    ck.height, ck.width, data.height, data.width
                )));
            }
            (ck.store, ck.nets, ck.epoch as usize)
        }
        None => {
            let stick_bias = if method == Method::Nem { 0.0 } else { config.stick_bias_init };
            let (store, nets) = Networks::init_with_stick_bias(
                config.seed,
                arch,
                method.with_appearance(),
                method.has_background(),
                eta_s,
                eta_theta,
                stick_bias,
            )?;
            (store, nets, 0)
        }
    };

    ensure_out(&args.shared.out)?;
    let ckpt_path = args.shared.out.join("checkpoint.ldpc");
    let history_path = args.shared.out.join("history.txt");
    let tc = config.train_config();
    let config_for_ckpt = config.clone();

    // initial checkpoint so that --epochs 0 still leaves a loadable artifact
    save_checkpoint(
        &ckpt_path,
        method,
        data.height as usize,
        data.width as usize,
        &config_for_ckpt,
        start_epoch as u32,
        &store,
    )?;

    train_bptt(
        &data,
        val.as_ref(),
        &mut store,
        &nets,
        method,
        &em_config,
        &tc,
        start_epoch,
        |record, current| {
            let mut file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&history_path)
                .map_err(|e| LdpError::io(&history_path, e))?;
            writeln!(
                file,
                "epoch={} loss={} ami={} mse={}",
                record.epoch,
                record.mean_loss,
                record.val_ami.unwrap_or(f64::NAN),
                record.val_mse.unwrap_or(f64::NAN)
            )
            .map_err(|e| LdpError::io(&history_path, e))?;
            save_checkpoint(
                &ckpt_path,
                method,
                data.height as usize,
                data.width as usize,
                &config_for_ckpt,
                (record.epoch + 1) as u32,
                current,
            )?;
            println!(
                "epoch {} loss {:.4}{}",
                record.epoch,
                record.mean_loss,
                match (record.val_ami, record.val_mse) {
                    (Some(a), Some(m)) => format!(" val-ami {:.4} val-mse {:.5}", a, m),
                    _ => String::new(),
                }
            );
            Ok(())
        },
    )?;
    println!("checkpoint written to {}", ckpt_path.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), LdpError> {
    let shared_config = args.shared.build_config()?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let data = Dataset::read_file(&args.data)?;
    if ck.height != data.height as usize || ck.width != data.width as usize {
        return Err(LdpError::Config(format!(
            "checkpoint is for {}x{} images, dataset is {}x{}",
            ck.height, ck.width, data.height, data.width
        )));
    }
    let em_config = ck.config.em_config()?;
    let report = evaluate_dataset(&data, &ck.store, &ck.nets, ck.method, &em_config, shared_config.seed)?;

    ensure_out(&args.shared.out)?;
    let kv_path = args.shared.out.join("report.kv");
    let kv = format!(
        "ami={}\nmse={}\nsamples={}\nami_skipped={}\n",
        report.ami_mean, report.mse_mean, report.evaluated, report.ami_skipped
    );
    std::fs::write(&kv_path, kv).map_err(|e| LdpError::io(&kv_path, e))?;

    let txt_path = args.shared.out.join("report.txt");
    let mut table = String::new();
    let _ = writeln!(table, "{:>8}  {:>10}  {:>12}", "sample", "ami", "mse");
    for i in 0..report.evaluated {
        let ami = report.per_sample_ami[i]
            .map(|v| format!("{:.6}", v))
            .unwrap_or_else(|| "excluded".to_string());
        let _ = writeln!(table, "{:>8}  {:>10}  {:>12.8}", i, ami, report.per_sample_mse[i]);
    }
    let _ = writeln!(table, "{:>8}  {:>10.6}  {:>12.8}", "mean", report.ami_mean, report.mse_mean);
    std::fs::write(&txt_path, table).map_err(|e| LdpError::io(&txt_path, e))?;

    println!("AMI {} MSE {}", report.ami_mean, report.mse_mean);
    Ok(())
}

fn cmd_visualize(args: VizArgs) -> Result<(), LdpError> {
    let shared_config = args.shared.build_config()?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let data = Dataset::read_file(&args.data)?;
    if ck.height != data.height as usize || ck.width != data.width as usize {
        return Err(LdpError::Config(format!(
            "checkpoint is for {}x{} images, dataset is {}x{}",
            ck.height, ck.width, data.height, data.width
        )));
    }
    let em_config = ck.config.em_config()?;
    let indices: Vec<usize> = args
        .samples
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| LdpError::Config(format!("bad sample index {:?}", s)))
        })
        .collect::<Result<_, _>>()?;
    ensure_out(&args.shared.out)?;

    let (w, h) = (data.width as usize, data.height as usize);
    let background_level = match em_config.prior.dist {
        PriorDist::Gaussian { mean } => mean,
        PriorDist::Bernoulli { theta } => theta,
    };
    for &i in &indices {
        let sample = data.samples.get(i).ok_or_else(|| {
            LdpError::Config(format!("sample {} out of range ({} samples)", i, data.len()))
        })?;
        let mut rng = Rng::seeded(shared_config.seed, i as u64);
        let trace = run_em(&sample.intensities(), &ck.store, &ck.nets, ck.method, &em_config, &mut rng)?;
        let stem = |suffix: &str| args.shared.out.join(format!("sample{:04}_{}.ppm", i, suffix));

        write_ppm(&stem("input"), w, h, &gray_rgb(&sample.intensities()))?;
        write_ppm(&stem("assignment"), w, h, &assignment_rgb(&trace.labels(), em_config.k))?;
        let recons = component_reconstructions(&trace, ck.method, &em_config, background_level);
        for (slot, recon) in recons.iter().enumerate() {
            write_ppm(&stem(&format!("component{}", slot + 1)), w, h, &gray_rgb(recon))?;
        }
        // background reconstruction: its weight map times its appearance
        let last = trace.final_step();
        let k = em_config.k;
        let bg_img: Vec<f64> = (0..h * w)
            .map(|px| {
                let weight = last.mixture.pi.at(px, k - 1);
                let appearance = match ck.method {
                    Method::Nem => last.appearances.at(px, k - 1),
                    _ => *last.appearances.data().last().unwrap(),
                };
                weight * appearance + (1.0 - weight) * background_level
            })
            .collect();
        write_ppm(&stem("background"), w, h, &gray_rgb(&ldp_core::tensor::Tensor::vector(bg_img)))?;
        println!("sample {}: wrote input, assignment, {} components, background", i, recons.len());
    }
    Ok(())
}
