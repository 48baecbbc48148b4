use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use syncmv::config::RunConfig;
use syncmv::denoiser::Ablation;
use syncmv::image::Image;
use syncmv::pipeline::{
    baseline_report, evaluate, instance_rng, oracle_check, ring_with_input, sample_views, views_to_images, write_instance,
};
use syncmv::synthdata::{make_dataset, Dataset};
use syncmv::trainer::{Checkpoint, RunPaths, Trainer};

#[derive(Parser)]
#[command(name = "syncmv", version, about = "Synchronized multiview diffusion on synthetic voxel objects")]
struct Cli {
    /// Worker threads; 1 gives bit-exact reproducibility.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a dataset of random voxel objects.
    GenData(GenData),
    /// Train a denoiser.
    Train(Train),
    /// Generate target views for one input view.
    Sample(SampleCmd),
    /// Score a checkpoint on held-out objects.
    Eval(Eval),
    /// Sample joint Gaussians with the closed-form optimal predictor.
    OracleCheck(OracleCmd),
    /// Print the effective configuration as TOML.
    ShowConfig(ShowConfig),
}

#[derive(Args)]
struct ShowConfig {
    #[command(flatten)]
    config: ConfigArg,
    /// Start from the reduced smoke configuration instead of the defaults.
    #[arg(long, conflicts_with = "config")]
    smoke: bool,
}

#[derive(Args)]
struct ConfigArg {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display())),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Eval,
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    out: PathBuf,
    /// Which object count and seed of the config to use.
    #[arg(long, value_enum, default_value = "train")]
    split: Split,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    data: PathBuf,
    /// Run directory for checkpoints and the loss log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    ablation: Option<Ablation>,
    /// Continue from the run directory's latest checkpoint.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct SampleCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input view as a PPM image.
    #[arg(long, conflicts_with = "index")]
    input: Option<PathBuf>,
    /// Input camera elevation in degrees (with --input).
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    elevation: f64,
    /// Input camera azimuth in degrees (with --input), e.g. of a previously generated view.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    azimuth: f64,
    /// Dataset to take the input view from (with --index).
    #[arg(long, requires = "index")]
    data: Option<PathBuf>,
    #[arg(long)]
    index: Option<usize>,
    #[arg(long, default_value_t = 4)]
    seeds: usize,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 4)]
    seeds: usize,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// CSV report path.
    #[arg(long)]
    out: PathBuf,
    /// Also write the replicate-input baseline report here.
    #[arg(long)]
    baseline: Option<PathBuf>,
}

#[derive(Args)]
struct OracleCmd {
    #[arg(long, default_value_t = 2)]
    views: usize,
    #[arg(long, default_value_t = 4)]
    size: usize,
    #[arg(long, default_value_t = 0.8)]
    rho: f64,
    #[arg(long, default_value_t = 5000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
        .context("configuring the thread pool")?;
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Eval(a) => eval(a),
        Command::OracleCheck(a) => oracle(a),
        Command::ShowConfig(a) => {
            let cfg = if a.smoke { RunConfig::smoke() } else { a.config.load()? };
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

fn gen_data(a: GenData) -> Result<()> {
    let cfg = a.config.load()?;
    let (count, seed) = match a.split {
        Split::Train => (cfg.data.count, cfg.data.seed),
        Split::Eval => (cfg.data.eval_count, cfg.data.eval_seed),
    };
    let (count, seed) = (a.count.unwrap_or(count), a.seed.unwrap_or(seed));
    let data = make_dataset(count, seed, &cfg.ring, &cfg.data.objects)?;
    data.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {count} objects (seed {seed}) to {}", a.out.display());
    Ok(())
}

fn load_data(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn train(a: Train) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(ab) = a.ablation {
        cfg.model.ablation = ab;
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    cfg.validate()?;
    let data = load_data(&a.data)?;
    let paths = RunPaths { dir: a.out.clone() };
    let mut trainer = if a.resume {
        let ck = Checkpoint::load(&paths.checkpoint(), Some(&cfg.model))
            .with_context(|| format!("resuming from {}", paths.checkpoint().display()))?;
        if ck.header.train != cfg.train || ck.header.schedule != cfg.schedule || ck.header.ring != cfg.ring {
            bail!("checkpoint was written with different training, schedule or ring settings");
        }
        println!("resuming at step {}", ck.header.step);
        Trainer::from_checkpoint(ck)?
    } else {
        Trainer::new(cfg.model.clone(), cfg.train.clone(), cfg.schedule, cfg.ring)?
    };
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.toml"), cfg.to_toml()?)?;
    let start = Instant::now();
    let total = cfg.train.steps;
    let ck = trainer.run(&data, &paths, |step, s| {
        if step % 50 == 0 || step + 1 == total {
            eprintln!(
                "step {step:>6}/{total}  loss {:.5}  lr {:.2e}  |g| {:.3}  {:.0}s",
                s.loss,
                s.lr,
                s.grad_norm,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    println!(
        "finished {} steps; checkpoint {}; log {}",
        ck.header.step,
        paths.checkpoint().display(),
        paths.log().display()
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path, None).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn sample(a: SampleCmd) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = ck.denoiser()?;
    let sched = ck.schedule()?;
    let spec = ck.header.ring;
    let size = spec.image_size;
    let (input, ring) = match (&a.input, &a.data, a.index) {
        (Some(path), None, None) => {
            let img = Image::load_ppm(path).with_context(|| format!("reading {}", path.display()))?;
            img.check_size(size, size)?;
            (img.to_model(), ring_with_input(&spec, a.azimuth.to_radians(), a.elevation.to_radians())?)
        }
        (None, Some(path), Some(i)) => {
            let data = load_data(path)?;
            if data.header.ring != spec {
                bail!("dataset ring does not match the checkpoint's ring");
            }
            let s = data.samples.get(i).with_context(|| format!("index {i} out of range ({} objects)", data.len()))?;
            (s.input_tensor(size), spec.build(s.input_elevation)?)
        }
        _ => bail!("give either --input IMAGE or --data DATASET --index I"),
    };
    fs::create_dir_all(&a.out)?;
    Image::from_model(&input)?.save_ppm(&a.out.join("input.ppm"))?;
    let mut manifest = format!(
        "# file azimuth_deg elevation_deg radius seed\n# input azimuth {:.6} elevation {:.6}\n",
        ring.input.pose.azimuth.to_degrees(),
        ring.input.pose.elevation.to_degrees()
    );
    for k in 0..a.seeds as u64 {
        let seed = a.first_seed + k;
        let views = sample_views(&model, &sched, &ring, &input, a.steps, &mut instance_rng(seed, 0))?;
        let dir = a.out.join(format!("seed_{seed}"));
        manifest += &write_instance(&dir, &views_to_images(&views)?, &ring, seed)?;
        eprintln!("seed {seed} done");
    }
    fs::write(a.out.join("manifest.txt"), manifest)?;
    println!("wrote {} instances to {}", a.seeds, a.out.display());
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = ck.denoiser()?;
    let sched = ck.schedule()?;
    let data = load_data(&a.data)?;
    if data.header.ring != ck.header.ring {
        bail!("dataset ring does not match the checkpoint's ring");
    }
    let seeds: Vec<u64> = (0..a.seeds as u64).map(|k| a.first_seed + k).collect();
    let start = Instant::now();
    let report = evaluate(&model, &sched, &data, &seeds, a.steps, |done, total| {
        eprintln!("instance {done}/{total}  {:.0}s", start.elapsed().as_secs_f64());
    })?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&a.out, report.to_csv())?;
    let show = |name: &str, r: &syncmv::metrics::MetricsReport| {
        println!(
            "{name}: mean PSNR {:.3} dB, mean reprojection error {:.4}",
            r.mean_of("psnr").unwrap_or(f64::NAN),
            r.mean_of("reprojection").unwrap_or(f64::NAN)
        );
    };
    show(&format!("{} ({})", a.checkpoint.display(), ck.header.model.ablation), &report);
    if let Some(path) = &a.baseline {
        let base = baseline_report(&data)?;
        fs::write(path, base.to_csv())?;
        show("replicate-input baseline", &base);
    }
    Ok(())
}

fn oracle(a: OracleCmd) -> Result<()> {
    let c = oracle_check(a.views, a.size, a.rho, a.samples, a.seed)?;
    let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
    println!(
        "synchronized oracle: empirical corr {:.4}, target {:.4} ± 0.05  {}",
        c.synchronized,
        c.rho,
        verdict(c.synchronized_ok())
    );
    println!(
        "independent baseline: empirical corr {:.4}, expected |corr| < 0.05  {}",
        c.independent,
        verdict(c.independent_ok())
    );
    if !(c.synchronized_ok() && c.independent_ok()) {
        std::process::exit(2);
    }
    Ok(())
}
