use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use triplane_core::harness::train::checkpoint_path;
use triplane_core::harness::{
    generate_scene, profile, Checkpoint, EvalReport, Experiment, ExperimentConfig, HarnessError, SyntheticScene, Trainer,
};
use triplane_core::tokenizer::{write_jsonl, write_tokens, PatchConfig};

#[derive(Parser)]
#[command(name = "triplane", version, about = "Triplane multi-camera tokenizer: train, render, evaluate, tokenize, profile")]
struct Cli {
    /// Worker threads for data-parallel loops.
    #[arg(long, global = true, env = "TRIPLANE_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the synthetic scene described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory for checkpoints and metrics.csv.
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
        /// Continue from a checkpoint of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Render one camera of the training rig.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        camera: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write expected depth as PFM.
        #[arg(long)]
        depth: Option<PathBuf>,
        /// Index into the held-out cameras instead of the training rig.
        #[arg(long)]
        heldout: bool,
    },
    /// Per-camera and mean PSNR/SSIM of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Cut the trained triplane into tokens.
    Tokenize {
        #[arg(long)]
        ckpt: PathBuf,
        /// Patch sizes as px,py,pz.
        #[arg(long)]
        patch: String,
        #[arg(long)]
        halfplane: bool,
        /// Token width; the config value when absent.
        #[arg(long)]
        d_ar: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines provenance sidecar.
        #[arg(long)]
        jsonl: Option<PathBuf>,
    },
    /// Token counts, tokenizer timings and modelled prefill cost.
    Profile {
        /// Config supplying the grid and profile defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated camera counts.
        #[arg(long)]
        cameras: Option<String>,
        /// Comma-separated context frame counts.
        #[arg(long)]
        frames: Option<String>,
        /// Patch sizes, e.g. 4x6x6,8x8x8.
        #[arg(long)]
        patch: Option<String>,
        /// Tokenize full planes instead of halfplanes.
        #[arg(long)]
        full: bool,
        /// Timing repetitions per tokenizer stage.
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a seeded scene as JSON, optionally with its ground-truth views.
    GenScene {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for PNG renders of every rig camera.
        #[arg(long)]
        images: Option<PathBuf>,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Harness(#[from] HarnessError),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Harness(e) => e.kind(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Harness(e.into())
    }
}

fn parse_list(s: &str, what: &str) -> Result<Vec<usize>, CliError> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| CliError::Usage(format!("bad {what} value {p:?} in {s:?}"))))
        .collect()
}

fn parse_triple(s: &str, sep: char) -> Result<[usize; 3], CliError> {
    let v: Vec<usize> = s
        .split(sep)
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("bad patch size {s:?}")))?;
    v.try_into().map_err(|_| CliError::Usage(format!("patch size {s:?} needs three values")))
}

fn parse_patches(s: &str) -> Result<Vec<[usize; 3]>, CliError> {
    s.split([',', ';']).map(|p| parse_triple(p, 'x')).collect()
}

fn load_ckpt(path: &Path) -> Result<(Checkpoint, Experiment), CliError> {
    let ckpt = Checkpoint::load(path)?;
    let exp = Experiment::new(ckpt.config.clone())?;
    Ok((ckpt, exp))
}

fn print_report(r: &EvalReport) {
    println!("{:<12} {:>8} {:>8} {:>7}", "camera", "psnr", "ssim", "split");
    for c in &r.cameras {
        println!("{:<12} {:>8.3} {:>8.4} {:>7}", c.camera, c.psnr, c.ssim, if c.heldout { "heldout" } else { "train" });
    }
    println!("{:<12} {:>8.3} {:>8.4}", "mean", r.mean_psnr, r.mean_ssim);
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, out, resume } => {
            let cfg = ExperimentConfig::load(&config)?;
            let exp = Experiment::new(cfg)?;
            let mut trainer = match resume {
                Some(p) => Trainer::resume(&exp, Checkpoint::load(p)?)?,
                None => Trainer::new(&exp)?,
            };
            let total = exp.config.train.steps;
            trainer.run(Some(&out), |s, e| {
                if let Some(e) = e {
                    println!("step {:>6}/{total} loss {:.5} psnr {:.3} ssim {:.4}", s.step, s.loss, e.mean_psnr, e.mean_ssim);
                }
            })?;
            println!("checkpoint {}", checkpoint_path(&out).display());
        }
        Command::Render {
            ckpt,
            camera,
            out,
            depth,
            heldout,
        } => {
            let (ckpt, exp) = load_ckpt(&ckpt)?;
            let rig = if heldout { exp.config.rig.build_heldout() } else { exp.rig.clone() };
            if camera >= rig.len() {
                return Err(CliError::Usage(format!("camera {camera} not in a rig of {}", rig.len())));
            }
            let img = exp.render_view(&ckpt.params, &rig, camera)?;
            img.rgb.save_png(&out).map_err(HarnessError::from)?;
            if let Some(d) = depth {
                img.depth.write_pfm(d).map_err(HarnessError::from)?;
            }
        }
        Command::Eval { ckpt, json } => {
            let (ckpt, exp) = load_ckpt(&ckpt)?;
            let report = triplane_core::harness::evaluate(&exp, &ckpt.params, true)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report).expect("serializable report"));
            } else {
                print_report(&report);
            }
        }
        Command::Tokenize {
            ckpt,
            patch,
            halfplane,
            d_ar,
            out,
            jsonl,
        } => {
            let (mut ckpt, exp) = load_ckpt(&ckpt)?;
            let [px, py, pz] = parse_triple(&patch, ',')?;
            let cfg = PatchConfig {
                px,
                py,
                pz,
                halfplane,
                d_ar: d_ar.unwrap_or(exp.config.tokenize.d_ar),
                keep: exp.config.tokenize.keep,
            };
            let (seq, created) = exp.tokenize(&mut ckpt.params, &cfg)?;
            if !created.is_empty() {
                log::warn!("token projection not in checkpoint; initialised from the experiment seed");
            }
            write_tokens(&seq, &out).map_err(HarnessError::from)?;
            if let Some(j) = jsonl {
                write_jsonl(&seq, j).map_err(HarnessError::from)?;
            }
            println!("{} tokens x {} -> {}", seq.len(), cfg.d_ar, out.display());
        }
        Command::Profile {
            config,
            cameras,
            frames,
            patch,
            full,
            runs,
            out,
        } => {
            let cfg = match config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::default(),
            };
            let mut pc = cfg.profile.clone();
            if let Some(c) = cameras {
                pc.cameras = parse_list(&c, "camera")?;
            }
            if let Some(f) = frames {
                pc.frames = parse_list(&f, "frame")?;
            }
            if let Some(p) = patch {
                pc.patches = parse_patches(&p)?;
            }
            if full {
                pc.halfplane = false;
            }
            if let Some(r) = runs {
                pc.runs = r;
            }
            let report = profile(&cfg.warp, &pc, cfg.seed)?;
            report.write_csv(&out)?;
            for c in &report.checks {
                println!("{} {}{}", if c.pass { "PASS" } else { "FAIL" }, c.name, if c.detail.is_empty() { String::new() } else { format!(" ({})", c.detail) });
            }
            println!("{} rows -> {}", report.rows.len(), out.display());
        }
        Command::GenScene { seed, config, images } => {
            let mut cfg = match config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::default(),
            };
            cfg.scene.seed = Some(seed);
            let scene: SyntheticScene = generate_scene(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&scene).expect("serializable scene"));
            if let Some(dir) = images {
                std::fs::create_dir_all(&dir)?;
                let rig = cfg.rig.build();
                for (c, v) in scene.render_rig(&rig, cfg.model.render.t_near)?.iter().enumerate() {
                    v.rgb.save_png(dir.join(format!("{}.png", rig.cameras[c].name))).map_err(HarnessError::from)?;
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
            eprintln!("error: kind={} msg=\"{msg}\"", e.kind());
            ExitCode::FAILURE
        }
    }
}
