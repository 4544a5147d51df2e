use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use nvs4d::io::{
    export_gaussians, generate_synthetic_scene, load_checkpoint, load_dataset, save_checkpoint, write_dataset,
    write_png, SynthSpec,
};
use nvs4d::render::Camera;
use nvs4d::train::{MetricsRow, Stage, TrainConfig, Trainer};
use nvs4d::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(name = "nvs4d", version, about = "Dynamic-scene Gaussian splatting from neural voxel anchors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic moving-blob dataset.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the three training stages.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Render one view to PNG.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        /// Camera id stored in the checkpoint, or a JSON camera file.
        #[arg(long)]
        camera: String,
        #[arg(long, default_value_t = 0.0)]
        time: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every frame of a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the Gaussians at one time as a PLY point file.
    Export {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        time: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Bad arguments that clap cannot catch.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return EXIT_USAGE;
    }
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Numeric(_)) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Synth { spec, seed, out } => {
            let text = read_text(&spec)?;
            let spec = SynthSpec::from_toml(&text).with_context(|| format!("reading {}", spec.display()))?;
            let ds = generate_synthetic_scene(&spec, seed)?;
            write_dataset(&ds, &out)?;
            log::info!("wrote {} frames to {}", ds.frames.len(), out.display());
        }
        Command::Train {
            data,
            config,
            out,
            resume,
        } => train(&data, config.as_deref(), &out, resume.as_deref())?,
        Command::Render {
            ckpt,
            camera,
            time,
            out,
        } => {
            let trainer = load_checkpoint(&ckpt)?;
            let cam = resolve_camera(&trainer, &camera)?;
            let img = trainer.render_image(&cam, time)?;
            write_png(&img, &out)?;
        }
        Command::Eval { ckpt, data, out } => {
            let trainer = load_checkpoint(&ckpt)?;
            let ds = load_dataset(&data)?;
            let scores = trainer.evaluate(&ds, None)?;
            let mut csv = String::from("frame,camera_id,time,psnr,ssim,ms_ssim\n");
            for s in &scores {
                let ms = s.ms_ssim.map(|v| v.to_string()).unwrap_or_default();
                csv.push_str(&format!("{},{},{},{},{},{}\n", s.frame, s.camera_id, s.time, s.psnr, s.ssim, ms));
            }
            fs::write(&out, csv).with_context(|| format!("writing {}", out.display()))?;
            let mean = scores.iter().map(|s| s.psnr).sum::<f64>() / scores.len().max(1) as f64;
            log::info!("mean PSNR {mean:.3} dB over {} frames", scores.len());
        }
        Command::Export { ckpt, time, out } => {
            let trainer = load_checkpoint(&ckpt)?;
            let n = export_gaussians(&trainer, time, &out)?;
            log::info!("wrote {n} Gaussians to {}", out.display());
        }
    }
    Ok(())
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).map_err(|e| {
        anyhow::Error::new(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn resolve_camera(trainer: &Trainer, spec: &str) -> anyhow::Result<Camera> {
    if let Ok(id) = spec.parse::<usize>() {
        return trainer
            .camera(id)
            .cloned()
            .ok_or_else(|| anyhow::Error::new(Usage(format!("no camera {id} in the checkpoint"))));
    }
    let text = read_text(Path::new(spec))?;
    let cam: Camera = serde_json::from_str(&text).map_err(|e| {
        anyhow::Error::new(Error::Parse {
            file: spec.into(),
            field: "camera".into(),
            message: e.to_string(),
        })
    })?;
    cam.validate()?;
    Ok(cam)
}

fn train(data: &Path, config: Option<&Path>, out: &Path, resume: Option<&Path>) -> anyhow::Result<()> {
    let ds = load_dataset(data)?;
    let mut trainer = match resume {
        Some(ckpt) => {
            let t = load_checkpoint(ckpt)?;
            if let Some(c) = config {
                let cfg = TrainConfig::from_toml(&read_text(c)?)?;
                if cfg != t.config {
                    log::warn!("--config differs from the checkpoint's configuration; using the checkpoint's");
                }
            }
            t
        }
        None => {
            let cfg = match config {
                Some(c) => TrainConfig::from_toml(&read_text(c)?)?,
                None => TrainConfig::default(),
            };
            Trainer::new(cfg, &ds)?
        }
    };
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    fs::write(out.join("config.toml"), trainer.config.to_toml()).context("writing config snapshot")?;
    let metrics_path = out.join("metrics.csv");
    let append = resume.is_some() && metrics_path.is_file();
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(&metrics_path)
        .with_context(|| format!("opening {}", metrics_path.display()))?;
    if !append {
        writeln!(metrics, "{}", MetricsRow::CSV_HEADER)?;
    }
    let mut write_err = None;
    let mut on_row = |r: &MetricsRow| {
        if let Err(e) = writeln!(metrics, "{}", r.to_csv()) {
            write_err.get_or_insert(e);
        }
        if r.iteration % 500 == 0 {
            log::info!(
                "stage {} iteration {}: loss {:.5} psnr {:.2} anchors {}",
                r.stage.number(),
                r.iteration,
                r.loss,
                r.psnr,
                r.anchors
            );
        }
    };
    let mut on_stage_end = |t: &Trainer, stage: Stage| -> nvs4d::Result<()> {
        let path = out.join(format!("stage{}.ckpt", stage.number()));
        save_checkpoint(t, &path)?;
        log::info!("stage {} finished; checkpoint {}", stage.number(), path.display());
        Ok(())
    };
    trainer.run(&ds, &mut on_row, &mut on_stage_end)?;
    if let Some(e) = write_err {
        return Err(e).context("writing metrics");
    }
    save_checkpoint(&trainer, out.join("final.ckpt"))?;
    if let (Some(before), Some(after)) = trainer.refine_psnr {
        log::info!("flagged-view PSNR {before:.3} -> {after:.3} dB");
    }
    Ok(())
}
