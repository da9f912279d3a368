use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use facesnap::encoders::BBox;
use facesnap::landmark3d::{predict_landmarks, FaceParams};
use facesnap::pipeline::data::face_basis;
use facesnap::pipeline::io::{latent_to_image, load_reference, write_latent};
use facesnap::pipeline::{
    ablation_tsv, dataset_for, evaluate, infer, load_dataset, pose_templates, run_ablation, synthetic_dataset,
    write_dataset, AblationMatrix, Checkpoint, IdEntry, InferRequest, TrainConfig, Trainer,
};

#[derive(Parser)]
#[command(name = "facesnap", version, about = "Identity-conditioned portrait generation on toy latents")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the mixer and FFRNet against a frozen base denoiser.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint written at the end.
        #[arg(long, default_value = "facesnap.ckpt")]
        out: PathBuf,
        /// Dataset directory; overrides `data.root`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides `train.steps`.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Generate one image of the reference identity in the driving pose.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// Reference image (PNG) or latent (`.lat`).
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Face parameters of the driving pose and expression.
        #[arg(long)]
        drive_params: PathBuf,
        /// Face parameters of the reference; neutral when absent.
        #[arg(long)]
        ref_params: Option<PathBuf>,
        /// Face box in the reference as `x0,y0,x1,y1`, normalized.
        #[arg(long, value_parser = parse_bbox)]
        bbox: Option<BBox>,
        #[arg(long, default_value = "a portrait photo")]
        prompt: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output `.png` or `.lat`; a `.report.toml` is written beside it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the landmark control image for a source face in a driving pose.
    PredictLandmarks {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        source_params: PathBuf,
        #[arg(long)]
        drive_params: PathBuf,
        #[arg(long, default_value_t = 256)]
        size: usize,
        /// PNG output; landmark coordinates go to the same path with `.txt`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every identity under every pose template.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory holding the identities.
        #[arg(long)]
        ids: PathBuf,
        /// Directory of face-parameter `.toml` files; built-in templates when absent.
        #[arg(long)]
        poses: Option<PathBuf>,
        #[arg(long, default_value = "a portrait photo")]
        prompt: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// TSV output; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score every run of an ablation matrix.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset directory.
    SynthData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_bbox(s: &str) -> Result<BBox, String> {
    let v: Vec<f64> =
        s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}"))).collect::<Result<_, _>>()?;
    match v[..] {
        [x0, y0, x1, y1] => BBox::new(x0, y0, x1, y1).validated().map_err(|e| e.to_string()),
        _ => Err(format!("expected 4 comma-separated values, got {}", v.len())),
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(TrainConfig::default()),
    }
}

fn load_params(path: &Path) -> Result<FaceParams> {
    FaceParams::load(path).with_context(|| format!("loading face parameters {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train(config: &Path, out: &Path, data: Option<PathBuf>, resume: Option<PathBuf>, steps: Option<u64>) -> Result<()> {
    let mut cfg = load_config(Some(config))?;
    if let Some(d) = data {
        cfg.data.root = d.to_string_lossy().into_owned();
    }
    let samples = dataset_for(&cfg).context("loading training data")?;
    let mut trainer = match resume {
        Some(p) => {
            let ckpt = Checkpoint::load(&p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            Trainer::from_checkpoint(ckpt, &samples)?
        }
        None => Trainer::new(cfg.clone(), &samples)?,
    };
    let steps = steps.unwrap_or(cfg.train.steps);
    for _ in 0..steps {
        let step = trainer.step_count();
        let l = trainer.step()?;
        if step % 10 == 0 || step + 1 == steps {
            println!("step {step}\tl_diff {:.6}\tl_id {:.6}\tl_total {:.6}", l.l_diff, l.l_id, l.l_total);
        }
    }
    trainer.checkpoint()?.save(out).with_context(|| format!("saving checkpoint {}", out.display()))?;
    println!("saved {} after {} steps", out.display(), trainer.step_count());
    Ok(())
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train { config, out, data, resume, steps } => train(&config, &out, data, resume, steps)?,
        Cmd::Infer { ckpt, reference, drive_params, ref_params, bbox, prompt, seed, out } => {
            let model = Checkpoint::load(&ckpt)
                .and_then(Checkpoint::into_model)
                .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
            let size = model.cfg.model.latent_size;
            let req = InferRequest {
                reference: load_reference(&reference, size)
                    .with_context(|| format!("loading reference {}", reference.display()))?,
                bbox,
                source: ref_params.as_deref().map(load_params).transpose()?,
                drive: load_params(&drive_params)?,
                prompt,
                seed,
            };
            let (latent, report) = infer(&model, &req)?;
            if out.extension().is_some_and(|e| e == "lat") {
                let mut shape = vec![1];
                shape.extend_from_slice(latent.shape());
                write_latent(&out, &latent.into_shape_with_order(shape)?)?;
            } else {
                latent_to_image(&latent, 8)?.save(&out).with_context(|| format!("writing {}", out.display()))?;
            }
            write(&out.with_extension("report.toml"), &report.to_toml()?)?;
            println!("face_sim {:.6}\tclip_face {:.6}", report.face_sim, report.clip_face);
        }
        Cmd::PredictLandmarks { config, source_params, drive_params, size, out } => {
            let cfg = load_config(config.as_deref())?;
            let (lm, img) = predict_landmarks(
                &load_params(&source_params)?,
                &load_params(&drive_params)?,
                &face_basis(&cfg),
                size,
                size,
            )?;
            img.save_png(&out)?;
            write(&out.with_extension("txt"), &lm.to_text())?;
        }
        Cmd::Eval { ckpt, ids, poses, prompt, seed, out } => {
            let model = Checkpoint::load(&ckpt)
                .and_then(Checkpoint::into_model)
                .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
            let entries: Vec<IdEntry> = load_dataset(&ids, &model.cfg)
                .with_context(|| format!("loading identities from {}", ids.display()))?
                .into_iter()
                .map(|s| IdEntry { name: s.id, latent: s.latent, bbox: Some(s.bbox), params: s.source })
                .collect();
            let templates = match poses {
                Some(dir) => pose_files(&dir)?,
                None => pose_templates(model.cfg.model.k_shape, model.cfg.model.k_expr),
            };
            let table = evaluate(&model, &entries, &templates, &prompt, seed)?;
            match out {
                Some(p) => write(&p, &table.to_tsv())?,
                None => print!("{}", table.to_tsv()),
            }
        }
        Cmd::Ablate { config, matrix, out } => {
            let cfg = load_config(config.as_deref())?;
            let m = AblationMatrix::load(&matrix).with_context(|| format!("loading matrix {}", matrix.display()))?;
            let samples = dataset_for(&cfg).context("loading training data")?;
            let tsv = ablation_tsv(&run_ablation(&cfg, &m, &samples)?);
            match out {
                Some(p) => write(&p, &tsv)?,
                None => print!("{tsv}"),
            }
        }
        Cmd::SynthData { config, n, seed, out } => {
            if n == 0 {
                bail!("--n must be at least 1");
            }
            let cfg = load_config(config.as_deref())?;
            write_dataset(&out, &synthetic_dataset(&cfg, n, seed)?)?;
            println!("wrote {n} samples to {}", out.display());
        }
    }
    Ok(())
}

/// Every `.toml` in `dir`, sorted by file name, named by its stem.
fn pose_files(dir: &Path) -> Result<Vec<(String, FaceParams)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "toml"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .toml pose files in {}", dir.display());
    }
    paths
        .iter()
        .map(|p| {
            let name = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            Ok((name, load_params(p)?))
        })
        .collect()
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
