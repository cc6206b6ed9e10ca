use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hairxfer::curation::{build_manifest, category_counts, load_manifest, save_manifest, Category, CurationConstraints};
use hairxfer::evaluation::{
    frechet_distance, hair_iou_eval, pooled_embedding, psnr_masked, ssim_masked, EvaluationReport, FeatureSetStats,
};
use hairxfer::features::FeatureExtractor;
use hairxfer::generator::{latent_distance, LatentGeometry, LatentState};
use hairxfer::image::Image;
use hairxfer::mask_ops::BinaryMask;
use hairxfer::pipeline::{run_batch, run_transfer, EditMode, PipelineConfig, Portrait, TransferTuple};
use hairxfer::{Error, Result};

#[derive(Parser)]
#[command(name = "hairxfer", version, about = "Hair shape and appearance transfer by latent optimisation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a tuple manifest from a directory of annotated portraits.
    Curate {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = hairxfer::curation::DEFAULT_MIN_HAIR)]
        min_hair: f64,
        #[arg(long)]
        include_rejected: bool,
    },
    /// Transfer hair shape and appearance onto an identity portrait.
    Transfer {
        #[command(flatten)]
        job: JobArgs,
        #[arg(long)]
        shape: PathBuf,
        #[arg(long)]
        appearance: PathBuf,
    },
    /// Change only the hair appearance or only the hair shape.
    Edit {
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[command(flatten)]
        job: JobArgs,
        /// Required in shape mode.
        #[arg(long)]
        shape: Option<PathBuf>,
        /// Required in appearance mode.
        #[arg(long)]
        appearance: Option<PathBuf>,
    },
    /// Run every tuple of a manifest.
    Batch {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Portrait directory; defaults to the manifest's directory.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, default_value = "batch-out")]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = BatchMode::Full)]
        mode: BatchMode,
    },
    /// Score a result against its identity portrait.
    Evaluate(EvaluateArgs),
}

/// Portraits are `<stem>.png` with `<stem>.face.png` and `<stem>.hair.png`
/// beside them.
#[derive(Args)]
struct JobArgs {
    #[arg(long)]
    identity: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Tuple id used for the job seed; defaults to the identity's stem.
    #[arg(long)]
    id: Option<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    result: PathBuf,
    #[arg(long)]
    identity: PathBuf,
    /// Region PSNR and SSIM are measured in.
    #[arg(long)]
    face_target: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// `latent.json` written by a transfer run.
    #[arg(long)]
    latent: Option<PathBuf>,
    #[arg(long, requires = "synth_hair")]
    target_hair: Option<PathBuf>,
    #[arg(long, requires = "target_hair")]
    synth_hair: Option<PathBuf>,
    /// Directories of PNGs whose pooled features are compared by FID.
    #[arg(long, num_args = 2, value_names = ["REAL_DIR", "FAKE_DIR"])]
    fid: Option<Vec<PathBuf>>,
    #[arg(long, default_value = "")]
    tuple_id: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Appearance,
    Shape,
}

#[derive(Clone, Copy, ValueEnum)]
enum BatchMode {
    Full,
    Appearance,
    Shape,
}

fn load_portrait(image: &Path) -> Result<Portrait> {
    Portrait::load_with_companions(image)
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    path.map_or_else(|| Ok(PipelineConfig::default()), PipelineConfig::load)
}

fn run_job(job: &JobArgs, shape: Option<&Path>, appearance: Option<&Path>, mode: EditMode) -> Result<()> {
    let config = load_config(job.config.as_deref())?;
    let identity = load_portrait(&job.identity)?;
    let load_or_identity = |p: Option<&Path>| p.map_or_else(|| Ok(identity.clone()), load_portrait);
    let tuple = TransferTuple {
        id: job
            .id
            .clone()
            .unwrap_or_else(|| job.identity.file_stem().unwrap_or_default().to_string_lossy().into_owned()),
        shape: load_or_identity(shape)?,
        appearance: load_or_identity(appearance)?,
        identity,
    };
    let generator = config.build_generator()?;
    let extractor = config.build_extractor()?;
    let result = run_transfer(tuple, mode, generator.as_ref(), extractor.as_ref(), &config, &job.out_dir)?;
    println!("{}", serde_json::to_string_pretty(&result.metrics)?);
    Ok(())
}

fn curate(data_dir: &Path, out: &Path, min_hair: f64, include_rejected: bool) -> Result<()> {
    let mut records = build_manifest(data_dir, &CurationConstraints { min_hair })?;
    if !include_rejected {
        records.retain(|r| r.category != Category::Rejected);
    }
    save_manifest(&records, out)?;
    for (cat, n) in category_counts(&records) {
        eprintln!("{cat}: {n}");
    }
    Ok(())
}

fn batch(
    manifest: &Path,
    config: Option<&Path>,
    jobs: usize,
    data_dir: Option<&Path>,
    out_dir: &Path,
    mode: EditMode,
) -> Result<bool> {
    let config = load_config(config)?;
    let records = load_manifest(manifest)?;
    let data_dir = data_dir.map_or_else(|| manifest.parent().unwrap_or(Path::new(".")).to_owned(), Path::to_owned);
    let generator = config.build_generator()?;
    let extractor = config.build_extractor()?;
    let report = run_batch(&records, &data_dir, &config, generator.as_ref(), extractor.as_ref(), jobs, mode, out_dir)?;
    for j in report.jobs.iter().filter(|j| j.error.is_some()) {
        eprintln!("{}: {}", j.id, j.error.as_deref().unwrap_or_default());
    }
    println!("{}", serde_json::to_string_pretty(&report.categories)?);
    Ok(report.failed() == 0)
}

fn embeddings(extractor: &dyn FeatureExtractor, dir: &Path) -> Result<FeatureSetStats> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    files.sort();
    let samples = files
        .iter()
        .map(|f| pooled_embedding(extractor, &Image::load_png(f)?))
        .collect::<Result<Vec<_>>>()?;
    FeatureSetStats::from_samples(&samples)
}

#[derive(serde::Deserialize)]
struct LatentFile {
    geometry: LatentGeometry,
    values: Vec<f64>,
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let config = load_config(a.config.as_deref())?;
    let result = Image::load_png(&a.result)?;
    let identity = Image::load_png(&a.identity)?;
    let face_target = BinaryMask::load_png(&a.face_target)?;
    let latent_distance = match &a.latent {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let file: LatentFile = serde_json::from_str(&text)?;
            let state = LatentState::from_vec(&file.geometry, file.values)?;
            latent_distance(&state, config.build_generator()?.as_ref())?
        }
        None => f64::NAN,
    };
    let hair_iou = match (&a.target_hair, &a.synth_hair) {
        (Some(t), Some(s)) => Some(hair_iou_eval(&BinaryMask::load_png(t)?, &BinaryMask::load_png(s)?)?),
        _ => None,
    };
    let fid = match &a.fid {
        Some(dirs) => {
            let extractor = config.build_extractor()?;
            let real = embeddings(extractor.as_ref(), &dirs[0])?;
            let fake = embeddings(extractor.as_ref(), &dirs[1])?;
            Some(frechet_distance(&real, &fake)?)
        }
        None => None,
    };
    let report = EvaluationReport {
        tuple_id: a.tuple_id.clone(),
        psnr: psnr_masked(&result, &identity, &face_target)?,
        ssim: ssim_masked(&result, &identity, &face_target)?,
        fid,
        latent_distance,
        hair_iou,
        config_hash: config.hash()?,
        metric_region: "face_target".into(),
    };
    // serde_json writes a missing latent distance (NaN) as null
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Curate {
            data_dir,
            out,
            min_hair,
            include_rejected,
        } => curate(&data_dir, &out, min_hair, include_rejected)?,
        Command::Transfer { job, shape, appearance } => run_job(&job, Some(&shape), Some(&appearance), EditMode::Full)?,
        Command::Edit {
            mode,
            job,
            shape,
            appearance,
        } => {
            let (mode, needed, flag) = match mode {
                ModeArg::Appearance => (EditMode::AppearanceOnly, &appearance, "--appearance"),
                ModeArg::Shape => (EditMode::ShapeOnly, &shape, "--shape"),
            };
            if needed.is_none() {
                return Err(Error::InvalidParameter(format!("{flag} is required in this mode")));
            }
            run_job(&job, shape.as_deref(), appearance.as_deref(), mode)?
        }
        Command::Batch {
            manifest,
            config,
            jobs,
            data_dir,
            out_dir,
            mode,
        } => {
            let mode = match mode {
                BatchMode::Full => EditMode::Full,
                BatchMode::Appearance => EditMode::AppearanceOnly,
                BatchMode::Shape => EditMode::ShapeOnly,
            };
            return batch(&manifest, config.as_deref(), jobs, data_dir.as_deref(), &out_dir, mode);
        }
        Command::Evaluate(args) => evaluate(&args)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        // some batch jobs failed; details went to stderr
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
