//! Command-line entry point. Exit codes: 0 success, 1 usage error, 2 runtime
//! error. Every successful run prints a machine-readable "RESULT ..." line.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::encoder::{load_encoder, Encoder, EncoderConfig, PositionalSource};
use crate::error::QtpError;
use crate::image::{load_image, load_image_dir, save_ppm, Image};
use crate::metrics::{bias_report, sweep, to_csv, BiasReport, CSV_HEADER};
use crate::posenc::{load_mlp, load_table, save_table, CoordinateMlp, MlpConfig, PositionalTable};
use crate::quadtree::{render_layout, write_manifest, write_qpat, SelectionPolicy};
use crate::trainer::{
    load_checkpoint, save_checkpoint, train_on_images, TrainConfig, TrainState, LOSS_CSV_HEADER,
};

/// Environment variable holding the default output directory.
pub const OUT_DIR_ENV: &str = "QTP_OUT_DIR";

const SWEEP_DEFAULT_ALPHAS: &[f64] = &[
    0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4, 1.5, 1.7, 1.9,
    2.1, 2.5, 3.0,
];

#[derive(Parser, Debug)]
#[command(name = "qtp", version, about = "Quadtree patchification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Patchify one image and write the QPAT tokens plus a text manifest.
    Patchify(PatchifyArgs),
    /// Train the coordinate MLP against a frozen table and encoder.
    Train(TrainArgs),
    /// Compute bias metrics for one image at one size.
    EvalBias(EvalBiasArgs),
    /// Run the size x alpha x positional-source metric grid over a directory.
    Sweep(SweepArgs),
    /// Generate a synthetic smooth positional table.
    MakeTable(MakeTableArgs),
    /// Render the patch layout as an overlay image.
    Render(RenderArgs),
}

#[derive(Args, Debug)]
struct PolicyArgs {
    /// Derivative-policy merge threshold.
    #[arg(long, conflicts_with_all = ["random_p", "never_merge"])]
    alpha: Option<f64>,
    /// Random-policy merge probability.
    #[arg(long, conflicts_with = "never_merge")]
    random_p: Option<f64>,
    /// Seed for the random merge policy.
    #[arg(long, default_value_t = 0)]
    policy_seed: u64,
    /// Never merge (uniform-grid layout).
    #[arg(long)]
    never_merge: bool,
}

impl PolicyArgs {
    fn to_policy(&self) -> Result<SelectionPolicy, CliError> {
        let policy = if self.never_merge {
            SelectionPolicy::NeverMerge
        } else if let Some(p) = self.random_p {
            SelectionPolicy::Random {
                p,
                seed: self.policy_seed,
            }
        } else if let Some(alpha) = self.alpha {
            SelectionPolicy::Derivative { alpha }
        } else {
            return Err(CliError::Usage(
                "one of --alpha, --random-p or --never-merge is required".into(),
            ));
        };
        policy.validate().map_err(CliError::Usage2)?;
        Ok(policy)
    }
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Frozen encoder weights (QENC); a default seeded encoder if omitted.
    #[arg(long)]
    encoder: Option<PathBuf>,
    /// Positional table (QEMB); a synthetic smooth table if omitted.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Trained coordinate MLP (QMLP); required for the mlp positional source.
    #[arg(long)]
    mlp: Option<PathBuf>,
}

struct Models {
    enc: Encoder,
    table: PositionalTable,
    mlp: Option<CoordinateMlp>,
}

impl ModelArgs {
    fn load(&self) -> Result<Models, QtpError> {
        let enc = match &self.encoder {
            Some(p) => load_encoder(p)?,
            None => Encoder::init(EncoderConfig::default())?,
        };
        let table = match &self.table {
            Some(p) => load_table(p)?,
            None => PositionalTable::synthetic_smooth(enc.config.width, 0),
        };
        let mlp = self.mlp.as_deref().map(load_mlp).transpose()?;
        Ok(Models { enc, table, mlp })
    }
}

fn source<'a>(kind: &str, models: &'a Models) -> Result<PositionalSource<'a>, CliError> {
    match kind {
        "grid" => Ok(PositionalSource::TableGrid(&models.table)),
        "bilinear" => Ok(PositionalSource::TableBilinear(&models.table)),
        "bicubic" => Ok(PositionalSource::TableBicubic(&models.table)),
        "mlp" => models
            .mlp
            .as_ref()
            .map(PositionalSource::Mlp)
            .ok_or_else(|| CliError::Usage("--mlp is required for the mlp source".into())),
        other => Err(CliError::Usage(format!(
            "unknown positional source '{other}' (grid, bilinear, bicubic, mlp)"
        ))),
    }
}

#[derive(Args, Debug)]
struct PatchifyArgs {
    #[arg(long)]
    image: PathBuf,
    #[command(flatten)]
    policy: PolicyArgs,
    /// Resize short edge before patchifying; native size if omitted.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// key=value config file mirroring the TrainConfig fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Individual overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[command(flatten)]
    models: ModelArgs,
    /// MLP shape for a fresh run (ignored on --resume).
    #[arg(long, default_value_t = 48)]
    mlp_fourier: usize,
    #[arg(long, default_value_t = 4)]
    mlp_layers: usize,
    #[arg(long, default_value_t = 256)]
    mlp_width: usize,
    #[arg(long, default_value_t = 10.0)]
    mlp_scale: f64,
    /// Resume from the checkpoint written under the output directory.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalBiasArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    size: usize,
    #[command(flatten)]
    policy: PolicyArgs,
    /// Positional source: grid, bilinear, bicubic or mlp.
    #[arg(long, default_value = "bilinear")]
    pos: String,
    #[command(flatten)]
    models: ModelArgs,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Directory of images.
    #[arg(long)]
    images: PathBuf,
    /// Comma-separated short-edge sizes; 224..700 step 28 if omitted.
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<usize>,
    /// Comma-separated derivative alphas.
    #[arg(long, value_delimiter = ',')]
    alphas: Vec<f64>,
    /// Comma-separated positional sources.
    #[arg(long, value_delimiter = ',', default_value = "bilinear")]
    pos: Vec<String>,
    /// Worker thread cap; all cores if omitted.
    #[arg(long)]
    jobs: Option<usize>,
    #[command(flatten)]
    models: ModelArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MakeTableArgs {
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    image: PathBuf,
    #[command(flatten)]
    policy: PolicyArgs,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum CliError {
    Usage(String),
    Usage2(QtpError),
    Runtime(QtpError),
}

impl From<QtpError> for CliError {
    fn from(e: QtpError) -> Self {
        CliError::Runtime(e)
    }
}

fn out_dir(flag: &Option<PathBuf>) -> Result<PathBuf, QtpError> {
    let dir = match flag {
        Some(p) => p.clone(),
        None => std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string())
}

fn prepared(img: &Image, size: Option<usize>, policy: &SelectionPolicy)
    -> Result<crate::quadtree::PatchLayout, QtpError> {
    match size {
        Some(n) => crate::metrics::prepare_layout(img, n, policy),
        None => {
            let (cropped, geom) =
                crate::image::crop_to_patch_multiple(img, crate::image::PATCH_SIZE)?;
            crate::quadtree::patchify_image(&cropped, &geom, policy)
        }
    }
}

fn run_patchify(args: &PatchifyArgs) -> Result<String, CliError> {
    let policy = args.policy.to_policy()?;
    let img = load_image(&args.image)?;
    let layout = prepared(&img, args.size, &policy)?;
    let dir = out_dir(&args.out)?;
    let base = stem(&args.image);
    let qpat = dir.join(format!("{base}.qpat"));
    let manifest = dir.join(format!("{base}.manifest.txt"));
    write_qpat(&layout, &qpat)?;
    write_manifest(&layout, &manifest)?;
    Ok(format!(
        "RESULT patchify tokens={} qpat={} manifest={}",
        layout.token_count(),
        qpat.display(),
        manifest.display()
    ))
}

fn run_train(args: &TrainArgs) -> Result<String, CliError> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::from_file(p).map_err(CliError::Usage2)?,
        None => TrainConfig::default(),
    };
    for kv in &args.sets {
        let (k, v) = kv.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("--set expects KEY=VALUE, got '{kv}'"))
        })?;
        cfg.set_field(k, v).map_err(CliError::Usage2)?;
    }
    if let Some(d) = &args.dataset {
        cfg.dataset = d.clone();
    }
    cfg.validate().map_err(CliError::Usage2)?;

    let models = args.models.load()?;
    if models.table.dim != models.enc.config.width {
        return Err(CliError::Usage(format!(
            "table dim {} does not match encoder width {}",
            models.table.dim, models.enc.config.width
        )));
    }
    let dir = out_dir(&args.out)?;
    let prefix = dir.join("ckpt");
    let images_dir = load_image_dir(&cfg.dataset)?;
    let images: Vec<Image> = images_dir.images.into_iter().map(|(_, img)| img).collect();

    let mut state = if args.resume {
        load_checkpoint(&prefix)?
    } else {
        let mlp = CoordinateMlp::init(MlpConfig {
            fourier_features: args.mlp_fourier,
            hidden_layers: args.mlp_layers,
            hidden_width: args.mlp_width,
            out_dim: models.table.dim,
            fourier_scale: args.mlp_scale,
            init_seed: cfg.seed,
        });
        TrainState::fresh(mlp, &cfg, images.len())
    };

    let loss_path = dir.join("loss.csv");
    let mut csv = String::from(LOSS_CSV_HEADER);
    csv.push('\n');
    let mut last = None;
    train_on_images(
        &cfg,
        &images,
        &models.table,
        &models.enc,
        &mut state,
        Some(&prefix),
        |r| {
            csv.push_str(&r.csv_row());
            csv.push('\n');
            last = Some(r.clone());
        },
    )?;
    std::fs::write(&loss_path, &csv).map_err(QtpError::from)?;
    save_checkpoint(&prefix, &state)?;
    let final_mlp = dir.join("mlp.qmlp");
    crate::posenc::save_mlp(&state.mlp, &final_mlp)?;
    let (steps, total) = last
        .map(|r| (r.step, r.total))
        .unwrap_or((state.adam.step, f64::NAN));
    Ok(format!(
        "RESULT train steps={steps} final_total={total} mlp={} loss_csv={}",
        final_mlp.display(),
        loss_path.display()
    ))
}

fn eval_one(args: &EvalBiasArgs) -> Result<BiasReport, CliError> {
    let policy = args.policy.to_policy()?;
    let models = args.models.load()?;
    let img = load_image(&args.image)?;
    let src = source(&args.pos, &models)?;
    Ok(bias_report(
        &stem(&args.image),
        &img,
        args.size,
        &policy,
        src,
        &models.enc,
    )?)
}

fn run_eval_bias(args: &EvalBiasArgs) -> Result<String, CliError> {
    let row = eval_one(args)?;
    println!("{CSV_HEADER}");
    println!("{}", row.csv_row());
    Ok(format!(
        "RESULT eval-bias tokens={} b_interp={} c_z={} cs_qtp={}",
        row.token_count, row.b_interp, row.c_z, row.cs_qtp
    ))
}

fn run_sweep(args: &SweepArgs) -> Result<String, CliError> {
    let models = args.models.load()?;
    let sizes: Vec<usize> = if args.sizes.is_empty() {
        (224..=700).step_by(28).collect()
    } else {
        args.sizes.clone()
    };
    let alphas: Vec<f64> = if args.alphas.is_empty() {
        SWEEP_DEFAULT_ALPHAS.to_vec()
    } else {
        args.alphas.clone()
    };
    let policies: Vec<SelectionPolicy> = alphas
        .iter()
        .map(|&alpha| SelectionPolicy::Derivative { alpha })
        .collect();
    for p in &policies {
        p.validate().map_err(CliError::Usage2)?;
    }
    let sources: Vec<PositionalSource> = args
        .pos
        .iter()
        .map(|k| source(k, &models))
        .collect::<Result<_, _>>()?;

    let dir_images = load_image_dir(&args.images)?;
    let images: Vec<(String, Image)> = dir_images
        .images
        .into_iter()
        .map(|(p, img)| (stem(&p), img))
        .collect();

    let rows = match args.jobs {
        Some(jobs) if jobs > 0 => rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| QtpError::InvalidArgument(e.to_string()))?
            .install(|| sweep(&images, &sizes, &policies, &sources, &models.enc))?,
        Some(_) => {
            return Err(CliError::Usage("--jobs must be positive".into()));
        }
        None => sweep(&images, &sizes, &policies, &sources, &models.enc)?,
    };
    let dir = out_dir(&args.out)?;
    let path = dir.join("sweep.csv");
    std::fs::write(&path, to_csv(&rows)).map_err(QtpError::from)?;
    let data_rows = rows.iter().filter(|r| r.image_id != "average").count();
    Ok(format!(
        "RESULT sweep rows={data_rows} file={}",
        path.display()
    ))
}

fn run_make_table(args: &MakeTableArgs) -> Result<String, CliError> {
    if args.dim == 0 {
        return Err(CliError::Usage("--dim must be positive".into()));
    }
    let table = PositionalTable::synthetic_smooth(args.dim, args.seed);
    let dir = out_dir(&args.out)?;
    let path = dir.join(format!("table_d{}_s{}.qemb", args.dim, args.seed));
    save_table(&table, &path)?;
    Ok(format!(
        "RESULT make-table rows={} cols={} dim={} file={}",
        table.rows,
        table.cols,
        table.dim,
        path.display()
    ))
}

fn run_render(args: &RenderArgs) -> Result<String, CliError> {
    let policy = args.policy.to_policy()?;
    let img = load_image(&args.image)?;
    let (prepared_img, layout) = match args.size {
        Some(n) => {
            let resized = crate::image::resize(&img, n, crate::image::ResizeMethod::Bicubic)?;
            let (cropped, geom) =
                crate::image::crop_to_patch_multiple(&resized, crate::image::PATCH_SIZE)?;
            let layout = crate::quadtree::patchify_image(&cropped, &geom, &policy)?;
            (cropped, layout)
        }
        None => {
            let (cropped, geom) =
                crate::image::crop_to_patch_multiple(&img, crate::image::PATCH_SIZE)?;
            let layout = crate::quadtree::patchify_image(&cropped, &geom, &policy)?;
            (cropped, layout)
        }
    };
    let overlay = render_layout(&prepared_img, &layout);
    let dir = out_dir(&args.out)?;
    let path = dir.join(format!("{}.render.ppm", stem(&args.image)));
    save_ppm(&overlay, &path)?;
    Ok(format!(
        "RESULT render tokens={} file={}",
        layout.token_count(),
        path.display()
    ))
}

pub fn run(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match &cli.command {
        Command::Patchify(a) => run_patchify(a),
        Command::Train(a) => run_train(a),
        Command::EvalBias(a) => run_eval_bias(a),
        Command::Sweep(a) => run_sweep(a),
        Command::MakeTable(a) => run_make_table(a),
        Command::Render(a) => run_render(a),
    };
    match outcome {
        Ok(result) => {
            println!("{result}");
            0
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Usage2(e)) => {
            eprintln!("error: {e}");
            1
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}
