//! Command-line front end: synthetic dataset generation, training,
//! rendering, evaluation, voxel editing, and composition.
//!
//! Exit codes: 0 success, 2 configuration or script errors, 3 I/O errors
//! (datasets, checkpoints, file formats), 4 numeric failures (training
//! aborts, non-finite losses).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use voxelfield::checkpoint::{self, Checkpoint};
use voxelfield::dataset::{generate_oracle_dataset, load_dataset, save_dataset, OracleScene};
use voxelfield::error::Error;
use voxelfield::field::{FieldConfig, FieldNetwork};
use voxelfield::geom::{Camera, Mat3, Vec3};
use voxelfield::grid::init_from_bbox;
use voxelfield::metrics::{psnr, ssim};
use voxelfield::render::{normal_map, render_image, FieldRefs, RenderConfig};
use voxelfield::scene::{
    apply_edit_script, parse_script, render_composite, select_voxels, CompositeScene,
    FieldInstance, ScriptOp,
};
use voxelfield::train::{train, SceneSet, SceneState, TrainConfig};

#[derive(Parser)]
#[command(name = "voxelfield", version, about = "Sparse voxel field renderer and trainer")]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with the built-in analytic tracer.
    MakeSynthetic(MakeSyntheticArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Render a checkpoint from dataset poses or an orbit.
    Render(RenderArgs),
    /// Evaluate a checkpoint against a dataset split.
    Eval(EvalArgs),
    /// Apply a select/delete script to a checkpoint.
    Edit(EditArgs),
    /// Render a composition of checkpoints described by a script.
    Compose(ComposeArgs),
}

#[derive(Args)]
struct MakeSyntheticArgs {
    /// Scene name: sphere, spherebox, or empty.
    #[arg(long, default_value = "spherebox")]
    scene: String,
    /// Image resolution (square), minimum 16.
    #[arg(long, default_value_t = 64)]
    res: u32,
    /// Number of training views.
    #[arg(long, default_value_t = 30)]
    train: usize,
    /// Number of test views.
    #[arg(long, default_value_t = 10)]
    test: usize,
    #[arg(long)]
    seed: u64,
    /// Output directory (train/ and test/ subdirectories are created).
    #[arg(long)]
    out: PathBuf,
    /// Overwrite an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Optional TOML file with [train] and [field] tables; command-line
    /// flags win over file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    rays: Option<usize>,
    #[arg(long)]
    images_per_batch: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Ramp the regularizer weight linearly from --lambda to this value.
    #[arg(long)]
    lambda_final: Option<f64>,
    #[arg(long)]
    prune_period: Option<usize>,
    /// Comma-separated subdivision milestones, e.g. "750,1500".
    #[arg(long)]
    milestones: Option<String>,
    #[arg(long)]
    depth_weight: Option<f64>,
    /// Initial voxel count target for the bounding-box tiling.
    #[arg(long)]
    voxels: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    feat_freqs: Option<usize>,
    #[arg(long)]
    dir_freqs: Option<usize>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory providing poses (renders every view unless
    /// --view is given).
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    view: Option<usize>,
    /// Render an orbit of this many poses instead of dataset poses.
    #[arg(long)]
    orbit: Option<usize>,
    /// Orbit radius (default: 2.2 x grid half-diagonal).
    #[arg(long)]
    radius: Option<f64>,
    /// Orbit elevation in degrees.
    #[arg(long, default_value_t = 30.0)]
    elevation: f64,
    /// Orbit image resolution.
    #[arg(long, default_value_t = 64)]
    res: u32,
    /// Early-termination threshold override.
    #[arg(long)]
    eps: Option<f64>,
    /// Also write normal-map PNGs.
    #[arg(long)]
    normals: bool,
    /// Also write depth rasters.
    #[arg(long)]
    depth: bool,
    /// Also write per-pixel field-evaluation-count rasters.
    #[arg(long)]
    count_evals: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    eps: Option<f64>,
    /// Report file (also printed to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EditArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    script: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ComposeArgs {
    /// Compose script: instance/select/delete/clone/translate/rotate/
    /// background lines.
    #[arg(long)]
    script: PathBuf,
    /// Camera source: a dataset directory plus --view...
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    view: usize,
    /// ...or an explicit pose file (4x4 camera-to-world) with intrinsics.
    #[arg(long)]
    pose: Option<PathBuf>,
    #[arg(long)]
    intrinsics: Option<PathBuf>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match cli.command {
        Command::MakeSynthetic(args) => cmd_make_synthetic(args),
        Command::Train(args) => cmd_train(args),
        Command::Render(args) => cmd_render(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Edit(args) => cmd_edit(args),
        Command::Compose(args) => cmd_compose(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::Script { .. }
        | Error::PixelOutOfBounds { .. }
        | Error::InvalidCamera(_)
        | Error::DegenerateBbox { .. }
        | Error::EmptyPointSet
        | Error::UnknownCell(_) => 2,
        Error::Io(_)
        | Error::Dataset { .. }
        | Error::Image(_)
        | Error::CheckpointVersion(_)
        | Error::ChecksumMismatch
        | Error::MalformedCheckpoint(_) => 3,
        _ => 4,
    }
}

/// CRC32 over sorted relative paths and file contents of a directory.
fn hash_dir(dir: &Path) -> std::io::Result<u32> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push(path);
            }
        }
    }
    files.sort();
    let mut hasher = crc32fast::Hasher::new();
    for f in &files {
        hasher.update(f.strip_prefix(dir).unwrap_or(f).to_string_lossy().as_bytes());
        hasher.update(&fs::read(f)?);
    }
    Ok(hasher.finalize())
}

/// Reproducibility record, written before any long computation starts.
fn write_manifest(
    out_dir: &Path,
    command: &str,
    seed: Option<u64>,
    dataset: Option<&Path>,
    config_snapshot: &str,
) -> Result<(), Error> {
    fs::create_dir_all(out_dir)?;
    let mut text = String::new();
    text.push_str("voxelfield-run v1\n");
    text.push_str(&format!("command {command}\n"));
    text.push_str(&format!("version {}\n", env!("CARGO_PKG_VERSION")));
    if let Some(seed) = seed {
        text.push_str(&format!("seed {seed}\n"));
    }
    if let Some(ds) = dataset {
        text.push_str(&format!("dataset {}\n", ds.display()));
        text.push_str(&format!("dataset_crc32 {:08x}\n", hash_dir(ds)?));
    }
    text.push_str(&format!("output {}\n", out_dir.display()));
    text.push_str("config_begin\n");
    text.push_str(config_snapshot);
    if !config_snapshot.ends_with('\n') {
        text.push('\n');
    }
    text.push_str("config_end\n");
    fs::write(out_dir.join("manifest.txt"), text)?;
    Ok(())
}

fn cmd_make_synthetic(args: MakeSyntheticArgs) -> Result<(), Error> {
    if args.out.exists()
        && fs::read_dir(&args.out).map(|mut d| d.next().is_some()).unwrap_or(false)
        && !args.force
    {
        return Err(Error::Config(format!(
            "output directory {} is not empty (use --force to overwrite)",
            args.out.display()
        )));
    }
    let scene = OracleScene::named(&args.scene)?;
    let snapshot = format!(
        "scene = {:?}\nres = {}\ntrain = {}\ntest = {}\n",
        args.scene, args.res, args.train, args.test
    );
    write_manifest(&args.out, "make-synthetic", Some(args.seed), None, &snapshot)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let (train_set, test_set) =
        generate_oracle_dataset(&scene, args.train, args.test, args.res, &mut rng)?;
    save_dataset(&train_set, &args.out.join("train"))?;
    if !test_set.items.is_empty() {
        save_dataset(&test_set, &args.out.join("test"))?;
    }
    println!(
        "wrote {} train and {} test views to {}",
        args.train,
        args.test,
        args.out.display()
    );
    Ok(())
}

#[derive(Debug, Default, serde::Deserialize)]
struct FileConfig {
    train: Option<toml::Table>,
    field: Option<toml::Table>,
}

fn toml_get<T: serde::de::DeserializeOwned>(
    table: &Option<toml::Table>,
    key: &str,
) -> Result<Option<T>, Error> {
    match table.as_ref().and_then(|t| t.get(key)) {
        None => Ok(None),
        Some(v) => v
            .clone()
            .try_into()
            .map(Some)
            .map_err(|e| Error::Config(format!("config key '{key}': {e}"))),
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let file: FileConfig = match &args.config {
        Some(path) => toml::from_str(&fs::read_to_string(path)?)
            .map_err(|e| Error::Config(format!("config file: {e}")))?,
        None => FileConfig::default(),
    };

    let data = load_dataset(&args.dataset)?;
    let mut cfg = TrainConfig {
        rays_per_image: 512,
        images_per_batch: 2,
        lr: 0.005,
        lambda_reg: 0.005,
        lambda_reg_final: Some(0.04),
        total_steps: 1800,
        prune_period: 250,
        subdivide_milestones: vec![750],
        z_max: data.background_depth,
        prune_check_view: Some(0),
        ..TrainConfig::default()
    };
    // File values override built-in defaults; flags override the file.
    let t = &file.train;
    if let Some(v) = toml_get(t, "rays_per_image")? {
        cfg.rays_per_image = v;
    }
    if let Some(v) = toml_get(t, "images_per_batch")? {
        cfg.images_per_batch = v;
    }
    if let Some(v) = toml_get(t, "lr")? {
        cfg.lr = v;
    }
    if let Some(v) = toml_get(t, "lambda_reg")? {
        cfg.lambda_reg = v;
    }
    if let Some(v) = toml_get(t, "lambda_reg_final")? {
        cfg.lambda_reg_final = Some(v);
    }
    if let Some(v) = toml_get(t, "prune_period")? {
        cfg.prune_period = v;
    }
    if let Some(v) = toml_get(t, "subdivide_milestones")? {
        cfg.subdivide_milestones = v;
    }
    if let Some(v) = toml_get(t, "total_steps")? {
        cfg.total_steps = v;
    }
    if let Some(v) = toml_get(t, "depth_loss_weight")? {
        cfg.depth_loss_weight = v;
    }
    if let Some(v) = toml_get(t, "prune_start")? {
        cfg.prune_start = Some(v);
    }
    if let Some(v) = toml_get(t, "z_max")? {
        cfg.z_max = v;
    }
    if let Some(v) = toml_get(t, "jitter")? {
        cfg.jitter = v;
    }
    if let Some(v) = args.steps {
        cfg.total_steps = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.rays {
        cfg.rays_per_image = v;
    }
    if let Some(v) = args.images_per_batch {
        cfg.images_per_batch = v;
    }
    if let Some(v) = args.lambda {
        cfg.lambda_reg = v;
    }
    if let Some(v) = args.lambda_final {
        cfg.lambda_reg_final = Some(v);
    }
    if let Some(v) = args.prune_period {
        cfg.prune_period = v;
    }
    if let Some(ms) = &args.milestones {
        cfg.subdivide_milestones = ms
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad milestone '{s}'")))
            })
            .collect::<Result<_, _>>()?;
    }
    if let Some(v) = args.depth_weight {
        cfg.depth_loss_weight = v;
    }
    cfg.checkpoint_dir = Some(args.out.clone());

    let mut field_cfg = FieldConfig {
        embed_dim: 16,
        feat_freqs: 6,
        dir_freqs: 4,
        hidden: 32,
        density_layers: 2,
        color_layers: 2,
    };
    let f = &file.field;
    if let Some(v) = toml_get(f, "embed_dim")? {
        field_cfg.embed_dim = v;
    }
    if let Some(v) = toml_get(f, "hidden")? {
        field_cfg.hidden = v;
    }
    if let Some(v) = toml_get(f, "feat_freqs")? {
        field_cfg.feat_freqs = v;
    }
    if let Some(v) = toml_get(f, "dir_freqs")? {
        field_cfg.dir_freqs = v;
    }
    if let Some(v) = args.embed_dim {
        field_cfg.embed_dim = v;
    }
    if let Some(v) = args.hidden {
        field_cfg.hidden = v;
    }
    if let Some(v) = args.feat_freqs {
        field_cfg.feat_freqs = v;
    }
    if let Some(v) = args.dir_freqs {
        field_cfg.dir_freqs = v;
    }
    let mut voxel_target = 1000;
    if let Some(v) = toml_get(t, "initial_voxels")? {
        voxel_target = v;
    }
    if let Some(v) = args.voxels {
        voxel_target = v;
    }

    let snapshot = format!(
        "{}\n[field]\n{}",
        toml::to_string(&toml::Table::try_from(&cfg).map_err(|e| Error::Config(e.to_string()))?)
            .unwrap_or_default(),
        toml::to_string(
            &toml::Table::try_from(&field_cfg).map_err(|e| Error::Config(e.to_string()))?
        )
        .unwrap_or_default()
    );
    write_manifest(&args.out, "train", Some(args.seed), Some(&args.dataset), &snapshot)?;

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let (grid, table) = init_from_bbox(&data.bbox, voxel_target, field_cfg.embed_dim, &mut rng)?;
    let net = FieldNetwork::new(field_cfg, &mut rng);
    let mut set = SceneSet {
        scenes: vec![SceneState::new(grid, table)],
        net,
    };
    // The trainer streams train.log into the output directory itself.
    let log = train(&mut set, &[data], &cfg, &mut rng)?;
    let _ = log;

    // Final metrics on the sibling test split when present.
    let test_dir = args.dataset.parent().map(|p| p.join("test"));
    if let Some(test_dir) = test_dir.filter(|d| d.is_dir() && *d != args.dataset) {
        if let Ok(test_set) = load_dataset(&test_dir) {
            let ckpt = set.scenes[0].checkpoint(&set.net, cfg.z_max);
            let report = eval_report(&ckpt, &test_set, 0.01)?;
            print!("{report}");
            fs::write(args.out.join("eval.txt"), report)?;
        }
    }
    println!("final checkpoint: {}", args.out.join("final.vf").display());
    Ok(())
}

fn orbit_camera(center: Vec3, radius: f64, elevation_deg: f64, azimuth: f64, res: u32) -> Camera {
    let el = elevation_deg.to_radians();
    let eye = center
        + Vec3::new(
            radius * el.cos() * azimuth.cos(),
            radius * el.cos() * azimuth.sin(),
            radius * el.sin(),
        );
    Camera::look_at(res as f64, res, res, eye, center, Vec3::new(0.0, 0.0, 1.0))
        .expect("orbit placement is nondegenerate")
}

fn cmd_render(args: RenderArgs) -> Result<(), Error> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let mut cfg = ckpt.render_config();
    if let Some(eps) = args.eps {
        cfg.early_stop_eps = eps;
    }
    let cameras: Vec<(String, Camera)> = if let Some(n) = args.orbit {
        let bbox = ckpt.grid.world_bbox();
        let radius = args.radius.unwrap_or(2.2 * bbox.half_diagonal());
        (0..n)
            .map(|i| {
                let az = i as f64 / n as f64 * std::f64::consts::TAU;
                (
                    format!("{i:04}"),
                    orbit_camera(bbox.center(), radius, args.elevation, az, args.res),
                )
            })
            .collect()
    } else if let Some(ds) = &args.dataset {
        let data = load_dataset(ds)?;
        data.items
            .iter()
            .enumerate()
            .filter(|(i, _)| args.view.is_none_or(|v| v == *i))
            .map(|(i, item)| (format!("{i:04}"), item.camera))
            .collect()
    } else {
        return Err(Error::Config(
            "render needs either --dataset or --orbit".into(),
        ));
    };
    if cameras.is_empty() {
        return Err(Error::Config("no poses selected".into()));
    }
    let snapshot = format!("checkpoint = {:?}\neps = {}\n", args.checkpoint, cfg.early_stop_eps);
    write_manifest(&args.out, "render", None, None, &snapshot)?;

    let field = FieldRefs {
        grid: &ckpt.grid,
        table: &ckpt.table,
        net: &ckpt.net,
    };
    let mut total_evals = 0u64;
    for (name, camera) in &cameras {
        let img = render_image(camera, field, &cfg, ckpt.background);
        img.color.save_png(&args.out.join(format!("{name}.png")))?;
        if args.depth {
            img.depth.save(&args.out.join(format!("{name}_depth.raw")))?;
        }
        if args.normals {
            let nm = normal_map(&img.depth, &img.transparency, camera);
            nm.save_png(&args.out.join(format!("{name}_normal.png")))?;
        }
        if args.count_evals {
            img.eval_count
                .save(&args.out.join(format!("{name}_evals.raw")))?;
        }
        total_evals += img.total_evals();
    }
    println!(
        "rendered {} view(s), {} field evaluations total",
        cameras.len(),
        total_evals
    );
    Ok(())
}

fn eval_report(
    ckpt: &Checkpoint,
    data: &voxelfield::dataset::PosedImageSet,
    eps: f64,
) -> Result<String, Error> {
    if data.items.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    let mut cfg = ckpt.render_config();
    cfg.early_stop_eps = eps;
    let field = FieldRefs {
        grid: &ckpt.grid,
        table: &ckpt.table,
        net: &ckpt.net,
    };
    let mut report = String::from("view psnr ssim\n");
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for (i, item) in data.items.iter().enumerate() {
        let img = render_image(&item.camera, field, &cfg, ckpt.background);
        let p = psnr(&img.color, &item.image)?;
        let s = ssim(&img.color, &item.image)?;
        report.push_str(&format!("{i:04} {p:.4} {s:.4}\n"));
        psnr_sum += p;
        ssim_sum += s;
    }
    let n = data.items.len() as f64;
    report.push_str(&format!("mean {:.4} {:.4}\n", psnr_sum / n, ssim_sum / n));
    Ok(report)
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let data = load_dataset(&args.dataset)?;
    let report = eval_report(&ckpt, &data, args.eps.unwrap_or(0.01))?;
    print!("{report}");
    if let Some(out) = &args.out {
        if let Some(parent) = out.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(out, &report)?;
    }
    Ok(())
}

fn cmd_edit(args: EditArgs) -> Result<(), Error> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let script = fs::read_to_string(&args.script)?;
    let (grid, table) = apply_edit_script(&ckpt.grid, &ckpt.table, &script)?;
    let edited = Checkpoint {
        grid,
        table,
        net: ckpt.net,
        background: ckpt.background,
        step_size: ckpt.step_size,
        z_max: ckpt.z_max,
    };
    checkpoint::save(&edited, &args.out)?;
    println!(
        "edited checkpoint: {} cells -> {} cells",
        ckpt.grid.cell_count(),
        edited.grid.cell_count()
    );
    Ok(())
}

/// Builds a composite from a compose script. `instance` pushes a loaded
/// checkpoint; select/delete/clone/translate/rotate apply to the most
/// recent instance; `background` overrides the shared background.
fn build_composite(script: &str, script_dir: &Path) -> Result<CompositeScene, Error> {
    let ops = parse_script(script)?;
    let mut instances: Vec<FieldInstance> = Vec::new();
    let mut selection: Option<Vec<[i32; 3]>> = None;
    let mut background: Option<[f64; 3]> = None;
    for (i, op) in ops.iter().enumerate() {
        let line_err = |detail: String| Error::Script {
            line: i + 1,
            detail,
        };
        if instances.is_empty() && !matches!(op, ScriptOp::Instance(_) | ScriptOp::Background(_))
        {
            return Err(line_err("no instance loaded yet".into()));
        }
        match op {
            ScriptOp::Instance(path) => {
                let full = script_dir.join(path);
                let resolved = if full.exists() { full } else { PathBuf::from(path) };
                let ckpt = checkpoint::load(&resolved)?;
                let id = instances.len();
                instances.push(FieldInstance::new(
                    ckpt.grid,
                    Arc::new(ckpt.table),
                    Arc::new(ckpt.net),
                    ckpt.background,
                    id,
                ));
                selection = None;
            }
            ScriptOp::SelectAll => {
                let k = instances.len() - 1;
                selection = Some(instances[k].grid.cells().to_vec());
            }
            ScriptOp::SelectBox(region) => {
                let k = instances.len() - 1;
                selection = Some(select_voxels(&instances[k].grid, region));
            }
            ScriptOp::Delete => {
                let k = instances.len() - 1;
                let doomed: std::collections::HashSet<[i32; 3]> =
                    selection.take().unwrap_or_default().into_iter().collect();
                let kept: std::collections::HashSet<[i32; 3]> = instances[k]
                    .grid
                    .cells()
                    .iter()
                    .filter(|c| !doomed.contains(*c))
                    .copied()
                    .collect();
                instances[k].grid = instances[k].grid.restricted(&kept);
            }
            ScriptOp::Clone => {
                let k = instances.len() - 1;
                let cells = selection
                    .take()
                    .unwrap_or_else(|| instances[k].grid.cells().to_vec());
                let copy = voxelfield::scene::clone_voxels(
                    &instances[k],
                    &cells,
                    Mat3::IDENTITY,
                    Vec3::ZERO,
                )?;
                instances.push(copy);
            }
            ScriptOp::Translate(t) => {
                let inst = instances.pop().unwrap();
                instances.push(inst.translated(*t));
            }
            ScriptOp::Rotate { axis, degrees } => {
                let inst = instances.pop().unwrap();
                instances.push(inst.rotated(Mat3::rotation_axis(*axis, degrees.to_radians())));
            }
            ScriptOp::Background(bg) => background = Some(*bg),
        }
    }
    if instances.is_empty() {
        return Err(Error::Script {
            line: 0,
            detail: "compose script declared no instances".into(),
        });
    }
    let mut scene = CompositeScene::new(instances);
    if let Some(bg) = background {
        scene.background = bg;
    }
    Ok(scene)
}

fn load_pose_camera(pose: &Path, intrinsics: &Path) -> Result<Camera, Error> {
    let bad = |path: &Path, msg: &str| Error::Dataset {
        path: path.to_path_buf(),
        detail: msg.into(),
    };
    let text = fs::read_to_string(intrinsics)?;
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| bad(intrinsics, "malformed number")))
        .collect::<Result<_, _>>()?;
    if vals.len() != 5 {
        return Err(bad(intrinsics, "intrinsics need: focal cx cy width height"));
    }
    let text = fs::read_to_string(pose)?;
    let m: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| bad(pose, "malformed number")))
        .collect::<Result<_, _>>()?;
    if m.len() != 16 {
        return Err(bad(pose, "pose needs a 4x4 row-major matrix"));
    }
    Camera::new(
        vals[0],
        (vals[1], vals[2]),
        vals[3] as u32,
        vals[4] as u32,
        Mat3::from_rows([m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]),
        Vec3::new(m[3], m[7], m[11]),
    )
}

fn cmd_compose(args: ComposeArgs) -> Result<(), Error> {
    let script = fs::read_to_string(&args.script)?;
    let script_dir = args
        .script
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let scene = build_composite(&script, &script_dir)?;

    let camera = if let Some(ds) = &args.dataset {
        let data = load_dataset(ds)?;
        data.items
            .get(args.view)
            .ok_or_else(|| Error::Config(format!("dataset has no view {}", args.view)))?
            .camera
    } else if let (Some(pose), Some(intr)) = (&args.pose, &args.intrinsics) {
        load_pose_camera(pose, intr)?
    } else {
        return Err(Error::Config(
            "compose needs --dataset or --pose with --intrinsics".into(),
        ));
    };

    // Step size / depth range from the instances themselves.
    let step_size = scene
        .instances
        .iter()
        .map(|i| i.grid.voxel_size() / 8.0)
        .fold(f64::INFINITY, f64::min);
    let z_max = scene
        .instances
        .iter()
        .map(|i| {
            (camera.center() - i.translation).norm() + i.grid.world_bbox().half_diagonal() + 1.0
        })
        .fold(0.0, f64::max);
    let cfg = RenderConfig {
        step_size,
        early_stop_eps: args.eps.unwrap_or(0.01),
        z_max,
        jitter: false,
    };
    let img = render_composite(&scene, &camera, &cfg);
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    img.color.save_png(&args.out)?;
    println!(
        "composed {} instance(s) -> {}",
        scene.instances.len(),
        args.out.display()
    );
    Ok(())
}
