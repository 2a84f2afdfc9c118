//! End-to-end optimization: the photometric loss with its transparency
//! regularizer (and optional depth term), biased ray batching, Adam, and
//! the progressive schedule of periodic self-pruning plus milestone
//! subdivision with step-size halving. Multiple scenes can share one MLP,
//! each keeping its own embeddings and background.

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::{self, Checkpoint};
use crate::dataset::PosedImageSet;
use crate::error::{Error, Result};
use crate::field::{FieldNetwork, GradientBuffer};
use crate::geom::Ray;
use crate::grid::{intersect_grid, prune, quantize, subdivide, EmbeddingTable, SparseVoxelGrid};
use crate::metrics::psnr;
use crate::render::{render_image, render_ray, render_ray_backward, FieldRefs, RenderConfig};

/// Training hyperparameters and schedule.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub rays_per_image: usize,
    pub images_per_batch: usize,
    /// Initial Adam learning rate; decays linearly to zero over the run.
    pub lr: f64,
    /// Weight of the transparency regularizer.
    pub lambda_reg: f64,
    /// When set, the regularizer weight ramps linearly from `lambda_reg`
    /// at step 0 to this value at the final step. A strong prior too early
    /// flattens the scene before geometry emerges; too weak late leaves
    /// half-transparent haze.
    pub lambda_reg_final: Option<f64>,
    /// Self-pruning runs every this many steps (once allowed).
    pub prune_period: usize,
    /// Steps at which every voxel splits in eight and the step size halves.
    pub subdivide_milestones: Vec<usize>,
    pub total_steps: usize,
    pub depth_loss_weight: f64,
    /// First step at which pruning may run. Default: the first milestone,
    /// or a third of the run when there are no milestones.
    pub prune_start: Option<usize>,
    pub prune_samples_per_axis: usize,
    pub prune_gamma: f64,
    /// Ray-marching step size; default is voxel_size / 8.
    pub initial_step_size: Option<f64>,
    pub z_max: f64,
    pub jitter: bool,
    /// Biased sampling: rays missing all voxels are redrawn up to this
    /// many times, then accepted as background rays.
    pub max_ray_retries: usize,
    /// Dataset view rendered before and after each prune event so the
    /// log records the PSNR impact.
    pub prune_check_view: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rays_per_image: 2048,
            images_per_batch: 4,
            lr: 0.001,
            lambda_reg: 0.01,
            lambda_reg_final: None,
            prune_period: 500,
            subdivide_milestones: vec![1000, 3000],
            total_steps: 4000,
            depth_loss_weight: 0.0,
            prune_start: None,
            prune_samples_per_axis: 16,
            prune_gamma: 0.5,
            initial_step_size: None,
            z_max: 10.0,
            jitter: true,
            max_ray_retries: 64,
            prune_check_view: None,
            checkpoint_dir: None,
        }
    }
}

/// Learnable state of one scene.
#[derive(Debug, Clone)]
pub struct SceneState {
    pub grid: SparseVoxelGrid,
    pub table: EmbeddingTable,
    pub background: [f64; 3],
    /// Current ray-marching step size (halved at each milestone).
    pub step_size: f64,
}

impl SceneState {
    pub fn new(grid: SparseVoxelGrid, table: EmbeddingTable) -> SceneState {
        let step_size = grid.voxel_size() / 8.0;
        SceneState {
            grid,
            table,
            background: [0.5, 0.5, 0.5],
            step_size,
        }
    }

    pub fn render_config(&self, cfg: &TrainConfig, eps: f64) -> RenderConfig {
        RenderConfig {
            step_size: self.step_size,
            early_stop_eps: eps,
            z_max: cfg.z_max,
            jitter: cfg.jitter,
        }
    }

    pub fn checkpoint(&self, net: &FieldNetwork, z_max: f64) -> Checkpoint {
        Checkpoint {
            grid: self.grid.clone(),
            table: self.table.clone(),
            net: net.clone(),
            background: self.background,
            step_size: self.step_size,
            z_max,
        }
    }
}

/// Per-scene embeddings and backgrounds around one shared MLP.
#[derive(Debug, Clone)]
pub struct SceneSet {
    pub scenes: Vec<SceneState>,
    pub net: FieldNetwork,
}

/// Adam moment accumulators for one parameter group.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(len: usize) -> AdamState {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    /// Rebuilds the moment vectors after a grid rebuild: surviving rows
    /// carry their state, new rows start from zero.
    fn remap_rows(&mut self, row_map: &[Option<u32>], dim: usize, new_rows: usize) {
        let mut m = vec![0.0; new_rows * dim];
        let mut v = vec![0.0; new_rows * dim];
        for (old_row, maybe_new) in row_map.iter().enumerate() {
            if let Some(new_row) = maybe_new {
                let (src, dst) = (old_row * dim, *new_row as usize * dim);
                m[dst..dst + dim].copy_from_slice(&self.m[src..src + dim]);
                v[dst..dst + dim].copy_from_slice(&self.v[src..src + dim]);
            }
        }
        self.m = m;
        self.v = v;
    }
}

/// Bias-corrected Adam update over one contiguous parameter group.
/// Parameters are re-quantized to f32-exact values; `clamp` projects each
/// parameter into a range after the step (used for the background color).
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    clamp: Option<(f64, f64)>,
) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let bias1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let bias2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / bias1;
        let v_hat = state.v[i] / bias2;
        let mut p = params[i] - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        if let Some((lo, hi)) = clamp {
            p = p.clamp(lo, hi);
        }
        params[i] = quantize(p);
    }
}

/// Adam over a list of (parameter slice, gradient slice) pairs sharing one
/// moment buffer, in order.
fn adam_step_slices(
    params: Vec<&mut [f64]>,
    grads: Vec<&[f64]>,
    state: &mut AdamState,
    lr: f64,
) {
    assert_eq!(params.len(), grads.len());
    state.step += 1;
    let bias1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let bias2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    let mut off = 0usize;
    for (pslice, gslice) in params.into_iter().zip(grads) {
        assert_eq!(pslice.len(), gslice.len());
        for (p, &g) in pslice.iter_mut().zip(gslice) {
            let m = &mut state.m[off];
            let v = &mut state.v[off];
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p = quantize(*p - lr * m_hat / (v_hat.sqrt() + ADAM_EPS));
            off += 1;
        }
    }
    assert_eq!(off, state.m.len());
}

/// The transparency prior: a smoothed beta-distribution penalty, shifted
/// so it vanishes at A = 0 and A = 1 and peaks at A = 1/2.
pub fn transparency_penalty(a: f64) -> f64 {
    (0.1 + a).ln() + (1.1 - a).ln() - (0.1f64).ln() - (1.1f64).ln()
}

pub fn transparency_penalty_grad(a: f64) -> f64 {
    1.0 / (0.1 + a) - 1.0 / (1.1 - a)
}

/// One training ray with its supervision.
#[derive(Debug, Clone)]
pub struct RayTarget {
    pub ray: Ray,
    pub color: [f64; 3],
    pub depth: Option<f64>,
    pub view: usize,
    pub pixel: (u32, u32),
}

/// Draws `images_per_batch` views and `rays_per_image` pixel rays each,
/// redrawing rays that miss every voxel up to `max_ray_retries` times
/// before accepting them as background rays.
pub fn sample_ray_batch(
    dataset: &PosedImageSet,
    scene: &SceneState,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<RayTarget>> {
    if scene.grid.cell_count() == 0 {
        return Err(Error::NoVoxels);
    }
    if dataset.items.is_empty() {
        return Err(Error::Config("dataset has no views".into()));
    }
    let mut batch = Vec::with_capacity(cfg.images_per_batch * cfg.rays_per_image);
    for _ in 0..cfg.images_per_batch {
        let view = rng.gen_range(0..dataset.items.len());
        let item = &dataset.items[view];
        for _ in 0..cfg.rays_per_image {
            let mut chosen: Option<(u32, u32, Ray)> = None;
            for attempt in 0..=cfg.max_ray_retries {
                let x = rng.gen_range(0..item.image.width);
                let y = rng.gen_range(0..item.image.height);
                let ray = crate::geom::pixel_ray(&item.camera, x as f64 + 0.5, y as f64 + 0.5)
                    .expect("pixel centers in bounds");
                if attempt == cfg.max_ray_retries || !intersect_grid(&ray, &scene.grid).is_empty()
                {
                    chosen = Some((x, y, ray));
                    break;
                }
            }
            let (x, y, ray) = chosen.expect("retry loop always selects a ray");
            batch.push(RayTarget {
                ray,
                color: item.image.get(x, y),
                depth: item.depth.as_ref().map(|d| d.get(x, y) as f64),
                view,
                pixel: (x, y),
            });
        }
    }
    Ok(batch)
}

/// Loss terms of one batch.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub mse: f64,
    pub reg: f64,
    pub depth: f64,
}

/// Renders and backpropagates a batch: mean squared color error over the
/// batch plus `lambda * mean(penalty(A))` plus an optional mean absolute
/// depth term. Rays are processed in fixed-size chunks whose gradient
/// buffers are reduced in order, so results do not depend on the worker
/// count.
pub fn loss_and_grads(
    batch: &[RayTarget],
    scene: &SceneState,
    net: &FieldNetwork,
    cfg: &TrainConfig,
    jitter_seed: u64,
    step: usize,
) -> Result<(LossBreakdown, GradientBuffer, u64)> {
    assert!(!batch.is_empty(), "empty batch");
    let render_cfg = scene.render_config(cfg, 0.0);
    let n = batch.len() as f64;
    let n_depth = batch.iter().filter(|r| r.depth.is_some()).count().max(1) as f64;
    let use_depth = cfg.depth_loss_weight > 0.0;

    const CHUNK: usize = 64;
    struct ChunkOut {
        grads: GradientBuffer,
        mse: f64,
        reg: f64,
        depth: f64,
        evals: u64,
        bad_ray: Option<String>,
    }

    let chunks: Vec<ChunkOut> = batch
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(chunk_idx, rays)| {
            let mut out = ChunkOut {
                grads: GradientBuffer::zeros(&scene.table, net),
                mse: 0.0,
                reg: 0.0,
                depth: 0.0,
                evals: 0,
                bad_ray: None,
            };
            let field = FieldRefs {
                grid: &scene.grid,
                table: &scene.table,
                net,
            };
            for (i, target) in rays.iter().enumerate() {
                let ray_index = (chunk_idx * CHUNK + i) as u64;
                let mut jitter = ChaCha8Rng::seed_from_u64(
                    jitter_seed ^ ray_index.wrapping_mul(0x9E37_79B9_7F4A_7C15),
                );
                let rng: Option<&mut dyn rand::RngCore> =
                    cfg.jitter.then_some(&mut jitter as _);
                let result = render_ray(&target.ray, field, &render_cfg, scene.background, rng);
                out.evals += result.eval_count as u64;

                let e = [
                    result.color[0] - target.color[0],
                    result.color[1] - target.color[1],
                    result.color[2] - target.color[2],
                ];
                out.mse += e[0] * e[0] + e[1] * e[1] + e[2] * e[2];
                out.reg += transparency_penalty(result.transparency);
                let d_color = [2.0 * e[0] / n, 2.0 * e[1] / n, 2.0 * e[2] / n];
                let d_trans =
                    cfg.lambda_reg * transparency_penalty_grad(result.transparency) / n;
                let mut d_depth = 0.0;
                if use_depth {
                    if let Some(z_star) = target.depth {
                        let diff = result.depth - z_star;
                        out.depth += diff.abs();
                        d_depth = cfg.depth_loss_weight * diff.signum() / n_depth;
                    }
                }
                if !(result.color.iter().all(|c| c.is_finite())
                    && result.depth.is_finite()
                    && result.transparency.is_finite())
                {
                    out.bad_ray.get_or_insert_with(|| {
                        format!(
                            "view {} pixel {:?} rendered non-finite output",
                            target.view, target.pixel
                        )
                    });
                    continue;
                }
                render_ray_backward(
                    &result,
                    field,
                    &render_cfg,
                    scene.background,
                    d_color,
                    d_depth,
                    d_trans,
                    &mut out.grads,
                )?;
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut grads = GradientBuffer::zeros(&scene.table, net);
    let mut sums = LossBreakdown::default();
    let mut evals = 0u64;
    let mut bad: Option<String> = None;
    for c in &chunks {
        grads.accumulate(&c.grads);
        sums.mse += c.mse;
        sums.reg += c.reg;
        sums.depth += c.depth;
        evals += c.evals;
        if bad.is_none() {
            bad = c.bad_ray.clone();
        }
    }
    let loss = LossBreakdown {
        mse: sums.mse / n,
        reg: sums.reg / n,
        depth: sums.depth / n_depth,
        total: sums.mse / n
            + cfg.lambda_reg * sums.reg / n
            + if use_depth {
                cfg.depth_loss_weight * sums.depth / n_depth
            } else {
                0.0
            },
    };
    if let Some(detail) = bad {
        return Err(Error::NonFiniteLoss { step, detail });
    }
    if !loss.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            detail: "loss aggregate is non-finite".into(),
        });
    }
    Ok((loss, grads, evals))
}

/// One line of the training log.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub scene: usize,
    pub loss: LossBreakdown,
    pub voxels: usize,
    pub evals: u64,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct PruneEvent {
    pub step: usize,
    pub scene: usize,
    pub cells_before: usize,
    pub cells_after: usize,
    pub psnr_before: Option<f64>,
    pub psnr_after: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SubdivideEvent {
    pub step: usize,
    pub scene: usize,
    pub cells: usize,
    pub step_size: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub prunes: Vec<PruneEvent>,
    pub subdivisions: Vec<SubdivideEvent>,
}

fn step_line(r: &StepRecord) -> String {
    format!(
        "step={} scene={} loss={:.6e} mse={:.6e} reg={:.6e} depth={:.6e} voxels={} evals={} lr={:.6e} wall_ms={:.1}\n",
        r.step, r.scene, r.loss.total, r.loss.mse, r.loss.reg, r.loss.depth,
        r.voxels, r.evals, r.lr, r.wall_ms
    )
}

fn prune_line(p: &PruneEvent) -> String {
    format!(
        "event=prune step={} scene={} cells_before={} cells_after={} psnr_before={} psnr_after={}\n",
        p.step,
        p.scene,
        p.cells_before,
        p.cells_after,
        p.psnr_before.map_or("na".into(), |v| format!("{v:.3}")),
        p.psnr_after.map_or("na".into(), |v| format!("{v:.3}")),
    )
}

fn subdivide_line(s: &SubdivideEvent) -> String {
    format!(
        "event=subdivide step={} scene={} cells={} step_size={:.6e}\n",
        s.step, s.scene, s.cells, s.step_size
    )
}

impl TrainLog {
    /// Line-delimited `key=value` records.
    pub fn render_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.steps {
            out.push_str(&step_line(r));
        }
        for p in &self.prunes {
            out.push_str(&prune_line(p));
        }
        for s in &self.subdivisions {
            out.push_str(&subdivide_line(s));
        }
        out
    }
}

/// Appends log lines to `<checkpoint_dir>/train.log` as training runs.
struct LogSink {
    file: Option<std::io::BufWriter<std::fs::File>>,
}

impl LogSink {
    fn new(dir: Option<&PathBuf>) -> Result<LogSink> {
        let file = match dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(std::io::BufWriter::new(std::fs::File::create(
                    dir.join("train.log"),
                )?))
            }
            None => None,
        };
        Ok(LogSink { file })
    }

    fn write(&mut self, line: &str) {
        use std::io::Write;
        if let Some(f) = self.file.as_mut() {
            let _ = f.write_all(line.as_bytes());
            let _ = f.flush();
        }
    }
}

fn validation_psnr(
    scene: &SceneState,
    net: &FieldNetwork,
    cfg: &TrainConfig,
    dataset: &PosedImageSet,
    view: usize,
) -> Option<f64> {
    let item = dataset.items.get(view)?;
    let mut render_cfg = scene.render_config(cfg, 0.01);
    render_cfg.jitter = false;
    let img = render_image(
        &item.camera,
        FieldRefs {
            grid: &scene.grid,
            table: &scene.table,
            net,
        },
        &render_cfg,
        scene.background,
    );
    psnr(&img.color, &item.image).ok()
}

/// The training loop: batch, loss, Adam, periodic pruning once allowed,
/// milestone subdivision with step-size halving, and checkpoints at
/// milestones and the end. With several scenes, batches round-robin and
/// the shared MLP receives gradients from all of them.
pub fn train(
    set: &mut SceneSet,
    datasets: &[PosedImageSet],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<TrainLog> {
    if datasets.len() != set.scenes.len() {
        return Err(Error::Config(format!(
            "{} scenes but {} datasets",
            set.scenes.len(),
            datasets.len()
        )));
    }
    for scene in &set.scenes {
        if scene.grid.cell_count() == 0 {
            return Err(Error::NoVoxels);
        }
    }
    let mut log = TrainLog::default();
    if let Some(step0) = cfg.initial_step_size {
        for scene in &mut set.scenes {
            scene.step_size = step0;
        }
    }
    let prune_start = cfg.prune_start.unwrap_or_else(|| {
        cfg.subdivide_milestones
            .first()
            .copied()
            .unwrap_or(cfg.total_steps.div_ceil(3))
    });

    let mut sink = LogSink::new(cfg.checkpoint_dir.as_ref())?;
    let mut net_state = AdamState::new(set.net.param_count());
    let mut table_states: Vec<AdamState> = set
        .scenes
        .iter()
        .map(|s| AdamState::new(s.table.data().len()))
        .collect();
    let mut bg_states: Vec<AdamState> = set.scenes.iter().map(|_| AdamState::new(3)).collect();

    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let save_all = |set: &SceneSet, name: &str| -> Result<()> {
        if let Some(dir) = &cfg.checkpoint_dir {
            for (i, scene) in set.scenes.iter().enumerate() {
                let file = if set.scenes.len() == 1 {
                    format!("{name}.vf")
                } else {
                    format!("{name}_s{i}.vf")
                };
                checkpoint::save(&scene.checkpoint(&set.net, cfg.z_max), &dir.join(file))?;
            }
        }
        Ok(())
    };

    let n_scenes = set.scenes.len();
    for step in 0..cfg.total_steps {
        let t0 = Instant::now();
        let scene_idx = step % n_scenes;
        let lr_t = cfg.lr * (1.0 - step as f64 / cfg.total_steps as f64);

        let batch = sample_ray_batch(&datasets[scene_idx], &set.scenes[scene_idx], cfg, rng)?;
        let jitter_seed: u64 = rng.gen();
        let mut step_cfg = cfg.clone();
        if let Some(final_lambda) = cfg.lambda_reg_final {
            let t = step as f64 / cfg.total_steps.max(1) as f64;
            step_cfg.lambda_reg = cfg.lambda_reg + t * (final_lambda - cfg.lambda_reg);
        }
        let (loss, grads, evals) = loss_and_grads(
            &batch,
            &set.scenes[scene_idx],
            &set.net,
            &step_cfg,
            jitter_seed,
            step,
        )?;

        adam_step_slices(
            set.net.param_slices_mut(),
            grads.net.slices(),
            &mut net_state,
            lr_t,
        );
        let scene = &mut set.scenes[scene_idx];
        adam_step(
            scene.table.data_mut(),
            &grads.embeddings,
            &mut table_states[scene_idx],
            lr_t,
            None,
        );
        adam_step(
            &mut scene.background,
            &grads.background,
            &mut bg_states[scene_idx],
            lr_t,
            Some((0.0, 1.0)),
        );

        let completed = step + 1;

        if completed % cfg.prune_period == 0 && completed >= prune_start {
            #[allow(clippy::needless_range_loop)] // parallel structures indexed by scene
            for i in 0..n_scenes {
                let before = cfg
                    .prune_check_view
                    .and_then(|v| validation_psnr(&set.scenes[i], &set.net, cfg, &datasets[i], v));
                let cells_before = set.scenes[i].grid.cell_count();
                let outcome = prune(
                    &set.scenes[i].grid,
                    &set.scenes[i].table,
                    &set.net,
                    cfg.prune_samples_per_axis,
                    cfg.prune_gamma,
                );
                let dim = set.scenes[i].table.dim();
                table_states[i].remap_rows(
                    &outcome.rebuilt.row_map,
                    dim,
                    outcome.rebuilt.table.rows(),
                );
                set.scenes[i].grid = outcome.rebuilt.grid;
                set.scenes[i].table = outcome.rebuilt.table;
                let cells_after = set.scenes[i].grid.cell_count();
                let after = cfg
                    .prune_check_view
                    .and_then(|v| validation_psnr(&set.scenes[i], &set.net, cfg, &datasets[i], v));
                let event = PruneEvent {
                    step: completed,
                    scene: i,
                    cells_before,
                    cells_after,
                    psnr_before: before,
                    psnr_after: after,
                };
                sink.write(&prune_line(&event));
                log.prunes.push(event);
                if cells_after == 0 {
                    return Err(Error::AllVoxelsPruned { step: completed });
                }
            }
        }

        if cfg.subdivide_milestones.contains(&completed) {
            #[allow(clippy::needless_range_loop)] // parallel structures indexed by scene
            for i in 0..n_scenes {
                let outcome = subdivide(&set.scenes[i].grid, &set.scenes[i].table);
                let dim = set.scenes[i].table.dim();
                table_states[i].remap_rows(&outcome.row_map, dim, outcome.table.rows());
                set.scenes[i].grid = outcome.grid;
                set.scenes[i].table = outcome.table;
                set.scenes[i].step_size *= 0.5;
                let event = SubdivideEvent {
                    step: completed,
                    scene: i,
                    cells: set.scenes[i].grid.cell_count(),
                    step_size: set.scenes[i].step_size,
                };
                sink.write(&subdivide_line(&event));
                log.subdivisions.push(event);
            }
            save_all(set, &format!("step{completed:06}"))?;
        }

        let record = StepRecord {
            step: completed,
            scene: scene_idx,
            loss,
            voxels: set.scenes[scene_idx].grid.cell_count(),
            evals,
            lr: lr_t,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        sink.write(&step_line(&record));
        log.steps.push(record);
    }
    save_all(set, "final")?;
    Ok(log)
}

/// Multi-scene training: at least two scenes round-robin over one MLP.
pub fn train_multiscene(
    set: &mut SceneSet,
    datasets: &[PosedImageSet],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<TrainLog> {
    if set.scenes.len() < 2 {
        return Err(Error::Config(
            "multi-scene training needs at least two scenes".into(),
        ));
    }
    train(set, datasets, cfg, rng)
}
