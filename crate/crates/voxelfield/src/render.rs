//! Differentiable volume rendering over the sparse grid.
//!
//! A ray is intersected with the occupied voxels, stratified samples with
//! step `tau` are merged with all voxel boundaries, and color/depth/
//! transparency accumulate over interval midpoints with early termination
//! once transparency drops below `eps`. A background term composites what
//! remains onto a (learnable) constant color. The backward pass walks the
//! same recurrence in reverse.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{
    query_backward, query_in_cell, query_in_cell_fast, FieldNetwork, GradientBuffer,
};
use crate::geom::{pixel_ray, Camera, Ray, Vec3, VoxelHit};
use crate::grid::{intersect_grid, EmbeddingTable, SparseVoxelGrid};
use crate::raster::{FloatRaster, Image};

/// Ray-marching parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RenderConfig {
    /// Step size tau of the stratified sample grid, world units.
    pub step_size: f64,
    /// Early-termination threshold on transparency. Use 0 for training so
    /// the tape stays complete; 0.01 is the inference default.
    pub early_stop_eps: f64,
    /// Depth assigned to the background term.
    pub z_max: f64,
    /// Jitter samples uniformly within each step instead of bin centers.
    pub jitter: bool,
}

impl RenderConfig {
    /// Inference defaults for a grid: `tau = voxel_size / 8`, eps 0.01.
    pub fn for_grid(grid: &SparseVoxelGrid, z_max: f64) -> RenderConfig {
        RenderConfig {
            step_size: grid.voxel_size() / 8.0,
            early_stop_eps: 0.01,
            z_max,
            jitter: false,
        }
    }
}

/// Borrowed scene pieces needed to evaluate the field.
#[derive(Clone, Copy)]
pub struct FieldRefs<'a> {
    pub grid: &'a SparseVoxelGrid,
    pub table: &'a EmbeddingTable,
    pub net: &'a FieldNetwork,
}

/// One quadrature point: interval midpoint, width, owning voxel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaySample {
    pub z_mid: f64,
    pub delta: f64,
    pub voxel_id: u32,
}

/// Midpoint samples for a sorted hit sequence.
///
/// Stratified points with step `tau` anchored at the first entry distance
/// are merged with all `2k` boundary values; consecutive pairs yield
/// midpoints and intervals. Pairs with nonpositive width or whose midpoint
/// falls in a gap between voxels are dropped. A midpoint exactly on a
/// shared boundary goes to the earlier interval.
pub fn sample_ray(
    hits: &[VoxelHit],
    cfg: &RenderConfig,
    mut jitter_rng: Option<&mut dyn rand::RngCore>,
) -> Vec<RaySample> {
    let mut out = Vec::new();
    if hits.is_empty() {
        return out;
    }
    let z0 = hits[0].z_in;
    let z1 = hits[hits.len() - 1].z_out;
    let tau = cfg.step_size;

    let mut points: Vec<f64> = Vec::with_capacity(((z1 - z0) / tau) as usize + 2 * hits.len() + 2);
    let mut i = 0usize;
    loop {
        let lo = z0 + i as f64 * tau;
        if lo >= z1 {
            break;
        }
        let z = match (cfg.jitter, jitter_rng.as_deref_mut()) {
            (true, Some(rng)) => lo + rng.gen_range(0.0..1.0) * tau,
            _ => lo + 0.5 * tau,
        };
        if z < z1 {
            points.push(z);
        }
        i += 1;
    }
    for h in hits {
        points.push(h.z_in);
        points.push(h.z_out);
    }
    points.sort_unstable_by(f64::total_cmp);

    let mut hit_idx = 0usize;
    for pair in points.windows(2) {
        let delta = pair[1] - pair[0];
        if delta <= 0.0 {
            continue;
        }
        let mid = 0.5 * (pair[0] + pair[1]);
        while hit_idx < hits.len() && hits[hit_idx].z_out < mid {
            hit_idx += 1;
        }
        if hit_idx >= hits.len() {
            break;
        }
        let h = &hits[hit_idx];
        if h.z_in <= mid && mid <= h.z_out {
            out.push(RaySample {
                z_mid: mid,
                delta,
                voxel_id: h.voxel_id,
            });
        }
    }
    out
}

/// Front-to-back compositing state. Exactly the accumulation recurrence:
/// `alpha = exp(-sigma delta)`, weight `A (1 - alpha)`, then `A *= alpha`,
/// finished by the background term.
#[derive(Debug, Clone, Copy)]
pub struct Accumulator {
    pub color: [f64; 3],
    pub depth: f64,
    pub transparency: f64,
}

impl Accumulator {
    pub fn new() -> Accumulator {
        Accumulator {
            color: [0.0; 3],
            depth: 0.0,
            transparency: 1.0,
        }
    }

    /// Adds one sample; returns its alpha.
    pub fn add(&mut self, sigma: f64, color: [f64; 3], z_mid: f64, delta: f64) -> f64 {
        let alpha = (-sigma * delta).exp();
        let w = self.transparency * (1.0 - alpha);
        for (acc, c) in self.color.iter_mut().zip(color) {
            *acc += w * c;
        }
        self.depth += w * z_mid;
        self.transparency *= alpha;
        alpha
    }

    /// Composites the background term.
    pub fn finish(&mut self, c_bg: [f64; 3], z_max: f64) {
        for (acc, c) in self.color.iter_mut().zip(c_bg) {
            *acc += self.transparency * c;
        }
        self.depth += self.transparency * z_max;
    }
}

impl Default for Accumulator {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-sample record kept for the backward pass.
#[derive(Debug, Clone)]
pub struct SampleTape {
    pub z_mid: f64,
    pub delta: f64,
    pub voxel_id: u32,
    pub alpha: f64,
    /// Transparency before this sample (the running product A_{j-1}).
    pub trans_before: f64,
    pub color: [f64; 3],
    pub field: crate::field::QueryTape,
}

#[derive(Debug, Clone, Default)]
pub struct RayTape {
    pub samples: Vec<SampleTape>,
    /// The encoded view direction every sample saw (per-ray constant).
    pub encoded_dir: Vec<f64>,
    /// True when early termination with eps > 0 cut the sample list short.
    pub truncated: bool,
}

/// Output of rendering one ray.
#[derive(Debug, Clone)]
pub struct RayRenderResult {
    pub color: [f64; 3],
    pub depth: f64,
    pub transparency: f64,
    pub eval_count: u32,
    pub tape: Option<RayTape>,
}

fn march(
    ray: &Ray,
    field: FieldRefs,
    cfg: &RenderConfig,
    c_bg: [f64; 3],
    jitter_rng: Option<&mut dyn rand::RngCore>,
    record: bool,
) -> RayRenderResult {
    let hits = intersect_grid(ray, field.grid);
    let samples = sample_ray(&hits, cfg, jitter_rng);
    let enc_dir = crate::field::encode_direction(ray.direction, field.net.config.dir_freqs);
    let mut scratch = crate::field::EvalScratch::default();
    let mut acc = Accumulator::new();
    let mut tape = record.then(RayTape::default);
    let mut evals = 0u32;
    for s in &samples {
        if acc.transparency <= cfg.early_stop_eps {
            if let Some(t) = tape.as_mut() {
                if cfg.early_stop_eps > 0.0 {
                    t.truncated = true;
                }
            }
            break;
        }
        let p = ray.at(s.z_mid);
        evals += 1;
        if let Some(t) = tape.as_mut() {
            let (sigma, color, ftape) = query_in_cell(
                field.grid,
                field.table,
                field.net,
                s.voxel_id,
                p,
                &enc_dir,
                &mut scratch,
            );
            let trans_before = acc.transparency;
            let alpha = acc.add(sigma, color, s.z_mid, s.delta);
            t.samples.push(SampleTape {
                z_mid: s.z_mid,
                delta: s.delta,
                voxel_id: s.voxel_id,
                alpha,
                trans_before,
                color,
                field: ftape,
            });
        } else {
            let (sigma, color) = query_in_cell_fast(
                field.grid,
                field.table,
                field.net,
                s.voxel_id,
                p,
                &enc_dir,
                &mut scratch,
            );
            acc.add(sigma, color, s.z_mid, s.delta);
        }
    }
    if let Some(t) = tape.as_mut() {
        t.encoded_dir = enc_dir;
    }
    acc.finish(c_bg, cfg.z_max);
    RayRenderResult {
        color: acc.color,
        depth: acc.depth,
        transparency: acc.transparency,
        eval_count: evals,
        tape,
    }
}

/// Renders one ray, recording the tape needed by
/// [`render_ray_backward`]. A ray that misses every voxel returns the
/// background color, `z_max` depth, and transparency 1.
pub fn render_ray(
    ray: &Ray,
    field: FieldRefs,
    cfg: &RenderConfig,
    c_bg: [f64; 3],
    jitter_rng: Option<&mut dyn rand::RngCore>,
) -> RayRenderResult {
    march(ray, field, cfg, c_bg, jitter_rng, true)
}

/// Tape-free render for inference.
pub fn render_ray_fast(
    ray: &Ray,
    field: FieldRefs,
    cfg: &RenderConfig,
    c_bg: [f64; 3],
    jitter_rng: Option<&mut dyn rand::RngCore>,
) -> RayRenderResult {
    march(ray, field, cfg, c_bg, jitter_rng, false)
}

/// Reverse accumulation through the compositing recurrence and into every
/// sample's field evaluation, plus the background color slot.
///
/// Requires a complete tape: rays rendered with `eps > 0` whose loop was
/// cut short are rejected (train with `eps = 0`).
#[allow(clippy::too_many_arguments)]
pub fn render_ray_backward(
    result: &RayRenderResult,
    field: FieldRefs,
    cfg: &RenderConfig,
    c_bg: [f64; 3],
    d_color: [f64; 3],
    d_depth: f64,
    d_transparency: f64,
    grads: &mut GradientBuffer,
) -> Result<()> {
    let tape = result
        .tape
        .as_ref()
        .ok_or_else(|| Error::ShapeMismatch("ray was rendered without a tape".into()))?;
    if tape.truncated {
        return Err(Error::TruncatedTape);
    }

    // Gradient flowing into the final transparency A_N through the
    // outputs: A itself, plus the background composites of color and depth.
    let mut g_trans =
        d_transparency + d_color[0] * c_bg[0] + d_color[1] * c_bg[1] + d_color[2] * c_bg[2]
            + d_depth * cfg.z_max;
    for (slot, &dc) in grads.background.iter_mut().zip(&d_color) {
        *slot += result.transparency * dc;
    }

    for s in tape.samples.iter().rev() {
        let w_grad = d_color[0] * s.color[0]
            + d_color[1] * s.color[1]
            + d_color[2] * s.color[2]
            + d_depth * s.z_mid;
        let d_c = [
            s.trans_before * (1.0 - s.alpha) * d_color[0],
            s.trans_before * (1.0 - s.alpha) * d_color[1],
            s.trans_before * (1.0 - s.alpha) * d_color[2],
        ];
        // weight = A_prev (1 - alpha); A_next = A_prev alpha.
        let d_alpha = -s.trans_before * w_grad + s.trans_before * g_trans;
        g_trans = (1.0 - s.alpha) * w_grad + s.alpha * g_trans;
        let d_sigma = -s.delta * s.alpha * d_alpha;
        query_backward(&s.field, field.net, &tape.encoded_dir, d_sigma, d_c, grads)?;
    }
    Ok(())
}

/// Full per-pixel render: color image plus depth, transparency, and
/// field-evaluation-count rasters.
pub struct RenderedImage {
    pub color: Image,
    pub depth: FloatRaster,
    pub transparency: FloatRaster,
    pub eval_count: FloatRaster,
}

impl RenderedImage {
    pub fn total_evals(&self) -> u64 {
        self.eval_count.data.iter().map(|&v| v as u64).sum()
    }
}

/// Renders every pixel of `camera`. Rows are distributed across workers;
/// pixels are independent, so the output does not depend on the worker
/// count. With jitter enabled the per-pixel generator is seeded from the
/// pixel index, keeping images reproducible.
pub fn render_image(
    camera: &Camera,
    field: FieldRefs,
    cfg: &RenderConfig,
    c_bg: [f64; 3],
) -> RenderedImage {
    let (w, h) = (camera.width, camera.height);
    let rows: Vec<Vec<RayRenderResult>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let ray = pixel_ray(camera, x as f64 + 0.5, y as f64 + 0.5)
                        .expect("pixel centers are in bounds");
                    if cfg.jitter {
                        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(
                            0x5eed_0000_0000_0000 ^ (y as u64 * w as u64 + x as u64),
                        );
                        render_ray_fast(&ray, field, cfg, c_bg, Some(&mut rng))
                    } else {
                        render_ray_fast(&ray, field, cfg, c_bg, None)
                    }
                })
                .collect()
        })
        .collect();

    let mut out = RenderedImage {
        color: Image::new(w, h),
        depth: FloatRaster::new(w, h),
        transparency: FloatRaster::new(w, h),
        eval_count: FloatRaster::new(w, h),
    };
    for (y, row) in rows.iter().enumerate() {
        for (x, r) in row.iter().enumerate() {
            let (x, y) = (x as u32, y as u32);
            out.color.set(x, y, r.color);
            out.depth.set(x, y, r.depth as f32);
            out.transparency.set(x, y, r.transparency as f32);
            out.eval_count.set(x, y, r.eval_count as f32);
        }
    }
    out
}

/// Screen-space normals from central differences of the back-projected
/// depth map, oriented toward the camera and encoded as `(n + 1) / 2`.
/// Pixels with transparency above 0.99 (background) are masked to black,
/// as is the one-pixel image border.
pub fn normal_map(depth: &FloatRaster, transparency: &FloatRaster, camera: &Camera) -> Image {
    let (w, h) = (depth.width, depth.height);
    let point = |x: u32, y: u32| -> Vec3 {
        let ray = pixel_ray(camera, x as f64 + 0.5, y as f64 + 0.5).expect("in bounds");
        ray.at(depth.get(x, y) as f64)
    };
    let mut img = Image::new(w, h);
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            if transparency.get(x, y) > 0.99 {
                continue;
            }
            let ddx = (point(x + 1, y) - point(x - 1, y)) * 0.5;
            let ddy = (point(x, y + 1) - point(x, y - 1)) * 0.5;
            let mut n = ddx.cross(ddy);
            if n.norm() < 1e-12 {
                continue;
            }
            n = n.normalized();
            let view = pixel_ray(camera, x as f64 + 0.5, y as f64 + 0.5)
                .expect("in bounds")
                .direction;
            if n.dot(view) > 0.0 {
                n = -n;
            }
            img.set(
                x,
                y,
                [0.5 * (n.x + 1.0), 0.5 * (n.y + 1.0), 0.5 * (n.z + 1.0)],
            );
        }
    }
    img
}

/// Decodes a [`normal_map`] pixel back to a unit vector.
pub fn decode_normal(px: [f64; 3]) -> Vec3 {
    Vec3::new(2.0 * px[0] - 1.0, 2.0 * px[1] - 1.0, 2.0 * px[2] - 1.0)
}
