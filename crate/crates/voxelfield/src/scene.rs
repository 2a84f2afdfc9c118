//! Voxel-level editing of trained fields and multi-instance composition:
//! select/delete cells, clone subsets under rigid transforms, and render
//! several instances in one pass with globally sorted samples.
//!
//! Script grammar (one operation per line, `#` comments):
//!
//! ```text
//! select all
//! select box <x0> <y0> <z0> <x1> <y1> <z1>
//! delete
//! clone
//! translate <tx> <ty> <tz>
//! rotate <x|y|z> <degrees>
//! background <r> <g> <b>
//! instance <path>            # compose scripts only (handled by the CLI)
//! ```
//!
//! The `edit` command accepts only select/delete (it must produce a single
//! grid); clone/translate/rotate/background build composites for the
//! `compose` command.

use std::collections::HashSet;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{query_in_cell_fast, FieldNetwork};
use crate::geom::{pixel_ray, Aabb, Camera, Mat3, Ray, Vec3, VoxelHit};
use crate::grid::{intersect_grid, remove_cells, EmbeddingTable, SparseVoxelGrid};
use crate::raster::{FloatRaster, Image};
use crate::render::{sample_ray, Accumulator, RenderConfig, RenderedImage};

/// One renderable voxel field placed in the world by a rigid transform
/// (local-to-world). Cloned instances share the table and network.
#[derive(Clone)]
pub struct FieldInstance {
    pub grid: SparseVoxelGrid,
    pub table: Arc<EmbeddingTable>,
    pub net: Arc<FieldNetwork>,
    pub background: [f64; 3],
    pub rotation: Mat3,
    pub translation: Vec3,
    pub scene_id: usize,
}

impl FieldInstance {
    pub fn new(
        grid: SparseVoxelGrid,
        table: Arc<EmbeddingTable>,
        net: Arc<FieldNetwork>,
        background: [f64; 3],
        scene_id: usize,
    ) -> FieldInstance {
        FieldInstance {
            grid,
            table,
            net,
            background,
            rotation: Mat3::IDENTITY,
            translation: Vec3::ZERO,
            scene_id,
        }
    }

    /// World ray expressed in this instance's local frame. Rigid
    /// transforms preserve distances, so `z` values are shared.
    pub fn ray_to_local(&self, ray: &Ray) -> Ray {
        let rt = self.rotation.transpose();
        Ray {
            origin: rt.mul_vec(ray.origin - self.translation),
            direction: rt.mul_vec(ray.direction),
        }
    }

    pub fn translated(mut self, t: Vec3) -> FieldInstance {
        self.translation = self.translation + t;
        self
    }

    pub fn rotated(mut self, r: Mat3) -> FieldInstance {
        self.rotation = r.mul_mat(&self.rotation);
        self.translation = r.mul_vec(self.translation);
        self
    }
}

/// Cells whose centers lie inside `region`.
pub fn select_voxels(grid: &SparseVoxelGrid, region: &Aabb) -> Vec<[i32; 3]> {
    (0..grid.cell_count() as u32)
        .filter(|&id| region.contains(grid.cell_aabb(id).center()))
        .map(|id| grid.cell_coord(id))
        .collect()
}

/// Removes `cells`, compacting orphaned corners; field values inside the
/// surviving cells are untouched.
pub fn delete_voxels(
    grid: &SparseVoxelGrid,
    table: &EmbeddingTable,
    cells: &[[i32; 3]],
) -> Result<(SparseVoxelGrid, EmbeddingTable)> {
    for c in cells {
        if grid.cell_id(*c).is_none() {
            return Err(Error::UnknownCell(*c));
        }
    }
    let rebuilt = remove_cells(grid, table, &cells.iter().copied().collect());
    Ok((rebuilt.grid, rebuilt.table))
}

/// New instance restricted to `cells`, sharing the table and network,
/// with `extra` composed onto the source transform.
pub fn clone_voxels(
    source: &FieldInstance,
    cells: &[[i32; 3]],
    extra_rotation: Mat3,
    extra_translation: Vec3,
) -> Result<FieldInstance> {
    let keep: HashSet<[i32; 3]> = cells.iter().copied().collect();
    for c in &keep {
        if source.grid.cell_id(*c).is_none() {
            return Err(Error::UnknownCell(*c));
        }
    }
    let grid = source.grid.restricted(&keep);
    Ok(FieldInstance {
        grid,
        table: Arc::clone(&source.table),
        net: Arc::clone(&source.net),
        background: source.background,
        rotation: extra_rotation.mul_mat(&source.rotation),
        translation: extra_rotation.mul_vec(source.translation) + extra_translation,
        scene_id: source.scene_id,
    })
}

impl SparseVoxelGrid {
    /// Subset of cells keeping the full corner table (rows still index the
    /// shared embedding table).
    pub fn restricted(&self, keep: &HashSet<[i32; 3]>) -> SparseVoxelGrid {
        let cells: Vec<[i32; 3]> = self
            .cells()
            .iter()
            .filter(|c| keep.contains(*c))
            .copied()
            .collect();
        self.with_cells_shared_corners(cells)
    }
}

/// Several instances rendered against one background.
#[derive(Clone)]
pub struct CompositeScene {
    pub instances: Vec<FieldInstance>,
    pub background: [f64; 3],
}

impl CompositeScene {
    /// Uses the first instance's background (override by assignment).
    pub fn new(instances: Vec<FieldInstance>) -> CompositeScene {
        let background = instances.first().map_or([0.0; 3], |i| i.background);
        CompositeScene {
            instances,
            background,
        }
    }
}

const INSTANCE_SHIFT: u32 = 24;
const VOXEL_MASK: u32 = (1 << INSTANCE_SHIFT) - 1;

/// (color, depth, transparency) of one composite ray.
pub type CompositeRayOutput = ([f64; 3], f64, f64);

/// Renders one ray through every instance: per-instance hits are merged,
/// globally sorted by distance, and accumulated in a single pass. Each
/// sample is owned by the earliest containing interval (exact ties fall
/// to the lower instance index); the field is queried in that instance's
/// local frame, view direction included.
pub fn render_composite_ray(
    scene: &CompositeScene,
    ray: &Ray,
    cfg: &RenderConfig,
) -> (CompositeRayOutput, u32) {
    debug_assert!(scene.instances.len() < (1 << (32 - INSTANCE_SHIFT)));
    let local_rays: Vec<Ray> = scene
        .instances
        .iter()
        .map(|inst| inst.ray_to_local(ray))
        .collect();
    let mut merged: Vec<VoxelHit> = Vec::new();
    for (i, inst) in scene.instances.iter().enumerate() {
        for h in intersect_grid(&local_rays[i], &inst.grid) {
            merged.push(VoxelHit {
                voxel_id: ((i as u32) << INSTANCE_SHIFT) | h.voxel_id,
                z_in: h.z_in,
                z_out: h.z_out,
            });
        }
    }
    merged.sort_by(|a, b| a.z_in.total_cmp(&b.z_in).then(a.voxel_id.cmp(&b.voxel_id)));

    // View direction in each instance's local frame, encoded once.
    let enc_dirs: Vec<Vec<f64>> = scene
        .instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            crate::field::encode_direction(local_rays[i].direction, inst.net.config.dir_freqs)
        })
        .collect();
    let mut scratch = crate::field::EvalScratch::default();
    let samples = sample_ray(&merged, cfg, None);
    let mut acc = Accumulator::new();
    let mut evals = 0u32;
    for s in &samples {
        if acc.transparency <= cfg.early_stop_eps {
            break;
        }
        let inst_idx = (s.voxel_id >> INSTANCE_SHIFT) as usize;
        let voxel = s.voxel_id & VOXEL_MASK;
        let inst = &scene.instances[inst_idx];
        let local = &local_rays[inst_idx];
        let (sigma, color) = query_in_cell_fast(
            &inst.grid,
            &inst.table,
            &inst.net,
            voxel,
            local.at(s.z_mid),
            &enc_dirs[inst_idx],
            &mut scratch,
        );
        evals += 1;
        acc.add(sigma, color, s.z_mid, s.delta);
    }
    acc.finish(scene.background, cfg.z_max);
    ((acc.color, acc.depth, acc.transparency), evals)
}

/// Full-frame composite render.
pub fn render_composite(
    scene: &CompositeScene,
    camera: &Camera,
    cfg: &RenderConfig,
) -> RenderedImage {
    let (w, h) = (camera.width, camera.height);
    let rows: Vec<Vec<(CompositeRayOutput, u32)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let ray = pixel_ray(camera, x as f64 + 0.5, y as f64 + 0.5)
                        .expect("pixel centers in bounds");
                    render_composite_ray(scene, &ray, cfg)
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
        for (x, ((c, d, t), e)) in row.iter().enumerate() {
            let (x, y) = (x as u32, y as u32);
            out.color.set(x, y, *c);
            out.depth.set(x, y, *d as f32);
            out.transparency.set(x, y, *t as f32);
            out.eval_count.set(x, y, *e as f32);
        }
    }
    out
}

/// One parsed script operation.
#[derive(Debug, Clone, PartialEq)]
pub enum ScriptOp {
    SelectAll,
    SelectBox(Aabb),
    Delete,
    Clone,
    Translate(Vec3),
    Rotate { axis: usize, degrees: f64 },
    Background([f64; 3]),
    Instance(String),
}

/// Parses the script grammar, reporting schema violations with their line
/// numbers.
pub fn parse_script(text: &str) -> Result<Vec<ScriptOp>> {
    let mut ops = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |detail: String| Error::Script {
            line: line_no,
            detail,
        };
        let toks: Vec<&str> = line.split_whitespace().collect();
        let floats = |toks: &[&str], want: usize| -> Result<Vec<f64>> {
            if toks.len() != want {
                return Err(err(format!("expected {want} numbers, found {}", toks.len())));
            }
            toks.iter()
                .map(|t| t.parse::<f64>().map_err(|_| err(format!("bad number '{t}'"))))
                .collect()
        };
        let op = match toks[0] {
            "select" => match toks.get(1) {
                Some(&"all") if toks.len() == 2 => ScriptOp::SelectAll,
                Some(&"box") => {
                    let v = floats(&toks[2..], 6)?;
                    ScriptOp::SelectBox(Aabb::new(
                        Vec3::new(v[0], v[1], v[2]),
                        Vec3::new(v[3], v[4], v[5]),
                    ))
                }
                _ => return Err(err("select needs 'all' or 'box <6 numbers>'".into())),
            },
            "delete" if toks.len() == 1 => ScriptOp::Delete,
            "clone" if toks.len() == 1 => ScriptOp::Clone,
            "translate" => {
                let v = floats(&toks[1..], 3)?;
                ScriptOp::Translate(Vec3::new(v[0], v[1], v[2]))
            }
            "rotate" => {
                if toks.len() != 3 {
                    return Err(err("rotate needs an axis and an angle".into()));
                }
                let axis = match toks[1] {
                    "x" => 0,
                    "y" => 1,
                    "z" => 2,
                    other => return Err(err(format!("bad axis '{other}'"))),
                };
                let degrees = toks[2]
                    .parse()
                    .map_err(|_| err(format!("bad angle '{}'", toks[2])))?;
                ScriptOp::Rotate { axis, degrees }
            }
            "background" => {
                let v = floats(&toks[1..], 3)?;
                ScriptOp::Background([v[0], v[1], v[2]])
            }
            "instance" => {
                if toks.len() != 2 {
                    return Err(err("instance needs a checkpoint path".into()));
                }
                ScriptOp::Instance(toks[1].to_string())
            }
            other => return Err(err(format!("unknown operation '{other}'"))),
        };
        ops.push(op);
    }
    Ok(ops)
}

/// Applies a grid-rewriting (edit) script: only select/delete allowed.
pub fn apply_edit_script(
    grid: &SparseVoxelGrid,
    table: &EmbeddingTable,
    text: &str,
) -> Result<(SparseVoxelGrid, EmbeddingTable)> {
    let ops = parse_script(text)?;
    let mut grid = grid.clone();
    let mut table = table.clone();
    let mut selection: Vec<[i32; 3]> = Vec::new();
    for (i, op) in ops.iter().enumerate() {
        match op {
            ScriptOp::SelectAll => selection = grid.cells().to_vec(),
            ScriptOp::SelectBox(region) => selection = select_voxels(&grid, region),
            ScriptOp::Delete => {
                let (g, t) = delete_voxels(&grid, &table, &selection)?;
                grid = g;
                table = t;
                selection.clear();
            }
            other => {
                return Err(Error::Script {
                    line: i + 1,
                    detail: format!(
                        "{other:?} is not valid in an edit script (only select/delete rewrite a checkpoint); use a compose script"
                    ),
                })
            }
        }
    }
    Ok((grid, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{FieldConfig, FieldNetwork};
    use crate::grid::init_from_bbox;
    use crate::render::{render_image, FieldRefs};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn demo_instance(seed: u64) -> FieldInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bbox = Aabb::new(Vec3::splat(-0.5), Vec3::splat(0.5));
        let (grid, table) = init_from_bbox(&bbox, 64, 6, &mut rng).unwrap();
        let mut net = FieldNetwork::new(
            FieldConfig {
                embed_dim: 6,
                feat_freqs: 2,
                dir_freqs: 1,
                hidden: 12,
                density_layers: 2,
                color_layers: 2,
            },
            &mut rng,
        );
        net.sigma_head.b[0] = 2.0;
        FieldInstance::new(grid, Arc::new(table), Arc::new(net), [0.2, 0.3, 0.4], 0)
    }

    fn demo_camera() -> Camera {
        Camera::look_at(
            30.0,
            24,
            24,
            Vec3::new(0.1, -2.6, 0.9),
            Vec3::ZERO,
            Vec3::new(0.0, 0.0, 1.0),
        )
        .unwrap()
    }

    fn cfg() -> RenderConfig {
        RenderConfig {
            step_size: 0.03,
            early_stop_eps: 0.0,
            z_max: 12.0,
            jitter: false,
        }
    }

    #[test]
    fn select_whole_bbox_selects_everything() {
        let inst = demo_instance(1);
        let all = select_voxels(&inst.grid, &inst.grid.world_bbox());
        assert_eq!(all.len(), inst.grid.cell_count());
        let none = select_voxels(
            &inst.grid,
            &Aabb::new(Vec3::splat(5.0), Vec3::splat(6.0)),
        );
        assert!(none.is_empty());
    }

    #[test]
    fn halfspace_selection_splits_a_symmetric_grid() {
        let inst = demo_instance(2);
        let bbox = inst.grid.world_bbox();
        let half = Aabb::new(bbox.min, Vec3::new(bbox.center().x, bbox.max.y, bbox.max.z));
        let cells = select_voxels(&inst.grid, &half);
        assert_eq!(cells.len(), inst.grid.cell_count() / 2);
    }

    #[test]
    fn delete_none_is_identity_and_delete_all_empties() {
        let inst = demo_instance(3);
        let (g, t) = delete_voxels(&inst.grid, &inst.table, &[]).unwrap();
        assert_eq!(g, inst.grid);
        assert_eq!(&t, inst.table.as_ref());
        let (g, _) = delete_voxels(&inst.grid, &inst.table, inst.grid.cells()).unwrap();
        assert_eq!(g.cell_count(), 0);
        assert!(delete_voxels(&inst.grid, &inst.table, &[[99, 0, 0]]).is_err());
    }

    #[test]
    fn deleting_one_object_leaves_disjoint_rays_unchanged() {
        // Two separated blocks; delete one, renders through the other stay
        // identical.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cells = Vec::new();
        for x in 0..3 {
            for y in 0..3 {
                for z in 0..3 {
                    cells.push([x, y, z]);
                    cells.push([x + 10, y, z]);
                }
            }
        }
        let grid = SparseVoxelGrid::from_cells(0.2, Vec3::ZERO, 0, cells);
        let table = EmbeddingTable::random(grid.corner_count(), 6, &mut rng);
        let net = {
            let mut n = FieldNetwork::new(
                FieldConfig {
                    embed_dim: 6,
                    feat_freqs: 2,
                    dir_freqs: 1,
                    hidden: 12,
                    density_layers: 2,
                    color_layers: 2,
                },
                &mut rng,
            );
            n.sigma_head.b[0] = 1.0;
            n
        };
        let far_cells: Vec<[i32; 3]> = grid
            .cells()
            .iter()
            .filter(|c| c[0] >= 10)
            .copied()
            .collect();
        let (kept_grid, kept_table) = delete_voxels(&grid, &table, &far_cells).unwrap();

        let c = cfg();
        let bg = [0.5; 3];
        let mut checked = 0;
        for _ in 0..300 {
            let ray = Ray::new(
                Vec3::new(
                    rng.gen_range(0.0..0.6),
                    rng.gen_range(0.0..0.6),
                    rng.gen_range(2.0..3.0),
                ),
                Vec3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), -1.0),
            );
            // Only rays that never touch the deleted block count.
            if !intersect_grid(&ray, &grid)
                .iter()
                .all(|h| grid.cell_coord(h.voxel_id)[0] < 10)
            {
                continue;
            }
            let before = crate::render::render_ray_fast(
                &ray,
                FieldRefs {
                    grid: &grid,
                    table: &table,
                    net: &net,
                },
                &c,
                bg,
                None,
            );
            let after = crate::render::render_ray_fast(
                &ray,
                FieldRefs {
                    grid: &kept_grid,
                    table: &kept_table,
                    net: &net,
                },
                &c,
                bg,
                None,
            );
            for i in 0..3 {
                assert!((before.color[i] - after.color[i]).abs() < 1e-6);
            }
            checked += 1;
        }
        assert!(checked > 20);
    }

    #[test]
    fn single_identity_instance_matches_plain_render() {
        let inst = demo_instance(5);
        let cam = demo_camera();
        let c = cfg();
        let plain = render_image(
            &cam,
            FieldRefs {
                grid: &inst.grid,
                table: &inst.table,
                net: &inst.net,
            },
            &c,
            inst.background,
        );
        let composite = render_composite(&CompositeScene::new(vec![inst]), &cam, &c);
        assert_eq!(plain.color.pixels(), composite.color.pixels());
        assert_eq!(plain.depth.data, composite.depth.data);
        assert_eq!(plain.transparency.data, composite.transparency.data);
    }

    #[test]
    fn transformed_instance_hits_match_transformed_rays() {
        let inst = demo_instance(6);
        let rot = Mat3::rotation_axis(2, 0.7);
        let shift = Vec3::new(0.4, -0.2, 0.9);
        let moved = inst.clone().rotated(rot).translated(shift);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let ray = Ray::new(
                Vec3::new(
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                ),
                Vec3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ),
            );
            if ray.direction.norm() < 1e-9 {
                continue;
            }
            // Intersecting the moved instance equals intersecting the
            // original with the inverse-transformed ray.
            let local = moved.ray_to_local(&ray);
            let a = intersect_grid(&local, &moved.grid);
            let b = intersect_grid(&local, &inst.grid);
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                assert!((x.z_in - y.z_in).abs() < 1e-9);
                assert!((x.z_out - y.z_out).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn disjoint_instances_compose_like_separate_renders() {
        let inst = demo_instance(8);
        let cam = Camera::look_at(
            20.0,
            32,
            32,
            Vec3::new(0.6, -3.4, 0.2),
            Vec3::new(0.6, 0.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
        )
        .unwrap();
        let c = cfg();
        let copy = clone_voxels(
            &inst,
            inst.grid.cells(),
            Mat3::IDENTITY,
            Vec3::new(1.2, 0.0, 0.0),
        )
        .unwrap();
        let both = CompositeScene::new(vec![inst.clone(), copy.clone()]);
        let img_both = render_composite(&both, &cam, &c);
        let img_a = render_composite(&CompositeScene::new(vec![inst]), &cam, &c);
        let img_b = {
            let mut scene = CompositeScene::new(vec![copy]);
            scene.background = img_a.color.get(0, 0); // same background
            render_composite(&scene, &cam, &c)
        };
        // Wherever only one instance is visible, the composite equals that
        // instance's solo render.
        for y in 0..32 {
            for x in 0..32 {
                let ta = img_a.transparency.get(x, y);
                let tb = img_b.transparency.get(x, y);
                if ta < 0.999 && tb >= 0.999 {
                    let pa = img_a.color.get(x, y);
                    let pc = img_both.color.get(x, y);
                    for i in 0..3 {
                        assert!((pa[i] - pc[i]).abs() < 1e-9);
                    }
                }
                if tb < 0.999 && ta >= 0.999 {
                    let pb = img_b.color.get(x, y);
                    let pc = img_both.color.get(x, y);
                    for i in 0..3 {
                        assert!((pb[i] - pc[i]).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn occluder_hides_the_far_instance() {
        let inst = demo_instance(9);
        // Make the field strongly opaque so occlusion is total.
        let mut net = (*inst.net).clone();
        net.sigma_head.b[0] = 50.0;
        let net = Arc::new(net);
        let front = FieldInstance {
            net: Arc::clone(&net),
            ..inst.clone()
        };
        let back = clone_voxels(
            &front,
            front.grid.cells(),
            Mat3::IDENTITY,
            Vec3::new(0.0, 2.0, 0.0), // directly behind, same silhouette
        )
        .unwrap();
        let cam = Camera::look_at(
            30.0,
            24,
            24,
            Vec3::new(0.0, -2.8, 0.0),
            Vec3::ZERO,
            Vec3::new(0.0, 0.0, 1.0),
        )
        .unwrap();
        let mut c = cfg();
        c.early_stop_eps = 0.01;
        let solo = render_composite(&CompositeScene::new(vec![front.clone()]), &cam, &c);
        let both = render_composite(&CompositeScene::new(vec![front, back]), &cam, &c);
        for y in 0..24 {
            for x in 0..24 {
                if solo.transparency.get(x, y) <= 0.01 {
                    let a = solo.color.get(x, y);
                    let b = both.color.get(x, y);
                    for i in 0..3 {
                        assert!((a[i] - b[i]).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn rotated_clone_silhouette_matches_rotated_view() {
        // Rendering a 90-degree rotated instance equals rendering the
        // original from the inversely rotated camera; compare silhouettes.
        let inst = demo_instance(13);
        let mut net = (*inst.net).clone();
        net.sigma_head.b[0] = 30.0; // opaque silhouette
        let inst = FieldInstance {
            net: Arc::new(net),
            ..inst
        };
        let rot = Mat3::rotation_axis(2, std::f64::consts::FRAC_PI_2);
        let turned = clone_voxels(&inst, inst.grid.cells(), rot, Vec3::ZERO).unwrap();

        let cam = demo_camera();
        let mut c = cfg();
        c.early_stop_eps = 0.01;
        let img_turned = render_composite(&CompositeScene::new(vec![turned]), &cam, &c);

        // Original seen from the camera rotated the opposite way.
        let inv = rot.transpose();
        let cam2 = Camera::new(
            cam.focal,
            cam.principal,
            cam.width,
            cam.height,
            inv.mul_mat(&cam.rotation),
            inv.mul_vec(cam.translation),
        )
        .unwrap();
        let img_ref = render_composite(&CompositeScene::new(vec![inst]), &cam2, &c);

        let mask = |img: &crate::render::RenderedImage| -> Vec<bool> {
            img.transparency.data.iter().map(|&t| t < 0.5).collect()
        };
        let (a, b) = (mask(&img_turned), mask(&img_ref));
        let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
        let union = a.iter().zip(&b).filter(|(x, y)| **x || **y).count();
        assert!(union > 40, "silhouette too small to be meaningful");
        let iou = inter as f64 / union as f64;
        assert!(iou >= 0.98, "IoU {iou:.4}");
    }

    #[test]
    fn composite_samples_are_globally_sorted() {
        let inst = demo_instance(10);
        let other = clone_voxels(
            &inst,
            inst.grid.cells(),
            Mat3::rotation_axis(1, 0.4),
            Vec3::new(0.35, 0.1, -0.2), // overlapping placement
        )
        .unwrap();
        let scene = CompositeScene::new(vec![inst, other]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let ray = Ray::new(
                Vec3::new(rng.gen_range(-0.3..0.6), -3.0, rng.gen_range(-0.4..0.4)),
                Vec3::new(rng.gen_range(-0.1..0.1), 1.0, rng.gen_range(-0.1..0.1)),
            );
            let local: Vec<Ray> = scene.instances.iter().map(|i| i.ray_to_local(&ray)).collect();
            let mut merged = Vec::new();
            for (i, inst) in scene.instances.iter().enumerate() {
                for h in intersect_grid(&local[i], &inst.grid) {
                    merged.push(VoxelHit {
                        voxel_id: ((i as u32) << INSTANCE_SHIFT) | h.voxel_id,
                        z_in: h.z_in,
                        z_out: h.z_out,
                    });
                }
            }
            merged.sort_by(|a, b| a.z_in.total_cmp(&b.z_in).then(a.voxel_id.cmp(&b.voxel_id)));
            let samples = sample_ray(&merged, &cfg(), None);
            for w in samples.windows(2) {
                assert!(w[0].z_mid <= w[1].z_mid);
            }
        }
    }

    #[test]
    fn script_parsing_accepts_the_grammar_and_reports_lines() {
        let ops = parse_script(
            "# a comment\n\
             select all\n\
             select box 0 0 0 1 1 1\n\
             delete\n\
             clone\n\
             translate 1 0 0\n\
             rotate z 90\n\
             background 0.1 0.2 0.3\n\
             instance some/model.vf\n",
        )
        .unwrap();
        assert_eq!(ops.len(), 8);
        assert_eq!(ops[1], ScriptOp::SelectBox(Aabb::new(Vec3::ZERO, Vec3::splat(1.0))));

        let err = parse_script("select all\nfrobnicate\n").unwrap_err();
        match err {
            Error::Script { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn edit_script_identity_and_delete_all() {
        let inst = demo_instance(12);
        let (g, t) = apply_edit_script(&inst.grid, &inst.table, "").unwrap();
        assert_eq!(g, inst.grid);
        assert_eq!(&t, inst.table.as_ref());

        let (g, _) = apply_edit_script(&inst.grid, &inst.table, "select all\ndelete\n").unwrap();
        assert_eq!(g.cell_count(), 0);

        // Clone is a compose-script operation.
        assert!(apply_edit_script(&inst.grid, &inst.table, "clone\n").is_err());
    }
}
