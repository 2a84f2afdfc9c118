//! The sparse voxel structure: occupied cells on an integer lattice, a
//! shared-vertex table mapping grid corners to embedding rows, traversal,
//! pruning, and subdivision.
//!
//! Corner keying uses integer lattice coordinates at the current level;
//! subdivision doubles all coordinates, so corner sharing stays exact with
//! no floating-point keys involved.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::field::FieldNetwork;
use crate::geom::{intersect_aabb, Aabb, Ray, Vec3, VoxelHit};

/// Rounds through f32 so the value survives 32-bit serialization unchanged.
///
/// All learnable state in the crate keeps this invariant: parameters are
/// held as f64 for arithmetic but every mutation lands on an f32-exact
/// value, which makes checkpoint round trips bit-exact.
#[inline]
pub fn quantize(x: f64) -> f64 {
    x as f32 as f64
}

/// Corner order within a cell: bit 0 = +x, bit 1 = +y, bit 2 = +z.
pub const CORNER_OFFSETS: [[i32; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [1, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [0, 1, 1],
    [1, 1, 1],
];

/// Matrix of per-vertex feature vectors, one row per grid corner.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingTable {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        EmbeddingTable {
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    /// Gaussian init with standard deviation 0.1, f32-exact values.
    pub fn random(rows: usize, dim: usize, rng: &mut impl rand::Rng) -> Self {
        let data = (0..rows * dim)
            .map(|_| {
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                quantize(0.1 * (-2.0 * u1.ln()).sqrt() * u2.cos())
            })
            .collect();
        EmbeddingTable { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn row(&self, r: u32) -> &[f64] {
        let r = r as usize;
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn set_row(&mut self, r: u32, values: &[f64]) {
        assert_eq!(values.len(), self.dim);
        let r = r as usize;
        for (dst, &v) in self.data[r * self.dim..(r + 1) * self.dim]
            .iter_mut()
            .zip(values)
        {
            *dst = quantize(v);
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Sparse set of occupied voxel cells plus the corner-to-row index.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxelGrid {
    voxel_size: f64,
    origin: Vec3,
    level: u32,
    /// Occupied cells, sorted lexicographically; the position is the voxel id.
    cells: Vec<[i32; 3]>,
    cell_lookup: HashMap<[i32; 3], u32>,
    /// Embedding rows of each cell's 8 corners, in [`CORNER_OFFSETS`] order.
    cell_corners: Vec<[u32; 8]>,
    /// Corner lattice coordinate of each embedding row, sorted.
    corners: Vec<[i32; 3]>,
    corner_lookup: HashMap<[i32; 3], u32>,
}

impl SparseVoxelGrid {
    /// Builds a grid from an arbitrary cell set. Corner rows are assigned
    /// in sorted coordinate order, so equal cell sets produce equal grids.
    pub fn from_cells(
        voxel_size: f64,
        origin: Vec3,
        level: u32,
        mut cells: Vec<[i32; 3]>,
    ) -> Self {
        cells.sort_unstable();
        cells.dedup();
        let mut corner_set: Vec<[i32; 3]> = cells
            .iter()
            .flat_map(|c| {
                CORNER_OFFSETS
                    .iter()
                    .map(move |o| [c[0] + o[0], c[1] + o[1], c[2] + o[2]])
            })
            .collect();
        corner_set.sort_unstable();
        corner_set.dedup();
        let corner_lookup: HashMap<[i32; 3], u32> = corner_set
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i as u32))
            .collect();
        let cell_lookup: HashMap<[i32; 3], u32> = cells
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i as u32))
            .collect();
        let cell_corners = cells
            .iter()
            .map(|c| {
                let mut rows = [0u32; 8];
                for (k, o) in CORNER_OFFSETS.iter().enumerate() {
                    rows[k] = corner_lookup[&[c[0] + o[0], c[1] + o[1], c[2] + o[2]]];
                }
                rows
            })
            .collect();
        SparseVoxelGrid {
            voxel_size,
            origin,
            level,
            cells,
            cell_lookup,
            cell_corners,
            corners: corner_set,
            corner_lookup,
        }
    }

    /// Rebuilds with a different cell set while keeping this grid's corner
    /// table intact, so corner rows keep indexing the same embedding rows.
    /// Every cell must draw its corners from the existing table.
    pub(crate) fn with_cells_shared_corners(&self, mut cells: Vec<[i32; 3]>) -> SparseVoxelGrid {
        cells.sort_unstable();
        cells.dedup();
        let cell_lookup: HashMap<[i32; 3], u32> = cells
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i as u32))
            .collect();
        let cell_corners = cells
            .iter()
            .map(|c| {
                let mut rows = [0u32; 8];
                for (k, o) in CORNER_OFFSETS.iter().enumerate() {
                    rows[k] = self.corner_lookup[&[c[0] + o[0], c[1] + o[1], c[2] + o[2]]];
                }
                rows
            })
            .collect();
        SparseVoxelGrid {
            voxel_size: self.voxel_size,
            origin: self.origin,
            level: self.level,
            cells,
            cell_lookup,
            cell_corners,
            corners: self.corners.clone(),
            corner_lookup: self.corner_lookup.clone(),
        }
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn corner_count(&self) -> usize {
        self.corners.len()
    }

    pub fn cells(&self) -> &[[i32; 3]] {
        &self.cells
    }

    pub fn corners(&self) -> &[[i32; 3]] {
        &self.corners
    }

    pub fn corner_rows(&self, voxel_id: u32) -> [u32; 8] {
        self.cell_corners[voxel_id as usize]
    }

    pub fn cell_coord(&self, voxel_id: u32) -> [i32; 3] {
        self.cells[voxel_id as usize]
    }

    pub fn cell_id(&self, coord: [i32; 3]) -> Option<u32> {
        self.cell_lookup.get(&coord).copied()
    }

    pub fn cell_aabb(&self, voxel_id: u32) -> Aabb {
        let c = self.cells[voxel_id as usize];
        let min = self.origin
            + Vec3::new(
                c[0] as f64 * self.voxel_size,
                c[1] as f64 * self.voxel_size,
                c[2] as f64 * self.voxel_size,
            );
        Aabb::new(min, min + Vec3::splat(self.voxel_size))
    }

    /// World-space box spanned by the occupied lattice range.
    pub fn world_bbox(&self) -> Aabb {
        let mut lo = [i32::MAX; 3];
        let mut hi = [i32::MIN; 3];
        for c in &self.cells {
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a] + 1);
            }
        }
        let l = self.voxel_size;
        Aabb::new(
            self.origin + Vec3::new(lo[0] as f64 * l, lo[1] as f64 * l, lo[2] as f64 * l),
            self.origin + Vec3::new(hi[0] as f64 * l, hi[1] as f64 * l, hi[2] as f64 * l),
        )
    }

    /// Cell containing `p`, if occupied. Points exactly on a shared face
    /// resolve to the cell on the positive side.
    pub fn locate(&self, p: Vec3) -> Option<u32> {
        let q = (p - self.origin) * (1.0 / self.voxel_size);
        let coord = [
            q.x.floor() as i32,
            q.y.floor() as i32,
            q.z.floor() as i32,
        ];
        self.cell_id(coord)
    }

    /// Local coordinates of `p` inside `voxel_id`, in [0,1]^3.
    pub fn local_coords(&self, voxel_id: u32, p: Vec3) -> Vec3 {
        let b = self.cell_aabb(voxel_id);
        let inv = 1.0 / self.voxel_size;
        Vec3::new(
            ((p.x - b.min.x) * inv).clamp(0.0, 1.0),
            ((p.y - b.min.y) * inv).clamp(0.0, 1.0),
            ((p.z - b.min.z) * inv).clamp(0.0, 1.0),
        )
    }
}

/// Initial grid tiling `bbox` with roughly `target_count` cells.
///
/// The cell edge is the cube root of `volume / target_count`; partial
/// boundary cells are included, and an embedding row is allocated for
/// every unique corner.
pub fn init_from_bbox(
    bbox: &Aabb,
    target_count: usize,
    embed_dim: usize,
    rng: &mut impl rand::Rng,
) -> Result<(SparseVoxelGrid, EmbeddingTable)> {
    let volume = bbox.volume();
    if !volume.is_finite() || volume <= 0.0 || target_count == 0 {
        return Err(Error::DegenerateBbox {
            min: bbox.min.to_array(),
            max: bbox.max.to_array(),
        });
    }
    let l = (volume / target_count as f64).cbrt();
    let e = bbox.extent();
    // Guard the ceil against representation noise in the cube root so an
    // exact tiling (1.0 / 0.1 = 10) never gains a phantom layer.
    let n = |extent: f64| ((extent / l) * (1.0 - 1e-12)).ceil().max(1.0) as i32;
    let (nx, ny, nz) = (n(e.x), n(e.y), n(e.z));
    let mut cells = Vec::with_capacity((nx * ny * nz) as usize);
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                cells.push([x, y, z]);
            }
        }
    }
    let grid = SparseVoxelGrid::from_cells(l, bbox.min, 0, cells);
    let table = EmbeddingTable::random(grid.corner_count(), embed_dim, rng);
    Ok((grid, table))
}

/// Grid occupying exactly the cells containing at least one point, with an
/// optional one-cell dilation (on by default) to cover thin surfaces.
pub fn init_from_points(
    points: &[Vec3],
    voxel_size: f64,
    dilate: bool,
    embed_dim: usize,
    rng: &mut impl rand::Rng,
) -> Result<(SparseVoxelGrid, EmbeddingTable)> {
    if points.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let mut origin = points[0];
    for p in points {
        origin = origin.min(*p);
    }
    let inv = 1.0 / voxel_size;
    let mut occupied: HashSet<[i32; 3]> = HashSet::new();
    for p in points {
        let q = (*p - origin) * inv;
        occupied.insert([q.x.floor() as i32, q.y.floor() as i32, q.z.floor() as i32]);
    }
    if dilate {
        let base: Vec<[i32; 3]> = occupied.iter().copied().collect();
        for c in base {
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        occupied.insert([c[0] + dx, c[1] + dy, c[2] + dz]);
                    }
                }
            }
        }
    }
    let grid = SparseVoxelGrid::from_cells(voxel_size, origin, 0, occupied.into_iter().collect());
    let table = EmbeddingTable::random(grid.corner_count(), embed_dim, rng);
    Ok((grid, table))
}

/// All ray/voxel overlaps, sorted near to far.
///
/// Walks the occupied lattice with 3D-DDA stepping from the grid entry
/// point; each visited occupied cell gets an exact slab test, so distances
/// match a per-voxel [`intersect_aabb`] bit for bit. Grazing contacts are
/// dropped, and ties are ordered by `(z_in, voxel_id)`.
pub fn intersect_grid(ray: &Ray, grid: &SparseVoxelGrid) -> Vec<VoxelHit> {
    let mut hits = Vec::new();
    if grid.cell_count() == 0 {
        return hits;
    }
    let bbox = grid.world_bbox();
    let Some((t_enter, t_exit)) = intersect_aabb(ray, &bbox) else {
        return hits;
    };

    let l = grid.voxel_size;
    let inv_l = 1.0 / l;
    let mut lo = [i32::MAX; 3];
    let mut hi = [i32::MIN; 3];
    for c in &grid.cells {
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }

    let entry = ray.at(t_enter);
    let mut cell = [0i32; 3];
    for a in 0..3 {
        let q = ((entry.get(a) - grid.origin.get(a)) * inv_l).floor() as i32;
        cell[a] = q.clamp(lo[a], hi[a]);
    }

    let dir = ray.direction;
    let step: [i32; 3] = [
        if dir.x > 0.0 { 1 } else { -1 },
        if dir.y > 0.0 { 1 } else { -1 },
        if dir.z > 0.0 { 1 } else { -1 },
    ];
    // Next boundary crossing per axis, recomputed from absolute plane
    // positions each step so no error accumulates along the ray.
    let crossing = |cell: &[i32; 3], a: usize| -> f64 {
        let d = dir.get(a);
        if d == 0.0 {
            return f64::INFINITY;
        }
        let plane = cell[a] + if d > 0.0 { 1 } else { 0 };
        (grid.origin.get(a) + plane as f64 * l - ray.origin.get(a)) / d
    };
    let mut t_next = [crossing(&cell, 0), crossing(&cell, 1), crossing(&cell, 2)];

    let span = (hi[0] - lo[0] + hi[1] - lo[1] + hi[2] - lo[2] + 3) as usize;
    for _ in 0..span * 2 + 4 {
        if let Some(id) = grid.cell_id(cell) {
            if let Some((z_in, z_out)) = intersect_aabb(ray, &grid.cell_aabb(id)) {
                hits.push(VoxelHit {
                    voxel_id: id,
                    z_in,
                    z_out,
                });
            }
        }
        let axis = (0..3).min_by(|&a, &b| t_next[a].total_cmp(&t_next[b])).unwrap();
        if t_next[axis] > t_exit || !t_next[axis].is_finite() {
            break;
        }
        cell[axis] += step[axis];
        if cell[axis] < lo[axis] || cell[axis] > hi[axis] {
            break;
        }
        t_next[axis] = crossing(&cell, axis);
    }

    hits.sort_by(|a, b| {
        a.z_in
            .total_cmp(&b.z_in)
            .then(a.voxel_id.cmp(&b.voxel_id))
    });
    hits
}

/// Result of an operation that rebuilt the grid: the new structure plus a
/// map from old embedding rows to surviving new rows (for optimizer-state
/// carry-over).
pub struct RebuiltGrid {
    pub grid: SparseVoxelGrid,
    pub table: EmbeddingTable,
    /// `row_map[old_row] = Some(new_row)` when the corner survived.
    pub row_map: Vec<Option<u32>>,
}

/// Removes a set of cells, compacting orphaned corners. Surviving
/// embedding rows are copied bit-identically.
pub fn remove_cells(
    grid: &SparseVoxelGrid,
    table: &EmbeddingTable,
    remove: &HashSet<[i32; 3]>,
) -> RebuiltGrid {
    let kept: Vec<[i32; 3]> = grid
        .cells
        .iter()
        .filter(|c| !remove.contains(*c))
        .copied()
        .collect();
    let new_grid =
        SparseVoxelGrid::from_cells(grid.voxel_size, grid.origin, grid.level, kept);
    let mut new_table = EmbeddingTable::zeros(new_grid.corner_count(), table.dim());
    let mut row_map = vec![None; grid.corner_count()];
    for (old_row, coord) in grid.corners.iter().enumerate() {
        if let Some(&new_row) = new_grid.corner_lookup.get(coord) {
            row_map[old_row] = Some(new_row);
            new_table.set_row(new_row, table.row(old_row as u32));
        }
    }
    RebuiltGrid {
        grid: new_grid,
        table: new_table,
        row_map,
    }
}

/// Outcome of a self-pruning pass.
pub struct PruneOutcome {
    pub rebuilt: RebuiltGrid,
    pub removed: usize,
}

/// Self-pruning: a voxel is removed when every one of its lattice samples
/// is nearly transparent, i.e. `min_j exp(-sigma(p_j)) > gamma`.
///
/// Samples form a cell-centered `samples_per_axis`^3 lattice inside each
/// voxel, evaluated with the current field.
pub fn prune(
    grid: &SparseVoxelGrid,
    table: &EmbeddingTable,
    net: &FieldNetwork,
    samples_per_axis: usize,
    gamma: f64,
) -> PruneOutcome {
    use rayon::prelude::*;
    let s = samples_per_axis.max(2);
    let doomed: Vec<[i32; 3]> = (0..grid.cell_count() as u32)
        .into_par_iter()
        .filter_map(|id| {
            let b = grid.cell_aabb(id);
            let l = grid.voxel_size;
            let mut scratch = crate::field::EvalScratch::default();
            let mut min_transmittance = f64::INFINITY;
            for a in 0..s {
                for bq in 0..s {
                    for c in 0..s {
                        let p = b.min
                            + Vec3::new(
                                (a as f64 + 0.5) / s as f64 * l,
                                (bq as f64 + 0.5) / s as f64 * l,
                                (c as f64 + 0.5) / s as f64 * l,
                            );
                        let sigma =
                            crate::field::density_in_cell(grid, table, net, id, p, &mut scratch);
                        min_transmittance = min_transmittance.min((-sigma).exp());
                        if min_transmittance <= gamma {
                            return None; // something opaque enough: keep
                        }
                    }
                }
            }
            Some(grid.cell_coord(id))
        })
        .collect();
    let removed = doomed.len();
    let rebuilt = remove_cells(grid, table, &doomed.into_iter().collect());
    PruneOutcome { rebuilt, removed }
}

/// Splits every cell into 2^3 children, halving the voxel size. New corner
/// embeddings are trilinear interpolations of the parent cell's corners;
/// corners shared between parents get identical values no matter which
/// parent computes them (the weights are exact binary fractions).
pub fn subdivide(grid: &SparseVoxelGrid, table: &EmbeddingTable) -> RebuiltGrid {
    let mut child_cells = Vec::with_capacity(grid.cell_count() * 8);
    for c in &grid.cells {
        for o in &CORNER_OFFSETS {
            child_cells.push([2 * c[0] + o[0], 2 * c[1] + o[1], 2 * c[2] + o[2]]);
        }
    }
    let new_grid = SparseVoxelGrid::from_cells(
        grid.voxel_size * 0.5,
        grid.origin,
        grid.level + 1,
        child_cells,
    );

    let d = table.dim();
    let mut new_table = EmbeddingTable::zeros(new_grid.corner_count(), d);
    let mut written = vec![false; new_grid.corner_count()];
    let mut value = vec![0.0f64; d];
    for (cell_idx, c) in grid.cells.iter().enumerate() {
        let rows = grid.cell_corners[cell_idx];
        for az in 0..=2i32 {
            for ay in 0..=2i32 {
                for ax in 0..=2i32 {
                    let key = [2 * c[0] + ax, 2 * c[1] + ay, 2 * c[2] + az];
                    let new_row = new_grid.corner_lookup[&key];
                    if written[new_row as usize] {
                        continue;
                    }
                    let local = Vec3::new(
                        ax as f64 * 0.5,
                        ay as f64 * 0.5,
                        az as f64 * 0.5,
                    );
                    value.iter_mut().for_each(|v| *v = 0.0);
                    let w = crate::field::trilinear_weights(local);
                    for (k, &row) in rows.iter().enumerate() {
                        let src = table.row(row);
                        for (v, &s) in value.iter_mut().zip(src) {
                            *v += w[k] * s;
                        }
                    }
                    new_table.set_row(new_row, &value);
                    written[new_row as usize] = true;
                }
            }
        }
    }

    let mut row_map = vec![None; grid.corner_count()];
    for (old_row, coord) in grid.corners.iter().enumerate() {
        let key = [2 * coord[0], 2 * coord[1], 2 * coord[2]];
        row_map[old_row] = new_grid.corner_lookup.get(&key).copied();
    }
    RebuiltGrid {
        grid: new_grid,
        table: new_table,
        row_map,
    }
}
