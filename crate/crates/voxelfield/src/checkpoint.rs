//! The on-disk model container.
//!
//! Layout: a human-readable header (one `key value...` pair per line,
//! terminated by `end_header`), then little-endian binary sections in this
//! order:
//!
//! 1. cells: `cell_count * 3` i32 lattice coordinates (sorted)
//! 2. corners: `corner_count * 3` i32 lattice coordinates (sorted)
//! 3. embeddings: `corner_count * embed_dim` f32, row-major
//! 4. network layers in canonical order (density trunk, density head,
//!    color layers): each layer's weights (row-major f32) then biases
//! 5. a CRC32 trailer (u32) over every preceding byte
//!
//! Header fields, in order: `voxelfield-checkpoint v1`, `level`,
//! `voxel_size`, `origin`, `embed_dim`, `cell_count`, `corner_count`,
//! `feat_freqs`, `dir_freqs`, `hidden`, `density_layers`, `color_layers`,
//! `background`, `step_size`, `z_max`.
//!
//! All learnable values are f32-exact in memory, so save/load round trips
//! are bit-identical, and saving a loaded checkpoint reproduces the file.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{FieldConfig, FieldNetwork};
use crate::geom::Vec3;
use crate::grid::{quantize, EmbeddingTable, SparseVoxelGrid};
use crate::render::RenderConfig;

pub const FORMAT_LINE: &str = "voxelfield-checkpoint v1";

/// Everything needed to render a trained scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub grid: SparseVoxelGrid,
    pub table: EmbeddingTable,
    pub net: FieldNetwork,
    pub background: [f64; 3],
    /// Step size the model was trained at (already halved per stage).
    pub step_size: f64,
    pub z_max: f64,
}

impl Checkpoint {
    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            step_size: self.step_size,
            early_stop_eps: 0.01,
            z_max: self.z_max,
            jitter: false,
        }
    }
}

fn f(v: f64) -> String {
    format!("{v:?}")
}

fn push_f32s(buf: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn push_i32s(buf: &mut Vec<u8>, values: impl IntoIterator<Item = i32>) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    let grid = &ckpt.grid;
    let cfg = &ckpt.net.config;
    let header = format!(
        "{FORMAT_LINE}\n\
         level {}\n\
         voxel_size {}\n\
         origin {} {} {}\n\
         embed_dim {}\n\
         cell_count {}\n\
         corner_count {}\n\
         feat_freqs {}\n\
         dir_freqs {}\n\
         hidden {}\n\
         density_layers {}\n\
         color_layers {}\n\
         background {} {} {}\n\
         step_size {}\n\
         z_max {}\n\
         end_header\n",
        grid.level(),
        f(grid.voxel_size()),
        f(grid.origin().x),
        f(grid.origin().y),
        f(grid.origin().z),
        cfg.embed_dim,
        grid.cell_count(),
        grid.corner_count(),
        cfg.feat_freqs,
        cfg.dir_freqs,
        cfg.hidden,
        cfg.density_layers,
        cfg.color_layers,
        f(ckpt.background[0]),
        f(ckpt.background[1]),
        f(ckpt.background[2]),
        f(ckpt.step_size),
        f(ckpt.z_max),
    );
    buf.extend_from_slice(header.as_bytes());

    push_i32s(&mut buf, grid.cells().iter().flatten().copied());
    push_i32s(&mut buf, grid.corners().iter().flatten().copied());
    push_f32s(&mut buf, ckpt.table.data());
    for layer in ckpt.net.layers() {
        push_f32s(&mut buf, &layer.w);
        push_f32s(&mut buf, &layer.b);
    }

    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::ChecksumMismatch);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn i32s(&mut self, n: usize) -> Result<Vec<i32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn f32s_as_f64(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

fn header_line<'a>(
    lines: &mut std::str::Lines<'a>,
    key: &str,
    path: &Path,
) -> Result<Vec<&'a str>> {
    let line = lines
        .next()
        .ok_or_else(|| Error::MalformedCheckpoint(format!("{path:?}: missing '{key}' line")))?;
    let mut toks = line.split_whitespace();
    let found = toks.next().unwrap_or("");
    if found != key {
        return Err(Error::MalformedCheckpoint(format!(
            "{path:?}: expected '{key}', found '{found}'"
        )));
    }
    Ok(toks.collect())
}

fn parse<T: std::str::FromStr>(tok: &str, key: &str) -> Result<T> {
    tok.parse()
        .map_err(|_| Error::MalformedCheckpoint(format!("bad value '{tok}' for {key}")))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 4 {
        return Err(Error::ChecksumMismatch);
    }
    let (payload, trailer) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(trailer.try_into().unwrap());
    if crc32fast::hash(payload) != stored_crc {
        return Err(Error::ChecksumMismatch);
    }

    // Header runs to the end_header line.
    let header_end = payload
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or_else(|| Error::MalformedCheckpoint("no end_header marker".into()))?
        + 11;
    let header = std::str::from_utf8(&payload[..header_end])
        .map_err(|_| Error::MalformedCheckpoint("header is not UTF-8".into()))?;
    let mut lines = header.lines();
    let format = lines
        .next()
        .ok_or_else(|| Error::MalformedCheckpoint("empty file".into()))?;
    if format != FORMAT_LINE {
        if let Some(v) = format.strip_prefix("voxelfield-checkpoint v") {
            if let Ok(n) = v.parse::<u32>() {
                return Err(Error::CheckpointVersion(n));
            }
        }
        return Err(Error::MalformedCheckpoint(format!(
            "not a checkpoint (first line '{format}')"
        )));
    }

    let level: u32 = parse(header_line(&mut lines, "level", path)?[0], "level")?;
    let voxel_size: f64 = parse(header_line(&mut lines, "voxel_size", path)?[0], "voxel_size")?;
    let o = header_line(&mut lines, "origin", path)?;
    let origin = Vec3::new(parse(o[0], "origin")?, parse(o[1], "origin")?, parse(o[2], "origin")?);
    let embed_dim: usize = parse(header_line(&mut lines, "embed_dim", path)?[0], "embed_dim")?;
    let cell_count: usize = parse(header_line(&mut lines, "cell_count", path)?[0], "cell_count")?;
    let corner_count: usize =
        parse(header_line(&mut lines, "corner_count", path)?[0], "corner_count")?;
    let feat_freqs: usize = parse(header_line(&mut lines, "feat_freqs", path)?[0], "feat_freqs")?;
    let dir_freqs: usize = parse(header_line(&mut lines, "dir_freqs", path)?[0], "dir_freqs")?;
    let hidden: usize = parse(header_line(&mut lines, "hidden", path)?[0], "hidden")?;
    let density_layers: usize =
        parse(header_line(&mut lines, "density_layers", path)?[0], "density_layers")?;
    let color_layers: usize =
        parse(header_line(&mut lines, "color_layers", path)?[0], "color_layers")?;
    let bg = header_line(&mut lines, "background", path)?;
    let background = [
        parse(bg[0], "background")?,
        parse(bg[1], "background")?,
        parse(bg[2], "background")?,
    ];
    let step_size: f64 = parse(header_line(&mut lines, "step_size", path)?[0], "step_size")?;
    let z_max: f64 = parse(header_line(&mut lines, "z_max", path)?[0], "z_max")?;

    let mut reader = Reader {
        bytes: payload,
        pos: header_end,
    };
    let cell_flat = reader.i32s(cell_count * 3)?;
    let corner_flat = reader.i32s(corner_count * 3)?;
    let embeddings = reader.f32s_as_f64(corner_count * embed_dim)?;

    let cells: Vec<[i32; 3]> = cell_flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let grid = SparseVoxelGrid::from_cells(voxel_size, origin, level, cells);
    if grid.cell_count() != cell_count {
        return Err(Error::MalformedCheckpoint("duplicate cells in file".into()));
    }
    if grid.corner_count() != corner_count {
        return Err(Error::MalformedCheckpoint(
            "corner count does not match the cell set".into(),
        ));
    }
    // Stored corners are redundant with the cell set; verify they agree so
    // embedding rows line up.
    for (stored, derived) in corner_flat.chunks_exact(3).zip(grid.corners()) {
        if stored != derived {
            return Err(Error::MalformedCheckpoint(
                "corner table does not match the cell set".into(),
            ));
        }
    }

    let mut table = EmbeddingTable::zeros(corner_count, embed_dim);
    table.data_mut().copy_from_slice(&embeddings);

    let config = FieldConfig {
        embed_dim,
        feat_freqs,
        dir_freqs,
        hidden,
        density_layers,
        color_layers,
    };
    let mut net = FieldNetwork::zeroed(config);
    for layer in net.layers_mut() {
        let w = reader.f32s_as_f64(layer.w.len())?;
        layer.w.copy_from_slice(&w);
        let b = reader.f32s_as_f64(layer.b.len())?;
        layer.b.copy_from_slice(&b);
    }
    if reader.pos != payload.len() {
        return Err(Error::MalformedCheckpoint(format!(
            "{} unexpected trailing bytes",
            payload.len() - reader.pos
        )));
    }

    Ok(Checkpoint {
        grid,
        table,
        net,
        background: [
            quantize(background[0]),
            quantize(background[1]),
            quantize(background[2]),
        ],
        step_size,
        z_max,
    })
}
