//! The learnable field: trilinear feature aggregation, positional
//! encoding, a small shared MLP predicting (density, color), and the
//! hand-written backward pass through all of it.
//!
//! Density depends only on position; color additionally sees the encoded
//! view direction. Hidden units use softplus (a smooth rectifier, so
//! finite-difference checks hold to tight tolerances), the density output
//! is softplus, the color output sigmoid.

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::grid::{quantize, EmbeddingTable, SparseVoxelGrid};

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// d/dx softplus(x), recovered from the output value y = softplus(x).
#[inline]
fn softplus_grad_from_output(y: f64) -> f64 {
    1.0 - (-y).exp()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Trilinear weights for a point at `local` in the unit cube, in
/// [`crate::grid::CORNER_OFFSETS`] order. Nonnegative, sum to 1.
#[inline]
pub fn trilinear_weights(local: Vec3) -> [f64; 8] {
    let (u, v, w) = (local.x, local.y, local.z);
    let (nu, nv, nw) = (1.0 - u, 1.0 - v, 1.0 - w);
    [
        nu * nv * nw,
        u * nv * nw,
        nu * v * nw,
        u * v * nw,
        nu * nv * w,
        u * nv * w,
        nu * v * w,
        u * v * w,
    ]
}

/// Interpolates 8 corner vectors at `local` in [0,1]^3.
pub fn trilinear(corner_values: [&[f64]; 8], local: Vec3) -> Result<Vec<f64>> {
    let inside = |t: f64| (0.0..=1.0).contains(&t);
    if !(inside(local.x) && inside(local.y) && inside(local.z)) {
        return Err(Error::LocalOutsideCell(local.to_array()));
    }
    let dim = corner_values[0].len();
    let w = trilinear_weights(local);
    let mut out = vec![0.0; dim];
    for (k, values) in corner_values.iter().enumerate() {
        debug_assert_eq!(values.len(), dim);
        for (o, &v) in out.iter_mut().zip(*values) {
            *o += w[k] * v;
        }
    }
    Ok(out)
}

/// Sinusoidal encoding: `[x, sin(2^0 pi x), cos(2^0 pi x), ...,
/// sin(2^(L-1) pi x), cos(2^(L-1) pi x)]` per component, blocked by kind.
/// Output length is `len(x) * (1 + 2L)`; `L = 0` returns `x` unchanged.
///
/// Octaves come from one sin/cos pair per component via the double-angle
/// recurrence; the accumulated error stays below `2^L` ulps.
pub fn positional_encode(x: &[f64], freqs: usize) -> Vec<f64> {
    let mut out = Vec::new();
    positional_encode_into(x, freqs, &mut out);
    out
}

fn positional_encode_into(x: &[f64], freqs: usize, out: &mut Vec<f64>) {
    let n = x.len();
    out.clear();
    out.resize(n * (1 + 2 * freqs), 0.0);
    out[..n].copy_from_slice(x);
    for (i, &v) in x.iter().enumerate() {
        let (mut s, mut c) = (std::f64::consts::PI * v).sin_cos();
        for k in 0..freqs {
            out[n * (1 + 2 * k) + i] = s;
            out[n * (2 + 2 * k) + i] = c;
            (s, c) = (2.0 * s * c, 1.0 - 2.0 * s * s);
        }
    }
}

/// Accumulates gradients w.r.t. the encoding input given gradients w.r.t.
/// the encoded vector (which must carry the sin/cos values themselves).
fn positional_encode_backward(encoded: &[f64], d_encoded: &[f64], freqs: usize, d_x: &mut [f64]) {
    let n = d_x.len();
    for i in 0..n {
        d_x[i] += d_encoded[i];
    }
    for k in 0..freqs {
        let f = (1u64 << k) as f64 * std::f64::consts::PI;
        let sin_off = n * (1 + 2 * k);
        let cos_off = sin_off + n;
        for i in 0..n {
            let s = encoded[sin_off + i];
            let c = encoded[cos_off + i];
            // d sin = f cos, d cos = -f sin
            d_x[i] += f * (c * d_encoded[sin_off + i] - s * d_encoded[cos_off + i]);
        }
    }
}

/// Fully connected layer, row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    fn kaiming(in_dim: usize, out_dim: usize, rng: &mut impl rand::Rng) -> Dense {
        let bound = (6.0 / in_dim as f64).sqrt();
        let w = (0..in_dim * out_dim)
            .map(|_| quantize(rng.gen_range(-bound..bound)))
            .collect();
        Dense {
            in_dim,
            out_dim,
            w,
            b: vec![0.0; out_dim],
        }
    }

    #[inline]
    fn forward_into(&self, x: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(x.len(), self.in_dim);
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            // Four parallel accumulators break the reduction dependency
            // chain so the loop vectorizes.
            let mut acc = [0.0f64; 4];
            let mut rc = row.chunks_exact(4);
            let mut xc = x.chunks_exact(4);
            for (r4, x4) in (&mut rc).zip(&mut xc) {
                acc[0] += r4[0] * x4[0];
                acc[1] += r4[1] * x4[1];
                acc[2] += r4[2] * x4[2];
                acc[3] += r4[3] * x4[3];
            }
            let mut sum = self.b[o] + ((acc[0] + acc[1]) + (acc[2] + acc[3]));
            for (r, xv) in rc.remainder().iter().zip(xc.remainder()) {
                sum += r * xv;
            }
            out.push(sum);
        }
    }

    /// Given d(pre-activation), accumulates weight/bias gradients and the
    /// gradient w.r.t. the input.
    fn backward(&self, d_pre: &[f64], input: &[f64], grad: &mut LayerGrad, d_input: &mut [f64]) {
        for (o, &g) in d_pre.iter().enumerate() {
            grad.b[o] += g;
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grad.w[o * self.in_dim..(o + 1) * self.in_dim];
            for ((gw, di), (r, xv)) in grow
                .iter_mut()
                .zip(d_input.iter_mut())
                .zip(row.iter().zip(input))
            {
                *gw += g * xv;
                *di += g * r;
            }
        }
    }

    fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Shape hyperparameters for [`FieldNetwork`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FieldConfig {
    pub embed_dim: usize,
    pub feat_freqs: usize,
    pub dir_freqs: usize,
    pub hidden: usize,
    pub density_layers: usize,
    pub color_layers: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            embed_dim: 32,
            feat_freqs: 6,
            dir_freqs: 4,
            hidden: 128,
            density_layers: 2,
            color_layers: 2,
        }
    }
}

impl FieldConfig {
    pub fn encoded_feature_len(&self) -> usize {
        self.embed_dim * (1 + 2 * self.feat_freqs)
    }

    pub fn encoded_dir_len(&self) -> usize {
        3 * (1 + 2 * self.dir_freqs)
    }
}

/// The MLP shared by all voxels: maps an encoded feature (+ encoded view
/// direction) to a nonnegative density and an RGB color in (0,1).
#[derive(Debug, Clone, PartialEq)]
pub struct FieldNetwork {
    pub config: FieldConfig,
    pub density: Vec<Dense>,
    pub sigma_head: Dense,
    pub color: Vec<Dense>,
}

impl FieldNetwork {
    pub fn new(config: FieldConfig, rng: &mut impl rand::Rng) -> FieldNetwork {
        assert!(config.density_layers >= 1 && config.color_layers >= 1);
        let mut density = Vec::new();
        let mut in_dim = config.encoded_feature_len();
        for _ in 0..config.density_layers {
            density.push(Dense::kaiming(in_dim, config.hidden, rng));
            in_dim = config.hidden;
        }
        let sigma_head = Dense::kaiming(config.hidden, 1, rng);
        let mut color = Vec::new();
        let mut in_dim = config.hidden + config.encoded_dir_len();
        for i in 0..config.color_layers {
            let out = if i + 1 == config.color_layers {
                3
            } else {
                config.hidden
            };
            color.push(Dense::kaiming(in_dim, out, rng));
            in_dim = out;
        }
        let mut net = FieldNetwork {
            config,
            density,
            sigma_head,
            color,
        };
        // Start nearly transparent everywhere: a damped density head plus a
        // negative bias keeps the initial density below the pruning
        // threshold ln 2, so regions the data never constrains get pruned
        // instead of lingering as half-opaque haze.
        for w in net.sigma_head.w.iter_mut() {
            *w = quantize(*w * 0.1);
        }
        net.sigma_head.b[0] = quantize(-0.5);
        net
    }

    /// All-zero network of the same shape (useful for analytic baselines).
    pub fn zeroed(config: FieldConfig) -> FieldNetwork {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut net = FieldNetwork::new(config, &mut rng);
        for layer in net.layers_mut() {
            layer.w.iter_mut().for_each(|w| *w = 0.0);
            layer.b.iter_mut().for_each(|b| *b = 0.0);
        }
        net
    }

    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.density
            .iter()
            .chain(std::iter::once(&self.sigma_head))
            .chain(self.color.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.density
            .iter_mut()
            .chain(std::iter::once(&mut self.sigma_head))
            .chain(self.color.iter_mut())
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(Dense::param_count).sum()
    }

    /// Parameter slices in canonical order (each layer's weights, then its
    /// biases), matching [`NetGrad::slices`].
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in self
            .density
            .iter_mut()
            .chain(std::iter::once(&mut self.sigma_head))
            .chain(self.color.iter_mut())
        {
            out.push(layer.w.as_mut_slice());
            out.push(layer.b.as_mut_slice());
        }
        out
    }
}

/// Per-layer gradient accumulator.
#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// Gradients for every network parameter, in the same layout as the net.
#[derive(Debug, Clone)]
pub struct NetGrad {
    pub layers: Vec<LayerGrad>,
}

impl NetGrad {
    pub fn zeros_like(net: &FieldNetwork) -> NetGrad {
        NetGrad {
            layers: net
                .layers()
                .map(|l| LayerGrad {
                    w: vec![0.0; l.w.len()],
                    b: vec![0.0; l.b.len()],
                })
                .collect(),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.w.as_slice());
            out.push(l.b.as_slice());
        }
        out
    }

    /// Splits into (density layers, sigma head, color layers) given the
    /// density layer count of the mirrored network.
    fn split_mut(
        &mut self,
        n_density: usize,
    ) -> (&mut [LayerGrad], &mut LayerGrad, &mut [LayerGrad]) {
        let (density, rest) = self.layers.split_at_mut(n_density);
        let (sigma, color) = rest.split_at_mut(1);
        (density, &mut sigma[0], color)
    }
}

/// Gradient accumulators for everything learnable in one scene.
#[derive(Debug, Clone)]
pub struct GradientBuffer {
    pub embeddings: Vec<f64>,
    pub net: NetGrad,
    pub background: [f64; 3],
}

impl GradientBuffer {
    pub fn zeros(table: &EmbeddingTable, net: &FieldNetwork) -> GradientBuffer {
        GradientBuffer {
            embeddings: vec![0.0; table.rows() * table.dim()],
            net: NetGrad::zeros_like(net),
            background: [0.0; 3],
        }
    }

    pub fn accumulate(&mut self, other: &GradientBuffer) {
        for (a, b) in self.embeddings.iter_mut().zip(&other.embeddings) {
            *a += b;
        }
        for (la, lb) in self.net.layers.iter_mut().zip(&other.net.layers) {
            for (a, b) in la.w.iter_mut().zip(&lb.w) {
                *a += b;
            }
            for (a, b) in la.b.iter_mut().zip(&lb.b) {
                *a += b;
            }
        }
        for (a, b) in self.background.iter_mut().zip(&other.background) {
            *a += b;
        }
    }
}

/// Encoded view direction, computed once per ray.
pub fn encode_direction(v: Vec3, freqs: usize) -> Vec<f64> {
    positional_encode(&[v.x, v.y, v.z], freqs)
}

/// Reusable forward-pass buffers; one per worker, reused across samples.
#[derive(Debug, Clone, Default)]
pub struct EvalScratch {
    g: Vec<f64>,
    encoded: Vec<f64>,
    h: Vec<f64>,
    pre: Vec<f64>,
    ch: Vec<f64>,
}

/// Saved forward intermediates for one field evaluation. The encoded view
/// direction is per-ray state and lives with the caller.
#[derive(Debug, Clone)]
pub struct QueryTape {
    pub corner_rows: [u32; 8],
    pub weights: [f64; 8],
    /// Trilinearly interpolated feature before positional encoding.
    pub feature: Vec<f64>,
    /// Post-activation vector of each density layer.
    pub density_posts: Vec<Vec<f64>>,
    pub sigma: f64,
    /// Post-activation vector of each color layer; the last is the color.
    pub color_posts: Vec<Vec<f64>>,
}

/// Field evaluation at `p` (known to lie in `voxel_id`) with a
/// precomputed direction encoding. Returns (sigma, color, tape).
pub fn query_in_cell(
    grid: &SparseVoxelGrid,
    table: &EmbeddingTable,
    net: &FieldNetwork,
    voxel_id: u32,
    p: Vec3,
    enc_dir: &[f64],
    scratch: &mut EvalScratch,
) -> (f64, [f64; 3], QueryTape) {
    let (sigma, color, tape) = eval(grid, table, net, voxel_id, p, Some(enc_dir), scratch, true);
    (sigma, color, tape.unwrap())
}

/// Tape-free variant for inference.
pub fn query_in_cell_fast(
    grid: &SparseVoxelGrid,
    table: &EmbeddingTable,
    net: &FieldNetwork,
    voxel_id: u32,
    p: Vec3,
    enc_dir: &[f64],
    scratch: &mut EvalScratch,
) -> (f64, [f64; 3]) {
    let (sigma, color, _) = eval(grid, table, net, voxel_id, p, Some(enc_dir), scratch, false);
    (sigma, color)
}

/// Density only, skipping the color branch (used by pruning).
pub fn density_in_cell(
    grid: &SparseVoxelGrid,
    table: &EmbeddingTable,
    net: &FieldNetwork,
    voxel_id: u32,
    p: Vec3,
    scratch: &mut EvalScratch,
) -> f64 {
    eval(grid, table, net, voxel_id, p, None, scratch, false).0
}

/// Public entry: locates the voxel containing `p`, encodes `v`.
pub fn query(
    grid: &SparseVoxelGrid,
    table: &EmbeddingTable,
    net: &FieldNetwork,
    p: Vec3,
    v: Vec3,
) -> Result<(f64, [f64; 3], QueryTape)> {
    let id = grid
        .locate(p)
        .ok_or(Error::PointOutsideGrid(p.to_array()))?;
    let enc_dir = encode_direction(v, net.config.dir_freqs);
    let mut scratch = EvalScratch::default();
    Ok(query_in_cell(grid, table, net, id, p, &enc_dir, &mut scratch))
}

#[allow(clippy::too_many_arguments)]
fn eval(
    grid: &SparseVoxelGrid,
    table: &EmbeddingTable,
    net: &FieldNetwork,
    voxel_id: u32,
    p: Vec3,
    enc_dir: Option<&[f64]>,
    scratch: &mut EvalScratch,
    record: bool,
) -> (f64, [f64; 3], Option<QueryTape>) {
    debug_assert_eq!(table.dim(), net.config.embed_dim);
    let rows = grid.corner_rows(voxel_id);
    let local = grid.local_coords(voxel_id, p);
    let weights = trilinear_weights(local);

    let d = table.dim();
    let g = &mut scratch.g;
    g.clear();
    g.resize(d, 0.0);
    for (k, &row) in rows.iter().enumerate() {
        let src = table.row(row);
        let w = weights[k];
        for (gi, &s) in g.iter_mut().zip(src) {
            *gi += w * s;
        }
    }
    positional_encode_into(g, net.config.feat_freqs, &mut scratch.encoded);

    let mut density_posts: Vec<Vec<f64>> = Vec::with_capacity(if record {
        net.density.len()
    } else {
        0
    });
    let h = &mut scratch.h;
    let pre = &mut scratch.pre;
    h.clear();
    h.extend_from_slice(&scratch.encoded);
    for layer in &net.density {
        layer.forward_into(h, pre);
        h.clear();
        h.extend(pre.iter().map(|&x| softplus(x)));
        if record {
            density_posts.push(h.clone());
        }
    }
    net.sigma_head.forward_into(h, pre);
    let sigma = softplus(pre[0]);

    let (color, color_posts) = if let Some(enc_dir) = enc_dir {
        let ch = &mut scratch.ch;
        ch.clear();
        ch.extend_from_slice(h);
        ch.extend_from_slice(enc_dir);
        let mut color_posts: Vec<Vec<f64>> = Vec::with_capacity(if record {
            net.color.len()
        } else {
            0
        });
        for (i, layer) in net.color.iter().enumerate() {
            layer.forward_into(ch, pre);
            ch.clear();
            if i + 1 == net.color.len() {
                ch.extend(pre.iter().map(|&x| sigmoid(x)));
            } else {
                ch.extend(pre.iter().map(|&x| softplus(x)));
            }
            if record {
                color_posts.push(ch.clone());
            }
        }
        ([ch[0], ch[1], ch[2]], color_posts)
    } else {
        ([0.0; 3], Vec::new())
    };

    let tape = record.then(|| QueryTape {
        corner_rows: rows,
        weights,
        feature: g.clone(),
        density_posts,
        sigma,
        color_posts,
    });
    (sigma, color, tape)
}

/// Reverse pass for one field evaluation: accumulates gradients of
/// `d_sigma * sigma + d_color . color` w.r.t. network parameters and the
/// eight corner embedding rows. `enc_dir` must be the encoding the forward
/// pass saw.
pub fn query_backward(
    tape: &QueryTape,
    net: &FieldNetwork,
    enc_dir: &[f64],
    d_sigma: f64,
    d_color: [f64; 3],
    grads: &mut GradientBuffer,
) -> Result<()> {
    let cfg = &net.config;
    if grads.net.layers.len() != net.density.len() + 1 + net.color.len() {
        return Err(Error::ShapeMismatch("gradient buffer / network".into()));
    }
    let hidden = cfg.hidden;
    let (g_density, g_sigma, g_color) = grads.net.split_mut(net.density.len());

    let encoded_feature = positional_encode(&tape.feature, cfg.feat_freqs);
    let last_density_post: &[f64] = tape.density_posts.last().expect("tape density posts");
    let mut d_hidden = vec![0.0f64; hidden];

    // Color branch.
    if !tape.color_posts.is_empty() {
        let n_color = net.color.len();
        let mut d_post: Vec<f64> = {
            let c = &tape.color_posts[n_color - 1];
            (0..3).map(|i| d_color[i] * c[i] * (1.0 - c[i])).collect()
        };
        for i in (0..n_color).rev() {
            let layer = &net.color[i];
            let input_owner: Vec<f64>;
            let input: &[f64] = if i == 0 {
                input_owner = last_density_post
                    .iter()
                    .chain(enc_dir.iter())
                    .copied()
                    .collect();
                &input_owner
            } else {
                &tape.color_posts[i - 1]
            };
            let mut d_input = vec![0.0f64; layer.in_dim];
            layer.backward(&d_post, input, &mut g_color[i], &mut d_input);
            if i == 0 {
                for (a, b) in d_hidden.iter_mut().zip(&d_input[..hidden]) {
                    *a += b;
                }
            } else {
                let prev = &tape.color_posts[i - 1];
                d_post = d_input
                    .iter()
                    .zip(prev)
                    .map(|(&di, &y)| di * softplus_grad_from_output(y))
                    .collect();
            }
        }
    }

    // Density head.
    {
        let d_pre = [d_sigma * softplus_grad_from_output(tape.sigma)];
        let mut d_input = vec![0.0f64; hidden];
        net.sigma_head
            .backward(&d_pre, last_density_post, g_sigma, &mut d_input);
        for (a, b) in d_hidden.iter_mut().zip(&d_input) {
            *a += b;
        }
    }

    // Density trunk.
    let mut d_post = d_hidden;
    let mut d_encoded = vec![0.0f64; encoded_feature.len()];
    for i in (0..net.density.len()).rev() {
        let layer = &net.density[i];
        let post = &tape.density_posts[i];
        let d_pre: Vec<f64> = d_post
            .iter()
            .zip(post)
            .map(|(&dp, &y)| dp * softplus_grad_from_output(y))
            .collect();
        if i == 0 {
            layer.backward(&d_pre, &encoded_feature, &mut g_density[i], &mut d_encoded);
        } else {
            let input = &tape.density_posts[i - 1];
            let mut d_input = vec![0.0f64; layer.in_dim];
            layer.backward(&d_pre, input, &mut g_density[i], &mut d_input);
            d_post = d_input;
        }
    }

    // Through the positional encoding into the interpolated feature.
    let d = cfg.embed_dim;
    let mut d_g = vec![0.0f64; d];
    positional_encode_backward(&encoded_feature, &d_encoded, cfg.feat_freqs, &mut d_g);

    // And through the trilinear weights into the corner rows.
    if !grads.embeddings.len().is_multiple_of(d) {
        return Err(Error::ShapeMismatch("embedding gradient buffer".into()));
    }
    for (k, &row) in tape.corner_rows.iter().enumerate() {
        let w = tape.weights[k];
        let dst = &mut grads.embeddings[row as usize * d..(row as usize + 1) * d];
        for (slot, &dg) in dst.iter_mut().zip(&d_g) {
            *slot += w * dg;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::init_from_bbox;
    use crate::geom::Aabb;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trilinear_reproduces_corner_values() {
        let corners: Vec<Vec<f64>> = (0..8).map(|k| vec![k as f64, -(k as f64)]).collect();
        let refs: [&[f64]; 8] = std::array::from_fn(|k| corners[k].as_slice());
        for (k, off) in crate::grid::CORNER_OFFSETS.iter().enumerate() {
            let local = Vec3::new(off[0] as f64, off[1] as f64, off[2] as f64);
            let out = trilinear(refs, local).unwrap();
            assert_eq!(out, corners[k]);
        }
    }

    #[test]
    fn trilinear_center_is_mean() {
        let corners: Vec<Vec<f64>> = (0..8).map(|k| vec![(k * k) as f64]).collect();
        let refs: [&[f64]; 8] = std::array::from_fn(|k| corners[k].as_slice());
        let out = trilinear(refs, Vec3::splat(0.5)).unwrap();
        let mean = corners.iter().map(|c| c[0]).sum::<f64>() / 8.0;
        assert!((out[0] - mean).abs() < 1e-12);
    }

    #[test]
    fn trilinear_of_corner_positions_returns_the_point() {
        // With corner values equal to corner positions, interpolation is
        // the identity on the cube.
        let corners: Vec<Vec<f64>> = crate::grid::CORNER_OFFSETS
            .iter()
            .map(|o| vec![o[0] as f64, o[1] as f64, o[2] as f64])
            .collect();
        let refs: [&[f64]; 8] = std::array::from_fn(|k| corners[k].as_slice());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let p = Vec3::new(rng.gen(), rng.gen(), rng.gen());
            let out = trilinear(refs, p).unwrap();
            assert!((out[0] - p.x).abs() < 1e-12);
            assert!((out[1] - p.y).abs() < 1e-12);
            assert!((out[2] - p.z).abs() < 1e-12);
        }
    }

    #[test]
    fn trilinear_weights_partition_and_affine_exactness() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = [0.3, -1.2, 0.7];
        let b = 0.45;
        let corners: Vec<Vec<f64>> = crate::grid::CORNER_OFFSETS
            .iter()
            .map(|o| vec![a[0] * o[0] as f64 + a[1] * o[1] as f64 + a[2] * o[2] as f64 + b])
            .collect();
        let refs: [&[f64]; 8] = std::array::from_fn(|k| corners[k].as_slice());
        for _ in 0..200 {
            let p = Vec3::new(rng.gen(), rng.gen(), rng.gen());
            let w = trilinear_weights(p);
            assert!(w.iter().all(|&x| x >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let out = trilinear(refs, p).unwrap();
            let want = a[0] * p.x + a[1] * p.y + a[2] * p.z + b;
            assert!((out[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn trilinear_rejects_outside_local_coords() {
        let corners: Vec<Vec<f64>> = (0..8).map(|_| vec![0.0]).collect();
        let refs: [&[f64]; 8] = std::array::from_fn(|k| corners[k].as_slice());
        assert!(trilinear(refs, Vec3::new(1.1, 0.0, 0.0)).is_err());
        assert!(trilinear(refs, Vec3::new(0.5, -0.01, 0.5)).is_err());
    }

    #[test]
    fn encode_zero_vector() {
        let out = positional_encode(&[0.0, 0.0], 3);
        assert_eq!(out.len(), 2 * (1 + 6));
        assert_eq!(&out[..2], &[0.0, 0.0]);
        for k in 0..3 {
            let sin_off = 2 * (1 + 2 * k);
            assert_eq!(&out[sin_off..sin_off + 2], &[0.0, 0.0]);
            assert_eq!(&out[sin_off + 2..sin_off + 4], &[1.0, 1.0]);
        }
    }

    #[test]
    fn encode_no_freqs_is_identity() {
        let x = [1.5, -2.0, 0.25];
        assert_eq!(positional_encode(&x, 0), x.to_vec());
    }

    #[test]
    fn encode_default_dims_give_416() {
        let x = vec![0.1; 32];
        assert_eq!(positional_encode(&x, 6).len(), 416);
    }

    fn small_setup(seed: u64) -> (SparseVoxelGrid, EmbeddingTable, FieldNetwork) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bbox = Aabb::new(Vec3::ZERO, Vec3::splat(1.0));
        let (grid, table) = init_from_bbox(&bbox, 8, 8, &mut rng).unwrap();
        let net = FieldNetwork::new(
            FieldConfig {
                embed_dim: 8,
                feat_freqs: 3,
                dir_freqs: 2,
                hidden: 16,
                density_layers: 2,
                color_layers: 2,
            },
            &mut rng,
        );
        (grid, table, net)
    }

    #[test]
    fn zeroed_network_gives_analytic_outputs() {
        let (grid, table, _) = small_setup(3);
        let net = FieldNetwork::zeroed(FieldConfig {
            embed_dim: 8,
            feat_freqs: 3,
            dir_freqs: 2,
            hidden: 16,
            density_layers: 2,
            color_layers: 2,
        });
        let (sigma, color, _) = query(
            &grid,
            &table,
            &net,
            Vec3::splat(0.4),
            Vec3::new(0.0, 0.0, 1.0),
        )
        .unwrap();
        assert!((sigma - (2.0f64).ln()).abs() < 1e-15);
        assert_eq!(color, [0.5, 0.5, 0.5]);
    }

    #[test]
    fn density_ignores_view_direction_bit_exactly() {
        let (grid, table, net) = small_setup(4);
        let p = Vec3::new(0.31, 0.62, 0.18);
        let (s1, _, _) = query(&grid, &table, &net, p, Vec3::new(1.0, 0.0, 0.0)).unwrap();
        let (s2, _, _) = query(&grid, &table, &net, p, Vec3::new(0.0, -1.0, 0.0).normalized())
            .unwrap();
        assert_eq!(s1.to_bits(), s2.to_bits());
        let mut scratch = EvalScratch::default();
        assert_eq!(
            s1,
            density_in_cell(&grid, &table, &net, grid.locate(p).unwrap(), p, &mut scratch)
        );
    }

    /// Straight-line oracle: recompute the forward pass with independent
    /// code (no tape, different loop structure).
    fn plain_forward(
        grid: &SparseVoxelGrid,
        table: &EmbeddingTable,
        net: &FieldNetwork,
        p: Vec3,
        v: Vec3,
    ) -> (f64, [f64; 3]) {
        let id = grid.locate(p).unwrap();
        let local = grid.local_coords(id, p);
        let rows = grid.corner_rows(id);
        let d = table.dim();
        let mut g = vec![0.0; d];
        for i in 0..d {
            let mut acc = 0.0;
            for (k, off) in crate::grid::CORNER_OFFSETS.iter().enumerate() {
                let wx = if off[0] == 1 { local.x } else { 1.0 - local.x };
                let wy = if off[1] == 1 { local.y } else { 1.0 - local.y };
                let wz = if off[2] == 1 { local.z } else { 1.0 - local.z };
                acc += wx * wy * wz * table.row(rows[k])[i];
            }
            g[i] = acc;
        }
        let mut x = positional_encode(&g, net.config.feat_freqs);
        for layer in &net.density {
            let mut y = vec![0.0; layer.out_dim];
            for (o, yo) in y.iter_mut().enumerate() {
                *yo = layer.b[o]
                    + x.iter()
                        .enumerate()
                        .map(|(i, xi)| layer.w[o * layer.in_dim + i] * xi)
                        .sum::<f64>();
                *yo = (1.0 + yo.exp()).ln();
            }
            x = y;
        }
        let pre = net.sigma_head.b[0]
            + x.iter()
                .enumerate()
                .map(|(i, xi)| net.sigma_head.w[i] * xi)
                .sum::<f64>();
        let sigma = (1.0 + pre.exp()).ln();
        let mut ch: Vec<f64> = x
            .iter()
            .copied()
            .chain(positional_encode(&[v.x, v.y, v.z], net.config.dir_freqs))
            .collect();
        for (li, layer) in net.color.iter().enumerate() {
            let mut y = vec![0.0; layer.out_dim];
            for (o, yo) in y.iter_mut().enumerate() {
                let pre = layer.b[o]
                    + ch.iter()
                        .enumerate()
                        .map(|(i, xi)| layer.w[o * layer.in_dim + i] * xi)
                        .sum::<f64>();
                *yo = if li + 1 == net.color.len() {
                    1.0 / (1.0 + (-pre).exp())
                } else {
                    (1.0 + pre.exp()).ln()
                };
            }
            ch = y;
        }
        (sigma, [ch[0], ch[1], ch[2]])
    }

    #[test]
    fn query_matches_tape_free_reimplementation() {
        let (grid, table, net) = small_setup(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let p = Vec3::new(
                rng.gen_range(0.01..0.99),
                rng.gen_range(0.01..0.99),
                rng.gen_range(0.01..0.99),
            );
            let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 1.0)
                .normalized();
            let (s, c, _) = query(&grid, &table, &net, p, v).unwrap();
            let (so, co) = plain_forward(&grid, &table, &net, p, v);
            assert!((s - so).abs() < 1e-12);
            for i in 0..3 {
                assert!((c[i] - co[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn query_outside_grid_errors() {
        let (grid, table, net) = small_setup(7);
        assert!(query(&grid, &table, &net, Vec3::splat(5.0), Vec3::new(0.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn backward_zero_upstream_changes_nothing() {
        let (grid, table, net) = small_setup(8);
        let p = Vec3::new(0.4, 0.6, 0.3);
        let v = Vec3::new(0.0, 0.0, 1.0);
        let (_, _, tape) = query(&grid, &table, &net, p, v).unwrap();
        let enc_dir = encode_direction(v, net.config.dir_freqs);
        let mut grads = GradientBuffer::zeros(&table, &net);
        query_backward(&tape, &net, &enc_dir, 0.0, [0.0; 3], &mut grads).unwrap();
        assert!(grads.embeddings.iter().all(|&g| g == 0.0));
        assert!(grads
            .net
            .layers
            .iter()
            .all(|l| l.w.iter().all(|&g| g == 0.0) && l.b.iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn backward_at_a_corner_touches_only_that_row() {
        let (grid, table, net) = small_setup(9);
        // Interior corner of cell (0,0,0)'s +++ vertex: local = (1,1,1).
        let id = grid.cell_id([0, 0, 0]).unwrap();
        let cell = grid.cell_aabb(id);
        let p = cell.max;
        let (_, _, tape) = {
            let local = grid.local_coords(id, p);
            assert_eq!((local.x, local.y, local.z), (1.0, 1.0, 1.0));
            let enc = encode_direction(Vec3::new(0.0, 0.0, 1.0), net.config.dir_freqs);
            let mut scratch = EvalScratch::default();
            let (s, c, t) = query_in_cell(&grid, &table, &net, id, p, &enc, &mut scratch);
            (s, c, t)
        };
        let enc_dir = encode_direction(Vec3::new(0.0, 0.0, 1.0), net.config.dir_freqs);
        let mut grads = GradientBuffer::zeros(&table, &net);
        query_backward(&tape, &net, &enc_dir, 1.0, [0.2, -0.3, 0.1], &mut grads).unwrap();
        let hot_row = tape.corner_rows[7] as usize;
        let d = table.dim();
        for row in 0..table.rows() {
            let slice = &grads.embeddings[row * d..(row + 1) * d];
            if row == hot_row {
                assert!(slice.iter().any(|&g| g != 0.0));
            } else {
                assert!(slice.iter().all(|&g| g == 0.0));
            }
        }
    }

    /// Central-difference check of query gradients for a scalar readout.
    #[test]
    fn backward_matches_finite_differences() {
        let (grid, mut table, mut net) = small_setup(10);
        let p = Vec3::new(0.37, 0.55, 0.21);
        let v = Vec3::new(0.3, -0.2, 1.0).normalized();
        let d_sigma = 0.7;
        let d_color = [0.25, -0.4, 0.55];

        let readout = |grid: &SparseVoxelGrid, table: &EmbeddingTable, net: &FieldNetwork| {
            let (s, c, _) = query(grid, table, net, p, v).unwrap();
            d_sigma * s + d_color[0] * c[0] + d_color[1] * c[1] + d_color[2] * c[2]
        };

        let (_, _, tape) = query(&grid, &table, &net, p, v).unwrap();
        let enc_dir = encode_direction(v, net.config.dir_freqs);
        let mut grads = GradientBuffer::zeros(&table, &net);
        query_backward(&tape, &net, &enc_dir, d_sigma, d_color, &mut grads).unwrap();

        let h = 1e-3;
        let check = |analytic: f64, plus: f64, minus: f64, what: &str| {
            let fd = (plus - minus) / (2.0 * h);
            let tol = 1e-6f64.max(1e-4 * analytic.abs().max(fd.abs()));
            assert!(
                (analytic - fd).abs() <= tol,
                "{what}: analytic {analytic}, fd {fd}"
            );
        };

        // Embedding rows that matter for this cell.
        let id = grid.locate(p).unwrap();
        let rows = grid.corner_rows(id);
        let dim = table.dim();
        for &row in &rows {
            for j in 0..dim {
                let idx = row as usize * dim + j;
                let saved = table.data()[idx];
                table.data_mut()[idx] = saved + h;
                let plus = readout(&grid, &table, &net);
                table.data_mut()[idx] = saved - h;
                let minus = readout(&grid, &table, &net);
                table.data_mut()[idx] = saved;
                check(grads.embeddings[idx], plus, minus, "embedding");
            }
        }

        // A sample of network parameters from every layer.
        fn set_param(net: &mut FieldNetwork, li: usize, pick_w: bool, idx: usize, value: f64) {
            let layer = net.layers_mut().nth(li).unwrap();
            if pick_w {
                layer.w[idx] = value;
            } else {
                layer.b[idx] = value;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for li in 0..grads.net.layers.len() {
            for _ in 0..10 {
                let (nw, nb) = {
                    let l = &grads.net.layers[li];
                    (l.w.len(), l.b.len())
                };
                let pick_w = rng.gen_bool(0.7) && nw > 0;
                let idx = if pick_w {
                    rng.gen_range(0..nw)
                } else {
                    rng.gen_range(0..nb)
                };
                let analytic = if pick_w {
                    grads.net.layers[li].w[idx]
                } else {
                    grads.net.layers[li].b[idx]
                };
                let saved = {
                    let l = net.layers().nth(li).unwrap();
                    if pick_w {
                        l.w[idx]
                    } else {
                        l.b[idx]
                    }
                };
                set_param(&mut net, li, pick_w, idx, saved + h);
                let plus = readout(&grid, &table, &net);
                set_param(&mut net, li, pick_w, idx, saved - h);
                let minus = readout(&grid, &table, &net);
                set_param(&mut net, li, pick_w, idx, saved);
                check(analytic, plus, minus, "net param");
            }
        }
    }
}
