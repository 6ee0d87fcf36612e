//! The coordinate-based positional embedding map M(x,y): Fourier-feature
//! MLP, exact-grid residuals, and classical interpolation baselines over the
//! frozen positional table.
//!
//! Coordinate convention: the first coordinate runs along the table's row
//! (vertical) axis, the second along the column axis, both in [-1,1]. Grid
//! node (i, j) sits at (-1 + 2i/23, -1 + 2j/23).

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::QtpError;
use crate::graph::{Bindings, Graph, NodeId};
use crate::tensor::Tensor;

pub const GRID_ROWS: usize = 24;
pub const GRID_COLS: usize = 24;

/// Frozen grid of positional vectors, rows x cols x dim.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalTable {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    /// Row-major (row, col, component).
    pub values: Vec<f64>,
}

impl PositionalTable {
    pub fn new(rows: usize, cols: usize, dim: usize, values: Vec<f64>) -> Result<Self, QtpError> {
        if values.len() != rows * cols * dim {
            return Err(QtpError::Shape(format!(
                "table data length {} does not match {rows}x{cols}x{dim}",
                values.len()
            )));
        }
        Ok(PositionalTable {
            rows,
            cols,
            dim,
            values,
        })
    }

    pub fn node(&self, i: usize, j: usize) -> &[f64] {
        let off = (i * self.cols + j) * self.dim;
        &self.values[off..off + self.dim]
    }

    /// As a (rows*cols) x dim tensor, for use as a graph constant/parameter.
    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(vec![self.rows * self.cols, self.dim], self.values.clone()).unwrap()
    }

    /// Smooth synthetic table: each component is a low-frequency function of
    /// the grid coordinates, seeded for reproducibility.
    pub fn synthetic_smooth(dim: usize, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut phases = Vec::with_capacity(dim);
        for _ in 0..dim {
            phases.push((
                rng.gen_range(0.5..2.0),
                rng.gen_range(0.5..2.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
            ));
        }
        let mut values = Vec::with_capacity(GRID_ROWS * GRID_COLS * dim);
        for i in 0..GRID_ROWS {
            for j in 0..GRID_COLS {
                let (x, y) = grid_coordinate(i, j).unwrap();
                for &(fx, fy, ph) in &phases {
                    values.push(0.5 * (fx * x + fy * y + ph).sin());
                }
            }
        }
        PositionalTable::new(GRID_ROWS, GRID_COLS, dim, values).unwrap()
    }
}

/// Coordinate of grid node (i, j): (-1 + 2i/23, -1 + 2j/23).
pub fn grid_coordinate(i: usize, j: usize) -> Result<(f64, f64), QtpError> {
    if i >= GRID_ROWS || j >= GRID_COLS {
        return Err(QtpError::InvalidArgument(format!(
            "grid index ({i},{j}) out of range"
        )));
    }
    Ok((
        -1.0 + 2.0 * i as f64 / (GRID_ROWS - 1) as f64,
        -1.0 + 2.0 * j as f64 / (GRID_COLS - 1) as f64,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpConfig {
    pub fourier_features: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub out_dim: usize,
    pub fourier_scale: f64,
    pub init_seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            fourier_features: 48,
            hidden_layers: 4,
            hidden_width: 1024,
            out_dim: 1024,
            fourier_scale: 10.0,
            init_seed: 0,
        }
    }
}

/// The learned map M(x,y) -> R^D: frozen Gaussian Fourier frequencies
/// followed by GELU hidden layers and a linear output.
#[derive(Clone, Debug)]
pub struct CoordinateMlp {
    pub config: MlpConfig,
    /// Frozen F x 2 frequency matrix; never trained.
    pub fourier_matrix: Tensor,
    /// Trainable weights keyed by name ("mlp.h0.w", "mlp.h0.b", ...,
    /// "mlp.out.w", "mlp.out.b").
    pub params: BTreeMap<String, Tensor>,
}

impl CoordinateMlp {
    pub fn layer_dims(config: &MlpConfig) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = 2 * config.fourier_features;
        for _ in 0..config.hidden_layers {
            dims.push((prev, config.hidden_width));
            prev = config.hidden_width;
        }
        dims.push((prev, config.out_dim));
        dims
    }

    pub fn param_name(layer: usize, hidden_layers: usize, weight: bool) -> String {
        let stem = if layer == hidden_layers {
            "out".to_string()
        } else {
            format!("h{layer}")
        };
        format!("mlp.{stem}.{}", if weight { "w" } else { "b" })
    }

    pub fn init(config: MlpConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let freq_dist = Normal::new(0.0, config.fourier_scale).unwrap();
        let mut freqs = Vec::with_capacity(config.fourier_features * 2);
        for _ in 0..config.fourier_features * 2 {
            freqs.push(freq_dist.sample(&mut rng));
        }
        let fourier_matrix = Tensor::new(vec![config.fourier_features, 2], freqs).unwrap();

        let mut params = BTreeMap::new();
        for (layer, (fan_in, fan_out)) in Self::layer_dims(&config).iter().enumerate() {
            let w_dist = Normal::new(0.0, 1.0 / (*fan_in as f64).sqrt()).unwrap();
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| w_dist.sample(&mut rng)).collect();
            params.insert(
                Self::param_name(layer, config.hidden_layers, true),
                Tensor::new(vec![*fan_in, *fan_out], w).unwrap(),
            );
            params.insert(
                Self::param_name(layer, config.hidden_layers, false),
                Tensor::zeros(vec![*fan_out]),
            );
        }
        CoordinateMlp {
            config,
            fourier_matrix,
            params,
        }
    }

    /// Append the MLP subgraph to `graph`, reading coordinates from the
    /// `coords` node (n x 2) and returning the n x D output node. Parameter
    /// nodes use this MLP's canonical names.
    pub fn build_graph(&self, graph: &mut Graph, coords: NodeId) -> NodeId {
        let mut h = graph.fourier(coords, self.fourier_matrix.clone());
        let layers = self.config.hidden_layers;
        for layer in 0..=layers {
            let w = graph.param(&Self::param_name(layer, layers, true));
            let b = graph.param(&Self::param_name(layer, layers, false));
            h = graph.matmul(h, w);
            h = graph.add_row(h, b);
            if layer < layers {
                h = graph.gelu(h);
            }
        }
        h
    }

    pub fn bind_params(&self, bindings: &mut Bindings) {
        for (k, v) in &self.params {
            bindings.insert(k.clone(), v.clone());
        }
    }

    /// Forward pass on a batch of coordinates (n x 2) -> n x D.
    pub fn forward_batch(&self, coords: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let c = g.constant(coords.clone());
        let out = self.build_graph(&mut g, c);
        let mut bind = Bindings::new();
        self.bind_params(&mut bind);
        g.forward(&bind).unwrap().value(out).clone()
    }

    /// M(x, y) as a length-D vector.
    pub fn forward(&self, x: f64, y: f64) -> Vec<f64> {
        let coords = Tensor::new(vec![1, 2], vec![x, y]).unwrap();
        self.forward_batch(&coords).data().to_vec()
    }

    /// Checksum of the frozen Fourier matrix (bit pattern sum), used to
    /// assert it never changes across training.
    pub fn fourier_checksum(&self) -> u64 {
        self.fourier_matrix
            .data()
            .iter()
            .fold(0u64, |acc, v| acc.wrapping_mul(31).wrapping_add(v.to_bits()))
    }
}

/// All 576 grid coordinates as a (rows*cols) x 2 tensor, row-major.
pub fn grid_coords_tensor() -> Tensor {
    let mut data = Vec::with_capacity(GRID_ROWS * GRID_COLS * 2);
    for i in 0..GRID_ROWS {
        for j in 0..GRID_COLS {
            let (x, y) = grid_coordinate(i, j).unwrap();
            data.push(x);
            data.push(y);
        }
    }
    Tensor::new(vec![GRID_ROWS * GRID_COLS, 2], data).unwrap()
}

/// Mean absolute (L1) and mean squared (L2) grid residuals between the MLP
/// and the table, averaged over components and grid points.
pub fn grid_residual(mlp: &CoordinateMlp, table: &PositionalTable) -> Result<(f64, f64), QtpError> {
    if table.rows != GRID_ROWS || table.cols != GRID_COLS {
        return Err(QtpError::InvalidArgument(format!(
            "residual requires a {GRID_ROWS}x{GRID_COLS} table, got {}x{}",
            table.rows, table.cols
        )));
    }
    if table.dim != mlp.config.out_dim {
        return Err(QtpError::Shape(format!(
            "table dim {} vs mlp out dim {}",
            table.dim, mlp.config.out_dim
        )));
    }
    let pred = mlp.forward_batch(&grid_coords_tensor());
    let mut l1 = 0.0;
    let mut l2 = 0.0;
    for (p, t) in pred.data().iter().zip(&table.values) {
        let d = p - t;
        l1 += d.abs();
        l2 += d * d;
    }
    let n = table.values.len() as f64;
    Ok((l1 / n, l2 / n))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InterpMethod {
    Bilinear,
    Bicubic,
}

/// Interpolation weights over flattened table nodes for a query point.
/// Bilinear touches up to 4 nodes, Catmull-Rom bicubic up to 16; edge
/// handling is by clamped node indices. Weights for coincident clamped
/// nodes are accumulated.
pub fn interp_weights(
    rows: usize,
    cols: usize,
    x: f64,
    y: f64,
    method: InterpMethod,
) -> Vec<(usize, f64)> {
    let u = (x + 1.0) * (rows - 1) as f64 / 2.0;
    let v = (y + 1.0) * (cols - 1) as f64 / 2.0;
    let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
    let clamp = |idx: i64, n: usize| idx.clamp(0, n as i64 - 1) as usize;
    match method {
        InterpMethod::Bilinear => {
            let i0 = u.floor();
            let j0 = v.floor();
            let fu = u - i0;
            let fv = v - j0;
            for (di, wi) in [(0i64, 1.0 - fu), (1, fu)] {
                if wi == 0.0 {
                    continue;
                }
                for (dj, wj) in [(0i64, 1.0 - fv), (1, fv)] {
                    if wj == 0.0 {
                        continue;
                    }
                    let i = clamp(i0 as i64 + di, rows);
                    let j = clamp(j0 as i64 + dj, cols);
                    *acc.entry(i * cols + j).or_insert(0.0) += wi * wj;
                }
            }
        }
        InterpMethod::Bicubic => {
            let i0 = u.floor() as i64;
            let j0 = v.floor() as i64;
            let fu = u - i0 as f64;
            let fv = v - j0 as f64;
            for di in -1..=2i64 {
                let wi = crate::image::catmull_rom(di as f64 - fu);
                if wi == 0.0 {
                    continue;
                }
                for dj in -1..=2i64 {
                    let wj = crate::image::catmull_rom(dj as f64 - fv);
                    if wj == 0.0 {
                        continue;
                    }
                    let i = clamp(i0 + di, rows);
                    let j = clamp(j0 + dj, cols);
                    *acc.entry(i * cols + j).or_insert(0.0) += wi * wj;
                }
            }
        }
    }
    acc.into_iter().collect()
}

/// Interpolate the table at (x, y) in [-1,1]^2.
pub fn interpolate_table(
    table: &PositionalTable,
    x: f64,
    y: f64,
    method: InterpMethod,
) -> Vec<f64> {
    let weights = interp_weights(table.rows, table.cols, x, y, method);
    let mut out = vec![0.0; table.dim];
    for (idx, w) in weights {
        let node = &table.values[idx * table.dim..(idx + 1) * table.dim];
        for (o, &nv) in out.iter_mut().zip(node) {
            *o += w * nv;
        }
    }
    out
}

pub const QEMB_MAGIC: &[u8; 4] = b"QEMB";
pub const QEMB_VERSION: u32 = 1;
pub const QMLP_MAGIC: &[u8; 4] = b"QMLP";
pub const QMLP_VERSION: u32 = 1;

/// Save a table: magic "QEMB", version, rows, cols, dim (u32 LE), then
/// rows*cols*dim little-endian f32, row-major.
pub fn save_table(table: &PositionalTable, path: &Path) -> Result<(), QtpError> {
    let mut buf = Vec::with_capacity(16 + table.values.len() * 4);
    buf.extend_from_slice(QEMB_MAGIC);
    buf.extend_from_slice(&QEMB_VERSION.to_le_bytes());
    buf.extend_from_slice(&(table.rows as u32).to_le_bytes());
    buf.extend_from_slice(&(table.cols as u32).to_le_bytes());
    buf.extend_from_slice(&(table.dim as u32).to_le_bytes());
    for &v in &table.values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_table(path: &Path) -> Result<PositionalTable, QtpError> {
    let buf = std::fs::read(path)?;
    let fmt = |detail: String| QtpError::Format {
        path: path.display().to_string(),
        detail,
    };
    if buf.len() < 20 || &buf[0..4] != QEMB_MAGIC {
        return Err(fmt("bad magic".into()));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != QEMB_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let rows = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(buf[12..16].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(buf[16..20].try_into().unwrap()) as usize;
    let expected = 20 + rows * cols * dim * 4;
    if buf.len() != expected {
        return Err(fmt(format!(
            "size {} does not match header ({expected} expected)",
            buf.len()
        )));
    }
    let mut values = Vec::with_capacity(rows * cols * dim);
    for chunk in buf[20..].chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    PositionalTable::new(rows, cols, dim, values)
}

/// Save an MLP checkpoint: magic "QMLP", version, config block
/// (fourier_features, hidden_layers, hidden_width, out_dim as u32 LE,
/// init_seed u64 LE, fourier_scale f64 LE), the frozen Fourier matrix, then
/// parameters layer by layer (weight then bias), all little-endian f32.
pub fn save_mlp(mlp: &CoordinateMlp, path: &Path) -> Result<(), QtpError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(QMLP_MAGIC);
    buf.extend_from_slice(&QMLP_VERSION.to_le_bytes());
    let c = &mlp.config;
    for v in [c.fourier_features, c.hidden_layers, c.hidden_width, c.out_dim] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&c.init_seed.to_le_bytes());
    buf.extend_from_slice(&c.fourier_scale.to_le_bytes());
    for &v in mlp.fourier_matrix.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for layer in 0..=c.hidden_layers {
        for weight in [true, false] {
            let name = CoordinateMlp::param_name(layer, c.hidden_layers, weight);
            for &v in mlp.params[&name].data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_mlp(path: &Path) -> Result<CoordinateMlp, QtpError> {
    let buf = std::fs::read(path)?;
    let fmt = |detail: String| QtpError::Format {
        path: path.display().to_string(),
        detail,
    };
    if buf.len() < 40 || &buf[0..4] != QMLP_MAGIC {
        return Err(fmt("bad magic".into()));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != QMLP_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let u = |off: usize| u32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as usize;
    let config = MlpConfig {
        fourier_features: u(8),
        hidden_layers: u(12),
        hidden_width: u(16),
        out_dim: u(20),
        init_seed: u64::from_le_bytes(buf[24..32].try_into().unwrap()),
        fourier_scale: f64::from_le_bytes(buf[32..40].try_into().unwrap()),
    };
    let mut off = 40;
    let mut take = |n: usize| -> Result<Vec<f64>, QtpError> {
        let bytes = n * 4;
        if off + bytes > buf.len() {
            return Err(QtpError::Format {
                path: path.display().to_string(),
                detail: "truncated parameter block".into(),
            });
        }
        let out = buf[off..off + bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        off += bytes;
        Ok(out)
    };
    let fourier_matrix = Tensor::new(
        vec![config.fourier_features, 2],
        take(config.fourier_features * 2)?,
    )?;
    let mut params = BTreeMap::new();
    for (layer, (fan_in, fan_out)) in CoordinateMlp::layer_dims(&config).iter().enumerate() {
        params.insert(
            CoordinateMlp::param_name(layer, config.hidden_layers, true),
            Tensor::new(vec![*fan_in, *fan_out], take(fan_in * fan_out)?)?,
        );
        params.insert(
            CoordinateMlp::param_name(layer, config.hidden_layers, false),
            Tensor::new(vec![*fan_out], take(*fan_out)?)?,
        );
    }
    if off != buf.len() {
        return Err(fmt(format!("{} trailing bytes", buf.len() - off)));
    }
    Ok(CoordinateMlp {
        config,
        fourier_matrix,
        params,
    })
}
