//! A small ViT-style reference encoder over patch layouts. Patches are
//! linearly embedded, positional vectors added, a CLS token prepended, and a
//! stack of pre-norm attention/MLP blocks followed by a final layer norm
//! produces the CLS embedding.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::QtpError;
use crate::graph::{Bindings, Graph, NodeId};
use crate::image::PATCH_SIZE;
use crate::posenc::{interp_weights, CoordinateMlp, InterpMethod, PositionalTable};
use crate::quadtree::PatchLayout;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub init_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            depth: 2,
            width: 64,
            heads: 4,
            patch_size: PATCH_SIZE,
            init_seed: 0,
        }
    }
}

impl EncoderConfig {
    /// Flattened patch pixel count (patch_size^2 x 3 channels).
    pub fn input_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// Where the positional vector for each token comes from.
#[derive(Clone, Copy, Debug)]
pub enum PositionalSource<'a> {
    /// Direct table lookup; every token center must coincide with a grid
    /// node. Used for the frozen-grid teacher path.
    TableGrid(&'a PositionalTable),
    TableBilinear(&'a PositionalTable),
    TableBicubic(&'a PositionalTable),
    Mlp(&'a CoordinateMlp),
    /// All-zero positions. Position gradients are undefined for this source.
    Zero,
}

impl PositionalSource<'_> {
    pub fn kind_name(&self) -> &'static str {
        match self {
            PositionalSource::TableGrid(_) => "table_grid",
            PositionalSource::TableBilinear(_) => "table_bilinear",
            PositionalSource::TableBicubic(_) => "table_bicubic",
            PositionalSource::Mlp(_) => "mlp",
            PositionalSource::Zero => "zero",
        }
    }

    /// Names of the trainable positional parameters for this source.
    pub fn param_names(&self) -> Result<Vec<String>, QtpError> {
        match self {
            PositionalSource::Zero => Err(QtpError::InvalidArgument(
                "the zero positional source has no parameters".into(),
            )),
            PositionalSource::Mlp(mlp) => Ok(mlp.params.keys().cloned().collect()),
            _ => Ok(vec!["pos.table".to_string()]),
        }
    }
}

/// Encoder outputs: the CLS vector and the per-token matrix (N x D).
#[derive(Clone, Debug)]
pub struct Embeddings {
    pub cls: Vec<f64>,
    pub tokens: Tensor,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: BTreeMap<String, Tensor>,
}

fn block_param_names(block: usize) -> Vec<(String, &'static str)> {
    let mut names = Vec::new();
    for stem in [
        "ln1.g", "ln1.b", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "attn.bq", "attn.bk",
        "attn.bv", "attn.bo", "ln2.g", "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
    ] {
        names.push((format!("enc.b{block}.{stem}"), stem));
    }
    names
}

impl Encoder {
    pub fn init(config: EncoderConfig) -> Result<Self, QtpError> {
        if config.width == 0 || config.heads == 0 || config.width % config.heads != 0 {
            return Err(QtpError::InvalidArgument(format!(
                "width {} not divisible by heads {}",
                config.width, config.heads
            )));
        }
        if config.patch_size == 0 {
            return Err(QtpError::InvalidArgument("patch size must be >= 1".into()));
        }
        let d = config.width;
        let input_dim = config.input_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut gauss = |shape: Vec<usize>, std: f64| {
            let dist = Normal::new(0.0, std).unwrap();
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
            Tensor::new(shape, data).unwrap()
        };
        let mut params = BTreeMap::new();
        params.insert(
            "enc.patch.w".to_string(),
            gauss(vec![input_dim, d], 1.0 / (input_dim as f64).sqrt()),
        );
        params.insert("enc.patch.b".to_string(), Tensor::zeros(vec![d]));
        params.insert("enc.cls".to_string(), gauss(vec![1, d], 0.02));
        let proj_std = 1.0 / (d as f64).sqrt();
        let hidden = 4 * d;
        for block in 0..config.depth {
            for (name, stem) in block_param_names(block) {
                let t = match stem {
                    "ln1.g" | "ln2.g" => Tensor::new(vec![d], vec![1.0; d]).unwrap(),
                    "ln1.b" | "ln2.b" => Tensor::zeros(vec![d]),
                    "attn.wq" | "attn.wk" | "attn.wv" | "attn.wo" => gauss(vec![d, d], proj_std),
                    "attn.bq" | "attn.bk" | "attn.bv" | "attn.bo" => Tensor::zeros(vec![d]),
                    "mlp.w1" => gauss(vec![d, hidden], proj_std),
                    "mlp.b1" => Tensor::zeros(vec![hidden]),
                    "mlp.w2" => gauss(vec![hidden, d], 1.0 / (hidden as f64).sqrt()),
                    "mlp.b2" => Tensor::zeros(vec![d]),
                    other => unreachable!("{other}"),
                };
                params.insert(name, t);
            }
        }
        params.insert(
            "enc.ln.g".to_string(),
            Tensor::new(vec![d], vec![1.0; d]).unwrap(),
        );
        params.insert("enc.ln.b".to_string(), Tensor::zeros(vec![d]));
        Ok(Encoder { config, params })
    }

    pub fn bind_params(&self, bindings: &mut Bindings) {
        for (k, v) in &self.params {
            bindings.insert(k.clone(), v.clone());
        }
    }

    /// Token pixel matrix (N x input_dim), rows in layout order.
    pub fn patch_matrix(&self, layout: &PatchLayout) -> Result<Tensor, QtpError> {
        let input_dim = self.config.input_dim();
        if layout.geometry.patch_size != self.config.patch_size {
            return Err(QtpError::Shape(format!(
                "layout patch size {} does not match encoder patch size {}",
                layout.geometry.patch_size, self.config.patch_size
            )));
        }
        let n = layout.entries.len();
        let mut data = Vec::with_capacity(n * input_dim);
        for e in &layout.entries {
            if e.pixels.len() != input_dim {
                return Err(QtpError::Shape(format!(
                    "patch entry has {} values, expected {input_dim}",
                    e.pixels.len()
                )));
            }
            data.extend_from_slice(&e.pixels);
        }
        Tensor::new(vec![n, input_dim], data)
    }

    /// Token center coordinates (N x 2).
    pub fn coords_matrix(layout: &PatchLayout) -> Tensor {
        let n = layout.entries.len();
        let mut data = Vec::with_capacity(n * 2);
        for e in &layout.entries {
            data.push(e.center_x);
            data.push(e.center_y);
        }
        Tensor::new(vec![n, 2], data).unwrap()
    }

    /// Append the positional-vector subgraph for the layout: an N x D node.
    /// Table sources bind the flattened table as the trainable parameter
    /// "pos.table" so gradients reach every node; the MLP source shares the
    /// MLP's own parameter names.
    fn positions_node(
        &self,
        g: &mut Graph,
        layout: &PatchLayout,
        source: PositionalSource,
        bindings: &mut Bindings,
    ) -> Result<NodeId, QtpError> {
        let n = layout.entries.len();
        let d = self.config.width;
        let table_weights = |table: &PositionalTable,
                             method: Option<InterpMethod>|
         -> Result<Tensor, QtpError> {
            if table.dim != d {
                return Err(QtpError::Shape(format!(
                    "table dim {} does not match encoder width {d}",
                    table.dim
                )));
            }
            let nodes = table.rows * table.cols;
            let mut w = Tensor::zeros(vec![n, nodes]);
            for (row, e) in layout.entries.iter().enumerate() {
                match method {
                    Some(m) => {
                        for (idx, wt) in
                            interp_weights(table.rows, table.cols, e.center_x, e.center_y, m)
                        {
                            w.data_mut()[row * nodes + idx] = wt;
                        }
                    }
                    None => {
                        let u = (e.center_x + 1.0) * (table.rows - 1) as f64 / 2.0;
                        let v = (e.center_y + 1.0) * (table.cols - 1) as f64 / 2.0;
                        let (iu, iv) = (u.round(), v.round());
                        if (u - iu).abs() > 1e-9 || (v - iv).abs() > 1e-9 {
                            return Err(QtpError::InvalidArgument(format!(
                                "token center ({}, {}) is not on a grid node",
                                e.center_x, e.center_y
                            )));
                        }
                        let idx = iu as usize * table.cols + iv as usize;
                        w.data_mut()[row * nodes + idx] = 1.0;
                    }
                }
            }
            Ok(w)
        };
        match source {
            PositionalSource::Zero => Ok(g.constant(Tensor::zeros(vec![n, d]))),
            PositionalSource::Mlp(mlp) => {
                if mlp.config.out_dim != d {
                    return Err(QtpError::Shape(format!(
                        "mlp out dim {} does not match encoder width {d}",
                        mlp.config.out_dim
                    )));
                }
                let coords = g.constant(Self::coords_matrix(layout));
                mlp.bind_params(bindings);
                Ok(mlp.build_graph(g, coords))
            }
            PositionalSource::TableGrid(t)
            | PositionalSource::TableBilinear(t)
            | PositionalSource::TableBicubic(t) => {
                let method = match source {
                    PositionalSource::TableBilinear(_) => Some(InterpMethod::Bilinear),
                    PositionalSource::TableBicubic(_) => Some(InterpMethod::Bicubic),
                    _ => None,
                };
                let weights = g.constant(table_weights(t, method)?);
                let table_node = g.param("pos.table");
                bindings.insert("pos.table".to_string(), t.as_tensor());
                Ok(g.matmul(weights, table_node))
            }
        }
    }

    /// Append the full encoder subgraph, returning the nodes holding the CLS
    /// embedding (a length-D row) and the final normalized sequence
    /// ((N+1) x D, CLS first). Parameter values for the encoder, the
    /// positional source, and the pixel constant are inserted into
    /// `bindings`.
    pub fn build_cls_graph(
        &self,
        g: &mut Graph,
        layout: &PatchLayout,
        source: PositionalSource,
        bindings: &mut Bindings,
    ) -> Result<(NodeId, NodeId), QtpError> {
        if layout.entries.is_empty() {
            return Err(QtpError::InvalidArgument("empty patch layout".into()));
        }
        self.bind_params(bindings);
        let pixels = g.constant(self.patch_matrix(layout)?);
        let wp = g.param("enc.patch.w");
        let bp = g.param("enc.patch.b");
        let mut tokens = g.matmul(pixels, wp);
        tokens = g.add_row(tokens, bp);
        let pos = self.positions_node(g, layout, source, bindings)?;
        tokens = g.add(tokens, pos);
        let cls = g.param("enc.cls");
        let mut x = g.concat_rows(cls, tokens);
        for block in 0..self.config.depth {
            let p = |g: &mut Graph, stem: &str| g.param(&format!("enc.b{block}.{stem}"));
            let normed = g.layer_norm_rows(x);
            let g1 = p(g, "ln1.g");
            let b1 = p(g, "ln1.b");
            let scaled = g.mul_row(normed, g1);
            let shifted = g.add_row(scaled, b1);
            let (wq, wk, wv, wo) =
                (p(g, "attn.wq"), p(g, "attn.wk"), p(g, "attn.wv"), p(g, "attn.wo"));
            let (bq, bk, bv, bo) =
                (p(g, "attn.bq"), p(g, "attn.bk"), p(g, "attn.bv"), p(g, "attn.bo"));
            let attn = g.attention(shifted, wq, wk, wv, wo, bq, bk, bv, bo, self.config.heads, true);
            x = g.add(x, attn);
            let normed = g.layer_norm_rows(x);
            let g2 = p(g, "ln2.g");
            let b2 = p(g, "ln2.b");
            let scaled = g.mul_row(normed, g2);
            let shifted = g.add_row(scaled, b2);
            let w1 = p(g, "mlp.w1");
            let bm1 = p(g, "mlp.b1");
            let mut h = g.matmul(shifted, w1);
            h = g.add_row(h, bm1);
            h = g.gelu(h);
            let w2 = p(g, "mlp.w2");
            let bm2 = p(g, "mlp.b2");
            h = g.matmul(h, w2);
            h = g.add_row(h, bm2);
            x = g.add(x, h);
        }
        let normed = g.layer_norm_rows(x);
        let gf = g.param("enc.ln.g");
        let bf = g.param("enc.ln.b");
        let scaled = g.mul_row(normed, gf);
        let shifted = g.add_row(scaled, bf);
        let cls_row = g.row(shifted, 0);
        Ok((cls_row, shifted))
    }

    /// CLS and token embeddings of a layout under the given positional
    /// source.
    pub fn encode(
        &self,
        layout: &PatchLayout,
        source: PositionalSource,
    ) -> Result<Embeddings, QtpError> {
        let mut g = Graph::new();
        let mut bindings = Bindings::new();
        let (cls, seq) = self.build_cls_graph(&mut g, layout, source, &mut bindings)?;
        let eval = g.forward(&bindings)?;
        let cls = eval.value(cls).data().to_vec();
        let seq = eval.value(seq);
        let d = self.config.width;
        let n = seq.rows() - 1;
        let tokens = Tensor::new(vec![n, d], seq.data()[d..].to_vec())?;
        Ok(Embeddings { cls, tokens })
    }

    /// Gradient of CS(CLS_a, CLS_b) with respect to the positional
    /// parameters shared by both encodes: the cosine similarity plus the
    /// gradient flattened in parameter-name order.
    pub fn encode_grad_wrt_positions(
        &self,
        a: &PatchLayout,
        b: &PatchLayout,
        source: PositionalSource,
    ) -> Result<(f64, Vec<f64>), QtpError> {
        let pos_names = source.param_names()?;
        let mut g = Graph::new();
        let mut bindings = Bindings::new();
        let (cls_a, _) = self.build_cls_graph(&mut g, a, source, &mut bindings)?;
        let (cls_b, _) = self.build_cls_graph(&mut g, b, source, &mut bindings)?;
        let sim = g.cosine_sim(cls_a, cls_b);
        let eval = g.forward(&bindings)?;
        let grads = g.backward(&eval, sim, &bindings)?;
        let mut flat = Vec::new();
        for name in &pos_names {
            let t = grads
                .params
                .get(name)
                .ok_or_else(|| QtpError::MissingBinding(name.clone()))?;
            flat.extend_from_slice(t.data());
        }
        Ok((eval.value(sim).scalar_value(), flat))
    }

    /// Cosine similarity of two layouts' CLS embeddings plus the L2 norm of
    /// its gradient with respect to the positional parameters.
    pub fn cls_similarity_with_position_grad(
        &self,
        a: &PatchLayout,
        b: &PatchLayout,
        source: PositionalSource,
    ) -> Result<(f64, f64), QtpError> {
        let (sim, flat) = self.encode_grad_wrt_positions(a, b, source)?;
        let norm = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok((sim, norm))
    }

    /// Cosine similarity of the CLS embeddings of two layouts.
    pub fn cls_similarity(
        &self,
        a: &PatchLayout,
        b: &PatchLayout,
        source: PositionalSource,
    ) -> Result<f64, QtpError> {
        let ea = self.encode(a, source)?;
        let eb = self.encode(b, source)?;
        Ok(crate::graph::cosine_sim(&ea.cls, &eb.cls))
    }
}

pub const QENC_MAGIC: &[u8; 4] = b"QENC";
pub const QENC_VERSION: u32 = 1;

/// Save encoder weights: magic "QENC", version, depth, width, heads,
/// patch_size (u32 LE), then parameters in lexicographic name order as
/// little-endian f32.
pub fn save_encoder(enc: &Encoder, path: &Path) -> Result<(), QtpError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(QENC_MAGIC);
    buf.extend_from_slice(&QENC_VERSION.to_le_bytes());
    for v in [
        enc.config.depth,
        enc.config.width,
        enc.config.heads,
        enc.config.patch_size,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for t in enc.params.values() {
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_encoder(path: &Path) -> Result<Encoder, QtpError> {
    let buf = std::fs::read(path)?;
    let fmt = |detail: String| QtpError::Format {
        path: path.display().to_string(),
        detail,
    };
    if buf.len() < 24 || &buf[0..4] != QENC_MAGIC {
        return Err(fmt("bad magic".into()));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != QENC_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let u = |off: usize| u32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as usize;
    let config = EncoderConfig {
        depth: u(8),
        width: u(12),
        heads: u(16),
        patch_size: u(20),
        init_seed: 0,
    };
    // Build a skeleton with the right shapes, then overwrite the values.
    let mut enc = Encoder::init(config)?;
    let mut off = 24;
    for (name, t) in enc.params.iter_mut() {
        let bytes = t.len() * 4;
        if off + bytes > buf.len() {
            return Err(QtpError::Format {
                path: path.display().to_string(),
                detail: format!("truncated at parameter {name}"),
            });
        }
        for (dst, chunk) in t
            .data_mut()
            .iter_mut()
            .zip(buf[off..off + bytes].chunks_exact(4))
        {
            *dst = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
        off += bytes;
    }
    if off != buf.len() {
        return Err(fmt(format!("{} trailing bytes", buf.len() - off)));
    }
    Ok(enc)
}
