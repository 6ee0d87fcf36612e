//! Training loop for the coordinate MLP against a frozen encoder and
//! positional table: Loss = L_CLS + gamma * R, Adam with a cosine schedule,
//! deterministic shuffling and merge draws, and bit-exact checkpoint resume.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::encoder::{Encoder, PositionalSource};
use crate::error::QtpError;
use crate::graph::{Bindings, Graph};
use crate::image::{crop_to_patch_multiple, load_image_dir, resize, resize_exact, Image,
    PatchGeometry, ResizeMethod, PATCH_SIZE};
use crate::optim::AdamState;
use crate::posenc::{grid_coords_tensor, CoordinateMlp, MlpConfig, PositionalTable};
use crate::quadtree::{patchify_image, SelectionPolicy};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub gamma: f64,
    pub max_short_edge: usize,
    pub train_merge_prob: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub dataset: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 14,
            base_lr: 7.5e-5,
            gamma: 1.0,
            max_short_edge: 560,
            train_merge_prob: 0.10,
            seed: 0,
            checkpoint_every: 0,
            dataset: PathBuf::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), QtpError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(QtpError::InvalidArgument(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if self.gamma < 0.0 {
            return Err(QtpError::InvalidArgument("gamma must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.train_merge_prob) {
            return Err(QtpError::InvalidArgument(
                "train_merge_prob must be in [0,1]".into(),
            ));
        }
        Ok(())
    }

    pub fn set_field(&mut self, key: &str, value: &str) -> Result<(), QtpError> {
        let bad = |what: &str| {
            QtpError::InvalidArgument(format!("bad value '{value}' for config key {what}"))
        };
        match key {
            "epochs" => self.epochs = value.parse().map_err(|_| bad(key))?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad(key))?,
            "base_lr" => self.base_lr = value.parse().map_err(|_| bad(key))?,
            "gamma" => self.gamma = value.parse().map_err(|_| bad(key))?,
            "max_short_edge" => self.max_short_edge = value.parse().map_err(|_| bad(key))?,
            "train_merge_prob" => self.train_merge_prob = value.parse().map_err(|_| bad(key))?,
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            "checkpoint_every" => self.checkpoint_every = value.parse().map_err(|_| bad(key))?,
            "dataset" => self.dataset = PathBuf::from(value),
            other => {
                return Err(QtpError::InvalidArgument(format!(
                    "unknown config key '{other}'"
                )))
            }
        }
        Ok(())
    }

    /// Line-based key=value file; '#' starts a comment, blank lines ignored.
    pub fn from_file(path: &Path) -> Result<Self, QtpError> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| QtpError::Format {
                path: path.display().to_string(),
                detail: format!("line {}: expected key=value", lineno + 1),
            })?;
            cfg.set_field(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub const LOSS_CSV_HEADER: &str = "step,l_cls,r_l1,r_l2,grad_norm_positions,lr,total";

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub l_cls: f64,
    pub r_l1: f64,
    pub r_l2: f64,
    pub grad_norm_positions: f64,
    pub lr: f64,
    pub total: f64,
}

impl LossReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.l_cls, self.r_l1, self.r_l2, self.grad_norm_positions, self.lr,
            self.total
        )
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        ^ a.wrapping_mul(0x9E3779B97F4A7C15)
        ^ b.wrapping_mul(0xC2B2AE3D27D4EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Image visit order for one epoch, a seeded shuffle of 0..n.
pub fn shuffle_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch, 0x5157_4c45));
    order.shuffle(&mut rng);
    order
}

/// Random-merge policy for one (epoch, image) pair; fresh draws every epoch.
pub fn merge_policy(cfg: &TrainConfig, epoch: u64, image_idx: usize) -> SelectionPolicy {
    SelectionPolicy::Random {
        p: cfg.train_merge_prob,
        seed: mix(cfg.seed, epoch, image_idx as u64 + 1),
    }
}

/// Resize so the short edge is min(native, max_short_edge) and crop to a
/// patch multiple. Images already at or below the cap keep native size.
pub fn native_capped(img: &Image, max_short_edge: usize) -> Result<(Image, PatchGeometry), QtpError> {
    let short = img.height().min(img.width());
    let scaled = if short > max_short_edge {
        resize(img, max_short_edge, ResizeMethod::Bicubic)?
    } else {
        img.clone()
    };
    crop_to_patch_multiple(&scaled, PATCH_SIZE)
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Reference-path CLS embedding: the image rendered at exactly 336x336
/// (24x24 patches on the grid), patchified without merging, encoded with
/// frozen grid-table positions.
pub fn reference_cls(
    img: &Image,
    table: &PositionalTable,
    enc: &Encoder,
) -> Result<Vec<f64>, QtpError> {
    let square = resize_exact(img, 336, 336, ResizeMethod::Bicubic)?;
    let (cropped, geom) = crop_to_patch_multiple(&square, PATCH_SIZE)?;
    let layout = patchify_image(&cropped, &geom, &SelectionPolicy::NeverMerge)?;
    Ok(enc.encode(&layout, PositionalSource::TableGrid(table))?.cls)
}

/// CLS distillation loss for one image: L2 distance between the reference-path CLS and
/// the student path (native-capped rendering, the given merge policy, MLP
/// positions).
pub fn cls_loss(
    img: &Image,
    policy: &SelectionPolicy,
    mlp: &CoordinateMlp,
    table: &PositionalTable,
    enc: &Encoder,
    max_short_edge: usize,
) -> Result<f64, QtpError> {
    let target = reference_cls(img, table, enc)?;
    let (native, geom) = native_capped(img, max_short_edge)?;
    let layout = patchify_image(&native, &geom, policy)?;
    let student = enc.encode(&layout, PositionalSource::Mlp(mlp))?.cls;
    Ok(l2_distance(&target, &student))
}

/// Per-image forward/backward results for one training step.
struct ImageStep {
    l_cls: f64,
    grad_norm: f64,
    grads: BTreeMap<String, Tensor>,
}

fn image_step(
    native: &Image,
    geom: &PatchGeometry,
    target_cls: &[f64],
    policy: &SelectionPolicy,
    mlp: &CoordinateMlp,
    enc: &Encoder,
) -> Result<ImageStep, QtpError> {
    let layout = patchify_image(native, geom, policy)?;
    let mut g = Graph::new();
    let mut bind = Bindings::new();
    let (cls_p, _) = enc.build_cls_graph(&mut g, &layout, PositionalSource::Mlp(mlp), &mut bind)?;
    let target = g.constant(Tensor::new(vec![target_cls.len()], target_cls.to_vec())?);
    let diff = g.sub(cls_p, target);
    let dist = g.l2_norm(diff);
    let sim = g.cosine_sim(cls_p, target);
    let eval = g.forward(&bind)?;
    let dist_grads = g.backward(&eval, dist, &bind)?;
    let sim_grads = g.backward(&eval, sim, &bind)?;
    let mut grads = BTreeMap::new();
    let mut norm_sq = 0.0;
    for name in mlp.params.keys() {
        let gd = dist_grads
            .params
            .get(name)
            .ok_or_else(|| QtpError::MissingBinding(name.clone()))?;
        grads.insert(name.clone(), gd.clone());
        if let Some(gs) = sim_grads.params.get(name) {
            norm_sq += gs.data().iter().map(|v| v * v).sum::<f64>();
        }
    }
    Ok(ImageStep {
        l_cls: eval.value(dist).scalar_value(),
        grad_norm: norm_sq.sqrt(),
        grads,
    })
}

/// Grid residual values and gradient: (r_l1, r_l2, d r_l1 / d mlp params).
fn residual_step(
    mlp: &CoordinateMlp,
    table: &PositionalTable,
) -> Result<(f64, f64, BTreeMap<String, Tensor>), QtpError> {
    let mut g = Graph::new();
    let coords = g.constant(grid_coords_tensor());
    let pred = mlp.build_graph(&mut g, coords);
    let target = g.constant(table.as_tensor());
    let diff = g.sub(pred, target);
    let r1 = g.abs_mean(diff);
    let r2 = g.sq_mean(diff);
    let mut bind = Bindings::new();
    mlp.bind_params(&mut bind);
    let eval = g.forward(&bind)?;
    let grads = g.backward(&eval, r1, &bind)?;
    Ok((
        eval.value(r1).scalar_value(),
        eval.value(r2).scalar_value(),
        grads.params,
    ))
}

/// Mutable training state; `adam.step` counts completed optimizer steps, so
/// a saved state resumes exactly where it left off.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub mlp: CoordinateMlp,
    pub adam: AdamState,
}

impl TrainState {
    pub fn fresh(mlp: CoordinateMlp, cfg: &TrainConfig, n_images: usize) -> Self {
        let total = (cfg.epochs as u64) * steps_per_epoch(n_images, cfg.batch_size) as u64;
        TrainState {
            mlp,
            adam: AdamState::new(cfg.base_lr, total),
        }
    }
}

pub fn steps_per_epoch(n_images: usize, batch_size: usize) -> usize {
    n_images.div_ceil(batch_size)
}

/// Run (or continue) training over in-memory images. Emits one LossReport
/// per optimizer step through `on_report`; writes checkpoints to
/// `checkpoint_prefix` every `checkpoint_every` steps. A non-finite loss
/// aborts before updating parameters or writing another checkpoint.
pub fn train_on_images(
    cfg: &TrainConfig,
    images: &[Image],
    table: &PositionalTable,
    enc: &Encoder,
    state: &mut TrainState,
    checkpoint_prefix: Option<&Path>,
    mut on_report: impl FnMut(&LossReport),
) -> Result<(), QtpError> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(QtpError::EmptyDirectory(cfg.dataset.display().to_string()));
    }
    let n = images.len();
    let spe = steps_per_epoch(n, cfg.batch_size);
    let total_steps = (cfg.epochs * spe) as u64;
    if state.adam.schedule.total_steps != total_steps {
        return Err(QtpError::InvalidArgument(format!(
            "state was created for {} total steps, config implies {total_steps}",
            state.adam.schedule.total_steps
        )));
    }

    // Frozen per-image work: native-capped renderings and reference CLS.
    let prepared: Vec<((Image, PatchGeometry), Vec<f64>)> = images
        .par_iter()
        .map(|img| {
            let native = native_capped(img, cfg.max_short_edge)?;
            let target = reference_cls(img, table, enc)?;
            Ok(((native.0, native.1), target))
        })
        .collect::<Result<_, QtpError>>()?;

    while state.adam.step < total_steps {
        let s = state.adam.step;
        let epoch = s / spe as u64;
        let batch_index = (s % spe as u64) as usize;
        let order = shuffle_order(n, cfg.seed, epoch);
        let lo = batch_index * cfg.batch_size;
        let hi = (lo + cfg.batch_size).min(n);
        let batch = &order[lo..hi];

        let results: Vec<ImageStep> = batch
            .par_iter()
            .map(|&idx| {
                let ((native, geom), target) = &prepared[idx];
                let policy = merge_policy(cfg, epoch, idx);
                image_step(native, geom, target, &policy, &state.mlp, enc)
            })
            .collect::<Result<_, QtpError>>()?;

        let m = results.len() as f64;
        let l_cls = results.iter().map(|r| r.l_cls).sum::<f64>() / m;
        let grad_norm_positions = results.iter().map(|r| r.grad_norm).sum::<f64>() / m;
        let (r_l1, r_l2, r_grads) = residual_step(&state.mlp, table)?;
        let total = l_cls + cfg.gamma * r_l1;
        if !total.is_finite() {
            return Err(QtpError::NonFiniteLoss(s + 1));
        }

        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for name in state.mlp.params.keys() {
            let mut acc = Tensor::zeros(state.mlp.params[name].shape().to_vec());
            for r in &results {
                acc.add_assign(&r.grads[name]);
            }
            acc.scale_assign(1.0 / m);
            let mut rg = r_grads[name].clone();
            rg.scale_assign(cfg.gamma);
            acc.add_assign(&rg);
            grads.insert(name.clone(), acc);
        }

        let lr = state.adam.current_lr();
        state.adam.step(&mut state.mlp.params, &grads)?;
        let report = LossReport {
            step: state.adam.step,
            l_cls,
            r_l1,
            r_l2,
            grad_norm_positions,
            lr,
            total,
        };
        on_report(&report);
        if let Some(prefix) = checkpoint_prefix {
            if cfg.checkpoint_every > 0 && state.adam.step % cfg.checkpoint_every as u64 == 0 {
                save_checkpoint(prefix, state)?;
            }
        }
    }
    Ok(())
}

/// Load the dataset directory and train.
pub fn train(
    cfg: &TrainConfig,
    table: &PositionalTable,
    enc: &Encoder,
    state: &mut TrainState,
    checkpoint_prefix: Option<&Path>,
    on_report: impl FnMut(&LossReport),
) -> Result<(), QtpError> {
    let dir = load_image_dir(&cfg.dataset)?;
    let images: Vec<Image> = dir.images.into_iter().map(|(_, img)| img).collect();
    train_on_images(cfg, &images, table, enc, state, checkpoint_prefix, on_report)
}

/// Train with Loss = R (the grid residual) only; no images involved.
/// Returns the per-step L1 residual trace (value before each update).
pub fn fit_residual_only(
    mlp: &mut CoordinateMlp,
    table: &PositionalTable,
    steps: usize,
    base_lr: f64,
) -> Result<Vec<f64>, QtpError> {
    let mut adam = AdamState::new(base_lr, steps as u64);
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (r1, _, grads) = residual_step(mlp, table)?;
        if !r1.is_finite() {
            return Err(QtpError::NonFiniteLoss(adam.step + 1));
        }
        trace.push(r1);
        adam.step(&mut mlp.params, &grads)?;
    }
    Ok(trace)
}

pub const QOPT_MAGIC: &[u8; 4] = b"QOPT";
pub const QOPT_VERSION: u32 = 1;

/// Write `{prefix}.qmlp` (interchange weights) and `{prefix}.qopt` (exact
/// f64 resume state: config, step counter, schedule, parameters and Adam
/// moments). Both writes are atomic (temp file + rename).
pub fn save_checkpoint(prefix: &Path, state: &TrainState) -> Result<(), QtpError> {
    let mlp_path = prefix.with_extension("qmlp");
    let opt_path = prefix.with_extension("qopt");
    let tmp = mlp_path.with_extension("qmlp.tmp");
    crate::posenc::save_mlp(&state.mlp, &tmp)?;
    std::fs::rename(&tmp, &mlp_path)?;

    let c = &state.mlp.config;
    let mut buf = Vec::new();
    buf.extend_from_slice(QOPT_MAGIC);
    buf.extend_from_slice(&QOPT_VERSION.to_le_bytes());
    for v in [c.fourier_features, c.hidden_layers, c.hidden_width, c.out_dim] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&c.init_seed.to_le_bytes());
    buf.extend_from_slice(&c.fourier_scale.to_le_bytes());
    buf.extend_from_slice(&state.adam.step.to_le_bytes());
    buf.extend_from_slice(&state.adam.base_lr.to_le_bytes());
    buf.extend_from_slice(&state.adam.schedule.total_steps.to_le_bytes());
    let (first, second) = state.adam.moments();
    for (name, p) in &state.mlp.params {
        for &v in p.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for moments in [first, second] {
            match moments.get(name) {
                Some(t) => {
                    for &v in t.data() {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
                None => buf.extend(std::iter::repeat(0u8).take(p.len() * 8)),
            }
        }
    }
    let tmp = opt_path.with_extension("qopt.tmp");
    std::fs::write(&tmp, buf)?;
    std::fs::rename(&tmp, &opt_path)?;
    Ok(())
}

/// Rebuild the exact training state from `{prefix}.qopt`. The frozen
/// Fourier matrix is re-derived from the stored seed, so the state is
/// bit-identical to the one saved.
pub fn load_checkpoint(prefix: &Path) -> Result<TrainState, QtpError> {
    let opt_path = prefix.with_extension("qopt");
    let buf = std::fs::read(&opt_path)?;
    let fmt = |detail: String| QtpError::Format {
        path: opt_path.display().to_string(),
        detail,
    };
    if buf.len() < 64 || &buf[0..4] != QOPT_MAGIC {
        return Err(fmt("bad magic".into()));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != QOPT_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let u = |off: usize| u32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as usize;
    let u64at = |off: usize| u64::from_le_bytes(buf[off..off + 8].try_into().unwrap());
    let f64at = |off: usize| f64::from_le_bytes(buf[off..off + 8].try_into().unwrap());
    let config = MlpConfig {
        fourier_features: u(8),
        hidden_layers: u(12),
        hidden_width: u(16),
        out_dim: u(20),
        init_seed: u64at(24),
        fourier_scale: f64at(32),
    };
    let step = u64at(40);
    let base_lr = f64at(48);
    let total_steps = u64at(56);

    let mut mlp = CoordinateMlp::init(config);
    let mut adam = AdamState::new(base_lr, total_steps);
    adam.step = step;
    let mut first = BTreeMap::new();
    let mut second = BTreeMap::new();
    let mut off = 64;
    let mut take = |n: usize| -> Result<Vec<f64>, QtpError> {
        let bytes = n * 8;
        if off + bytes > buf.len() {
            return Err(QtpError::Format {
                path: opt_path.display().to_string(),
                detail: "truncated state block".into(),
            });
        }
        let out = buf[off..off + bytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        off += bytes;
        Ok(out)
    };
    let names: Vec<String> = mlp.params.keys().cloned().collect();
    for name in names {
        let shape = mlp.params[&name].shape().to_vec();
        let len = mlp.params[&name].len();
        *mlp.params.get_mut(&name).unwrap() = Tensor::new(shape.clone(), take(len)?)?;
        first.insert(name.clone(), Tensor::new(shape.clone(), take(len)?)?);
        second.insert(name, Tensor::new(shape, take(len)?)?);
    }
    if off != buf.len() {
        return Err(fmt(format!("{} trailing bytes", buf.len() - off)));
    }
    adam.restore_moments(first, second);
    Ok(TrainState { mlp, adam })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::posenc::{grid_coordinate, GRID_COLS, GRID_ROWS};

    fn tiny_encoder() -> Encoder {
        Encoder::init(EncoderConfig {
            depth: 1,
            width: 8,
            heads: 2,
            patch_size: PATCH_SIZE,
            init_seed: 31,
        })
        .unwrap()
    }

    fn tiny_mlp(seed: u64) -> CoordinateMlp {
        CoordinateMlp::init(MlpConfig {
            fourier_features: 4,
            hidden_layers: 1,
            hidden_width: 16,
            out_dim: 8,
            fourier_scale: 2.0,
            init_seed: seed,
        })
    }

    /// Table whose nodes equal the MLP's own outputs at the grid.
    fn table_from_mlp(mlp: &CoordinateMlp) -> PositionalTable {
        let mut values = Vec::new();
        for i in 0..GRID_ROWS {
            for j in 0..GRID_COLS {
                let (x, y) = grid_coordinate(i, j).unwrap();
                values.extend(mlp.forward(x, y));
            }
        }
        PositionalTable::new(GRID_ROWS, GRID_COLS, mlp.config.out_dim, values).unwrap()
    }

    fn smooth_image(h: usize, w: usize) -> Image {
        let mut data = Vec::with_capacity(h * w * 3);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push(
                        (0.5 + 0.4 * ((x + y) as f64 * 0.05 + c as f64).sin()).clamp(0.0, 1.0),
                    );
                }
            }
        }
        Image::new(h, w, data).unwrap()
    }

    #[test]
    fn config_file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.cfg");
        std::fs::write(
            &path,
            "# comment\nepochs = 3\nbatch_size=2\nbase_lr=0.01\ngamma=0.5\nseed=7\ndataset=imgs\n",
        )
        .unwrap();
        let cfg = TrainConfig::from_file(&path).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.batch_size, 2);
        assert_eq!(cfg.base_lr, 0.01);
        assert_eq!(cfg.gamma, 0.5);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.dataset, PathBuf::from("imgs"));
        assert_eq!(cfg.max_short_edge, 560);
        assert_eq!(cfg.train_merge_prob, 0.10);

        std::fs::write(&path, "bogus_key=1\n").unwrap();
        assert!(TrainConfig::from_file(&path).is_err());
        std::fs::write(&path, "epochs ten\n").unwrap();
        assert!(TrainConfig::from_file(&path).is_err());
        std::fs::write(&path, "gamma=-1\n").unwrap();
        assert!(TrainConfig::from_file(&path).is_err());
    }

    #[test]
    fn cls_loss_zero_when_mlp_matches_table_at_336() {
        let enc = tiny_encoder();
        let mlp = tiny_mlp(2);
        let table = table_from_mlp(&mlp);
        let img = smooth_image(336, 336);
        let loss = cls_loss(&img, &SelectionPolicy::NeverMerge, &mlp, &table, &enc, 560).unwrap();
        assert!(loss.abs() <= 1e-12, "{loss}");
    }

    #[test]
    fn cls_loss_matches_two_encode_recomputation() {
        let enc = tiny_encoder();
        let mlp = tiny_mlp(3);
        let table = PositionalTable::synthetic_smooth(8, 4);
        let img = smooth_image(100, 140);
        let policy = SelectionPolicy::Random { p: 0.3, seed: 9 };
        let got = cls_loss(&img, &policy, &mlp, &table, &enc, 560).unwrap();

        let target = reference_cls(&img, &table, &enc).unwrap();
        let (native, geom) = native_capped(&img, 560).unwrap();
        let layout = patchify_image(&native, &geom, &policy).unwrap();
        let student = enc.encode(&layout, PositionalSource::Mlp(&mlp)).unwrap().cls;
        let want = target
            .iter()
            .zip(&student)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
        assert!(got > 0.0);
    }

    #[test]
    fn l2_distance_is_homogeneous() {
        let a = [0.3, -1.2, 0.8];
        let b = [1.0, 0.5, -0.25];
        let doubled: Vec<f64> = a.iter().zip(&b).map(|(x, y)| y + 2.0 * (x - y)).collect();
        let d1 = l2_distance(&a, &b);
        let d2 = l2_distance(&doubled, &b);
        assert!((d2 - 2.0 * d1).abs() <= 1e-12);
    }

    #[test]
    fn native_capped_keeps_small_images() {
        let img = smooth_image(100, 150);
        let (native, geom) = native_capped(&img, 560).unwrap();
        assert_eq!((native.height(), native.width()), (98, 140));
        assert_eq!((geom.rows, geom.cols), (7, 10));
        let big = smooth_image(700, 900);
        let (capped, _) = native_capped(&big, 560).unwrap();
        assert_eq!(capped.height().min(capped.width()), 560);
    }

    fn quick_cfg(epochs: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 2,
            base_lr: lr,
            gamma: 1.0,
            max_short_edge: 560,
            train_merge_prob: 0.10,
            seed: 5,
            checkpoint_every: 0,
            dataset: PathBuf::from("mem"),
        }
    }

    fn run(
        cfg: &TrainConfig,
        images: &[Image],
        table: &PositionalTable,
        enc: &Encoder,
        mlp_seed: u64,
    ) -> (TrainState, Vec<LossReport>) {
        let mut state = TrainState::fresh(tiny_mlp(mlp_seed), cfg, images.len());
        let mut reports = Vec::new();
        train_on_images(cfg, images, table, enc, &mut state, None, |r| {
            reports.push(r.clone())
        })
        .unwrap();
        (state, reports)
    }

    #[test]
    fn train_identities_and_determinism() {
        let enc = tiny_encoder();
        let table = PositionalTable::synthetic_smooth(8, 6);
        let images = vec![smooth_image(64, 64), smooth_image(70, 90), smooth_image(56, 56)];
        let cfg = quick_cfg(3, 1e-3);
        let (_, reports) = run(&cfg, &images, &table, &enc, 7);
        // 3 images, batch 2 -> 2 steps per epoch, 3 epochs
        assert_eq!(reports.len(), 6);
        let total_steps = 6u64;
        for (i, r) in reports.iter().enumerate() {
            assert_eq!(r.step, i as u64 + 1);
            assert_eq!(r.total, r.l_cls + cfg.gamma * r.r_l1);
            let want_lr = cfg.base_lr
                * 0.5
                * (1.0 + (std::f64::consts::PI * i as f64 / total_steps as f64).cos());
            assert!((r.lr - want_lr).abs() <= 1e-12);
            assert!(r.total.is_finite() && r.grad_norm_positions.is_finite());
        }
        let (_, again) = run(&cfg, &images, &table, &enc, 7);
        assert_eq!(reports, again);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let enc = tiny_encoder();
        let table = PositionalTable::synthetic_smooth(8, 6);
        let images = vec![smooth_image(64, 64)];
        let cfg = quick_cfg(2, 0.0);
        let before = tiny_mlp(9);
        let (state, _) = run(&cfg, &images, &table, &enc, 9);
        for (name, t) in &before.params {
            assert_eq!(t.data(), state.mlp.params[name].data(), "{name}");
        }
    }

    #[test]
    fn checkpoint_resume_is_bit_exact() {
        let enc = tiny_encoder();
        let table = PositionalTable::synthetic_smooth(8, 6);
        let images = vec![smooth_image(64, 64), smooth_image(70, 70)];
        let cfg = quick_cfg(5, 2e-3); // 1 step per epoch at batch 2 -> 5 steps
        let (full_state, full_reports) = run(&cfg, &images, &table, &enc, 11);

        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("ckpt");
        let mut cfg_ck = cfg.clone();
        cfg_ck.checkpoint_every = 3;
        let mut state = TrainState::fresh(tiny_mlp(11), &cfg_ck, images.len());
        train_on_images(&cfg_ck, &images, &table, &enc, &mut state, Some(&prefix), |_| {})
            .unwrap();

        // the checkpoint written at step 3 resumes to the same final state
        let mut resumed = load_checkpoint(&prefix).unwrap();
        assert_eq!(resumed.adam.step, 3);
        let mut tail = Vec::new();
        train_on_images(&cfg_ck, &images, &table, &enc, &mut resumed, None, |r| {
            tail.push(r.clone())
        })
        .unwrap();
        assert_eq!(tail.len(), 2);
        assert_eq!(&full_reports[3..], &tail[..]);
        for (name, t) in &full_state.mlp.params {
            let a: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = resumed.mlp.params[name].data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "{name}");
        }
    }

    #[test]
    fn residual_decreases_on_constant_image_run() {
        let enc = tiny_encoder();
        let mlp = tiny_mlp(13);
        let table =
            PositionalTable::new(GRID_ROWS, GRID_COLS, 8, vec![0.1; GRID_ROWS * GRID_COLS * 8])
                .unwrap();
        let images = vec![Image::constant(64, 64, 0.5)];
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 1,
            base_lr: 1e-2,
            ..quick_cfg(1, 0.0)
        };
        let mut state = TrainState::fresh(mlp, &cfg, images.len());
        let mut reports = Vec::new();
        train_on_images(&cfg, &images, &table, &enc, &mut state, None, |r| {
            reports.push(r.clone())
        })
        .unwrap();
        assert_eq!(reports.len(), 200);
        let first = reports[0].r_l1;
        let last = reports.last().unwrap().r_l1;
        assert!(last <= first / 10.0, "r_l1 {first} -> {last}");
    }

    #[test]
    fn fit_residual_only_zero_steps_and_monotone_windows() {
        let table = PositionalTable::new(
            GRID_ROWS,
            GRID_COLS,
            8,
            vec![0.0; GRID_ROWS * GRID_COLS * 8],
        )
        .unwrap();
        let mut mlp = tiny_mlp(17);
        let before = mlp.params.clone();
        assert!(fit_residual_only(&mut mlp, &table, 0, 1e-3).unwrap().is_empty());
        for (name, t) in &before {
            assert_eq!(t.data(), mlp.params[name].data(), "{name}");
        }

        let trace = fit_residual_only(&mut mlp, &table, 300, 2e-3).unwrap();
        // residual starts near mean |M| over the grid
        let mut abs_sum = 0.0;
        for i in 0..GRID_ROWS {
            for j in 0..GRID_COLS {
                let (x, y) = grid_coordinate(i, j).unwrap();
                abs_sum += tiny_mlp(17)
                    .forward(x, y)
                    .iter()
                    .map(|v| v.abs())
                    .sum::<f64>();
            }
        }
        let mean_abs = abs_sum / (GRID_ROWS * GRID_COLS * 8) as f64;
        assert!((trace[0] - mean_abs).abs() <= 1e-12);
        // windowed averages decrease
        let window = |r: &[f64]| r.iter().sum::<f64>() / r.len() as f64;
        let w0 = window(&trace[0..100]);
        let w1 = window(&trace[100..200]);
        let w2 = window(&trace[200..300]);
        assert!(w1 < w0 && w2 < w1, "{w0} {w1} {w2}");
    }

    #[test]
    fn bad_checkpoint_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("x");
        std::fs::write(prefix.with_extension("qopt"), b"WRONG").unwrap();
        assert!(load_checkpoint(&prefix).is_err());
    }
}
