//! The two encoder bias measures and the sweep that tabulates them: the
//! interpolation bias (gradient norm of cross-resolution CLS similarity with
//! respect to the positional parameters) and the mesoscopic similarity C^z
//! (zero-positional CLS similarity against the 336-pixel rendering), plus
//! QtP-vs-UGP CLS comparisons.

use rayon::prelude::*;

use crate::encoder::{Encoder, PositionalSource};
use crate::error::QtpError;
use crate::image::{crop_to_patch_multiple, resize, Image, ResizeMethod, PATCH_SIZE};
use crate::quadtree::{patchify_image, PatchLayout, SelectionPolicy};

/// Reference rendering size (short edge, pixels) all metrics compare against.
pub const BASELINE_SIZE: usize = 336;

#[derive(Clone, Debug)]
pub struct BiasReport {
    pub image_id: String,
    pub size: usize,
    pub policy: String,
    pub pos_kind: String,
    pub token_count: f64,
    pub b_interp: f64,
    pub c_z: f64,
    pub cs_qtp: f64,
    pub cs_ugp: f64,
}

pub const CSV_HEADER: &str = "image_id,size,policy,pos_kind,token_count,b_interp,c_z,cs_qtp,cs_ugp";

impl BiasReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.image_id,
            self.size,
            self.policy,
            self.pos_kind,
            self.token_count,
            self.b_interp,
            self.c_z,
            self.cs_qtp,
            self.cs_ugp
        )
    }
}

pub fn policy_label(policy: &SelectionPolicy) -> String {
    match policy {
        SelectionPolicy::NeverMerge => "never_merge".to_string(),
        SelectionPolicy::Derivative { alpha } => format!("derivative:{alpha}"),
        SelectionPolicy::Random { p, .. } => format!("random:{p}"),
    }
}

/// Resize the short edge to `n` (bicubic), crop to a patch multiple, and
/// patchify under `policy`.
pub fn prepare_layout(
    img: &Image,
    n: usize,
    policy: &SelectionPolicy,
) -> Result<PatchLayout, QtpError> {
    let resized = resize(img, n, ResizeMethod::Bicubic)?;
    let (cropped, geom) = crop_to_patch_multiple(&resized, PATCH_SIZE)?;
    patchify_image(&cropped, &geom, policy)
}

/// Interpolation bias between two renderings: the L2 norm of the gradient of
/// CS(CLS_na, CLS_nb) with respect to the positional parameters, both
/// renderings patchified without merging.
pub fn interpolation_bias_between(
    img: &Image,
    n_a: usize,
    n_b: usize,
    source: PositionalSource,
    enc: &Encoder,
) -> Result<f64, QtpError> {
    let a = prepare_layout(img, n_a, &SelectionPolicy::NeverMerge)?;
    let b = prepare_layout(img, n_b, &SelectionPolicy::NeverMerge)?;
    let (_, norm) = enc.cls_similarity_with_position_grad(&a, &b, source)?;
    Ok(norm)
}

/// Interpolation bias of rendering size `n` against the 336 baseline.
pub fn interpolation_bias(
    img: &Image,
    n: usize,
    source: PositionalSource,
    enc: &Encoder,
) -> Result<f64, QtpError> {
    interpolation_bias_between(img, n, BASELINE_SIZE, source, enc)
}

/// C^z between two rendering sizes: CLS cosine similarity with positional
/// encodings set to zero, both renderings patchified without merging.
pub fn mesoscopic_similarity_between(
    img: &Image,
    n_a: usize,
    n_b: usize,
    enc: &Encoder,
) -> Result<f64, QtpError> {
    let a = prepare_layout(img, n_a, &SelectionPolicy::NeverMerge)?;
    let b = prepare_layout(img, n_b, &SelectionPolicy::NeverMerge)?;
    enc.cls_similarity(&a, &b, PositionalSource::Zero)
}

/// C^z_{N -> 336}.
pub fn mesoscopic_similarity(img: &Image, n: usize, enc: &Encoder) -> Result<f64, QtpError> {
    mesoscopic_similarity_between(img, n, BASELINE_SIZE, enc)
}

/// All four metrics for one (image, size, policy, positional source) cell.
pub fn bias_report(
    image_id: &str,
    img: &Image,
    n: usize,
    policy: &SelectionPolicy,
    source: PositionalSource,
    enc: &Encoder,
) -> Result<BiasReport, QtpError> {
    let qtp_layout = prepare_layout(img, n, policy)?;
    let ugp_layout = prepare_layout(img, n, &SelectionPolicy::NeverMerge)?;
    let baseline = prepare_layout(img, BASELINE_SIZE, &SelectionPolicy::NeverMerge)?;
    let (_, b_interp) = enc.cls_similarity_with_position_grad(&ugp_layout, &baseline, source)?;
    let c_z = enc.cls_similarity(&ugp_layout, &baseline, PositionalSource::Zero)?;
    let cs_qtp = enc.cls_similarity(&qtp_layout, &baseline, source)?;
    let cs_ugp = enc.cls_similarity(&ugp_layout, &baseline, source)?;
    Ok(BiasReport {
        image_id: image_id.to_string(),
        size: n,
        policy: policy_label(policy),
        pos_kind: source.kind_name().to_string(),
        token_count: qtp_layout.token_count() as f64,
        b_interp,
        c_z,
        cs_qtp,
        cs_ugp,
    })
}

/// Run the full grid. Emits, for each (size, policy, pos kind) group, one
/// row per image followed by an "average" row of column means. Cells are
/// computed in parallel; the emission order is deterministic.
pub fn sweep(
    images: &[(String, Image)],
    sizes: &[usize],
    policies: &[SelectionPolicy],
    sources: &[PositionalSource],
    enc: &Encoder,
) -> Result<Vec<BiasReport>, QtpError> {
    if images.is_empty() || sizes.is_empty() || policies.is_empty() || sources.is_empty() {
        return Err(QtpError::InvalidArgument(
            "sweep requires at least one image, size, policy and positional source".into(),
        ));
    }
    let mut cells = Vec::new();
    for &size in sizes {
        for (pi, _) in policies.iter().enumerate() {
            for (si, _) in sources.iter().enumerate() {
                for (ii, _) in images.iter().enumerate() {
                    cells.push((size, pi, si, ii));
                }
            }
        }
    }
    let data: Vec<BiasReport> = cells
        .par_iter()
        .map(|&(size, pi, si, ii)| {
            let (id, img) = &images[ii];
            bias_report(id, img, size, &policies[pi], sources[si], enc)
        })
        .collect::<Result<_, _>>()?;

    let group = images.len();
    let mut rows = Vec::with_capacity(data.len() + data.len() / group);
    for chunk in data.chunks(group) {
        rows.extend(chunk.iter().cloned());
        let m = group as f64;
        let mean = |f: fn(&BiasReport) -> f64| chunk.iter().map(f).sum::<f64>() / m;
        rows.push(BiasReport {
            image_id: "average".to_string(),
            size: chunk[0].size,
            policy: chunk[0].policy.clone(),
            pos_kind: chunk[0].pos_kind.clone(),
            token_count: mean(|r| r.token_count),
            b_interp: mean(|r| r.b_interp),
            c_z: mean(|r| r.c_z),
            cs_qtp: mean(|r| r.cs_qtp),
            cs_ugp: mean(|r| r.cs_ugp),
        });
    }
    Ok(rows)
}

pub fn to_csv(rows: &[BiasReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}
