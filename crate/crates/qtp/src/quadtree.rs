//! Quadtree patchification: build, prune, and flatten image quadtrees into
//! ordered patch sequences.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::QtpError;
use crate::image::{detail_score_rect, BlockCover, Image, PatchGeometry};

#[derive(Clone, Debug, PartialEq)]
pub enum SelectionPolicy {
    /// Merge (make a leaf) when the region's detail score falls below alpha.
    Derivative { alpha: f64 },
    /// Merge with probability `p`, drawn in deterministic preorder.
    Random { p: f64, seed: u64 },
    /// Full subdivision down to single patches (uniform grid).
    NeverMerge,
}

impl SelectionPolicy {
    pub fn validate(&self) -> Result<(), QtpError> {
        match self {
            SelectionPolicy::Derivative { alpha } if !alpha.is_finite() => Err(
                QtpError::InvalidArgument("derivative policy requires finite alpha".into()),
            ),
            SelectionPolicy::Random { p, .. } if !(0.0..=1.0).contains(p) => Err(
                QtpError::InvalidArgument(format!("merge probability {p} outside [0,1]")),
            ),
            _ => Ok(()),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            SelectionPolicy::Derivative { .. } => "derivative",
            SelectionPolicy::Random { .. } => "random",
            SelectionPolicy::NeverMerge => "never_merge",
        }
    }
}

/// A node of the quadtree; region coordinates are in patches, absolute
/// within the image's patch grid, with `size` a power of two.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuadNode {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub children: Option<Box<[QuadNode; 4]>>,
}

impl QuadNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }

    pub fn leaves(&self) -> Vec<&QuadNode> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a QuadNode>) {
        match &self.children {
            None => out.push(self),
            Some(kids) => {
                for k in kids.iter() {
                    k.collect_leaves(out);
                }
            }
        }
    }
}

/// One token of a [`PatchLayout`]: a leaf region plus its downsampled
/// pixels (planar `[c][y][x]`, `patch_size * patch_size * 3` values).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEntry {
    pub top: usize,
    pub left: usize,
    pub size_patches: usize,
    pub center_x: f64,
    pub center_y: f64,
    pub pixels: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchLayout {
    pub entries: Vec<PatchEntry>,
    pub geometry: PatchGeometry,
}

impl PatchLayout {
    pub fn token_count(&self) -> usize {
        self.entries.len()
    }
}

/// Build the quadtree for one block of the cover. The block spans
/// `size` x `size` patches starting at (top, left) in patch units; `size`
/// must be a power of two.
pub fn build_quadtree(
    img: &Image,
    top: usize,
    left: usize,
    size: usize,
    patch_size: usize,
    policy: &SelectionPolicy,
    block_rng: Option<&mut ChaCha8Rng>,
) -> Result<QuadNode, QtpError> {
    if !size.is_power_of_two() {
        return Err(QtpError::InvalidArgument(format!(
            "block size {size} patches is not a power of two"
        )));
    }
    policy.validate()?;
    let mut default_rng;
    let rng = match (policy, block_rng) {
        (SelectionPolicy::Random { seed, .. }, None) => {
            default_rng = ChaCha8Rng::seed_from_u64(*seed);
            Some(&mut default_rng)
        }
        (_, rng) => rng,
    };
    Ok(build_node(img, top, left, size, patch_size, policy, rng))
}

fn build_node(
    img: &Image,
    top: usize,
    left: usize,
    size: usize,
    patch_size: usize,
    policy: &SelectionPolicy,
    mut rng: Option<&mut ChaCha8Rng>,
) -> QuadNode {
    let leaf = QuadNode {
        top,
        left,
        size,
        children: None,
    };
    if size == 1 {
        return leaf;
    }
    let merge = match policy {
        SelectionPolicy::NeverMerge => false,
        SelectionPolicy::Derivative { alpha } => {
            let px = patch_size;
            detail_score_rect(img, top * px, left * px, size * px, size * px) < *alpha
        }
        SelectionPolicy::Random { p, .. } => {
            let draw: f64 = rng.as_mut().expect("rng for random policy").gen();
            draw < *p
        }
    };
    if merge {
        return leaf;
    }
    let half = size / 2;
    // preorder: draws happen parent first, then children top-left,
    // top-right, bottom-left, bottom-right
    let kids = [
        build_node(img, top, left, half, patch_size, policy, rng.as_mut().map(|r| &mut **r)),
        build_node(
            img,
            top,
            left + half,
            half,
            patch_size,
            policy,
            rng.as_mut().map(|r| &mut **r),
        ),
        build_node(
            img,
            top + half,
            left,
            half,
            patch_size,
            policy,
            rng.as_mut().map(|r| &mut **r),
        ),
        build_node(
            img,
            top + half,
            left + half,
            half,
            patch_size,
            policy,
            rng,
        ),
    ];
    QuadNode {
        top,
        left,
        size,
        children: Some(Box::new(kids)),
    }
}

/// Area-average (box filter) a leaf of k*patch x k*patch pixels down to
/// patch x patch.
pub fn downsample_leaf(leaf_pixels: &Image, patch_size: usize) -> Vec<f64> {
    let k = leaf_pixels.height() / patch_size;
    debug_assert_eq!(leaf_pixels.height(), leaf_pixels.width());
    debug_assert_eq!(leaf_pixels.height() % patch_size, 0);
    let mut out = vec![0.0; patch_size * patch_size * 3];
    let inv = 1.0 / (k * k) as f64;
    for c in 0..3 {
        for py in 0..patch_size {
            for px in 0..patch_size {
                let mut acc = 0.0;
                for dy in 0..k {
                    for dx in 0..k {
                        acc += leaf_pixels.get(c, py * k + dy, px * k + dx);
                    }
                }
                out[c * patch_size * patch_size + py * patch_size + px] = acc * inv;
            }
        }
    }
    out
}

/// Normalized center coordinate of a patch-rect along one axis. Single
/// patches on the training grid land exactly on -1 + 2i/(n-1).
fn center_coord(start_px: f64, extent_px: f64, image_px: f64, patch_size: f64) -> f64 {
    let denom = image_px - patch_size;
    if denom == 0.0 {
        return 0.0;
    }
    -1.0 + 2.0 * (start_px + extent_px / 2.0 - patch_size / 2.0) / denom
}

/// Flatten the cover's pruned quadtrees plus border patches into one
/// raster-ordered token sequence. The first coordinate follows the row
/// (vertical) axis to match the positional grid convention.
pub fn patchify(
    img: &Image,
    geom: &PatchGeometry,
    cover: &BlockCover,
    policy: &SelectionPolicy,
) -> Result<PatchLayout, QtpError> {
    let px = geom.patch_size;
    debug_assert_eq!(img.height(), geom.rows * px);
    debug_assert_eq!(img.width(), geom.cols * px);
    let (h_px, w_px) = (img.height() as f64, img.width() as f64);
    let mut entries: Vec<PatchEntry> = Vec::new();

    for br in 0..cover.grid_rows {
        for bc in 0..cover.grid_cols {
            let top = cover.origin.0 + br * cover.block_size;
            let left = cover.origin.1 + bc * cover.block_size;
            let mut rng = match policy {
                SelectionPolicy::Random { seed, .. } => {
                    Some(ChaCha8Rng::seed_from_u64(block_seed(*seed, br, bc)))
                }
                _ => None,
            };
            let tree = build_quadtree(
                img,
                top,
                left,
                cover.block_size,
                px,
                policy,
                rng.as_mut(),
            )?;
            for leaf in tree.leaves() {
                let region = img.crop(leaf.top * px, leaf.left * px, leaf.size * px, leaf.size * px);
                let pixels = if leaf.size == 1 {
                    region.data().to_vec()
                } else {
                    downsample_leaf(&region, px)
                };
                entries.push(PatchEntry {
                    top: leaf.top,
                    left: leaf.left,
                    size_patches: leaf.size,
                    center_x: center_coord(
                        (leaf.top * px) as f64,
                        (leaf.size * px) as f64,
                        h_px,
                        px as f64,
                    ),
                    center_y: center_coord(
                        (leaf.left * px) as f64,
                        (leaf.size * px) as f64,
                        w_px,
                        px as f64,
                    ),
                    pixels,
                });
            }
        }
    }
    for &(r, c) in &cover.border_patches {
        let region = img.crop(r * px, c * px, px, px);
        entries.push(PatchEntry {
            top: r,
            left: c,
            size_patches: 1,
            center_x: center_coord((r * px) as f64, px as f64, h_px, px as f64),
            center_y: center_coord((c * px) as f64, px as f64, w_px, px as f64),
            pixels: region.data().to_vec(),
        });
    }
    entries.sort_by_key(|e| (e.top, e.left));
    Ok(PatchLayout {
        entries,
        geometry: *geom,
    })
}

/// Per-block seed derived from the policy seed and block grid position.
fn block_seed(seed: u64, block_row: usize, block_col: usize) -> u64 {
    seed ^ (block_row as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (block_col as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Convenience path: resize/crop already done, run cover + patchify.
pub fn patchify_image(img: &Image, geom: &PatchGeometry, policy: &SelectionPolicy) -> Result<PatchLayout, QtpError> {
    let cover = crate::image::maximal_block_cover(geom);
    patchify(img, geom, &cover, policy)
}

/// Draw leaf boundaries onto a copy of the source image (green outlines).
pub fn render_layout(img: &Image, layout: &PatchLayout) -> Image {
    let px = layout.geometry.patch_size;
    let mut out = img.clone();
    let line = [0.0, 1.0, 0.0];
    for e in &layout.entries {
        let (top, left) = (e.top * px, e.left * px);
        let side = e.size_patches * px;
        for x in left..left + side {
            for (c, &v) in line.iter().enumerate() {
                out.set(c, top, x, v);
                out.set(c, top + side - 1, x, v);
            }
        }
        for y in top..top + side {
            for (c, &v) in line.iter().enumerate() {
                out.set(c, y, left, v);
                out.set(c, y, left + side - 1, v);
            }
        }
    }
    out
}

pub const QPAT_MAGIC: &[u8; 4] = b"QPAT";
pub const QPAT_VERSION: u32 = 1;
pub const MANIFEST_HEADER: &str = "QTP-LAYOUT 1";

/// Text manifest: header, geometry line, one record per entry.
pub fn write_manifest(layout: &PatchLayout, path: &Path) -> Result<(), QtpError> {
    use std::fmt::Write as _;
    let mut s = String::new();
    let _ = writeln!(s, "{MANIFEST_HEADER}");
    let _ = writeln!(
        s,
        "geometry {} {} {}",
        layout.geometry.rows, layout.geometry.cols, layout.geometry.patch_size
    );
    for e in &layout.entries {
        let _ = writeln!(
            s,
            "{} {} {} {} {}",
            e.top, e.left, e.size_patches, e.center_x, e.center_y
        );
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Binary patch file: magic "QPAT", version u32, entry count u32,
/// patch_size u32, then each entry's pixels as little-endian f32 in the
/// planar `[c][y][x]` order of `PatchEntry::pixels`.
pub fn write_qpat(layout: &PatchLayout, path: &Path) -> Result<(), QtpError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(QPAT_MAGIC);
    buf.extend_from_slice(&QPAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(layout.entries.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(layout.geometry.patch_size as u32).to_le_bytes());
    for e in &layout.entries {
        for &v in &e.pixels {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Read back a QPAT file: (patch_size, per-entry pixel vectors).
pub fn read_qpat(path: &Path) -> Result<(usize, Vec<Vec<f64>>), QtpError> {
    let buf = std::fs::read(path)?;
    let fmt = |detail: &str| QtpError::Format {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };
    if buf.len() < 16 || &buf[0..4] != QPAT_MAGIC {
        return Err(fmt("bad magic"));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != QPAT_VERSION {
        return Err(fmt(&format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let patch_size = u32::from_le_bytes(buf[12..16].try_into().unwrap()) as usize;
    let per_entry = patch_size * patch_size * 3;
    let expected = 16 + count * per_entry * 4;
    if buf.len() != expected {
        return Err(fmt(&format!(
            "truncated: {} bytes, expected {expected}",
            buf.len()
        )));
    }
    let mut entries = Vec::with_capacity(count);
    let mut off = 16;
    for _ in 0..count {
        let mut pix = Vec::with_capacity(per_entry);
        for _ in 0..per_entry {
            pix.push(f32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as f64);
            off += 4;
        }
        entries.push(pix);
    }
    Ok((patch_size, entries))
}
