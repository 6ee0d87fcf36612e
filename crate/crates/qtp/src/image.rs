//! Image ingestion and geometric preprocessing: decode, resampling, patch
//! alignment, luminance detail scores, and the maximal power-of-two block
//! cover of the patch grid.

use std::path::{Path, PathBuf};

use crate::error::QtpError;

pub const PATCH_SIZE: usize = 14;
pub const DEFAULT_BLOCK_SIZE: usize = 16; // patches per block side, 224 px

/// RGB raster stored planar: `data[c * h * w + y * w + x]`, values in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, QtpError> {
        if height == 0 || width == 0 {
            return Err(QtpError::Image("image dimensions must be >= 1".into()));
        }
        if data.len() != height * width * 3 {
            return Err(QtpError::Image(format!(
                "data length {} does not match {}x{}x3",
                data.len(),
                height,
                width
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Image {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[c * self.height * self.width + y * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[c * self.height * self.width + y * self.width + x] = v;
    }

    /// Luminance (0.299 R + 0.587 G + 0.114 B) at a pixel.
    pub fn luminance(&self, y: usize, x: usize) -> f64 {
        0.299 * self.get(0, y, x) + 0.587 * self.get(1, y, x) + 0.114 * self.get(2, y, x)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Image {
        debug_assert!(top + height <= self.height && left + width <= self.width);
        let mut data = Vec::with_capacity(height * width * 3);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(self.get(c, top + y, left + x));
                }
            }
        }
        Image {
            height,
            width,
            data,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub block_size: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockCover {
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Patch offset (row, col) of the block grid within the patch grid.
    pub origin: (usize, usize),
    pub block_size: usize,
    /// Patch coordinates (row, col) outside the block grid.
    pub border_patches: Vec<(usize, usize)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeMethod {
    Bilinear,
    Bicubic,
}

impl std::str::FromStr for ResizeMethod {
    type Err = QtpError;
    fn from_str(s: &str) -> Result<Self, QtpError> {
        match s {
            "bilinear" => Ok(ResizeMethod::Bilinear),
            "bicubic" => Ok(ResizeMethod::Bicubic),
            other => Err(QtpError::InvalidArgument(format!(
                "unknown resize method '{other}'"
            ))),
        }
    }
}

/// Resize so the smallest edge equals `target_short_edge`, preserving aspect
/// ratio. Bicubic uses the Catmull-Rom kernel; output clamped to [0,1].
pub fn resize(img: &Image, target_short_edge: usize, method: ResizeMethod) -> Result<Image, QtpError> {
    if target_short_edge < PATCH_SIZE {
        return Err(QtpError::InvalidArgument(format!(
            "target short edge {target_short_edge} is below patch size {PATCH_SIZE}"
        )));
    }
    let (h, w) = (img.height, img.width);
    let (nh, nw) = if h <= w {
        let nh = target_short_edge;
        let nw = ((w as f64 * nh as f64 / h as f64).round() as usize).max(1);
        (nh, nw)
    } else {
        let nw = target_short_edge;
        let nh = ((h as f64 * nw as f64 / w as f64).round() as usize).max(1);
        (nh, nw)
    };
    if (nh, nw) == (h, w) {
        return Ok(img.clone());
    }
    Ok(resample(img, nh, nw, method))
}

/// Resize to exact output dimensions, ignoring aspect ratio.
pub fn resize_exact(
    img: &Image,
    height: usize,
    width: usize,
    method: ResizeMethod,
) -> Result<Image, QtpError> {
    if height < PATCH_SIZE || width < PATCH_SIZE {
        return Err(QtpError::InvalidArgument(format!(
            "target {height}x{width} is below patch size {PATCH_SIZE}"
        )));
    }
    if (height, width) == (img.height, img.width) {
        return Ok(img.clone());
    }
    Ok(resample(img, height, width, method))
}

fn resample(img: &Image, nh: usize, nw: usize, method: ResizeMethod) -> Image {
    let (h, w) = (img.height, img.width);
    let sy = h as f64 / nh as f64;
    let sx = w as f64 / nw as f64;
    let mut out = Image::constant(nh, nw, 0.0);
    for c in 0..3 {
        for oy in 0..nh {
            let src_y = (oy as f64 + 0.5) * sy - 0.5;
            for ox in 0..nw {
                let src_x = (ox as f64 + 0.5) * sx - 0.5;
                let v = match method {
                    ResizeMethod::Bilinear => sample_bilinear(img, c, src_y, src_x),
                    ResizeMethod::Bicubic => sample_bicubic(img, c, src_y, src_x),
                };
                out.set(c, oy, ox, v.clamp(0.0, 1.0));
            }
        }
    }
    out
}

fn pixel_clamped(img: &Image, c: usize, y: i64, x: i64) -> f64 {
    let yy = y.clamp(0, img.height as i64 - 1) as usize;
    let xx = x.clamp(0, img.width as i64 - 1) as usize;
    img.get(c, yy, xx)
}

fn sample_bilinear(img: &Image, c: usize, y: f64, x: f64) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let (y0, x0) = (y0 as i64, x0 as i64);
    let p00 = pixel_clamped(img, c, y0, x0);
    let p01 = pixel_clamped(img, c, y0, x0 + 1);
    let p10 = pixel_clamped(img, c, y0 + 1, x0);
    let p11 = pixel_clamped(img, c, y0 + 1, x0 + 1);
    p00 * (1.0 - fy) * (1.0 - fx) + p01 * (1.0 - fy) * fx + p10 * fy * (1.0 - fx) + p11 * fy * fx
}

/// Catmull-Rom weight for |t| <= 2.
pub(crate) fn catmull_rom(t: f64) -> f64 {
    let t = t.abs();
    if t < 1.0 {
        1.5 * t * t * t - 2.5 * t * t + 1.0
    } else if t < 2.0 {
        -0.5 * t * t * t + 2.5 * t * t - 4.0 * t + 2.0
    } else {
        0.0
    }
}

fn sample_bicubic(img: &Image, c: usize, y: f64, x: f64) -> f64 {
    let y0 = y.floor() as i64;
    let x0 = x.floor() as i64;
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let mut acc = 0.0;
    for dy in -1..=2 {
        let wy = catmull_rom(dy as f64 - fy);
        if wy == 0.0 {
            continue;
        }
        for dx in -1..=2 {
            let wx = catmull_rom(dx as f64 - fx);
            if wx == 0.0 {
                continue;
            }
            acc += wy * wx * pixel_clamped(img, c, y0 + dy, x0 + dx);
        }
    }
    acc
}

/// Center crop to the nearest multiple of `patch_size` per dimension. The
/// odd leftover pixel comes off the bottom/right edge.
pub fn crop_to_patch_multiple(
    img: &Image,
    patch_size: usize,
) -> Result<(Image, PatchGeometry), QtpError> {
    if img.height < patch_size || img.width < patch_size {
        return Err(QtpError::InvalidArgument(format!(
            "image {}x{} smaller than patch size {}",
            img.height, img.width, patch_size
        )));
    }
    let rem_h = img.height % patch_size;
    let rem_w = img.width % patch_size;
    let top = rem_h / 2;
    let left = rem_w / 2;
    let out_h = img.height - rem_h;
    let out_w = img.width - rem_w;
    let cropped = if rem_h == 0 && rem_w == 0 {
        img.clone()
    } else {
        img.crop(top, left, out_h, out_w)
    };
    let geom = PatchGeometry {
        patch_size,
        rows: out_h / patch_size,
        cols: out_w / patch_size,
        block_size: DEFAULT_BLOCK_SIZE,
    };
    Ok((cropped, geom))
}

/// Largest centered grid of `block_size`-patch square blocks fitting the
/// patch grid; everything outside the grid is listed patch by patch.
pub fn maximal_block_cover(geom: &PatchGeometry) -> BlockCover {
    let bs = geom.block_size;
    let grid_rows = geom.rows / bs;
    let grid_cols = geom.cols / bs;
    let origin = (
        (geom.rows - grid_rows * bs) / 2,
        (geom.cols - grid_cols * bs) / 2,
    );
    let mut border = Vec::new();
    for r in 0..geom.rows {
        for c in 0..geom.cols {
            let in_grid = r >= origin.0
                && r < origin.0 + grid_rows * bs
                && c >= origin.1
                && c < origin.1 + grid_cols * bs;
            if !in_grid {
                border.push((r, c));
            }
        }
    }
    BlockCover {
        grid_rows,
        grid_cols,
        origin,
        block_size: bs,
        border_patches: border,
    }
}

/// Detail score D of a region: the maximum over interior pixels of the
/// signed sum of forward-difference luminance gradients, with luminance
/// measured on the [0,255] scale so thresholds line up with 8-bit sweeps.
/// Degenerate regions (one pixel in either dimension) score 0.
pub fn detail_score(region: &Image) -> f64 {
    detail_score_rect(region, 0, 0, region.height, region.width)
}

/// Same score over a sub-rectangle of `img`, avoiding a copy.
pub fn detail_score_rect(img: &Image, top: usize, left: usize, height: usize, width: usize) -> f64 {
    if height < 2 || width < 2 {
        return 0.0;
    }
    let mut best = f64::NEG_INFINITY;
    for y in top..top + height - 1 {
        for x in left..left + width - 1 {
            let here = img.luminance(y, x);
            let dx = img.luminance(y, x + 1) - here;
            let dy = img.luminance(y + 1, x) - here;
            let g = dx + dy;
            if g > best {
                best = g;
            }
        }
    }
    best * 255.0
}

/// A decoded image plus files that failed to decode (skipped with a record).
pub struct ImageDirectory {
    pub images: Vec<(PathBuf, Image)>,
    pub skipped: Vec<(PathBuf, String)>,
}

/// Load every decodable image in a directory, in lexicographic file order.
pub fn load_image_dir(path: &Path) -> Result<ImageDirectory, QtpError> {
    if !path.is_dir() {
        return Err(QtpError::Image(format!(
            "not a directory: {}",
            path.display()
        )));
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    let mut images = Vec::new();
    let mut skipped = Vec::new();
    for p in entries {
        match load_image(&p) {
            Ok(img) => images.push((p, img)),
            Err(e) => skipped.push((p, e.to_string())),
        }
    }
    if images.is_empty() {
        return Err(QtpError::EmptyDirectory(path.display().to_string()));
    }
    Ok(ImageDirectory { images, skipped })
}

/// Decode a single PNG/PPM image to [0,1] floats.
pub fn load_image(path: &Path) -> Result<Image, QtpError> {
    let decoded = image::open(path).map_err(|e| QtpError::Image(format!("{}: {e}", path.display())))?;
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0; h * w * 3];
    for (x, y, px) in rgb.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[c * h * w + y * w + x] = px.0[c] as f64 / 255.0;
        }
    }
    Image::new(h, w, data)
}

/// Write an image as binary PPM (P6), 8-bit.
pub fn save_ppm(img: &Image, path: &Path) -> Result<(), QtpError> {
    use std::io::Write;
    let mut buf = Vec::with_capacity(img.height * img.width * 3 + 32);
    write!(buf, "P6\n{} {}\n255\n", img.width, img.height)?;
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..3 {
                let v = (img.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                buf.push(v);
            }
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_resize_is_unchanged() {
        let img = Image::constant(336, 336, 0.25);
        let out = resize(&img, 336, ResizeMethod::Bicubic).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn resize_preserves_constants_both_methods() {
        let img = Image::constant(50, 70, 0.6);
        for m in [ResizeMethod::Bilinear, ResizeMethod::Bicubic] {
            let out = resize(&img, 120, m).unwrap();
            for &v in out.data() {
                assert!((v - 0.6).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resize_aspect_arithmetic() {
        let img = Image::constant(100, 200, 0.5);
        let out = resize(&img, 336, ResizeMethod::Bilinear).unwrap();
        assert_eq!((out.height(), out.width()), (336, 672));
    }

    #[test]
    fn resize_rejects_tiny_target() {
        let img = Image::constant(20, 20, 0.0);
        assert!(resize(&img, 13, ResizeMethod::Bilinear).is_err());
    }

    #[test]
    fn crop_cases_from_known_dimensions() {
        // 476x518 is already patch aligned: 34x37 patches.
        let img = Image::constant(476, 518, 0.1);
        let (out, geom) = crop_to_patch_multiple(&img, PATCH_SIZE).unwrap();
        assert_eq!((out.height(), out.width()), (476, 518));
        assert_eq!((geom.rows, geom.cols), (34, 37));

        // 337x337 loses one pixel per dimension.
        let img = Image::constant(337, 337, 0.1);
        let (out, geom) = crop_to_patch_multiple(&img, PATCH_SIZE).unwrap();
        assert_eq!((out.height(), out.width()), (336, 336));
        assert_eq!((geom.rows, geom.cols), (24, 24));

        let img = Image::constant(336, 336, 0.1);
        let (out, geom) = crop_to_patch_multiple(&img, PATCH_SIZE).unwrap();
        assert_eq!((out.height(), out.width()), (336, 336));
        assert_eq!((geom.rows, geom.cols), (24, 24));
    }

    #[test]
    fn crop_takes_extra_pixel_from_bottom_right() {
        // 17x15 -> 14x14 with remainders 3 and 1: top offset 1, left offset 0.
        let mut img = Image::constant(17, 15, 0.0);
        img.set(0, 1, 0, 1.0); // should become (0,0) after crop
        let (out, _) = crop_to_patch_multiple(&img, PATCH_SIZE).unwrap();
        assert_eq!(out.get(0, 0, 0), 1.0);
        assert_eq!((out.height(), out.width()), (14, 14));
    }

    #[test]
    fn block_cover_examples() {
        let geom = PatchGeometry {
            patch_size: 14,
            rows: 34,
            cols: 37,
            block_size: 16,
        };
        let cover = maximal_block_cover(&geom);
        assert_eq!((cover.grid_rows, cover.grid_cols), (2, 2));
        assert_eq!(cover.border_patches.len(), 34 * 37 - 4 * 256);

        let geom = PatchGeometry {
            patch_size: 14,
            rows: 48,
            cols: 64,
            block_size: 16,
        };
        let cover = maximal_block_cover(&geom);
        assert_eq!((cover.grid_rows, cover.grid_cols), (3, 4));
        assert!(cover.border_patches.is_empty());

        let geom = PatchGeometry {
            patch_size: 14,
            rows: 10,
            cols: 10,
            block_size: 16,
        };
        let cover = maximal_block_cover(&geom);
        assert_eq!((cover.grid_rows, cover.grid_cols), (0, 0));
        assert_eq!(cover.border_patches.len(), 100);
    }

    #[test]
    fn detail_score_constant_is_zero() {
        let img = Image::constant(16, 16, 0.3);
        assert_eq!(detail_score(&img), 0.0);
    }

    #[test]
    fn detail_score_horizontal_ramp() {
        // Luminance ramps linearly over the width: the per-pixel forward
        // difference is 1/(W-1) in [0,1] units, i.e. 255/(W-1) on the score's
        // 8-bit scale.
        let w = 9;
        let mut img = Image::constant(6, w, 0.0);
        for y in 0..6 {
            for x in 0..w {
                let v = x as f64 / (w - 1) as f64;
                for c in 0..3 {
                    img.set(c, y, x, v);
                }
            }
        }
        let expected = 255.0 / (w - 1) as f64;
        assert!((detail_score(&img) - expected).abs() < 1e-9);
    }

    #[test]
    fn detail_score_degenerate_region_is_zero() {
        assert_eq!(detail_score(&Image::constant(1, 10, 0.5)), 0.0);
        assert_eq!(detail_score(&Image::constant(10, 1, 0.5)), 0.0);
    }

    #[test]
    fn detail_score_matches_brute_force_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let (h, w) = (rng.gen_range(2..=64), rng.gen_range(2..=64));
            let data: Vec<f64> = (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
            let img = Image::new(h, w, data).unwrap();
            // brute force: recompute luminance per pixel, scan every position
            let lum = |y: usize, x: usize| {
                0.299 * img.get(0, y, x) + 0.587 * img.get(1, y, x) + 0.114 * img.get(2, y, x)
            };
            let mut best = f64::NEG_INFINITY;
            for y in 0..h - 1 {
                for x in 0..w - 1 {
                    let g = (lum(y, x + 1) - lum(y, x)) + (lum(y + 1, x) - lum(y, x));
                    best = best.max(g);
                }
            }
            assert_eq!(detail_score(&img), best * 255.0);
        }
    }

    #[test]
    fn bilinear_and_bicubic_agree_on_constants() {
        let img = Image::constant(30, 45, 0.77);
        let a = resize(&img, 100, ResizeMethod::Bilinear).unwrap();
        let b = resize(&img, 100, ResizeMethod::Bicubic).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
