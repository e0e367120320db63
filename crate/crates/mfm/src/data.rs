//! Synthetic stereo data with exact ground truth, plus readers and writers
//! for the standard disparity file formats.
//!
//! A random-dot stereogram is built backwards: the right image is i.i.d.
//! noise and the left image samples it at `x - d(x, y)`, so the disparity
//! field is known exactly, including fractional values.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{DisparityMap, Error, ImagePair, Result, ValidMask};

/// One foreground rectangle: `(x0, y0)` corner, square side, disparity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DispRect {
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
    pub disp: f32,
}

/// Geometry of one random-dot stereogram.
#[derive(Debug, Clone, PartialEq)]
pub struct RdsSpec {
    pub height: usize,
    pub width: usize,
    pub background_disp: f32,
    pub squares: Vec<DispRect>,
    pub noise_seed: u64,
}

impl RdsSpec {
    /// Paints the disparity field: background first, then each square in
    /// order.
    pub fn disparity_field(&self) -> Array2<f32> {
        let mut d = Array2::from_elem((self.height, self.width), self.background_disp);
        for sq in &self.squares {
            for y in sq.y0..sq.y0 + sq.size {
                for x in sq.x0..sq.x0 + sq.size {
                    d[[y, x]] = sq.disp;
                }
            }
        }
        d
    }

    fn check(&self, d_max: usize) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Spec("empty image".into()));
        }
        if !(self.background_disp >= 0.0) || self.background_disp >= d_max as f32 {
            return Err(Error::Spec(format!(
                "background disparity {} outside [0, {d_max})",
                self.background_disp
            )));
        }
        for sq in &self.squares {
            if sq.x0 + sq.size > self.width || sq.y0 + sq.size > self.height || sq.size == 0 {
                return Err(Error::Spec(format!("rectangle {sq:?} outside the image")));
            }
            if !(sq.disp >= 0.0) || sq.disp >= d_max as f32 {
                return Err(Error::Spec(format!(
                    "rectangle disparity {} outside [0, {d_max})",
                    sq.disp
                )));
            }
            // Covered pixels must warp in bounds.
            if (sq.x0 as f32) - sq.disp < 0.0 {
                return Err(Error::Spec(format!(
                    "rectangle at x0={} with disparity {} warps out of bounds",
                    sq.x0, sq.disp
                )));
            }
        }
        Ok(())
    }
}

/// A stereo pair with dense ground truth and a validity mask.
#[derive(Debug, Clone)]
pub struct Sample {
    pub pair: ImagePair,
    pub gt: DisparityMap,
    pub mask: ValidMask,
}

/// Renders a random-dot stereogram. The right image is uniform noise from
/// `noise_seed`; the left image is its warp by the disparity field with
/// linear blending for fractional disparities. Pixels whose source column
/// is out of range, or is claimed by a larger (nearer) disparity, are
/// masked invalid. Deterministic: same spec, same output bits.
pub fn gen_rds(spec: &RdsSpec, d_max: usize) -> Result<Sample> {
    spec.check(d_max)?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.noise_seed);
    let mut right = Array3::<f32>::zeros((h, w, 3));
    for v in right.iter_mut() {
        *v = rng.gen_range(0.0..1.0);
    }
    let disp = spec.disparity_field();

    // Z-buffer over source columns: the largest disparity claiming a column
    // is the visible surface there.
    let mut left = Array3::<f32>::zeros((h, w, 3));
    let mut mask = Array2::<bool>::from_elem((h, w), false);
    let mut zbuf = vec![f32::NEG_INFINITY; w];
    for y in 0..h {
        zbuf.iter_mut().for_each(|z| *z = f32::NEG_INFINITY);
        for x in 0..w {
            let d = disp[[y, x]];
            let xs = x as f32 - d;
            if xs < 0.0 {
                continue;
            }
            let x0 = xs.floor() as usize;
            let frac = xs - x0 as f32;
            zbuf[x0] = zbuf[x0].max(d);
            if frac > 0.0 {
                zbuf[x0 + 1] = zbuf[x0 + 1].max(d);
            }
        }
        for x in 0..w {
            let d = disp[[y, x]];
            let xs = x as f32 - d;
            if xs < 0.0 {
                // No source sample; fill with fresh noise so the texture
                // statistics stay uniform.
                for c in 0..3 {
                    left[[y, x, c]] = rng.gen_range(0.0..1.0);
                }
                continue;
            }
            let x0 = xs.floor() as usize;
            let frac = xs - x0 as f32;
            for c in 0..3 {
                let v = if frac > 0.0 {
                    (1.0 - frac) * right[[y, x0, c]] + frac * right[[y, x0 + 1, c]]
                } else {
                    right[[y, x0, c]]
                };
                left[[y, x, c]] = v;
            }
            let visible = d >= zbuf[x0] && (frac == 0.0 || d >= zbuf[x0 + 1]);
            mask[[y, x]] = visible;
        }
    }

    Ok(Sample {
        pair: ImagePair { left, right },
        gt: DisparityMap::full(disp),
        mask: ValidMask { flags: mask },
    })
}

/// Distribution over [`RdsSpec`]s, loadable from a `key=value` file. Each
/// dataset index deterministically selects geometry and noise.
#[derive(Debug, Clone, PartialEq)]
pub struct RdsDatasetSpec {
    pub height: usize,
    pub width: usize,
    pub d_max: usize,
    pub bg_disp_min: f32,
    pub bg_disp_max: f32,
    pub squares_min: usize,
    pub squares_max: usize,
    pub size_min: usize,
    pub size_max: usize,
    pub disp_min: f32,
    pub disp_max: f32,
    /// Draw real-valued disparities; otherwise round to integers.
    pub fractional: bool,
}

impl Default for RdsDatasetSpec {
    fn default() -> Self {
        RdsDatasetSpec {
            height: 64,
            width: 96,
            d_max: 16,
            bg_disp_min: 1.0,
            bg_disp_max: 3.0,
            squares_min: 2,
            squares_max: 4,
            size_min: 10,
            size_max: 24,
            disp_min: 4.0,
            disp_max: 14.0,
            fractional: true,
        }
    }
}

impl RdsDatasetSpec {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut spec = RdsDatasetSpec::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got '{line}'", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
                value.parse::<T>().map_err(|_| {
                    Error::Config(format!("invalid value '{value}' for key '{key}'"))
                })
            }
            match key {
                "height" => spec.height = num(key, value)?,
                "width" => spec.width = num(key, value)?,
                "d_max" => spec.d_max = num(key, value)?,
                "bg_disp_min" => spec.bg_disp_min = num(key, value)?,
                "bg_disp_max" => spec.bg_disp_max = num(key, value)?,
                "squares_min" => spec.squares_min = num(key, value)?,
                "squares_max" => spec.squares_max = num(key, value)?,
                "size_min" => spec.size_min = num(key, value)?,
                "size_max" => spec.size_max = num(key, value)?,
                "disp_min" => spec.disp_min = num(key, value)?,
                "disp_max" => spec.disp_max = num(key, value)?,
                "fractional" => spec.fractional = num(key, value)?,
                other => return Err(Error::Config(format!("unknown key '{other}'"))),
            }
        }
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Draws the geometry for dataset element `index` under `seed`.
    pub fn instance(&self, seed: u64, index: u64) -> Result<RdsSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9e3779b97f4a7c15));
        let round = |v: f32, fractional: bool| if fractional { v } else { v.round() };
        let bg = round(rng.gen_range(self.bg_disp_min..=self.bg_disp_max), self.fractional);
        let count = rng.gen_range(self.squares_min..=self.squares_max);
        let mut squares = Vec::with_capacity(count);
        for _ in 0..count {
            let size = rng.gen_range(self.size_min..=self.size_max.min(self.width.min(self.height)));
            let disp = round(rng.gen_range(self.disp_min..=self.disp_max), self.fractional);
            // Keep the warp in bounds for every covered pixel.
            let x_lo = disp.ceil() as usize;
            let x_hi = self.width - size;
            if x_lo > x_hi {
                return Err(Error::Spec(format!(
                    "disparity {disp} leaves no room for a {size}-wide rectangle"
                )));
            }
            let x0 = rng.gen_range(x_lo..=x_hi);
            let y0 = rng.gen_range(0..=self.height - size);
            squares.push(DispRect { x0, y0, size, disp });
        }
        Ok(RdsSpec {
            height: self.height,
            width: self.width,
            background_disp: bg,
            squares,
            noise_seed: seed ^ (index.wrapping_mul(2) + 1),
        })
    }
}

// ---------------------------------------------------------------------------
// PFM
// ---------------------------------------------------------------------------

/// Reads a grayscale `Pf` file: ASCII header (type, dims, scale), then a
/// binary float payload stored bottom-to-top. The sign of the scale picks
/// the byte order. Returns rows top-to-bottom plus the scale magnitude.
pub fn read_pfm(path: &Path) -> Result<(Array2<f32>, f32)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse_pfm(&bytes)
}

fn pfm_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated header".into()));
    }
    String::from_utf8(bytes[start..*pos].to_vec())
        .map_err(|_| Error::Format("non-ascii header".into()))
}

pub(crate) fn parse_pfm(bytes: &[u8]) -> Result<(Array2<f32>, f32)> {
    let mut pos = 0usize;
    let kind = pfm_token(bytes, &mut pos)?;
    if kind != "Pf" {
        return Err(Error::Format(format!("expected 'Pf' header, got '{kind}'")));
    }
    let w: usize = pfm_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::Format("bad width".into()))?;
    let h: usize = pfm_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::Format("bad height".into()))?;
    let scale: f32 = pfm_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::Format("bad scale".into()))?;
    if scale == 0.0 {
        return Err(Error::Format("scale must be nonzero".into()));
    }
    // Exactly one whitespace byte separates header and payload.
    if pos >= bytes.len() {
        return Err(Error::Format("truncated payload".into()));
    }
    pos += 1;
    let need = w * h * 4;
    if bytes.len() < pos + need {
        return Err(Error::Format(format!(
            "truncated payload: need {need} bytes, have {}",
            bytes.len() - pos
        )));
    }
    let little = scale < 0.0;
    let mut arr = Array2::<f32>::zeros((h, w));
    for row in 0..h {
        // PFM stores the bottom row first.
        let y = h - 1 - row;
        for x in 0..w {
            let off = pos + (row * w + x) * 4;
            let raw: [u8; 4] = bytes[off..off + 4].try_into().unwrap();
            let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
            arr[[y, x]] = v;
        }
    }
    Ok((arr, scale.abs()))
}

/// Writes a grayscale little-endian PFM (scale -1.0), rows given
/// top-to-bottom.
pub fn write_pfm(path: &Path, values: &Array2<f32>) -> Result<()> {
    let (h, w) = values.dim();
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    write!(out, "Pf\n{w} {h}\n-1.0\n")?;
    for row in 0..h {
        let y = h - 1 - row;
        for x in 0..w {
            out.write_all(&values[[y, x]].to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// 16-bit PNG disparity
// ---------------------------------------------------------------------------

/// Reads a 16-bit single-channel PNG: disparity = stored / 256, stored 0
/// marks an invalid pixel.
pub fn read_disparity_png16(path: &Path) -> Result<(DisparityMap, ValidMask)> {
    let img = image::open(path).map_err(|e| Error::Format(format!("{e}")))?;
    let gray = match img {
        image::DynamicImage::ImageLuma16(g) => g,
        other => {
            return Err(Error::Format(format!(
                "expected 16-bit grayscale, got {:?}",
                other.color()
            )))
        }
    };
    let (w, h) = gray.dimensions();
    let mut values = Array2::<f32>::zeros((h as usize, w as usize));
    let mut flags = Array2::<bool>::from_elem((h as usize, w as usize), false);
    for (x, y, p) in gray.enumerate_pixels() {
        let raw = p.0[0];
        if raw != 0 {
            values[[y as usize, x as usize]] = raw as f32 / 256.0;
            flags[[y as usize, x as usize]] = true;
        }
    }
    Ok((DisparityMap::full(values), ValidMask { flags }))
}

/// Writes a disparity map as 16-bit PNG (`stored = round(d * 256)`),
/// clamped to the representable range; invalid pixels store 0.
pub fn write_disparity_png16(path: &Path, d: &DisparityMap, mask: Option<&ValidMask>) -> Result<()> {
    let (h, w) = d.values.dim();
    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        let valid = mask.is_none_or(|m| m.flags[[y as usize, x as usize]]);
        let v = d.values[[y as usize, x as usize]];
        let stored = if valid { (v * 256.0).round().clamp(0.0, 65535.0) as u16 } else { 0 };
        *p = image::Luma([stored]);
    }
    img.save(path).map_err(|e| Error::Format(format!("{e}")))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// 8-bit RGB image I/O
// ---------------------------------------------------------------------------

/// Loads an 8-bit image as `(H, W, 3)` floats in [0, 1].
pub fn read_image_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|e| Error::Format(format!("{e}")))?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut arr = Array3::<f32>::zeros((h as usize, w as usize, 3));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            arr[[y as usize, x as usize, c]] = p.0[c] as f32 / 255.0;
        }
    }
    Ok(arr)
}

pub fn write_image_rgb(path: &Path, arr: &Array3<f32>) -> Result<()> {
    let (h, w, c) = arr.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        for ci in 0..3 {
            p.0[ci] = (arr[[y as usize, x as usize, ci]].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    img.save(path).map_err(|e| Error::Format(format!("{e}")))?;
    Ok(())
}

/// Writes an 8-bit 0/255 mask PNG.
pub fn write_mask_png(path: &Path, mask: &ValidMask) -> Result<()> {
    let (h, w) = mask.flags.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        p.0[0] = if mask.flags[[y as usize, x as usize]] { 255 } else { 0 };
    }
    img.save(path).map_err(|e| Error::Format(format!("{e}")))?;
    Ok(())
}

pub fn read_mask_png(path: &Path) -> Result<ValidMask> {
    let img = image::open(path).map_err(|e| Error::Format(format!("{e}")))?.to_luma8();
    let (w, h) = img.dimensions();
    let mut flags = Array2::<bool>::from_elem((h as usize, w as usize), false);
    for (x, y, p) in img.enumerate_pixels() {
        flags[[y as usize, x as usize]] = p.0[0] >= 128;
    }
    Ok(ValidMask { flags })
}

// ---------------------------------------------------------------------------
// On-disk datasets
// ---------------------------------------------------------------------------

/// Writes `left/right/disp/mask` files for one sample under a shared stem.
pub fn write_sample(dir: &Path, index: usize, sample: &Sample) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let stem = format!("{index:04}");
    write_image_rgb(&dir.join(format!("{stem}_left.png")), &sample.pair.left)?;
    write_image_rgb(&dir.join(format!("{stem}_right.png")), &sample.pair.right)?;
    write_disparity_png16(&dir.join(format!("{stem}_disp.png")), &sample.gt, Some(&sample.mask))?;
    write_mask_png(&dir.join(format!("{stem}_mask.png")), &sample.mask)?;
    Ok(())
}

/// Loads every `*_left.png` sample triple in a directory, sorted by stem.
/// `n` is the downsampling ratio the image dims must divide by.
pub fn load_dataset(dir: &Path, n: usize) -> Result<Vec<Sample>> {
    let mut stems: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_suffix("_left.png").map(|s| s.to_string())
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(Error::Format(format!("no samples found in {}", dir.display())));
    }
    let mut samples = Vec::with_capacity(stems.len());
    for stem in stems {
        let left = read_image_rgb(&dir.join(format!("{stem}_left.png")))?;
        let right = read_image_rgb(&dir.join(format!("{stem}_right.png")))?;
        let (gt, png_mask) = read_disparity_png16(&dir.join(format!("{stem}_disp.png")))?;
        let mask_path = dir.join(format!("{stem}_mask.png"));
        let mask = if mask_path.exists() { read_mask_png(&mask_path)? } else { png_mask };
        samples.push(Sample { pair: ImagePair::new(left, right, n)?, gt, mask });
    }
    Ok(samples)
}

/// Candidate directory for predicted disparity maps matching a dataset.
pub fn prediction_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{index:04}_disp.png"))
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// A stack of cropped samples in channel-first layout.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B, 3, H, W)`
    pub left: Array4<f32>,
    pub right: Array4<f32>,
    /// `(B, H, W)`, full-resolution pixel units.
    pub gt: Array3<f32>,
    pub mask: Array3<bool>,
}

impl Batch {
    pub fn dims(&self) -> (usize, usize, usize) {
        let (b, _, h, w) = self.left.dim();
        (b, h, w)
    }
}

/// Crops each sample at a seeded random window (shared across the four
/// planes of a sample) and stacks the results. Crop dims of 0 mean the full
/// frame; otherwise they must divide by `n` and fit every sample.
pub fn make_batch(
    samples: &[&Sample],
    crop_h: usize,
    crop_w: usize,
    n: usize,
    seed: u64,
) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::Arity("empty batch".into()));
    }
    let (full_h, full_w) = (samples[0].pair.height(), samples[0].pair.width());
    let (crop_h, crop_w) = (
        if crop_h == 0 { full_h } else { crop_h },
        if crop_w == 0 { full_w } else { crop_w },
    );
    if crop_h % n != 0 || crop_w % n != 0 {
        return Err(Error::Range(format!(
            "crop dims {crop_h}x{crop_w} must divide by n={n}"
        )));
    }
    let b = samples.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut left = Array4::<f32>::zeros((b, 3, crop_h, crop_w));
    let mut right = Array4::<f32>::zeros((b, 3, crop_h, crop_w));
    let mut gt = Array3::<f32>::zeros((b, crop_h, crop_w));
    let mut mask = Array3::<bool>::from_elem((b, crop_h, crop_w), false);
    for (bi, sample) in samples.iter().enumerate() {
        let (h, w) = (sample.pair.height(), sample.pair.width());
        if crop_h > h || crop_w > w {
            return Err(Error::Range(format!(
                "crop {crop_h}x{crop_w} exceeds sample {h}x{w}"
            )));
        }
        let y0 = if h == crop_h { 0 } else { rng.gen_range(0..=h - crop_h) };
        let x0 = if w == crop_w { 0 } else { rng.gen_range(0..=w - crop_w) };
        for y in 0..crop_h {
            for x in 0..crop_w {
                for c in 0..3 {
                    left[[bi, c, y, x]] = sample.pair.left[[y0 + y, x0 + x, c]];
                    right[[bi, c, y, x]] = sample.pair.right[[y0 + y, x0 + x, c]];
                }
                gt[[bi, y, x]] = sample.gt.values[[y0 + y, x0 + x]];
                mask[[bi, y, x]] = sample.mask.flags[[y0 + y, x0 + x]];
            }
        }
    }
    Ok(Batch { left, right, gt, mask })
}

/// Converts one full sample into a batch of one without cropping.
pub fn single_batch(sample: &Sample) -> Batch {
    make_batch(&[sample], 0, 0, 1, 0).expect("full-frame batch")
}
