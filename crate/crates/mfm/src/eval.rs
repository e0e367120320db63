//! Evaluation: disparity metrics, peak-position-deviation statistics,
//! error-map rendering, and the four-variant ablation runner.

use std::fmt::Write as _;
use std::path::Path;

use crate::aggregation::Variant;
use crate::data::Sample;
use crate::domain::{Config, DisparityMap, Error, FullCostVolume, Result, ValidMask};
use crate::network::Network;

fn check_aligned(pred: &DisparityMap, gt: &DisparityMap, mask: &ValidMask) -> Result<usize> {
    if pred.values.dim() != gt.values.dim() || pred.values.dim() != mask.flags.dim() {
        return Err(Error::Shape("metric inputs must share a shape".into()));
    }
    let valid = mask.count();
    if valid == 0 {
        return Err(Error::Mask("no valid pixels".into()));
    }
    Ok(valid)
}

/// End-point error: mean absolute disparity error over valid pixels.
pub fn epe(pred: &DisparityMap, gt: &DisparityMap, mask: &ValidMask) -> Result<f32> {
    let valid = check_aligned(pred, gt, mask)?;
    let mut acc = 0.0f64;
    for ((p, g), m) in pred.values.iter().zip(gt.values.iter()).zip(mask.flags.iter()) {
        if *m {
            acc += (*p - *g).abs() as f64;
        }
    }
    Ok((acc / valid as f64) as f32)
}

/// Fraction of valid pixels with error strictly greater than `t` pixels.
pub fn pct_error(pred: &DisparityMap, gt: &DisparityMap, mask: &ValidMask, t: f32) -> Result<f32> {
    if !(t > 0.0) {
        return Err(Error::Range(format!("threshold must be positive, got {t}")));
    }
    let valid = check_aligned(pred, gt, mask)?;
    let mut bad = 0usize;
    for ((p, g), m) in pred.values.iter().zip(gt.values.iter()).zip(mask.flags.iter()) {
        if *m && (*p - *g).abs() > t {
            bad += 1;
        }
    }
    Ok(bad as f32 / valid as f32)
}

/// Outlier rate with the adaptive threshold `max(3, 0.05 * gt)`.
pub fn d1(pred: &DisparityMap, gt: &DisparityMap, mask: &ValidMask) -> Result<f32> {
    let valid = check_aligned(pred, gt, mask)?;
    let mut bad = 0usize;
    for ((p, g), m) in pred.values.iter().zip(gt.values.iter()).zip(mask.flags.iter()) {
        if *m && (*p - *g).abs() > f32::max(3.0, 0.05 * *g) {
            bad += 1;
        }
    }
    Ok(bad as f32 / valid as f32)
}

/// For each threshold, the fraction of valid pixels whose score-volume
/// argmax deviates from the ground truth by more than that many pixels.
pub fn peak_deviation(
    v: &FullCostVolume,
    gt: &DisparityMap,
    mask: &ValidMask,
    thresholds: &[f32],
) -> Result<Vec<f32>> {
    if !v.normalized {
        return Err(Error::State("peak deviation expects a normalized volume".into()));
    }
    let (d_max, h, w) = v.scores.dim();
    if gt.values.dim() != (h, w) || mask.flags.dim() != (h, w) {
        return Err(Error::Shape("volume/gt shape mismatch".into()));
    }
    let valid = mask.count();
    if valid == 0 {
        return Err(Error::Mask("no valid pixels".into()));
    }
    let mut counts = vec![0usize; thresholds.len()];
    for y in 0..h {
        for x in 0..w {
            if !mask.flags[[y, x]] {
                continue;
            }
            let mut peak = 0usize;
            for d in 1..d_max {
                if v.scores[[d, y, x]] > v.scores[[peak, y, x]] {
                    peak = d;
                }
            }
            let dev = (peak as f32 - gt.values[[y, x]]).abs();
            for (i, t) in thresholds.iter().enumerate() {
                if dev > *t {
                    counts[i] += 1;
                }
            }
        }
    }
    Ok(counts.into_iter().map(|c| c as f32 / valid as f32).collect())
}

/// Absolute-error color scale: 0 px maps to dark blue, 5+ px to white,
/// invalid pixels to black.
pub const ERROR_MAP_MAX_PX: f32 = 5.0;

fn error_color(t: f32) -> [u8; 3] {
    let lerp = |a: [u8; 3], b: [u8; 3], t: f32| {
        [
            (a[0] as f32 + (b[0] as f32 - a[0] as f32) * t) as u8,
            (a[1] as f32 + (b[1] as f32 - a[1] as f32) * t) as u8,
            (a[2] as f32 + (b[2] as f32 - a[2] as f32) * t) as u8,
        ]
    };
    let dark = [0u8, 0, 96];
    let light = [30u8, 144, 255];
    let white = [255u8, 255, 255];
    let t = t.clamp(0.0, 1.0);
    if t <= 0.5 {
        lerp(dark, light, t * 2.0)
    } else {
        lerp(light, white, (t - 0.5) * 2.0)
    }
}

/// Renders `|pred - gt|` with the fixed color scale above.
pub fn error_map(
    pred: &DisparityMap,
    gt: &DisparityMap,
    mask: &ValidMask,
    out_path: &Path,
) -> Result<()> {
    check_aligned(pred, gt, mask)?;
    let (h, w) = pred.values.dim();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        let (yy, xx) = (y as usize, x as usize);
        if mask.flags[[yy, xx]] {
            let err = (pred.values[[yy, xx]] - gt.values[[yy, xx]]).abs();
            p.0 = error_color(err / ERROR_MAP_MAX_PX);
        } else {
            p.0 = [0, 0, 0];
        }
    }
    img.save(out_path).map_err(|e| Error::Format(format!("{e}")))?;
    Ok(())
}

/// Dataset-level metric summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub epe: f32,
    pub gt1: f32,
    pub gt3: f32,
    pub d1: f32,
    pub peak1: f32,
    pub peak3: f32,
    pub samples: usize,
}

impl EvalReport {
    pub fn print(&self) {
        println!("EPE {:.3}", self.epe);
        println!(">1px {:.2}%", self.gt1 * 100.0);
        println!(">3px {:.2}%", self.gt3 * 100.0);
        println!("D1 {:.2}%", self.d1 * 100.0);
        println!("peak>1px {:.2}%", self.peak1 * 100.0);
        println!("peak>3px {:.2}%", self.peak3 * 100.0);
    }
}

/// Runs inference over a dataset and averages the metrics per sample.
/// Optionally dumps each normalized cost volume to `dump_dir`.
pub fn evaluate_model(
    net: &Network<f32>,
    samples: &[Sample],
    dump_dir: Option<&Path>,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Arity("empty dataset".into()));
    }
    let mut sums = [0.0f64; 6];
    if let Some(dir) = dump_dir {
        std::fs::create_dir_all(dir)?;
    }
    for (i, s) in samples.iter().enumerate() {
        let inf = net.infer(&s.pair)?;
        let metrics = [
            epe(&inf.subpixel, &s.gt, &s.mask)?,
            pct_error(&inf.subpixel, &s.gt, &s.mask, 1.0)?,
            pct_error(&inf.subpixel, &s.gt, &s.mask, 3.0)?,
            d1(&inf.subpixel, &s.gt, &s.mask)?,
        ];
        let peaks = peak_deviation(&inf.volume, &s.gt, &s.mask, &[1.0, 3.0])?;
        for (acc, v) in sums.iter_mut().zip(metrics.iter().chain(peaks.iter())) {
            *acc += *v as f64;
        }
        if let Some(dir) = dump_dir {
            crate::assembly::write_volume(&dir.join(format!("{i:04}.vol")), &inf.volume)?;
        }
    }
    let n = samples.len() as f64;
    Ok(EvalReport {
        epe: (sums[0] / n) as f32,
        gt1: (sums[1] / n) as f32,
        gt3: (sums[2] / n) as f32,
        d1: (sums[3] / n) as f32,
        peak1: (sums[4] / n) as f32,
        peak3: (sums[5] / n) as f32,
        samples: samples.len(),
    })
}

/// Evaluates stored prediction maps (16-bit PNGs, one per sample index)
/// against a dataset's ground truth; no model involved.
pub fn evaluate_predictions(pred_dir: &Path, samples: &[Sample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Arity("empty dataset".into()));
    }
    let mut sums = [0.0f64; 4];
    for (i, s) in samples.iter().enumerate() {
        let (pred, pred_mask) = crate::data::read_disparity_png16(&crate::data::prediction_path(pred_dir, i))?;
        // valid where both gt and the stored prediction are valid
        let flags = ndarray::Zip::from(&s.mask.flags)
            .and(&pred_mask.flags)
            .map_collect(|a, b| *a && *b);
        let mask = ValidMask { flags };
        sums[0] += epe(&pred, &s.gt, &mask)? as f64;
        sums[1] += pct_error(&pred, &s.gt, &mask, 1.0)? as f64;
        sums[2] += pct_error(&pred, &s.gt, &mask, 3.0)? as f64;
        sums[3] += d1(&pred, &s.gt, &mask)? as f64;
    }
    let n = samples.len() as f64;
    Ok(EvalReport {
        epe: (sums[0] / n) as f32,
        gt1: (sums[1] / n) as f32,
        gt3: (sums[2] / n) as f32,
        d1: (sums[3] / n) as f32,
        peak1: 0.0,
        peak3: 0.0,
        samples: samples.len(),
    })
}

/// One ablation table row.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: Variant,
    pub epe: f32,
    pub gt1: f32,
    pub gt3: f32,
}

/// Trains all four variants sequentially with the identical seed and
/// budget, then evaluates each on the dataset. Rows come back in the
/// canonical order: baseline, decouple, multistage, full.
pub fn ablation_run(cfg: &Config, dataset: &[Sample]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(4);
    for variant in Variant::all() {
        let mut vcfg = cfg.clone();
        vcfg.train.checkpoint_dir = cfg.train.checkpoint_dir.join(variant.name());
        let mut net = Network::<f32>::new(&vcfg, variant)?;
        crate::train::train_loop(&mut net, dataset, None)?;
        let report = evaluate_model(&net, dataset, None)?;
        rows.push(AblationRow { variant, epe: report.epe, gt1: report.gt1, gt3: report.gt3 });
    }
    Ok(rows)
}

/// Aligned text table plus one machine-readable `key=value` block per row.
pub fn format_ablation_report(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    writeln!(out, "{:<12} {:>8} {:>9} {:>9}", "variant", "EPE", ">1px", ">3px").unwrap();
    for r in rows {
        writeln!(
            out,
            "{:<12} {:>8.3} {:>8.2}% {:>8.2}%",
            r.variant.name(),
            r.epe,
            r.gt1 * 100.0,
            r.gt3 * 100.0
        )
        .unwrap();
    }
    for r in rows {
        writeln!(out).unwrap();
        writeln!(out, "[{}]", r.variant.name()).unwrap();
        writeln!(out, "epe={:.6}", r.epe).unwrap();
        writeln!(out, "gt1px={:.6}", r.gt1).unwrap();
        writeln!(out, "gt3px={:.6}", r.gt3).unwrap();
    }
    out
}
