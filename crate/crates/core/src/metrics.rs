//! Image-quality and structure-preservation metrics. All statistics are
//! restricted to the field of view unless stated otherwise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Volume};

pub const DEFAULT_THRESHOLD_HU: f64 = 600.0;
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_DYNAMIC_RANGE: f64 = 2000.0;

fn check_images(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::param(format!(
            "image shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_volumes(a: &Volume, b: &Volume) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::param(format!(
            "volume shapes differ: {} slices {:?} vs {} slices {:?}",
            a.n_slices(),
            a.shape(),
            b.n_slices(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean absolute difference over FOV pixels.
pub fn mae(a: &Image, b: &Image) -> Result<f64> {
    check_images(a, b)?;
    let mask = a.fov_mask();
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((&x, &y), &m) in a.data().iter().zip(b.data()).zip(&mask) {
        if m {
            sum += (x as f64 - y as f64).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::param("empty field of view"));
    }
    Ok(sum / n as f64)
}

/// Pixel-weighted MAE across all slices.
pub fn volume_mae(a: &Volume, b: &Volume) -> Result<f64> {
    check_volumes(a, b)?;
    let mut sum = 0.0;
    for (x, y) in a.slices.iter().zip(&b.slices) {
        sum += mae(x, y)?;
    }
    Ok(sum / a.n_slices() as f64)
}

/// Mean local SSIM over uniform `window x window` patches lying entirely
/// inside the FOV, with population statistics and the usual stabilizers
/// `c1 = (0.01 L)^2`, `c2 = (0.03 L)^2`.
pub fn ssim(a: &Image, b: &Image, window: usize, dynamic_range: f64) -> Result<f64> {
    check_images(a, b)?;
    let (h, w) = a.shape();
    if window == 0 || window > h.min(w) {
        return Err(Error::param(format!("SSIM window {window} does not fit {h}x{w}")));
    }
    if dynamic_range <= 0.0 {
        return Err(Error::param("SSIM dynamic range must be positive"));
    }
    let c1 = (0.01 * dynamic_range).powi(2);
    let c2 = (0.03 * dynamic_range).powi(2);
    let mask = a.fov_mask();
    // integral image of outside-FOV pixels to test windows in O(1)
    let mut outside = vec![0u32; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            outside[(y + 1) * (w + 1) + x + 1] = outside[y * (w + 1) + x + 1] + outside[(y + 1) * (w + 1) + x]
                - outside[y * (w + 1) + x]
                + u32::from(!mask[y * w + x]);
        }
    }
    let n = (window * window) as f64;
    let (da, db) = (a.data(), b.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - window {
        for x0 in 0..=w - window {
            let (y1, x1) = (y0 + window, x0 + window);
            let bad = outside[y1 * (w + 1) + x1] + outside[y0 * (w + 1) + x0]
                - outside[y0 * (w + 1) + x1]
                - outside[y1 * (w + 1) + x0];
            if bad > 0 {
                continue;
            }
            let (mut sa, mut sb) = (0.0, 0.0);
            for y in y0..y1 {
                for x in x0..x1 {
                    sa += da[y * w + x] as f64;
                    sb += db[y * w + x] as f64;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = da[y * w + x] as f64 - ma;
                    let q = db[y * w + x] as f64 - mb;
                    va += p * p;
                    vb += q * q;
                    cov += p * q;
                }
            }
            let (va, vb, cov) = (va / n, vb / n, cov / n);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::param("no SSIM window fits inside the field of view"));
    }
    Ok(total / count as f64)
}

/// SSIM with the default window and HU dynamic range.
pub fn ssim_default(a: &Image, b: &Image) -> Result<f64> {
    ssim(a, b, SSIM_WINDOW, SSIM_DYNAMIC_RANGE)
}

/// Slice-averaged SSIM.
pub fn volume_ssim(a: &Volume, b: &Volume) -> Result<f64> {
    check_volumes(a, b)?;
    let mut sum = 0.0;
    for (x, y) in a.slices.iter().zip(&b.slices) {
        sum += ssim_default(x, y)?;
    }
    Ok(sum / a.n_slices() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuralChangeReport {
    pub rmse_hu: f64,
    pub error_pixels: u64,
    pub threshold_hu: f64,
    pub fov_pixels: u64,
    /// Signed difference per slice with sub-threshold values zeroed.
    #[serde(skip)]
    pub colormaps: Vec<Image>,
}

impl StructuralChangeReport {
    pub fn error_fraction(&self) -> f64 {
        self.error_pixels as f64 / self.fov_pixels as f64
    }
}

/// Thresholded difference `syn - cbct`: entries with `|d| < threshold` are
/// zeroed, RMSE is taken over every FOV pixel and nonzero entries are counted.
pub fn structural_change(syn: &Volume, cbct: &Volume, threshold_hu: f64) -> Result<StructuralChangeReport> {
    check_volumes(syn, cbct)?;
    if !(threshold_hu >= 0.0) {
        return Err(Error::param("threshold must be non-negative"));
    }
    let mut sq = 0.0;
    let mut errors = 0u64;
    let mut fov = 0u64;
    let mut colormaps = Vec::with_capacity(syn.n_slices());
    for (s, c) in syn.slices.iter().zip(&cbct.slices) {
        let mask = s.fov_mask();
        let mut diff = Image::filled(s.height(), s.width(), s.fov_radius(), 0.0);
        for (i, &m) in mask.iter().enumerate() {
            if !m {
                continue;
            }
            fov += 1;
            let d = s.data()[i] as f64 - c.data()[i] as f64;
            if d.abs() >= threshold_hu && d != 0.0 {
                diff.data_mut()[i] = d as f32;
                sq += d * d;
                errors += 1;
            }
        }
        colormaps.push(diff);
    }
    if fov == 0 {
        return Err(Error::param("empty field of view"));
    }
    Ok(StructuralChangeReport {
        rmse_hu: (sq / fov as f64).sqrt(),
        error_pixels: errors,
        threshold_hu,
        fov_pixels: fov,
        colormaps,
    })
}

/// Pixelwise mean across slices.
pub fn mean_volume(v: &Volume) -> Result<Image> {
    let first = v.slices.first().ok_or_else(|| Error::data("empty volume"))?;
    let mut acc = vec![0.0f64; first.data().len()];
    for s in &v.slices {
        for (a, &x) in acc.iter_mut().zip(s.data()) {
            *a += x as f64;
        }
    }
    let n = v.n_slices() as f64;
    Image::from_vec(
        first.height(),
        first.width(),
        first.fov_radius(),
        acc.into_iter().map(|a| (a / n) as f32).collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    /// FOV pixels below `lo` and above `hi`.
    pub below: u64,
    pub above: u64,
}

impl Histogram {
    pub fn bin_edges(&self) -> Vec<f64> {
        let n = self.counts.len();
        (0..=n)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / n as f64)
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.below + self.above
    }
}

/// Histogram of FOV values over `[lo, hi]` (upper edge inclusive).
pub fn histogram(image: &Image, lo: f64, hi: f64, bins: usize) -> Result<Histogram> {
    if bins < 2 {
        return Err(Error::param("histogram needs at least two bins"));
    }
    if !(hi > lo) {
        return Err(Error::param("histogram range is empty"));
    }
    let mut h = Histogram {
        lo,
        hi,
        counts: vec![0; bins],
        below: 0,
        above: 0,
    };
    let width = (hi - lo) / bins as f64;
    for v in image.fov_values() {
        let v = v as f64;
        if v < lo {
            h.below += 1;
        } else if v > hi {
            h.above += 1;
        } else {
            let b = (((v - lo) / width) as usize).min(bins - 1);
            h.counts[b] += 1;
        }
    }
    Ok(h)
}

/// Pearson correlation of two count vectors.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::param("correlation inputs must be non-empty and equal length"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::data("correlation undefined for a constant histogram"));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation between the FOV histograms of two images.
pub fn histogram_correlation(a: &Image, b: &Image, lo: f64, hi: f64, bins: usize) -> Result<f64> {
    check_images(a, b)?;
    let ha = histogram(a, lo, hi, bins)?;
    let hb = histogram(b, lo, hi, bins)?;
    let ca: Vec<f64> = ha.counts.iter().map(|&c| c as f64).collect();
    let cb: Vec<f64> = hb.counts.iter().map(|&c| c as f64).collect();
    pearson(&ca, &cb)
}

/// Mean over the `size x size` square whose top-left corner is
/// `center - size / 2`.
pub fn roi_mean(image: &Image, center: (usize, usize), size: usize) -> Result<f64> {
    if size == 0 {
        return Err(Error::param("ROI size must be positive"));
    }
    let half = size / 2;
    let (cy, cx) = center;
    if cy < half || cx < half || cy - half + size > image.height() || cx - half + size > image.width() {
        return Err(Error::param(format!(
            "ROI of size {size} at {center:?} leaves the {}x{} image",
            image.height(),
            image.width()
        )));
    }
    let mut sum = 0.0;
    for y in cy - half..cy - half + size {
        for x in cx - half..cx - half + size {
            sum += image.get(y, x) as f64;
        }
    }
    Ok(sum / (size * size) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub threshold_hu: f64,
    pub hist_lo: f64,
    pub hist_hi: f64,
    pub bins: usize,
    pub rois: Vec<(usize, usize)>,
    pub roi_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold_hu: DEFAULT_THRESHOLD_HU,
            hist_lo: -500.0,
            hist_hi: 500.0,
            bins: 100,
            rois: Vec::new(),
            roi_size: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiMean {
    pub center: (usize, usize),
    pub mean_hu: f64,
}

/// CT-value statistics of a volume's average image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtValueReport {
    pub mean_hu: f64,
    pub std_hu: f64,
    pub histogram: Histogram,
    /// Histogram correlation against the reference average image; `None`
    /// when either histogram is constant over the range.
    pub correlation: Option<f64>,
    pub roi_means: Vec<RoiMean>,
}

fn ct_values(avg: &Image, reference_avg: &Image, cfg: &EvalConfig) -> Result<CtValueReport> {
    let vals = avg.fov_values();
    let n = vals.len() as f64;
    let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let roi_means = cfg
        .rois
        .iter()
        .map(|&c| {
            Ok(RoiMean {
                center: c,
                mean_hu: roi_mean(avg, c, cfg.roi_size)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CtValueReport {
        mean_hu: mean,
        std_hu: var.sqrt(),
        histogram: histogram(avg, cfg.hist_lo, cfg.hist_hi, cfg.bins)?,
        correlation: match histogram_correlation(avg, reference_avg, cfg.hist_lo, cfg.hist_hi, cfg.bins) {
            Ok(r) => Some(r),
            Err(Error::Data(_)) => None,
            Err(e) => return Err(e),
        },
        roi_means,
    })
}

/// Table-style evaluation of a corrected volume against its input and reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub config: EvalConfig,
    pub syn_vs_cbct: StructuralChangeReport,
    pub syn_vs_reference: StructuralChangeReport,
    pub mae_syn_reference: f64,
    pub mae_cbct_reference: f64,
    pub ssim_syn_reference: f64,
    pub ssim_cbct_reference: f64,
    pub cbct: CtValueReport,
    pub syn: CtValueReport,
    pub reference: CtValueReport,
}

pub fn evaluate_run(syn: &Volume, cbct: &Volume, reference: &Volume, cfg: &EvalConfig) -> Result<EvaluationReport> {
    check_volumes(syn, cbct)?;
    check_volumes(syn, reference)?;
    let ref_avg = mean_volume(reference)?;
    Ok(EvaluationReport {
        config: cfg.clone(),
        syn_vs_cbct: structural_change(syn, cbct, cfg.threshold_hu)?,
        syn_vs_reference: structural_change(syn, reference, cfg.threshold_hu)?,
        mae_syn_reference: volume_mae(syn, reference)?,
        mae_cbct_reference: volume_mae(cbct, reference)?,
        ssim_syn_reference: volume_ssim(syn, reference)?,
        ssim_cbct_reference: volume_ssim(cbct, reference)?,
        cbct: ct_values(&mean_volume(cbct)?, &ref_avg, cfg)?,
        syn: ct_values(&mean_volume(syn)?, &ref_avg, cfg)?,
        reference: ct_values(&ref_avg, &ref_avg, cfg)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomSpec};

    fn vol(slices: Vec<Image>) -> Volume {
        let r = slices[0].fov_radius();
        Volume::new(slices, [1.0, 1.0, 1.0], r).unwrap()
    }

    #[test]
    fn mae_examples() {
        let a = generate_phantom(&PhantomSpec::with_size(32, 32, 1, 2)).unwrap().slices.remove(0);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        let mask = a.fov_mask();
        for (v, &m) in b.data_mut().iter_mut().zip(&mask) {
            if m {
                *v += 10.0;
            }
        }
        assert!((mae(&a, &b).unwrap() - 10.0).abs() < 1e-4);
        assert!(mae(&a, &Image::filled(16, 16, 7, 0.0)).is_err());
    }

    #[test]
    fn ssim_examples() {
        let a = generate_phantom(&PhantomSpec::with_size(64, 64, 1, 2)).unwrap().slices.remove(0);
        assert!((ssim_default(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let c = Image::filled(32, 32, 15, 100.0);
        assert!((ssim_default(&c, &c).unwrap() - 1.0).abs() < 1e-12);
        let mut neg = a.clone();
        for v in neg.data_mut() {
            *v = -*v - 1000.0;
        }
        assert!(ssim_default(&a, &neg).unwrap() < 0.5);
        assert!(ssim(&a, &a, 65, 2000.0).is_err());
    }

    #[test]
    fn structural_change_examples() {
        let base = Image::filled(16, 16, 7, 0.0);
        let n = base.fov_pixel_count() as f64;
        let a = vol(vec![base.clone()]);
        let r = structural_change(&a, &a, 600.0).unwrap();
        assert_eq!((r.rmse_hu, r.error_pixels), (0.0, 0));
        let mut one = base.clone();
        one.set(8, 8, 700.0);
        let r = structural_change(&vol(vec![one]), &a, 600.0).unwrap();
        assert_eq!(r.error_pixels, 1);
        assert!((r.rmse_hu - 700.0 / n.sqrt()).abs() < 1e-9);
        assert_eq!(r.colormaps[0].get(8, 8), 700.0);
        let mut small = base;
        small.set(8, 8, 500.0);
        let r = structural_change(&vol(vec![small]), &a, 600.0).unwrap();
        assert_eq!((r.rmse_hu, r.error_pixels), (0.0, 0));
    }

    #[test]
    fn mean_volume_midpoint() {
        let a = generate_phantom(&PhantomSpec::with_size(32, 32, 1, 4)).unwrap().slices.remove(0);
        let mut b = a.clone();
        for v in b.data_mut() {
            *v = -*v;
        }
        let m = mean_volume(&vol(vec![a.clone(), b])).unwrap();
        assert!(m.data().iter().all(|&v| v.abs() < 1e-4));
        assert_eq!(mean_volume(&vol(vec![a.clone()])).unwrap(), a);
    }

    #[test]
    fn histogram_correlation_examples() {
        let a = generate_phantom(&PhantomSpec::with_size(32, 32, 1, 5)).unwrap().slices.remove(0);
        assert!((histogram_correlation(&a, &a, -500.0, 500.0, 100).unwrap() - 1.0).abs() < 1e-12);
        let x = Image::filled(16, 16, 7, -200.0);
        let y = Image::filled(16, 16, 7, 200.0);
        let r = histogram_correlation(&x, &y, -500.0, 500.0, 100).unwrap();
        assert!(r < 0.0);
        // one-hot Pearson closed form: -1 / (n - 1)
        assert!((r + 1.0 / 99.0).abs() < 1e-12);
        let empty = Image::filled(16, 16, 7, -1000.0);
        assert!(matches!(
            histogram_correlation(&empty, &x, -500.0, 500.0, 100),
            Err(Error::Data(_))
        ));
        let h = histogram(&a, -500.0, 500.0, 100).unwrap();
        assert_eq!(h.total(), a.fov_pixel_count() as u64);
    }

    #[test]
    fn roi_examples() {
        let mut img = Image::filled(16, 16, 7, 30.0);
        assert_eq!(roi_mean(&img, (8, 8), 4).unwrap(), 30.0);
        img.set(9, 9, 30.0 + 16.0 * 5.0);
        assert_eq!(roi_mean(&img, (8, 8), 4).unwrap(), 35.0);
        assert!(roi_mean(&img, (1, 8), 4).is_err());
        assert!(roi_mean(&img, (15, 8), 4).is_err());
    }

    #[test]
    fn evaluate_identical() {
        let v = generate_phantom(&PhantomSpec::with_size(32, 32, 2, 6)).unwrap();
        let cfg = EvalConfig {
            rois: vec![(16, 16)],
            ..Default::default()
        };
        let r = evaluate_run(&v, &v, &v, &cfg).unwrap();
        assert_eq!(r.syn_vs_cbct.error_pixels, 0);
        assert_eq!(r.syn_vs_cbct.rmse_hu, 0.0);
        assert_eq!(r.reference.correlation, Some(1.0));
        assert_eq!(r.syn.correlation, Some(1.0));
    }
}
