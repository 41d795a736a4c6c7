//! Parallel-beam Radon transform and filtered backprojection.
//!
//! Images are projected in attenuation space, `a = (HU + 1000) / 2000`, so air
//! contributes nothing and every sinogram of a valid image is nonnegative.
//! Projection is pixel driven: each pixel is split into 2x2 sub-pixels whose
//! mass is distributed onto the two nearest detector bins by linear
//! interpolation, which conserves mass per angle exactly. Backprojection is
//! the matching pixel-driven operator with linear interpolation on the
//! filtered rows.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::image::{hu_to_unit, Fov, Image, HU_MAX, HU_MIN, HU_SPAN};

/// Projection-space grid of line integrals, `n_angles x n_detectors`, row per angle.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    n_angles: usize,
    n_detectors: usize,
    data: Vec<f64>,
    angles: Vec<f64>,
    /// Detector bin pitch in image pixels.
    pub detector_spacing: f64,
    /// Maximum of the source sinogram; STEP-3 style clipping refers to it.
    pub s_max: f64,
    image_height: usize,
    image_width: usize,
    fov_radius: u32,
}

/// Number of detector bins for an image, covering its full diagonal.
pub fn detector_count(height: usize, width: usize) -> usize {
    let diag = ((height * height + width * width) as f64).sqrt();
    diag.ceil() as usize + 2
}

/// Uniformly spaced angles over `[0, π)`.
pub fn projection_angles(n_angles: usize) -> Vec<f64> {
    (0..n_angles)
        .map(|k| k as f64 * PI / n_angles as f64)
        .collect()
}

impl Sinogram {
    /// All-zero sinogram laid out for an image of the given geometry.
    pub fn zeros(n_angles: usize, image_height: usize, image_width: usize, fov_radius: u32) -> Self {
        let n_detectors = detector_count(image_height, image_width);
        Sinogram {
            n_angles,
            n_detectors,
            data: vec![0.0; n_angles * n_detectors],
            angles: projection_angles(n_angles),
            detector_spacing: 1.0,
            s_max: 0.0,
            image_height,
            image_width,
            fov_radius,
        }
    }

    /// A sinogram with the same geometry as `self` holding `data`.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        if data.len() != self.data.len() {
            return Err(Error::param(format!(
                "sinogram data has {} values, expected {}",
                data.len(),
                self.data.len()
            )));
        }
        Ok(Sinogram {
            data,
            ..self.clone_geometry()
        })
    }

    fn clone_geometry(&self) -> Self {
        Sinogram {
            n_angles: self.n_angles,
            n_detectors: self.n_detectors,
            data: Vec::new(),
            angles: self.angles.clone(),
            detector_spacing: self.detector_spacing,
            s_max: self.s_max,
            image_height: self.image_height,
            image_width: self.image_width,
            fov_radius: self.fov_radius,
        }
    }

    pub fn n_angles(&self) -> usize {
        self.n_angles
    }

    pub fn n_detectors(&self) -> usize {
        self.n_detectors
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_angles, self.n_detectors)
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.n_detectors..(k + 1) * self.n_detectors]
    }

    #[inline]
    pub fn get(&self, angle: usize, bin: usize) -> f64 {
        self.data[angle * self.n_detectors + bin]
    }

    pub fn image_shape(&self) -> (usize, usize) {
        (self.image_height, self.image_width)
    }

    pub fn fov_radius(&self) -> u32 {
        self.fov_radius
    }

    pub fn same_geometry(&self, other: &Sinogram) -> bool {
        self.shape() == other.shape() && self.image_shape() == other.image_shape()
    }

    /// Largest value currently held.
    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    pub fn total_mass(&self) -> f64 {
        self.data.iter().sum()
    }

    fn detector_center(&self) -> f64 {
        (self.n_detectors as f64 - 1.0) / 2.0
    }
}

/// Forward-projects a raw attenuation map (row-major, `height x width`).
pub fn radon_attenuation(
    attenuation: &[f64],
    height: usize,
    width: usize,
    fov_radius: u32,
    n_angles: usize,
) -> Result<Sinogram> {
    if n_angles < 1 {
        return Err(Error::param("n_angles must be at least 1"));
    }
    if attenuation.len() != height * width {
        return Err(Error::param("attenuation map does not match its shape"));
    }
    if attenuation.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("non-finite attenuation value"));
    }
    let mut sino = Sinogram::zeros(n_angles, height, width, fov_radius);
    let nd = sino.n_detectors;
    let dc = sino.detector_center();
    let cy = (height as f64 - 1.0) / 2.0;
    let cx = (width as f64 - 1.0) / 2.0;
    let trig: Vec<(f64, f64)> = sino.angles.iter().map(|a| (a.cos(), a.sin())).collect();
    const SUB: [f64; 2] = [-0.25, 0.25];

    for r in 0..height {
        for c in 0..width {
            let a = attenuation[r * width + c];
            if a == 0.0 {
                continue;
            }
            let m = a * 0.25;
            let y0 = r as f64 - cy;
            let x0 = c as f64 - cx;
            for (k, &(cos, sin)) in trig.iter().enumerate() {
                let row = &mut sino.data[k * nd..(k + 1) * nd];
                for dy in SUB {
                    for dx in SUB {
                        let p = (x0 + dx) * cos + (y0 + dy) * sin + dc;
                        let i0 = p.floor();
                        let w = p - i0;
                        let i0 = i0 as isize;
                        if i0 >= 0 && (i0 as usize) < nd {
                            row[i0 as usize] += m * (1.0 - w);
                        }
                        if i0 + 1 >= 0 && ((i0 + 1) as usize) < nd {
                            row[(i0 + 1) as usize] += m * w;
                        }
                    }
                }
            }
        }
    }
    sino.s_max = sino.max_value();
    Ok(sino)
}

/// Attenuation map of an HU image.
pub fn attenuation_of(image: &Image) -> Vec<f64> {
    image.data().iter().map(|&v| hu_to_unit(v) as f64).collect()
}

/// Radon transform of an HU image at `n_angles` angles over `[0, π)`.
pub fn radon(image: &Image, n_angles: usize) -> Result<Sinogram> {
    image.ensure_finite()?;
    radon_attenuation(
        &attenuation_of(image),
        image.height(),
        image.width(),
        image.fov_radius(),
        n_angles,
    )
}

/// Sampled Ram-Lak kernel for unit detector spacing, indexed by offset.
fn ram_lak(offset: isize) -> f64 {
    if offset == 0 {
        0.25
    } else if offset % 2 == 0 {
        0.0
    } else {
        let n = offset as f64;
        -1.0 / (PI * PI * n * n)
    }
}

/// Convolves every row with the Ram-Lak kernel (zero padding outside the row).
pub fn ramp_filter(sino: &Sinogram) -> Result<Sinogram> {
    let nd = sino.n_detectors;
    if nd < 2 {
        return Err(Error::param("ramp filter needs at least two detector bins"));
    }
    let tau = sino.detector_spacing;
    let kernel: Vec<f64> = (-(nd as isize - 1)..nd as isize)
        .map(|o| ram_lak(o) / (tau * tau))
        .collect();
    let center = nd - 1;
    let mut out = vec![0.0; sino.data.len()];
    for k in 0..sino.n_angles {
        let row = sino.row(k);
        let dst = &mut out[k * nd..(k + 1) * nd];
        for (i, d) in dst.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, &p) in row.iter().enumerate() {
                if p != 0.0 {
                    acc += p * kernel[center + i - j];
                }
            }
            *d = acc * tau;
        }
    }
    sino.with_data(out)
}

/// Filtered backprojection in attenuation units, without clamping or masking.
pub fn fbp_attenuation(sino: &Sinogram) -> Result<Vec<f64>> {
    if sino.n_angles < 1 {
        return Err(Error::param("n_angles must be at least 1"));
    }
    let filtered = ramp_filter(sino)?;
    let (h, w) = sino.image_shape();
    let nd = sino.n_detectors;
    let dc = sino.detector_center();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let trig: Vec<(f64, f64)> = sino.angles.iter().map(|a| (a.cos(), a.sin())).collect();
    let scale = PI / sino.n_angles as f64;
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        let y = r as f64 - cy;
        for c in 0..w {
            let x = c as f64 - cx;
            let mut acc = 0.0;
            for (k, &(cos, sin)) in trig.iter().enumerate() {
                let p = x * cos + y * sin + dc;
                let i0 = p.floor();
                let t = p - i0;
                let i0 = i0 as isize;
                let row = &filtered.data[k * nd..(k + 1) * nd];
                if i0 >= 0 && (i0 as usize) < nd {
                    acc += row[i0 as usize] * (1.0 - t);
                }
                if i0 + 1 >= 0 && ((i0 + 1) as usize) < nd {
                    acc += row[(i0 + 1) as usize] * t;
                }
            }
            out[r * w + c] = acc * scale;
        }
    }
    Ok(out)
}

/// Reconstructs an HU image: FBP, back to HU, clamped, air outside the FOV.
pub fn fbp(sino: &Sinogram) -> Result<Image> {
    if sino.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("non-finite sinogram value"));
    }
    let att = fbp_attenuation(sino)?;
    let (h, w) = sino.image_shape();
    let fov = Fov::new(h, w, sino.fov_radius);
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let v = if fov.contains(r, c) {
                ((att[r * w + c] * HU_SPAN as f64) as f32 + HU_MIN).clamp(HU_MIN, HU_MAX)
            } else {
                HU_MIN
            };
            data.push(v);
        }
    }
    Image::from_vec(h, w, sino.fov_radius, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_pixel(n: usize) -> Image {
        let mut img = Image::filled(n, n, (n / 2) as u32, HU_MIN);
        // attenuation 1.0 at the central pixel
        img.set(n / 2, n / 2, HU_MAX);
        img
    }

    #[test]
    fn air_projects_to_zero() {
        let img = Image::filled(32, 32, 15, HU_MIN);
        let s = radon(&img, 16).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
        assert_eq!(s.s_max, 0.0);
    }

    #[test]
    fn single_pixel_mass_per_angle() {
        // Oracle: a unit-area pixel integrates to 1 along every direction.
        let img = single_pixel(33);
        let s = radon(&img, 4).unwrap();
        for k in 0..4 {
            let m: f64 = s.row(k).iter().sum();
            assert!((m - 1.0).abs() < 0.01, "row {k} mass {m}");
        }
    }

    #[test]
    fn detectors_cover_diagonal() {
        let s = Sinogram::zeros(3, 64, 48, 20);
        assert!(s.n_detectors() as f64 >= (64.0f64 * 64.0 + 48.0 * 48.0).sqrt());
    }

    #[test]
    fn ramp_filter_linear() {
        let img = single_pixel(17);
        let s = radon(&img, 8).unwrap();
        let f1 = ramp_filter(&s).unwrap();
        let s2 = s.with_data(s.data().iter().map(|v| 2.0 * v).collect()).unwrap();
        let f2 = ramp_filter(&s2).unwrap();
        for (a, b) in f1.data().iter().zip(f2.data()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
        let z = Sinogram::zeros(4, 17, 17, 8);
        assert!(ramp_filter(&z).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ramp_filter_suppresses_dc_away_from_row_ends() {
        // Residual of a truncated constant row at distance d from the ends is
        // about 1/(pi^2 d); at the center of a 255-bin row that is < 1e-3.
        let mut s = Sinogram::zeros(1, 180, 180, 80);
        assert!(s.n_detectors() >= 255);
        s.data_mut().iter_mut().for_each(|v| *v = 1.0);
        let f = ramp_filter(&s).unwrap();
        let mid = s.n_detectors() / 2;
        for i in mid - 2..=mid + 2 {
            assert!(f.get(0, i).abs() < 1e-3, "bin {i}: {}", f.get(0, i));
        }
    }

    #[test]
    fn zero_sinogram_reconstructs_air() {
        let z = Sinogram::zeros(16, 32, 32, 15);
        let img = fbp(&z).unwrap();
        assert!(img.data().iter().all(|&v| v == HU_MIN));
    }

    #[test]
    fn fbp_is_linear_before_clamping() {
        let img = single_pixel(21);
        let s = radon(&img, 30).unwrap();
        let a = fbp_attenuation(&s).unwrap();
        let s3 = s.with_data(s.data().iter().map(|v| 3.0 * v).collect()).unwrap();
        let b = fbp_attenuation(&s3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((3.0 * x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_zero_angles_and_nan() {
        let img = Image::filled(32, 32, 15, HU_MIN);
        assert!(radon(&img, 0).is_err());
        let mut bad = img.clone();
        bad.set(3, 3, f32::NAN);
        assert!(matches!(radon(&bad, 4), Err(Error::Data(_))));
    }
}
