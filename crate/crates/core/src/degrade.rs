//! Pseudo-CBCT creation: sinogram-domain degradation followed by
//! image-domain CT-value adjustment.
//!
//! Pipeline for one slice:
//!
//! 1. Radon transform of the CT image.
//! 2. Deform the sinogram with a smoothed Gaussian displacement field while
//!    keeping the bone contribution unwarped.
//! 3. Power-law contrast adjustment with exponent `c0`, clipped to the source
//!    sinogram maximum.
//! 4. Filtered backprojection.
//! 5. Gamma correction over the whole FOV (`r1`) and outside a central circle
//!    (`r2`), then a darkening ramp on the FOV edge band.
//!
//! Every step has a switch so the ablation variants can be produced.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{hu_to_unit, unit_to_hu, Image, Volume, HU_MIN};
use crate::seeding::substream;
use crate::tomography::{fbp, radon, Sinogram};

pub const SIGMA_GRID: [f64; 3] = [8.0, 16.0, 24.0];
pub const C0_GRID: [f64; 2] = [1.0, 1.15];
pub const R1_GRID: [f64; 4] = [0.75, 0.85, 0.90, 0.95];
pub const R2_GRID: [f64; 3] = [0.85, 0.90, 1.0];

/// Enables each degradation step; all `true` is the full procedure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Switches {
    pub warp: bool,
    pub contrast: bool,
    pub mask1: bool,
    pub mask2: bool,
    pub mask3: bool,
}

impl Default for Switches {
    fn default() -> Self {
        Switches::all()
    }
}

impl Switches {
    pub const fn all() -> Self {
        Switches {
            warp: true,
            contrast: true,
            mask1: true,
            mask2: true,
            mask3: true,
        }
    }

    pub const fn none() -> Self {
        Switches {
            warp: false,
            contrast: false,
            mask1: false,
            mask2: false,
            mask3: false,
        }
    }

    /// The five single-step ablations, labelled like `w/o warp`.
    pub fn ablations() -> [(&'static str, Switches); 5] {
        let all = Switches::all();
        [
            ("w/o warp", Switches { warp: false, ..all }),
            ("w/o contrast", Switches { contrast: false, ..all }),
            ("w/o mask1", Switches { mask1: false, ..all }),
            ("w/o mask2", Switches { mask2: false, ..all }),
            ("w/o mask3", Switches { mask3: false, ..all }),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    /// Std of the displacement noise, in sinogram pixels.
    pub sigma: f64,
    /// Gaussian smoothing width applied to the displacement noise.
    pub smooth_sigma: f64,
    pub c0: f64,
    pub r1: f64,
    pub r2: f64,
    pub bone_threshold: f32,
    /// HU written into bone pixels of the image whose sinogram gets warped.
    pub soft_fill_hu: f32,
    pub mask2_radius_frac: f64,
    pub mask3_width_px: f64,
    pub mask3_shift_hu: f32,
    pub n_angles: usize,
    pub switches: Switches,
    pub seed: u64,
}

impl Default for DegradationParams {
    fn default() -> Self {
        DegradationParams {
            sigma: 16.0,
            smooth_sigma: 6.0,
            c0: 1.0,
            r1: 0.90,
            r2: 0.90,
            bone_threshold: 250.0,
            soft_fill_hu: 40.0,
            mask2_radius_frac: 0.55,
            mask3_width_px: 8.0,
            mask3_shift_hu: 150.0,
            n_angles: 360,
            switches: Switches::all(),
            seed: 0,
        }
    }
}

impl DegradationParams {
    /// Parameters under which every step is an identity.
    pub fn identity() -> Self {
        DegradationParams {
            sigma: 0.0,
            c0: 1.0,
            r1: 1.0,
            r2: 1.0,
            mask3_shift_hu: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) {
            return Err(Error::param("sigma must be >= 0"));
        }
        if !(self.smooth_sigma > 0.0) {
            return Err(Error::param("smooth_sigma must be > 0"));
        }
        if !(self.c0 >= 1.0) {
            return Err(Error::param("c0 must be >= 1"));
        }
        for (name, r) in [("r1", self.r1), ("r2", self.r2)] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::param(format!("{name} must lie in (0, 1]")));
            }
        }
        if !(self.bone_threshold > -1000.0 && self.bone_threshold < 1000.0) {
            return Err(Error::param("bone_threshold must lie in (-1000, 1000) HU"));
        }
        if !(self.mask2_radius_frac > 0.0 && self.mask2_radius_frac <= 1.0) {
            return Err(Error::param("mask2_radius_frac must lie in (0, 1]"));
        }
        if !(self.mask3_width_px >= 1.0) {
            return Err(Error::param("mask3_width_px must be >= 1"));
        }
        if !(self.mask3_shift_hu >= 0.0) {
            return Err(Error::param("mask3_shift_hu must be >= 0"));
        }
        if self.n_angles < 1 {
            return Err(Error::param("n_angles must be >= 1"));
        }
        Ok(())
    }
}

/// Per-pixel displacement over sinogram coordinates, in sinogram pixels.
/// `dx` moves along the detector axis, `dy` along the angle axis.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    pub rows: usize,
    pub cols: usize,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

impl DisplacementField {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DisplacementField {
            rows,
            cols,
            dx: vec![0.0; rows * cols],
            dy: vec![0.0; rows * cols],
        }
    }

    pub fn constant(rows: usize, cols: usize, dx: f64, dy: f64) -> Self {
        DisplacementField {
            rows,
            cols,
            dx: vec![dx; rows * cols],
            dy: vec![dy; rows * cols],
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    // repeat until inside; kernels wider than the grid reflect more than once
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian blur with symmetric boundary reflection.
fn gaussian_blur(data: &[f64], rows: usize, cols: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; data.len()];
    for y in 0..rows {
        for x in 0..cols {
            let mut acc = 0.0;
            for (j, w) in k.iter().enumerate() {
                let xx = reflect(x as isize + j as isize - r, cols);
                acc += w * data[y * cols + xx];
            }
            tmp[y * cols + x] = acc;
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..rows {
        for x in 0..cols {
            let mut acc = 0.0;
            for (j, w) in k.iter().enumerate() {
                let yy = reflect(y as isize + j as isize - r, rows);
                acc += w * tmp[yy * cols + x];
            }
            out[y * cols + x] = acc;
        }
    }
    out
}

/// Draws i.i.d. `N(0, sigma^2)` displacements per pixel and component, then
/// smooths each component with a Gaussian of width `smooth_sigma`.
pub fn make_displacement_field<R: Rng + ?Sized>(
    shape: (usize, usize),
    sigma: f64,
    smooth_sigma: f64,
    rng: &mut R,
) -> Result<DisplacementField> {
    if !(sigma >= 0.0) {
        return Err(Error::param("displacement sigma must be >= 0"));
    }
    if !(smooth_sigma > 0.0) {
        return Err(Error::param("smooth_sigma must be > 0"));
    }
    let (rows, cols) = shape;
    if sigma == 0.0 {
        return Ok(DisplacementField::zeros(rows, cols));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::param(e.to_string()))?;
    let raw_dx: Vec<f64> = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    let raw_dy: Vec<f64> = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Ok(DisplacementField {
        rows,
        cols,
        dx: gaussian_blur(&raw_dx, rows, cols, smooth_sigma),
        dy: gaussian_blur(&raw_dy, rows, cols, smooth_sigma),
    })
}

/// Bone-only sinogram (pixels `>= bone_threshold`, rest set to air) and the
/// mask of bins where it is positive.
pub fn extract_bone_sinogram(
    image: &Image,
    bone_threshold: f32,
    n_angles: usize,
) -> Result<(Sinogram, Vec<bool>)> {
    let mut bone = image.clone();
    for v in bone.data_mut() {
        if *v < bone_threshold {
            *v = HU_MIN;
        }
    }
    let sino = radon(&bone, n_angles)?;
    let mask = sino.data().iter().map(|&v| v > 0.0).collect();
    Ok((sino, mask))
}

#[inline]
fn bilinear_clamped(data: &[f64], rows: usize, cols: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (rows - 1) as f64);
    let x = x.clamp(0.0, (cols - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(rows - 1);
    let x1 = (x0 + 1).min(cols - 1);
    let ty = y - y0 as f64;
    let tx = x - x0 as f64;
    let top = data[y0 * cols + x0] * (1.0 - tx) + data[y0 * cols + x1] * tx;
    let bot = data[y1 * cols + x0] * (1.0 - tx) + data[y1 * cols + x1] * tx;
    top * (1.0 - ty) + bot * ty
}

/// Backward-mapping warp: `out(p) = input(p + field(p))`, bilinear, border clamped.
pub fn warp_sinogram(sino: &Sinogram, field: &DisplacementField) -> Result<Sinogram> {
    let (rows, cols) = sino.shape();
    if field.rows != rows || field.cols != cols {
        return Err(Error::param(format!(
            "displacement field {}x{} does not match sinogram {rows}x{cols}",
            field.rows, field.cols
        )));
    }
    let src = sino.data();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..rows {
        for x in 0..cols {
            let i = y * cols + x;
            out.push(bilinear_clamped(
                src,
                rows,
                cols,
                y as f64 + field.dy[i],
                x as f64 + field.dx[i],
            ));
        }
    }
    sino.with_data(out)
}

/// Adds the unwarped bone contribution back onto the warped sinogram inside
/// `bone_mask`; bins outside the mask keep the warped value.
pub fn merge_bone(warped: &Sinogram, bone: &Sinogram, bone_mask: &[bool]) -> Result<Sinogram> {
    if !warped.same_geometry(bone) || bone_mask.len() != warped.data().len() {
        return Err(Error::param("merge_bone inputs have mismatched shapes"));
    }
    let out = warped
        .data()
        .iter()
        .zip(bone.data())
        .zip(bone_mask)
        .map(|((&w, &b), &m)| if m { w + b } else { w })
        .collect();
    warped.with_data(out)
}

/// `s_max * (s / s_max)^c0`, then clipped to `s_max` (the source maximum).
pub fn adjust_contrast(sino: &Sinogram, c0: f64) -> Result<Sinogram> {
    if !(c0 >= 1.0) {
        return Err(Error::param("c0 must be >= 1"));
    }
    let s_max = sino.s_max;
    let out = sino
        .data()
        .iter()
        .map(|&s| {
            let s = s.max(0.0);
            if s_max <= 0.0 {
                0.0
            } else if c0 == 1.0 {
                s.min(s_max)
            } else {
                (s_max * (s / s_max).powf(c0)).min(s_max)
            }
        })
        .collect();
    sino.with_data(out)
}

/// Gamma correction inside `mask`: `u -> u^(1/r)` on the unit-normalized HU scale.
pub fn gamma_correct(image: &Image, mask: &[bool], r: f64) -> Result<Image> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::param("gamma parameter r must lie in (0, 1]"));
    }
    if mask.len() != image.data().len() {
        return Err(Error::param("gamma mask does not match image"));
    }
    let mut out = image.clone();
    if r == 1.0 {
        return Ok(out);
    }
    let exponent = 1.0 / r;
    for (v, &m) in out.data_mut().iter_mut().zip(mask) {
        if m {
            let u = (hu_to_unit(*v) as f64).clamp(0.0, 1.0);
            *v = unit_to_hu(u.powf(exponent) as f32);
        }
    }
    Ok(out)
}

/// FOV pixels outside the central circle of radius `radius_frac * R`.
pub fn outer_region_mask(image: &Image, radius_frac: f64) -> Vec<bool> {
    let fov = image.fov();
    let inner = radius_frac * fov.radius;
    let mut mask = Vec::with_capacity(image.data().len());
    for y in 0..image.height() {
        for x in 0..image.width() {
            mask.push(fov.contains(y, x) && fov.distance(y, x) > inner);
        }
    }
    mask
}

/// Lowers the edge band of the FOV by a ramp rising from 0 at its inner edge
/// to `shift_hu` on the FOV boundary.
pub fn edge_shift(image: &Image, width_px: f64, shift_hu: f32) -> Result<Image> {
    if !(width_px >= 1.0) {
        return Err(Error::param("edge band width must be >= 1 pixel"));
    }
    if !(shift_hu >= 0.0) {
        return Err(Error::param("edge shift must be >= 0"));
    }
    let mut out = image.clone();
    if shift_hu == 0.0 {
        return Ok(out);
    }
    let fov = image.fov();
    let inner = fov.radius - width_px;
    for y in 0..image.height() {
        for x in 0..image.width() {
            let d = fov.distance(y, x);
            if d > inner && d <= fov.radius {
                let ramp = ((d - inner) / width_px) as f32;
                let v = out.get(y, x) - shift_hu * ramp;
                out.set(y, x, v.max(HU_MIN));
            }
        }
    }
    Ok(out)
}

/// Sinogram-domain degradation: returns the degraded sinogram fed to FBP.
pub fn degrade_sinogram(image: &Image, params: &DegradationParams) -> Result<Sinogram> {
    params.validate()?;
    let s = radon(image, params.n_angles)?;
    let mut current = s.clone();
    if params.switches.warp && params.sigma > 0.0 {
        let (_, bone_mask) = extract_bone_sinogram(image, params.bone_threshold, params.n_angles)?;
        let mut soft = image.clone();
        for v in soft.data_mut() {
            if *v >= params.bone_threshold {
                *v = params.soft_fill_hu;
            }
        }
        let s_soft = radon(&soft, params.n_angles)?;
        // bone attenuation above the fill level; zero outside bone_mask
        let excess = s.with_data(
            s.data()
                .iter()
                .zip(s_soft.data())
                .map(|(a, b)| a - b)
                .collect(),
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(substream(params.seed, 0));
        let field = make_displacement_field(s.shape(), params.sigma, params.smooth_sigma, &mut rng)?;
        let warped = warp_sinogram(&s_soft, &field)?;
        current = merge_bone(&warped, &excess, &bone_mask)?;
        current.s_max = s.s_max;
    }
    if params.switches.contrast {
        current = adjust_contrast(&current, params.c0)?;
    }
    Ok(current)
}

/// Full pseudo-CBCT simulation of one slice.
pub fn simulate_cbct(image: &Image, params: &DegradationParams) -> Result<Image> {
    let sino = degrade_sinogram(image, params)?;
    let mut out = fbp(&sino)?;
    if params.switches.mask1 {
        let mask1 = out.fov_mask();
        out = gamma_correct(&out, &mask1, params.r1)?;
    }
    if params.switches.mask2 {
        let mask2 = outer_region_mask(&out, params.mask2_radius_frac);
        out = gamma_correct(&out, &mask2, params.r2)?;
    }
    if params.switches.mask3 {
        out = edge_shift(&out, params.mask3_width_px, params.mask3_shift_hu)?;
    }
    out.clamp_hu();
    out.mask_outside_fov();
    Ok(out)
}

/// Draws one parameter set from the grid. `r2` is coupled to `c0`: the
/// contrast-defect setting (`c0 = 1.15`) keeps `r2 = 1.0`, the low-CT-value
/// setting (`c0 = 1.0`) uses `r2` in {0.85, 0.90}.
pub fn sample_params<R: Rng + ?Sized>(rng: &mut R) -> DegradationParams {
    let sigma = *SIGMA_GRID.choose(rng).expect("non-empty grid");
    let c0 = *C0_GRID.choose(rng).expect("non-empty grid");
    let r1 = *R1_GRID.choose(rng).expect("non-empty grid");
    let r2 = if c0 > 1.0 {
        1.0
    } else {
        *R2_GRID[..2].choose(rng).expect("non-empty grid")
    };
    DegradationParams {
        sigma,
        c0,
        r1,
        r2,
        seed: rng.random(),
        ..Default::default()
    }
}

/// How parameter sets are assigned across the slices of a volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ParamScope {
    #[default]
    PerSlice,
    PerVolume,
}

/// Options applied on top of sampled parameters when degrading a volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationOptions {
    pub switches: Switches,
    pub scope: ParamScope,
    /// Template for the parameters not drawn from the grid.
    pub template: DegradationParams,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        SimulationOptions {
            switches: Switches::all(),
            scope: ParamScope::PerSlice,
            template: DegradationParams::default(),
        }
    }
}

/// Parameters for slice `index` of a volume simulated with `seed`.
pub fn slice_params(seed: u64, index: usize, opts: &SimulationOptions) -> DegradationParams {
    let stream = match opts.scope {
        ParamScope::PerSlice => index as u64,
        ParamScope::PerVolume => 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(substream(seed, stream));
    let drawn = sample_params(&mut rng);
    DegradationParams {
        sigma: drawn.sigma,
        c0: drawn.c0,
        r1: drawn.r1,
        r2: drawn.r2,
        // per-volume scope still decorrelates the field per slice
        seed: substream(drawn.seed, index as u64),
        switches: opts.switches,
        ..opts.template.clone()
    }
}

/// Simulates a pseudo-CBCT volume; returns the volume and the per-slice parameters.
pub fn simulate_volume(
    volume: &Volume,
    seed: u64,
    opts: &SimulationOptions,
) -> Result<(Volume, Vec<DegradationParams>)> {
    let mut slices = Vec::with_capacity(volume.n_slices());
    let mut params = Vec::with_capacity(volume.n_slices());
    for (i, s) in volume.slices.iter().enumerate() {
        let p = slice_params(seed, i, opts);
        slices.push(simulate_cbct(s, &p)?);
        params.push(p);
    }
    Ok((Volume::new(slices, volume.spacing, volume.fov_radius_px)?, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomSpec};

    fn phantom_slice(seed: u64) -> Image {
        generate_phantom(&PhantomSpec::with_size(64, 64, 1, seed))
            .unwrap()
            .slices
            .remove(0)
    }

    fn params(sigma: f64, c0: f64, r1: f64, r2: f64) -> DegradationParams {
        DegradationParams {
            sigma,
            c0,
            r1,
            r2,
            seed: 99,
            ..Default::default()
        }
    }

    fn fov_mean(img: &Image) -> f64 {
        let v = img.fov_values();
        v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64
    }

    #[test]
    fn zero_sigma_field_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = make_displacement_field((10, 12), 0.0, 4.0, &mut rng).unwrap();
        assert!(f.dx.iter().chain(&f.dy).all(|&v| v == 0.0));
        assert!(make_displacement_field((10, 12), -1.0, 4.0, &mut rng).is_err());
    }

    #[test]
    fn smoothing_reduces_field_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = make_displacement_field((120, 120), 8.0, 4.0, &mut rng).unwrap();
        for comp in [&f.dx, &f.dy] {
            let n = comp.len() as f64;
            let mean = comp.iter().sum::<f64>() / n;
            let sd = (comp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!(sd > 0.0 && sd < 8.0, "sd {sd}");
        }
    }

    #[test]
    fn same_seed_same_field() {
        let a = make_displacement_field((20, 30), 8.0, 6.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = make_displacement_field((20, 30), 8.0, 6.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bone_extraction_edge_cases() {
        let img = phantom_slice(1);
        let (s, m) = extract_bone_sinogram(&img, 999.0, 45).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
        assert!(m.iter().all(|&b| !b));
        let (s, _) = extract_bone_sinogram(&img, -1000.0, 45).unwrap();
        assert_eq!(s, radon(&img, 45).unwrap());
    }

    #[test]
    fn bone_mask_matches_recount() {
        let img = phantom_slice(3);
        let (s, m) = extract_bone_sinogram(&img, 250.0, 90).unwrap();
        let brute = s.data().iter().filter(|&&v| v > 0.0).count();
        assert_eq!(m.iter().filter(|&&b| b).count(), brute);
        assert!(brute > 0);
    }

    #[test]
    fn identity_and_translation_warps() {
        let img = phantom_slice(4);
        let s = radon(&img, 60).unwrap();
        let (r, c) = s.shape();
        assert_eq!(warp_sinogram(&s, &DisplacementField::zeros(r, c)).unwrap(), s);
        let shifted = warp_sinogram(&s, &DisplacementField::constant(r, c, 1.0, 0.0)).unwrap();
        for y in 0..r {
            for x in 0..c - 1 {
                assert_eq!(shifted.get(y, x), s.get(y, x + 1));
            }
        }
        assert!(warp_sinogram(&s, &DisplacementField::zeros(r, c + 1)).is_err());
    }

    #[test]
    fn random_warp_roughly_preserves_mass() {
        let img = phantom_slice(6);
        let s = radon(&img, 180).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = make_displacement_field(s.shape(), 24.0, 6.0, &mut rng).unwrap();
        let w = warp_sinogram(&s, &f).unwrap();
        let rel = (w.total_mass() - s.total_mass()).abs() / s.total_mass();
        assert!(rel < 0.05, "relative mass change {rel}");
    }

    #[test]
    fn merge_bone_cases() {
        let img = phantom_slice(7);
        let s = radon(&img, 60).unwrap();
        let empty = vec![false; s.data().len()];
        let bone = s.with_data(vec![1.0; s.data().len()]).unwrap();
        assert_eq!(merge_bone(&s, &bone, &empty).unwrap(), s);
        let bad = Sinogram::zeros(61, 64, 64, 30);
        assert!(merge_bone(&s, &bad, &empty).is_err());
    }

    #[test]
    fn zero_field_merge_reassembles_source() {
        let img = phantom_slice(8);
        let p = DegradationParams::default();
        let s = radon(&img, 90).unwrap();
        let (_, mask) = extract_bone_sinogram(&img, p.bone_threshold, 90).unwrap();
        let mut soft = img.clone();
        soft.data_mut().iter_mut().filter(|v| **v >= p.bone_threshold).for_each(|v| *v = p.soft_fill_hu);
        let s_soft = radon(&soft, 90).unwrap();
        let excess = s.with_data(s.data().iter().zip(s_soft.data()).map(|(a, b)| a - b).collect()).unwrap();
        let (r, c) = s.shape();
        let warped = warp_sinogram(&s_soft, &DisplacementField::zeros(r, c)).unwrap();
        let merged = merge_bone(&warped, &excess, &mask).unwrap();
        for (a, b) in merged.data().iter().zip(s.data()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn bone_bins_stay_close_to_source_under_small_warp() {
        let img = phantom_slice(9);
        let p = DegradationParams {
            sigma: 2.0,
            switches: Switches { contrast: false, ..Switches::all() },
            ..Default::default()
        };
        let s = radon(&img, p.n_angles).unwrap();
        let d = degrade_sinogram(&img, &p).unwrap();
        let (_, mask) = extract_bone_sinogram(&img, p.bone_threshold, p.n_angles).unwrap();
        let (mut err, mut mass, mut n) = (0.0, 0.0, 0);
        for ((a, b), &m) in d.data().iter().zip(s.data()).zip(&mask) {
            if m {
                err += (a - b).abs();
                mass += b;
                n += 1;
            }
        }
        assert!(n > 0);
        assert!(err / mass < 0.02, "relative masked deviation {}", err / mass);
    }

    #[test]
    fn contrast_cases() {
        let img = phantom_slice(10);
        let s = radon(&img, 30).unwrap();
        assert_eq!(adjust_contrast(&s, 1.0).unwrap(), s);
        let c = adjust_contrast(&s, 1.15).unwrap();
        for (a, b) in c.data().iter().zip(s.data()) {
            if *b > 0.0 && *b < s.s_max {
                assert!(a < b);
            }
            if *b == s.s_max {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(adjust_contrast(&s, 0.9).is_err());
    }

    #[test]
    fn gamma_cases() {
        let mut img = Image::filled(3, 3, 5, 0.0);
        img.set(0, 0, 1000.0);
        let all = vec![true; 9];
        assert_eq!(gamma_correct(&img, &all, 1.0).unwrap(), img);
        let g = gamma_correct(&img, &all, 0.85).unwrap();
        assert_eq!(g.get(0, 0), 1000.0);
        // closed form: 0.5^(1/0.85) * 2000 - 1000
        let expected = 0.5f64.powf(1.0 / 0.85) * 2000.0 - 1000.0;
        assert!((expected - -115.135).abs() < 1e-3);
        assert!((g.get(1, 1) as f64 - expected).abs() < 1e-3);
        assert!(gamma_correct(&img, &all, 0.0).is_err());
    }

    #[test]
    fn edge_shift_ramp() {
        // 33x33 grid: center pixel (16, 16) is exact, radius 12 boundary pixel (16, 28)
        let img = Image::filled(33, 33, 12, 0.0);
        assert_eq!(edge_shift(&img, 4.0, 0.0).unwrap(), img);
        let out = edge_shift(&img, 4.0, 200.0).unwrap();
        assert_eq!(out.get(16, 28), -200.0);
        assert_eq!(out.get(16, 24), 0.0);
        assert_eq!(out.get(16, 26), -100.0);
        assert_eq!(out.get(16, 16), 0.0);
    }

    #[test]
    fn switches_off_is_plain_round_trip() {
        let img = phantom_slice(11);
        let baseline = fbp(&radon(&img, 360).unwrap()).unwrap();
        let off = DegradationParams {
            switches: Switches::none(),
            ..params(24.0, 1.15, 0.75, 0.85)
        };
        assert_eq!(simulate_cbct(&img, &off).unwrap(), baseline);
        assert_eq!(simulate_cbct(&img, &DegradationParams::identity()).unwrap(), baseline);
    }

    #[test]
    fn gamma_darkens_outer_region() {
        let img = phantom_slice(12);
        let base = DegradationParams { switches: Switches::none(), ..Default::default() };
        let baseline = simulate_cbct(&img, &base).unwrap();
        let deg = simulate_cbct(&img, &params(16.0, 1.0, 0.90, 0.90)).unwrap();
        let mask2 = outer_region_mask(&img, 0.55);
        let mean = |im: &Image| {
            let (s, n) = im.data().iter().zip(&mask2).filter(|(_, m)| **m).fold((0.0, 0), |(s, n), (v, _)| (s + *v as f64, n + 1));
            s / n as f64
        };
        assert!(mean(&deg) < mean(&baseline));
    }

    #[test]
    fn type1_border_darker_outside_circle() {
        let img = phantom_slice(13);
        let p = DegradationParams { switches: Switches { mask1: false, ..Switches::all() }, ..params(8.0, 1.0, 1.0, 0.85) };
        let out = simulate_cbct(&img, &p).unwrap();
        let fov = out.fov();
        let r = 0.55 * fov.radius;
        let (mut inside, mut ni, mut outside, mut no) = (0.0, 0, 0.0, 0);
        for y in 0..out.height() {
            for x in 0..out.width() {
                let d = fov.distance(y, x);
                if d > r - 3.0 && d <= r {
                    inside += out.get(y, x) as f64;
                    ni += 1;
                } else if d > r && d <= r + 3.0 {
                    outside += out.get(y, x) as f64;
                    no += 1;
                }
            }
        }
        assert!(outside / (no as f64) - inside / (ni as f64) < 0.0);
    }

    #[test]
    fn monotone_in_c0_and_r1() {
        let img = phantom_slice(14);
        let m = |c0: f64, r1: f64| fov_mean(&simulate_cbct(&img, &params(16.0, c0, r1, 1.0)).unwrap());
        assert!(m(1.15, 0.9) <= m(1.0, 0.9));
        assert!(m(1.0, 0.75) <= m(1.0, 0.9));
    }

    #[test]
    fn bone_is_not_relocated() {
        for seed in [15, 16] {
            let img = phantom_slice(seed);
            let p = DegradationParams { switches: Switches { mask1: false, mask2: false, mask3: false, ..Switches::all() }, ..params(24.0, 1.0, 1.0, 1.0) };
            let out = simulate_cbct(&img, &p).unwrap();
            let centroid = |im: &Image| {
                let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
                for y in 0..im.height() {
                    for x in 0..im.width() {
                        if im.get(y, x) >= 250.0 {
                            sy += y as f64;
                            sx += x as f64;
                            n += 1.0;
                        }
                    }
                }
                (sy / n, sx / n)
            };
            let (a, b) = (centroid(&img), centroid(&out));
            let shift = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
            assert!(shift < 2.0, "bone centroid moved {shift} px");
        }
    }

    #[test]
    fn outputs_respect_image_invariants() {
        let img = phantom_slice(17);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3 {
            let p = sample_params(&mut rng);
            simulate_cbct(&img, &p).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn sampled_params_on_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut sigma_counts = [0usize; 3];
        let draws = 10_000;
        for _ in 0..draws {
            let p = sample_params(&mut rng);
            assert!(SIGMA_GRID.contains(&p.sigma));
            assert!(C0_GRID.contains(&p.c0));
            assert!(R1_GRID.contains(&p.r1));
            assert!(R2_GRID.contains(&p.r2));
            if p.c0 > 1.0 {
                assert_eq!(p.r2, 1.0);
            } else {
                assert!(p.r2 < 1.0);
            }
            sigma_counts[SIGMA_GRID.iter().position(|&s| s == p.sigma).unwrap()] += 1;
        }
        for c in sigma_counts {
            assert!((c as f64 / draws as f64 - 1.0 / 3.0).abs() < 0.05);
        }
        let a = sample_params(&mut ChaCha8Rng::seed_from_u64(4));
        let b = sample_params(&mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_params_rejected() {
        let img = phantom_slice(18);
        for p in [
            DegradationParams { c0: 0.9, ..Default::default() },
            DegradationParams { r1: 0.0, ..Default::default() },
            DegradationParams { r2: 1.2, ..Default::default() },
            DegradationParams { sigma: -1.0, ..Default::default() },
        ] {
            assert!(matches!(simulate_cbct(&img, &p), Err(Error::Parameter(_))));
        }
    }
}
