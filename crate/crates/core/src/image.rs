//! HU images and volumes with a circular field of view.

use crate::error::{Error, Result};

pub const HU_MIN: f32 = -1000.0;
pub const HU_MAX: f32 = 1000.0;
/// Width of the HU range, used as the SSIM dynamic range and for unit mapping.
pub const HU_SPAN: f32 = HU_MAX - HU_MIN;

/// Maps a HU value to the unit interval used by the codec and the gamma steps.
#[inline]
pub fn hu_to_unit(v: f32) -> f32 {
    (v - HU_MIN) / HU_SPAN
}

#[inline]
pub fn unit_to_hu(u: f32) -> f32 {
    u * HU_SPAN + HU_MIN
}

/// Circular field of view centered on the image grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fov {
    pub cy: f64,
    pub cx: f64,
    pub radius: f64,
}

impl Fov {
    pub fn new(height: usize, width: usize, radius: u32) -> Self {
        Fov {
            cy: (height as f64 - 1.0) / 2.0,
            cx: (width as f64 - 1.0) / 2.0,
            radius: radius as f64,
        }
    }

    /// Distance of pixel `(y, x)` from the FOV center.
    #[inline]
    pub fn distance(&self, y: usize, x: usize) -> f64 {
        let dy = y as f64 - self.cy;
        let dx = x as f64 - self.cx;
        (dy * dy + dx * dx).sqrt()
    }

    #[inline]
    pub fn contains(&self, y: usize, x: usize) -> bool {
        self.distance(y, x) <= self.radius
    }
}

/// A 2D slice of CT values in HU, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    fov_radius: u32,
    data: Vec<f32>,
}

impl Image {
    pub fn filled(height: usize, width: usize, fov_radius: u32, value: f32) -> Self {
        Image {
            height,
            width,
            fov_radius,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, fov_radius: u32, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::param(format!(
                "image data has {} values, expected {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(Image {
            height,
            width,
            fov_radius,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn fov_radius(&self) -> u32 {
        self.fov_radius
    }

    pub fn fov(&self) -> Fov {
        Fov::new(self.height, self.width, self.fov_radius)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Row-major boolean mask of pixels inside the field of view.
    pub fn fov_mask(&self) -> Vec<bool> {
        let fov = self.fov();
        let mut mask = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                mask.push(fov.contains(y, x));
            }
        }
        mask
    }

    pub fn fov_pixel_count(&self) -> usize {
        self.fov_mask().iter().filter(|&&m| m).count()
    }

    /// Sets everything outside the FOV to air.
    pub fn mask_outside_fov(&mut self) {
        let fov = self.fov();
        for y in 0..self.height {
            for x in 0..self.width {
                if !fov.contains(y, x) {
                    self.data[y * self.width + x] = HU_MIN;
                }
            }
        }
    }

    pub fn clamp_hu(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(HU_MIN, HU_MAX);
        }
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Values inside the FOV, in row-major order.
    pub fn fov_values(&self) -> Vec<f32> {
        self.data
            .iter()
            .zip(self.fov_mask())
            .filter_map(|(&v, m)| m.then_some(v))
            .collect()
    }

    pub fn ensure_finite(&self) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!("non-finite pixel at index {i}")));
        }
        Ok(())
    }

    /// Checks HU bounds and air outside the FOV.
    pub fn validate(&self) -> Result<()> {
        self.ensure_finite()?;
        let fov = self.fov();
        for y in 0..self.height {
            for x in 0..self.width {
                let v = self.get(y, x);
                if !(HU_MIN..=HU_MAX).contains(&v) {
                    return Err(Error::data(format!("pixel ({y},{x}) = {v} HU out of range")));
                }
                if !fov.contains(y, x) && v != HU_MIN {
                    return Err(Error::data(format!("pixel ({y},{x}) outside FOV is {v} HU")));
                }
            }
        }
        Ok(())
    }
}

/// Ordered stack of slices sharing one grid and FOV.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub slices: Vec<Image>,
    /// (dz, dy, dx) in mm.
    pub spacing: [f64; 3],
    pub fov_radius_px: u32,
}

impl Volume {
    pub fn new(slices: Vec<Image>, spacing: [f64; 3], fov_radius_px: u32) -> Result<Self> {
        let v = Volume {
            slices,
            spacing,
            fov_radius_px,
        };
        v.check_shape()?;
        Ok(v)
    }

    pub fn n_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.slices
            .first()
            .map(|s| s.shape())
            .unwrap_or((0, 0))
    }

    fn check_shape(&self) -> Result<()> {
        let first = self
            .slices
            .first()
            .ok_or_else(|| Error::data("volume has no slices"))?;
        for (i, s) in self.slices.iter().enumerate() {
            if !s.same_shape(first) {
                return Err(Error::data(format!("slice {i} has a different shape")));
            }
            if s.fov_radius() != self.fov_radius_px {
                return Err(Error::data(format!("slice {i} has a different FOV radius")));
            }
        }
        Ok(())
    }

    /// Checks every volume invariant: shared shape, HU bounds, air outside FOV.
    pub fn validate(&self) -> Result<()> {
        self.check_shape()?;
        for s in &self.slices {
            s.validate()?;
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &Volume) -> bool {
        self.n_slices() == other.n_slices() && self.shape() == other.shape()
    }

    /// Mean absolute difference between adjacent slices inside the FOV.
    pub fn inter_slice_mad(&self) -> f64 {
        if self.slices.len() < 2 {
            return 0.0;
        }
        let mask = self.slices[0].fov_mask();
        let mut acc = 0.0f64;
        let mut n = 0usize;
        for pair in self.slices.windows(2) {
            for ((a, b), &m) in pair[0].data().iter().zip(pair[1].data()).zip(&mask) {
                if m {
                    acc += (*a as f64 - *b as f64).abs();
                    n += 1;
                }
            }
        }
        acc / n.max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fov_center_is_grid_center() {
        let img = Image::filled(4, 4, 1, 0.0);
        let fov = img.fov();
        assert!(fov.contains(1, 1) && fov.contains(2, 2));
        assert!(!fov.contains(0, 0));
    }

    #[test]
    fn validate_rejects_tissue_outside_fov() {
        let img = Image::filled(8, 8, 3, 0.0);
        assert!(img.validate().is_err());
        let mut img = img;
        img.mask_outside_fov();
        img.validate().unwrap();
    }

    #[test]
    fn unit_mapping_endpoints() {
        assert_eq!(hu_to_unit(-1000.0), 0.0);
        assert_eq!(hu_to_unit(1000.0), 1.0);
        assert_eq!(unit_to_hu(0.5), 0.0);
    }

    #[test]
    fn volume_rejects_mixed_shapes() {
        let a = Image::filled(8, 8, 3, -1000.0);
        let b = Image::filled(8, 9, 3, -1000.0);
        assert!(Volume::new(vec![a, b], [1.0; 3], 3).is_err());
    }
}
