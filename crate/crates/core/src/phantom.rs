//! Procedural pelvic-like CT phantoms.
//!
//! Each volume is a body ellipse with a subcutaneous fat layer, a soft-tissue
//! interior, an elliptical pelvic bone ring, two femoral-head disks and
//! optional gas pockets. Geometry is drawn from the seed at both ends of the
//! slice axis and interpolated in between, so anatomy varies smoothly from
//! slice to slice.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Fov, Image, Volume, HU_MAX, HU_MIN};

/// Closed HU interval `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HuRange {
    pub lo: f32,
    pub hi: f32,
}

impl HuRange {
    pub const fn new(lo: f32, hi: f32) -> Self {
        HuRange { lo, hi }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f32 {
        if self.hi == self.lo {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueRanges {
    pub air: HuRange,
    pub fat: HuRange,
    pub soft_tissue: HuRange,
    pub bone: HuRange,
}

impl Default for TissueRanges {
    fn default() -> Self {
        TissueRanges {
            air: HuRange::new(-1000.0, -1000.0),
            fat: HuRange::new(-120.0, -80.0),
            soft_tissue: HuRange::new(0.0, 80.0),
            bone: HuRange::new(250.0, 900.0),
        }
    }
}

impl TissueRanges {
    fn validate(&self) -> Result<()> {
        let ordered = [
            ("air", self.air),
            ("fat", self.fat),
            ("soft_tissue", self.soft_tissue),
            ("bone", self.bone),
        ];
        for (name, r) in ordered {
            if !(r.lo.is_finite() && r.hi.is_finite()) || r.lo > r.hi {
                return Err(Error::param(format!("empty HU interval for {name}")));
            }
            if r.lo < HU_MIN || r.hi > HU_MAX {
                return Err(Error::param(format!("HU interval for {name} leaves [-1000, 1000]")));
            }
        }
        for w in ordered.windows(2) {
            if w[0].1.hi > w[1].1.lo {
                return Err(Error::param(format!(
                    "HU intervals not ordered: {} overlaps {}",
                    w[0].0, w[1].0
                )));
            }
        }
        Ok(())
    }
}

/// Organ geometry, expressed as fractions of the FOV radius.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrganLayout {
    /// Body ellipse semi-axes (vertical, horizontal).
    pub body_axes: (f64, f64),
    pub fat_thickness: f64,
    /// Pelvic ring center offset (dy, dx) from the FOV center.
    pub ring_center: (f64, f64),
    pub ring_axes: (f64, f64),
    pub ring_thickness: f64,
    /// Femoral heads sit at (dy, ±dx).
    pub femoral_offset: (f64, f64),
    pub femoral_radius: f64,
    pub max_gas_pockets: usize,
    pub gas_radius: f64,
    /// Relative jitter applied to every geometric parameter per seed and slice end.
    pub variation: f64,
    /// Subsamples per pixel edge used for area-weighted rasterization.
    pub supersample: usize,
}

impl Default for OrganLayout {
    fn default() -> Self {
        OrganLayout {
            body_axes: (0.70, 0.92),
            fat_thickness: 0.09,
            ring_center: (0.08, 0.0),
            ring_axes: (0.40, 0.52),
            ring_thickness: 0.08,
            femoral_offset: (0.10, 0.62),
            femoral_radius: 0.13,
            max_gas_pockets: 2,
            gas_radius: 0.07,
            variation: 0.08,
            supersample: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub n_slices: usize,
    pub seed: u64,
    /// FOV radius as a fraction of half the smaller image side.
    pub fov_radius_frac: f64,
    /// (dz, dy, dx) in mm.
    pub spacing: [f64; 3],
    pub tissues: TissueRanges,
    pub layout: OrganLayout,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            height: 128,
            width: 128,
            n_slices: 8,
            seed: 0,
            fov_radius_frac: 0.96,
            spacing: [2.5, 1.0, 1.0],
            tissues: TissueRanges::default(),
            layout: OrganLayout::default(),
        }
    }
}

impl PhantomSpec {
    pub fn with_size(height: usize, width: usize, n_slices: usize, seed: u64) -> Self {
        PhantomSpec {
            height,
            width,
            n_slices,
            seed,
            ..Default::default()
        }
    }

    pub fn fov_radius_px(&self) -> u32 {
        (self.fov_radius_frac * self.height.min(self.width) as f64 / 2.0).floor() as u32
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 32 {
            return Err(Error::param(format!(
                "phantom size {}x{} below 32x32",
                self.height, self.width
            )));
        }
        if self.n_slices == 0 {
            return Err(Error::param("phantom needs at least one slice"));
        }
        if !(self.fov_radius_frac > 0.0 && self.fov_radius_frac <= 1.0) {
            return Err(Error::param("fov_radius_frac must lie in (0, 1]"));
        }
        if self.layout.supersample == 0 {
            return Err(Error::param("supersample must be at least 1"));
        }
        self.tissues.validate()
    }
}

/// Geometry of one slice in FOV-radius units.
#[derive(Clone, Copy, Debug)]
struct SliceGeometry {
    body: (f64, f64),
    fat: f64,
    ring_center: (f64, f64),
    ring_axes: (f64, f64),
    ring_thickness: f64,
    femoral_offset: (f64, f64),
    femoral_radius: f64,
    gas: [(f64, f64, f64); MAX_GAS],
}

const MAX_GAS: usize = 4;

impl SliceGeometry {
    fn draw(layout: &OrganLayout, n_gas: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut jitter = |v: f64| v * (1.0 + layout.variation * rng.random_range(-1.0..=1.0));
        let body = (jitter(layout.body_axes.0), jitter(layout.body_axes.1));
        let fat = jitter(layout.fat_thickness);
        let ring_center = (jitter(layout.ring_center.0), layout.ring_center.1);
        let ring_axes = (jitter(layout.ring_axes.0), jitter(layout.ring_axes.1));
        let ring_thickness = jitter(layout.ring_thickness);
        let femoral_offset = (jitter(layout.femoral_offset.0), jitter(layout.femoral_offset.1));
        let femoral_radius = jitter(layout.femoral_radius);
        let mut gas = [(0.0, 0.0, 0.0); MAX_GAS];
        for g in gas.iter_mut().take(n_gas.min(MAX_GAS)) {
            let cy = rng.random_range(-0.35..=0.05);
            let cx = rng.random_range(-0.25..=0.25);
            let r = layout.gas_radius * rng.random_range(0.6..=1.2);
            *g = (cy, cx, r);
        }
        SliceGeometry {
            body,
            fat,
            ring_center,
            ring_axes,
            ring_thickness,
            femoral_offset,
            femoral_radius,
            gas,
        }
    }

    fn lerp(a: &Self, b: &Self, t: f64) -> Self {
        let l = |x: f64, y: f64| x + (y - x) * t;
        let l2 = |x: (f64, f64), y: (f64, f64)| (l(x.0, y.0), l(x.1, y.1));
        let mut gas = [(0.0, 0.0, 0.0); MAX_GAS];
        for (i, g) in gas.iter_mut().enumerate() {
            let (p, q) = (a.gas[i], b.gas[i]);
            *g = (l(p.0, q.0), l(p.1, q.1), l(p.2, q.2));
        }
        SliceGeometry {
            body: l2(a.body, b.body),
            fat: l(a.fat, b.fat),
            ring_center: l2(a.ring_center, b.ring_center),
            ring_axes: l2(a.ring_axes, b.ring_axes),
            ring_thickness: l(a.ring_thickness, b.ring_thickness),
            femoral_offset: l2(a.femoral_offset, b.femoral_offset),
            femoral_radius: l(a.femoral_radius, b.femoral_radius),
            gas,
        }
    }
}

/// HU value assigned to each structure of one volume.
#[derive(Clone, Copy, Debug)]
struct StructureValues {
    air: f32,
    gas: f32,
    fat: f32,
    soft: f32,
    ring: f32,
    femoral: f32,
}

#[inline]
fn ellipse_level(y: f64, x: f64, cy: f64, cx: f64, ay: f64, ax: f64) -> f64 {
    let u = (y - cy) / ay;
    let v = (x - cx) / ax;
    u * u + v * v
}

impl SliceGeometry {
    /// HU value at point `(y, x)` in FOV-radius units relative to the center.
    fn value_at(&self, y: f64, x: f64, hu: &StructureValues) -> f32 {
        if ellipse_level(y, x, 0.0, 0.0, self.body.0, self.body.1) > 1.0 {
            return hu.air;
        }
        let (cy, cx) = self.ring_center;
        let outer = ellipse_level(y, x, cy, cx, self.ring_axes.0, self.ring_axes.1);
        let inner = ellipse_level(
            y,
            x,
            cy,
            cx,
            self.ring_axes.0 - self.ring_thickness,
            self.ring_axes.1 - self.ring_thickness,
        );
        if outer <= 1.0 && inner > 1.0 {
            return hu.ring;
        }
        let (fy, fx) = self.femoral_offset;
        let r2 = self.femoral_radius * self.femoral_radius;
        for sx in [-1.0, 1.0] {
            let dy = y - fy;
            let dx = x - sx * fx;
            if dy * dy + dx * dx <= r2 {
                return hu.femoral;
            }
        }
        for &(gy, gx, gr) in &self.gas {
            if gr > 0.0 {
                let dy = y - gy;
                let dx = x - gx;
                if dy * dy + dx * dx <= gr * gr {
                    return hu.gas;
                }
            }
        }
        let inner_body = ellipse_level(
            y,
            x,
            0.0,
            0.0,
            self.body.0 - self.fat,
            self.body.1 - self.fat,
        );
        if inner_body > 1.0 {
            hu.fat
        } else {
            hu.soft
        }
    }
}

/// Generates a phantom volume. Pure function of `spec`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Volume> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let t = &spec.tissues;
    let hu = StructureValues {
        air: t.air.sample(&mut rng),
        gas: t.air.sample(&mut rng),
        fat: t.fat.sample(&mut rng),
        soft: t.soft_tissue.sample(&mut rng),
        ring: t.bone.sample(&mut rng),
        femoral: t.bone.sample(&mut rng),
    };
    let n_gas = if spec.layout.max_gas_pockets == 0 {
        0
    } else {
        rng.random_range(0..=spec.layout.max_gas_pockets.min(MAX_GAS))
    };
    let first = SliceGeometry::draw(&spec.layout, n_gas, &mut rng);
    let last = SliceGeometry::draw(&spec.layout, n_gas, &mut rng);

    let fov_r = spec.fov_radius_px();
    let fov = Fov::new(spec.height, spec.width, fov_r);
    let scale = fov_r as f64;
    let ss = spec.layout.supersample;
    let inv_ss = 1.0 / ss as f64;

    let mut slices = Vec::with_capacity(spec.n_slices);
    for k in 0..spec.n_slices {
        let frac = if spec.n_slices > 1 {
            k as f64 / (spec.n_slices - 1) as f64
        } else {
            0.0
        };
        let geom = SliceGeometry::lerp(&first, &last, frac);
        let mut img = Image::filled(spec.height, spec.width, fov_r, HU_MIN);
        for y in 0..spec.height {
            for x in 0..spec.width {
                if !fov.contains(y, x) {
                    continue;
                }
                let mut acc = 0.0f64;
                for sy in 0..ss {
                    for sx in 0..ss {
                        let py = (y as f64 + (sy as f64 + 0.5) * inv_ss - 0.5 - fov.cy) / scale;
                        let px = (x as f64 + (sx as f64 + 0.5) * inv_ss - 0.5 - fov.cx) / scale;
                        acc += geom.value_at(py, px, &hu) as f64;
                    }
                }
                let v = (acc / (ss * ss) as f64) as f32;
                img.set(y, x, v.clamp(HU_MIN, HU_MAX));
            }
        }
        slices.push(img);
    }
    Volume::new(slices, spec.spacing, fov_r)
}
