//! Volume files, PNG export and evaluation artifacts.
//!
//! Volume file layout:
//! ```text
//! "PCBVOL01" | u32 LE header length | header JSON | f32 LE raster
//! ```
//! The raster is slice-major, row-major.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Volume, HU_MAX, HU_MIN};
use crate::metrics::EvaluationReport;

pub const VOLUME_MAGIC: &[u8; 8] = b"PCBVOL01";
pub const VOLUME_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub n_slices: usize,
    pub spacing: [f64; 3],
    pub fov_radius_px: u32,
    pub hu_min: f32,
    pub hu_max: f32,
    pub payload_bytes: u64,
}

pub fn encode_volume(volume: &Volume) -> Result<Vec<u8>> {
    volume.validate()?;
    let (height, width) = volume.shape();
    let n = volume.n_slices();
    let header = VolumeHeader {
        version: VOLUME_VERSION,
        height,
        width,
        n_slices: n,
        spacing: volume.spacing,
        fov_radius_px: volume.fov_radius_px,
        hu_min: HU_MIN,
        hu_max: HU_MAX,
        payload_bytes: (height * width * n * 4) as u64,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + header.payload_bytes as usize);
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for s in &volume.slices {
        for v in s.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_volume(path: &Path, bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < 12 || &bytes[..8] != VOLUME_MAGIC {
        return Err(Error::corrupt(path, "missing volume magic"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < hlen {
        return Err(Error::corrupt(path, "truncated volume header"));
    }
    let h: VolumeHeader =
        serde_json::from_slice(&body[..hlen]).map_err(|e| Error::corrupt(path, format!("bad volume header: {e}")))?;
    if h.version != VOLUME_VERSION {
        return Err(Error::corrupt(path, format!("unsupported volume version {}", h.version)));
    }
    let expected = (h.height * h.width * h.n_slices * 4) as u64;
    if h.payload_bytes != expected {
        return Err(Error::corrupt(
            path,
            format!(
                "header declares {} payload bytes but {}x{}x{} needs {expected}",
                h.payload_bytes, h.height, h.width, h.n_slices
            ),
        ));
    }
    let payload = &body[hlen..];
    if payload.len() as u64 != expected {
        return Err(Error::corrupt(
            path,
            format!("payload has {} bytes, header declares {expected}", payload.len()),
        ));
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let mut slices = Vec::with_capacity(h.n_slices);
    for _ in 0..h.n_slices {
        let data: Vec<f32> = values.by_ref().take(h.height * h.width).collect();
        if data.iter().any(|&v| !v.is_finite() || v < h.hu_min || v > h.hu_max) {
            return Err(Error::corrupt(path, "voxel value outside the declared HU range"));
        }
        slices.push(Image::from_vec(h.height, h.width, h.fov_radius_px, data)?);
    }
    Volume::new(slices, h.spacing, h.fov_radius_px)
}

pub fn write_volume(volume: &Volume, path: &Path) -> Result<()> {
    let bytes = encode_volume(volume)?;
    ensure_parent(path)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(path, &bytes)
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

/// Display window in HU.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub min: f32,
    pub max: f32,
}

impl Window {
    pub const FULL: Window = Window {
        min: -1000.0,
        max: 1000.0,
    };
    pub const SOFT: Window = Window {
        min: -300.0,
        max: 150.0,
    };

    pub fn new(min: f32, max: f32) -> Result<Self> {
        if !(min < max) {
            return Err(Error::param(format!("degenerate window [{min}, {max}]")));
        }
        Ok(Window { min, max })
    }

    /// Linear map to a byte, clamped, rounded half up.
    pub fn to_byte(&self, v: f32) -> u8 {
        let u = ((v - self.min) as f64 / (self.max - self.min) as f64).clamp(0.0, 1.0);
        (u * 255.0 + 0.5).floor() as u8
    }
}

fn encode_png(width: usize, height: usize, color: png::ColorType, data: &[u8], path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    writer
        .write_image_data(data)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    writer.finish().map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// 8-bit grayscale PNG of `image` under `window`.
pub fn export_png(image: &Image, window: Window, path: &Path) -> Result<()> {
    Window::new(window.min, window.max)?;
    let bytes: Vec<u8> = image.data().iter().map(|&v| window.to_byte(v)).collect();
    encode_png(image.width(), image.height(), png::ColorType::Grayscale, &bytes, path)
}

/// RGB rendering of a signed difference: positive residuals red, negative
/// blue, intensity saturating at `scale` HU.
pub fn export_colormap(diff: &Image, scale: f32, path: &Path) -> Result<()> {
    if !(scale > 0.0) {
        return Err(Error::param("colormap scale must be positive"));
    }
    let mut rgb = Vec::with_capacity(diff.data().len() * 3);
    for &d in diff.data() {
        let m = ((d.abs() / scale).min(1.0) * 255.0).round() as u8;
        if d > 0.0 {
            rgb.extend_from_slice(&[255, 255 - m, 255 - m]);
        } else if d < 0.0 {
            rgb.extend_from_slice(&[255 - m, 255 - m, 255]);
        } else {
            rgb.extend_from_slice(&[255, 255, 255]);
        }
    }
    encode_png(diff.width(), diff.height(), png::ColorType::Rgb, &rgb, path)
}

/// Writes `report.json`, `histogram.csv` and one colormap PNG per slice for
/// each structural comparison. Returns the written paths.
pub fn write_evaluation(report: &EvaluationReport, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let json = serde_json::to_string_pretty(report)?;
    let p = dir.join("report.json");
    fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
    written.push(p);

    let mut csv = String::from("bin_lo,bin_hi,cbct,syn,reference\n");
    let edges = report.reference.histogram.bin_edges();
    for i in 0..report.reference.histogram.counts.len() {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            edges[i],
            edges[i + 1],
            report.cbct.histogram.counts[i],
            report.syn.histogram.counts[i],
            report.reference.histogram.counts[i]
        ));
    }
    let p = dir.join("histogram.csv");
    fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
    written.push(p);

    for (label, sc) in [("syn_cbct", &report.syn_vs_cbct), ("syn_ref", &report.syn_vs_reference)] {
        for (i, map) in sc.colormaps.iter().enumerate() {
            let p = dir.join(format!("colormap_{label}_{i:03}.png"));
            export_colormap(map, 1000.0, &p)?;
            written.push(p);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomSpec};

    #[test]
    fn volume_round_trip_and_corruption() {
        let v = generate_phantom(&PhantomSpec::with_size(32, 32, 3, 8)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.vol");
        write_volume(&v, &p).unwrap();
        let back = read_volume(&p).unwrap();
        assert_eq!(back, v);
        let bytes = fs::read(&p).unwrap();
        assert_eq!(encode_volume(&back).unwrap(), bytes);

        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        let err = read_volume(&p).unwrap_err();
        assert!(matches!(err, Error::Corrupt { ref reason, .. } if reason.contains("payload")));

        let text = String::from_utf8_lossy(&bytes).replace("\"n_slices\":3", "\"n_slices\":4");
        let hacked = [&bytes[..12], &text.as_bytes()[12..]].concat();
        fs::write(&p, hacked).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::Corrupt { .. })));

        fs::write(&p, b"nonsense").unwrap();
        assert!(matches!(read_volume(&p), Err(Error::Corrupt { .. })));
        assert!(matches!(
            read_volume(&dir.path().join("missing.vol")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn window_mapping() {
        let w = Window::SOFT;
        assert_eq!(w.to_byte(-300.0), 0);
        assert_eq!(w.to_byte(150.0), 255);
        assert_eq!(w.to_byte(-75.0), 128);
        assert_eq!(w.to_byte(-2000.0), 0);
        assert_eq!(w.to_byte(900.0), 255);
        assert!(Window::new(5.0, 5.0).is_err());
    }

    #[test]
    fn png_bytes_are_deterministic() {
        let img = generate_phantom(&PhantomSpec::with_size(32, 32, 1, 1)).unwrap().slices.remove(0);
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        export_png(&img, Window::FULL, &a).unwrap();
        export_png(&img, Window::FULL, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert!(export_png(&img, Window { min: 1.0, max: 0.0 }, &a).is_err());
    }
}
