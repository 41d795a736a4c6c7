//! Python bindings. Images cross the boundary as nested lists of HU values.

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use pseudocbct_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Parameter(_) | Error::Data(_) => PyValueError::new_err(e.to_string()),
        Error::Io { .. } | Error::Corrupt { .. } => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

#[pymodule]
mod pseudocbct {
    use std::path::PathBuf;

    use pyo3::prelude::*;
    use pyo3::types::PyDict;

    use pseudocbct_core::codec::{train_codec, CodecConfig, CodecModel, LatentCodec};
    use pseudocbct_core::degrade::{simulate_volume, SimulationOptions, Switches};
    use pseudocbct_core::diffusion::{
        build_schedule, encode_pairs, generate_volume, train, CheckpointPolicy, DenoiserModel as CoreDenoiser,
        DiffusionConfig, NoiseMode,
    };
    use pseudocbct_core::io::{read_volume, write_volume};
    use pseudocbct_core::metrics;
    use pseudocbct_core::phantom::{generate_phantom, PhantomSpec};
    use pseudocbct_core::pipeline::{run_pipeline, ExperimentConfig};
    use pseudocbct_core::tomography::{fbp, radon};
    use pseudocbct_core::{Error, Image, Volume as CoreVolume};

    use super::to_py;

    /// A stack of HU slices with a circular field of view.
    #[pyclass(from_py_object)]
    #[derive(Clone)]
    struct Volume {
        inner: CoreVolume,
    }

    #[pymethods]
    impl Volume {
        /// Builds a volume from `slices[k][row][col]` HU values.
        #[new]
        #[pyo3(signature = (slices, fov_radius, spacing=(1.0, 1.0, 1.0)))]
        fn new(slices: Vec<Vec<Vec<f32>>>, fov_radius: u32, spacing: (f64, f64, f64)) -> PyResult<Self> {
            let mut images = Vec::with_capacity(slices.len());
            for s in slices {
                let h = s.len();
                let w = s.first().map_or(0, Vec::len);
                if s.iter().any(|r| r.len() != w) {
                    return Err(to_py(Error::Parameter("ragged slice rows".into())));
                }
                let data = s.into_iter().flatten().collect();
                images.push(Image::from_vec(h, w, fov_radius, data).map_err(to_py)?);
            }
            let inner = CoreVolume::new(images, [spacing.0, spacing.1, spacing.2], fov_radius).map_err(to_py)?;
            Ok(Volume { inner })
        }

        #[staticmethod]
        fn load(path: PathBuf) -> PyResult<Self> {
            Ok(Volume {
                inner: read_volume(&path).map_err(to_py)?,
            })
        }

        fn save(&self, path: PathBuf) -> PyResult<()> {
            write_volume(&self.inner, &path).map_err(to_py)
        }

        /// `(n_slices, height, width)`.
        #[getter]
        fn shape(&self) -> (usize, usize, usize) {
            let (h, w) = self.inner.shape();
            (self.inner.n_slices(), h, w)
        }

        #[getter]
        fn fov_radius(&self) -> u32 {
            self.inner.fov_radius_px
        }

        fn slice(&self, index: usize) -> PyResult<Vec<Vec<f32>>> {
            let s = self
                .inner
                .slices
                .get(index)
                .ok_or_else(|| to_py(Error::Parameter(format!("slice {index} out of range"))))?;
            Ok(s.data().chunks(s.width()).map(<[f32]>::to_vec).collect())
        }

        fn to_list(&self) -> Vec<Vec<Vec<f32>>> {
            (0..self.inner.n_slices())
                .map(|i| self.slice(i).expect("index in range"))
                .collect()
        }

        /// Mean absolute difference between adjacent slices.
        fn inter_slice_mad(&self) -> f64 {
            self.inner.inter_slice_mad()
        }

        fn __repr__(&self) -> String {
            let (n, h, w) = self.shape();
            format!("Volume(n_slices={n}, height={h}, width={w})")
        }
    }

    /// Synthetic pelvic phantom.
    #[pyfunction]
    #[pyo3(signature = (height=128, width=128, slices=8, seed=0))]
    fn phantom(height: usize, width: usize, slices: usize, seed: u64) -> PyResult<Volume> {
        let spec = PhantomSpec::with_size(height, width, slices, seed);
        Ok(Volume {
            inner: generate_phantom(&spec).map_err(to_py)?,
        })
    }

    /// Degrades a CT volume; returns the pseudo-CBCT volume and the sampled
    /// parameters of every slice as a JSON string.
    #[pyfunction]
    #[pyo3(signature = (volume, seed=0, warp=true, contrast=true, mask1=true, mask2=true, mask3=true))]
    fn simulate(
        volume: &Volume,
        seed: u64,
        warp: bool,
        contrast: bool,
        mask1: bool,
        mask2: bool,
        mask3: bool,
    ) -> PyResult<(Volume, String)> {
        let opts = SimulationOptions {
            switches: Switches {
                warp,
                contrast,
                mask1,
                mask2,
                mask3,
            },
            ..SimulationOptions::default()
        };
        let (v, params) = simulate_volume(&volume.inner, seed, &opts).map_err(to_py)?;
        let json = serde_json::to_string(&params).map_err(|e| to_py(e.into()))?;
        Ok((Volume { inner: v }, json))
    }

    /// Projects and reconstructs every slice.
    #[pyfunction]
    #[pyo3(signature = (volume, n_angles=360))]
    fn fbp_roundtrip(volume: &Volume, n_angles: usize) -> PyResult<Volume> {
        let slices = volume
            .inner
            .slices
            .iter()
            .map(|s| radon(s, n_angles).map(|sino| fbp(&sino)))
            .collect::<Result<Result<Vec<_>, _>, _>>()
            .map_err(to_py)?
            .map_err(to_py)?;
        Ok(Volume {
            inner: CoreVolume::new(slices, volume.inner.spacing, volume.inner.fov_radius_px).map_err(to_py)?,
        })
    }

    #[pyfunction]
    fn mae(a: &Volume, b: &Volume) -> PyResult<f64> {
        metrics::volume_mae(&a.inner, &b.inner).map_err(to_py)
    }

    #[pyfunction]
    fn ssim(a: &Volume, b: &Volume) -> PyResult<f64> {
        metrics::volume_ssim(&a.inner, &b.inner).map_err(to_py)
    }

    /// `{"rmse_hu", "error_pixels", "fov_pixels", "threshold_hu"}`.
    #[pyfunction]
    #[pyo3(signature = (syn, cbct, threshold=600.0))]
    fn structural_change<'py>(py: Python<'py>, syn: &Volume, cbct: &Volume, threshold: f64) -> PyResult<Bound<'py, PyDict>> {
        let r = metrics::structural_change(&syn.inner, &cbct.inner, threshold).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("rmse_hu", r.rmse_hu)?;
        d.set_item("error_pixels", r.error_pixels)?;
        d.set_item("fov_pixels", r.fov_pixels)?;
        d.set_item("threshold_hu", r.threshold_hu)?;
        Ok(d)
    }

    /// Histogram correlation of the two volumes' average images.
    #[pyfunction]
    #[pyo3(signature = (a, b, lo=-500.0, hi=500.0, bins=100))]
    fn histogram_correlation(a: &Volume, b: &Volume, lo: f64, hi: f64, bins: usize) -> PyResult<f64> {
        let ma = metrics::mean_volume(&a.inner).map_err(to_py)?;
        let mb = metrics::mean_volume(&b.inner).map_err(to_py)?;
        metrics::histogram_correlation(&ma, &mb, lo, hi, bins).map_err(to_py)
    }

    /// `(beta, gamma)` lists indexed by timestep `0..=T`.
    #[pyfunction]
    #[pyo3(signature = (steps=1000, delta=0.999, tau=0.008))]
    fn noise_schedule(steps: usize, delta: f64, tau: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let s = build_schedule(steps, delta, tau).map_err(to_py)?;
        Ok((s.beta, s.gamma))
    }

    /// Trained VQ codec.
    #[pyclass]
    struct Codec {
        inner: CodecModel,
    }

    #[pymethods]
    impl Codec {
        #[staticmethod]
        fn load(path: PathBuf) -> PyResult<Self> {
            Ok(Codec {
                inner: CodecModel::load(&path).map_err(to_py)?,
            })
        }

        fn save(&self, path: PathBuf) -> PyResult<()> {
            self.inner.save(&path).map_err(to_py)
        }

        #[getter]
        fn factor(&self) -> usize {
            self.inner.factor()
        }

        #[getter]
        fn codebook(&self) -> Vec<f32> {
            self.inner.codebook().to_vec()
        }

        /// Encode, quantize and decode every slice.
        fn reconstruct(&self, volume: &Volume) -> PyResult<Volume> {
            let slices = volume
                .inner
                .slices
                .iter()
                .map(|s| self.inner.reconstruct(s))
                .collect::<Result<Vec<_>, _>>()
                .map_err(to_py)?;
            Ok(Volume {
                inner: CoreVolume::new(slices, volume.inner.spacing, volume.inner.fov_radius_px).map_err(to_py)?,
            })
        }

        /// Normalized latent of one slice as nested lists.
        fn latent(&self, volume: &Volume, index: usize) -> PyResult<Vec<Vec<f32>>> {
            let s = volume
                .inner
                .slices
                .get(index)
                .ok_or_else(|| to_py(Error::Parameter(format!("slice {index} out of range"))))?;
            let z = self.inner.to_latent(s).map_err(to_py)?;
            Ok(z.values.chunks(z.w).map(<[f32]>::to_vec).collect())
        }
    }

    #[pyfunction]
    #[pyo3(signature = (volumes, factor=2, epochs=50, widths=None, learning_rate=1e-3, seed=0))]
    fn train_codec_on(
        volumes: Vec<Volume>,
        factor: usize,
        epochs: usize,
        widths: Option<Vec<usize>>,
        learning_rate: f64,
        seed: u64,
    ) -> PyResult<Codec> {
        let images: Vec<Image> = volumes.into_iter().flat_map(|v| v.inner.slices).collect();
        let d = CodecConfig::default();
        let cfg = CodecConfig {
            factor,
            widths: widths.unwrap_or(d.widths.clone()),
            max_epochs: epochs,
            learning_rate,
            seed,
            ..d
        };
        Ok(Codec {
            inner: train_codec(&images, &[], &cfg).map_err(to_py)?,
        })
    }

    /// Conditional latent denoiser.
    #[pyclass]
    struct Denoiser {
        inner: CoreDenoiser,
    }

    #[pymethods]
    impl Denoiser {
        #[staticmethod]
        fn load(path: PathBuf) -> PyResult<Self> {
            Ok(Denoiser {
                inner: CoreDenoiser::load(&path).map_err(to_py)?,
            })
        }

        fn save(&self, path: PathBuf) -> PyResult<()> {
            self.inner.save(&path).map_err(to_py)
        }

        #[getter]
        fn losses(&self) -> Vec<f64> {
            self.inner.training_log.iter().map(|l| l.train_loss).collect()
        }

        /// Translates a (pseudo-)CBCT volume.
        #[pyo3(signature = (codec, cbct, noise_seed=0, shared_noise=true))]
        fn generate(&self, codec: &Codec, cbct: &Volume, noise_seed: u64, shared_noise: bool) -> PyResult<Volume> {
            let mode = if shared_noise {
                NoiseMode::Shared
            } else {
                NoiseMode::PerSlice
            };
            Ok(Volume {
                inner: generate_volume(&self.inner, &codec.inner, &cbct.inner, noise_seed, mode).map_err(to_py)?,
            })
        }
    }

    /// Trains a denoiser on `(cbct, ct)` volume pairs in the codec's latent space.
    #[pyfunction]
    #[pyo3(signature = (codec, pairs, steps=250, epochs=10, widths=None, learning_rate=1e-3, seed=0))]
    fn train_cldm(
        codec: &Codec,
        pairs: Vec<(Volume, Volume)>,
        steps: usize,
        epochs: usize,
        widths: Option<Vec<usize>>,
        learning_rate: f64,
        seed: u64,
    ) -> PyResult<Denoiser> {
        let pairs: Vec<_> = pairs.into_iter().map(|(a, b)| (a.inner, b.inner)).collect();
        let lat = encode_pairs(&codec.inner, &pairs).map_err(to_py)?;
        let d = DiffusionConfig::default();
        let cfg = DiffusionConfig {
            steps,
            epochs,
            widths: widths.unwrap_or(d.widths.clone()),
            learning_rate,
            seed,
            ..d
        };
        let mut model = CoreDenoiser::new(cfg).map_err(to_py)?;
        train(&mut model, &lat, &[], &CheckpointPolicy::default()).map_err(to_py)?;
        Ok(Denoiser { inner: model })
    }

    /// Default experiment config as TOML text.
    #[pyfunction]
    fn default_config() -> PyResult<String> {
        ExperimentConfig::default().to_toml().map_err(to_py)
    }

    /// Runs the full pipeline from TOML text; returns the manifest as JSON.
    #[pyfunction]
    fn run_experiment(config_toml: &str) -> PyResult<String> {
        let cfg = ExperimentConfig::from_toml(config_toml).map_err(to_py)?;
        let out = run_pipeline(&cfg).map_err(to_py)?;
        serde_json::to_string(&out.manifest).map_err(|e| to_py(e.into()))
    }
}
