use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pseudocbct_core::codec::{train_codec, CodecConfig, CodecModel};
use pseudocbct_core::degrade::{simulate_volume, ParamScope, SimulationOptions, Switches};
use pseudocbct_core::diffusion::{
    encode_pairs, generate_volume, select_initial_noise, train, CheckpointPolicy, DenoiserModel, DiffusionConfig,
    NoiseMode, SelectionMetric,
};
use pseudocbct_core::io::{read_volume, write_evaluation, write_volume};
use pseudocbct_core::metrics::{evaluate_run, EvalConfig};
use pseudocbct_core::phantom::{generate_phantom, PhantomSpec};
use pseudocbct_core::pipeline::{read_volume_dir, run_ablation, run_pipeline, ExperimentConfig};
use pseudocbct_core::{Error, Image, Result, Volume};

/// Pseudo-CBCT simulation and conditional latent diffusion correction.
#[derive(Parser, Debug)]
#[command(name = "pseudocbct", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic pelvic phantom volume.
    Phantom {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [128, 128])]
        size: Vec<usize>,
        #[arg(long, default_value_t = 8)]
        slices: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Degrade a CT volume into a pseudo-CBCT volume.
    Simulate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        switches: SwitchArgs,
        /// Draw one parameter set for the whole volume.
        #[arg(long)]
        per_volume: bool,
    },
    /// Train a VQ codec on every slice of the volumes in a directory.
    TrainCodec {
        #[arg(long)]
        data: PathBuf,
        /// Validation volumes; defaults to the training data.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long, value_parser = ["2", "4", "8"])]
        factor: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        epochs: usize,
        #[arg(long, default_value_t = 50)]
        patience: usize,
        #[arg(long, value_delimiter = ',')]
        widths: Option<Vec<usize>>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Train the conditional denoiser on paired `ct_<id>.vol` / `cbct_<id>.vol` files.
    TrainCldm {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        widths: Option<Vec<usize>>,
        #[arg(long)]
        lr: Option<f64>,
        /// Directory for per-epoch `last.ckpt` / `best.ckpt`.
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
    },
    /// Pick the initial-noise seed that scores best on a validation pair.
    SelectNoise {
        #[arg(long)]
        cldm: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        cbct: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value_t = 100)]
        candidates: u64,
        #[arg(long, value_enum, default_value_t = MetricArg::Mae)]
        metric: MetricArg,
        /// First candidate seed; candidates are consecutive.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Translate a pseudo-CBCT (or CBCT) volume into a synthetic CT.
    Generate {
        #[arg(long)]
        cldm: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Independent noise per slice instead of one shared tensor.
        #[arg(long)]
        per_slice_noise: bool,
    },
    /// Compare a synthetic CT against its input and a reference CT.
    Evaluate {
        #[arg(long)]
        syn: PathBuf,
        #[arg(long)]
        cbct: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value_t = 600.0)]
        threshold: f64,
        /// ROI center as `y,x`; repeatable.
        #[arg(long, value_parser = parse_point)]
        roi: Vec<(usize, usize)>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full experiment described by a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Regenerate the pseudo-CBCT dataset for the proposed procedure and each single-step ablation.
    Ablation {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the default experiment config as TOML.
    Config,
}

#[derive(Args, Debug, Clone, Copy)]
struct SwitchArgs {
    #[arg(long)]
    no_warp: bool,
    #[arg(long)]
    no_contrast: bool,
    #[arg(long)]
    no_mask1: bool,
    #[arg(long)]
    no_mask2: bool,
    #[arg(long)]
    no_mask3: bool,
}

impl SwitchArgs {
    fn switches(self) -> Switches {
        Switches {
            warp: !self.no_warp,
            contrast: !self.no_contrast,
            mask1: !self.no_mask1,
            mask2: !self.no_mask2,
            mask3: !self.no_mask3,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum MetricArg {
    Mae,
    Ssim,
}

fn parse_point(s: &str) -> std::result::Result<(usize, usize), String> {
    let (y, x) = s.split_once(',').ok_or("expected `y,x`")?;
    Ok((
        y.trim().parse().map_err(|e| format!("{e}"))?,
        x.trim().parse().map_err(|e| format!("{e}"))?,
    ))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(".params.json");
    out.with_file_name(name)
}

fn volume_slices(dir: &Path) -> Result<Vec<Image>> {
    let vols = read_volume_dir(dir)?;
    if vols.is_empty() {
        return Err(Error::Data(format!("no .vol files in {}", dir.display())));
    }
    Ok(vols.into_iter().flat_map(|(_, v)| v.slices).collect())
}

/// Pairs `cbct_<id>` with `ct_<id>` by id.
fn paired_volumes(dir: &Path) -> Result<Vec<(Volume, Volume)>> {
    let vols = read_volume_dir(dir)?;
    let mut pairs = Vec::new();
    for (name, v) in &vols {
        if let Some(id) = name.strip_prefix("cbct_") {
            let ct = vols
                .iter()
                .find(|(n, _)| n.strip_prefix("ct_") == Some(id))
                .ok_or_else(|| Error::Data(format!("no ct_{id}.vol for {name}.vol")))?;
            pairs.push((v.clone(), ct.1.clone()));
        }
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!("no cbct_/ct_ pairs in {}", dir.display())));
    }
    Ok(pairs)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom { seed, size, slices, out } => {
            let spec = PhantomSpec::with_size(size[0], size[1], slices, seed);
            write_volume(&generate_phantom(&spec)?, &out)
        }
        Command::Simulate {
            input,
            out,
            seed,
            switches,
            per_volume,
        } => {
            let ct = read_volume(&input)?;
            let opts = SimulationOptions {
                switches: switches.switches(),
                scope: if per_volume {
                    ParamScope::PerVolume
                } else {
                    ParamScope::PerSlice
                },
                ..SimulationOptions::default()
            };
            let (cbct, params) = simulate_volume(&ct, seed, &opts)?;
            write_volume(&cbct, &out)?;
            write_json(&sidecar_path(&out), &params)
        }
        Command::TrainCodec {
            data,
            val,
            factor,
            out,
            seed,
            epochs,
            patience,
            widths,
            lr,
        } => {
            let train = volume_slices(&data)?;
            let val = match val {
                Some(dir) => volume_slices(&dir)?,
                None => Vec::new(),
            };
            let defaults = CodecConfig::default();
            let cfg = CodecConfig {
                factor: factor.parse().expect("validated by clap"),
                widths: widths.unwrap_or(defaults.widths.clone()),
                learning_rate: lr.unwrap_or(defaults.learning_rate),
                max_epochs: epochs,
                patience,
                seed,
                ..defaults
            };
            let model = train_codec(&train, &val, &cfg)?;
            model.save(&out)
        }
        Command::TrainCldm {
            pairs,
            codec,
            epochs,
            steps,
            seed,
            out,
            widths,
            lr,
            checkpoint_dir,
        } => {
            let codec = CodecModel::load(&codec)?;
            let latents = encode_pairs(&codec, &paired_volumes(&pairs)?)?;
            let defaults = DiffusionConfig::default();
            let cfg = DiffusionConfig {
                steps,
                epochs,
                seed,
                widths: widths.unwrap_or(defaults.widths.clone()),
                learning_rate: lr.unwrap_or(defaults.learning_rate),
                ..defaults
            };
            let mut model = DenoiserModel::new(cfg)?;
            train(&mut model, &latents, &[], &CheckpointPolicy { dir: checkpoint_dir })?;
            model.save(&out)
        }
        Command::SelectNoise {
            cldm,
            codec,
            cbct,
            reference,
            candidates,
            metric,
            seed,
        } => {
            let model = DenoiserModel::load(&cldm)?;
            let codec = CodecModel::load(&codec)?;
            let pair = (read_volume(&cbct)?, read_volume(&reference)?);
            let seeds: Vec<u64> = (seed..seed + candidates).collect();
            let metric = match metric {
                MetricArg::Mae => SelectionMetric::Mae,
                MetricArg::Ssim => SelectionMetric::Ssim,
            };
            let sel = select_initial_noise(&model, &codec, &[pair], &seeds, metric)?;
            println!("{}", serde_json::to_string_pretty(&sel)?);
            Ok(())
        }
        Command::Generate {
            cldm,
            codec,
            input,
            noise_seed,
            out,
            per_slice_noise,
        } => {
            let model = DenoiserModel::load(&cldm)?;
            let codec = CodecModel::load(&codec)?;
            let mode = if per_slice_noise {
                NoiseMode::PerSlice
            } else {
                NoiseMode::Shared
            };
            let syn = generate_volume(&model, &codec, &read_volume(&input)?, noise_seed, mode)?;
            write_volume(&syn, &out)
        }
        Command::Evaluate {
            syn,
            cbct,
            reference,
            threshold,
            roi,
            out,
        } => {
            let cfg = EvalConfig {
                threshold_hu: threshold,
                rois: roi,
                ..EvalConfig::default()
            };
            let report = evaluate_run(&read_volume(&syn)?, &read_volume(&cbct)?, &read_volume(&reference)?, &cfg)?;
            write_evaluation(&report, &out)?;
            Ok(())
        }
        Command::Run { config, out, seed } => {
            let cfg = load_config(&config, out, seed)?;
            let outcome = run_pipeline(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&outcome.manifest.summary)?);
            Ok(())
        }
        Command::Ablation { config, out, seed } => {
            let cfg = load_config(&config, out, seed)?;
            let variants = run_ablation(&cfg)?;
            for v in variants {
                println!("{:<14} mae_vs_proposed={:.3}", v.label, v.mae_vs_proposed);
            }
            Ok(())
        }
        Command::Config => {
            print!("{}", ExperimentConfig::default().to_toml()?);
            Ok(())
        }
    }
}

/// Loads a config; `--seed` reseeds every stage.
fn load_config(path: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    if let Some(s) = seed {
        cfg.phantoms.base_seed = s;
        cfg.split.seed = s;
        cfg.degradation.seed = s;
        cfg.codec.template.seed = s;
        cfg.diffusion.model.seed = s;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({
                "error": e.kind(),
                "code": e.code(),
                "message": e.to_string(),
            });
            eprintln!("{report}");
            ExitCode::from(e.code() as u8)
        }
    }
}
