//! Experiment orchestration: phantom -> pseudo-CBCT -> codec -> CLDM ->
//! noise selection -> generation -> evaluation, with a hashed manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{train_codec, CodecConfig, CodecModel};
use crate::degrade::{simulate_volume, SimulationOptions, Switches};
use crate::diffusion::{
    encode_pairs, generate_volume, select_initial_noise, train, CheckpointPolicy, DenoiserModel, DiffusionConfig,
    NoiseMode, SelectionMetric,
};
use crate::error::{Error, Result};
use crate::image::{Image, Volume};
use crate::io::{read_volume, write_evaluation, write_volume};
use crate::metrics::{evaluate_run, volume_mae, EvalConfig};
use crate::phantom::{generate_phantom, PhantomSpec};
use crate::seeding::substream;

/// Environment variable naming the root for relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "PSEUDOCBCT_OUTPUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSetConfig {
    pub count: usize,
    /// Phantom `i` uses seed `base_seed + i`.
    pub base_seed: u64,
    pub spec: PhantomSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub seed: u64,
    /// Relative train / validation / test weights.
    pub ratio: [usize; 3],
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            seed: 0,
            ratio: [66, 1, 8],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationConfig {
    pub seed: u64,
    pub options: SimulationOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecStageConfig {
    /// One codec is trained per factor.
    pub factors: Vec<usize>,
    /// Shared settings; `factor` is overridden.
    pub template: CodecConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionStageConfig {
    /// Which trained codec provides the latent space.
    pub factor: usize,
    pub model: DiffusionConfig,
    pub noise_candidates: usize,
    pub selection_metric: SelectionMetric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub phantoms: PhantomSetConfig,
    pub split: SplitConfig,
    pub degradation: DegradationConfig,
    pub codec: CodecStageConfig,
    pub diffusion: DiffusionStageConfig,
    pub evaluation: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let spec = PhantomSpec::default();
        let c = spec.height as usize / 2;
        ExperimentConfig {
            output_dir: PathBuf::from("experiment"),
            phantoms: PhantomSetConfig {
                count: 75,
                base_seed: 0,
                spec,
            },
            split: SplitConfig::default(),
            degradation: DegradationConfig {
                seed: 0,
                options: SimulationOptions::default(),
            },
            codec: CodecStageConfig {
                factors: vec![2, 4, 8],
                template: CodecConfig::default(),
            },
            diffusion: DiffusionStageConfig {
                factor: 2,
                model: DiffusionConfig::default(),
                noise_candidates: 100,
                selection_metric: SelectionMetric::Mae,
            },
            evaluation: EvalConfig {
                rois: vec![(c, c), (c, c / 2), (c / 2, c)],
                ..EvalConfig::default()
            },
        }
    }
}

impl ExperimentConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.phantoms.count < 3 {
            return Err(Error::param("need at least three phantoms for a train/val/test split"));
        }
        self.phantoms.spec.validate()?;
        if self.codec.factors.is_empty() {
            return Err(Error::param("no codec factors configured"));
        }
        for &f in &self.codec.factors {
            CodecConfig {
                factor: f,
                ..self.codec.template.clone()
            }
            .validate()?;
        }
        if !self.codec.factors.contains(&self.diffusion.factor) {
            return Err(Error::param(format!(
                "diffusion factor {} has no codec",
                self.diffusion.factor
            )));
        }
        if self.diffusion.noise_candidates == 0 {
            return Err(Error::param("need at least one noise candidate"));
        }
        if self.split.ratio.iter().any(|&r| r == 0) {
            return Err(Error::param("split ratio entries must be positive"));
        }
        self.diffusion.model.validate()
    }

    /// `output_dir`, resolved against the output-root variable when relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        if self.output_dir.is_relative() {
            if let Ok(root) = std::env::var(OUTPUT_ROOT_ENV) {
                return Path::new(&root).join(&self.output_dir);
            }
        }
        self.output_dir.clone()
    }

    pub fn phantom_seeds(&self) -> Vec<u64> {
        (0..self.phantoms.count as u64).map(|i| self.phantoms.base_seed + i).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<u64>,
    pub validation: Vec<u64>,
    pub test: Vec<u64>,
}

/// Seeded shuffle of `seeds` cut in proportion to `ratio`; validation and
/// test each get at least one entry.
pub fn split_seeds(seeds: &[u64], cfg: &SplitConfig) -> Result<Split> {
    let n = seeds.len();
    if n < 3 {
        return Err(Error::param("need at least three items to split"));
    }
    let total: usize = cfg.ratio.iter().sum();
    let n_val = ((n * cfg.ratio[1]) as f64 / total as f64).round().max(1.0) as usize;
    let n_test = ((n * cfg.ratio[2]) as f64 / total as f64).round().max(1.0) as usize;
    if n_val + n_test >= n {
        return Err(Error::param("split leaves no training data"));
    }
    let mut order = seeds.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(substream(cfg.seed, 0)));
    let test = order[..n_test].to_vec();
    let validation = order[n_test..n_test + n_val].to_vec();
    let mut train = order[n_test + n_val..].to_vec();
    train.sort_unstable();
    Ok(Split {
        train,
        validation,
        test,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub stage: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub config_toml: String,
    pub split: Option<Split>,
    pub switches: Option<Switches>,
    pub completed_stages: Vec<String>,
    pub failed_stage: Option<String>,
    pub noise_seed: Option<u64>,
    pub artifacts: Vec<Artifact>,
    pub summary: BTreeMap<String, f64>,
}

impl Manifest {
    pub fn artifact_hashes(&self) -> BTreeMap<String, String> {
        self.artifacts
            .iter()
            .map(|a| (a.path.clone(), a.sha256.clone()))
            .collect()
    }
}

/// Exclusive ownership of an experiment directory for the guard's lifetime.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::state(format!(
                "experiment directory {} is locked by another process",
                dir.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

struct Run {
    dir: PathBuf,
    manifest: Manifest,
}

impl Run {
    fn record(&mut self, stage: &str, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let rel = path.strip_prefix(&self.dir).unwrap_or(path);
        self.manifest.artifacts.push(Artifact {
            path: rel.to_string_lossy().replace('\\', "/"),
            sha256: sha256_hex(&bytes),
            stage: stage.to_string(),
        });
        Ok(())
    }

    fn save_manifest(&self) -> Result<()> {
        let p = self.dir.join("manifest.json");
        fs::write(&p, serde_json::to_string_pretty(&self.manifest)?).map_err(|e| Error::io(&p, e))
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Run) -> Result<T>) -> Result<T> {
        log::info!("stage {name}");
        match f(self) {
            Ok(v) => {
                self.manifest.completed_stages.push(name.to_string());
                self.save_manifest()?;
                Ok(v)
            }
            Err(e) => {
                self.manifest.failed_stage = Some(name.to_string());
                self.save_manifest()?;
                Err(Error::Stage {
                    stage: name.to_string(),
                    source: Box::new(e),
                })
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

fn load_pairs(seeds: &[u64], ct: &BTreeMap<u64, Volume>, cbct: &BTreeMap<u64, Volume>) -> Vec<(Volume, Volume)> {
    seeds.iter().map(|s| (cbct[s].clone(), ct[s].clone())).collect()
}

fn slices_of<'a>(vols: impl Iterator<Item = &'a Volume>) -> Vec<Image> {
    vols.flat_map(|v| v.slices.iter().cloned()).collect()
}

/// Runs every stage; on failure the manifest names the failed stage and
/// lists the artifacts written so far.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<PipelineOutcome> {
    config.validate()?;
    let dir = config.resolved_output_dir();
    let _lock = DirLock::acquire(&dir)?;
    let config_toml = config.to_toml()?;
    let cfg_path = dir.join("config.toml");
    fs::write(&cfg_path, &config_toml).map_err(|e| Error::io(&cfg_path, e))?;
    let mut run = Run {
        dir: dir.clone(),
        manifest: Manifest {
            config_sha256: sha256_hex(config_toml.as_bytes()),
            config_toml,
            switches: Some(config.degradation.options.switches),
            ..Manifest::default()
        },
    };

    let seeds = config.phantom_seeds();
    let split = split_seeds(&seeds, &config.split)?;
    run.manifest.split = Some(split.clone());

    let ct = run.stage("phantom", |run| {
        let mut out = BTreeMap::new();
        for &s in &seeds {
            let spec = PhantomSpec {
                seed: s,
                ..config.phantoms.spec.clone()
            };
            let v = generate_phantom(&spec)?;
            let p = run.dir.join(format!("phantoms/ct_{s:04}.vol"));
            write_volume(&v, &p)?;
            run.record("phantom", &p)?;
            out.insert(s, v);
        }
        Ok(out)
    })?;

    let cbct = run.stage("simulate", |run| {
        let mut out = BTreeMap::new();
        for &s in &seeds {
            let (v, params) = simulate_volume(&ct[&s], substream(config.degradation.seed, s), &config.degradation.options)?;
            let p = run.dir.join(format!("pseudo_cbct/cbct_{s:04}.vol"));
            write_volume(&v, &p)?;
            run.record("simulate", &p)?;
            let side = run.dir.join(format!("pseudo_cbct/cbct_{s:04}.params.json"));
            fs::write(&side, serde_json::to_string_pretty(&params)?).map_err(|e| Error::io(&side, e))?;
            run.record("simulate", &side)?;
            out.insert(s, v);
        }
        Ok(out)
    })?;

    let train_pairs = load_pairs(&split.train, &ct, &cbct);
    let val_pairs = load_pairs(&split.validation, &ct, &cbct);
    let test_pairs = load_pairs(&split.test, &ct, &cbct);

    let codecs = run.stage("codec", |run| {
        let train_imgs = slices_of(train_pairs.iter().flat_map(|(c, r)| [c, r]));
        let val_imgs = slices_of(val_pairs.iter().map(|(_, r)| r));
        let mut out = BTreeMap::new();
        for &f in &config.codec.factors {
            let cfg = CodecConfig {
                factor: f,
                ..config.codec.template.clone()
            };
            let model = train_codec(&train_imgs, &val_imgs, &cfg)?;
            let p = run.dir.join(format!("codec/codec_f{f}.ckpt"));
            model.save(&p)?;
            run.record("codec", &p)?;
            let val_loss = model.training_log.iter().map(|l| l.val_loss).fold(f64::INFINITY, f64::min);
            run.manifest.summary.insert(format!("codec_f{f}_best_val_mse"), val_loss);
            out.insert(f, model);
        }
        Ok(out)
    })?;
    let codec: &CodecModel = &codecs[&config.diffusion.factor];

    let model = run.stage("train-cldm", |run| {
        let train_lat = encode_pairs(codec, &train_pairs)?;
        let val_lat = encode_pairs(codec, &val_pairs)?;
        let mut model = DenoiserModel::new(config.diffusion.model.clone())?;
        let ckpt_dir = run.dir.join("cldm");
        train(
            &mut model,
            &train_lat,
            &val_lat,
            &CheckpointPolicy {
                dir: Some(ckpt_dir.clone()),
            },
        )?;
        for name in ["last.ckpt", "best.ckpt"] {
            run.record("train-cldm", &ckpt_dir.join(name))?;
        }
        if let Some(l) = model.training_log.last() {
            run.manifest.summary.insert("cldm_final_train_loss".into(), l.train_loss);
        }
        Ok(model)
    })?;

    let noise_seed = run.stage("select-noise", |run| {
        let candidates: Vec<u64> = (0..config.diffusion.noise_candidates as u64).collect();
        let sel = select_initial_noise(&model, codec, &val_pairs, &candidates, config.diffusion.selection_metric)?;
        let p = run.dir.join("cldm/noise_selection.json");
        fs::write(&p, serde_json::to_string_pretty(&sel)?).map_err(|e| Error::io(&p, e))?;
        run.record("select-noise", &p)?;
        run.manifest.noise_seed = Some(sel.seed);
        Ok(sel.seed)
    })?;

    let syn = run.stage("generate", |run| {
        let mut out = Vec::new();
        for (&s, (cb, _)) in split.test.iter().zip(&test_pairs) {
            let v = generate_volume(&model, codec, cb, noise_seed, NoiseMode::Shared)?;
            let p = run.dir.join(format!("syn/syn_{s:04}.vol"));
            write_volume(&v, &p)?;
            run.record("generate", &p)?;
            out.push(v);
        }
        Ok(out)
    })?;

    run.stage("evaluate", |run| {
        let (mut syn_mae, mut cbct_mae) = (0.0, 0.0);
        for ((&s, (cb, reference)), sv) in split.test.iter().zip(&test_pairs).zip(&syn) {
            let report = evaluate_run(sv, cb, reference, &config.evaluation)?;
            syn_mae += report.mae_syn_reference;
            cbct_mae += report.mae_cbct_reference;
            for p in write_evaluation(&report, &run.dir.join(format!("eval/{s:04}")))? {
                run.record("evaluate", &p)?;
            }
        }
        let n = syn.len() as f64;
        run.manifest.summary.insert("test_mae_syn".into(), syn_mae / n);
        run.manifest.summary.insert("test_mae_cbct".into(), cbct_mae / n);
        Ok(())
    })?;

    Ok(PipelineOutcome {
        dir,
        manifest: run.manifest,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub label: String,
    pub switches: Switches,
    /// Mean MAE between this variant's pseudo-CBCT and the proposed one.
    pub mae_vs_proposed: f64,
    pub artifacts: Vec<Artifact>,
}

/// Regenerates the pseudo-CBCT dataset for the proposed procedure and each
/// single-step ablation and writes `ablation.json`.
pub fn run_ablation(config: &ExperimentConfig) -> Result<Vec<AblationVariant>> {
    config.validate()?;
    let dir = config.resolved_output_dir().join("ablation");
    let _lock = DirLock::acquire(&dir)?;
    let seeds = config.phantom_seeds();
    let mut cts = Vec::new();
    for &s in &seeds {
        cts.push(generate_phantom(&PhantomSpec {
            seed: s,
            ..config.phantoms.spec.clone()
        })?);
    }
    let simulate = |switches: Switches, label: &str| -> Result<(Vec<Volume>, Vec<Artifact>)> {
        let opts = SimulationOptions {
            switches,
            ..config.degradation.options.clone()
        };
        let mut vols = Vec::new();
        let mut arts = Vec::new();
        let slug = label.replace("w/o ", "no-").replace(' ', "-");
        for (&s, ct) in seeds.iter().zip(&cts) {
            let (v, _) = simulate_volume(ct, substream(config.degradation.seed, s), &opts)?;
            let p = dir.join(format!("{slug}/cbct_{s:04}.vol"));
            write_volume(&v, &p)?;
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            arts.push(Artifact {
                path: p.strip_prefix(&dir).unwrap_or(&p).to_string_lossy().into_owned(),
                sha256: sha256_hex(&bytes),
                stage: "ablation".into(),
            });
            vols.push(v);
        }
        Ok((vols, arts))
    };
    let (proposed, arts) = simulate(config.degradation.options.switches, "proposed")?;
    let mut out = vec![AblationVariant {
        label: "proposed".into(),
        switches: config.degradation.options.switches,
        mae_vs_proposed: 0.0,
        artifacts: arts,
    }];
    for (label, switches) in Switches::ablations() {
        let (vols, arts) = simulate(switches, label)?;
        let mut mae = 0.0;
        for (a, b) in vols.iter().zip(&proposed) {
            mae += volume_mae(a, b)?;
        }
        out.push(AblationVariant {
            label: label.into(),
            switches,
            mae_vs_proposed: mae / vols.len() as f64,
            artifacts: arts,
        });
    }
    let p = dir.join("ablation.json");
    fs::write(&p, serde_json::to_string_pretty(&out)?).map_err(|e| Error::io(&p, e))?;
    Ok(out)
}

/// Reads every volume under `dir` whose file name ends in `.vol`, sorted by name.
pub fn read_volume_dir(dir: &Path) -> Result<Vec<(String, Volume)>> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "vol"))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|p| {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((stem, read_volume(&p)?))
        })
        .collect()
}
