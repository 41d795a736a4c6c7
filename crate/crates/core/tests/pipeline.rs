use pseudocbct_core::codec::{CodecModel, LatentCodec};
use pseudocbct_core::degrade::Switches;
use pseudocbct_core::error::Error;
use pseudocbct_core::io::read_volume;
use pseudocbct_core::pipeline::{run_ablation, run_pipeline, ExperimentConfig};
use pseudocbct_core::phantom::PhantomSpec;

fn tiny(dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.output_dir = dir.to_path_buf();
    cfg.phantoms.count = 5;
    cfg.phantoms.spec = PhantomSpec::with_size(32, 32, 2, 0);
    cfg.degradation.options.template.n_angles = 90;
    cfg.codec.template.widths = vec![4, 4, 4];
    cfg.codec.template.codebook_size = 32;
    cfg.codec.template.max_epochs = 2;
    cfg.diffusion.model.steps = 8;
    cfg.diffusion.model.widths = vec![4, 8];
    cfg.diffusion.model.embed_dim = 8;
    cfg.diffusion.model.epochs = 2;
    cfg.diffusion.noise_candidates = 2;
    cfg.evaluation.rois = vec![(16, 16)];
    cfg
}

#[test]
fn pipeline_is_deterministic_and_complete() {
    let root = tempfile::tempdir().unwrap();
    let a = run_pipeline(&tiny(&root.path().join("a"))).unwrap();
    let b = run_pipeline(&tiny(&root.path().join("b"))).unwrap();
    assert_eq!(a.manifest.artifact_hashes(), b.manifest.artifact_hashes());
    assert_eq!(a.manifest.completed_stages.len(), 7);
    assert!(a.manifest.failed_stage.is_none());

    for f in [2usize, 4, 8] {
        let codec = CodecModel::load(&a.dir.join(format!("codec/codec_f{f}.ckpt"))).unwrap();
        let ct = read_volume(&a.dir.join("phantoms/ct_0000.vol")).unwrap();
        let z = codec.to_latent(&ct.slices[0]).unwrap();
        assert_eq!(z.shape(), (32 / f, 32 / f));
    }
    // every artifact listed in the manifest exists with the recorded hash
    for art in &a.manifest.artifacts {
        let bytes = std::fs::read(a.dir.join(&art.path)).unwrap();
        assert_eq!(pseudocbct_core::pipeline::sha256_hex(&bytes), art.sha256);
    }
    assert!(a.dir.join("manifest.json").exists());
    assert!(!a.dir.join(".lock").exists());
}

#[test]
fn failing_stage_is_named_and_manifest_persisted() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = tiny(root.path());
    // 36 is not divisible by 8, so the f=8 codec stage fails
    cfg.phantoms.spec = PhantomSpec::with_size(36, 36, 1, 0);
    let err = run_pipeline(&cfg).unwrap_err();
    match &err {
        Error::Stage { stage, .. } => assert_eq!(stage, "codec"),
        other => panic!("unexpected error {other:?}"),
    }
    let text = std::fs::read_to_string(root.path().join("manifest.json")).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(manifest["failed_stage"], "codec");
    assert_eq!(manifest["completed_stages"][1], "simulate");
}

#[test]
fn no_warp_config_is_recorded() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = tiny(root.path());
    cfg.degradation.options.switches = Switches { warp: false, ..Switches::all() };
    cfg.codec.factors = vec![2];
    cfg.diffusion.noise_candidates = 1;
    let out = run_pipeline(&cfg).unwrap();
    assert!(!out.manifest.switches.unwrap().warp);
    let side = std::fs::read_to_string(out.dir.join("pseudo_cbct/cbct_0000.params.json")).unwrap();
    let params: serde_json::Value = serde_json::from_str(&side).unwrap();
    assert_eq!(params[0]["switches"]["warp"], false);
}

#[test]
fn ablation_variants_differ_from_proposed() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = tiny(root.path());
    cfg.phantoms.count = 3;
    let variants = run_ablation(&cfg).unwrap();
    assert_eq!(variants.len(), 6);
    assert_eq!(variants[0].mae_vs_proposed, 0.0);
    for v in &variants[1..] {
        assert!(v.mae_vs_proposed > 0.0, "{} had no effect", v.label);
    }
}
