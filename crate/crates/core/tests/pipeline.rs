use std::fs;
use std::path::Path;

use tripsketch_core::dataset::SyntheticConfig;
use tripsketch_core::pipeline::{run_pipeline, PipelineConfig, Profile, Stage, Workspace};

fn tiny() -> PipelineConfig {
    let mut c = PipelineConfig::desk_scale().with_seed(5);
    c.data.synthetic = SyntheticConfig {
        seed: 5,
        ..SyntheticConfig::small()
    };
    c.embed.dim = 16;
    c.sketch.depth = 4;
    c.model.hidden = 16;
    c.train.batch_size = 32;
    c.train.epochs = 1;
    c.eval.ensemble = 2;
    c
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn rerun_skips_every_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = Workspace::new(tmp.path());
    let config = tiny();
    let first = run_pipeline(&config, &ws).unwrap();
    assert!(first.stages.iter().all(|s| s.ran));
    assert_eq!(first.stages.len(), 7);
    let second = run_pipeline(&config, &ws).unwrap();
    assert!(second.stages.iter().all(|s| !s.ran), "{:?}", second.stages);
    assert_eq!(first.report.precision, second.report.precision);
}

#[test]
fn changed_hyperparameter_reruns_downstream_only() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = Workspace::new(tmp.path());
    let mut config = tiny();
    run_pipeline(&config, &ws).unwrap();
    config.train.optimizer.lr *= 0.5;
    let run = run_pipeline(&config, &ws).unwrap();
    let ran: Vec<Stage> = run
        .stages
        .iter()
        .filter(|s| s.ran)
        .map(|s| s.stage)
        .collect();
    assert_eq!(ran, vec![Stage::Train, Stage::Evaluate]);
}

#[test]
fn corrupted_header_reruns_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = Workspace::new(tmp.path());
    let config = tiny();
    run_pipeline(&config, &ws).unwrap();
    let mut bytes = fs::read(ws.graph()).unwrap();
    bytes[0] ^= 0xff;
    fs::write(ws.graph(), bytes).unwrap();
    let run = run_pipeline(&config, &ws).unwrap();
    let graph = run.stages.iter().find(|s| s.stage == Stage::Graph).unwrap();
    assert!(graph.ran);
    // Same bytes as before, so everything downstream is still current.
    let embed = run.stages.iter().find(|s| s.stage == Stage::Embed).unwrap();
    assert!(!embed.ran);
}

#[test]
fn identical_configs_give_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let config = tiny();
    run_pipeline(&config, &Workspace::new(a.path())).unwrap();
    run_pipeline(&config, &Workspace::new(b.path())).unwrap();
    let (fa, fb) = (dir_bytes(a.path()), dir_bytes(b.path()));
    assert_eq!(fa.len(), fb.len());
    for ((na, ba), (nb, bb)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        assert!(ba == bb, "{na} differs");
    }
}

#[test]
fn failing_stage_leaves_marker() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = Workspace::new(tmp.path());
    let mut config = tiny();
    config.sketch.width = 3;
    assert!(run_pipeline(&config, &ws).is_err());
    assert!(tmp.path().join("FAILED-fit-sketches").exists());
    assert!(ws.graph().exists());
    config.sketch.width = 16;
    run_pipeline(&config, &ws).unwrap();
    assert!(!tmp.path().join("FAILED-fit-sketches").exists());
}

#[test]
fn toml_overrides_profile_defaults() {
    let c = PipelineConfig::from_toml("[model]\nhidden = 99\n").unwrap();
    assert_eq!(c.profile, Profile::DeskScale);
    assert_eq!(c.model.hidden, 99);
    assert_eq!(c.sketch.depth, 8);
    assert_eq!(c.model.blocks, 3);

    let c = PipelineConfig::from_toml("profile = \"paper-scale\"\n[sketch]\nwidth = 64\n").unwrap();
    assert_eq!(c.sketch.depth, 40);
    assert_eq!(c.sketch.width, 64);
    assert_eq!(c.model.hidden, 3000);
    assert_eq!(c.embed.dim, 1024);
    assert_eq!(c.train.optimizer.lr, 5e-4);

    let round = PipelineConfig::from_toml(&c.to_toml().unwrap()).unwrap();
    assert_eq!(round, c);
    assert!(PipelineConfig::from_toml("[model]\nhidden = \"wide\"\n").is_err());
}

#[test]
fn fingerprint_tracks_every_hyperparameter() {
    let base = PipelineConfig::desk_scale();
    assert_eq!(
        base.fingerprint(),
        PipelineConfig::desk_scale().fingerprint()
    );
    let mut variants = Vec::new();
    let mut c = base.clone();
    c.model.decay = 0.8;
    variants.push(c);
    let mut c = base.clone();
    c.train.optimizer.weight_decay = 0.02;
    variants.push(c);
    let mut c = base.clone();
    c.sketch.seed = 9;
    variants.push(c);
    let mut c = base.clone();
    c.embed.iterations = vec![1, 2];
    variants.push(c);
    for v in variants {
        assert_ne!(v.fingerprint(), base.fingerprint());
    }
}
