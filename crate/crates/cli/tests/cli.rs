use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_tripsketch"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

const CODES: &str = "codes_i1.bin,codes_i3.bin,codes_random.bin";

fn prepare(dir: &Path) {
    run(
        dir,
        &[
            "generate-synthetic",
            "--cities",
            "120",
            "--countries",
            "4",
            "--trips",
            "400",
            "--seed",
            "3",
            "--output",
            "trips.csv",
        ],
    );
    run(
        dir,
        &[
            "split",
            "--input",
            "trips.csv",
            "--valid-fraction",
            "0.1",
            "--output-dir",
            ".",
        ],
    );
    run(
        dir,
        &[
            "build-graph",
            "--trips",
            "train.csv",
            "--holdout",
            "valid.csv",
            "--output",
            "graph.bin",
        ],
    );
    run(
        dir,
        &[
            "embed",
            "--graph",
            "graph.bin",
            "--dim",
            "16",
            "--output-dir",
            ".",
        ],
    );
    run(
        dir,
        &[
            "fit-sketches",
            "--embeddings",
            "embedding_i1.bin,embedding_i3.bin",
            "--depth",
            "4",
            "--random-modality",
            "--output-dir",
            ".",
        ],
    );
    run(
        dir,
        &[
            "train",
            "--trips",
            "train.csv",
            "--holdout",
            "valid.csv",
            "--codes",
            CODES,
            "--hidden",
            "16",
            "--epochs",
            "1",
            "--output",
            "model.bin",
        ],
    );
}

#[test]
fn stage_commands_chain_into_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir);

    let trips = fs::read_to_string(dir.join("trips.csv")).unwrap();
    assert!(trips.starts_with("user_id,checkin,checkout,city_id,device_class,affiliate_id,booker_country,hotel_country,utrip_id"));

    run(
        dir,
        &[
            "predict",
            "--model",
            "model.bin",
            "--codes",
            CODES,
            "--trips",
            "valid.csv",
            "--output",
            "preds.csv",
        ],
    );
    let preds = fs::read_to_string(dir.join("preds.csv")).unwrap();
    let mut lines = preds.lines();
    assert_eq!(lines.next().unwrap(), "trip_id,city_1,city_2,city_3,city_4");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 40);
    for row in rows {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells.len(), 5);
        let mut ids: Vec<u64> = cells[1..].iter().map(|c| c.parse().unwrap()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 4);
    }

    let out = run(
        dir,
        &[
            "evaluate",
            "--model",
            "model.bin,model.bin",
            "--codes",
            CODES,
            "--examples",
            "valid.csv",
            "--popularity-boost",
            "--baseline",
            "--report",
            "report",
        ],
    );
    let text = stdout(&out);
    assert!(text.contains("precision@4"), "{text}");
    assert!(text.contains("popularity baseline"), "{text}");
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.join("report/summary.json")).unwrap()).unwrap();
    let p = summary["precision"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));
    assert!(dir.join("report/samples.csv").exists());
}

#[test]
fn wrong_codes_order_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir);
    let out = Command::new(env!("CARGO_BIN_EXE_tripsketch"))
        .args([
            "predict",
            "--model",
            "model.bin",
            "--codes",
            "codes_random.bin,codes_i1.bin,codes_i3.bin",
            "--trips",
            "valid.csv",
            "--output",
            "p.csv",
        ])
        .current_dir(dir)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("modalities"));
}

#[test]
fn run_pipeline_skips_on_rerun_and_flags_override_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(
        dir.join("tiny.toml"),
        "work_dir = \"work\"\n\
         [data.synthetic]\ncities = 100\ncountries = 5\ntrips = 300\n\
         [embed]\ndim = 16\n\
         [sketch]\ndepth = 4\n\
         [model]\nhidden = 64\n\
         [train]\nepochs = 1\n\
         [eval]\nensemble = 1\n",
    )
    .unwrap();
    let first = stdout(&run(
        dir,
        &["run-pipeline", "--config", "tiny.toml", "--hidden", "12"],
    ));
    assert_eq!(first.matches(" ran").count(), 7, "{first}");
    let second = stdout(&run(
        dir,
        &["run-pipeline", "--config", "tiny.toml", "--hidden", "12"],
    ));
    assert_eq!(second.matches(" skipped").count(), 7, "{second}");
    // Changing a flag invalidates only the model and its evaluation.
    let third = stdout(&run(
        dir,
        &["run-pipeline", "--config", "tiny.toml", "--hidden", "10"],
    ));
    assert_eq!(third.matches(" ran").count(), 2, "{third}");
    assert!(dir.join("work/report/summary.json").exists());
}

#[test]
fn ablate_emits_table_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(
        dir.join("ablate.toml"),
        "[data.synthetic]\ncities = 100\ncountries = 5\ntrips = 200\n\
         [embed]\ndim = 16\n\
         [sketch]\ndepth = 4\n\
         [model]\nhidden = 16\n\
         [train]\nepochs = 1\n\
         [eval]\nensemble = 2\n\
         [ablation]\nseeds = [0, 1]\n",
    )
    .unwrap();
    let text = stdout(&run(
        dir,
        &[
            "ablate",
            "--config",
            "ablate.toml",
            "--output",
            "ablation.json",
        ],
    ));
    assert!(text.contains("| Basic"), "{text}");
    assert!(text.contains("mean over 2 seeds"), "{text}");
    let json: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.join("ablation.json")).unwrap()).unwrap();
    let names: Vec<&str> = json["reports"][0]["columns"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert_eq!(
        names,
        ["Basic", "+Data", "+Features", "+Popularity", "+Ensembling"]
    );
}

#[test]
fn bad_arguments_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tripsketch"))
        .args([
            "generate-synthetic",
            "--cities",
            "3",
            "--countries",
            "5",
            "--output",
            "x.csv",
        ])
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("countries"));
    let out = Command::new(env!("CARGO_BIN_EXE_tripsketch"))
        .args(["split", "--input", "missing.csv", "--output-dir", "."])
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
}
