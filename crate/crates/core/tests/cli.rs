use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use psunet::cli::{cmd_ablate, default_ablation_grid, RunConfig};
use psunet::metrics::{evaluate_dirs, MetricsConfig};
use psunet::model::ModelConfig;
use psunet::train::{synthetic_dataset, AugmentConfig, TrainConfig};

const TINY_CONFIG: &str = r#"{
  "model": {"stage_widths": [8, 16], "trsu_depths": [2, 1], "trsu_mid_widths": [8, 16], "mid_block_layers": 2},
  "train": {"max_steps": 3, "batch_size": 2, "augment": {"resize_to": 40, "crop_to": 32}}
}"#;

fn psunet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_psunet"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Synthetic dataset plus a briefly trained tiny checkpoint.
fn trained(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let data = dir.join("data");
    let config = dir.join("run.json");
    let ckpt = dir.join("model.psun");
    fs::write(&config, TINY_CONFIG).unwrap();
    ok(psunet(&[
        "synth",
        "--output",
        p(&data),
        "--count",
        "4",
        "--size",
        "40",
        "--seed",
        "3",
    ]));
    ok(psunet(&[
        "train",
        "--config",
        p(&config),
        "--input",
        p(&data),
        "--checkpoint",
        p(&ckpt),
        "--stage",
        "1",
        "--seed",
        "5",
    ]));
    (data, config, ckpt)
}

fn write_rgb(path: &Path, w: u32, h: u32) {
    let img = image::RgbImage::from_fn(w, h, |x, y| {
        image::Rgb([(x * 3) as u8, (y * 2) as u8, ((x + y) % 256) as u8])
    });
    img.save(path).unwrap();
}

#[test]
fn infer_preserves_size_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _, ckpt) = trained(dir.path());
    let input = dir.path().join("odd.png");
    write_rgb(&input, 77, 123);
    let run = |out: &Path| {
        ok(psunet(&[
            "infer",
            "--checkpoint",
            p(&ckpt),
            "--input",
            p(&input),
            "--output",
            p(out),
            "--size",
            "64",
        ]));
        fs::read(out.join("odd.png")).unwrap()
    };
    let a = run(&dir.path().join("a"));
    let b = run(&dir.path().join("b"));
    assert_eq!(a, b);
    let mask = image::load_from_memory(&a).unwrap();
    assert_eq!((mask.width(), mask.height()), (77, 123));
}

#[test]
fn infer_directory_writes_one_mask_per_image() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _, ckpt) = trained(dir.path());
    let inputs = dir.path().join("in");
    fs::create_dir(&inputs).unwrap();
    for (name, w, h) in [("a", 20, 30), ("b", 64, 64), ("c", 33, 17)] {
        write_rgb(&inputs.join(format!("{name}.png")), w, h);
    }
    fs::write(inputs.join("notes.txt"), "ignored").unwrap();
    let out = dir.path().join("out");
    ok(psunet(&[
        "infer",
        "--checkpoint",
        p(&ckpt),
        "--input",
        p(&inputs),
        "--output",
        p(&out),
        "--size",
        "32",
    ]));
    let mut names: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["a.png", "b.png", "c.png"]);
}

#[test]
fn train_writes_log_and_stage_two_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config, ckpt) = trained(dir.path());
    let log = fs::read_to_string(dir.path().join("model.psun.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let stage2 = dir.path().join("stage2.psun");
    ok(psunet(&[
        "train",
        "--config",
        p(&config),
        "--input",
        p(&data),
        "--checkpoint",
        p(&stage2),
        "--resume",
        p(&ckpt),
        "--stage",
        "2",
        "--output",
        p(&dir.path().join("s2.jsonl")),
    ]));
    let records: Vec<serde_json::Value> = fs::read_to_string(dir.path().join("s2.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 3);
    assert!(records
        .iter()
        .all(|r| r["stage"] == 2 && r["lr"].as_f64() == Some(0.3 * 1e-3)));
}

#[test]
fn eval_matches_library_and_reports_json() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _, ckpt) = trained(dir.path());
    let preds = dir.path().join("preds");
    ok(psunet(&[
        "infer",
        "--checkpoint",
        p(&ckpt),
        "--input",
        p(&data.join("images")),
        "--output",
        p(&preds),
        "--size",
        "32",
    ]));
    let csv = dir.path().join("report.csv");
    ok(psunet(&[
        "eval",
        "--input",
        p(&preds),
        "--gt",
        p(&data.join("masks")),
        "--output",
        p(&csv),
    ]));
    let report = evaluate_dirs(&preds, data.join("masks"), &MetricsConfig::default()).unwrap();
    assert_eq!(fs::read_to_string(&csv).unwrap(), report.to_csv());
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(csv.with_extension("json")).unwrap()).unwrap();
    assert_eq!(json["aggregate"]["count"], 4);
    assert!(fs::read_to_string(&csv)
        .unwrap()
        .starts_with("name,mae,maxf,smeasure\n"));
}

#[test]
fn inspect_macs_scale_with_area() {
    let macs = |size: &str| -> u64 {
        let out = ok(psunet(&["inspect", "--size", size]));
        let line = out.lines().find(|l| l.starts_with("macs")).unwrap();
        line.split_whitespace().nth(1).unwrap().parse().unwrap()
    };
    assert_eq!(macs("640"), 4 * macs("320"));
    let out = ok(psunet(&["inspect"]));
    assert!(out.contains("params     4142340"));
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _, ckpt) = trained(dir.path());

    let out = psunet(&[
        "infer",
        "--checkpoint",
        p(&ckpt),
        "--input",
        p(&data),
        "--output",
        p(dir.path()),
        "--size",
        "30",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[config]"));

    let junk = dir.path().join("junk.psun");
    fs::write(&junk, b"not a checkpoint at all").unwrap();
    let out = psunet(&[
        "infer",
        "--checkpoint",
        p(&junk),
        "--input",
        p(&data),
        "--output",
        p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[io]"));

    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = psunet(&[
        "eval",
        "--input",
        p(&empty),
        "--gt",
        p(&data.join("masks")),
        "--output",
        p(&dir.path().join("r.csv")),
    ]);
    assert_eq!(out.status.code(), Some(4));

    let out = psunet(&[
        "train",
        "--input",
        p(&data),
        "--checkpoint",
        p(&ckpt),
        "--stage",
        "3",
    ]);
    assert!(!out.status.success());
}

#[test]
fn ablate_cli_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("ablate.json");
    fs::write(
        &config,
        r#"{
  "model": {"stage_widths": [4, 8], "trsu_depths": [1, 1], "trsu_mid_widths": [4, 4], "mid_block_layers": 1},
  "train": {"batch_size": 2, "augment": {"resize_to": 32, "crop_to": 32}},
  "ablation": [
    {"section": "Arch.", "label": "No SPSM", "boundary": "bilinear", "t": 1,
     "loss_terms": {"bce": true, "ssim": true, "iou": true}},
    {"section": "Loss", "label": "BCE", "boundary": "spsm", "t": 2,
     "loss_terms": {"bce": true, "ssim": false, "iou": false}}
  ]
}"#,
    )
    .unwrap();
    let csv = dir.path().join("table.csv");
    ok(psunet(&[
        "ablate",
        "--config",
        p(&config),
        "--output",
        p(&csv),
        "--steps",
        "2",
        "--seed",
        "1",
    ]));
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "ablation,configuration,maxf,mae,smeasure");
    assert!(lines[1].starts_with("Arch.,No SPSM,"));
    assert!(lines[2].starts_with("Loss,BCE,"));
    assert_eq!(lines.len(), 3);
}

#[test]
fn duplicate_ablation_rows_give_identical_results() {
    let base = RunConfig {
        model: Some(ModelConfig::tiny()),
        train: TrainConfig {
            batch_size: 2,
            max_steps: 4,
            augment: AugmentConfig::plain(32),
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    };
    let row = default_ablation_grid()[1].clone();
    let train = synthetic_dataset(2, 32, 1).unwrap();
    let eval = synthetic_dataset(2, 32, 2).unwrap();
    let report = cmd_ablate(&base, &[row.clone(), row], &train, &eval);
    assert!(report.failures().is_empty());
    assert_eq!(report.results[0].outcome, report.results[1].outcome);
}
