use std::path::Path;
use std::process::{Command, Output};

use image::{GrayImage, Luma};
use tempfile::tempdir;
use transref::data::image_io::{load_rgb, save_gray, save_rgb};
use transref::data::mining::read_manifest;
use transref::data::synth::Scene;
use transref::model::{InpaintingModel, ModelConfig};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_transref")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

#[test]
fn missing_directories_are_usage_errors() {
    let dir = tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = run(&["mine", p(&missing), p(&missing), p(dir.path())]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&["eval", p(&missing), p(&missing), p(&missing)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn bad_configuration_is_a_usage_error() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("run.ini");
    std::fs::write(&cfg, "seed = x\n[train]\nlr = -1\nbogus = 3\n").unwrap();
    let out = run(&["--config", p(&cfg), "train"]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train.lr") && err.contains("train.bogus") && err.contains("general.seed"), "{err}");

    let out = run(&["--config", p(&dir.path().join("absent.ini")), "train"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn unknown_flags_exit_with_two() {
    assert_eq!(code(&run(&["masks", "--frobnicate"])), 2);
}

#[test]
fn mask_corpus_has_the_requested_layout() {
    let dir = tempdir().unwrap();
    let out = run(&["masks", p(dir.path()), "--per-bin", "10", "--size", "64", "--seed", "3"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("agreement 100.00%"));
    let mut bins = 0;
    for entry in std::fs::read_dir(dir.path()).unwrap() {
        let files: Vec<String> = std::fs::read_dir(entry.unwrap().path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        assert_eq!(files.len(), 10);
        assert_eq!(files.iter().filter(|f| f.ends_with("_d.png")).count(), 5);
        bins += 1;
    }
    assert_eq!(bins, 6);
}

#[test]
fn empty_mask_returns_the_input_unchanged() {
    let dir = tempdir().unwrap();
    let ckpt = dir.path().join("model.trkt");
    InpaintingModel::<f32>::new(&ModelConfig::toy(), 1).unwrap().save(&ckpt).unwrap();
    let scene = Scene::new(64, 64, 4, 9);
    let (input, reference) = (dir.path().join("in.png"), dir.path().join("ref.png"));
    save_rgb(&scene.view(0, 0, 64, 64), &input).unwrap();
    save_rgb(&scene.view(2, 1, 64, 64), &reference).unwrap();
    let mask = dir.path().join("mask.png");
    save_gray(&GrayImage::new(64, 64), &mask).unwrap();
    let result = dir.path().join("out/result.png");
    let grid = dir.path().join("grid.png");
    let out = run(&["infer", p(&ckpt), p(&input), p(&mask), p(&reference), p(&result), "--grid", p(&grid)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(load_rgb(&result).unwrap(), load_rgb(&input).unwrap());
    assert_eq!(load_rgb(&grid).unwrap().dimensions(), (192, 64));

    save_gray(&GrayImage::new(32, 32), &mask).unwrap();
    assert_eq!(code(&run(&["infer", p(&ckpt), p(&input), p(&mask), p(&reference), p(&result)])), 2);
}

#[test]
fn eval_of_ground_truth_against_itself() {
    let dir = tempdir().unwrap();
    let (gt, pred, masks, report) =
        (dir.path().join("gt"), dir.path().join("pred"), dir.path().join("masks"), dir.path().join("report"));
    for d in [&gt, &pred, &masks] {
        std::fs::create_dir_all(d).unwrap();
    }
    for i in 0..4u32 {
        let name = format!("{i}.png");
        let img = Scene::new(64, 64, 2, u64::from(i)).view(0, 0, 64, 64);
        save_rgb(&img, &gt.join(&name)).unwrap();
        save_rgb(&img, &pred.join(&name)).unwrap();
        let rows = 4 + 6 * i;
        let m = GrayImage::from_fn(64, 64, |_, y| Luma([if y < rows { 255 } else { 0 }]));
        save_gray(&m, &masks.join(&name)).unwrap();
    }
    let out = run(&["eval", p(&pred), p(&gt), p(&masks), "--out", p(&report), "--workers", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(report.join("per_image.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[2], "inf");
        assert_eq!(cols[3].parse::<f64>().unwrap(), 1.0);
    }
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["average"]["ssim"].as_f64(), Some(1.0));
    assert_eq!(json["average"]["psnr"].as_str(), Some("inf"));
    assert_eq!(json["metadata"]["evaluated"].as_u64(), Some(4));
    assert!(report.join("report.txt").is_file());

    std::fs::remove_file(pred.join("3.png")).unwrap();
    let out = run(&["eval", p(&pred), p(&gt), p(&masks)]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("excluded"));
}

fn write_pairs(dir: &Path, shift: (i32, i32), seeds: std::ops::Range<u64>, size: u32) {
    std::fs::create_dir_all(dir.join("a")).unwrap();
    std::fs::create_dir_all(dir.join("b")).unwrap();
    for s in seeds {
        let scene = Scene::new(size, size, 16, s);
        save_rgb(&scene.view(0, 0, size, size), &dir.join("a").join(format!("{s}.png"))).unwrap();
        save_rgb(&scene.view(shift.0, shift.1, size, size), &dir.join("b").join(format!("{s}.png"))).unwrap();
    }
}

#[test]
fn training_is_deterministic_and_writes_a_loss_log() {
    let dir = tempdir().unwrap();
    write_pairs(dir.path(), (2, 1), 0..2, 64);
    let cfg = dir.path().join("run.ini");
    std::fs::write(
        &cfg,
        "preset = toy\nseed = 5\n[train]\nsteps = 2\nbatch_size = 1\ncrop = 64\n[data]\ninput_dir = a\nreference_dir = b\n",
    )
    .unwrap();
    let mut bytes = Vec::new();
    for k in 0..2 {
        let out_dir = dir.path().join(format!("run{k}"));
        let out = run(&["--config", p(&cfg), "--out", p(&out_dir), "train"]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let log = std::fs::read_to_string(out_dir.join("loss_log.csv")).unwrap();
        assert_eq!(log.lines().count(), 3);
        bytes.push(std::fs::read(out_dir.join("final.trkt")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn mining_recovers_shifted_pairs() {
    let dir = tempdir().unwrap();
    write_pairs(dir.path(), (5, -3), 0..2, 384);
    let out_dir = dir.path().join("mined");
    let out = run(&["mine", p(&dir.path().join("a")), p(&dir.path().join("b")), p(&out_dir), "--crop", "96"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let records = read_manifest(&out_dir.join("manifest.jsonl")).unwrap();
    assert_eq!(records.len(), 10);
    for r in &records {
        let (dx, dy) = (r.cx_ref as i32 - r.cx_in as i32, r.cy_ref as i32 - r.cy_in as i32);
        assert!((dx + 5).abs() <= 2 && (dy - 3).abs() <= 2, "{r:?}");
        assert_eq!(load_rgb(&out_dir.join(&r.input)).unwrap().dimensions(), (96, 96));
    }
}

#[test]
fn featureless_images_mine_nothing_but_succeed() {
    let dir = tempdir().unwrap();
    for sub in ["a", "b"] {
        std::fs::create_dir_all(dir.path().join(sub)).unwrap();
        save_rgb(&image::RgbImage::from_pixel(128, 128, image::Rgb([90, 90, 90])), &dir.path().join(sub).join("x.png"))
            .unwrap();
    }
    let out_dir = dir.path().join("mined");
    let out = run(&["mine", p(&dir.path().join("a")), p(&dir.path().join("b")), p(&out_dir), "--crop", "32"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no pairs accepted"));
    assert!(read_manifest(&out_dir.join("manifest.jsonl")).unwrap().is_empty());
}
