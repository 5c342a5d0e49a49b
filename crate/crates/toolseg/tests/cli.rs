//! End-to-end tests of the command-line interface, driving the compiled
//! binary through synth, train, eval and infer.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use toolseg::grid::ImageGrid;
use toolseg::metrics::save_identity_checkpoint;
use toolseg::networks::{GeneratorSpec, NetworkHandle, Role};
use toolseg::synthdata::write_image_png;

fn toolseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_toolseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = toolseg(args);
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn synth_args<'a>(out: &'a str, n: &'a str, seed: &'a str) -> Vec<&'a str> {
    vec![
        "synth", "--out", out, "--n", n, "--seed", seed, "--size", "64",
    ]
}

fn mean_iou_from(stdout: &str) -> f64 {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix("mean IoU(gt, noisy) = "))
        .expect("summary line present")
        .parse()
        .unwrap()
}

#[test]
fn synth_writes_triples_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let d1 = tmp.path().join("d1");
    let d2 = tmp.path().join("d2");
    let stdout = run_ok(&synth_args(d1.to_str().unwrap(), "8", "7"));
    assert!(stdout.contains("wrote 8 samples"));
    assert!(mean_iou_from(&stdout) > 0.0);
    for sub in ["images", "masks_gt", "masks_noisy"] {
        assert_eq!(fs::read_dir(d1.join(sub)).unwrap().count(), 8);
    }
    assert!(d1.join("run_config.toml").exists());

    run_ok(&synth_args(d2.to_str().unwrap(), "8", "7"));
    assert_eq!(
        fs::read(d1.join("manifest.json")).unwrap(),
        fs::read(d2.join("manifest.json")).unwrap()
    );
    assert_eq!(
        fs::read(d1.join("images/000003.png")).unwrap(),
        fs::read(d2.join("images/000003.png")).unwrap()
    );
}

#[test]
fn synth_noise_level_moves_reported_iou() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |dir: &str, sigma: &str| {
        let mut args = synth_args(dir, "24", "3");
        args.extend(["--sigma-translate", sigma]);
        mean_iou_from(&run_ok(&args))
    };
    let iou_low = run(tmp.path().join("lo").to_str().unwrap(), "4");
    let iou_high = run(tmp.path().join("hi").to_str().unwrap(), "8");
    assert!(
        iou_high < iou_low,
        "IoU should drop with more translation noise: {iou_high} vs {iou_low}"
    );
}

fn tiny_train_args<'a>(data: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![
        "train",
        "--data",
        data,
        "--out",
        out,
        "--epochs-fixed",
        "1",
        "--epochs-decay",
        "1",
        "--gen-width",
        "4",
        "--res-blocks",
        "1",
        "--disc-width",
        "4",
        "--disc-layers",
        "2",
        "--seed",
        "5",
    ]
}

#[test]
fn train_smoke_writes_checkpoints_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    run_ok(&synth_args(data.to_str().unwrap(), "6", "1"));

    let out1 = tmp.path().join("run1");
    run_ok(&tiny_train_args(
        data.to_str().unwrap(),
        out1.to_str().unwrap(),
    ));
    assert!(out1.join("ckpt_epoch_001").exists());
    assert!(out1.join("ckpt_epoch_002").exists());
    assert!(out1.join("latest").exists());
    assert!(out1.join("run_config.toml").exists());
    let log = fs::read_to_string(out1.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,step,adv_GA,adv_GI,d_A,d_I,cyc,edge,lr\n"));

    // resume from the first-epoch checkpoint reproduces the second epoch
    let out2 = tmp.path().join("run2");
    let ckpt1 = out1.join("ckpt_epoch_001");
    let mut args = tiny_train_args(data.to_str().unwrap(), out2.to_str().unwrap());
    args.push("--resume");
    args.push(ckpt1.to_str().unwrap());
    run_ok(&args);
    let log2 = fs::read_to_string(out2.join("train_log.csv")).unwrap();
    let first_row = log2.lines().nth(1).unwrap();
    assert!(first_row.starts_with("2,0,"), "resumed log row: {first_row}");
    assert_eq!(
        fs::read(out1.join("ckpt_epoch_002")).unwrap(),
        fs::read(out2.join("ckpt_epoch_002")).unwrap()
    );
}

#[test]
fn no_edge_flag_zeroes_the_edge_column() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    run_ok(&synth_args(data.to_str().unwrap(), "4", "2"));
    let out = tmp.path().join("run");
    let mut args = tiny_train_args(data.to_str().unwrap(), out.to_str().unwrap());
    args[8] = "0"; // epochs-decay value: one epoch total
    args.push("--no-edge");
    run_ok(&args);
    let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
    for row in log.lines().skip(1) {
        let edge = row.split(',').nth(7).unwrap();
        assert_eq!(edge.parse::<f64>().unwrap(), 0.0, "row {row}");
    }
}

#[test]
fn eval_identity_oracle_scores_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    run_ok(&synth_args(data.to_str().unwrap(), "6", "9"));
    // feed the gt masks through as their own images: the identity oracle
    // must reproduce them exactly
    let images = data.join("masks_gt");
    let ckpt = tmp.path().join("oracle");
    save_identity_checkpoint(&ckpt).unwrap();
    let out = tmp.path().join("eval");
    let stdout = run_ok(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--images",
        images.to_str().unwrap(),
        "--masks",
        images.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--boundary-f1",
        "--tolerance",
        "2",
    ]);
    assert!(out.join("report.txt").exists());
    assert!(out.join("report.json").exists());
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    let pooled = &report[ckpt.to_str().unwrap()]["pooled"];
    assert_eq!(pooled["mean_jaccard"], 1.0);
    assert_eq!(pooled["overall_pixel"], 1.0);
    assert_eq!(report[ckpt.to_str().unwrap()]["mean_boundary_f1"], 1.0);
    assert!(stdout.contains("1.0000"));
}

#[test]
fn eval_compares_multiple_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    run_ok(&synth_args(data.to_str().unwrap(), "4", "9"));
    let images = data.join("masks_gt");
    let oracle = tmp.path().join("oracle");
    save_identity_checkpoint(&oracle).unwrap();
    let gen = tmp.path().join("gen");
    let spec = GeneratorSpec {
        base_width: 4,
        n_residual_blocks: 1,
        ..GeneratorSpec::new(3, 1)
    };
    NetworkHandle::build_generator(Role::GenA, spec, 0)
        .unwrap()
        .save(&gen)
        .unwrap();
    let out = tmp.path().join("eval");
    let stdout = run_ok(&[
        "eval",
        "--checkpoint",
        oracle.to_str().unwrap(),
        "--checkpoint",
        gen.to_str().unwrap(),
        "--images",
        images.to_str().unwrap(),
        "--masks",
        images.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(stdout.matches("== ").count(), 2);
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.as_object().unwrap().len(), 2);
}

fn tiny_generator_checkpoint(path: &Path) {
    let spec = GeneratorSpec {
        base_width: 4,
        n_residual_blocks: 1,
        ..GeneratorSpec::new(3, 1)
    };
    NetworkHandle::build_generator(Role::GenA, spec, 0)
        .unwrap()
        .save(path)
        .unwrap();
}

fn write_test_image(path: &Path, h: usize, w: usize) {
    let data: Vec<f32> = (0..3 * h * w)
        .map(|i| ((i % 97) as f32 / 48.0) - 1.0)
        .collect();
    write_image_png(path, &ImageGrid::from_vec(data, 3, h, w).unwrap()).unwrap();
}

#[test]
fn infer_handles_square_and_nonsquare_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("gen");
    tiny_generator_checkpoint(&ckpt);
    for (h, w) in [(128usize, 128usize), (96, 160)] {
        let input = tmp.path().join(format!("in_{h}x{w}.png"));
        write_test_image(&input, h, w);
        let output = tmp.path().join(format!("out_{h}x{w}.png"));
        let overlay = tmp.path().join(format!("ov_{h}x{w}.png"));
        run_ok(&[
            "infer",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--input",
            input.to_str().unwrap(),
            "--output",
            output.to_str().unwrap(),
            "--overlay",
            overlay.to_str().unwrap(),
        ]);
        let mask = image::open(&output).unwrap().to_luma8();
        assert_eq!((mask.height() as usize, mask.width() as usize), (h, w));
        assert!(mask.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
        let ov = image::open(&overlay).unwrap().to_rgb8();
        assert_eq!((ov.height() as usize, ov.width() as usize), (h, w));
    }
}

#[test]
fn infer_rejects_indivisible_dims() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("gen");
    tiny_generator_checkpoint(&ckpt);
    let input = tmp.path().join("in.png");
    write_test_image(&input, 66, 64);
    let output = tmp.path().join("out.png");
    let out = toolseg(&[
        "infer",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("divisible by 4"),
        "stderr should name the constraint: {stderr}"
    );
    assert!(!output.exists());
}

#[test]
fn config_file_sets_defaults_and_flags_override() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.toml");
    fs::write(
        &cfg,
        r#"
[error_model]
sigma_translate = 0.0
sigma_rotate_deg = 0.0
sigma_scale = 0.0
"#,
    )
    .unwrap();
    // config file alone: zero error, noisy == gt
    let d1 = tmp.path().join("d1");
    let mut args = synth_args(d1.to_str().unwrap(), "4", "1");
    args.extend(["--config", cfg.to_str().unwrap()]);
    assert_eq!(mean_iou_from(&run_ok(&args)), 1.0);
    // flag overrides the file
    let d2 = tmp.path().join("d2");
    let mut args = synth_args(d2.to_str().unwrap(), "4", "1");
    args.extend(["--config", cfg.to_str().unwrap(), "--sigma-translate", "6"]);
    assert!(mean_iou_from(&run_ok(&args)) < 1.0);
    let echo = fs::read_to_string(d2.join("run_config.toml")).unwrap();
    assert!(echo.contains("sigma_translate = 6"));
}
