use std::path::Path;
use std::process::{Command, Output};

use patchlab::data::{write_descriptors, DescriptorSet};
use patchlab::seed;
use rand::Rng;
use rand_distr::StandardNormal;

fn patchlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchlab")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Tiny quarter-scale model plus a container of held-out patches.
fn tiny_run(dir: &Path) {
    let run = dir.join("run");
    let o = patchlab(&[
        "train", "--scale", "1/4", "--identities", "40", "--batch-identities", "8", "--epochs", "1", "--out", s(&run),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = patchlab(&["generate", "--out", s(&dir.join("ubc")), "--identities", "30", "--seed", "7"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn verify_passes_and_names_an_injected_fault() {
    let o = patchlab(&["verify"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let o = patchlab(&["verify", "--inject-fault", "norm-inner-sign"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("NormInner"), "{}", stderr(&o));
    assert_eq!(code(&patchlab(&["verify", "--inject-fault", "bogus"])), 2);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nepoch = 3\n").unwrap();
    let o = patchlab(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("epoch"), "{}", stderr(&o));
    assert_eq!(code(&patchlab(&["train", "--scale", "1/3", "--print-config"])), 2);
    assert_eq!(code(&patchlab(&["train", "--learning-rate", "-1", "--print-config"])), 2);
}

#[test]
fn print_config_reflects_overrides() {
    let o = patchlab(&["train", "--epochs", "3", "--loss", "loss-b", "--print-config"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("epochs = 3") && text.contains("variant = \"loss-b\""), "{text}");
}

#[test]
fn missing_inputs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let none = dir.path().join("absent.ckpt");
    assert_eq!(code(&patchlab(&["analyze", "histogram", "--checkpoint", s(&none)])), 3);
    let o = patchlab(&[
        "extract", "--checkpoint", s(&none), "--patches", s(dir.path()), "--out", s(&dir.path().join("d.bin")),
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn trained_model_extracts_evaluates_and_checks_its_census() {
    let dir = tempfile::tempdir().unwrap();
    tiny_run(dir.path());
    let ckpt = dir.path().join("run/model.ckpt");
    let ubc = dir.path().join("ubc");
    let desc = dir.path().join("d.bin");

    let o = patchlab(&["extract", "--checkpoint", s(&ckpt), "--patches", s(&ubc), "--out", s(&desc), "--scale", "1/2"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = patchlab(&["extract", "--checkpoint", s(&ckpt), "--patches", s(&ubc), "--out", s(&desc), "--norm", "bn"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let o = patchlab(&["extract", "--checkpoint", s(&ckpt), "--patches", s(&ubc), "--out", s(&desc), "--scale", "1/4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let from_file = patchlab(&["evaluate", "--descriptors", s(&desc)]);
    let from_net = patchlab(&["evaluate", "--checkpoint", s(&ckpt), "--patches", s(&ubc)]);
    assert_eq!(code(&from_file), 0, "{}", stderr(&from_file));
    assert_eq!(stdout(&from_file), stdout(&from_net));
    assert!(stdout(&from_file).starts_with("fpr95,map_matching,map_retrieval,positives,negatives,queries\n"));

    let o = patchlab(&["analyze", "histogram", "--checkpoint", s(&ckpt), "--identities", "40", "--batches", "3", "--batch-identities", "8"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("24 positive, 24 negative"), "{}", stdout(&o));
}

#[test]
fn evaluate_on_random_descriptors_is_at_chance() {
    let mut rng = seed::rng(21, "random");
    let (n, dim) = (400usize, 128usize);
    let mut unit = Vec::new();
    for _ in 0..n {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        unit.extend(v.iter().map(|x| (x / norm) as f32));
    }
    let set = DescriptorSet::new(dim, unit, (0..n as u32).map(|i| i / 2).collect()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.bin");
    write_descriptors(&path, &set).unwrap();
    let o = patchlab(&["evaluate", "--descriptors", s(&path), "--task", "verification"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let row = stdout(&o).lines().nth(1).unwrap().to_string();
    let fpr: f64 = row.split(',').next().unwrap().parse().unwrap();
    assert!((fpr - 0.95).abs() < 0.03, "{row}");
    assert!(row.contains("NaN"), "unrequested metrics are NaN: {row}");
}

#[test]
fn curves_csv_has_one_column_per_alpha() {
    let o = patchlab(&["analyze", "curves", "--alphas", "1,2", "--resolution", "8"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "theta,g_s,g_d,g_H_1,g_H_2");
    assert_eq!(lines.len(), 9);
    assert_eq!(code(&patchlab(&["analyze", "curves", "--alphas", "1,x"])), 2);
}

#[test]
fn decompose_reports_orthogonal_normalized_gradients() {
    let o = patchlab(&["analyze", "decompose", "--pairs", "200"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    let summary = text.lines().last().unwrap();
    let worst: f64 = summary.rsplit("ratio ").next().unwrap().split(' ').next().unwrap().parse().unwrap();
    assert!(worst < 1e-10, "{summary}");
    assert_eq!(text.lines().filter(|l| l.starts_with("Raw") || l.starts_with("Norm") || l.starts_with("Hybrid")).count(), 5);
}

#[test]
fn default_config_runs_a_validated_epoch() {
    // the built-in desk configuration, cut after its first epoch
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("desk.toml");
    std::fs::write(
        &cfg,
        format!("[train]\nstop_after_step = 27\n\n[output]\ndir = {:?}\n", s(&dir.path().join("desk"))),
    )
    .unwrap();
    let o = patchlab(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("steps: 27"), "{}", stdout(&o));
    let metrics = std::fs::read_to_string(dir.path().join("desk/metrics.csv")).unwrap();
    let last = metrics.lines().last().unwrap();
    let val: f64 = last.rsplit(',').next().unwrap().parse().unwrap();
    assert!(last.starts_with("27,1,") && (0.0..=1.0).contains(&val), "{last}");
    assert!(dir.path().join("desk/model.ckpt").is_file());
}
