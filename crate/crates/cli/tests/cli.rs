use std::path::Path;
use std::process::{Command, Output};

use dcanet_core::data::{load_image, quantize, save_image, synthetic_image};
use dcanet_core::model::{Dcanet, ModelConfig};
use dcanet_core::train::make_checkpoint;

fn dcanet(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcanet"))
        .args(args)
        .current_dir(dir)
        .env_remove("DCANET_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config() -> ModelConfig {
    ModelConfig {
        cam_reduction: 4,
        ..ModelConfig::gray().with_width(8)
    }
}

fn write_checkpoint(dir: &Path, name: &str, model: &Dcanet<f32>) -> String {
    let path = dir.join(name);
    make_checkpoint(model, None, None).unwrap().save(&path).unwrap();
    path.to_string_lossy().into_owned()
}

fn zero_weight_model() -> Dcanet<f32> {
    let mut m = Dcanet::<f32>::new(small_config(), 1).unwrap();
    let ids: Vec<_> = m
        .params()
        .iter()
        .filter(|(_, e)| e.name.ends_with(".weight") || e.name.ends_with(".bias"))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        m.params_mut().get_mut(id).data_mut().fill(0.0);
    }
    m
}

#[test]
fn help_exits_zero_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    for sub in [None, Some("train"), Some("denoise"), Some("eval"), Some("estimate"), Some("info"), Some("probe")] {
        let mut args: Vec<&str> = sub.into_iter().collect();
        args.push("--help");
        let o = dcanet(&args, dir.path());
        assert_eq!(o.status.code(), Some(0), "{args:?}");
        assert!(stdout(&o).contains("Usage"));
    }
}

#[test]
fn train_without_manifest_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = dcanet(&["train"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage: dcanet train"));
    let o = dcanet(&["train", "--manifest", "nope.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = dcanet(&["train", "--batch", "many"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn info_reports_counts_and_receptive_fields() {
    let dir = tempfile::tempdir().unwrap();
    let o = dcanet(&["info"], dir.path());
    assert!(o.status.success());
    let out = stdout(&o);
    let params: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("parameters: "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((params / 1_382_000.0 - 1.0).abs() <= 0.1, "{params}");
    assert!(out.lines().any(|l| l == "receptive_field.lower: 131"));
    assert!(out.contains("lower.15.conv"));
    assert!(out.contains("upper.stage2.3.conv"));

    let o = dcanet(&["info", "--variant", "lower_only"], dir.path());
    let out = stdout(&o);
    assert!(!out.contains("upper."));
    assert!(out.contains("variant: lower_only"));
}

#[test]
fn zero_weights_reproduce_the_quantized_input() {
    let dir = tempfile::tempdir().unwrap();
    let ck = write_checkpoint(dir.path(), "zero.dcan", &zero_weight_model());
    let img = synthetic_image(1, 30, 34, 4).unwrap();
    save_image(&img, dir.path().join("in.png")).unwrap();
    let o = dcanet(&["denoise", "--checkpoint", &ck, "--input", "in.png", "--output", "out.png"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let a = load_image(dir.path().join("in.png")).unwrap();
    let b = load_image(dir.path().join("out.png")).unwrap();
    assert_eq!(a, b);
    let q: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let r: Vec<u8> = b.data().iter().map(|&v| quantize(v)).collect();
    assert_eq!(q, r);

    let o = dcanet(
        &["denoise", "--checkpoint", &ck, "--input", "in.png", "--output", "o2.png", "--reference", "in.png"],
        dir.path(),
    );
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 2);
    assert!(out.starts_with("psnr_db inf"));
    assert!(out.contains("ssim 1.0"));
}

#[test]
fn gray_checkpoint_refuses_colour_input() {
    let dir = tempfile::tempdir().unwrap();
    let ck = write_checkpoint(dir.path(), "g.dcan", &Dcanet::new(small_config(), 0).unwrap());
    save_image(&synthetic_image(3, 20, 20, 1).unwrap(), dir.path().join("rgb.png")).unwrap();
    let o = dcanet(&["denoise", "--checkpoint", &ck, "--input", "rgb.png", "--output", "x.png"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("channel"));
    assert!(!dir.path().join("x.png").exists());
}

#[test]
fn corrupted_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let ck = write_checkpoint(dir.path(), "g.dcan", &Dcanet::new(small_config(), 0).unwrap());
    let mut bytes = std::fs::read(&ck).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 0x40;
    std::fs::write(&ck, bytes).unwrap();
    save_image(&synthetic_image(1, 20, 20, 1).unwrap(), dir.path().join("g.png")).unwrap();
    let o = dcanet(&["denoise", "--checkpoint", &ck, "--input", "g.png", "--output", "x.png"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn estimate_writes_a_heat_image() {
    let dir = tempfile::tempdir().unwrap();
    let ck = write_checkpoint(dir.path(), "g.dcan", &Dcanet::new(small_config(), 0).unwrap());
    save_image(&synthetic_image(1, 24, 20, 1).unwrap(), dir.path().join("g.png")).unwrap();
    let o = dcanet(&["estimate", "--checkpoint", &ck, "--input", "g.png", "--output", "heat.png"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let heat = load_image(dir.path().join("heat.png")).unwrap();
    assert_eq!((heat.channels(), heat.height(), heat.width()), (3, 24, 20));
    assert!(stdout(&o).contains("mean_level"));
}

#[test]
fn eval_skips_broken_entries_and_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let ck = write_checkpoint(dir.path(), "g.dcan", &Dcanet::new(small_config(), 0).unwrap());
    for i in 0..2 {
        save_image(&synthetic_image(1, 24, 24, i).unwrap(), dir.path().join(format!("c{i}.png"))).unwrap();
    }
    std::fs::write(
        dir.path().join("m.json"),
        r#"[{"clean": "c0.png", "split": "test"}, {"clean": "c1.png", "split": "test"},
            {"clean": "gone.png", "split": "test"}]"#,
    )
    .unwrap();
    let args = ["eval", "--checkpoint", &ck, "--manifest", "m.json", "--sigmas", "10,50", "--csv", "r.csv"];
    let o = dcanet(&args, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("1 entry skipped"));
    let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "image,sigma,psnr_db,ssim,ms_per_image");
    assert_eq!(lines.len(), 5);
    // identical seeds give identical scores (timings aside)
    let o2 = dcanet(&args, dir.path());
    let strip = |s: &str| s.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect::<Vec<_>>();
    assert_eq!(stdout(&o), stdout(&o2));
    assert_eq!(strip(&csv), strip(&std::fs::read_to_string(dir.path().join("r.csv")).unwrap()));
}

#[test]
fn training_runs_are_reproducible_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("cfg.json"),
        r#"{"width": 8, "cam_reduction": 4, "patch": 16, "batch": 2, "iters": 4,
            "log_every": 1, "checkpoint_every": 2, "sigma_max": 50.0, "synthetic": 3}"#,
    )
    .unwrap();
    let run = |out: &str, extra: &[&str]| {
        let mut args = vec!["--threads", "1", "train", "--config", "cfg.json", "--checkpoint-dir", out];
        args.extend_from_slice(extra);
        let o = dcanet(&args, dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read_to_string(dir.path().join(out).join("train.log")).unwrap()
    };
    let a = run("a", &["--seed", "11"]);
    let b = run("b", &["--seed", "11"]);
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 4);
    assert_ne!(a, run("c", &["--seed", "12"]));
    assert_eq!(
        std::fs::read(dir.path().join("a/final.dcan")).unwrap(),
        std::fs::read(dir.path().join("b/final.dcan")).unwrap()
    );
    let cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a/config.json")).unwrap()).unwrap();
    assert_eq!(cfg["seed"], 11);
    assert_eq!(cfg["batch"], 2);

    // seed from the environment when no flag is given
    let o = Command::new(env!("CARGO_BIN_EXE_dcanet"))
        .args(["train", "--config", "cfg.json", "--checkpoint-dir", "env"])
        .current_dir(dir.path())
        .env("DCANET_SEED", "11")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(dir.path().join("env/train.log")).unwrap(), a);

    // resuming from the half-way checkpoint finishes with the same log tail
    std::fs::create_dir_all(dir.path().join("r")).unwrap();
    std::fs::copy(dir.path().join("a/iter_00000002.dcan"), dir.path().join("r/start.dcan")).unwrap();
    let tail = run("r", &["--seed", "11", "--resume", "r/start.dcan"]);
    let expect: Vec<&str> = a.lines().skip(2).collect();
    assert_eq!(tail.lines().collect::<Vec<_>>(), expect);
}

#[test]
fn probes_pass() {
    let dir = tempfile::tempdir().unwrap();
    let o = dcanet(&["probe", "gridding"], dir.path());
    assert!(o.status.success());
    assert!(stdout(&o).contains(r#""density":1.0"#));
    let o = dcanet(&["probe", "determinism", "--iters", "4"], dir.path());
    assert!(o.status.success(), "{}", stdout(&o));
    let o = dcanet(&["probe", "gradcheck", "--seed", "5"], dir.path());
    assert!(o.status.success(), "{}", stdout(&o));
    let last: serde_json::Value = serde_json::from_str(stdout(&o).lines().last().unwrap()).unwrap();
    assert_eq!(last["pass"], true);
    assert!(last["cases"].as_u64().unwrap() >= 30);
}
