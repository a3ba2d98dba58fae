use std::fs;
use std::path::Path;
use std::process::Command;

use sfanet::data::netpbm::{read_pgm, read_ppm, write_ppm};
use sfanet::data::RgbImage;
use sfanet_cli::commands::{Manifest, MANIFEST};
use sfanet_cli::weights::WeightsFile;

struct Run {
    code: i32,
    out: String,
    err: String,
}

fn sfanet(dir: &Path, args: &[&str]) -> Run {
    let mut argv = vec![
        "sfanet".to_string(),
        format!("--paths.dataset_dir={}", dir.join("data").display()),
        format!("--paths.checkpoint_dir={}", dir.join("runs").display()),
        "--data.train_count=12".into(),
        "--data.val_count=4".into(),
        "--model.width=0.125".into(),
        "--train.batch_size=2".into(),
    ];
    argv.extend(args.iter().map(|s| s.to_string()));
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = sfanet_cli::run(argv, &mut out, &mut err);
    Run {
        code,
        out: String::from_utf8(out).unwrap(),
        err: String::from_utf8(err).unwrap(),
    }
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let r = sfanet(dir, args);
    assert_eq!(r.code, 0, "{args:?}: {}", r.err);
    r.out
}

fn iter_lines(log: &str) -> Vec<&str> {
    log.lines().filter(|l| l.starts_with("iter=")).collect()
}

#[test]
fn gen_data_is_deterministic_and_guarded() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(a.path(), &["gen-data", "--seed", "4"]);
    ok(b.path(), &["gen-data", "--seed", "4"]);
    let m: Manifest = serde_json::from_str(&fs::read_to_string(a.path().join("data").join(MANIFEST)).unwrap()).unwrap();
    assert_eq!((m.count, m.train, m.val, m.seed), (16, [0, 12], [12, 16], 4));
    assert_eq!(m.files.len(), 16);
    for f in &m.files {
        for rel in [&f.image, &f.mask] {
            let x = fs::read(a.path().join("data").join(rel)).unwrap();
            assert_eq!(x, fs::read(b.path().join("data").join(rel)).unwrap(), "{rel}");
        }
    }
    let img = read_ppm(a.path().join("data").join(&m.files[0].image)).unwrap();
    assert_eq!((img.width, img.height), (64, 64));

    let again = sfanet(a.path(), &["gen-data"]);
    assert_eq!(again.code, 1);
    assert!(again.err.contains("--force"), "{}", again.err);
    ok(a.path(), &["gen-data", "--force", "--seed", "5"]);
    let m5: Manifest = serde_json::from_str(&fs::read_to_string(a.path().join("data").join(MANIFEST)).unwrap()).unwrap();
    assert_eq!(m5.seed, 5);
    assert_ne!(m5.mean, m.mean);
}

#[test]
fn train_resume_eval_infer() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data"]);
    let out = ok(d, &["train", "--train.total_iters=6", "--train.val_every=3"]);
    assert!(out.contains("held-out mIoU"), "{out}");

    let runs = d.join("runs");
    let log = fs::read_to_string(runs.join("metrics.log")).unwrap();
    assert!(log.lines().next().unwrap().contains("lambda=0,0,1,1"), "{log}");
    let lines = iter_lines(&log);
    assert_eq!(lines.len(), 6);
    assert!(lines[0].starts_with("iter=0 lr=0.01 "));
    assert_eq!(log.lines().filter(|l| l.starts_with("val ")).count(), 2);
    // Every iteration is a checkpoint at this length.
    for i in 1..=6 {
        assert!(runs.join(format!("ckpt-{i:06}.sfaw")).exists(), "{i}");
    }
    assert_eq!(
        fs::read(runs.join("final.sfaw")).unwrap(),
        fs::read(runs.join("ckpt-000006.sfaw")).unwrap()
    );

    // A second run refuses to clobber the log.
    let again = sfanet(d, &["train", "--train.total_iters=6"]);
    assert_eq!(again.code, 1);

    // Resuming from iteration 3 reproduces the tail of the straight run.
    let straight_final = fs::read(runs.join("final.sfaw")).unwrap();
    let ckpt = runs.join("ckpt-000003.sfaw");
    ok(d, &["train", "--train.total_iters=6", "--train.val_every=3", "--resume", ckpt.to_str().unwrap()]);
    assert_eq!(fs::read(runs.join("final.sfaw")).unwrap(), straight_final);
    let resumed = fs::read_to_string(runs.join("metrics.log")).unwrap();
    let resumed_lines = iter_lines(&resumed);
    assert_eq!(resumed_lines.len(), 9);
    assert_eq!(&resumed_lines[6..], &lines[3..]);

    let weights = runs.join("final.sfaw");
    let w = weights.to_str().unwrap();
    let report = ok(d, &["eval", "--weights", w]);
    assert_eq!(report.lines().filter(|l| l.trim_start().starts_with(char::is_numeric)).count(), 4);
    assert!(report.contains("mIoU"), "{report}");
    ok(d, &["eval", "--weights", w, "--split", "train"]);

    let img = d.join("data/images/00013.ppm");
    let mask = d.join("pred.pgm");
    ok(d, &["infer", "--weights", w, "--image", img.to_str().unwrap(), "--out", mask.to_str().unwrap()]);
    let m = read_pgm(&mask).unwrap();
    assert_eq!((m.width, m.height), (64, 64));
    assert!(m.data.iter().all(|&c| c < 4));

    let odd = d.join("odd.ppm");
    write_ppm(&odd, &RgbImage::new(40, 32, vec![0; 40 * 32 * 3]).unwrap()).unwrap();
    let r = sfanet(d, &["infer", "--weights", w, "--image", odd.to_str().unwrap(), "--out", mask.to_str().unwrap()]);
    assert_eq!(r.code, 1);
    assert!(r.err.contains("pad"), "{}", r.err);

    // Weights restore bit-exactly into a model of the configured shape.
    let file = WeightsFile::load(&weights).unwrap();
    assert_eq!(WeightsFile::from_bytes(&file.to_bytes()).unwrap(), file);

    // A class-count mismatch is a usage error.
    let r = sfanet(d, &["eval", "--weights", w, "--model.num_classes=5", "--data.scene.num_classes=5"]);
    assert_eq!(r.code, 1);
    assert!(r.err.contains("classes"), "{}", r.err);
}

#[test]
fn corrupted_weights_fail_verification() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data"]);
    ok(d, &["train", "--train.total_iters=1"]);
    let mut bytes = fs::read(d.join("runs/final.sfaw")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    let bad = d.join("bad.sfaw");
    fs::write(&bad, bytes).unwrap();
    let r = sfanet(d, &["eval", "--weights", bad.to_str().unwrap()]);
    assert_eq!(r.code, 2, "{}", r.err);
    assert!(r.err.contains("CRC"), "{}", r.err);
}

#[test]
fn bench_refuses_unfolded_models() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ok(d, &["bench", "--bench.iters=3", "--bench.warmup=1"]);
    assert!(out.contains("bn_folded=true") && out.contains("fps="), "{out}");
    let r = sfanet(d, &["bench", "--bench.iters=3", "--no-fold"]);
    assert_eq!(r.code, 1);
    assert!(r.err.contains("folded"), "{}", r.err);
}

#[test]
fn usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(sfanet(d, &["frobnicate"]).code, 1);
    assert_eq!(sfanet(d, &["train", "--model.widht=1"]).code, 1);
    assert_eq!(sfanet(d, &["eval"]).code, 1);
    assert_eq!(sfanet(d, &["train"]).code, 1, "no dataset yet");
    assert_eq!(sfanet(d, &["--help"]).code, 0);

    let cfg = d.join("run.toml");
    fs::write(&cfg, "[train]\nbase_lr = 0.02\n").unwrap();
    let printed = ok(d, &["config", "--config", cfg.to_str().unwrap(), "--seed", "9"]);
    assert!(printed.contains("base_lr = 0.02"), "{printed}");
    assert_eq!(printed.matches("seed = 9").count(), 2, "{printed}");
    fs::write(&cfg, "[train]\nbase_rl = 0.02\n").unwrap();
    assert_eq!(sfanet(d, &["config", "--config", cfg.to_str().unwrap()]).code, 1);
}

#[test]
fn gradcheck_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_sfanet");
    let good = Command::new(bin).arg("gradcheck").output().unwrap();
    let text = String::from_utf8_lossy(&good.stdout);
    assert_eq!(good.status.code(), Some(0), "{text}");
    assert!(text.contains("full_model_loss") && text.contains("all checks passed"), "{text}");

    let bad = Command::new(bin).args(["gradcheck", "--inject-conv-fault"]).output().unwrap();
    let text = String::from_utf8_lossy(&bad.stdout);
    assert_eq!(bad.status.code(), Some(2), "{text}");
    let failing: Vec<&str> = text.lines().filter(|l| l.ends_with("FAIL")).collect();
    assert!(failing.iter().any(|l| l.starts_with("conv2d ")), "{text}");
}
