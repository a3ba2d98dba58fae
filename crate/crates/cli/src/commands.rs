use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use serde::{Deserialize, Serialize};
use sfanet::data::metrics::argmax_channels;
use sfanet::data::netpbm::{read_pgm, read_ppm, write_pgm, write_ppm};
use sfanet::data::{bench_fps, channel_mean, generate_scene, images_to_tensor, BenchReport, LabelMap, RgbImage};
use sfanet::gradcheck::{fault, standard_suite, SuiteKind};
use sfanet::network::SfanetModel;
use sfanet::training::{evaluate, train as train_loop, Event, TrainState};
use sfanet::Mode;

use crate::config::RunConfig;
use crate::weights::WeightsFile;

pub const MANIFEST: &str = "manifest.json";
pub const METRICS_LOG: &str = "metrics.log";
pub const FINAL_WEIGHTS: &str = "final.sfaw";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub image: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    /// Half-open index ranges.
    pub train: [usize; 2],
    pub val: [usize; 2],
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    /// Channel mean of the training split.
    pub mean: [f32; 3],
    pub files: Vec<ManifestEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Val,
}

/// Writes `count` scene pairs and a manifest to the dataset directory.
pub fn gen_data(cfg: &RunConfig, force: bool) -> anyhow::Result<Manifest> {
    cfg.data.scene.validate()?;
    let dir = &cfg.paths.dataset_dir;
    if dir.join(MANIFEST).exists() || dir.join("images").exists() {
        ensure!(force, "{} already holds a dataset (use --force to overwrite)", dir.display());
        for sub in ["images", "masks"] {
            if dir.join(sub).exists() {
                fs::remove_dir_all(dir.join(sub))?;
            }
        }
    }
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let (n_train, n_val) = (cfg.data.train_count, cfg.data.val_count);
    let count = n_train + n_val;
    let mut files = Vec::with_capacity(count);
    let mut train_images = Vec::with_capacity(n_train);
    for index in 0..count {
        let (img, labels) = generate_scene(&cfg.data.scene, index as u64)?;
        let entry = ManifestEntry {
            index,
            image: format!("images/{index:05}.ppm"),
            mask: format!("masks/{index:05}.pgm"),
        };
        write_ppm(dir.join(&entry.image), &img)?;
        write_pgm(dir.join(&entry.mask), &labels)?;
        if index < n_train {
            train_images.push(img);
        }
        files.push(entry);
    }
    let mean = channel_mean(&train_images)?;
    let manifest = Manifest {
        count,
        train: [0, n_train],
        val: [n_train, count],
        seed: cfg.data.scene.seed,
        width: cfg.data.scene.width,
        height: cfg.data.scene.height,
        num_classes: cfg.data.scene.num_classes,
        mean,
        files,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> anyhow::Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {} (run gen-data first)", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn load_split(dir: &Path, manifest: &Manifest, split: Split) -> anyhow::Result<Vec<(RgbImage, LabelMap)>> {
    let [lo, hi] = match split {
        Split::Train => manifest.train,
        Split::Val => manifest.val,
    };
    manifest
        .files
        .iter()
        .filter(|f| (lo..hi).contains(&f.index))
        .map(|f| Ok((read_ppm(dir.join(&f.image))?, read_pgm(dir.join(&f.mask))?)))
        .collect()
}

fn check_classes(cfg: &RunConfig, manifest: &Manifest) -> anyhow::Result<()> {
    ensure!(
        manifest.num_classes == cfg.model.num_classes,
        "dataset has {} classes but model.num_classes = {}",
        manifest.num_classes,
        cfg.model.num_classes
    );
    Ok(())
}

pub fn checkpoint_cadence(total_iters: usize) -> usize {
    (total_iters / 20).max(1)
}

pub fn checkpoint_name(iter: usize) -> String {
    format!("ckpt-{iter:06}.sfaw")
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub iters: usize,
    pub final_miou: Option<f64>,
    pub weights: PathBuf,
    pub log: PathBuf,
}

fn to_core(e: anyhow::Error) -> sfanet::Error {
    sfanet::Error::Io(std::io::Error::other(format!("{e:#}")))
}

/// Trains on the dataset directory, writing checkpoints and a metrics log
/// to the checkpoint directory.
pub fn train(cfg: &RunConfig, resume: Option<&Path>, force: bool, out: &mut dyn Write) -> anyhow::Result<TrainSummary> {
    cfg.validate()?;
    let data_dir = &cfg.paths.dataset_dir;
    let manifest = load_manifest(data_dir)?;
    check_classes(cfg, &manifest)?;
    let train_set = load_split(data_dir, &manifest, Split::Train)?;
    let val_set = load_split(data_dir, &manifest, Split::Val)?;

    let mut model = SfanetModel::<f32>::new(cfg.model.network(Mode::Train), cfg.train.seed)?;
    let mut state = TrainState::new(&cfg.train, cfg.data.mean.unwrap_or(manifest.mean));
    if let Some(path) = resume {
        let w = WeightsFile::load(path)?;
        w.apply(&mut model)?;
        ensure!(w.restore_state(&mut state)?, "{} holds no training state", path.display());
        ensure!(
            state.iter <= cfg.train.total_iters,
            "checkpoint is at iteration {} beyond train.total_iters = {}",
            state.iter,
            cfg.train.total_iters
        );
    }

    let ckpt_dir = &cfg.paths.checkpoint_dir;
    fs::create_dir_all(ckpt_dir)?;
    let log_path = ckpt_dir.join(METRICS_LOG);
    if resume.is_none() && log_path.exists() && !force {
        bail!("{} exists (use --force to overwrite or --resume to continue)", log_path.display());
    }
    let mut log = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)?;
    let m = &cfg.model;
    writeln!(
        log,
        "# model num_classes={} width={} input={}x{} lambda={}",
        m.num_classes,
        m.width,
        m.input_h,
        m.input_w,
        m.lambda.map(|l| l.to_string()).join(",")
    )?;
    writeln!(
        log,
        "# train base_lr={} total_iters={} batch_size={} power={} ohem_threshold={} seed={} start_iter={}",
        cfg.train.base_lr,
        cfg.train.total_iters,
        cfg.train.batch_size,
        cfg.train.power,
        cfg.train.ohem.threshold,
        cfg.train.seed,
        state.iter
    )?;
    writeln!(
        out,
        "training {} iterations from {} (lambda = [{}])",
        cfg.train.total_iters,
        state.iter,
        m.lambda.map(|l| l.to_string()).join(", ")
    )?;

    let cadence = checkpoint_cadence(cfg.train.total_iters);
    let total = cfg.train.total_iters;
    let final_path = ckpt_dir.join(FINAL_WEIGHTS);
    let mut last_miou = None;
    let mut observer = |event: Event<'_>, model: &SfanetModel<f32>, state: &TrainState| -> sfanet::Result<()> {
        match event {
            Event::Iter(r) => {
                let l = &r.loss;
                writeln!(
                    log,
                    "iter={} lr={} total={} principal={} aux1={} aux2={} aux3={} aux4={}",
                    r.iter, r.lr, l.total, l.principal, l.aux[0], l.aux[1], l.aux[2], l.aux[3]
                )?;
                if state.iter.is_multiple_of(cadence) || state.iter == total {
                    let w = WeightsFile::from_model(model, Some(state), state.mean);
                    w.save(&ckpt_dir.join(checkpoint_name(state.iter))).map_err(to_core)?;
                    if state.iter == total {
                        w.save(&final_path).map_err(to_core)?;
                    }
                }
            }
            Event::Validation { iter, matrix } => {
                let miou = matrix.miou()?;
                last_miou = Some(miou);
                writeln!(log, "val iter={iter} miou={miou}")?;
            }
        }
        Ok(())
    };
    train_loop(&mut model, &train_set, Some(&val_set), &cfg.train, &mut state, &mut observer)?;
    if let Some(m) = last_miou {
        writeln!(out, "held-out mIoU after {} iterations: {m:.4}", state.iter)?;
    }
    Ok(TrainSummary {
        iters: state.iter,
        final_miou: last_miou,
        weights: final_path,
        log: log_path,
    })
}

/// A model in infer mode carrying the given weights, batch norms folded.
pub fn load_folded(cfg: &RunConfig, weights: &Path) -> anyhow::Result<(SfanetModel<f32>, [f32; 3])> {
    let w = WeightsFile::load(weights)?;
    let mut model = SfanetModel::<f32>::new(cfg.model.network(Mode::Infer), 0)?;
    w.apply(&mut model)?;
    model.fold_batch_norm()?;
    Ok((model, w.mean()?))
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub pixels: u64,
}

pub fn eval(cfg: &RunConfig, weights: &Path, split: Split, out: &mut dyn Write) -> anyhow::Result<EvalReport> {
    let manifest = load_manifest(&cfg.paths.dataset_dir)?;
    check_classes(cfg, &manifest)?;
    let (mut model, mean) = load_folded(cfg, weights)?;
    let data = load_split(&cfg.paths.dataset_dir, &manifest, split)?;
    let cm = evaluate(&mut model, &data, mean, cfg.train.batch_size)?;
    let report = EvalReport {
        per_class: cm.per_class_iou(),
        miou: cm.miou()?,
        pixels: cm.total(),
    };
    writeln!(out, "{:>6}  {:>8}", "class", "IoU")?;
    for (c, iou) in report.per_class.iter().enumerate() {
        match iou {
            Some(v) => writeln!(out, "{c:>6}  {v:>8.4}")?,
            None => writeln!(out, "{c:>6}  {:>8}", "absent")?,
        }
    }
    writeln!(out, "mIoU {:.4} over {} pixels ({:?} split)", report.miou, report.pixels, split)?;
    Ok(report)
}

pub fn infer(cfg: &RunConfig, weights: &Path, image: &Path, output: &Path) -> anyhow::Result<LabelMap> {
    let (mut model, mean) = load_folded(cfg, weights)?;
    let img = read_ppm(image)?;
    let logits = model.predict(&images_to_tensor(&[&img], mean)?)?;
    let mask = LabelMap::new(img.width, img.height, argmax_channels(&logits)?)?;
    write_pgm(output, &mask)?;
    Ok(mask)
}

/// Times the folded model. Without weights a freshly initialized model is
/// used; `fold = false` exists to show that unfolded models are refused.
pub fn bench(cfg: &RunConfig, weights: Option<&Path>, fold: bool, out: &mut dyn Write) -> anyhow::Result<BenchReport> {
    let mut model = match weights {
        Some(w) => {
            let file = WeightsFile::load(w)?;
            let mut m = SfanetModel::<f32>::new(cfg.model.network(Mode::Infer), 0)?;
            file.apply(&mut m)?;
            m
        }
        None => SfanetModel::<f32>::new(cfg.model.network(Mode::Infer), cfg.train.seed)?,
    };
    if fold {
        model.fold_batch_norm()?;
    }
    let b = &cfg.bench;
    let report = bench_fps(&mut model, b.height, b.width, b.warmup, b.iters)?;
    writeln!(
        out,
        "{}x{} warmup={} iters={} mean={:.3} ms median={:.3} ms fps={:.1} bn_folded={}",
        report.height,
        report.width,
        report.warmup,
        report.iters,
        report.mean * 1e3,
        report.median * 1e3,
        report.fps,
        report.bn_folded
    )?;
    Ok(report)
}

/// Runs the gradient suite and prints one row per entry. Returns whether
/// every entry passed.
pub fn gradcheck(inject_conv_fault: bool, out: &mut dyn Write) -> anyhow::Result<bool> {
    let _fault = inject_conv_fault.then(fault::arm_conv_backward);
    writeln!(out, "{:<20} {:<8} {:>12} {:>8} {:>8}  result", "check", "kind", "max rel err", "tol", "probes")?;
    let mut all = true;
    for entry in standard_suite() {
        let kind = match entry.kind {
            SuiteKind::Op(_) => "op",
            SuiteKind::Block => "block",
            SuiteKind::Model => "model",
        };
        match entry.run() {
            Ok(r) => {
                all &= r.passed();
                writeln!(
                    out,
                    "{:<20} {:<8} {:>12.3e} {:>8.0e} {:>8}  {}",
                    entry.name,
                    kind,
                    r.max_rel_err,
                    r.tol,
                    r.checked,
                    if r.passed() { "PASS" } else { "FAIL" }
                )?;
            }
            Err(e) => {
                all = false;
                writeln!(out, "{:<20} {:<8} error: {e}  FAIL", entry.name, kind)?;
            }
        }
    }
    writeln!(out, "{}", if all { "all checks passed" } else { "gradient check FAILED" })?;
    Ok(all)
}
