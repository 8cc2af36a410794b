use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use fusionseg::data::{
    find_mask, generate_synthetic, kfold_split, list_images, load_image, load_pairs, ratio_split, write_dataset,
};
use fusionseg::trainer::{evaluate, predict, FitOutputs};
use fusionseg::{Checkpoint, SeededRng, SegmentationSample, Tensor, Trainer};
use image::imageops::{self, FilterType};
use image::{GrayImage, Rgb, RgbImage};
use serde::Serialize;

use crate::config::{RunConfig, SplitKind, TrainArgs};
use crate::error::CliError;

pub type CmdResult = Result<(), CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(fusionseg::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn img_err(path: &Path) -> impl FnOnce(image::ImageError) -> CliError + '_ {
    move |source| CliError::Runtime(fusionseg::Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn require_dir(key: &str, path: &Path) -> CmdResult {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("{key}: {} is not a directory", path.display())))
    }
}

fn require_file(key: &str, path: &Path) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("{key}: {} does not exist", path.display())))
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'static str,
    command: Vec<String>,
    started_unix: u64,
    seed: u64,
    config: &'a RunConfig,
    train_samples: usize,
    val_samples: usize,
}

fn select<'a>(all: &'a [SegmentationSample], ids: &[&str]) -> Vec<SegmentationSample> {
    all.iter().filter(|s| ids.contains(&s.id.as_str())).cloned().collect::<Vec<_>>()
}

/// Splits loaded samples into (train, validation) per the data settings.
fn split(cfg: &RunConfig, all: &[SegmentationSample]) -> Result<(Vec<SegmentationSample>, Vec<SegmentationSample>), CliError> {
    let ids: Vec<String> = all.iter().map(|s| s.id.clone()).collect();
    let d = &cfg.data;
    Ok(match d.split {
        SplitKind::Kfold => {
            let folds = kfold_split(&ids, d.folds, d.split_seed)?;
            (select(all, &folds.train(d.fold)), select(all, &folds.fold(d.fold)))
        }
        SplitKind::Ratio => {
            let s = ratio_split(&ids, d.split_seed)?;
            let pick = |v: &[String]| select(all, &v.iter().map(String::as_str).collect::<Vec<_>>());
            (pick(&s.train), pick(&s.val))
        }
    })
}

pub fn train(args: &TrainArgs) -> CmdResult {
    let cfg = RunConfig::resolve(args, true)?;
    log::info!("resolved config:\n{}", serde_json::to_string_pretty(&cfg).expect("serializable"));
    let images = cfg.data.images.as_deref().expect("validated");
    let masks = cfg.data.masks.as_deref().expect("validated");
    let all = load_pairs(images, masks, cfg.model.input_size)?;
    let (train_set, val_set) = split(&cfg, &all)?;
    if train_set.is_empty() {
        return Err(CliError::Validation("data: the split leaves no training samples".into()));
    }
    fs::create_dir_all(&cfg.output).map_err(io_err(&cfg.output))?;
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        command: std::env::args().collect(),
        started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        seed: cfg.train.seed,
        config: &cfg,
        train_samples: train_set.len(),
        val_samples: val_set.len(),
    };
    let manifest_path = cfg.output.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest).expect("serializable")).map_err(io_err(&manifest_path))?;

    let mut trainer = Trainer::new(&cfg.model, &cfg.train)?;
    log::info!(
        "{} parameters, {} training / {} validation samples",
        fusionseg::model::count_params(&trainer.store),
        train_set.len(),
        val_set.len()
    );
    let outputs = FitOutputs {
        checkpoint_dir: Some(cfg.output.clone()),
        history_csv: Some(cfg.output.join("history.csv")),
    };
    let val = (!val_set.is_empty()).then_some(val_set.as_slice());
    let history = trainer.fit(&train_set, val, &outputs)?;
    if let Some(last) = history.epochs.last() {
        println!(
            "trained {} epochs; final loss {:.5}{}",
            history.epochs.len(),
            last.loss,
            last.val.map_or(String::new(), |v| format!(", val DSC {:.4}", v.dsc))
        );
    }
    println!("run directory: {}", cfg.output.display());
    Ok(())
}

pub fn eval(checkpoint: &Path, images: &Path, masks: &Path, out: &Path) -> CmdResult {
    require_file("checkpoint", checkpoint)?;
    require_dir("images", images)?;
    require_dir("masks", masks)?;
    let ck = Checkpoint::load(checkpoint)?;
    let (net, store) = ck.build_model()?;
    let data = load_pairs(images, masks, ck.model.input_size)?;
    let report = evaluate(&net, &store, &data, 8)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let agg = report.write_csv(out)?;
    println!(
        "{} images: DSC {:.4} IoU {:.4} SE {:.4} SP {:.4} ACC {:.4}",
        agg.count, agg.mean.dsc, agg.mean.iou, agg.mean.se, agg.mean.sp, agg.mean.acc
    );
    Ok(())
}

/// Thresholds a probability map at 0.5 after resizing it to `w × h`.
fn probability_to_mask(prob: &Tensor<f32>, w: u32, h: u32) -> GrayImage {
    let n = prob.dim(prob.rank() - 1) as u32;
    let d = prob.data();
    let gray = GrayImage::from_fn(n, n, |x, y| image::Luma([(d[(y * n + x) as usize].clamp(0.0, 1.0) * 255.0).round() as u8]));
    let mut resized = if (w, h) == (n, n) {
        gray
    } else {
        imageops::resize(&gray, w, h, FilterType::Triangle)
    };
    for p in resized.pixels_mut() {
        p.0[0] = if p.0[0] >= 128 { 255 } else { 0 };
    }
    resized
}

pub fn predict_dir(checkpoint: &Path, images: &Path, out: &Path) -> CmdResult {
    require_file("checkpoint", checkpoint)?;
    require_dir("images", images)?;
    let ck = Checkpoint::load(checkpoint)?;
    let (net, store) = ck.build_model()?;
    let files = list_images(images)?;
    if files.is_empty() {
        return Err(CliError::Validation(format!("images: no images in {}", images.display())));
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    for (stem, path) in &files {
        let (w, h) = image::image_dimensions(path).map_err(img_err(path))?;
        let img = load_image(path, ck.model.input_size)?;
        let batch = img.reshape([1, 3, ck.model.input_size, ck.model.input_size])?;
        let prob = predict(&net, &store, &batch)?;
        let target = out.join(format!("{stem}.png"));
        probability_to_mask(&prob, w, h).save(&target).map_err(img_err(&target))?;
    }
    println!("wrote {} masks to {}", files.len(), out.display());
    Ok(())
}

pub const YELLOW: Rgb<u8> = Rgb([255, 255, 0]);
pub const RED: Rgb<u8> = Rgb([255, 0, 0]);
pub const GREEN: Rgb<u8> = Rgb([0, 255, 0]);

/// Yellow where prediction and truth agree on lesion, red where the truth
/// was missed, green for false positives; the image shows through elsewhere.
pub fn render_overlay(image: &RgbImage, pred: &GrayImage, truth: &GrayImage) -> RgbImage {
    RgbImage::from_fn(pred.width(), pred.height(), |x, y| {
        let p = pred.get_pixel(x, y).0[0] > 127;
        let t = truth.get_pixel(x, y).0[0] > 127;
        match (p, t) {
            (true, true) => YELLOW,
            (false, true) => RED,
            (true, false) => GREEN,
            (false, false) => *image.get_pixel(x, y),
        }
    })
}

pub fn overlay(pred: &Path, truth: &Path, images: &Path, out: &Path) -> CmdResult {
    require_dir("pred", pred)?;
    require_dir("truth", truth)?;
    require_dir("images", images)?;
    let originals = list_images(images)?;
    let preds = list_images(pred)?;
    if preds.is_empty() {
        return Err(CliError::Validation(format!("pred: no masks in {}", pred.display())));
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    for (stem, pred_path) in &preds {
        let p = image::open(pred_path).map_err(img_err(pred_path))?.to_luma8();
        let (w, h) = p.dimensions();
        let truth_path = find_mask(truth, stem).ok_or_else(|| CliError::Runtime(fusionseg::Error::MissingMask(stem.clone())))?;
        let t = image::open(&truth_path).map_err(img_err(&truth_path))?.to_luma8();
        let t = imageops::resize(&t, w, h, FilterType::Nearest);
        let img_path = originals
            .get(stem)
            .ok_or_else(|| CliError::Runtime(fusionseg::Error::Data(format!("no image for prediction `{stem}`"))))?;
        let img = image::open(img_path).map_err(img_err(img_path))?.to_rgb8();
        let img = imageops::resize(&img, w, h, FilterType::Triangle);
        let target = out.join(format!("{stem}.png"));
        render_overlay(&img, &p, &t).save(&target).map_err(img_err(&target))?;
    }
    println!("wrote {} overlays to {}", preds.len(), out.display());
    Ok(())
}

pub fn synth(count: usize, size: usize, seed: u64, out: &Path) -> CmdResult {
    if count == 0 {
        return Err(CliError::Validation("count: must be at least 1".into()));
    }
    if size < 16 {
        return Err(CliError::Validation(format!("size: must be at least 16, got {size}")));
    }
    let samples = generate_synthetic(count, size, &mut SeededRng::new(seed))?;
    write_dataset(out, &samples)?;
    println!(
        "wrote {count} samples to {} (images/, masks/)",
        PathBuf::from(out).display()
    );
    Ok(())
}
