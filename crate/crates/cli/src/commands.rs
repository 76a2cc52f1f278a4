use std::fs;
use std::io::Write as _;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use cabilstm::checkpoint;
use cabilstm::dataio::{
    base_dir, crop_tiles, load_image, load_samples, mask_to_labels, synth_dataset, DependencySpec, Manifest, Record,
    SegMask, SynthConfig,
};
use cabilstm::deps::cooccurrence;
use cabilstm::metrics::{binarize, Report};
use cabilstm::train::{log_csv, train as fit};
use cabilstm::{Error, Model, Result, Tensor};
use image::GrayImage;
use log::{info, warn};

use crate::config::RunConfig;
use crate::{DepsArgs, EvalArgs, ExportArgs, MakeDatasetArgs, SynthArgs, TrainArgs};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let manifest_path = cfg
        .train_manifest
        .as_deref()
        .ok_or_else(|| Error::Config("data.train is not set".into()))?;
    let manifest = Manifest::load(manifest_path)?;
    let model_cfg = cfg.model.model_config(&manifest.classes)?;
    let (fit_part, val_part) = manifest.split(1.0 - cfg.validation_fraction, seed)?;
    let base = base_dir(manifest_path);
    let size = model_cfg.extractor.input_size;
    let fit_set = load_samples(&fit_part, &base, size)?;
    let val_set = load_samples(&val_part, &base, size)?;
    info!(
        "training on {} images, validating on {} ({} classes)",
        fit_set.len(),
        val_set.len(),
        manifest.classes.len()
    );

    let (ckpt_path, log_path) = match &args.out {
        Some(dir) => (dir.join("model.ckpt"), dir.join("train_log.csv")),
        None => (cfg.checkpoint.clone(), cfg.log.clone()),
    };
    let mut model = Model::init(model_cfg, seed)?;
    let outcome = fit(&mut model, &fit_set, &val_set, &cfg.schedule, seed, |_| {
        ControlFlow::Continue(())
    })?;
    write_file(&log_path, log_csv(&outcome.log))?;
    if let Some(dir) = ckpt_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    checkpoint::save(&outcome.best, &ckpt_path)?;
    println!(
        "best epoch {} of {}; checkpoint {}; log {}",
        outcome.best_epoch,
        outcome.log.len(),
        ckpt_path.display(),
        log_path.display()
    );
    Ok(())
}

/// Loads `manifest` images for `model`, treating any mismatch in class
/// count or image extent as a shape error.
fn load_for_model(model: &Model, manifest_path: &Path) -> Result<(Manifest, Vec<Tensor>)> {
    let manifest = Manifest::load(manifest_path)?;
    if manifest.classes.len() != model.classes() {
        return Err(Error::Dimension(format!(
            "checkpoint has {} classes, manifest {}",
            model.classes(),
            manifest.classes.len()
        )));
    }
    let base = base_dir(manifest_path);
    let images = manifest
        .records
        .iter()
        .map(|r| {
            let path = base.join(&r.path);
            let img = load_image(&path)?;
            check_extent(model, &img, &path)?;
            Ok(img)
        })
        .collect::<Result<_>>()?;
    Ok((manifest, images))
}

fn check_extent(model: &Model, img: &Tensor, path: &Path) -> Result<()> {
    let size = model.config.extractor.input_size;
    if img.shape()[..2] != [size, size] {
        return Err(Error::Dimension(format!(
            "{} is {}x{}, checkpoint expects {size}x{size}",
            path.display(),
            img.shape()[1],
            img.shape()[0]
        )));
    }
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let model = checkpoint::load(&args.checkpoint)?;
    let (manifest, images) = load_for_model(&model, &args.manifest)?;
    if manifest.records.is_empty() {
        return Err(Error::Data(format!("{} has no records", args.manifest.display())));
    }
    let preds = images
        .iter()
        .map(|img| Ok(binarize(&model.predict(img)?, args.threshold)))
        .collect::<Result<Vec<_>>>()?;
    let report = Report::compute(&preds, &manifest.labels())?;
    let summary = report.summary_csv();
    print!("{summary}");
    create_dir(&args.out)?;
    write_file(&args.out.join("summary.csv"), &summary)?;
    write_file(&args.out.join("per_class.csv"), report.per_class_csv(&manifest.classes))?;
    Ok(())
}

/// Min-max normalises all maps of one image jointly to `0..=255`; a
/// constant stack maps to mid-gray.
pub fn normalize_maps(maps: &Tensor) -> Vec<u8> {
    let (lo, hi) = maps
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    maps.data()
        .iter()
        .map(|&v| {
            if hi > lo {
                (255.0 * (v - lo) / (hi - lo)).round() as u8
            } else {
                128
            }
        })
        .collect()
}

/// One grayscale image per class at feature resolution, plus a
/// nearest-neighbour upsampling to `size×size`.
pub fn attention_images(maps: &Tensor, size: usize) -> Vec<(GrayImage, GrayImage)> {
    let (w, n) = (maps.shape()[0], maps.shape()[2]);
    let levels = normalize_maps(maps);
    (0..n)
        .map(|l| {
            let at = |y: usize, x: usize| image::Luma([levels[(y * w + x) * n + l]]);
            let small = GrayImage::from_fn(w as u32, w as u32, |x, y| at(y as usize, x as usize));
            let full = GrayImage::from_fn(size as u32, size as u32, |x, y| {
                at(y as usize * w / size, x as usize * w / size)
            });
            (small, full)
        })
        .collect()
}

pub fn export_attention(args: &ExportArgs) -> Result<()> {
    let model = checkpoint::load(&args.checkpoint)?;
    let img = load_image(&args.image)?;
    check_extent(&model, &img, &args.image)?;
    let names: Vec<String> = match &args.manifest {
        Some(path) => {
            let m = Manifest::load(path)?;
            if m.classes.len() != model.classes() {
                return Err(Error::Dimension(format!(
                    "checkpoint has {} classes, manifest {}",
                    model.classes(),
                    m.classes.len()
                )));
            }
            m.classes
        }
        None => (0..model.classes()).map(|l| format!("class{l:02}")).collect(),
    };
    let maps = model.attention_maps(&img)?;
    create_dir(&args.out)?;
    for ((small, full), name) in attention_images(&maps, model.config.extractor.input_size)
        .into_iter()
        .zip(&names)
    {
        for (suffix, picture) in [("", small), ("_full", full)] {
            let path = args.out.join(format!("{name}{suffix}.pgm"));
            picture.save(&path).map_err(|source| Error::Image { path, source })?;
        }
    }
    println!("wrote {} attention maps to {}", names.len(), args.out.display());
    Ok(())
}

pub fn analyze_deps(args: &DepsArgs) -> Result<()> {
    let manifest = Manifest::load(&args.manifest)?;
    if manifest.records.is_empty() {
        return Err(Error::Data(format!("{} has no records", args.manifest.display())));
    }
    let matrix = cooccurrence(&manifest.labels(), &manifest.classes)?;
    create_dir(&args.out)?;
    let csv = matrix.to_csv();
    write_file(&args.out.join("cooccurrence.csv"), &csv)?;
    matrix.save_image(&args.out.join("cooccurrence.png"), args.cell)?;
    print!("{csv}");
    Ok(())
}

fn mask_path(tile: &Path) -> Option<PathBuf> {
    let stem = tile.file_stem()?.to_str()?;
    ["png", "pgm"]
        .iter()
        .map(|ext| tile.with_file_name(format!("{stem}_mask.{ext}")))
        .find(|p| p.exists())
}

fn tile_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut tiles: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(dir)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| {
            let is_image = matches!(p.extension().and_then(|e| e.to_str()), Some("png" | "ppm" | "pgm"));
            let is_mask = p
                .file_stem()
                .and_then(|s| s.to_str())
                .is_some_and(|s| s.ends_with("_mask"));
            is_image && !is_mask
        })
        .collect();
    tiles.sort();
    Ok(tiles)
}

pub fn make_dataset(args: &MakeDatasetArgs) -> Result<()> {
    let classes: Vec<String> = args
        .classes
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if classes.is_empty() {
        return Err(Error::Config("--classes lists no class names".into()));
    }
    let tiles = tile_paths(&args.tiles)?;
    if tiles.is_empty() {
        return Err(Error::Data(format!("no tiles in {}", args.tiles.display())));
    }
    let img_dir = args.out.join("img");
    create_dir(&img_dir)?;
    let mut manifest = Manifest::new(classes.clone());
    let mut rejected = String::new();
    for tile in &tiles {
        let mask_file = mask_path(tile).ok_or_else(|| Error::Data(format!("no mask for tile {}", tile.display())))?;
        let mask = SegMask::load(&mask_file)?;
        let image = image::open(tile)
            .map_err(|source| Error::Image {
                path: tile.clone(),
                source,
            })?
            .to_rgb8();
        let stem = tile.file_stem().and_then(|s| s.to_str()).unwrap_or("tile");
        let mut kept = 0;
        let crops = crop_tiles(&image, &mask, args.window, args.stride)?;
        let total = crops.len();
        for crop in crops {
            let (y, x) = crop.origin;
            let name = format!("{stem}_{y:05}_{x:05}");
            match mask_to_labels(&crop.mask, classes.len(), args.sentinel)? {
                None => {
                    rejected.push_str(&format!("{name},unclassified pixels\n"));
                }
                Some(labels) => {
                    let rel = format!("img/{name}.png");
                    let path = args.out.join(&rel);
                    crop.image.save(&path).map_err(|source| Error::Image { path, source })?;
                    manifest.records.push(Record {
                        path: rel,
                        labels,
                        scene: None,
                    });
                    kept += 1;
                }
            }
        }
        if kept == 0 {
            warn!("{}: all {total} crops contain unclassified pixels", tile.display());
        } else {
            info!("{}: kept {kept} of {total} crops", tile.display());
        }
    }
    if manifest.records.is_empty() {
        warn!("no crops survived; the manifest is empty");
    }
    manifest.save(&args.out.join("manifest.csv"))?;
    write_file(&args.out.join("rejected.csv"), format!("crop,reason\n{rejected}"))?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "class,count").ok();
    for (name, count) in classes.iter().zip(manifest.class_counts()) {
        writeln!(stdout, "{name},{count}").ok();
    }
    Ok(())
}

/// `A:B:P(B|A):P(A|B)`.
fn parse_pair(text: &str) -> Result<(usize, usize, f64, f64)> {
    let bad = || Error::Config(format!("--pair '{text}' is not A:B:P(B|A):P(A|B)"));
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 4 {
        return Err(bad());
    }
    Ok((
        parts[0].parse().map_err(|_| bad())?,
        parts[1].parse().map_err(|_| bad())?,
        parts[2].parse().map_err(|_| bad())?,
        parts[3].parse().map_err(|_| bad())?,
    ))
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    if args.classes == 0 {
        return Err(Error::Config("--classes must be positive".into()));
    }
    let mut spec = DependencySpec::independent(vec![args.base_rate; args.classes]);
    for pair in &args.pairs {
        let (a, b, forward, reverse) = parse_pair(pair)?;
        spec = spec.with_pair(a, b, forward, reverse)?;
    }
    let names: Vec<String> = (0..args.classes).map(|c| format!("c{c}")).collect();
    let cfg = SynthConfig {
        size: args.size,
        visibility: args.visibility,
        ..Default::default()
    };
    let data = synth_dataset(&names, args.count, &spec, &cfg, args.seed)?;
    data.write_to(&args.out)?;
    println!(
        "wrote {} images to {}",
        data.samples.len(),
        args.out.join("manifest.csv").display()
    );
    Ok(())
}
