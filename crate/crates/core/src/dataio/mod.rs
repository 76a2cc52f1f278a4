//! Dataset manifests, image I/O, train/test splitting, tile cropping and
//! the synthetic generator.
//!
//! Manifest format (CSV):
//!
//! ```text
//! #classes:airplane,bare-soil,buildings
//! img/0001.png,101
//! img/0002.png,010,harbor
//! ```
//!
//! Each row is `path,bitstring[,scene]`; bit `c` is the label of class `c`
//! and the optional scene tag drives stratified splitting.

mod synth;
mod tiles;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use synth::{synth_dataset, DependencySpec, Implication, SynthConfig, SynthDataset};
pub use tiles::{crop_origins, crop_tiles, mask_to_labels, Crop, SegMask, DEFAULT_SENTINEL};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub path: String,
    pub labels: Vec<bool>,
    pub scene: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub records: Vec<Record>,
}

pub fn bitstring(labels: &[bool]) -> String {
    labels.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

impl Manifest {
    pub fn new(classes: Vec<String>) -> Self {
        Manifest {
            classes,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<Vec<bool>> {
        self.records.iter().map(|r| r.labels.clone()).collect()
    }

    /// Images containing each class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for r in &self.records {
            for (c, &b) in r.labels.iter().enumerate() {
                counts[c] += b as usize;
            }
        }
        counts
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let classes = match lines.next() {
            Some((_, header)) => match header.trim().strip_prefix("#classes:") {
                Some(list) => list.split(',').map(|s| s.trim().to_string()).collect::<Vec<_>>(),
                None => return Err(Error::Data("manifest must start with '#classes:'".into())),
            },
            None => return Err(Error::Data("empty manifest".into())),
        };
        if classes.iter().any(String::is_empty) {
            return Err(Error::Data("empty class name in manifest header".into()));
        }
        let mut manifest = Manifest::new(classes);
        for (lineno, line) in lines {
            let fields: Vec<&str> = line.trim().split(',').collect();
            let bad = |msg: &str| Error::Data(format!("manifest line {}: {msg}", lineno + 1));
            if fields.len() < 2 || fields.len() > 3 {
                return Err(bad("expected path,bitstring[,scene]"));
            }
            let bits = fields[1].trim();
            if bits.len() != manifest.classes.len() || !bits.bytes().all(|b| b == b'0' || b == b'1') {
                return Err(bad(&format!(
                    "label '{bits}' is not a {}-bit string",
                    manifest.classes.len()
                )));
            }
            manifest.records.push(Record {
                path: fields[0].trim().to_string(),
                labels: bits.bytes().map(|b| b == b'1').collect(),
                scene: fields.get(2).map(|s| s.trim().to_string()),
            });
        }
        Ok(manifest)
    }

    /// Reads a manifest and checks that every image path exists relative
    /// to the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest = Self::parse(&text)?;
        let base = base_dir(path);
        for r in &manifest.records {
            let p = base.join(&r.path);
            if !p.exists() {
                return Err(Error::Data(format!("image not found: {}", p.display())));
            }
        }
        Ok(manifest)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("#classes:{}\n", self.classes.join(","));
        for r in &self.records {
            out.push_str(&r.path);
            out.push(',');
            out.push_str(&bitstring(&r.labels));
            if let Some(scene) = &r.scene {
                out.push(',');
                out.push_str(scene);
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    fn subset(&self, idx: &[usize]) -> Manifest {
        Manifest {
            classes: self.classes.clone(),
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    /// Train/test partition. Stratified per scene when every record has a
    /// scene tag, otherwise uniformly random. Deterministic in `seed`.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Manifest, Manifest)> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::Usage(format!("train fraction {train_fraction} not in (0,1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::new();
        let mut test = Vec::new();
        let mut take = |mut group: Vec<usize>| {
            group.shuffle(&mut rng);
            let k = (train_fraction * group.len() as f64).round() as usize;
            let (a, b) = group.split_at(k);
            train.extend_from_slice(a);
            test.extend_from_slice(b);
        };
        if !self.records.is_empty() && self.records.iter().all(|r| r.scene.is_some()) {
            let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, r) in self.records.iter().enumerate() {
                groups.entry(r.scene.as_deref().unwrap()).or_default().push(i);
            }
            for (_, group) in groups {
                take(group);
            }
        } else {
            take((0..self.records.len()).collect());
        }
        if train.is_empty() || test.is_empty() {
            return Err(Error::Data(format!(
                "split of {} records at {train_fraction} leaves a side empty",
                self.records.len()
            )));
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train), self.subset(&test)))
    }
}

pub fn base_dir(manifest_path: &Path) -> PathBuf {
    manifest_path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// An image with its label vector, ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub labels: Vec<bool>,
}

impl Sample {
    pub fn target(&self) -> Vec<f64> {
        self.labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// `H×W×3` tensor with values in `[0, 1]`.
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    Tensor::new(&[h as usize, w as usize, 3], data).unwrap()
}

pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let (h, w) = match *t.shape() {
        [h, w, 3] => (h, w),
        ref s => return Err(Error::Dimension(format!("expected H×W×3 image, got {s:?}"))),
    };
    let raw = t
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).unwrap())
}

/// Loads a PNG / PPM / PGM image as an `H×W×3` tensor.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

/// Loads every record's image, requiring a `size×size` extent.
pub fn load_samples(manifest: &Manifest, base: &Path, size: usize) -> Result<Vec<Sample>> {
    manifest
        .records
        .iter()
        .map(|r| {
            let path = base.join(&r.path);
            let image = load_image(&path)?;
            if image.shape()[..2] != [size, size] {
                return Err(Error::Data(format!(
                    "{} is {}x{}, model expects {size}x{size}",
                    path.display(),
                    image.shape()[1],
                    image.shape()[0]
                )));
            }
            Ok(Sample {
                image,
                labels: r.labels.clone(),
            })
        })
        .collect()
}
