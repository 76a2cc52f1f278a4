//! Synthetic multi-label images with planted class dependencies.
//!
//! Each class is drawn as its own coloured shape. Labels are sampled class
//! by class in dependency order: a class with an antecedent is present with
//! the implication probability when the antecedent is present and with its
//! base rate otherwise, so `P(consequent | antecedent)` is planted exactly.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{bitstring, rgb_to_tensor, tensor_to_rgb, Manifest, Record, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Implication {
    pub antecedent: usize,
    pub consequent: usize,
    /// `P(consequent | antecedent)`.
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DependencySpec {
    /// Prior for root classes; for a consequent, its rate when the
    /// antecedent is absent.
    pub base_rates: Vec<f64>,
    pub implications: Vec<Implication>,
}

impl DependencySpec {
    pub fn independent(base_rates: Vec<f64>) -> Self {
        DependencySpec {
            base_rates,
            implications: Vec::new(),
        }
    }

    pub fn classes(&self) -> usize {
        self.base_rates.len()
    }

    /// Plants `P(b|a) = forward` and `P(a|b) = reverse` for a root class
    /// `a` by solving for `b`'s base rate.
    pub fn with_pair(mut self, a: usize, b: usize, forward: f64, reverse: f64) -> Result<Self> {
        let prior = *self
            .base_rates
            .get(a)
            .ok_or_else(|| Error::Config(format!("class {a} out of range")))?;
        if !(reverse > 0.0 && reverse <= 1.0) || !(0.0..1.0).contains(&prior) {
            return Err(Error::Config("pair probabilities out of range".into()));
        }
        // P(a|b) = f·π / (f·π + (1-π)·q)  =>  q = f·π·(1-r) / (r·(1-π))
        let q = forward * prior * (1.0 - reverse) / (reverse * (1.0 - prior));
        if q > 1.0 {
            return Err(Error::Config(format!(
                "infeasible dependency: P({b}|not {a}) would be {q:.3} > 1"
            )));
        }
        *self
            .base_rates
            .get_mut(b)
            .ok_or_else(|| Error::Config(format!("class {b} out of range")))? = q;
        self.implications.push(Implication {
            antecedent: a,
            consequent: b,
            probability: forward,
        });
        Ok(self)
    }

    /// Checks ranges and structure; returns classes in sampling order.
    pub fn sampling_order(&self) -> Result<Vec<usize>> {
        let n = self.classes();
        let bad = |m: String| Err(Error::Config(m));
        if let Some(p) = self.base_rates.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return bad(format!("base rate {p} outside [0,1]"));
        }
        let mut parent = vec![None; n];
        for imp in &self.implications {
            if imp.antecedent >= n || imp.consequent >= n || imp.antecedent == imp.consequent {
                return bad(format!("bad implication {imp:?}"));
            }
            if !(0.0..=1.0).contains(&imp.probability) {
                return bad(format!("infeasible implication probability {}", imp.probability));
            }
            if parent[imp.consequent].replace(imp).is_some() {
                return bad(format!("class {} has two antecedents", imp.consequent));
            }
        }
        let mut order = Vec::with_capacity(n);
        let mut state = vec![0u8; n]; // 0 new, 1 visiting, 2 done
        for start in 0..n {
            let mut chain = Vec::new();
            let mut c = start;
            loop {
                match state[c] {
                    2 => break,
                    1 => return bad(format!("dependency cycle through class {c}")),
                    _ => {}
                }
                state[c] = 1;
                chain.push(c);
                match parent[c] {
                    Some(imp) => c = imp.antecedent,
                    None => break,
                }
            }
            for &c in chain.iter().rev() {
                state[c] = 2;
                order.push(c);
            }
        }
        Ok(order)
    }

    pub fn sample_labels<R: Rng + ?Sized>(&self, order: &[usize], rng: &mut R) -> Vec<bool> {
        let mut labels = vec![false; self.classes()];
        for &c in order {
            let p = match self.implications.iter().find(|i| i.consequent == c) {
                Some(imp) if labels[imp.antecedent] => imp.probability,
                _ => self.base_rates[c],
            };
            labels[c] = rng.random_bool(p);
        }
        labels
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub size: usize,
    /// Amplitude of uniform per-pixel noise.
    pub noise: f64,
    /// Probability that a present class is actually drawn.
    pub visibility: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: 64,
            noise: 0.05,
            visibility: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

impl SynthDataset {
    /// Writes `img/NNNNN.png` files and `manifest.csv` under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let img_dir = dir.join("img");
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        for (rec, sample) in self.manifest.records.iter().zip(&self.samples) {
            let path = dir.join(&rec.path);
            tensor_to_rgb(&sample.image)?
                .save(&path)
                .map_err(|e| Error::image(&path, e))?;
        }
        self.manifest.save(&dir.join("manifest.csv"))
    }
}

const PALETTE: [[f64; 3]; 8] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.75, 0.15],
    [0.15, 0.25, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.15, 0.85],
    [0.10, 0.85, 0.85],
    [0.98, 0.55, 0.05],
    [0.05, 0.05, 0.05],
];

#[derive(Clone, Copy, Debug)]
enum Shape {
    Square,
    Disc,
    Triangle,
    Cross,
    Ring,
    Diamond,
    HBar,
    VBar,
}

const SHAPES: [Shape; 8] = [
    Shape::Square,
    Shape::Disc,
    Shape::Triangle,
    Shape::Cross,
    Shape::Ring,
    Shape::Diamond,
    Shape::HBar,
    Shape::VBar,
];

impl Shape {
    /// Membership test in coordinates normalized to `[-1, 1]²`.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            Shape::Disc => u * u + v * v <= 1.0,
            Shape::Triangle => (-0.9..=0.9).contains(&v) && u.abs() <= (v + 0.9) / 1.8,
            Shape::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            Shape::Ring => {
                let r2 = u * u + v * v;
                (0.35..=1.0).contains(&r2)
            }
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
            Shape::HBar => v.abs() <= 0.3 && u.abs() <= 1.0,
            Shape::VBar => u.abs() <= 0.3 && v.abs() <= 1.0,
        }
    }
}

fn class_look(class: usize) -> (Shape, [f64; 3]) {
    (SHAPES[class % 8], PALETTE[(class + class / 8) % 8])
}

fn render<R: Rng + ?Sized>(labels: &[bool], cfg: &SynthConfig, rng: &mut R) -> Tensor {
    let s = cfg.size;
    let bg = rng.random_range(0.35..0.6);
    let mut img = vec![bg; s * s * 3];
    for (class, _) in labels.iter().enumerate().filter(|(_, &b)| b) {
        if !rng.random_bool(cfg.visibility) {
            continue;
        }
        let (shape, color) = class_look(class);
        let half = rng.random_range(s as f64 / 9.0..s as f64 / 5.0);
        let cy = rng.random_range(half..s as f64 - half);
        let cx = rng.random_range(half..s as f64 - half);
        for y in 0..s {
            let v = (y as f64 + 0.5 - cy) / half;
            if v.abs() > 1.0 {
                continue;
            }
            for x in 0..s {
                let u = (x as f64 + 0.5 - cx) / half;
                if u.abs() <= 1.0 && shape.contains(u, v) {
                    img[(y * s + x) * 3..(y * s + x) * 3 + 3].copy_from_slice(&color);
                }
            }
        }
    }
    if cfg.noise > 0.0 {
        for v in &mut img {
            *v = (*v + rng.random_range(-cfg.noise..=cfg.noise)).clamp(0.0, 1.0);
        }
    }
    // quantize to 8 bits so in-memory samples match what is written to disk
    let t = Tensor::new(&[s, s, 3], img).unwrap();
    rgb_to_tensor(&tensor_to_rgb(&t).unwrap())
}

pub fn synth_dataset(
    class_names: &[String],
    count: usize,
    spec: &DependencySpec,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<SynthDataset> {
    if class_names.len() != spec.classes() {
        return Err(Error::Config(format!(
            "{} class names for a {}-class dependency spec",
            class_names.len(),
            spec.classes()
        )));
    }
    if cfg.size < 10 || !(0.0..=1.0).contains(&cfg.visibility) {
        return Err(Error::Config(
            "synthetic image size must be ≥10, visibility in [0,1]".into(),
        ));
    }
    let order = spec.sampling_order()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = Manifest::new(class_names.to_vec());
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let labels = spec.sample_labels(&order, &mut rng);
        let image = render(&labels, cfg, &mut rng);
        manifest.records.push(Record {
            path: format!("img/{i:05}.png"),
            labels: labels.clone(),
            scene: None,
        });
        samples.push(Sample { image, labels });
    }
    log::debug!(
        "synthesized {count} images; first label {}",
        manifest.records.first().map_or(String::new(), |r| bitstring(&r.labels))
    );
    Ok(SynthDataset { manifest, samples })
}
