//! Conditional class co-occurrence, `P(C_p | C_r) = P(C_p, C_r) / P(C_r)`.

use std::path::Path;

use image::GrayImage;

use crate::error::{dim_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CooccurrenceMatrix {
    pub classes: Vec<String>,
    pub total: usize,
    /// Images containing each class.
    pub counts: Vec<usize>,
    /// `joint[r][p]`: images containing both `r` and `p`.
    pub joint: Vec<Vec<usize>>,
}

impl CooccurrenceMatrix {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn prior(&self, class: usize) -> f64 {
        self.counts[class] as f64 / self.total as f64
    }

    pub fn joint_probability(&self, r: usize, p: usize) -> f64 {
        self.joint[r][p] as f64 / self.total as f64
    }

    /// `P(C_p | C_r)`; `None` when class `r` never occurs.
    pub fn conditional(&self, r: usize, p: usize) -> Option<f64> {
        (self.counts[r] > 0).then(|| self.joint_probability(r, p) / self.prior(r))
    }

    /// `P(C_p | C_r)` as an exact fraction `(joint count, count of r)`.
    pub fn conditional_ratio(&self, r: usize, p: usize) -> Option<(usize, usize)> {
        (self.counts[r] > 0).then(|| (self.joint[r][p], self.counts[r]))
    }

    pub fn row_defined(&self, r: usize) -> bool {
        self.counts[r] > 0
    }

    /// Header row and column carry class names; undefined rows read
    /// `undefined` in every cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("reference\\potential");
        for name in &self.classes {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for r in 0..self.len() {
            out.push_str(&self.classes[r]);
            for p in 0..self.len() {
                match self.conditional(r, p) {
                    Some(v) => out.push_str(&format!(",{v:.6}")),
                    None => out.push_str(",undefined"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Grayscale rendering, `cell` pixels per entry; value 1 is white.
    /// Undefined rows are drawn mid-gray.
    pub fn to_image(&self, cell: u32) -> GrayImage {
        let n = self.len() as u32;
        GrayImage::from_fn(n * cell, n * cell, |x, y| {
            let (r, p) = ((y / cell) as usize, (x / cell) as usize);
            let v = match self.conditional(r, p) {
                Some(v) => (v * 255.0).round() as u8,
                None => 128,
            };
            image::Luma([v])
        })
    }

    pub fn save_image(&self, path: &Path, cell: u32) -> Result<()> {
        self.to_image(cell).save(path).map_err(|e| Error::image(path, e))
    }
}

pub fn cooccurrence<T: AsRef<[bool]>>(labels: &[T], classes: &[String]) -> Result<CooccurrenceMatrix> {
    if labels.is_empty() {
        return Err(Error::Usage("co-occurrence of an empty label list".into()));
    }
    let n = classes.len();
    let mut counts = vec![0; n];
    let mut joint = vec![vec![0; n]; n];
    for label in labels {
        let label = label.as_ref();
        if label.len() != n {
            return Err(dim_err!("label vector of length {} for {n} classes", label.len()));
        }
        let present: Vec<usize> = (0..n).filter(|&c| label[c]).collect();
        for &r in &present {
            counts[r] += 1;
            for &p in &present {
                joint[r][p] += 1;
            }
        }
    }
    Ok(CooccurrenceMatrix {
        classes: classes.to_vec(),
        total: labels.len(),
        counts,
        joint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn four_image_example() {
        let labels = vec![vec![true, true], vec![true, false], vec![false, true], vec![true, true]];
        let m = cooccurrence(&labels, &names(2)).unwrap();
        assert_eq!(m.conditional_ratio(0, 1), Some((2, 3)));
        assert_eq!(m.conditional_ratio(1, 0), Some((2, 3)));
        assert_eq!(m.conditional(0, 0), Some(1.0));
    }

    #[test]
    fn undefined_rows() {
        let labels = vec![vec![true, false]];
        let m = cooccurrence(&labels, &names(2)).unwrap();
        assert!(!m.row_defined(1));
        assert_eq!(m.conditional(1, 0), None);
        assert!(m.to_csv().contains("c1,undefined,undefined"));
    }

    #[test]
    fn errors() {
        let empty: Vec<Vec<bool>> = vec![];
        assert!(cooccurrence(&empty, &names(2)).is_err());
        assert!(cooccurrence(&[vec![true]], &names(2)).is_err());
    }

    #[test]
    fn single_class() {
        let m = cooccurrence(&[vec![true], vec![true]], &names(1)).unwrap();
        assert_eq!(m.to_csv(), "reference\\potential,c0\nc0,1.000000\n");
        assert_eq!(m.to_image(4).dimensions(), (4, 4));
    }
}
