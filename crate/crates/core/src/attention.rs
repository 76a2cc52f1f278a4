//! Class attention layer: a bias-free `1×1` convolution giving one spatial
//! map per class, and the vectorization of each map into the feature
//! vector for that class's recurrent time step.

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::extractor::{glorot_bound, leaf};
use crate::graph::{Graph, Var};
use crate::ops;
use crate::tensor::{ConvSpec, Tensor};

/// One `1×1×K` filter per class, stored as a `1×1×K×N` kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassAttentionParams {
    pub filters: Tensor,
}

impl ClassAttentionParams {
    pub fn new(filters: Tensor) -> Result<Self> {
        match filters.shape() {
            [1, 1, _, _] => Ok(ClassAttentionParams { filters }),
            s => Err(dim_err!("attention filters must be 1×1×K×N, got {s:?}")),
        }
    }

    pub fn init<R: Rng + ?Sized>(channels: usize, classes: usize, rng: &mut R) -> Self {
        let bound = glorot_bound(channels, classes);
        ClassAttentionParams {
            filters: Tensor::uniform(&[1, 1, channels, classes], bound, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.filters.shape()[2]
    }

    pub fn classes(&self) -> usize {
        self.filters.shape()[3]
    }

    /// Weight of channel `k` in the filter for class `l`.
    pub fn weight(&self, class: usize, channel: usize) -> f64 {
        self.filters.data()[channel * self.classes() + class]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool, order: &mut Vec<Var>) -> Var {
        leaf(g, &self.filters, trainable, order)
    }
}

/// `M_l(p,q) = Σ_k w_{l,k} X_k(p,q)` for all classes at once.
pub fn attention_maps(features: &Tensor, params: &ClassAttentionParams) -> Result<Tensor> {
    check_channels(features, params)?;
    ops::conv2d(features, &params.filters, ConvSpec::pointwise())
}

fn check_channels(features: &Tensor, params: &ClassAttentionParams) -> Result<()> {
    match features.shape() {
        [_, _, k] if *k == params.channels() => Ok(()),
        s => Err(dim_err!(
            "features {s:?} do not match attention filters with {} channels",
            params.channels()
        )),
    }
}

/// Graph version of [`attention_maps`] followed by [`vectorize`]: returns
/// the stack `M` and one `[W²]` vector per class.
pub fn attend(g: &mut Graph, features: Var, filters: Var) -> Result<(Var, Vec<Var>)> {
    let maps = g.conv2d(features, filters, ConvSpec::pointwise())?;
    let classes = g.value(filters).shape()[3];
    let vectors = (0..classes).map(|l| g.channel(maps, l)).collect::<Result<_>>()?;
    Ok((maps, vectors))
}

/// Class-specific feature vectors `v_l`, each a row-major flattening of
/// attention map `M_l`. Vector `l` is only ever fed to time step `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassFeatureSet {
    pub vectors: Vec<Tensor>,
    pub side: usize,
}

impl ClassFeatureSet {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Reassembles the `W×W×N` stack.
    pub fn to_maps(&self) -> Tensor {
        let n = self.vectors.len();
        let mut data = vec![0.0; self.side * self.side * n];
        for (l, v) in self.vectors.iter().enumerate() {
            for (px, &val) in v.data().iter().enumerate() {
                data[px * n + l] = val;
            }
        }
        Tensor::new(&[self.side, self.side, n], data).unwrap()
    }
}

pub fn vectorize(maps: &Tensor) -> Result<ClassFeatureSet> {
    let (w, n) = match *maps.shape() {
        [h, w, n] if h == w => (w, n),
        ref s => return Err(dim_err!("attention stack must be W×W×N, got {s:?}")),
    };
    let vectors = (0..n).map(|l| ops::channel(maps, l)).collect::<Result<_>>()?;
    Ok(ClassFeatureSet { vectors, side: w })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_hot_filter_selects_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[3, 3, 4], 1.0, &mut rng);
        let mut w = vec![0.0; 4];
        w[2] = 1.0;
        let params = ClassAttentionParams::new(Tensor::new(&[1, 1, 4, 1], w).unwrap()).unwrap();
        let m = attention_maps(&x, &params).unwrap();
        assert_eq!(m.data(), ops::channel(&x, 2).unwrap().data());
    }

    #[test]
    fn two_channel_combination() {
        let x = Tensor::new(&[1, 1, 2], vec![1.0, 2.0]).unwrap();
        let params = ClassAttentionParams::new(Tensor::new(&[1, 1, 2, 1], vec![0.5, 0.25]).unwrap()).unwrap();
        assert_eq!(attention_maps(&x, &params).unwrap().data(), &[1.0]);
    }

    #[test]
    fn channel_mismatch() {
        let params = ClassAttentionParams::init(3, 2, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(attention_maps(&Tensor::zeros(&[2, 2, 4]), &params).is_err());
        assert!(ClassAttentionParams::new(Tensor::zeros(&[3, 3, 1, 1])).is_err());
    }

    #[test]
    fn vectorize_row_major() {
        let m = Tensor::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let set = vectorize(&m).unwrap();
        assert_eq!(set.vectors[0].data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(set.to_maps(), m);
    }

    #[test]
    fn desk_vector_count() {
        let set = vectorize(&Tensor::zeros(&[16, 16, 17])).unwrap();
        assert_eq!(set.len(), 17);
        assert!(set.vectors.iter().all(|v| v.shape() == [256]));
    }
}
