//! VGG-style dense feature extractor: stacks of `3×3` conv + ReLU layers,
//! max-pooling between early blocks only, and a dilated final block so the
//! output keeps a finer spatial grid.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{ConvSpec, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBlock {
    pub convs: usize,
    pub filters: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtractorConfig {
    pub blocks: Vec<ConvBlock>,
    /// Whether a `2×2`/stride-2 max-pool follows each block.
    pub pool_after_block: Vec<bool>,
    pub last_block_dilation: usize,
    pub input_size: usize,
    pub input_channels: usize,
}

impl ExtractorConfig {
    /// Three blocks of two convs (8, 16, 32 filters), pools after the first
    /// two, dilation 2 in the last. A 64×64×3 image gives 16×16×32 features.
    pub fn desk() -> Self {
        Self::from_filters(&[(2, 8), (2, 16), (2, 32)], &[true, true, false], 64)
    }

    /// Five-block VGG analogue: pools after blocks 1–3 only, final block
    /// dilated. A 64×64 input gives an 8×8×64 grid.
    pub fn vgg_lite() -> Self {
        Self::from_filters(
            &[(2, 8), (2, 16), (3, 32), (3, 64), (3, 64)],
            &[true, true, true, false, false],
            64,
        )
    }

    pub fn from_filters(blocks: &[(usize, usize)], pools: &[bool], input_size: usize) -> Self {
        ExtractorConfig {
            blocks: blocks
                .iter()
                .map(|&(convs, filters)| ConvBlock { convs, filters })
                .collect(),
            pool_after_block: pools.to_vec(),
            last_block_dilation: 2,
            input_size,
            input_channels: 3,
        }
    }

    pub fn retained_pools(&self) -> usize {
        self.pool_after_block.iter().filter(|&&p| p).count()
    }

    /// Spatial extent `W` of the feature maps.
    pub fn output_size(&self) -> usize {
        self.input_size >> self.retained_pools()
    }

    /// Channel count `K` of the feature maps.
    pub fn output_channels(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.filters)
    }

    pub fn dilation_of(&self, block: usize) -> usize {
        if block + 1 == self.blocks.len() {
            self.last_block_dilation
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.blocks.is_empty() {
            return bad("extractor needs at least one block".into());
        }
        if self.pool_after_block.len() != self.blocks.len() {
            return bad(format!(
                "{} blocks but {} pool flags",
                self.blocks.len(),
                self.pool_after_block.len()
            ));
        }
        if self.last_block_dilation == 0 || self.input_channels == 0 || self.input_size == 0 {
            return bad("dilation, input size and channels must be positive".into());
        }
        if let Some(b) = self.blocks.iter().position(|b| b.convs == 0 || b.filters == 0) {
            return bad(format!("block {b} has no convs or no filters"));
        }
        for (b, pair) in self.blocks.windows(2).enumerate() {
            let expected = if self.pool_after_block[b] {
                pair[0].filters * 2
            } else {
                pair[0].filters
            };
            if pair[1].filters != expected {
                return bad(format!(
                    "block {} has {} filters; expected {expected} (filters double only across a pool)",
                    b + 1,
                    pair[1].filters
                ));
            }
        }
        let divisor = 1usize << self.retained_pools();
        if !self.input_size.is_multiple_of(divisor) {
            return bad(format!(
                "input size {} is not divisible by 2^{} retained pools",
                self.input_size,
                self.retained_pools()
            ));
        }
        Ok(())
    }

    /// Receptive field and jump (input pixels between adjacent outputs)
    /// of the final feature grid, before any trailing pool.
    pub fn receptive_field(&self) -> (usize, usize) {
        let (mut rf, mut jump) = (1, 1);
        let last = self.blocks.len() - 1;
        for (b, block) in self.blocks.iter().enumerate() {
            let d = self.dilation_of(b);
            rf += block.convs * 2 * d * jump;
            if self.pool_after_block[b] && b != last {
                rf += jump;
                jump *= 2;
            }
        }
        (rf, jump)
    }
}

/// One `3×3` conv layer: kernel `3×3×C_in×C_out` and per-channel bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub dilation: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorParams {
    /// `layers[block][conv]`
    pub layers: Vec<Vec<ConvLayer>>,
}

/// Glorot-uniform bound for a kernel with the given receptive-field size.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn init_extractor<R: Rng + ?Sized>(config: &ExtractorConfig, rng: &mut R) -> Result<ExtractorParams> {
    config.validate()?;
    let mut cin = config.input_channels;
    let mut layers = Vec::with_capacity(config.blocks.len());
    for (b, block) in config.blocks.iter().enumerate() {
        let mut convs = Vec::with_capacity(block.convs);
        for _ in 0..block.convs {
            let cout = block.filters;
            let bound = glorot_bound(9 * cin, 9 * cout);
            convs.push(ConvLayer {
                kernel: Tensor::uniform(&[3, 3, cin, cout], bound, rng),
                bias: Tensor::zeros(&[cout]),
                dilation: config.dilation_of(b),
            });
            cin = cout;
        }
        layers.push(convs);
    }
    Ok(ExtractorParams { layers })
}

impl ExtractorParams {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (b, block) in self.layers.iter().enumerate() {
            for (c, layer) in block.iter().enumerate() {
                f(format!("{prefix}.b{b}.c{c}.kernel"), &layer.kernel);
                f(format!("{prefix}.b{b}.c{c}.bias"), &layer.bias);
            }
        }
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flatten()
            .flat_map(|l| [&mut l.kernel, &mut l.bias])
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.params_mut().for_each(f);
    }

    /// Places every parameter on the graph, in [`visit`](Self::visit) order.
    pub fn bind(&self, g: &mut Graph, trainable: bool, order: &mut Vec<Var>) -> BoundExtractor {
        let layers = self
            .layers
            .iter()
            .map(|block| {
                block
                    .iter()
                    .map(|layer| {
                        let kernel = leaf(g, &layer.kernel, trainable, order);
                        let bias = leaf(g, &layer.bias, trainable, order);
                        (kernel, bias, layer.dilation)
                    })
                    .collect()
            })
            .collect();
        BoundExtractor { layers }
    }
}

pub(crate) fn leaf(g: &mut Graph, t: &Tensor, trainable: bool, order: &mut Vec<Var>) -> Var {
    let v = if trainable {
        g.param(t.clone())
    } else {
        g.constant(t.clone())
    };
    order.push(v);
    v
}

pub struct BoundExtractor {
    layers: Vec<Vec<(Var, Var, usize)>>,
}

impl BoundExtractor {
    pub fn forward(&self, g: &mut Graph, config: &ExtractorConfig, image: Var) -> Result<Var> {
        let mut x = image;
        for (b, block) in self.layers.iter().enumerate() {
            for &(kernel, bias, dilation) in block {
                let y = g.conv2d(x, kernel, ConvSpec::same_3x3(dilation))?;
                let y = g.add_channel_bias(y, bias)?;
                x = g.relu(y)?;
            }
            if config.pool_after_block[b] {
                x = g.maxpool2d(x, 2, 2)?;
            }
        }
        Ok(x)
    }
}

/// Runs the extractor on one `S×S×C` image.
pub fn extract_features(image: &Tensor, config: &ExtractorConfig, params: &ExtractorParams) -> Result<Tensor> {
    config.validate()?;
    let expected = [config.input_size, config.input_size, config.input_channels];
    if image.shape() != expected {
        return Err(Error::Dimension(format!(
            "image {:?} does not match configured input {expected:?}",
            image.shape()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let bound = params.bind(&mut g, false, &mut Vec::new());
    let out = bound.forward(&mut g, config, x)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn desk_shapes() {
        let cfg = ExtractorConfig::desk();
        cfg.validate().unwrap();
        assert_eq!((cfg.output_size(), cfg.output_channels()), (16, 32));
        let vgg = ExtractorConfig::vgg_lite();
        vgg.validate().unwrap();
        assert_eq!(vgg.output_size(), 8);
        let full = ExtractorConfig {
            input_size: 224,
            ..ExtractorConfig::vgg_lite()
        };
        assert_eq!(full.output_size(), 28);
    }

    #[test]
    fn doubling_rule_enforced() {
        let cfg = ExtractorConfig::from_filters(&[(1, 4), (1, 4)], &[true, false], 16);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = ExtractorConfig::from_filters(&[(1, 4), (1, 8)], &[false, false], 16);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn indivisible_input() {
        let cfg = ExtractorConfig {
            input_size: 30,
            ..ExtractorConfig::desk()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn forward_output_extent() {
        let cfg = ExtractorConfig::from_filters(&[(1, 2), (1, 4), (1, 8)], &[true, true, false], 16);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = init_extractor(&cfg, &mut rng).unwrap();
        let img = Tensor::uniform(&[16, 16, 3], 1.0, &mut rng);
        let x = extract_features(&img, &cfg, &params).unwrap();
        assert_eq!(x.shape(), &[4, 4, 8]);
        assert!(extract_features(&Tensor::zeros(&[8, 8, 3]), &cfg, &params).is_err());
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let cfg = ExtractorConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = init_extractor(&cfg, &mut rng).unwrap();
        params.visit_mut(&mut |t| t.data_mut().fill(0.0));
        let img = Tensor::uniform(&[64, 64, 3], 1.0, &mut rng);
        let x = extract_features(&img, &cfg, &params).unwrap();
        assert_eq!(x.shape(), &[16, 16, 32]);
        assert!(x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_determinism_and_bounds() {
        let cfg = ExtractorConfig::desk();
        let a = init_extractor(&cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = init_extractor(&cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let c = init_extractor(&cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for layer in a.layers.iter().flatten() {
            let s = layer.kernel.shape();
            let bound = glorot_bound(9 * s[2], 9 * s[3]);
            assert!(layer.kernel.max_abs() <= bound);
        }
    }

    #[test]
    fn dilated_block_matches_pooled_tap_span() {
        // Restoring the dropped pool in front of the last block and removing
        // its dilation must leave the last block's contribution unchanged.
        let cfg = ExtractorConfig::vgg_lite();
        let mut reference = cfg.clone();
        let n = reference.blocks.len();
        reference.pool_after_block[n - 2] = true;
        reference.last_block_dilation = 1;

        let mut head = cfg.clone();
        head.blocks.pop();
        head.pool_after_block.pop();
        head.last_block_dilation = 1;
        let (rf_head, jump_head) = head.receptive_field();
        let convs = cfg.blocks[n - 1].convs;

        let (rf, jump) = cfg.receptive_field();
        let (rf_ref, jump_ref) = reference.receptive_field();
        // dilated grid: same jump as before the last block, each tap spans 2·jump
        assert_eq!(jump, jump_head);
        assert_eq!(rf - rf_head, convs * 2 * 2 * jump_head);
        // pooled grid: jump doubled, each tap spans 2·jump, plus the pool window
        assert_eq!(jump_ref, 2 * jump_head);
        assert_eq!(rf_ref - rf_head, jump_head + convs * 2 * jump_ref);
        // identical growth from the convolutions themselves
        assert_eq!(rf - rf_head, rf_ref - rf_head - jump_head);
    }
}
