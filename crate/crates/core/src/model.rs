//! The complete classifier: dense extractor, class attention, recurrent
//! class-dependency layer and per-class sigmoid heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attend, ClassAttentionParams};
use crate::error::{dim_err, Error, Result};
use crate::extractor::{init_extractor, ExtractorConfig, ExtractorParams};
use crate::graph::{Gradients, Graph, Var};
use crate::lstm::{bilstm_vars, head_var, HeadParams, LstmCellParams};
use crate::tensor::Tensor;

/// How class-specific features are turned into per-class probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Recurrence {
    /// Forward and backward streams; heads read `[h_l, h'_l]`.
    Bidirectional,
    /// Forward stream only; heads read `h_l`.
    Forward,
    /// No recurrence: head `l` reads `v_l` directly.
    Independent,
}

impl Recurrence {
    pub fn code(self) -> f64 {
        match self {
            Recurrence::Bidirectional => 0.0,
            Recurrence::Forward => 1.0,
            Recurrence::Independent => 2.0,
        }
    }

    pub fn from_code(code: f64) -> Option<Self> {
        match code as i64 {
            0 => Some(Recurrence::Bidirectional),
            1 => Some(Recurrence::Forward),
            2 => Some(Recurrence::Independent),
            _ => None,
        }
    }
}

impl std::str::FromStr for Recurrence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilstm" | "bidirectional" => Ok(Recurrence::Bidirectional),
            "lstm" | "forward" => Ok(Recurrence::Forward),
            "independent" | "none" => Ok(Recurrence::Independent),
            other => Err(Error::Config(format!("unknown recurrence '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub extractor: ExtractorConfig,
    pub hidden: usize,
    pub classes: usize,
    pub recurrence: Recurrence,
    /// `time_order[t]` is the class processed at time step `t`.
    pub time_order: Vec<usize>,
}

impl ModelConfig {
    pub fn new(extractor: ExtractorConfig, hidden: usize, classes: usize) -> Self {
        ModelConfig {
            extractor,
            hidden,
            classes,
            recurrence: Recurrence::Bidirectional,
            time_order: (0..classes).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.extractor.validate()?;
        if self.hidden == 0 || self.classes == 0 {
            return Err(Error::Config("hidden width and class count must be positive".into()));
        }
        let mut seen = vec![false; self.classes];
        for &c in &self.time_order {
            if c >= self.classes || std::mem::replace(&mut seen[c], true) {
                return Err(Error::Config(format!(
                    "time order {:?} is not a permutation of 0..{}",
                    self.time_order, self.classes
                )));
            }
        }
        if self.time_order.len() != self.classes {
            return Err(Error::Config("time order must list every class".into()));
        }
        Ok(())
    }

    /// Length of each class feature vector, `W²`.
    pub fn feature_len(&self) -> usize {
        let w = self.extractor.output_size();
        w * w
    }

    fn head_width(&self) -> usize {
        match self.recurrence {
            Recurrence::Bidirectional => 2 * self.hidden,
            Recurrence::Forward => self.hidden,
            Recurrence::Independent => self.feature_len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub extractor: ExtractorParams,
    pub attention: ClassAttentionParams,
    pub forward_cell: Option<LstmCellParams>,
    pub backward_cell: Option<LstmCellParams>,
    pub heads: Vec<HeadParams>,
}

/// Graph handles produced by one forward pass.
pub struct ForwardVars {
    pub maps: Var,
    pub probabilities: Var,
    /// Trainable leaves in [`Model::visit`] order.
    pub params: Vec<Var>,
}

impl Model {
    /// Extractor and attention filters use Glorot-uniform, recurrent
    /// weights uniform in `[-0.1, 0.1]`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let extractor = init_extractor(&config.extractor, &mut rng)?;
        let attention = ClassAttentionParams::init(config.extractor.output_channels(), config.classes, &mut rng);
        let input = config.feature_len();
        let (forward_cell, backward_cell) = match config.recurrence {
            Recurrence::Bidirectional => (
                Some(LstmCellParams::init(config.hidden, input, &mut rng)),
                Some(LstmCellParams::init(config.hidden, input, &mut rng)),
            ),
            Recurrence::Forward => (Some(LstmCellParams::init(config.hidden, input, &mut rng)), None),
            Recurrence::Independent => (None, None),
        };
        let heads = init_heads(config.classes, config.head_width(), &mut rng);
        Ok(Model {
            config,
            extractor,
            attention,
            forward_cell,
            backward_cell,
            heads,
        })
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.extractor.visit("extractor", f);
        f("attention.filters".into(), &self.attention.filters);
        if let Some(cell) = &self.forward_cell {
            cell.visit("lstm.fwd", f);
        }
        if let Some(cell) = &self.backward_cell {
            cell.visit("lstm.bwd", f);
        }
        for (l, head) in self.heads.iter().enumerate() {
            f(format!("head.{l}.weight"), &head.weight);
            f(format!("head.{l}.bias"), &head.bias);
        }
    }

    /// Every parameter tensor, in [`visit`](Self::visit) order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.extractor.params_mut().collect();
        out.push(&mut self.attention.filters);
        for cell in [&mut self.forward_cell, &mut self.backward_cell].into_iter().flatten() {
            out.extend(cell.tensors_mut());
        }
        for head in &mut self.heads {
            out.push(&mut head.weight);
            out.push(&mut head.bias);
        }
        out
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.params_mut().into_iter().for_each(f);
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t)));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let e = &self.config.extractor;
        let expected = [e.input_size, e.input_size, e.input_channels];
        if image.shape() != expected {
            return Err(dim_err!(
                "image {:?} does not match model input {expected:?}",
                image.shape()
            ));
        }
        Ok(())
    }

    /// Records the full forward pass for one image on `g`.
    pub fn forward(&self, g: &mut Graph, image: &Tensor, trainable: bool) -> Result<ForwardVars> {
        self.check_image(image)?;
        let mut params = Vec::new();
        let x = g.constant(image.clone());
        let extractor = self.extractor.bind(g, trainable, &mut params);
        let filters = self.attention.bind(g, trainable, &mut params);
        let fwd = self.forward_cell.as_ref().map(|c| c.bind(g, trainable, &mut params));
        let bwd = self.backward_cell.as_ref().map(|c| c.bind(g, trainable, &mut params));
        let heads: Vec<_> = self.heads.iter().map(|h| h.bind(g, trainable, &mut params)).collect();

        let features = extractor.forward(g, &self.config.extractor, x)?;
        let (maps, vectors) = attend(g, features, filters)?;

        let order = &self.config.time_order;
        let sequence: Vec<Var> = order.iter().map(|&c| vectors[c]).collect();
        // head input per class
        let mut head_inputs = vec![None; self.classes()];
        match (fwd, bwd) {
            (Some(f), Some(b)) => {
                for (&class, (h, hb)) in order.iter().zip(bilstm_vars(g, &f, &b, &sequence)?) {
                    head_inputs[class] = Some(g.concat(h, hb, 0)?);
                }
            }
            (Some(f), None) => {
                for (&class, h) in order.iter().zip(f.run(g, sequence)?) {
                    head_inputs[class] = Some(h);
                }
            }
            _ => {
                for (class, v) in vectors.iter().enumerate() {
                    head_inputs[class] = Some(*v);
                }
            }
        }
        let probs = heads
            .iter()
            .zip(head_inputs)
            .map(|(&head, z)| head_var(g, head, z.expect("every class has a head input")))
            .collect::<Result<Vec<_>>>()?;
        let probabilities = g.stack(&probs)?;
        Ok(ForwardVars {
            maps,
            probabilities,
            params,
        })
    }

    /// Per-class probabilities `P_l`.
    pub fn predict(&self, image: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, image, false)?;
        Ok(g.value(out.probabilities).data().to_vec())
    }

    /// The `W×W×N` class attention stack for one image.
    pub fn attention_maps(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, image, false)?;
        Ok(g.value(out.maps).clone())
    }

    /// MSE loss for one example and its gradient for every parameter, in
    /// [`visit`](Self::visit) order. `weight` scales the loss (e.g. `1/batch`).
    pub fn loss_and_grads(&self, image: &Tensor, target: &[f64], weight: f64) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, image, true)?;
        let loss = mse_var(&mut g, out.probabilities, target)?;
        let value = g.value(loss).item();
        let scaled = g.scale(loss, weight)?;
        let mut grads = g.backward(scaled)?;
        let grads = collect_grads(&mut grads, &g, &out.params);
        Ok((value, grads))
    }
}

fn init_heads<R: Rng + ?Sized>(classes: usize, width: usize, rng: &mut R) -> Vec<HeadParams> {
    (0..classes).map(|_| HeadParams::init(width, rng)).collect()
}

fn collect_grads(grads: &mut Gradients, g: &Graph, params: &[Var]) -> Vec<Tensor> {
    params
        .iter()
        .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(g.value(v).shape())))
        .collect()
}

/// `mean((pred - target)²)` recorded on the graph.
pub fn mse_var(g: &mut Graph, pred: Var, target: &[f64]) -> Result<Var> {
    if g.value(pred).len() != target.len() {
        return Err(dim_err!(
            "prediction has {} classes, target {}",
            g.value(pred).len(),
            target.len()
        ));
    }
    let t = g.constant(Tensor::new(g.value(pred).shape(), target.to_vec())?);
    let diff = g.sub(pred, t)?;
    let sq = g.mul(diff, diff)?;
    g.mean(sq)
}
