//! Peephole LSTM over class-indexed time steps.
//!
//! ```text
//! c~ = tanh(W_cv v + W_ch h' + b_c)
//! i  = σ(W_iv v + W_ih h' + W_ic c' + b_i)
//! f  = σ(W_fv v + W_fh h' + W_fc c' + b_f)
//! c  = i ⊙ c~ + f ⊙ c'
//! o  = σ(W_ov v + W_oh h' + W_oc c + b_o)     // peeks at the new cell
//! h  = o ⊙ tanh(c)
//! ```
//! where `h'`, `c'` are the previous step's state. Peepholes are full
//! matrices, not diagonals.

use rand::Rng;

use crate::attention::ClassFeatureSet;
use crate::error::{dim_err, Result};
use crate::extractor::leaf;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Uniform init range for every recurrent weight and bias.
pub const LSTM_INIT_RANGE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct LstmCellParams {
    pub w_cv: Tensor,
    pub w_iv: Tensor,
    pub w_fv: Tensor,
    pub w_ov: Tensor,
    pub w_ch: Tensor,
    pub w_ih: Tensor,
    pub w_fh: Tensor,
    pub w_oh: Tensor,
    pub w_ic: Tensor,
    pub w_fc: Tensor,
    pub w_oc: Tensor,
    pub b_c: Tensor,
    pub b_i: Tensor,
    pub b_f: Tensor,
    pub b_o: Tensor,
}

const CELL_NAMES: [&str; 15] = [
    "w_cv", "w_iv", "w_fv", "w_ov", "w_ch", "w_ih", "w_fh", "w_oh", "w_ic", "w_fc", "w_oc", "b_c", "b_i", "b_f", "b_o",
];

impl LstmCellParams {
    /// Builds a cell with every entry drawn by `fill(shape)`.
    pub fn from_fn(hidden: usize, input: usize, mut fill: impl FnMut(&[usize]) -> Tensor) -> Self {
        let (hv, hh, b) = ([hidden, input], [hidden, hidden], [hidden]);
        LstmCellParams {
            w_cv: fill(&hv),
            w_iv: fill(&hv),
            w_fv: fill(&hv),
            w_ov: fill(&hv),
            w_ch: fill(&hh),
            w_ih: fill(&hh),
            w_fh: fill(&hh),
            w_oh: fill(&hh),
            w_ic: fill(&hh),
            w_fc: fill(&hh),
            w_oc: fill(&hh),
            b_c: fill(&b),
            b_i: fill(&b),
            b_f: fill(&b),
            b_o: fill(&b),
        }
    }

    pub fn zeros(hidden: usize, input: usize) -> Self {
        Self::from_fn(hidden, input, Tensor::zeros)
    }

    pub fn init<R: Rng + ?Sized>(hidden: usize, input: usize, rng: &mut R) -> Self {
        Self::from_fn(hidden, input, |s| Tensor::uniform(s, LSTM_INIT_RANGE, rng))
    }

    pub fn hidden(&self) -> usize {
        self.b_c.len()
    }

    pub fn input(&self) -> usize {
        self.w_cv.shape()[1]
    }

    fn tensors(&self) -> [&Tensor; 15] {
        [
            &self.w_cv, &self.w_iv, &self.w_fv, &self.w_ov, &self.w_ch, &self.w_ih, &self.w_fh, &self.w_oh, &self.w_ic,
            &self.w_fc, &self.w_oc, &self.b_c, &self.b_i, &self.b_f, &self.b_o,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 15] {
        [
            &mut self.w_cv,
            &mut self.w_iv,
            &mut self.w_fv,
            &mut self.w_ov,
            &mut self.w_ch,
            &mut self.w_ih,
            &mut self.w_fh,
            &mut self.w_oh,
            &mut self.w_ic,
            &mut self.w_fc,
            &mut self.w_oc,
            &mut self.b_c,
            &mut self.b_i,
            &mut self.b_f,
            &mut self.b_o,
        ]
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (name, t) in CELL_NAMES.iter().zip(self.tensors()) {
            f(format!("{prefix}.{name}"), t);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        for t in self.tensors_mut() {
            f(t);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, i) = (self.hidden(), self.input());
        for (name, t) in CELL_NAMES.iter().zip(self.tensors()) {
            let expected: &[usize] = match name.as_bytes() {
                [b'b', ..] => &[h],
                [.., b'v'] => &[h, i],
                _ => &[h, h],
            };
            if t.shape() != expected {
                return Err(dim_err!("{name} is {:?}, expected {expected:?}", t.shape()));
            }
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool, order: &mut Vec<Var>) -> BoundCell {
        let [w_cv, w_iv, w_fv, w_ov, w_ch, w_ih, w_fh, w_oh, w_ic, w_fc, w_oc, b_c, b_i, b_f, b_o] =
            self.tensors().map(|t| leaf(g, t, trainable, order));
        BoundCell {
            w_cv,
            w_iv,
            w_fv,
            w_ov,
            w_ch,
            w_ih,
            w_fh,
            w_oh,
            w_ic,
            w_fc,
            w_oc,
            b_c,
            b_i,
            b_f,
            b_o,
        }
    }
}

/// Cell parameters placed on a graph.
#[derive(Clone, Copy, Debug)]
pub struct BoundCell {
    w_cv: Var,
    w_iv: Var,
    w_fv: Var,
    w_ov: Var,
    w_ch: Var,
    w_ih: Var,
    w_fh: Var,
    w_oh: Var,
    w_ic: Var,
    w_fc: Var,
    w_oc: Var,
    b_c: Var,
    b_i: Var,
    b_f: Var,
    b_o: Var,
}

/// Recurrent state handles on a graph.
#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub c: Var,
    pub h: Var,
}

impl BoundCell {
    pub fn zero_state(&self, g: &mut Graph) -> StateVars {
        let hidden = g.value(self.b_c).len();
        StateVars {
            c: g.constant(Tensor::zeros(&[hidden])),
            h: g.constant(Tensor::zeros(&[hidden])),
        }
    }

    pub fn step(&self, g: &mut Graph, v: Var, prev: StateVars) -> Result<StateVars> {
        let candidate = {
            let a = g.matvec(self.w_cv, v)?;
            let b = g.matvec(self.w_ch, prev.h)?;
            let s = g.add(a, b)?;
            let s = g.add(s, self.b_c)?;
            g.tanh(s)?
        };
        let input_gate = self.gate(g, v, prev.h, prev.c, [self.w_iv, self.w_ih, self.w_ic, self.b_i])?;
        let forget_gate = self.gate(g, v, prev.h, prev.c, [self.w_fv, self.w_fh, self.w_fc, self.b_f])?;
        let keep = g.mul(forget_gate, prev.c)?;
        let write = g.mul(input_gate, candidate)?;
        let c = g.add(write, keep)?;
        let output_gate = self.gate(g, v, prev.h, c, [self.w_ov, self.w_oh, self.w_oc, self.b_o])?;
        let squashed = g.tanh(c)?;
        let h = g.mul(output_gate, squashed)?;
        Ok(StateVars { c, h })
    }

    /// `σ(W_v v + W_h h + W_c c + b)`.
    fn gate(&self, g: &mut Graph, v: Var, h: Var, c: Var, [wv, wh, wc, b]: [Var; 4]) -> Result<Var> {
        let a = g.matvec(wv, v)?;
        let r = g.matvec(wh, h)?;
        let p = g.matvec(wc, c)?;
        let s = g.add(a, r)?;
        let s = g.add(s, p)?;
        let s = g.add(s, b)?;
        g.sigmoid(s)
    }

    /// Runs the cell over `inputs` in order from a zero state and returns
    /// the hidden output of every step.
    pub fn run(&self, g: &mut Graph, inputs: impl IntoIterator<Item = Var>) -> Result<Vec<Var>> {
        let mut state = self.zero_state(g);
        inputs
            .into_iter()
            .map(|v| {
                state = self.step(g, v, state)?;
                Ok(state.h)
            })
            .collect()
    }
}

/// Forward and backward streams over the same class-indexed inputs. The
/// returned pair at index `l` is `(h_l, h'_l)`.
pub fn bilstm_vars(g: &mut Graph, fwd: &BoundCell, bwd: &BoundCell, inputs: &[Var]) -> Result<Vec<(Var, Var)>> {
    let forward = fwd.run(g, inputs.iter().copied())?;
    let mut backward = bwd.run(g, inputs.iter().rev().copied())?;
    backward.reverse();
    Ok(forward.into_iter().zip(backward).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub c: Tensor,
    pub h: Tensor,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            c: Tensor::zeros(&[hidden]),
            h: Tensor::zeros(&[hidden]),
        }
    }
}

/// One peephole LSTM step.
pub fn lstm_step(params: &LstmCellParams, v: &Tensor, prev: &LstmState) -> Result<LstmState> {
    params.validate()?;
    if v.shape() != [params.input()] {
        return Err(dim_err!(
            "input {:?} does not match cell input {}",
            v.shape(),
            params.input()
        ));
    }
    if prev.c.shape() != [params.hidden()] || prev.h.shape() != [params.hidden()] {
        return Err(dim_err!("state does not match hidden width {}", params.hidden()));
    }
    prev.c.ensure_finite("previous cell state")?;
    prev.h.ensure_finite("previous hidden state")?;
    let mut g = Graph::new();
    let cell = params.bind(&mut g, false, &mut Vec::new());
    let input = g.constant(v.clone());
    let state = StateVars {
        c: g.constant(prev.c.clone()),
        h: g.constant(prev.h.clone()),
    };
    let next = cell.step(&mut g, input, state)?;
    Ok(LstmState {
        c: g.value(next.c).clone(),
        h: g.value(next.h).clone(),
    })
}

/// Bidirectional run over `features`, both streams from zero states.
pub fn bilstm_run(
    fwd: &LstmCellParams,
    bwd: &LstmCellParams,
    features: &ClassFeatureSet,
) -> Result<Vec<(Tensor, Tensor)>> {
    fwd.validate()?;
    bwd.validate()?;
    if fwd.hidden() != bwd.hidden() || fwd.input() != bwd.input() {
        return Err(dim_err!("forward and backward cells differ in shape"));
    }
    if let Some(v) = features.vectors.iter().find(|v| v.shape() != [fwd.input()]) {
        return Err(dim_err!(
            "feature {:?} does not match cell input {}",
            v.shape(),
            fwd.input()
        ));
    }
    let mut g = Graph::new();
    let f = fwd.bind(&mut g, false, &mut Vec::new());
    let b = bwd.bind(&mut g, false, &mut Vec::new());
    let inputs: Vec<Var> = features.vectors.iter().map(|v| g.constant(v.clone())).collect();
    let pairs = bilstm_vars(&mut g, &f, &b, &inputs)?;
    Ok(pairs
        .into_iter()
        .map(|(h, hb)| (g.value(h).clone(), g.value(hb).clone()))
        .collect())
}

/// Single-unit sigmoid head for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl HeadParams {
    pub fn zeros(width: usize) -> Self {
        HeadParams {
            weight: Tensor::zeros(&[width]),
            bias: Tensor::scalar(0.0),
        }
    }

    pub fn init<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        HeadParams {
            weight: Tensor::uniform(&[width], crate::extractor::glorot_bound(width, 1), rng),
            bias: Tensor::scalar(0.0),
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool, order: &mut Vec<Var>) -> (Var, Var) {
        let w = leaf(g, &self.weight, trainable, order);
        let b = leaf(g, &self.bias, trainable, order);
        (w, b)
    }
}

/// `σ(w · z + b)` on a graph.
pub fn head_var(g: &mut Graph, (w, b): (Var, Var), z: Var) -> Result<Var> {
    let s = g.dot(w, z)?;
    let s = g.add(s, b)?;
    g.sigmoid(s)
}

/// `P_l = σ(w_l · [h_l, h'_l] + b_l)`.
pub fn class_head(h: &Tensor, h_back: &Tensor, head: &HeadParams) -> Result<f64> {
    let z = crate::ops::concat(h, h_back, 0)?;
    if z.len() != head.weight.len() {
        return Err(dim_err!("head expects {} inputs, got {}", head.weight.len(), z.len()));
    }
    let s: f64 = z.data().iter().zip(head.weight.data()).map(|(a, b)| a * b).sum();
    Ok(crate::ops::sigmoid(s + head.bias.item()))
}

/// Both cells and one head per class, all deterministic in `rng`.
pub fn init_bilstm<R: Rng + ?Sized>(
    hidden: usize,
    input: usize,
    classes: usize,
    rng: &mut R,
) -> (LstmCellParams, LstmCellParams, Vec<HeadParams>) {
    let fwd = LstmCellParams::init(hidden, input, rng);
    let bwd = LstmCellParams::init(hidden, input, rng);
    let heads = (0..classes).map(|_| HeadParams::init(2 * hidden, rng)).collect();
    (fwd, bwd, heads)
}
