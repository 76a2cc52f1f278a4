//! Forward and backward kernels. Image tensors are channels-last
//! (`H×W×C`) and convolution kernels are `kh×kw×C_in×C_out`.
//!
//! These operate on plain tensors; [`crate::graph::Graph`] records them
//! on a tape and calls the `*_backward` halves.

use crate::error::{dim_err, Result};
use crate::tensor::{ConvSpec, Tensor};

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(dim_err!("{what} must be rank 3 (H×W×C), got {s:?}")),
    }
}

fn kernel_dims(k: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *k.shape() {
        [kh, kw, ci, co] => Ok((kh, kw, ci, co)),
        ref s => Err(dim_err!("conv kernel must be rank 4, got {s:?}")),
    }
}

/// Validated geometry shared by the conv forward and backward passes.
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    ho: usize,
    wo: usize,
    spec: ConvSpec,
}

impl ConvGeom {
    fn new(input: &Tensor, kernel: &Tensor, spec: ConvSpec) -> Result<Self> {
        let (h, w, cin) = dims3(input, "conv input")?;
        let (kh, kw, kcin, cout) = kernel_dims(kernel)?;
        if (kh, kw) != (spec.kernel_h, spec.kernel_w) {
            return Err(dim_err!(
                "kernel is {kh}x{kw} but spec says {}x{}",
                spec.kernel_h,
                spec.kernel_w
            ));
        }
        if kcin != cin {
            return Err(dim_err!("kernel expects {kcin} input channels, input has {cin}"));
        }
        let (ho, wo) = spec.output_dims(h, w)?;
        Ok(ConvGeom {
            h,
            w,
            cin,
            cout,
            ho,
            wo,
            spec,
        })
    }

    /// Calls `f(out_pixel, in_pixel, tap)` for every in-bounds
    /// (output position, kernel tap) pair.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let s = self.spec;
        let pad = s.padding as isize;
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let out_px = oy * self.wo + ox;
                for ky in 0..s.kernel_h {
                    let iy = (oy * s.stride + ky * s.dilation) as isize - pad;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..s.kernel_w {
                        let ix = (ox * s.stride + kx * s.dilation) as isize - pad;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        f(out_px, iy as usize * self.w + ix as usize, ky * s.kernel_w + kx);
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `input` with each output-channel kernel.
pub fn conv2d(input: &Tensor, kernel: &Tensor, spec: ConvSpec) -> Result<Tensor> {
    let g = ConvGeom::new(input, kernel, spec)?;
    input.ensure_finite("conv2d input")?;
    let (cin, cout) = (g.cin, g.cout);
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; g.ho * g.wo * cout];
    g.for_each_tap(|o, i, tap| {
        let acc = &mut out[o * cout..(o + 1) * cout];
        let xs = &x[i * cin..(i + 1) * cin];
        let ks = &k[tap * cin * cout..(tap + 1) * cin * cout];
        for (ci, &a) in xs.iter().enumerate() {
            let row = &ks[ci * cout..(ci + 1) * cout];
            for (acc, &kv) in acc.iter_mut().zip(row) {
                *acc += a * kv;
            }
        }
    });
    Tensor::new(&[g.ho, g.wo, cout], out)
}

/// Gradients of [`conv2d`] w.r.t. input and kernel.
pub fn conv2d_backward(input: &Tensor, kernel: &Tensor, spec: ConvSpec, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let g = ConvGeom::new(input, kernel, spec)?;
    let (cin, cout) = (g.cin, g.cout);
    let x = input.data();
    let k = kernel.data();
    let go = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    g.for_each_tap(|o, i, tap| {
        let gos = &go[o * cout..(o + 1) * cout];
        let xs = &x[i * cin..(i + 1) * cin];
        let base = tap * cin * cout;
        for ci in 0..cin {
            let row = base + ci * cout..base + (ci + 1) * cout;
            let mut dot = 0.0;
            for (&kv, &gv) in k[row.clone()].iter().zip(gos) {
                dot += kv * gv;
            }
            gx[i * cin + ci] += dot;
            let a = xs[ci];
            for (gkv, &gv) in gk[row].iter_mut().zip(gos) {
                *gkv += a * gv;
            }
        }
    });
    Ok((Tensor::new(input.shape(), gx)?, Tensor::new(kernel.shape(), gk)?))
}

/// Adds `bias[c]` to every pixel of channel `c`.
pub fn add_channel_bias(input: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, _, c) = dims3(input, "biased input")?;
    if bias.shape() != [c] {
        return Err(dim_err!("bias {:?} does not match {c} channels", bias.shape()));
    }
    let mut out = input.clone();
    for px in out.data_mut().chunks_exact_mut(c) {
        for (v, b) in px.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(out)
}

pub fn channel_bias_backward(grad_out: &Tensor, channels: usize) -> Tensor {
    let mut gb = vec![0.0; channels];
    for px in grad_out.data().chunks_exact(channels) {
        for (g, v) in gb.iter_mut().zip(px) {
            *g += v;
        }
    }
    Tensor::vector(gb)
}

/// Max pooling without padding. Returns the pooled tensor and, per output
/// element, the flat input index that won (first occurrence on ties).
pub fn maxpool2d(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (h, w, c) = dims3(input, "pool input")?;
    if window == 0 || stride == 0 {
        return Err(dim_err!("pool window and stride must be positive"));
    }
    if window > h || window > w {
        return Err(dim_err!("pool window {window} exceeds input {h}x{w}"));
    }
    let (ho, wo) = ((h - window) / stride + 1, (w - window) / stride + 1);
    let x = input.data();
    let mut out = Vec::with_capacity(ho * wo * c);
    let mut argmax = Vec::with_capacity(ho * wo * c);
    for oy in 0..ho {
        for ox in 0..wo {
            for ch in 0..c {
                let mut best = usize::MAX;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = ((oy * stride + dy) * w + ox * stride + dx) * c + ch;
                        if best == usize::MAX || x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(&[ho, wo, c], out)?, argmax))
}

pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut g = Tensor::zeros(input_shape);
    let gd = g.data_mut();
    for (&idx, &v) in argmax.iter().zip(grad_out.data()) {
        gd[idx] += v;
    }
    g
}

/// `weight · input` for `weight: [out×in]`, `input: [in]`.
pub fn matvec(weight: &Tensor, input: &Tensor) -> Result<Tensor> {
    let (rows, cols) = match *weight.shape() {
        [r, c] => (r, c),
        ref s => return Err(dim_err!("weight must be a matrix, got {s:?}")),
    };
    if input.len() != cols || input.rank() != 1 {
        return Err(dim_err!(
            "weight {rows}x{cols} cannot multiply input {:?}",
            input.shape()
        ));
    }
    let x = input.data();
    let out = weight
        .data()
        .chunks_exact(cols)
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect();
    Tensor::new(&[rows], out)
}

pub fn matvec_backward(weight: &Tensor, input: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor) {
    let cols = input.len();
    let x = input.data();
    let mut gw = vec![0.0; weight.len()];
    let mut gx = vec![0.0; cols];
    for ((row, grow), &g) in weight
        .data()
        .chunks_exact(cols)
        .zip(gw.chunks_exact_mut(cols))
        .zip(grad_out.data())
    {
        for j in 0..cols {
            grow[j] = g * x[j];
            gx[j] += g * row[j];
        }
    }
    (Tensor::new(weight.shape(), gw).unwrap(), Tensor::vector(gx))
}

/// `weight · input + bias`.
pub fn affine(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut out = matvec(weight, input)?;
    if bias.shape() != out.shape() {
        return Err(dim_err!(
            "bias {:?} does not match output {:?}",
            bias.shape(),
            out.shape()
        ));
    }
    out.add_assign(bias);
    Ok(out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Splits shapes around `axis` into (outer count, inner block length).
fn concat_blocks(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis..].iter().product())
}

pub fn concat(a: &Tensor, b: &Tensor, axis: usize) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != sb.len() || axis >= sa.len() {
        return Err(dim_err!("cannot concat {sa:?} and {sb:?} along axis {axis}"));
    }
    if sa.iter().zip(sb).enumerate().any(|(i, (x, y))| i != axis && x != y) {
        return Err(dim_err!("non-axis extents differ: {sa:?} vs {sb:?} (axis {axis})"));
    }
    let (outer, ia) = concat_blocks(sa, axis);
    let (_, ib) = concat_blocks(sb, axis);
    let mut data = Vec::with_capacity(a.len() + b.len());
    for o in 0..outer {
        data.extend_from_slice(&a.data()[o * ia..(o + 1) * ia]);
        data.extend_from_slice(&b.data()[o * ib..(o + 1) * ib]);
    }
    let mut shape = sa.to_vec();
    shape[axis] += sb[axis];
    Tensor::new(&shape, data)
}

pub fn concat_backward(a_shape: &[usize], b_shape: &[usize], axis: usize, grad_out: &Tensor) -> (Tensor, Tensor) {
    let (outer, ia) = concat_blocks(a_shape, axis);
    let (_, ib) = concat_blocks(b_shape, axis);
    let g = grad_out.data();
    let mut ga = Vec::with_capacity(outer * ia);
    let mut gb = Vec::with_capacity(outer * ib);
    for o in 0..outer {
        let base = o * (ia + ib);
        ga.extend_from_slice(&g[base..base + ia]);
        gb.extend_from_slice(&g[base + ia..base + ia + ib]);
    }
    (Tensor::new(a_shape, ga).unwrap(), Tensor::new(b_shape, gb).unwrap())
}

/// Channel `index` of an `H×W×C` tensor, flattened row-major to `[H·W]`.
pub fn channel(input: &Tensor, index: usize) -> Result<Tensor> {
    let (h, w, c) = dims3(input, "channel source")?;
    if index >= c {
        return Err(dim_err!("channel {index} out of range for {c} channels"));
    }
    let data = input.data().iter().skip(index).step_by(c).copied().collect();
    Tensor::new(&[h * w], data)
}

pub fn channel_backward(input_shape: &[usize], index: usize, grad_out: &Tensor) -> Tensor {
    let c = input_shape[2];
    let mut g = Tensor::zeros(input_shape);
    for (px, &v) in g.data_mut().chunks_exact_mut(c).zip(grad_out.data()) {
        px[index] = v;
    }
    g
}
