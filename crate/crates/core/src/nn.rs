//! Fixed-architecture layers built on the tape: convolution, GRU, dropout.

use rand::Rng as _;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{matmul_raw, transpose_raw, Tensor};

/// Glorot-uniform initialization, `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Glorot init for a `rows×cols` matrix acting on `cols`-vectors.
pub fn glorot_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    glorot(&[rows, cols], cols, rows, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn infer(input: &[usize], kernels: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 3 || kernels.len() != 4 || kernels[1] != input[0] || kernels[2] != kernels[3] {
            return Err(Error::shape("conv2d", input, kernels));
        }
        let k = kernels[2];
        let out = |n: usize| -> Result<usize> {
            let span = n + 2 * pad;
            if stride == 0 || span < k || (span - k) % stride != 0 {
                return Err(Error::Config(format!(
                    "conv2d: extent {n} with kernel {k}, stride {stride}, pad {pad} gives a non-integral output size"
                )));
            }
            Ok((span - k) / stride + 1)
        };
        Ok(ConvGeometry {
            channels: input[0],
            in_h: input[1],
            in_w: input[2],
            filters: kernels[0],
            kernel: k,
            stride,
            pad,
            out_h: out(input[1])?,
            out_w: out(input[2])?,
        })
    }

    /// Input rows (inclusive range) that output row `r` reads, clipped to the image.
    pub fn input_span(&self, r: usize, extent: usize) -> (usize, usize) {
        let lo = (r * self.stride) as isize - self.pad as isize;
        let hi = lo + self.kernel as isize - 1;
        (lo.max(0) as usize, (hi.min(extent as isize - 1)) as usize)
    }

    /// Input-plane offset read by output `(oy, ox)` at tap `(ky, kx)`; `None` inside the padding.
    #[inline]
    fn src(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.in_h as isize || x >= self.in_w as isize {
            None
        } else {
            Some(y as usize * self.in_w + x as usize)
        }
    }
}

/// `[channels·k·k × out_h·out_w]` patch matrix; padding reads as zero.
fn im2col(g: &ConvGeometry, input: &[f64]) -> Vec<f64> {
    let plane = g.out_h * g.out_w;
    let in_plane = g.in_h * g.in_w;
    let mut cols = vec![0.0; g.channels * g.kernel * g.kernel * plane];
    for c in 0..g.channels {
        let src = &input[c * in_plane..(c + 1) * in_plane];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        if let Some(s) = g.src(oy, ox, ky, kx) {
                            dst[oy * g.out_w + ox] = src[s];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(g: &ConvGeometry, cols: &[f64]) -> Vec<f64> {
    let plane = g.out_h * g.out_w;
    let in_plane = g.in_h * g.in_w;
    let mut out = vec![0.0; g.channels * in_plane];
    for c in 0..g.channels {
        let dst = &mut out[c * in_plane..(c + 1) * in_plane];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        if let Some(s) = g.src(oy, ox, ky, kx) {
                            dst[s] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_forward(g: &ConvGeometry, input: &[f64], kernels: &[f64], bias: &[f64]) -> Vec<f64> {
    let plane = g.out_h * g.out_w;
    let ckk = g.channels * g.kernel * g.kernel;
    let mut out = matmul_raw(kernels, &im2col(g, input), g.filters, ckk, plane);
    for (f, dst) in out.chunks_mut(plane).enumerate() {
        dst.iter_mut().for_each(|v| *v += bias[f]);
    }
    out
}

/// Returns `(d input, d kernels, d bias)`.
pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    kernels: &[f64],
    grad: &[f64],
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let plane = g.out_h * g.out_w;
    let ckk = g.channels * g.kernel * g.kernel;
    let cols = im2col(g, input);
    let gk = matmul_raw(grad, &transpose_raw(&cols, ckk, plane), g.filters, plane, ckk);
    let gb = grad.chunks(plane).map(|c| c.iter().sum()).collect();
    let gi = need_input.then(|| {
        let gcols = matmul_raw(&transpose_raw(kernels, g.filters, ckk), grad, ckk, g.filters, plane);
        col2im(g, &gcols)
    });
    (gi, gk, gb)
}

/// One convolution layer: kernels, bias and geometry.
#[derive(Clone, Copy, Debug)]
pub struct ConvLayer {
    pub kernels: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        let shape = [out_ch, in_ch, kernel, kernel];
        let w = glorot(&shape, in_ch * kernel * kernel, out_ch * kernel * kernel, rng);
        ConvLayer {
            kernels: store.insert(format!("{prefix}.kernels"), w),
            bias: store.insert(format!("{prefix}.bias"), Tensor::zeros(&[out_ch])),
            stride,
            pad,
        }
    }

    pub fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, x: Var) -> Result<Var> {
        let k = tape.param(store, self.kernels);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, k, b, self.stride, self.pad)
    }

    pub fn kernel_size(&self, store: &ParamStore) -> usize {
        store.get(self.kernels).shape()[2]
    }
}

/// Single-layer GRU cell parameters.
///
/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `n = tanh(W_n x + b_n + r ⊙ (U_n h))`, `h' = (1 - z) ⊙ h + z ⊙ n`.
#[derive(Clone, Copy, Debug)]
pub struct Gru {
    pub w: [ParamId; 3],
    pub u: [ParamId; 3],
    pub b: [ParamId; 3],
    pub d_in: usize,
    pub d_h: usize,
}

impl Gru {
    pub fn register(store: &mut ParamStore, prefix: &str, d_in: usize, d_h: usize, rng: &mut Rng) -> Self {
        let gates = ["z", "r", "n"];
        let w = gates.map(|g| store.insert(format!("{prefix}.w_{g}"), glorot_matrix(d_h, d_in, rng)));
        let u = gates.map(|g| store.insert(format!("{prefix}.u_{g}"), glorot_matrix(d_h, d_h, rng)));
        let b = gates.map(|g| store.insert(format!("{prefix}.b_{g}"), Tensor::zeros(&[d_h])));
        Gru { w, u, b, d_in, d_h }
    }

    pub fn step<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, x: Var, h: Var) -> Result<Var> {
        if tape.shape(x) != [self.d_in] || tape.shape(h) != [self.d_h] {
            return Err(Error::shape("gru_step", tape.shape(x), tape.shape(h)));
        }
        let pre = |tape: &mut Tape<'p>, g: usize, with_h: bool| -> Result<(Var, Var)> {
            let w = tape.param(store, self.w[g]);
            let u = tape.param(store, self.u[g]);
            let b = tape.param(store, self.b[g]);
            let wx = tape.matmul(w, x)?;
            let wx = tape.add(wx, b)?;
            let uh = tape.matmul(u, h)?;
            if with_h {
                Ok((tape.add(wx, uh)?, uh))
            } else {
                Ok((wx, uh))
            }
        };
        let (z_pre, _) = pre(tape, 0, true)?;
        let (r_pre, _) = pre(tape, 1, true)?;
        let (wx_n, uh_n) = pre(tape, 2, false)?;
        let z = tape.sigmoid(z_pre);
        let r = tape.sigmoid(r_pre);
        let gated = tape.hadamard(r, uh_n)?;
        let n_pre = tape.add(wx_n, gated)?;
        let n = tape.tanh(n_pre);
        let one_minus_z = tape.affine(z, -1.0, 1.0);
        let keep = tape.hadamard(one_minus_z, h)?;
        let write = tape.hadamard(z, n)?;
        tape.add(keep, write)
    }

    /// Runs the cell over `inputs` from a zero state and returns the last hidden state.
    pub fn encode<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, inputs: &[Var]) -> Result<Var> {
        let mut h = tape.constant(Tensor::zeros(&[self.d_h]));
        for &x in inputs {
            h = self.step(tape, store, x, h)?;
        }
        Ok(h)
    }
}

/// Inverted-dropout mask: each entry is `0` with probability `p`, else `1/(1-p)`.
pub fn dropout_mask(len: usize, p: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability {p} not in [0, 1)")));
    }
    let keep = 1.0 / (1.0 - p);
    Ok((0..len)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect())
}

/// Inverted dropout; identity when `training` is false or `p == 0`.
pub fn dropout(tape: &mut Tape<'_>, x: Var, p: f64, rng: &mut Rng, training: bool) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability {p} not in [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok(x);
    }
    let mask = dropout_mask(tape.value(x).len(), p, rng)?;
    tape.apply_mask(x, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn conv_scaling_case() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::ones(&[1, 3, 3]));
        let k = tape.input(Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap());
        let b = tape.input(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_ramp_average() {
        let ramp: Vec<f64> = (0..16).map(f64::from).collect();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(&[1, 4, 4], ramp.clone()).unwrap());
        let k = tape.input(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0));
        let b = tape.input(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        // sliding-window sums, computed independently
        let mut expect = vec![];
        for oy in 0..2 {
            for ox in 0..2 {
                let mut s = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        s += ramp[(oy + dy) * 4 + ox + dx];
                    }
                }
                expect.push(s / 9.0);
            }
        }
        assert_eq!(expect, vec![5.0, 6.0, 9.0, 10.0]);
        for (a, b) in tape.value(y).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_non_integral_output_is_config_error() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::ones(&[1, 4, 4]));
        let k = tape.input(Tensor::ones(&[1, 1, 3, 3]));
        let b = tape.input(Tensor::zeros(&[1]));
        assert!(matches!(tape.conv2d(x, k, b, 2, 0), Err(Error::Config(_))));
    }

    #[test]
    fn gru_zero_weights_halves_state() {
        let mut store = ParamStore::new();
        let gru = Gru::register(&mut store, "gru", 3, 4, &mut seeded(1));
        for v in store.values_mut() {
            v.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![0.3, -0.2, 0.9]));
        let h = tape.input(Tensor::vector(vec![1.0, -2.0, 0.5, 4.0]));
        let h1 = gru.step(&mut tape, &store, x, h).unwrap();
        assert_eq!(tape.value(h1).data(), &[0.5, -1.0, 0.25, 2.0]);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = seeded(3);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert_eq!(dropout(&mut tape, x, 0.0, &mut rng, true).unwrap(), x);
        assert_eq!(dropout(&mut tape, x, 0.9, &mut rng, false).unwrap(), x);
        assert!(dropout(&mut tape, x, 1.0, &mut rng, true).is_err());
    }
}
