//! Valid (no padding, stride 1) cubic 3-D convolution with forward and
//! backward passes.
//!
//! Two interchangeable evaluation strategies exist:
//!
//! * [`ConvStrategy::Direct`] is the obvious seven-loop definition. It is
//!   slow and kept as an independent reference; tests assert the two
//!   strategies agree to floating-point tolerance.
//! * [`ConvStrategy::Gemm`] lowers each output z-slab to a column matrix
//!   (`C_in * k^3` rows, one column per output (y, x)) and multiplies it with
//!   the weight matrix. Working slab-by-slab keeps the column buffer small
//!   (a few MB) instead of materialising the whole volume's columns at once.
//!
//! Both strategies parallelise only in ways that cannot change results:
//! output regions written by different tasks are disjoint, and gradient
//! accumulations are reduced in a fixed order, so the outcome is identical
//! for any worker count.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape5, VolumeTensor};
use rayon::prelude::*;

/// One bank of cubic kernels plus per-output-channel bias, and optionally
/// per-output-channel PReLU slopes (stored here so a layer's parameters live
/// in one place; the activation itself is applied by the caller).
///
/// Weight layout: `[out_channel][in_channel][dz][dy][dx]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernelBank<T> {
    pub out_channels: usize,
    pub in_channels: usize,
    /// Cubic kernel edge length (3 for the conv stage, 1 for the
    /// fully-convolutional stage and the classifier).
    pub kernel: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub prelu: Option<Vec<T>>,
}

impl<T: Scalar> ConvKernelBank<T> {
    pub fn zeros(out_channels: usize, in_channels: usize, kernel: usize, with_prelu: bool) -> Self {
        ConvKernelBank {
            out_channels,
            in_channels,
            kernel,
            weights: vec![T::zero(); out_channels * in_channels * kernel * kernel * kernel],
            bias: vec![T::zero(); out_channels],
            prelu: if with_prelu { Some(vec![T::zero(); out_channels]) } else { None },
        }
    }

    /// Multiplicative weight count (kernel taps only, no bias or slopes).
    pub fn weight_count(&self) -> usize {
        self.weights.len()
    }

    #[inline]
    pub fn w_index(&self, o: usize, c: usize, dz: usize, dy: usize, dx: usize) -> usize {
        let k = self.kernel;
        (((o * self.in_channels + c) * k + dz) * k + dy) * k + dx
    }

    /// Taps per output channel (`C_in * k^3`), which is also the fan-in used
    /// for initialisation and the GEMM inner dimension.
    pub fn taps_per_output(&self) -> usize {
        self.in_channels * self.kernel * self.kernel * self.kernel
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ConvStrategy {
    /// Seven-loop reference implementation.
    Direct,
    /// Slab-wise column lowering + GEMM.
    #[default]
    Gemm,
}

/// Gradients from one convolution backward pass.
#[derive(Clone, Debug)]
pub struct ConvGradients<T> {
    pub input: VolumeTensor<T>,
    /// Same layout as [`ConvKernelBank::weights`].
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

fn out_shape<T: Scalar>(input: &VolumeTensor<T>, bank: &ConvKernelBank<T>) -> Result<Shape5> {
    let s = input.shape();
    if s.channels != bank.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "conv expects {} input channels, tensor has {}",
            bank.in_channels, s.channels
        )));
    }
    let k = bank.kernel;
    if k == 0 || k % 2 == 0 {
        return Err(Error::InvalidArchitecture(format!("kernel edge must be odd and positive, got {k}")));
    }
    if s.depth < k || s.height < k || s.width < k {
        return Err(Error::ShapeMismatch(format!(
            "input {} too small for valid {k}^3 convolution",
            s
        )));
    }
    Ok(Shape5::new(s.batch, bank.out_channels, s.depth - k + 1, s.height - k + 1, s.width - k + 1))
}

/// Valid convolution: `out[n,o,z,y,x] = bias[o] + sum_{c,dz,dy,dx}
/// w[o,c,dz,dy,dx] * in[n,c,z+dz,y+dy,x+dx]`.
pub fn conv3d_valid<T: Scalar>(
    input: &VolumeTensor<T>,
    bank: &ConvKernelBank<T>,
    strategy: ConvStrategy,
) -> Result<VolumeTensor<T>> {
    let os = out_shape(input, bank)?;
    match strategy {
        ConvStrategy::Direct => Ok(forward_direct(input, bank, os)),
        ConvStrategy::Gemm => Ok(forward_gemm(input, bank, os)),
    }
}

/// Gradients of a scalar loss w.r.t. input, weights and bias, given the
/// gradient w.r.t. the convolution output.
pub fn conv3d_valid_backward<T: Scalar>(
    input: &VolumeTensor<T>,
    bank: &ConvKernelBank<T>,
    grad_out: &VolumeTensor<T>,
    strategy: ConvStrategy,
) -> Result<ConvGradients<T>> {
    let os = out_shape(input, bank)?;
    if grad_out.shape() != os {
        return Err(Error::ShapeMismatch(format!(
            "conv backward: output gradient is {} but forward output is {}",
            grad_out.shape(),
            os
        )));
    }
    match strategy {
        ConvStrategy::Direct => Ok(backward_direct(input, bank, grad_out)),
        ConvStrategy::Gemm => Ok(backward_gemm(input, bank, grad_out)),
    }
}

// ---------------------------------------------------------------- direct

fn forward_direct<T: Scalar>(input: &VolumeTensor<T>, bank: &ConvKernelBank<T>, os: Shape5) -> VolumeTensor<T> {
    let s = input.shape();
    let k = bank.kernel;
    let mut out = VolumeTensor::zeros(os);
    for n in 0..os.batch {
        for o in 0..os.channels {
            for z in 0..os.depth {
                for y in 0..os.height {
                    for x in 0..os.width {
                        let mut acc = bank.bias[o];
                        for c in 0..s.channels {
                            for dz in 0..k {
                                for dy in 0..k {
                                    for dx in 0..k {
                                        acc += bank.weights[bank.w_index(o, c, dz, dy, dx)]
                                            * input.at(n, c, z + dz, y + dy, x + dx);
                                    }
                                }
                            }
                        }
                        *out.at_mut(n, o, z, y, x) = acc;
                    }
                }
            }
        }
    }
    out
}

fn backward_direct<T: Scalar>(
    input: &VolumeTensor<T>,
    bank: &ConvKernelBank<T>,
    grad_out: &VolumeTensor<T>,
) -> ConvGradients<T> {
    let s = input.shape();
    let os = grad_out.shape();
    let k = bank.kernel;
    let mut d_in = VolumeTensor::zeros(s);
    let mut d_w = vec![T::zero(); bank.weights.len()];
    let mut d_b = vec![T::zero(); bank.out_channels];
    for n in 0..os.batch {
        for o in 0..os.channels {
            for z in 0..os.depth {
                for y in 0..os.height {
                    for x in 0..os.width {
                        let g = grad_out.at(n, o, z, y, x);
                        d_b[o] += g;
                        for c in 0..s.channels {
                            for dz in 0..k {
                                for dy in 0..k {
                                    for dx in 0..k {
                                        d_w[bank.w_index(o, c, dz, dy, dx)] += g * input.at(n, c, z + dz, y + dy, x + dx);
                                        *d_in.at_mut(n, c, z + dz, y + dy, x + dx) +=
                                            g * bank.weights[bank.w_index(o, c, dz, dy, dx)];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    ConvGradients { input: d_in, weights: d_w, bias: d_b }
}

// ---------------------------------------------------------------- gemm

/// Fill the column matrix for one output z-slab of one item.
///
/// `col` is `K x Q` row-major with `K = C_in * k^3` and `Q = H_out * W_out`;
/// row `((c*k + dz)*k + dy)*k + dx`, column `y*W_out + x` holds
/// `in[c][z+dz][y+dy][x+dx]`. Copies run along x so each transfer is one
/// contiguous slice.
fn fill_columns<T: Scalar>(
    item: &[T],
    s: Shape5,
    k: usize,
    z: usize,
    h_out: usize,
    w_out: usize,
    col: &mut [T],
) {
    let q = h_out * w_out;
    let plane = s.height * s.width;
    let mut row = 0;
    for c in 0..s.channels {
        let chan = &item[c * s.depth * plane..(c + 1) * s.depth * plane];
        for dz in 0..k {
            let zplane = &chan[(z + dz) * plane..(z + dz + 1) * plane];
            for dy in 0..k {
                for dx in 0..k {
                    let dst_base = row * q;
                    for y in 0..h_out {
                        let src = (y + dy) * s.width + dx;
                        col[dst_base + y * w_out..dst_base + (y + 1) * w_out]
                            .copy_from_slice(&zplane[src..src + w_out]);
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-add the inverse of [`fill_columns`]: `d_item[...] += dcol[...]`.
fn scatter_columns<T: Scalar>(
    d_item: &mut [T],
    s: Shape5,
    k: usize,
    z: usize,
    h_out: usize,
    w_out: usize,
    dcol: &[T],
) {
    let q = h_out * w_out;
    let plane = s.height * s.width;
    let mut row = 0;
    for c in 0..s.channels {
        let chan_base = c * s.depth * plane;
        for dz in 0..k {
            let zbase = chan_base + (z + dz) * plane;
            for dy in 0..k {
                for dx in 0..k {
                    let src_base = row * q;
                    for y in 0..h_out {
                        let dst = zbase + (y + dy) * s.width + dx;
                        let src = &dcol[src_base + y * w_out..src_base + (y + 1) * w_out];
                        let out = &mut d_item[dst..dst + w_out];
                        for (a, b) in out.iter_mut().zip(src) {
                            *a += *b;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn forward_gemm<T: Scalar>(input: &VolumeTensor<T>, bank: &ConvKernelBank<T>, os: Shape5) -> VolumeTensor<T> {
    let s = input.shape();
    let k = bank.kernel;

    if k == 1 {
        // Pointwise: one GEMM per item over the whole volume, no columns.
        let slabs: Vec<Vec<T>> = (0..s.batch)
            .into_par_iter()
            .map(|n| {
                let v = s.voxels();
                let mut out = vec![T::zero(); bank.out_channels * v];
                for (o, row) in out.chunks_mut(v).enumerate() {
                    row.fill(bank.bias[o]);
                }
                T::gemm_nn(bank.out_channels, s.channels, v, T::one(), &bank.weights, input.item(n), T::one(), &mut out);
                out
            })
            .collect();
        let mut data = Vec::with_capacity(os.len());
        for slab in slabs {
            data.extend_from_slice(&slab);
        }
        return VolumeTensor::from_vec(os, data).expect("pointwise output length");
    }

    let q = os.height * os.width;
    let kk = bank.taps_per_output();
    // One task per (item, z-slab); tasks write disjoint output regions and
    // are collected in order, so parallelism cannot change the result.
    let tasks: Vec<(usize, usize)> = (0..s.batch)
        .flat_map(|n| (0..os.depth).map(move |z| (n, z)))
        .collect();
    let slabs: Vec<Vec<T>> = tasks
        .par_iter()
        .map(|&(n, z)| {
            let mut col = vec![T::zero(); kk * q];
            fill_columns(input.item(n), s, k, z, os.height, os.width, &mut col);
            let mut out = vec![T::zero(); bank.out_channels * q];
            for (o, row) in out.chunks_mut(q).enumerate() {
                row.fill(bank.bias[o]);
            }
            T::gemm_nn(bank.out_channels, kk, q, T::one(), &bank.weights, &col, T::one(), &mut out);
            out
        })
        .collect();

    let mut out = VolumeTensor::zeros(os);
    for (&(n, z), slab) in tasks.iter().zip(&slabs) {
        // slab rows are per out-channel; interleave into [n][o][z][..]
        for o in 0..os.channels {
            let dst = os.index(n, o, z, 0, 0);
            out.data_mut()[dst..dst + q].copy_from_slice(&slab[o * q..(o + 1) * q]);
        }
    }
    out
}

fn backward_gemm<T: Scalar>(
    input: &VolumeTensor<T>,
    bank: &ConvKernelBank<T>,
    grad_out: &VolumeTensor<T>,
) -> ConvGradients<T> {
    let s = input.shape();
    let os = grad_out.shape();
    let k = bank.kernel;

    if k == 1 {
        let per_item: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..s.batch)
            .into_par_iter()
            .map(|n| {
                let v = s.voxels();
                let g = grad_out.item(n);
                // d_w = g (C_out x V) . in^T (V x C_in)
                let mut d_w = vec![T::zero(); bank.weights.len()];
                T::gemm_nt(bank.out_channels, v, bank.in_channels, T::one(), g, input.item(n), T::zero(), &mut d_w);
                // d_in = W^T (C_in x C_out) . g
                let mut d_in = vec![T::zero(); bank.in_channels * v];
                T::gemm_tn(bank.in_channels, bank.out_channels, v, T::one(), &bank.weights, g, T::zero(), &mut d_in);
                let d_b: Vec<T> = (0..bank.out_channels).map(|o| g[o * v..(o + 1) * v].iter().copied().sum()).collect();
                (d_in, d_w, d_b)
            })
            .collect();
        return reduce_item_grads(s, bank, per_item);
    }

    let q = os.height * os.width;
    let kk = bank.taps_per_output();
    // Parallel over items only; within an item, slabs run sequentially so the
    // per-item d_w accumulation order is fixed. Per-item partials are then
    // reduced in item order.
    let per_item: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..s.batch)
        .into_par_iter()
        .map(|n| {
            let item = input.item(n);
            let mut d_item = vec![T::zero(); item.len()];
            let mut d_w = vec![T::zero(); bank.weights.len()];
            let mut d_b = vec![T::zero(); bank.out_channels];
            let mut col = vec![T::zero(); kk * q];
            let mut dcol = vec![T::zero(); kk * q];
            let mut g_slab = vec![T::zero(); bank.out_channels * q];
            for z in 0..os.depth {
                for o in 0..os.channels {
                    let src = os.index(n, o, z, 0, 0);
                    g_slab[o * q..(o + 1) * q].copy_from_slice(&grad_out.data()[src..src + q]);
                }
                for o in 0..os.channels {
                    d_b[o] += g_slab[o * q..(o + 1) * q].iter().copied().sum();
                }
                fill_columns(item, s, k, z, os.height, os.width, &mut col);
                // d_w += g_slab (C_out x Q) . col^T (Q x K)
                T::gemm_nt(bank.out_channels, q, kk, T::one(), &g_slab, &col, T::one(), &mut d_w);
                // dcol = W^T (K x C_out) . g_slab
                T::gemm_tn(kk, bank.out_channels, q, T::one(), &bank.weights, &g_slab, T::zero(), &mut dcol);
                scatter_columns(&mut d_item, s, k, z, os.height, os.width, &dcol);
            }
            (d_item, d_w, d_b)
        })
        .collect();
    reduce_item_grads(s, bank, per_item)
}

/// Stitch per-item input gradients and sum weight/bias partials in item order.
fn reduce_item_grads<T: Scalar>(
    s: Shape5,
    bank: &ConvKernelBank<T>,
    per_item: Vec<(Vec<T>, Vec<T>, Vec<T>)>,
) -> ConvGradients<T> {
    let mut d_in = VolumeTensor::zeros(s);
    let mut d_w = vec![T::zero(); bank.weights.len()];
    let mut d_b = vec![T::zero(); bank.out_channels];
    for (n, (item, w, b)) in per_item.into_iter().enumerate() {
        d_in.item_mut(n).copy_from_slice(&item);
        for (acc, v) in d_w.iter_mut().zip(&w) {
            *acc += *v;
        }
        for (acc, v) in d_b.iter_mut().zip(&b) {
            *acc += *v;
        }
    }
    ConvGradients { input: d_in, weights: d_w, bias: d_b }
}
