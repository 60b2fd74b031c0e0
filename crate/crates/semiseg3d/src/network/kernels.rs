//! f32 compute kernels for the segmentation network: 3x3x3 and 1x1x1
//! convolutions with hand-written backward passes, nearest upsampling and
//! activations.
//!
//! Tensors are flat `[channel][z][y][x]` slices over cubic grids, x fastest.
//! 3x3x3 convolutions use padding 1 via an explicitly zero-padded copy, so
//! inner loops run over contiguous rows without boundary branches.

/// Lane-split dot product; the partial sums break the loop-carried
/// dependency so the loop vectorizes.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let n = a.len().min(b.len());
    let mut lanes = [0.0f32; 8];
    let mut i = 0;
    while i + 8 <= n {
        for (l, lane) in lanes.iter_mut().enumerate() {
            *lane += a[i + l] * b[i + l];
        }
        i += 8;
    }
    let mut s: f32 = lanes.iter().sum();
    while i < n {
        s += a[i] * b[i];
        i += 1;
    }
    s
}

#[inline]
fn axpy(dst: &mut [f32], src: &[f32], w: f32) {
    for (d, &s) in dst.iter_mut().zip(src.iter()) {
        *d += w * s;
    }
}

/// Copies `ch` channels of side `n` into a zero-padded buffer of side `n+2`.
pub fn pad1(src: &[f32], ch: usize, n: usize) -> Vec<f32> {
    let p = n + 2;
    let mut out = vec![0.0f32; ch * p * p * p];
    for c in 0..ch {
        for z in 0..n {
            for y in 0..n {
                let s = c * n * n * n + (z * n + y) * n;
                let d = c * p * p * p + ((z + 1) * p + (y + 1)) * p + 1;
                out[d..d + n].copy_from_slice(&src[s..s + n]);
            }
        }
    }
    out
}

/// Drops the 1-voxel border, inverse of [`pad1`].
pub fn unpad1(src: &[f32], ch: usize, n: usize) -> Vec<f32> {
    let p = n + 2;
    let mut out = vec![0.0f32; ch * n * n * n];
    for c in 0..ch {
        for z in 0..n {
            for y in 0..n {
                let s = c * p * p * p + ((z + 1) * p + (y + 1)) * p + 1;
                let d = c * n * n * n + (z * n + y) * n;
                out[d..d + n].copy_from_slice(&src[s..s + n]);
            }
        }
    }
    out
}

/// 3x3x3 convolution over a padded input. `n_out = n_in / stride`;
/// weights are `[out_ch][in_ch][kz][ky][kx]`, bias one value per out channel.
pub fn conv3_forward(
    in_pad: &[f32],
    in_ch: usize,
    n_in: usize,
    stride: usize,
    w: &[f32],
    bias: &[f32],
    out: &mut [f32],
) {
    let n_out = n_in / stride;
    let p = n_in + 2;
    let pp = p * p;
    let nn = n_out * n_out;
    debug_assert_eq!(out.len() % nn, 0);
    let out_ch = out.len() / (nn * n_out);
    debug_assert_eq!(w.len(), out_ch * in_ch * 27);
    for oc in 0..out_ch {
        let out_c = &mut out[oc * nn * n_out..(oc + 1) * nn * n_out];
        out_c.fill(bias[oc]);
        for ic in 0..in_ch {
            let pad_c = &in_pad[ic * pp * p..(ic + 1) * pp * p];
            let w_base = (oc * in_ch + ic) * 27;
            for kz in 0..3 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = w[w_base + (kz * 3 + ky) * 3 + kx];
                        if stride == 1 {
                            for z in 0..n_out {
                                for y in 0..n_out {
                                    let src = (z + kz) * pp + (y + ky) * p + kx;
                                    let dst = z * nn + y * n_out;
                                    let row_in = &pad_c[src..src + n_out];
                                    let row_out = &mut out_c[dst..dst + n_out];
                                    for i in 0..n_out {
                                        row_out[i] += wv * row_in[i];
                                    }
                                }
                            }
                        } else {
                            for z in 0..n_out {
                                for y in 0..n_out {
                                    let src = (z * stride + kz) * pp + (y * stride + ky) * p + kx;
                                    let dst = z * nn + y * n_out;
                                    for x in 0..n_out {
                                        out_c[dst + x] += wv * pad_c[src + x * stride];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Backward of [`conv3_forward`]: accumulates weight/bias gradients and
/// returns the gradient with respect to the (unpadded) input.
pub fn conv3_backward(
    in_pad: &[f32],
    in_ch: usize,
    n_in: usize,
    stride: usize,
    w: &[f32],
    g_out: &[f32],
    g_w: &mut [f32],
    g_bias: &mut [f32],
) -> Vec<f32> {
    let n_out = n_in / stride;
    let p = n_in + 2;
    let pp = p * p;
    let nn = n_out * n_out;
    let out_ch = g_out.len() / (nn * n_out);
    let mut g_pad = vec![0.0f32; in_ch * pp * p];
    for oc in 0..out_ch {
        let g_out_c = &g_out[oc * nn * n_out..(oc + 1) * nn * n_out];
        g_bias[oc] += g_out_c.iter().sum::<f32>();
        for ic in 0..in_ch {
            let pad_c = &in_pad[ic * pp * p..(ic + 1) * pp * p];
            let g_pad_c = &mut g_pad[ic * pp * p..(ic + 1) * pp * p];
            let w_base = (oc * in_ch + ic) * 27;
            for kz in 0..3 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wi = w_base + (kz * 3 + ky) * 3 + kx;
                        let wv = w[wi];
                        let mut acc = 0.0f32;
                        if stride == 1 {
                            for z in 0..n_out {
                                for y in 0..n_out {
                                    let src = (z + kz) * pp + (y + ky) * p + kx;
                                    let dst = z * nn + y * n_out;
                                    let row_g = &g_out_c[dst..dst + n_out];
                                    acc += dot(row_g, &pad_c[src..src + n_out]);
                                    axpy(&mut g_pad_c[src..src + n_out], row_g, wv);
                                }
                            }
                        } else {
                            for z in 0..n_out {
                                for y in 0..n_out {
                                    let src = (z * stride + kz) * pp + (y * stride + ky) * p + kx;
                                    let dst = z * nn + y * n_out;
                                    for x in 0..n_out {
                                        let g = g_out_c[dst + x];
                                        acc += g * pad_c[src + x * stride];
                                        g_pad_c[src + x * stride] += wv * g;
                                    }
                                }
                            }
                        }
                        g_w[wi] += acc;
                    }
                }
            }
        }
    }
    unpad1(&g_pad, in_ch, n_in)
}

/// Pointwise (1x1x1) convolution: a per-voxel linear map across channels.
pub fn conv1_forward(input: &[f32], in_ch: usize, voxels: usize, w: &[f32], bias: &[f32], out: &mut [f32]) {
    let out_ch = out.len() / voxels;
    debug_assert_eq!(w.len(), out_ch * in_ch);
    for oc in 0..out_ch {
        let out_c = &mut out[oc * voxels..(oc + 1) * voxels];
        out_c.fill(bias[oc]);
        for ic in 0..in_ch {
            let wv = w[oc * in_ch + ic];
            let in_c = &input[ic * voxels..(ic + 1) * voxels];
            for i in 0..voxels {
                out_c[i] += wv * in_c[i];
            }
        }
    }
}

/// Backward of [`conv1_forward`].
pub fn conv1_backward(
    input: &[f32],
    in_ch: usize,
    voxels: usize,
    w: &[f32],
    g_out: &[f32],
    g_w: &mut [f32],
    g_bias: &mut [f32],
) -> Vec<f32> {
    let out_ch = g_out.len() / voxels;
    let mut g_in = vec![0.0f32; in_ch * voxels];
    for oc in 0..out_ch {
        let g_out_c = &g_out[oc * voxels..(oc + 1) * voxels];
        g_bias[oc] += g_out_c.iter().sum::<f32>();
        for ic in 0..in_ch {
            let in_c = &input[ic * voxels..(ic + 1) * voxels];
            let g_in_c = &mut g_in[ic * voxels..(ic + 1) * voxels];
            let wv = w[oc * in_ch + ic];
            g_w[oc * in_ch + ic] += dot(g_out_c, in_c);
            axpy(g_in_c, g_out_c, wv);
        }
    }
    g_in
}

/// Nearest-neighbor 2x upsampling of `ch` channels of side `n`.
pub fn upsample2_forward(input: &[f32], ch: usize, n: usize) -> Vec<f32> {
    let m = 2 * n;
    let mut out = vec![0.0f32; ch * m * m * m];
    for c in 0..ch {
        for z in 0..m {
            for y in 0..m {
                let src = c * n * n * n + ((z / 2) * n + y / 2) * n;
                let dst = c * m * m * m + (z * m + y) * m;
                for x in 0..m {
                    out[dst + x] = input[src + x / 2];
                }
            }
        }
    }
    out
}

/// Backward of nearest upsampling: sums the gradients of the 8 children.
pub fn upsample2_backward(g_out: &[f32], ch: usize, n: usize) -> Vec<f32> {
    let m = 2 * n;
    let mut g_in = vec![0.0f32; ch * n * n * n];
    for c in 0..ch {
        for z in 0..m {
            for y in 0..m {
                let dst = c * n * n * n + ((z / 2) * n + y / 2) * n;
                let src = c * m * m * m + (z * m + y) * m;
                for x in 0..m {
                    g_in[dst + x / 2] += g_out[src + x];
                }
            }
        }
    }
    g_in
}

/// Negative-side slope of the leaky rectifier. Keeps every unit trainable;
/// plain ReLU leaves whole channels dead at init on nonnegative inputs.
pub const LEAKY_SLOPE: f32 = 0.01;

pub fn leaky_relu_inplace(x: &mut [f32]) {
    for v in x {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
}

/// Gradient of the leaky rectifier, masked by the forward output sign.
pub fn leaky_relu_backward_inplace(g: &mut [f32], out: &[f32]) {
    for (gv, &ov) in g.iter_mut().zip(out.iter()) {
        if ov <= 0.0 {
            *gv *= LEAKY_SLOPE;
        }
    }
}

pub fn sigmoid_inplace(x: &mut [f32]) {
    for v in x {
        *v = 1.0 / (1.0 + (-*v).exp());
    }
}

/// `d sigmoid = s * (1 - s)`, taking the forward output `s`.
pub fn sigmoid_backward_inplace(g: &mut [f32], s: &[f32]) {
    for (gv, &sv) in g.iter_mut().zip(s.iter()) {
        *gv *= sv * (1.0 - sv);
    }
}

pub fn add_inplace(dst: &mut [f32], src: &[f32]) {
    for (d, &s) in dst.iter_mut().zip(src.iter()) {
        *d += s;
    }
}
