//! Direct 2-d convolution kernels (NCHW, square kernel, zero padding).
//!
//! Loops are ordered so the innermost axis runs over contiguous output or
//! input rows; weights equal to zero are skipped, so masked filters cost
//! nothing. Output extents must divide exactly: `(H + 2p - k) % stride == 0`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

fn exact_extent(extent: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = extent + 2 * padding;
    if k == 0 || k > padded {
        return Err(Error::Shape(format!("kernel {k} does not fit padded extent {padded}")));
    }
    let span = padded - k;
    if !span.is_multiple_of(stride) {
        return Err(Error::Shape(format!(
            "conv extent {extent} with kernel {k}, stride {stride}, padding {padding} \
             does not divide exactly"
        )));
    }
    Ok(span / stride + 1)
}

impl ConvDims {
    pub fn new(
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if input_shape.len() != 4 {
            return Err(Error::Shape(format!("conv input must be [N,C,H,W], got {input_shape:?}")));
        }
        if kernel_shape.len() != 4 || kernel_shape[2] != kernel_shape[3] {
            return Err(Error::Shape(format!(
                "conv kernel must be [F,C,k,k], got {kernel_shape:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Param("conv stride must be >= 1".into()));
        }
        let (batch, c_in, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
        let (c_out, kc, k) = (kernel_shape[0], kernel_shape[1], kernel_shape[2]);
        if kc != c_in {
            return Err(Error::Shape(format!(
                "conv kernel expects {kc} input channels, input has {c_in}"
            )));
        }
        let h_out = exact_extent(h, k, stride, padding)?;
        let w_out = exact_extent(w, k, stride, padding)?;
        Ok(ConvDims { batch, c_in, h, w, c_out, k, stride, padding, h_out, w_out })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.c_out, self.h_out, self.w_out]
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.c_out * self.h_out * self.w_out
    }

    /// Output rows `oh` for which `oh*stride + kh - padding` lands inside
    /// `[0, extent)`; works for both spatial axes.
    fn valid_range(&self, koff: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let lo = if koff >= self.padding {
            0
        } else {
            // smallest o with o*stride >= padding - koff
            (self.padding - koff).div_ceil(self.stride)
        };
        let max_index = extent + self.padding;
        // largest o with o*stride + koff < extent + padding
        let hi = if koff >= max_index {
            0
        } else {
            ((max_index - koff - 1) / self.stride + 1).min(out_extent)
        };
        (lo.min(hi), hi)
    }
}

/// `out += conv(input, kernel)`; `out` must be zeroed by the caller when a
/// fresh result is wanted.
pub fn conv2d_forward(d: &ConvDims, input: &[f64], kernel: &[f64], out: &mut [f64]) {
    let (hw_in, hw_out) = (d.h * d.w, d.h_out * d.w_out);
    for n in 0..d.batch {
        for f in 0..d.c_out {
            let out_img = &mut out[(n * d.c_out + f) * hw_out..][..hw_out];
            for c in 0..d.c_in {
                let in_img = &input[(n * d.c_in + c) * hw_in..][..hw_in];
                let k_base = (f * d.c_in + c) * d.k * d.k;
                for kh in 0..d.k {
                    let (oh_lo, oh_hi) = d.valid_range(kh, d.h, d.h_out);
                    for kw in 0..d.k {
                        let weight = kernel[k_base + kh * d.k + kw];
                        if weight == 0.0 {
                            continue;
                        }
                        let (ow_lo, ow_hi) = d.valid_range(kw, d.w, d.w_out);
                        for oh in oh_lo..oh_hi {
                            let ih = oh * d.stride + kh - d.padding;
                            let in_row = &in_img[ih * d.w..][..d.w];
                            let out_row = &mut out_img[oh * d.w_out..][..d.w_out];
                            if d.stride == 1 {
                                let off = kw as isize - d.padding as isize;
                                for ow in ow_lo..ow_hi {
                                    out_row[ow] += weight * in_row[(ow as isize + off) as usize];
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    let iw = ow * d.stride + kw - d.padding;
                                    out_row[ow] += weight * in_row[iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `d_input += dconv/dinput(kernel, d_out)`.
pub fn conv2d_backward_input(d: &ConvDims, kernel: &[f64], d_out: &[f64], d_input: &mut [f64]) {
    let (hw_in, hw_out) = (d.h * d.w, d.h_out * d.w_out);
    for n in 0..d.batch {
        for f in 0..d.c_out {
            let dout_img = &d_out[(n * d.c_out + f) * hw_out..][..hw_out];
            for c in 0..d.c_in {
                let din_img = &mut d_input[(n * d.c_in + c) * hw_in..][..hw_in];
                let k_base = (f * d.c_in + c) * d.k * d.k;
                for kh in 0..d.k {
                    let (oh_lo, oh_hi) = d.valid_range(kh, d.h, d.h_out);
                    for kw in 0..d.k {
                        let weight = kernel[k_base + kh * d.k + kw];
                        if weight == 0.0 {
                            continue;
                        }
                        let (ow_lo, ow_hi) = d.valid_range(kw, d.w, d.w_out);
                        for oh in oh_lo..oh_hi {
                            let ih = oh * d.stride + kh - d.padding;
                            let din_row = &mut din_img[ih * d.w..][..d.w];
                            let dout_row = &dout_img[oh * d.w_out..][..d.w_out];
                            if d.stride == 1 {
                                let off = kw as isize - d.padding as isize;
                                for ow in ow_lo..ow_hi {
                                    din_row[(ow as isize + off) as usize] += weight * dout_row[ow];
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    let iw = ow * d.stride + kw - d.padding;
                                    din_row[iw] += weight * dout_row[ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `d_kernel += dconv/dkernel(input, d_out)`.
pub fn conv2d_backward_kernel(d: &ConvDims, input: &[f64], d_out: &[f64], d_kernel: &mut [f64]) {
    let (hw_in, hw_out) = (d.h * d.w, d.h_out * d.w_out);
    for n in 0..d.batch {
        for f in 0..d.c_out {
            let dout_img = &d_out[(n * d.c_out + f) * hw_out..][..hw_out];
            for c in 0..d.c_in {
                let in_img = &input[(n * d.c_in + c) * hw_in..][..hw_in];
                let k_base = (f * d.c_in + c) * d.k * d.k;
                for kh in 0..d.k {
                    let (oh_lo, oh_hi) = d.valid_range(kh, d.h, d.h_out);
                    for kw in 0..d.k {
                        let (ow_lo, ow_hi) = d.valid_range(kw, d.w, d.w_out);
                        let mut acc = 0.0;
                        for oh in oh_lo..oh_hi {
                            let ih = oh * d.stride + kh - d.padding;
                            let in_row = &in_img[ih * d.w..][..d.w];
                            let dout_row = &dout_img[oh * d.w_out..][..d.w_out];
                            if d.stride == 1 {
                                let off = kw as isize - d.padding as isize;
                                for ow in ow_lo..ow_hi {
                                    acc += in_row[(ow as isize + off) as usize] * dout_row[ow];
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    let iw = ow * d.stride + kw - d.padding;
                                    acc += in_row[iw] * dout_row[ow];
                                }
                            }
                        }
                        d_kernel[k_base + kh * d.k + kw] += acc;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reference convolution: six explicit loops, no skipping, no reuse.
    pub fn conv2d_naive(
        input: &[f64],
        in_shape: &[usize],
        kernel: &[f64],
        k_shape: &[usize],
        stride: usize,
        padding: usize,
    ) -> (Vec<f64>, Vec<usize>) {
        let (n_b, c_in, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
        let (c_out, k) = (k_shape[0], k_shape[2]);
        let h_out = (h + 2 * padding - k) / stride + 1;
        let w_out = (w + 2 * padding - k) / stride + 1;
        let mut out = vec![0.0; n_b * c_out * h_out * w_out];
        for n in 0..n_b {
            for f in 0..c_out {
                for oh in 0..h_out {
                    for ow in 0..w_out {
                        let mut acc = 0.0;
                        for c in 0..c_in {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let ih = (oh * stride + kh) as isize - padding as isize;
                                    let iw = (ow * stride + kw) as isize - padding as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                        continue;
                                    }
                                    let iv =
                                        input[((n * c_in + c) * h + ih as usize) * w + iw as usize];
                                    let kv = kernel[((f * c_in + c) * k + kh) * k + kw];
                                    acc += iv * kv;
                                }
                            }
                        }
                        out[((n * c_out + f) * h_out + oh) * w_out + ow] = acc;
                    }
                }
            }
        }
        (out, vec![n_b, c_out, h_out, w_out])
    }

    fn run_forward(
        input: &[f64],
        in_shape: &[usize],
        kernel: &[f64],
        k_shape: &[usize],
        stride: usize,
        padding: usize,
    ) -> Vec<f64> {
        let d = ConvDims::new(in_shape, k_shape, stride, padding).unwrap();
        let mut out = vec![0.0; d.out_len()];
        conv2d_forward(&d, input, kernel, &mut out);
        out
    }

    #[test]
    fn identity_kernel_passes_through() {
        let input = vec![5.0];
        let out = run_forward(&input, &[1, 1, 1, 1], &[1.0], &[1, 1, 1, 1], 1, 0);
        assert_eq!(out, vec![5.0]);
    }

    #[test]
    fn ones_kernel_sums_window() {
        let input = vec![1.0; 9];
        let out = run_forward(&input, &[1, 1, 3, 3], &[1.0; 9], &[1, 1, 3, 3], 1, 0);
        assert_eq!(out, vec![9.0]);
    }

    #[test]
    fn rejects_inexact_output_extent() {
        // (16 + 2 - 3) = 15 is not divisible by stride 2.
        let err = ConvDims::new(&[1, 1, 16, 16], &[1, 1, 3, 3], 2, 1);
        assert!(err.is_err());
    }

    #[test]
    fn rejects_channel_mismatch() {
        assert!(ConvDims::new(&[1, 3, 8, 8], &[4, 2, 3, 3], 1, 1).is_err());
    }

    #[test]
    fn matches_naive_on_strided_padded_case() {
        use rand::Rng;
        let mut rng = crate::rng::stream(11, "conv-test");
        let in_shape = [2, 3, 6, 6];
        let k_shape = [4, 3, 2, 2];
        let input: Vec<f64> =
            (0..in_shape.iter().product::<usize>()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kernel: Vec<f64> =
            (0..k_shape.iter().product::<usize>()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fast = run_forward(&input, &in_shape, &kernel, &k_shape, 2, 1);
        let (slow, _) = conv2d_naive(&input, &in_shape, &kernel, &k_shape, 2, 1);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12, "fast {a} vs naive {b}");
        }
    }
}
