//! Direct 2-D convolution kernels (NCHW, OIHW weights, grouped, dilated).

use super::{dim_err, TensorError};
use crate::parallel::for_each_chunk;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Validates shapes and derives the output extent.
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        dilation: usize,
        groups: usize,
        padding: usize,
    ) -> Result<Self, TensorError> {
        const OP: &str = "conv2d";
        if x_shape.len() != 4 {
            return Err(dim_err(OP, "x rank", format!("expected NCHW, got {x_shape:?}")));
        }
        if w_shape.len() != 4 {
            return Err(dim_err(OP, "w rank", format!("expected (Cout,Cin/g,K,K), got {w_shape:?}")));
        }
        if stride == 0 || dilation == 0 || groups == 0 {
            return Err(dim_err(OP, "stride/dilation/groups", "must be positive"));
        }
        let [batch, c_in, h, w] = [x_shape[0], x_shape[1], x_shape[2], x_shape[3]];
        let [c_out, cin_g, kh, kw] = [w_shape[0], w_shape[1], w_shape[2], w_shape[3]];
        if kh != kw {
            return Err(dim_err(OP, "w axes 2,3", format!("square kernel required, got {kh}x{kw}")));
        }
        if c_in % groups != 0 || c_out % groups != 0 {
            return Err(dim_err(
                OP,
                "x axis 1 / w axis 0",
                format!("channels {c_in}->{c_out} not divisible by groups {groups}"),
            ));
        }
        if cin_g != c_in / groups {
            return Err(dim_err(
                OP,
                "w axis 1",
                format!("expected Cin/groups = {}, got {cin_g}", c_in / groups),
            ));
        }
        let eff = (kh - 1) * dilation + 1;
        if eff > h + 2 * padding || eff > w + 2 * padding {
            return Err(dim_err(
                OP,
                "x axes 2,3",
                format!("effective kernel {eff} exceeds padded input {}x{}", h + 2 * padding, w + 2 * padding),
            ));
        }
        let out_h = (h + 2 * padding - eff) / stride + 1;
        let out_w = (w + 2 * padding - eff) / stride + 1;
        Ok(Self {
            batch,
            c_in,
            h,
            w,
            c_out,
            kernel: kh,
            stride,
            dilation,
            padding,
            groups,
            out_h,
            out_w,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.c_out, self.out_h, self.out_w]
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * (self.c_in / self.groups) * self.kernel * self.kernel
    }

    /// Range of output columns whose input column `o*stride - pad + tap*dil`
    /// lands inside `0..extent`.
    #[inline]
    fn valid_range(&self, tap: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let offset = tap * self.dilation;
        let s = self.stride;
        let p = self.padding;
        // o*s + offset >= p
        let lo = if offset >= p { 0 } else { (p - offset).div_ceil(s).min(out_extent) };
        // o*s + offset - p <= extent - 1
        let hi = if offset < extent + p {
            ((extent - 1 + p - offset) / s + 1).min(out_extent)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// `out` must hold `batch*c_out*out_h*out_w` elements.
pub fn conv2d_forward<T: Real>(x: &[T], w: &[T], g: &ConvGeometry, out: &mut [T]) {
    let plane = g.out_h * g.out_w;
    let cin_g = g.c_in / g.groups;
    let cout_g = g.c_out / g.groups;
    let k = g.kernel;
    out.iter_mut().for_each(|v| *v = T::zero());
    for_each_chunk(out, plane, |idx, dst| {
        let n = idx / g.c_out;
        let oc = idx % g.c_out;
        let group = oc / cout_g;
        for icg in 0..cin_g {
            let ic = group * cin_g + icg;
            let src = &x[(n * g.c_in + ic) * g.h * g.w..][..g.h * g.w];
            let wbase = (oc * cin_g + icg) * k * k;
            for kh in 0..k {
                let (oh_lo, oh_hi) = g.valid_range(kh, g.h, g.out_h);
                for kw in 0..k {
                    let wv = w[wbase + kh * k + kw];
                    let (ow_lo, ow_hi) = g.valid_range(kw, g.w, g.out_w);
                    if ow_lo == ow_hi {
                        continue;
                    }
                    for oh in oh_lo..oh_hi {
                        let ih = oh * g.stride + kh * g.dilation - g.padding;
                        let row = &src[ih * g.w..][..g.w];
                        let drow = &mut dst[oh * g.out_w..][..g.out_w];
                        if g.stride == 1 {
                            let iw0 = ow_lo + kw * g.dilation - g.padding;
                            let n_ow = ow_hi - ow_lo;
                            for (d, s) in drow[ow_lo..ow_hi].iter_mut().zip(&row[iw0..iw0 + n_ow]) {
                                *d = *d + wv * *s;
                            }
                        } else {
                            for ow in ow_lo..ow_hi {
                                let iw = ow * g.stride + kw * g.dilation - g.padding;
                                drow[ow] = drow[ow] + wv * row[iw];
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Gradient with respect to the input; `gx` is overwritten.
pub fn conv2d_backward_input<T: Real>(gy: &[T], w: &[T], g: &ConvGeometry, gx: &mut [T]) {
    let in_plane = g.h * g.w;
    let out_plane = g.out_h * g.out_w;
    let cin_g = g.c_in / g.groups;
    let cout_g = g.c_out / g.groups;
    let k = g.kernel;
    gx.iter_mut().for_each(|v| *v = T::zero());
    for_each_chunk(gx, in_plane, |idx, dst| {
        let n = idx / g.c_in;
        let ic = idx % g.c_in;
        let group = ic / cin_g;
        let icg = ic % cin_g;
        for ocg in 0..cout_g {
            let oc = group * cout_g + ocg;
            let src = &gy[(n * g.c_out + oc) * out_plane..][..out_plane];
            let wbase = (oc * cin_g + icg) * k * k;
            for kh in 0..k {
                let (oh_lo, oh_hi) = g.valid_range(kh, g.h, g.out_h);
                for kw in 0..k {
                    let wv = w[wbase + kh * k + kw];
                    let (ow_lo, ow_hi) = g.valid_range(kw, g.w, g.out_w);
                    if ow_lo == ow_hi {
                        continue;
                    }
                    for oh in oh_lo..oh_hi {
                        let ih = oh * g.stride + kh * g.dilation - g.padding;
                        let grow = &src[oh * g.out_w..][..g.out_w];
                        let drow = &mut dst[ih * g.w..][..g.w];
                        if g.stride == 1 {
                            let iw0 = ow_lo + kw * g.dilation - g.padding;
                            let n_ow = ow_hi - ow_lo;
                            for (d, s) in drow[iw0..iw0 + n_ow].iter_mut().zip(&grow[ow_lo..ow_hi]) {
                                *d = *d + wv * *s;
                            }
                        } else {
                            for ow in ow_lo..ow_hi {
                                let iw = ow * g.stride + kw * g.dilation - g.padding;
                                drow[iw] = drow[iw] + wv * grow[ow];
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Gradient with respect to the weights; `gw` is overwritten.
pub fn conv2d_backward_weight<T: Real>(gy: &[T], x: &[T], g: &ConvGeometry, gw: &mut [T]) {
    let out_plane = g.out_h * g.out_w;
    let cin_g = g.c_in / g.groups;
    let cout_g = g.c_out / g.groups;
    let k = g.kernel;
    gw.iter_mut().for_each(|v| *v = T::zero());
    // one chunk per output channel
    for_each_chunk(gw, cin_g * k * k, |oc, dst| {
        let group = oc / cout_g;
        for n in 0..g.batch {
            let gsrc = &gy[(n * g.c_out + oc) * out_plane..][..out_plane];
            for icg in 0..cin_g {
                let ic = group * cin_g + icg;
                let xsrc = &x[(n * g.c_in + ic) * g.h * g.w..][..g.h * g.w];
                for kh in 0..k {
                    let (oh_lo, oh_hi) = g.valid_range(kh, g.h, g.out_h);
                    for kw in 0..k {
                        let (ow_lo, ow_hi) = g.valid_range(kw, g.w, g.out_w);
                        if ow_lo == ow_hi {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + kh * g.dilation - g.padding;
                            let grow = &gsrc[oh * g.out_w..][..g.out_w];
                            let xrow = &xsrc[ih * g.w..][..g.w];
                            if g.stride == 1 {
                                let iw0 = ow_lo + kw * g.dilation - g.padding;
                                let n_ow = ow_hi - ow_lo;
                                for (a, b) in grow[ow_lo..ow_hi].iter().zip(&xrow[iw0..iw0 + n_ow]) {
                                    acc = acc + *a * *b;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    let iw = ow * g.stride + kw * g.dilation - g.padding;
                                    acc = acc + grow[ow] * xrow[iw];
                                }
                            }
                        }
                        let slot = &mut dst[(icg * k + kh) * k + kw];
                        *slot = *slot + acc;
                    }
                }
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extent_law() {
        let g = ConvGeometry::new(&[1, 4, 9, 9], &[8, 4, 3, 3], 2, 2, 1, 2).unwrap();
        // floor((9 + 4 - 2*2 - 1)/2) + 1
        assert_eq!((g.out_h, g.out_w), (5, 5));
    }

    #[test]
    fn groups_must_divide_channels() {
        let err = ConvGeometry::new(&[1, 3, 4, 4], &[4, 1, 1, 1], 1, 1, 2, 0).unwrap_err();
        assert!(matches!(err, TensorError::Dimension { .. }));
        assert!(err.to_string().contains("axis 1"));
    }

    #[test]
    fn kernel_larger_than_padded_input_rejected() {
        let err = ConvGeometry::new(&[1, 1, 2, 2], &[1, 1, 3, 3], 1, 1, 1, 0).unwrap_err();
        assert!(err.to_string().contains("axes 2,3"));
    }

    #[test]
    fn scalar_conv() {
        let g = ConvGeometry::new(&[1, 1, 1, 1], &[1, 1, 1, 1], 1, 1, 1, 0).unwrap();
        let mut out = [0.0f64];
        conv2d_forward(&[2.0], &[3.0], &g, &mut out);
        assert_eq!(out[0], 6.0);
    }
}
