//! Strided zero-padded convolution via im2col + GEMM.

use super::ops::{cdhw, pad3};
use super::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Output extent of a zero-padded (`kernel / 2`) convolution.
pub fn conv_output_extent(n: usize, kernel: usize, stride: usize) -> usize {
    (n + 2 * (kernel / 2) - kernel) / stride + 1
}

/// Geometry of one convolution with spatial axes padded to three.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub cin: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeometry {
    fn pad(&self, axis: usize) -> usize {
        self.kernel[axis] / 2
    }

    fn rows(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    fn cols(&self) -> usize {
        self.output.iter().product()
    }

    fn input_len(&self) -> usize {
        self.cin * self.input.iter().product::<usize>()
    }
}

/// Calls `f(col_index, input_index, len, input_step)` for every maximal run of
/// in-bounds entries along the last axis of the im2col matrix.
#[inline]
fn for_each_run(g: &ConvGeometry, mut f: impl FnMut(usize, usize, usize, usize)) {
    let [i0, i1, i2] = g.input;
    let [k0, k1, k2] = g.kernel;
    let [o0, o1, o2] = g.output;
    let [s0, s1, s2] = g.stride;
    let (p0, p1, p2) = (g.pad(0) as isize, g.pad(1) as isize, g.pad(2) as isize);
    let ncols = g.cols();
    let mut row = 0;
    for ci in 0..g.cin {
        let cbase = ci * i0 * i1 * i2;
        for a in 0..k0 {
            for b in 0..k1 {
                for c in 0..k2 {
                    let rbase = row * ncols;
                    row += 1;
                    // x range with ix in bounds
                    let lo = ((p2 - c as isize).max(0) as usize).div_ceil(s2);
                    let hi_num = i2 as isize - 1 + p2 - c as isize;
                    if hi_num < 0 {
                        continue;
                    }
                    let hi = ((hi_num as usize) / s2).min(o2 - 1);
                    if lo > hi {
                        continue;
                    }
                    let ix0 = lo * s2 + c - p2 as usize;
                    for z in 0..o0 {
                        let iz = (z * s0) as isize + a as isize - p0;
                        if iz < 0 || iz >= i0 as isize {
                            continue;
                        }
                        for y in 0..o1 {
                            let iy = (y * s1) as isize + b as isize - p1;
                            if iy < 0 || iy >= i1 as isize {
                                continue;
                            }
                            let in_row = cbase + (iz as usize * i1 + iy as usize) * i2;
                            let out_row = rbase + (z * o1 + y) * o2;
                            f(out_row + lo, in_row + ix0, hi - lo + 1, s2);
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: Scalar>(g: &ConvGeometry, input: &[T]) -> Vec<T> {
    let mut cols = vec![T::zero(); g.rows() * g.cols()];
    for_each_run(g, |dst, src, len, step| {
        let out = &mut cols[dst..dst + len];
        if step == 1 {
            out.copy_from_slice(&input[src..src + len]);
        } else {
            for (o, v) in out.iter_mut().zip(input[src..].iter().step_by(step)) {
                *o = *v;
            }
        }
    });
    cols
}

fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.input_len()];
    for_each_run(g, |src, dst, len, step| {
        let from = &cols[src..src + len];
        if step == 1 {
            for (o, v) in out[dst..dst + len].iter_mut().zip(from) {
                *o = *o + *v;
            }
        } else {
            for (o, v) in out[dst..].iter_mut().step_by(step).zip(from) {
                *o = *o + *v;
            }
        }
    });
    out
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Zero-padded convolution. `self` is `[Cin, spatial...]`, `weight` is
    /// `[Cout, Cin, k...]` and `bias` is `[Cout]`.
    pub fn conv(self, weight: Var<'t, T>, bias: Var<'t, T>, stride: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let w = weight.value();
        let b = bias.value();
        let xs = x.shape().to_vec();
        let ws = w.shape().to_vec();
        let spatial_rank = xs.len() - 1;
        if ws.len() != spatial_rank + 2 || ws[1] != xs[0] {
            return Err(Error::shape("conv", &xs, &ws));
        }
        if b.shape() != [ws[0]] {
            return Err(Error::shape("conv(bias)", &ws, b.shape()));
        }
        if stride.len() != spatial_rank || stride.iter().any(|&s| s == 0) {
            return Err(Error::invalid(format!("conv: bad stride {stride:?} for shape {xs:?}")));
        }
        let [cin, a, bb, c] = cdhw(&xs)?;
        let kernel = pad3(&ws[2..], 1);
        let stride3 = pad3(stride, 1);
        let input = [a, bb, c];
        let mut output = [0; 3];
        for ax in 0..3 {
            output[ax] = conv_output_extent(input[ax], kernel[ax], stride3[ax]);
        }
        let geo = ConvGeometry { cin, input, kernel, stride: stride3, output };
        let cout = ws[0];
        let k = geo.rows();
        let p = geo.cols();

        let cols = im2col(&geo, x.data());
        let mut out = vec![T::zero(); cout * p];
        for (co, row) in out.chunks_mut(p).enumerate() {
            row.iter_mut().for_each(|v| *v = b.data()[co]);
        }
        T::gemm(cout, k, p, T::one(), w.data(), k as isize, 1, &cols, p as isize, 1, T::one(), &mut out, p as isize, 1);

        let mut out_shape = vec![cout];
        let off = 3 - spatial_rank;
        out_shape.extend_from_slice(&output[off..]);
        let y = Tensor::from_parts(out_shape, out);
        self.tape.record("conv", y, &[self, weight, bias], move |g, need| {
            let gx = need[0].then(|| {
                let mut dcols = vec![T::zero(); k * p];
                T::gemm(k, cout, p, T::one(), w.data(), 1, k as isize, g, p as isize, 1, T::zero(), &mut dcols, p as isize, 1);
                col2im(&geo, &dcols)
            });
            let gw = need[1].then(|| {
                let mut dw = vec![T::zero(); cout * k];
                T::gemm(cout, p, k, T::one(), g, p as isize, 1, &cols, 1, p as isize, T::zero(), &mut dw, k as isize, 1);
                dw
            });
            let gb = need[2].then(|| {
                g.chunks(p)
                    .map(|row| T::from_f64(row.iter().map(|v| v.as_f64()).sum()))
                    .collect()
            });
            vec![gx, gw, gb]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    /// Direct nested-loop convolution used as an oracle.
    fn direct_conv2d(x: &[f64], cin: usize, h: usize, w: usize, wt: &[f64], cout: usize, k: usize, stride: usize, bias: &[f64]) -> Vec<f64> {
        let p = (k / 2) as isize;
        let oh = conv_output_extent(h, k, stride);
        let ow = conv_output_extent(w, k, stride);
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = bias[co];
                    for ci in 0..cin {
                        for a in 0..k {
                            for b in 0..k {
                                let iy = (y * stride) as isize + a as isize - p;
                                let ix = (xx * stride) as isize + b as isize - p;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += x[(ci * h + iy as usize) * w + ix as usize] * wt[((co * cin + ci) * k + a) * k + b];
                                }
                            }
                        }
                    }
                    out[(co * oh + y) * ow + xx] = s;
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_reproduces_image() {
        let tape = Tape::<f64>::new();
        let img = Tensor::from_fn(&[1, 5, 6], |i| (i as f64 * 0.37).sin());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let x = tape.constant(img.clone());
        let w = tape.constant(Tensor::new(vec![1, 1, 3, 3], k).unwrap());
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = x.conv(w, b, &[1, 1]).unwrap().value();
        assert_eq!(y, img);
    }

    #[test]
    fn matches_direct_convolution_with_stride() {
        let (cin, cout, h, w) = (3, 4, 7, 6);
        let x: Vec<f64> = (0..cin * h * w).map(|i| ((i * 13) % 17) as f64 / 17.0 - 0.5).collect();
        let wt: Vec<f64> = (0..cout * cin * 9).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.5).collect();
        let bias = vec![0.1, -0.2, 0.3, 0.0];
        for stride in [1, 2] {
            let tape = Tape::<f64>::new();
            let xv = tape.constant(Tensor::new(vec![cin, h, w], x.clone()).unwrap());
            let wv = tape.constant(Tensor::new(vec![cout, cin, 3, 3], wt.clone()).unwrap());
            let bv = tape.constant(Tensor::new(vec![cout], bias.clone()).unwrap());
            let y = xv.conv(wv, bv, &[stride, stride]).unwrap().value();
            let expect = direct_conv2d(&x, cin, h, w, &wt, cout, 3, stride, &bias);
            for (a, b) in y.data().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn strided_output_halves_even_extents() {
        assert_eq!(conv_output_extent(64, 3, 2), 32);
        assert_eq!(conv_output_extent(4, 3, 2), 2);
        assert_eq!(conv_output_extent(5, 3, 1), 5);
    }

    #[test]
    fn three_dimensional_shape() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[2, 4, 4, 4], 1.0));
        let w = tape.constant(Tensor::full(&[3, 2, 3, 3, 3], 0.5));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = x.conv(w, b, &[2, 2, 2]).unwrap();
        assert_eq!(y.shape(), vec![3, 2, 2, 2]);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[2, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[3, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        assert!(x.conv(w, b, &[1, 1]).is_err());
    }
}
