//! Differentiable primitives on [`Var`].
//!
//! Spatial operations treat a value as `[channels, spatial...]` with one to
//! three spatial axes.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{strides, Scalar, Tensor};

/// `[channels, d0, d1, d2]` view of a `[C, spatial...]` shape, padding missing
/// leading spatial axes with 1.
pub(crate) fn cdhw(shape: &[usize]) -> Result<[usize; 4]> {
    match shape.len() {
        2 => Ok([shape[0], 1, 1, shape[1]]),
        3 => Ok([shape[0], 1, shape[1], shape[2]]),
        4 => Ok([shape[0], shape[1], shape[2], shape[3]]),
        _ => Err(Error::invalid(format!(
            "expected [channels, spatial...] with 1-3 spatial axes, got {shape:?}"
        ))),
    }
}

/// Spatial extents padded to three axes.
pub(crate) fn pad3(spatial: &[usize], fill: usize) -> [usize; 3] {
    let mut out = [fill; 3];
    let off = 3 - spatial.len();
    out[off..].copy_from_slice(spatial);
    out
}

fn elementwise_check<T: Scalar>(op: &'static str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    if !a.same_tape(b) {
        return Err(Error::invalid(format!("{op}: operands live on different tapes")));
    }
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::shape(op, &sa, &sb));
    }
    Ok(())
}

/// Clipped box sum of odd edge `window` along every spatial axis.
pub(crate) fn box_sum_kernel<T: Scalar>(data: &[T], dims: [usize; 4], window: usize) -> Vec<T> {
    let r = window / 2;
    let mut cur: Vec<T> = data.to_vec();
    let [c, d0, d1, d2] = dims;
    let ext = [d0, d1, d2];
    let st = [d1 * d2, d2, 1];
    let mut prefix = Vec::new();
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = ext[axis];
        if n == 1 {
            continue;
        }
        let s = st[axis];
        let plane = d0 * d1 * d2;
        let mut out = vec![T::zero(); cur.len()];
        for ch in 0..c {
            let base_c = ch * plane;
            for start in 0..plane {
                // only iterate line starts: coordinate along `axis` == 0
                if (start / s) % n != 0 {
                    continue;
                }
                prefix.clear();
                prefix.push(0.0f64);
                line.clear();
                let mut acc = 0.0f64;
                for i in 0..n {
                    acc += cur[base_c + start + i * s].as_f64();
                    prefix.push(acc);
                }
                for i in 0..n {
                    let lo = i.saturating_sub(r);
                    let hi = (i + r).min(n - 1);
                    line.push(prefix[hi + 1] - prefix[lo]);
                }
                for (i, v) in line.iter().enumerate() {
                    out[base_c + start + i * s] = T::from_f64(*v);
                }
            }
        }
        cur = out;
    }
    cur
}

/// Number of lattice voxels inside each clipped window.
pub(crate) fn box_counts(spatial: &[usize], window: usize) -> Vec<usize> {
    let r = window / 2;
    let e = pad3(spatial, 1);
    let count = |n: usize, i: usize| (i + r).min(n - 1) - i.saturating_sub(r) + 1;
    let mut out = Vec::with_capacity(e.iter().product());
    for i in 0..e[0] {
        for j in 0..e[1] {
            for k in 0..e[2] {
                out.push(count(e[0], i) * count(e[1], j) * count(e[2], k));
            }
        }
    }
    out
}

impl<'t, T: Scalar> Var<'t, T> {
    fn unary(
        self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var<'t, T>> {
        // df(x, y) gives dy/dx at input x with output y
        let x = self.value();
        let y = x.map(f);
        let (xs, ys) = (x, y.clone());
        self.tape.record(op, y, &[self], move |g, _| {
            let gx = g
                .iter()
                .zip(xs.data().iter().zip(ys.data()))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        elementwise_check("add", &self, &other)?;
        let (a, b) = (self.value(), other.value());
        let y = Tensor::from_parts(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect(),
        );
        self.tape.record("add", y, &[self, other], |g, _| {
            vec![Some(g.to_vec()), Some(g.to_vec())]
        })
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        elementwise_check("sub", &self, &other)?;
        let (a, b) = (self.value(), other.value());
        let y = Tensor::from_parts(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect(),
        );
        self.tape.record("sub", y, &[self, other], |g, _| {
            vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())]
        })
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        elementwise_check("mul", &self, &other)?;
        let (a, b) = (self.value(), other.value());
        let y = Tensor::from_parts(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect(),
        );
        self.tape.record("mul", y, &[self, other], move |g, need| {
            let ga = need[0].then(|| g.iter().zip(b.data()).map(|(&g, &b)| g * b).collect());
            let gb = need[1].then(|| g.iter().zip(a.data()).map(|(&g, &a)| g * a).collect());
            vec![ga, gb]
        })
    }

    /// `self / (other + eps)`. Requires `other + eps` bounded away from zero.
    pub fn div_eps(self, other: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        elementwise_check("div", &self, &other)?;
        let eps = T::from_f64(eps);
        let (a, b) = (self.value(), other.value());
        let y = Tensor::from_parts(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| x / (y + eps)).collect(),
        );
        self.tape.record("div", y, &[self, other], move |g, need| {
            let ga = need[0].then(|| {
                g.iter().zip(b.data()).map(|(&g, &b)| g / (b + eps)).collect()
            });
            let gb = need[1].then(|| {
                g.iter()
                    .zip(a.data().iter().zip(b.data()))
                    .map(|(&g, (&a, &b))| {
                        let d = b + eps;
                        -g * a / (d * d)
                    })
                    .collect()
            });
            vec![ga, gb]
        })
    }

    /// `sqrt(self + eps)`.
    pub fn sqrt_eps(self, eps: f64) -> Result<Var<'t, T>> {
        let e = T::from_f64(eps);
        let two = T::from_f64(2.0);
        self.unary("sqrt", move |x| (x + e).sqrt(), move |_, y| T::one() / (two * y))
    }

    pub fn abs(self) -> Result<Var<'t, T>> {
        self.unary("abs", |x| x.abs(), |x, _| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn neg(self) -> Result<Var<'t, T>> {
        self.unary("neg", |x| -x, |_, _| -T::one())
    }

    pub fn square(self) -> Result<Var<'t, T>> {
        let two = T::from_f64(2.0);
        self.unary("square", |x| x * x, move |x, _| two * x)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t, T>> {
        let c = T::from_f64(c);
        self.unary("scale", move |x| x * c, move |_, _| c)
    }

    pub fn offset(self, c: f64) -> Result<Var<'t, T>> {
        let c = T::from_f64(c);
        self.unary("offset", move |x| x + c, |_, _| T::one())
    }

    pub fn leaky_relu(self, slope: f64) -> Result<Var<'t, T>> {
        let s = T::from_f64(slope);
        self.unary(
            "leaky_relu",
            move |x| if x > T::zero() { x } else { x * s },
            move |x, _| if x > T::zero() { T::one() } else { s },
        )
    }

    pub fn sum(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let n = x.len();
        let total = x.data().iter().map(|v| v.as_f64()).sum::<f64>();
        self.tape.record("sum", Tensor::scalar(T::from_f64(total)), &[self], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let n = x.len();
        let total = x.data().iter().map(|v| v.as_f64()).sum::<f64>();
        let inv = T::from_f64(1.0 / n as f64);
        self.tape.record(
            "mean",
            Tensor::scalar(T::from_f64(total / n as f64)),
            &[self],
            move |g, _| vec![Some(vec![g[0] * inv; n])],
        )
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "sum_axis: axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0f64; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let src = &x.data()[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v.as_f64();
                }
            }
        }
        let mut out_shape: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &e)| e).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let y = Tensor::from_parts(out_shape, out.into_iter().map(T::from_f64).collect());
        self.tape.record("sum_axis", y, &[self], move |g, _| {
            let mut gx = vec![T::zero(); outer * n * inner];
            for o in 0..outer {
                for i in 0..n {
                    gx[(o * n + i) * inner..(o * n + i + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Per-channel sum over the clipped `window^d` neighbourhood of every voxel.
    pub fn box_sum(self, window: usize) -> Result<Var<'t, T>> {
        if window % 2 == 0 || window == 0 {
            return Err(Error::invalid(format!("box_sum: window must be odd, got {window}")));
        }
        let x = self.value();
        let dims = cdhw(x.shape())?;
        let y = Tensor::from_parts(x.shape().to_vec(), box_sum_kernel(x.data(), dims, window));
        // the clipped box operator is self-adjoint
        self.tape.record("box_sum", y, &[self], move |g, _| {
            vec![Some(box_sum_kernel(g, dims, window))]
        })
    }

    /// Concatenates along the channel (leading) axis.
    pub fn concat(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat: no inputs"))?;
        let base = first.shape();
        let mut channels = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for p in parts {
            if !p.same_tape(first) {
                return Err(Error::invalid("concat: operands live on different tapes"));
            }
            let v = p.value();
            if v.shape()[1..] != base[1..] {
                return Err(Error::shape("concat", &base, v.shape()));
            }
            channels.push(v.shape()[0]);
            data.extend_from_slice(v.data());
        }
        let per: usize = base[1..].iter().product();
        let mut shape = base.clone();
        shape[0] = channels.iter().sum();
        let y = Tensor::from_parts(shape, data);
        first.tape.record("concat", y, parts, move |g, need| {
            let mut off = 0;
            channels
                .iter()
                .zip(need)
                .map(|(&c, &n)| {
                    let s = &g[off * per..(off + c) * per];
                    off += c;
                    n.then(|| s.to_vec())
                })
                .collect()
        })
    }

    /// Nearest-neighbour upsampling by an integer factor per spatial axis.
    pub fn upsample_nearest(self, factors: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if factors.len() + 1 != shape.len() || factors.iter().any(|&f| f == 0) {
            return Err(Error::invalid(format!(
                "upsample: factors {factors:?} do not fit shape {shape:?}"
            )));
        }
        let [c, a, b, d] = cdhw(&shape)?;
        let f = pad3(factors, 1);
        let (oa, ob, od) = (a * f[0], b * f[1], d * f[2]);
        let mut idx = Vec::with_capacity(c * oa * ob * od);
        for ch in 0..c {
            for i in 0..oa {
                for j in 0..ob {
                    for k in 0..od {
                        idx.push(((ch * a + i / f[0]) * b + j / f[1]) * d + k / f[2]);
                    }
                }
            }
        }
        let out: Vec<T> = idx.iter().map(|&s| x.data()[s]).collect();
        let mut out_shape = vec![c];
        out_shape.extend(shape[1..].iter().zip(factors).map(|(&e, &f)| e * f));
        let n_in = x.len();
        self.tape.record("upsample", Tensor::from_parts(out_shape, out), &[self], move |g, _| {
            let mut gx = vec![T::zero(); n_in];
            for (gv, &s) in g.iter().zip(&idx) {
                gx[s] = gx[s] + *gv;
            }
            vec![Some(gx)]
        })
    }

    /// Spatial sub-box `[start, start + extent)` of every channel.
    pub fn crop(self, start: &[usize], extent: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let spatial = &shape[1..];
        if start.len() != spatial.len()
            || extent.len() != spatial.len()
            || start
                .iter()
                .zip(extent)
                .zip(spatial)
                .any(|((&s, &e), &n)| e == 0 || s + e > n)
        {
            return Err(Error::invalid(format!(
                "crop: box {start:?}+{extent:?} outside spatial extent {spatial:?}"
            )));
        }
        let mut out_shape = vec![shape[0]];
        out_shape.extend_from_slice(extent);
        let idx = box_indices(&shape, start, extent);
        let out: Vec<T> = idx.iter().map(|&s| x.data()[s]).collect();
        let n_in = x.len();
        self.tape.record("crop", Tensor::from_parts(out_shape, out), &[self], move |g, _| {
            let mut gx = vec![T::zero(); n_in];
            for (gv, &s) in g.iter().zip(&idx) {
                gx[s] = *gv;
            }
            vec![Some(gx)]
        })
    }

    /// Zero padding of every spatial axis.
    pub fn pad(self, before: &[usize], after: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let spatial = &shape[1..];
        if before.len() != spatial.len() || after.len() != spatial.len() {
            return Err(Error::invalid(format!(
                "pad: widths {before:?}/{after:?} do not fit shape {shape:?}"
            )));
        }
        let mut out_shape = vec![shape[0]];
        out_shape.extend(spatial.iter().zip(before.iter().zip(after)).map(|(&n, (&b, &a))| n + a + b));
        let idx = box_indices(&out_shape, before, spatial);
        let mut out = vec![T::zero(); out_shape.iter().product()];
        for (&dst, &v) in idx.iter().zip(x.data()) {
            out[dst] = v;
        }
        self.tape.record("pad", Tensor::from_parts(out_shape, out), &[self], move |g, _| {
            vec![Some(idx.iter().map(|&d| g[d]).collect())]
        })
    }
}

/// Flat indices (in a tensor of `shape`) of the spatial box, all channels,
/// in row-major order of the box.
fn box_indices(shape: &[usize], start: &[usize], extent: &[usize]) -> Vec<usize> {
    let st = strides(shape);
    let total: usize = shape[0] * extent.iter().product::<usize>();
    let mut out = Vec::with_capacity(total);
    let mut coord = vec![0usize; extent.len()];
    for ch in 0..shape[0] {
        coord.iter_mut().for_each(|c| *c = 0);
        loop {
            let mut flat = ch * st[0];
            for (a, &c) in coord.iter().enumerate() {
                flat += (start[a] + c) * st[a + 1];
            }
            out.push(flat);
            // odometer increment
            let mut a = extent.len();
            loop {
                if a == 0 {
                    break;
                }
                a -= 1;
                coord[a] += 1;
                if coord[a] < extent[a] {
                    break;
                }
                coord[a] = 0;
                if a == 0 {
                    a = usize::MAX;
                    break;
                }
            }
            if a == usize::MAX {
                break;
            }
        }
    }
    out
}

impl<T: Scalar> Tape<T> {
    /// Convenience: constant from raw parts.
    pub fn constant_from(&self, shape: &[usize], data: Vec<T>) -> Result<Var<'_, T>> {
        Ok(self.constant(Tensor::new(shape.to_vec(), data)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_is_elementwise() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let msg = a.mul(b).unwrap_err().to_string();
        assert!(msg.contains("mul") && msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn sum_of_ones() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::full(&[2, 2], 1.0));
        assert_eq!(a.sum().unwrap().item(), Some(4.0));
    }

    #[test]
    fn non_finite_output_is_error() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::full(&[1], 1.0));
        let z = tape.constant(Tensor::full(&[1], 0.0));
        let err = a.div_eps(z, 0.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "div" }));
    }

    #[test]
    fn box_counts_clip_at_edges() {
        assert_eq!(box_counts(&[5], 3), vec![2, 3, 3, 3, 2]);
        assert_eq!(box_counts(&[2, 2], 9), vec![4, 4, 4, 4]);
    }

    #[test]
    fn box_sum_matches_direct_window() {
        let tape = Tape::<f64>::new();
        let x = Tensor::from_fn(&[1, 4, 5], |i| (i * 7 % 11) as f64);
        let y = tape.constant(x.clone()).box_sum(3).unwrap().value();
        for i in 0..4i64 {
            for j in 0..5i64 {
                let mut s = 0.0;
                for di in -1..=1 {
                    for dj in -1..=1 {
                        let (a, b) = (i + di, j + dj);
                        if (0..4).contains(&a) && (0..5).contains(&b) {
                            s += x.data()[(a * 5 + b) as usize];
                        }
                    }
                }
                assert_eq!(y.data()[(i * 5 + j) as usize], s);
            }
        }
    }

    #[test]
    fn crop_then_pad_restores_interior() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 4, 4], |i| i as f32));
        let c = x.crop(&[1, 1], &[2, 2]).unwrap();
        assert_eq!(c.shape(), vec![2, 2, 2]);
        assert_eq!(c.value().data()[..4], [5.0, 6.0, 9.0, 10.0]);
        let p = c.pad(&[1, 1], &[1, 1]).unwrap();
        assert_eq!(p.shape(), vec![2, 4, 4]);
        assert_eq!(p.value().data()[5], 5.0);
        assert_eq!(p.value().data()[0], 0.0);
    }

    #[test]
    fn upsample_repeats_values() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap());
        let y = x.upsample_nearest(&[2, 2]).unwrap();
        assert_eq!(y.shape(), vec![1, 2, 4]);
        assert_eq!(y.value().data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn sum_axis_reduces() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f32));
        assert_eq!(x.sum_axis(0).unwrap().value().data(), &[3.0, 5.0, 7.0]);
        assert_eq!(x.sum_axis(1).unwrap().value().data(), &[3.0, 12.0]);
    }
}
