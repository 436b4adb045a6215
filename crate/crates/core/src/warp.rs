//! Spatial transformation of images by dense displacement fields.
//!
//! Images are `[channels, spatial...]` tensors and displacement fields are
//! `[rank, spatial...]` tensors in voxel units, where component `d` displaces
//! along spatial axis `d`. Sampling is multilinear (bilinear in 2D, trilinear
//! in 3D) and clamps coordinates to the lattice boundary.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{strides, Scalar, Tensor};

/// Dense intensity grid on a 2D or 3D lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    tensor: Tensor<f32>,
}

/// Per-voxel displacement vectors in voxel units.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    tensor: Tensor<f32>,
}

fn check_lattice(spatial: &[usize]) -> Result<()> {
    if !(2..=3).contains(&spatial.len()) {
        return Err(Error::invalid(format!(
            "lattice must be 2D or 3D, got extents {spatial:?}"
        )));
    }
    Ok(())
}

impl Image {
    /// Wraps a `[channels, spatial...]` tensor.
    pub fn new(tensor: Tensor<f32>) -> Result<Self> {
        if tensor.rank() < 3 {
            return Err(Error::invalid(format!(
                "image tensor must be [channels, spatial...], got {:?}",
                tensor.shape()
            )));
        }
        check_lattice(&tensor.shape()[1..])?;
        if !tensor.is_finite() {
            return Err(Error::NonFinite { op: "image" });
        }
        Ok(Self { tensor })
    }

    /// Single-channel image from row-major values.
    pub fn from_values(lattice: &[usize], values: Vec<f32>) -> Result<Self> {
        let mut shape = vec![1];
        shape.extend_from_slice(lattice);
        Self::new(Tensor::new(shape, values)?)
    }

    /// Image DTF files carry an explicit leading channel axis; a bare rank-2
    /// tensor is accepted as a single-channel 2D image.
    pub fn from_dtf_tensor(t: Tensor<f32>) -> Result<Self> {
        if t.rank() == 2 {
            let shape = t.shape().to_vec();
            return Self::from_values(&shape, t.into_vec());
        }
        Self::new(t)
    }

    pub fn zeros(lattice: &[usize]) -> Self {
        let mut shape = vec![1];
        shape.extend_from_slice(lattice);
        Self {
            tensor: Tensor::zeros(&shape),
        }
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.tensor
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn lattice(&self) -> &[usize] {
        &self.tensor.shape()[1..]
    }

    pub fn rank(&self) -> usize {
        self.lattice().len()
    }

    pub fn voxels(&self) -> usize {
        self.lattice().iter().product()
    }

    pub fn values(&self) -> &[f32] {
        self.tensor.data()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        self.tensor.channel(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if path.extension().is_some_and(|e| e == "pgm") {
            read_pgm_file(path)
        } else {
            Self::from_dtf_tensor(crate::tensor::read_dtf_file(path)?)
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::tensor::write_dtf_file(path, &self.tensor)
    }
}

impl DisplacementField {
    pub fn new(tensor: Tensor<f32>) -> Result<Self> {
        let shape = tensor.shape();
        if shape.len() < 3 {
            return Err(Error::invalid(format!(
                "field tensor must be [rank, spatial...], got {shape:?}"
            )));
        }
        check_lattice(&shape[1..])?;
        if shape[0] != shape.len() - 1 {
            return Err(Error::invalid(format!(
                "field has {} components but lattice rank {}",
                shape[0],
                shape.len() - 1
            )));
        }
        if !tensor.is_finite() {
            return Err(Error::NonFinite { op: "field" });
        }
        Ok(Self { tensor })
    }

    pub fn zeros(lattice: &[usize]) -> Self {
        let mut shape = vec![lattice.len()];
        shape.extend_from_slice(lattice);
        Self {
            tensor: Tensor::zeros(&shape),
        }
    }

    /// Field with the same displacement vector at every voxel.
    pub fn constant(lattice: &[usize], vector: &[f32]) -> Result<Self> {
        if vector.len() != lattice.len() {
            return Err(Error::invalid("constant field: vector length must equal lattice rank"));
        }
        let n: usize = lattice.iter().product();
        let mut shape = vec![lattice.len()];
        shape.extend_from_slice(lattice);
        let data = vector.iter().flat_map(|&v| std::iter::repeat(v).take(n)).collect();
        Self::new(Tensor::new(shape, data)?)
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.tensor
    }

    pub fn lattice(&self) -> &[usize] {
        &self.tensor.shape()[1..]
    }

    pub fn rank(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn component(&self, d: usize) -> &[f32] {
        self.tensor.channel(d)
    }

    /// Displacement vector at flat voxel index `v`.
    pub fn vector_at(&self, v: usize) -> Vec<f64> {
        let n = self.lattice().iter().product::<usize>();
        (0..self.rank())
            .map(|d| self.tensor.data()[d * n + v] as f64)
            .collect()
    }

    /// Mean Euclidean displacement magnitude.
    pub fn mean_magnitude(&self) -> f64 {
        let n: usize = self.lattice().iter().product();
        (0..n)
            .map(|v| self.vector_at(v).iter().map(|c| c * c).sum::<f64>().sqrt())
            .sum::<f64>()
            / n as f64
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(crate::tensor::read_dtf_file(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::tensor::write_dtf_file(path, &self.tensor)
    }
}

/// Per-axis interpolation stencil of one sample coordinate.
#[derive(Clone, Copy)]
struct AxisStencil<T> {
    lo: usize,
    hi: usize,
    frac: T,
    /// false when the coordinate was clamped; the derivative is then zero
    inside: bool,
}

#[inline]
fn stencil<T: Scalar>(pos: T, n: usize) -> AxisStencil<T> {
    let max = T::from_f64((n - 1) as f64);
    let inside = pos >= T::zero() && pos <= max;
    let c = pos.max(T::zero()).min(max);
    let lo = c.floor();
    let lo_i = lo.as_f64() as usize;
    let hi_i = (lo_i + 1).min(n - 1);
    AxisStencil {
        lo: lo_i,
        hi: hi_i,
        frac: c - lo,
        inside,
    }
}

/// Lattice geometry shared by the sampling kernels.
#[derive(Clone, Debug)]
pub(crate) struct Grid {
    pub spatial: Vec<usize>,
    pub strides: Vec<usize>,
    pub voxels: usize,
}

impl Grid {
    pub fn new(spatial: &[usize]) -> Self {
        Self {
            spatial: spatial.to_vec(),
            strides: strides(spatial),
            voxels: spatial.iter().product(),
        }
    }

    /// Spatial coordinate of flat index `v` along axis `d`.
    #[inline]
    pub fn coord(&self, v: usize, d: usize) -> usize {
        (v / self.strides[d]) % self.spatial[d]
    }
}

/// Evaluates the multilinear stencil at `pos`, calling `f(flat_index, weight, corner_bits)`.
#[inline]
fn for_each_corner<T: Scalar>(grid: &Grid, st: &[AxisStencil<T>], mut f: impl FnMut(usize, T, usize)) {
    let rank = st.len();
    for bits in 0..(1usize << rank) {
        let mut idx = 0;
        let mut w = T::one();
        for (d, s) in st.iter().enumerate() {
            if bits >> d & 1 == 1 {
                idx += s.hi * grid.strides[d];
                w = w * s.frac;
            } else {
                idx += s.lo * grid.strides[d];
                w = w * (T::one() - s.frac);
            }
        }
        f(idx, w, bits);
    }
}

fn stencils_at<T: Scalar>(grid: &Grid, field: &[T], v: usize, out: &mut [AxisStencil<T>]) {
    for (d, s) in out.iter_mut().enumerate() {
        let pos = T::from_f64(grid.coord(v, d) as f64) + field[d * grid.voxels + v];
        *s = stencil(pos, grid.spatial[d]);
    }
}

/// Forward multilinear warp of a `[C, spatial...]` buffer by a `[rank, spatial...]` field.
pub(crate) fn warp_kernel<T: Scalar>(src: &[T], channels: usize, grid: &Grid, field: &[T]) -> Vec<T> {
    let n = grid.voxels;
    let rank = grid.spatial.len();
    let mut out = vec![T::zero(); channels * n];
    let mut st = [AxisStencil { lo: 0, hi: 0, frac: T::zero(), inside: true }; 3];
    for v in 0..n {
        stencils_at(grid, field, v, &mut st[..rank]);
        for_each_corner(grid, &st[..rank], |idx, w, _| {
            for c in 0..channels {
                out[c * n + v] = out[c * n + v] + w * src[c * n + idx];
            }
        });
    }
    out
}

/// Gradients of the warp with respect to the source values and the field.
pub(crate) fn warp_backward<T: Scalar>(
    src: &[T],
    channels: usize,
    grid: &Grid,
    field: &[T],
    grad: &[T],
    need_src: bool,
    need_field: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let n = grid.voxels;
    let rank = grid.spatial.len();
    let mut gsrc = need_src.then(|| vec![T::zero(); channels * n]);
    let mut gfield = need_field.then(|| vec![T::zero(); rank * n]);
    let mut st = [AxisStencil { lo: 0, hi: 0, frac: T::zero(), inside: true }; 3];
    for v in 0..n {
        stencils_at(grid, field, v, &mut st[..rank]);
        let st = &st[..rank];
        for_each_corner(grid, st, |idx, w, bits| {
            if let Some(gs) = gsrc.as_mut() {
                for c in 0..channels {
                    gs[c * n + idx] = gs[c * n + idx] + w * grad[c * n + v];
                }
            }
            if let Some(gf) = gfield.as_mut() {
                let mut gsum = T::zero();
                for c in 0..channels {
                    gsum = gsum + grad[c * n + v] * src[c * n + idx];
                }
                for d in 0..rank {
                    if !st[d].inside {
                        continue;
                    }
                    // weight with axis d replaced by its derivative (+1 / -1)
                    let mut dw = if bits >> d & 1 == 1 { T::one() } else { -T::one() };
                    for (e, s) in st.iter().enumerate() {
                        if e != d {
                            dw = dw * if bits >> e & 1 == 1 { s.frac } else { T::one() - s.frac };
                        }
                    }
                    gf[d * n + v] = gf[d * n + v] + dw * gsum;
                }
            }
        });
    }
    (gsrc, gfield)
}

fn check_pair(op: &'static str, image_shape: &[usize], field_shape: &[usize]) -> Result<()> {
    if image_shape.len() < 3
        || field_shape.len() != image_shape.len()
        || image_shape[1..] != field_shape[1..]
        || field_shape[0] != field_shape.len() - 1
    {
        return Err(Error::shape(op, image_shape, field_shape));
    }
    Ok(())
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Differentiable warp of `self` (`[C, spatial...]`) by `field`
    /// (`[rank, spatial...]`).
    pub fn spatial_transform(self, field: Var<'t, T>) -> Result<Var<'t, T>> {
        let x = self.value();
        let phi = field.value();
        check_pair("spatial_transform", x.shape(), phi.shape())?;
        let channels = x.shape()[0];
        let grid = Grid::new(&x.shape()[1..]);
        let out = warp_kernel(x.data(), channels, &grid, phi.data());
        let y = Tensor::from_parts(x.shape().to_vec(), out);
        self.tape().record("spatial_transform", y, &[self, field], move |g, need| {
            let (gx, gf) = warp_backward(x.data(), channels, &grid, phi.data(), g, need[0], need[1]);
            vec![gx, gf]
        })
    }
}

/// Warps `image` by `field`: `output(p) = image(p + field(p))`.
pub fn spatial_transform(image: &Image, field: &DisplacementField) -> Result<Image> {
    check_pair("spatial_transform", image.tensor.shape(), field.tensor.shape())?;
    let grid = Grid::new(image.lattice());
    let out = warp_kernel(image.values(), image.channels(), &grid, field.tensor.data());
    Ok(Image {
        tensor: Tensor::from_parts(image.tensor.shape().to_vec(), out),
    })
}

/// Applies one displacement field to every channel of a multi-channel image.
pub fn apply_multichannel(image: &Image, field: &DisplacementField) -> Result<Image> {
    spatial_transform(image, field)
}

/// How two successive fields combine into one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    /// `b(v) + a(v + b(v))`: exact for successive warps.
    #[default]
    True,
    /// `a(v) + b(v)`: first-order approximation.
    PlainSum,
}

/// Combines `first` (estimated first, e.g. the global field) with `second`
/// (estimated on the image already warped by `first`).
pub fn compose_fields(
    first: &DisplacementField,
    second: &DisplacementField,
    mode: Composition,
) -> Result<DisplacementField> {
    if first.tensor.shape() != second.tensor.shape() {
        return Err(Error::shape("compose_fields", first.tensor.shape(), second.tensor.shape()));
    }
    let data = match mode {
        Composition::PlainSum => first
            .tensor
            .data()
            .iter()
            .zip(second.tensor.data())
            .map(|(a, b)| a + b)
            .collect(),
        Composition::True => {
            let grid = Grid::new(first.lattice());
            let sampled = warp_kernel(first.tensor.data(), first.rank(), &grid, second.tensor.data());
            sampled
                .iter()
                .zip(second.tensor.data())
                .map(|(a, b)| a + b)
                .collect()
        }
    };
    DisplacementField::new(Tensor::from_parts(first.tensor.shape().to_vec(), data))
}

/// Multilinear value of every field component at a continuous point, with
/// the same boundary clamping as [`spatial_transform`].
pub fn sample_field(field: &DisplacementField, point: &[f64]) -> Result<Vec<f64>> {
    let lattice = field.lattice();
    if point.len() != lattice.len() || point.iter().any(|p| !p.is_finite()) {
        return Err(Error::invalid(format!(
            "sample_field: point {point:?} does not fit lattice {lattice:?}"
        )));
    }
    let grid = Grid::new(lattice);
    let mut st = [AxisStencil { lo: 0, hi: 0, frac: 0.0f64, inside: true }; 3];
    for (d, &p) in point.iter().enumerate() {
        st[d] = stencil(p, lattice[d]);
    }
    let mut out = vec![0.0; field.rank()];
    for (d, o) in out.iter_mut().enumerate() {
        let comp = field.component(d);
        for_each_corner(&grid, &st[..point.len()], |idx, w, _| *o += w * comp[idx] as f64);
    }
    Ok(out)
}

/// Per-axis resampling ratio target/source; either an integer or the inverse of one.
fn axis_ratio(source: usize, target: usize) -> Result<f64> {
    if target % source == 0 || source % target == 0 {
        Ok(target as f64 / source as f64)
    } else {
        Err(Error::invalid(format!(
            "cannot rescale extent {source} to {target}: not an integral factor"
        )))
    }
}

/// Multilinearly resamples every channel of `src` onto `target`, treating voxels
/// as cell centres (`source = (target + 0.5) / ratio - 0.5`, clamped).
fn resample_channels(src: &[f32], channels: usize, source: &[usize], target: &[usize]) -> Result<Vec<f32>> {
    let ratios = source
        .iter()
        .zip(target)
        .map(|(&s, &t)| axis_ratio(s, t))
        .collect::<Result<Vec<_>>>()?;
    let sgrid = Grid::new(source);
    let tgrid = Grid::new(target);
    let rank = source.len();
    let mut out = vec![0.0f32; channels * tgrid.voxels];
    let mut st = [AxisStencil { lo: 0, hi: 0, frac: 0.0f64, inside: true }; 3];
    for v in 0..tgrid.voxels {
        for d in 0..rank {
            let t = tgrid.coord(v, d) as f64;
            st[d] = stencil((t + 0.5) / ratios[d] - 0.5, source[d]);
        }
        for c in 0..channels {
            let mut acc = 0.0f64;
            for_each_corner(&sgrid, &st[..rank], |idx, w, _| {
                acc += w * src[c * sgrid.voxels + idx] as f64;
            });
            out[c * tgrid.voxels + v] = acc as f32;
        }
    }
    Ok(out)
}

/// Resamples a field onto `target` and rescales each component by the axis
/// ratio so displacements stay in target-voxel units.
pub fn rescale_field(field: &DisplacementField, target: &[usize]) -> Result<DisplacementField> {
    if target.len() != field.rank() {
        return Err(Error::invalid(format!(
            "rescale_field: target {target:?} has wrong rank for field of rank {}",
            field.rank()
        )));
    }
    let source = field.lattice().to_vec();
    if source == target {
        return Ok(field.clone());
    }
    let mut data = resample_channels(field.tensor.data(), field.rank(), &source, target)?;
    let n: usize = target.iter().product();
    for d in 0..field.rank() {
        let r = (target[d] as f64 / source[d] as f64) as f32;
        data[d * n..(d + 1) * n].iter_mut().for_each(|v| *v *= r);
    }
    let mut shape = vec![field.rank()];
    shape.extend_from_slice(target);
    DisplacementField::new(Tensor::new(shape, data)?)
}

/// Block-average downsampling by an integer factor per axis.
pub fn downsample_image(image: &Image, factors: &[usize]) -> Result<Image> {
    let lattice = image.lattice().to_vec();
    if factors.len() != lattice.len()
        || factors.iter().zip(&lattice).any(|(&f, &n)| f == 0 || n % f != 0)
    {
        return Err(Error::invalid(format!(
            "downsample: extents {lattice:?} not divisible by factors {factors:?}"
        )));
    }
    if factors.iter().all(|&f| f == 1) {
        return Ok(image.clone());
    }
    let target: Vec<usize> = lattice.iter().zip(factors).map(|(&n, &f)| n / f).collect();
    let sgrid = Grid::new(&lattice);
    let tgrid = Grid::new(&target);
    let block: usize = factors.iter().product();
    let mut acc = vec![0.0f64; image.channels() * tgrid.voxels];
    for v in 0..sgrid.voxels {
        let mut t = 0;
        for d in 0..lattice.len() {
            t += (sgrid.coord(v, d) / factors[d]) * tgrid.strides[d];
        }
        for c in 0..image.channels() {
            acc[c * tgrid.voxels + t] += image.values()[c * sgrid.voxels + v] as f64;
        }
    }
    let mut shape = vec![image.channels()];
    shape.extend_from_slice(&target);
    Image::new(Tensor::new(
        shape,
        acc.into_iter().map(|s| (s / block as f64) as f32).collect(),
    )?)
}

/// Resamples an image onto another lattice with the same cell-centre
/// convention as [`rescale_field`].
pub fn resample_image(image: &Image, target: &[usize]) -> Result<Image> {
    let data = resample_channels(image.values(), image.channels(), image.lattice(), target)?;
    let mut shape = vec![image.channels()];
    shape.extend_from_slice(target);
    Image::new(Tensor::new(shape, data)?)
}

/// Reads a binary (P5) PGM, normalising by its maxval to `[0, 1]`.
pub fn read_pgm<R: Read>(r: &mut R) -> Result<Image> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::format("PGM", e.to_string()))?;
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("PGM", "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(Error::format("PGM", "only binary P5 is supported"));
    }
    let parse = |s: String| {
        s.parse::<usize>()
            .map_err(|_| Error::format("PGM", format!("bad header field {s:?}")))
    };
    let width = parse(token()?)?;
    let height = parse(token()?)?;
    let maxval = parse(token()?)?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::format("PGM", "invalid dimensions or maxval"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let wide = maxval > 255;
    let need = width * height * if wide { 2 } else { 1 };
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::format("PGM", "truncated raster"))?;
    let scale = 1.0 / maxval as f32;
    let values = if wide {
        raster
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 * scale)
            .collect()
    } else {
        raster.iter().map(|&b| b as f32 * scale).collect()
    };
    Image::from_values(&[height, width], values)
}

pub fn read_pgm_file(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_pgm(&mut std::io::BufReader::new(f))
}
