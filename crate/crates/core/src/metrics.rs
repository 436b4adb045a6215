//! Evaluation metrics: field regularity, label overlap, landmark error,
//! intensity similarity and cycle reversibility.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ops::{box_counts, box_sum_kernel, cdhw};
use crate::error::{Error, Result};
use crate::regnet::RegNet;
use crate::tensor::{strides, Tensor};
use crate::warp::{compose_fields, sample_field, spatial_transform, Composition, DisplacementField, Image};

/// Integer label per voxel; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    lattice: Vec<usize>,
    labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(lattice: &[usize], labels: Vec<u32>) -> Result<Self> {
        if lattice.iter().product::<usize>() != labels.len() || lattice.iter().any(|&e| e == 0) {
            return Err(Error::invalid(format!(
                "label map: {} labels do not fill lattice {lattice:?}",
                labels.len()
            )));
        }
        Ok(Self { lattice: lattice.to_vec(), labels })
    }

    pub fn lattice(&self) -> &[usize] {
        &self.lattice
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Distinct non-background labels.
    pub fn label_set(&self) -> BTreeSet<u32> {
        self.labels.iter().copied().filter(|&l| l != 0).collect()
    }

    /// Stored like an image: `[1, spatial...]` with integral values.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let mut shape = vec![1];
        shape.extend_from_slice(&self.lattice);
        Tensor::from_parts(shape, self.labels.iter().map(|&l| l as f32).collect())
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let shape = t.shape();
        let lattice = if shape.len() >= 3 && shape[0] == 1 { &shape[1..] } else { shape };
        let labels = t
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f32 {
                    Ok(v as u32)
                } else {
                    Err(Error::format("label map", format!("value {v} is not a non-negative integer")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(lattice, labels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::tensor::write_dtf_file(path, &self.to_tensor())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor(&crate::tensor::read_dtf_file(path)?)
    }
}

/// Points in voxel coordinates, axis order matching the lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    rank: usize,
    points: Vec<Vec<f64>>,
}

fn axis_names(rank: usize) -> &'static [&'static str] {
    if rank == 2 {
        &["y", "x"]
    } else {
        &["z", "y", "x"]
    }
}

impl LandmarkSet {
    pub fn new(rank: usize, points: Vec<Vec<f64>>) -> Result<Self> {
        if rank != 2 && rank != 3 {
            return Err(Error::invalid(format!("landmarks: rank must be 2 or 3, got {rank}")));
        }
        if let Some(p) = points.iter().find(|p| p.len() != rank || p.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid(format!("landmarks: bad point {p:?} for rank {rank}")));
        }
        Ok(Self { rank, points })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn within(&self, lattice: &[usize]) -> bool {
        self.points
            .iter()
            .all(|p| p.iter().zip(lattice).all(|(&v, &n)| v >= 0.0 && v <= (n - 1) as f64))
    }

    /// Moves every fixed-space point `p` to `p + field(p)`.
    pub fn transport(&self, field: &DisplacementField) -> Result<Self> {
        let points = self
            .points
            .iter()
            .map(|p| Ok(p.iter().zip(sample_field(field, p)?).map(|(a, b)| a + b).collect()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.rank, points)
    }

    /// CSV with a header line naming the axes (`y,x` or `z,y,x`).
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::format("landmark CSV", e.to_string());
        w.write_record(axis_names(self.rank)).map_err(csv_err)?;
        for p in &self.points {
            w.write_record(p.iter().map(|v| format!("{v:?}"))).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::format("landmark CSV", e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::format("landmark CSV", e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let csv_err = |e: csv::Error| Error::format("landmark CSV", e.to_string());
        let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(|h| h.trim().to_string()).collect();
        let rank = header.len();
        if (rank != 2 && rank != 3) || header != axis_names(rank) {
            return Err(Error::format("landmark CSV", format!("header must be y,x or z,y,x, got {header:?}")));
        }
        let mut points = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let p = rec
                .iter()
                .map(|f| f.trim().parse::<f64>().map_err(|e| Error::format("landmark CSV", format!("{f:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            points.push(p);
        }
        Self::new(rank, points)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_csv(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Which determinant the folding metric counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMode {
    /// `det(I + dphi/dv)`, the Jacobian of `v -> v + phi(v)`.
    #[default]
    Mapping,
    /// `det(dphi/dv)` of the displacement alone.
    FieldOnly,
}

fn det(m: &[[f64; 3]; 3], rank: usize) -> f64 {
    if rank == 2 {
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    } else {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }
}

/// Jacobian determinants at interior voxels (central differences), in raster order.
pub fn jacobian_determinants(field: &DisplacementField, mode: JacobianMode) -> Result<Vec<f64>> {
    let lattice = field.lattice();
    let rank = lattice.len();
    if lattice.iter().any(|&n| n < 3) {
        return Err(Error::invalid(format!(
            "folding: lattice {lattice:?} needs at least 3 voxels per axis"
        )));
    }
    let st = strides(lattice);
    let n: usize = lattice.iter().product();
    let data = field.tensor().data();
    let mut out = Vec::new();
    let mut c = [0usize; 3];
    'voxel: for v in 0..n {
        for d in 0..rank {
            c[d] = (v / st[d]) % lattice[d];
            if c[d] == 0 || c[d] == lattice[d] - 1 {
                continue 'voxel;
            }
        }
        let mut m = [[0.0f64; 3]; 3];
        for (i, row) in m.iter_mut().enumerate().take(rank) {
            let comp = &data[i * n..(i + 1) * n];
            for (d, e) in row.iter_mut().enumerate().take(rank) {
                let g = (comp[v + st[d]] as f64 - comp[v - st[d]] as f64) / 2.0;
                *e = g + if mode == JacobianMode::Mapping && i == d { 1.0 } else { 0.0 };
            }
        }
        out.push(det(&m, rank));
    }
    Ok(out)
}

/// Percentage of interior voxels whose Jacobian determinant is `<= 0`.
pub fn folding_percentage(field: &DisplacementField, mode: JacobianMode) -> Result<f64> {
    let dets = jacobian_determinants(field, mode)?;
    let folded = dets.iter().filter(|&&d| d <= 0.0).count();
    Ok(100.0 * folded as f64 / dets.len() as f64)
}

/// Dice score per label; `None` where the label is absent from both maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceScores {
    pub per_label: BTreeMap<u32, Option<f64>>,
    pub mean: Option<f64>,
}

/// `2TP / (2TP + FP + FN)` for each label in `labels`, or for every
/// non-background label of either map when `labels` is `None`.
pub fn dice(a: &LabelMap, b: &LabelMap, labels: Option<&[u32]>) -> Result<DiceScores> {
    if a.lattice != b.lattice {
        return Err(Error::shape("dice", &a.lattice, &b.lattice));
    }
    let labels: Vec<u32> = match labels {
        Some(l) => l.to_vec(),
        None => a.label_set().union(&b.label_set()).copied().collect(),
    };
    let mut per_label = BTreeMap::new();
    for &l in &labels {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for (&x, &y) in a.labels.iter().zip(&b.labels) {
            match (x == l, y == l) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        let denom = 2 * tp + fp + fn_;
        per_label.insert(l, (denom > 0).then(|| 2.0 * tp as f64 / denom as f64));
    }
    let defined: Vec<f64> = per_label.values().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(DiceScores { per_label, mean })
}

/// Nearest-neighbour warp of a label map: voxel `v` takes the label at the
/// rounded, clamped position `v + field(v)`.
pub fn warp_labels(labels: &LabelMap, field: &DisplacementField) -> Result<LabelMap> {
    if labels.lattice != field.lattice() {
        return Err(Error::shape("warp_labels", &labels.lattice, field.lattice()));
    }
    let lattice = &labels.lattice;
    let st = strides(lattice);
    let n = labels.labels.len();
    let data = field.tensor().data();
    let out = (0..n)
        .map(|v| {
            let mut idx = 0;
            for d in 0..lattice.len() {
                let pos = ((v / st[d]) % lattice[d]) as f64 + data[d * n + v] as f64;
                let q = pos.round().clamp(0.0, (lattice[d] - 1) as f64) as usize;
                idx += q * st[d];
            }
            labels.labels[idx]
        })
        .collect();
    LabelMap::new(lattice, out)
}

/// Mean Euclidean distance between corresponding points, scaled by voxel spacing.
pub fn tre(a: &LandmarkSet, b: &LandmarkSet, spacing: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.rank != b.rank {
        return Err(Error::invalid(format!(
            "tre: landmark sets differ ({} points of rank {} vs {} of rank {})",
            a.len(),
            a.rank,
            b.len(),
            b.rank
        )));
    }
    if spacing.len() != a.rank || spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::invalid(format!("tre: spacing {spacing:?} must be positive per axis")));
    }
    if a.is_empty() {
        return Err(Error::invalid("tre: no landmarks"));
    }
    let total: f64 = a
        .points
        .iter()
        .zip(&b.points)
        .map(|(p, q)| {
            p.iter()
                .zip(q)
                .zip(spacing)
                .map(|((x, y), s)| (s * (x - y)).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / a.len() as f64)
}

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// `|A - B|^2 / |B|^2`.
pub fn nmse(a: &Image, b: &Image) -> Result<f64> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::shape("nmse", a.tensor().shape(), b.tensor().shape()));
    }
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (&x, &y) in a.values().iter().zip(b.values()) {
        num += (x as f64 - y as f64).powi(2);
        den += (y as f64).powi(2);
    }
    if den == 0.0 {
        return Err(Error::invalid("nmse: reference image is all zero"));
    }
    Ok(num / den)
}

/// Mean local SSIM over every voxel (and channel), using clipped 7-voxel
/// windows with population statistics.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::shape("ssim", a.tensor().shape(), b.tensor().shape()));
    }
    let dims = cdhw(a.tensor().shape())?;
    let counts = box_counts(a.lattice(), SSIM_WINDOW);
    let x: Vec<f64> = a.values().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.values().iter().map(|&v| v as f64).collect();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let sx = box_sum_kernel(&x, dims, SSIM_WINDOW);
    let sy = box_sum_kernel(&y, dims, SSIM_WINDOW);
    let sxx = box_sum_kernel(&prod(&x, &x), dims, SSIM_WINDOW);
    let syy = box_sum_kernel(&prod(&y, &y), dims, SSIM_WINDOW);
    let sxy = box_sum_kernel(&prod(&x, &y), dims, SSIM_WINDOW);
    let per = counts.len();
    let mut total = 0.0;
    for i in 0..x.len() {
        let n = counts[i % per] as f64;
        let (mx, my) = (sx[i] / n, sy[i] / n);
        let vx = sxx[i] / n - mx * mx;
        let vy = syy[i] / n - my * my;
        let cxy = sxy[i] / n - mx * my;
        total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
            / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
    }
    Ok(total / x.len() as f64)
}

pub fn nmse_ssim(a: &Image, b: &Image) -> Result<(f64, f64)> {
    Ok((nmse(a, b)?, ssim(a, b)?))
}

/// Registers `X -> Y` with `gx`, then registers the result back onto `X`
/// with `gy` and compares the re-deformed image to `X`.
pub fn reverse_consistency(gx: &RegNet, gy: &RegNet, x: &Image, y: &Image) -> Result<(f64, f64)> {
    let y_hat = spatial_transform(x, &gx.predict(x, y)?)?;
    let back = gy.predict(&y_hat, x)?;
    let x_tilde = spatial_transform(&y_hat, &back)?;
    nmse_ssim(&x_tilde, x)
}

/// Mean endpoint error of `pred` on a pair whose moving image was produced as
/// `T(fixed, truth)`.
///
/// A perfect registration satisfies `pred(p) + truth(p + pred(p)) = 0`; the
/// error at `p` is the norm of that residual.
pub fn endpoint_error(pred: &DisplacementField, truth: &DisplacementField) -> Result<f64> {
    let residual = compose_fields(truth, pred, Composition::True)?;
    Ok(residual.mean_magnitude())
}

/// Evaluation of one registration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub nmse: f64,
    pub ssim: f64,
    pub dice: Option<BTreeMap<u32, Option<f64>>>,
    pub dice_mean: Option<f64>,
    pub tre: Option<f64>,
    pub folding_pct: f64,
    pub endpoint_error: Option<f64>,
    pub reverse_nmse: Option<f64>,
    pub reverse_ssim: Option<f64>,
    pub mean_displacement: f64,
    pub runtime_seconds: Option<f64>,
}

/// Ground truth available for one pair; absent parts leave metrics absent.
#[derive(Clone, Debug, Default)]
pub struct GroundTruth<'a> {
    pub phi_true: Option<&'a DisplacementField>,
    pub labels_moving: Option<&'a LabelMap>,
    pub labels_fixed: Option<&'a LabelMap>,
    pub landmarks_moving: Option<&'a LandmarkSet>,
    pub landmarks_fixed: Option<&'a LandmarkSet>,
    pub spacing: Option<&'a [f64]>,
}

/// Scores `field` (registering `moving` onto `fixed`) and its deformed image.
pub fn evaluate(
    moving: &Image,
    fixed: &Image,
    deformed: &Image,
    field: &DisplacementField,
    truth: &GroundTruth<'_>,
) -> Result<EvalReport> {
    if moving.lattice() != fixed.lattice() || deformed.lattice() != fixed.lattice() || field.lattice() != fixed.lattice() {
        return Err(Error::invalid("evaluate: images and field must share one lattice"));
    }
    let (nmse, ssim) = nmse_ssim(deformed, fixed)?;
    let (dice_map, dice_mean) = match (truth.labels_moving, truth.labels_fixed) {
        (Some(lm), Some(lf)) => {
            let d = dice(&warp_labels(lm, field)?, lf, None)?;
            (Some(d.per_label), d.mean)
        }
        _ => (None, None),
    };
    let tre = match (truth.landmarks_moving, truth.landmarks_fixed) {
        (Some(am), Some(bf)) => {
            let unit = vec![1.0; field.rank()];
            Some(tre(&bf.transport(field)?, am, truth.spacing.unwrap_or(&unit))?)
        }
        _ => None,
    };
    Ok(EvalReport {
        nmse,
        ssim,
        dice: dice_map,
        dice_mean,
        tre,
        folding_pct: folding_percentage(field, JacobianMode::Mapping)?,
        endpoint_error: truth.phi_true.map(|t| endpoint_error(field, t)).transpose()?,
        reverse_nmse: None,
        reverse_ssim: None,
        mean_displacement: field.mean_magnitude(),
        runtime_seconds: None,
    })
}

/// Median of finite values; `None` when there are none.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}
