//! Synthetic registration benchmark with known deformations.
//!
//! Each pair renders a multi-blob `fixed` image with labels and landmarks,
//! draws a smooth fold-free field `phi_true` and synthesizes
//! `moving = T(fixed, phi_true)`. Registering moving onto fixed should recover
//! a field `pred` with `pred(p) + phi_true(p + pred(p)) = 0`.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{folding_percentage, warp_labels, JacobianMode, LabelMap, LandmarkSet};
use crate::rng::{mix_seed, seeded_rng, SeededRng};
use crate::tensor::{strides, Tensor};
use crate::warp::{sample_field, spatial_transform, DisplacementField, Image};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub lattice: Vec<usize>,
    pub pairs: usize,
    /// maximum displacement magnitude in voxels
    pub amplitude: f64,
    /// Gaussian smoothing width of the field noise in voxels
    pub sigma: f64,
    pub blobs: usize,
    /// peak amplitude of the smooth background texture
    pub texture: f64,
    pub seed: u64,
    /// monotone gamma remap of the moving image intensities
    pub contrast_remap: bool,
    pub max_retries: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            lattice: vec![64, 64],
            pairs: 20,
            amplitude: 4.0,
            sigma: 8.0,
            blobs: 6,
            texture: 0.25,
            seed: 0,
            contrast_remap: false,
            max_retries: 20,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, why: &str| Err(Error::invalid(format!("synth config field `{name}`: {why}")));
        if !(2..=3).contains(&self.lattice.len()) || self.lattice.iter().any(|&n| n < 3) {
            return field("lattice", "must have 2 or 3 extents, each >= 3");
        }
        if self.pairs == 0 {
            return field("pairs", "must be >= 1");
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return field("amplitude", "must be finite and >= 0");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return field("sigma", "must be positive");
        }
        if self.blobs == 0 {
            return field("blobs", "must be >= 1");
        }
        if !(0.0..=0.5).contains(&self.texture) {
            return field("texture", "must lie in [0, 0.5]");
        }
        if self.max_retries == 0 {
            return field("max_retries", "must be >= 1");
        }
        Ok(())
    }
}

/// Separable Gaussian smoothing; the kernel is truncated at the border and
/// renormalized over the taps that remain.
fn gaussian_smooth(data: &mut [f64], lattice: &[usize], sigma: f64) {
    let st = strides(lattice);
    let n = data.len();
    for (axis, &len) in lattice.iter().enumerate() {
        let radius = ((3.0 * sigma).ceil() as usize).clamp(1, 4 * len);
        let weights: Vec<f64> = (0..=2 * radius)
            .map(|i| {
                let x = i as f64 - radius as f64;
                (-x * x / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let s = st[axis];
        let mut line = vec![0.0; len];
        for start in 0..n {
            if (start / s) % len != 0 {
                continue;
            }
            for (i, l) in line.iter_mut().enumerate() {
                *l = data[start + i * s];
            }
            for i in 0..len {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (k, w) in weights.iter().enumerate() {
                    let j = i as isize + k as isize - radius as isize;
                    if (0..len as isize).contains(&j) {
                        acc += w * line[j as usize];
                        norm += w;
                    }
                }
                data[start + i * s] = acc / norm;
            }
        }
    }
}

fn smooth_noise(rng: &mut SeededRng, lattice: &[usize], sigma: f64) -> Vec<f64> {
    let n: usize = lattice.iter().product();
    let mut v: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
    gaussian_smooth(&mut v, lattice, sigma);
    v
}

/// Smooth random field with maximum magnitude `amplitude`, redrawn until it
/// has no folding.
pub fn random_smooth_field(lattice: &[usize], amplitude: f64, sigma: f64, seed: u64, max_retries: usize) -> Result<DisplacementField> {
    if amplitude == 0.0 {
        return Ok(DisplacementField::zeros(lattice));
    }
    let rank = lattice.len();
    let n: usize = lattice.iter().product();
    for attempt in 0..max_retries.max(1) {
        let mut rng = seeded_rng(mix_seed(seed, attempt as u64));
        let comps: Vec<Vec<f64>> = (0..rank).map(|_| smooth_noise(&mut rng, lattice, sigma)).collect();
        let max_mag = (0..n)
            .map(|v| comps.iter().map(|c| c[v] * c[v]).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        if max_mag == 0.0 {
            continue;
        }
        let scale = amplitude / max_mag;
        let data = comps.iter().flat_map(|c| c.iter().map(|v| (v * scale) as f32)).collect();
        let mut shape = vec![rank];
        shape.extend_from_slice(lattice);
        let field = DisplacementField::new(Tensor::new(shape, data)?)?;
        if folding_percentage(&field, JacobianMode::Mapping)? == 0.0 {
            return Ok(field);
        }
    }
    Err(Error::Synthesis(format!(
        "no fold-free field after {max_retries} attempts with amplitude {amplitude} and sigma {sigma}; \
         use a smaller amplitude or a larger sigma"
    )))
}

struct Blob {
    center: Vec<f64>,
    radii: Vec<f64>,
    /// rotation angle in the last two axes
    angle: f64,
    intensity: f64,
}

impl Blob {
    fn sample(rng: &mut SeededRng, lattice: &[usize]) -> Self {
        let min_extent = *lattice.iter().min().expect("non-empty lattice") as f64;
        let center = lattice.iter().map(|&n| rng.uniform_range(0.2, 0.8) * (n - 1) as f64).collect();
        let radii = lattice.iter().map(|_| rng.uniform_range(0.08, 0.22) * min_extent).collect();
        Self {
            center,
            radii,
            angle: rng.uniform_range(0.0, std::f64::consts::PI),
            intensity: rng.uniform_range(0.4, 1.0),
        }
    }

    /// Normalized elliptical radius of `p`; `< 1` inside.
    fn radius(&self, p: &[f64]) -> f64 {
        let r = p.len();
        let mut d: Vec<f64> = p.iter().zip(&self.center).map(|(a, c)| a - c).collect();
        let (a, b) = (d[r - 2], d[r - 1]);
        let (s, c) = self.angle.sin_cos();
        d[r - 2] = c * a + s * b;
        d[r - 1] = -s * a + c * b;
        d.iter().zip(&self.radii).map(|(x, rr)| (x / rr).powi(2)).sum::<f64>().sqrt()
    }
}

/// Fixed-space image, labels and landmarks of one synthetic scene.
pub fn render_scene(lattice: &[usize], blobs: usize, texture_amp: f64, seed: u64) -> Result<(Image, LabelMap, LandmarkSet)> {
    let mut rng = seeded_rng(seed);
    let shapes: Vec<Blob> = (0..blobs).map(|_| Blob::sample(&mut rng, lattice)).collect();
    let texture = smooth_noise(&mut rng, lattice, 4.0);
    let tex_scale = texture.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let st = strides(lattice);
    let n: usize = lattice.iter().product();
    let mut values = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut p = vec![0.0; lattice.len()];
    for v in 0..n {
        for d in 0..lattice.len() {
            p[d] = ((v / st[d]) % lattice[d]) as f64;
        }
        let mut value = 0.15 + texture_amp * texture[v] / tex_scale;
        let mut label = 0;
        for (k, b) in shapes.iter().enumerate() {
            let r = b.radius(&p);
            // soft edge about one voxel wide
            let inside = 1.0 / (1.0 + ((r - 1.0) * 8.0).exp());
            value = value.max(b.intensity * inside + (1.0 - inside) * value);
            if r < 1.0 {
                label = k as u32 + 1;
            }
        }
        values.push(value.clamp(0.0, 1.0) as f32);
        labels.push(label);
    }
    let points = shapes
        .iter()
        .map(|b| b.center.iter().zip(lattice).map(|(&c, &n)| c.clamp(0.0, (n - 1) as f64)).collect())
        .collect();
    Ok((
        Image::from_values(lattice, values)?,
        LabelMap::new(lattice, labels)?,
        LandmarkSet::new(lattice.len(), points)?,
    ))
}

/// Solves `a + phi(a) = b` for every landmark by fixed-point iteration.
pub fn pull_back_landmarks(fixed: &LandmarkSet, phi: &DisplacementField) -> Result<LandmarkSet> {
    let lattice = phi.lattice();
    let points = fixed
        .points()
        .iter()
        .map(|b| {
            let mut a = b.clone();
            for _ in 0..100 {
                let u = sample_field(phi, &a)?;
                for d in 0..a.len() {
                    a[d] = (b[d] - u[d]).clamp(0.0, (lattice[d] - 1) as f64);
                }
            }
            Ok(a)
        })
        .collect::<Result<Vec<_>>>()?;
    LandmarkSet::new(fixed.rank(), points)
}

/// One benchmark pair with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthPair {
    pub moving: Image,
    pub fixed: Image,
    pub phi_true: DisplacementField,
    pub labels_moving: LabelMap,
    pub labels_fixed: LabelMap,
    pub landmarks_moving: LandmarkSet,
    pub landmarks_fixed: LandmarkSet,
}

pub fn make_pair(cfg: &SynthConfig, seed: u64) -> Result<SynthPair> {
    let (fixed, labels_fixed, landmarks_fixed) = render_scene(&cfg.lattice, cfg.blobs, cfg.texture, mix_seed(seed, 1))?;
    let phi_true = random_smooth_field(&cfg.lattice, cfg.amplitude, cfg.sigma, mix_seed(seed, 2), cfg.max_retries)?;
    let mut moving = spatial_transform(&fixed, &phi_true)?;
    if cfg.contrast_remap {
        let gamma = seeded_rng(mix_seed(seed, 3)).uniform_range(0.7, 1.4) as f32;
        moving = Image::new(moving.tensor().map(|v| v.max(0.0).powf(gamma)))?;
    }
    let labels_moving = warp_labels(&labels_fixed, &phi_true)?;
    let landmarks_moving = pull_back_landmarks(&landmarks_fixed, &phi_true)?;
    Ok(SynthPair {
        moving,
        fixed,
        phi_true,
        labels_moving,
        labels_fixed,
        landmarks_moving,
        landmarks_fixed,
    })
}

/// All pairs of a benchmark; pair `i` depends only on `(cfg, i)`.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthPair>> {
    cfg.validate()?;
    (0..cfg.pairs)
        .into_par_iter()
        .map(|i| make_pair(cfg, mix_seed(cfg.seed, i as u64)))
        .collect()
}

pub const MANIFEST_FILE: &str = "manifest.json";
const PAIR_FILES: [&str; 7] = [
    "moving.dtf",
    "fixed.dtf",
    "phi_true.dtf",
    "labels_moving.dtf",
    "labels_fixed.dtf",
    "landmarks_moving.csv",
    "landmarks_fixed.csv",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchManifest {
    pub config: SynthConfig,
    /// relative path -> lowercase hex SHA-256
    pub checksums: std::collections::BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

pub fn pair_dir(root: &Path, i: usize) -> PathBuf {
    root.join("pairs").join(format!("{i:04}"))
}

/// Generates and writes a benchmark directory.
pub fn write_benchmark(root: &Path, cfg: &SynthConfig) -> Result<BenchManifest> {
    let pairs = generate(cfg)?;
    let mut checksums = std::collections::BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        let dir = pair_dir(root, i);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        p.moving.save(dir.join("moving.dtf"))?;
        p.fixed.save(dir.join("fixed.dtf"))?;
        p.phi_true.save(dir.join("phi_true.dtf"))?;
        p.labels_moving.save(dir.join("labels_moving.dtf"))?;
        p.labels_fixed.save(dir.join("labels_fixed.dtf"))?;
        p.landmarks_moving.save(dir.join("landmarks_moving.csv"))?;
        p.landmarks_fixed.save(dir.join("landmarks_fixed.csv"))?;
        for f in PAIR_FILES {
            checksums.insert(format!("pairs/{i:04}/{f}"), sha256_file(&dir.join(f))?);
        }
    }
    let manifest = BenchManifest { config: cfg.clone(), checksums };
    let path = root.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads one pair directory; ground-truth files are optional.
pub fn load_pair(dir: &Path) -> Result<(Image, Image, PartialTruth)> {
    let moving = Image::load(dir.join("moving.dtf"))?;
    let fixed = Image::load(dir.join("fixed.dtf"))?;
    let opt = |name: &str| {
        let p = dir.join(name);
        p.exists().then_some(p)
    };
    let truth = PartialTruth {
        phi_true: opt("phi_true.dtf").map(DisplacementField::load).transpose()?,
        labels_moving: opt("labels_moving.dtf").map(LabelMap::load).transpose()?,
        labels_fixed: opt("labels_fixed.dtf").map(LabelMap::load).transpose()?,
        landmarks_moving: opt("landmarks_moving.csv").map(LandmarkSet::load).transpose()?,
        landmarks_fixed: opt("landmarks_fixed.csv").map(LandmarkSet::load).transpose()?,
    };
    Ok((moving, fixed, truth))
}

/// Ground truth as found on disk.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PartialTruth {
    pub phi_true: Option<DisplacementField>,
    pub labels_moving: Option<LabelMap>,
    pub labels_fixed: Option<LabelMap>,
    pub landmarks_moving: Option<LandmarkSet>,
    pub landmarks_fixed: Option<LandmarkSet>,
}

impl PartialTruth {
    pub fn as_ground_truth(&self) -> crate::metrics::GroundTruth<'_> {
        crate::metrics::GroundTruth {
            phi_true: self.phi_true.as_ref(),
            labels_moving: self.labels_moving.as_ref(),
            labels_fixed: self.labels_fixed.as_ref(),
            landmarks_moving: self.landmarks_moving.as_ref(),
            landmarks_fixed: self.landmarks_fixed.as_ref(),
            spacing: None,
        }
    }
}

impl SynthPair {
    pub fn truth(&self) -> crate::metrics::GroundTruth<'_> {
        crate::metrics::GroundTruth {
            phi_true: Some(&self.phi_true),
            labels_moving: Some(&self.labels_moving),
            labels_fixed: Some(&self.labels_fixed),
            landmarks_moving: Some(&self.landmarks_moving),
            landmarks_fixed: Some(&self.landmarks_fixed),
            spacing: None,
        }
    }
}

/// Pair directories of a benchmark in index order.
pub fn list_pairs(root: &Path) -> Result<Vec<PathBuf>> {
    let dir = root.join("pairs");
    let mut out: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::invalid(format!("{} contains no pairs", dir.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dice;

    fn small() -> SynthConfig {
        SynthConfig { lattice: vec![32, 32], pairs: 2, amplitude: 2.0, sigma: 6.0, ..SynthConfig::default() }
    }

    #[test]
    fn zero_amplitude_gives_identical_pair() {
        let cfg = SynthConfig { amplitude: 0.0, ..small() };
        let p = make_pair(&cfg, 3).unwrap();
        assert_eq!(p.moving, p.fixed);
        assert_eq!(p.landmarks_moving, p.landmarks_fixed);
        assert!(p.phi_true.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fields_are_fold_free_and_scaled() {
        let f = random_smooth_field(&[32, 32], 3.0, 5.0, 1, 20).unwrap();
        assert_eq!(folding_percentage(&f, JacobianMode::Mapping).unwrap(), 0.0);
        let max = (0..32 * 32)
            .map(|v| f.vector_at(v).iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        assert!((max - 3.0).abs() < 1e-4, "{max}");
    }

    #[test]
    fn impossible_amplitude_fails() {
        let err = random_smooth_field(&[16, 16], 50.0, 1.0, 0, 3).unwrap_err();
        assert!(err.to_string().contains("smaller amplitude"), "{err}");
    }

    #[test]
    fn large_sigma_approaches_constant() {
        let spread = |sigma: f64| {
            let f = random_smooth_field(&[16, 16], 1.0, sigma, 4, 20).unwrap();
            let c = f.component(0);
            let (lo, hi) = c.iter().fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
            (hi - lo) as f64
        };
        assert!(spread(200.0) < 0.05);
        assert!(spread(200.0) < spread(3.0));
    }

    #[test]
    fn deformation_moves_labels_and_keeps_landmarks_in_bounds() {
        let p = make_pair(&small(), 9).unwrap();
        let d = dice(&p.labels_moving, &p.labels_fixed, None).unwrap();
        assert!(d.mean.unwrap() < 1.0, "{d:?} {:?}", p.labels_fixed.label_set());
        assert!(p.landmarks_moving.within(&[32, 32]));
        // landmarks satisfy a + phi(a) = b
        for (a, b) in p.landmarks_moving.points().iter().zip(p.landmarks_fixed.points()) {
            let u = sample_field(&p.phi_true, a).unwrap();
            let r: f64 = (0..2).map(|d| (a[d] + u[d] - b[d]).powi(2)).sum::<f64>().sqrt();
            assert!(r < 1e-3, "{r}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
    }

    #[test]
    fn benchmark_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_benchmark(dir.path(), &small()).unwrap();
        assert_eq!(m.checksums.len(), 14);
        let pairs = list_pairs(dir.path()).unwrap();
        assert_eq!(pairs.len(), 2);
        let (moving, _, truth) = load_pair(&pairs[1]).unwrap();
        let direct = generate(&small()).unwrap();
        assert_eq!(moving, direct[1].moving);
        assert_eq!(truth.phi_true.unwrap(), direct[1].phi_true);
    }
}
