//! Global-then-local registration.
//!
//! A global network registers a subsampled pair; its field is upsampled to
//! full resolution. A local network then registers overlapping patches of the
//! globally deformed image against the fixed image, the patch fields are
//! fused, and the two fields are combined so the moving image is interpolated
//! only once.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regnet::RegNet;
use crate::rng::{mix_seed, seeded_rng};
use crate::tensor::{strides, Tensor};
use crate::trainer::{fit, FitOptions, FitOutcome, PairDataset, TrainConfig};
use crate::warp::{compose_fields, downsample_image, rescale_field, spatial_transform, Composition, DisplacementField, Image};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    Uniform,
    /// separable `sin^2` window, largest at the patch centre
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultiscaleConfig {
    /// global subsampling factor per axis
    pub factors: Vec<usize>,
    /// patch edge in voxels
    pub patch: usize,
    /// patch stride per axis; `None` uses `p/4` in-plane and `p/8` along the
    /// leading (depth) axis of 3D lattices
    pub strides: Option<Vec<usize>>,
    pub fusion: Fusion,
    pub composition: Composition,
}

impl Default for MultiscaleConfig {
    fn default() -> Self {
        Self {
            factors: vec![2, 2],
            patch: 64,
            strides: None,
            fusion: Fusion::Uniform,
            composition: Composition::True,
        }
    }
}

impl MultiscaleConfig {
    pub fn strides_for(&self, rank: usize) -> Result<Vec<usize>> {
        let s = match &self.strides {
            Some(s) => s.clone(),
            None if rank == 3 => vec![(self.patch / 8).max(1), (self.patch / 4).max(1), (self.patch / 4).max(1)],
            None => vec![(self.patch / 4).max(1); rank],
        };
        if s.len() != rank || s.iter().any(|&v| v == 0 || v > self.patch) {
            return Err(Error::invalid(format!(
                "multiscale: strides {s:?} must be {rank} values in 1..={}",
                self.patch
            )));
        }
        Ok(s)
    }

    pub fn validate(&self, lattice: &[usize]) -> Result<()> {
        if self.factors.len() != lattice.len() || self.factors.iter().zip(lattice).any(|(&f, &n)| f == 0 || n % f != 0) {
            return Err(Error::invalid(format!(
                "multiscale: lattice {lattice:?} is not divisible by subsample factors {:?}",
                self.factors
            )));
        }
        if self.patch == 0 || lattice.iter().any(|&n| self.patch > n) {
            return Err(Error::invalid(format!(
                "multiscale: patch edge {} exceeds lattice {lattice:?}",
                self.patch
            )));
        }
        self.strides_for(lattice.len()).map(|_| ())
    }
}

/// Runs `net` on the subsampled pair and returns the field at full
/// resolution together with `T(moving, field)`.
pub fn global_stage(net: &RegNet, moving: &Image, fixed: &Image, cfg: &MultiscaleConfig) -> Result<(DisplacementField, Image)> {
    cfg.validate(moving.lattice())?;
    let m = downsample_image(moving, &cfg.factors)?;
    let f = downsample_image(fixed, &cfg.factors)?;
    let coarse = net.predict(&m, &f)?;
    let phi = rescale_field(&coarse, moving.lattice())?;
    let deformed = spatial_transform(moving, &phi)?;
    Ok((phi, deformed))
}

/// Patch start offsets along one axis: multiples of `stride`, plus a final
/// patch flush with the end when needed.
pub fn axis_offsets(extent: usize, patch: usize, stride: usize) -> Result<Vec<usize>> {
    if patch == 0 || patch > extent || stride == 0 {
        return Err(Error::invalid(format!(
            "patch edge {patch} with stride {stride} does not fit extent {extent}"
        )));
    }
    let mut out: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o + patch <= extent).collect();
    if *out.last().expect("offset 0 always fits") != extent - patch {
        out.push(extent - patch);
    }
    Ok(out)
}

/// Patch offsets in raster order.
pub fn extract_patches(lattice: &[usize], cfg: &MultiscaleConfig) -> Result<Vec<Vec<usize>>> {
    let strides = cfg.strides_for(lattice.len())?;
    let per_axis = lattice
        .iter()
        .zip(&strides)
        .map(|(&n, &s)| axis_offsets(n, cfg.patch, s))
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![vec![]];
    for offs in &per_axis {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                offs.iter().map(move |&o| {
                    let mut p = prefix.clone();
                    p.push(o);
                    p
                })
            })
            .collect();
    }
    Ok(out)
}

/// Flat indices of the box `offset + [0, extent)` in a lattice.
fn box_indices(lattice: &[usize], offset: &[usize], extent: &[usize]) -> Vec<usize> {
    let st = strides(lattice);
    let est = strides(extent);
    let n: usize = extent.iter().product();
    (0..n)
        .map(|v| {
            (0..lattice.len())
                .map(|d| ((v / est[d]) % extent[d] + offset[d]) * st[d])
                .sum()
        })
        .collect()
}

/// Sub-box of every channel.
pub fn crop_image(image: &Image, offset: &[usize], extent: &[usize]) -> Result<Image> {
    let lattice = image.lattice();
    if offset.len() != lattice.len()
        || extent.len() != lattice.len()
        || offset.iter().zip(extent).zip(lattice).any(|((&o, &e), &n)| e == 0 || o + e > n)
    {
        return Err(Error::invalid(format!("crop {offset:?}+{extent:?} outside lattice {lattice:?}")));
    }
    let idx = box_indices(lattice, offset, extent);
    let mut data = Vec::with_capacity(idx.len() * image.channels());
    for c in 0..image.channels() {
        let ch = image.channel(c);
        data.extend(idx.iter().map(|&i| ch[i]));
    }
    let mut shape = vec![image.channels()];
    shape.extend_from_slice(extent);
    Image::new(Tensor::new(shape, data)?)
}

/// Per-voxel fusion weight inside a patch.
pub fn patch_weights(rank: usize, patch: usize, fusion: Fusion) -> Vec<f64> {
    let axis: Vec<f64> = (0..patch)
        .map(|i| match fusion {
            Fusion::Uniform => 1.0,
            Fusion::Cosine => (std::f64::consts::PI * (i as f64 + 0.5) / patch as f64).sin().powi(2),
        })
        .collect();
    let ext = vec![patch; rank];
    let st = strides(&ext);
    (0..patch.pow(rank as u32))
        .map(|v| (0..rank).map(|d| axis[(v / st[d]) % patch]).product())
        .collect()
}

/// Weighted average of patch fields on the full lattice.
pub fn fuse_patches(lattice: &[usize], patches: &[(Vec<usize>, DisplacementField)], fusion: Fusion) -> Result<DisplacementField> {
    let rank = lattice.len();
    let n: usize = lattice.iter().product();
    let mut acc = vec![0.0f64; rank * n];
    let mut wsum = vec![0.0f64; n];
    for (offset, field) in patches {
        let ext = field.lattice().to_vec();
        if ext.iter().any(|&e| e != ext[0]) {
            return Err(Error::invalid(format!("fusion: patch lattice {ext:?} is not a cube")));
        }
        let weights = patch_weights(rank, ext[0], fusion);
        let idx = box_indices(lattice, offset, &ext);
        for (k, &i) in idx.iter().enumerate() {
            wsum[i] += weights[k];
            for d in 0..rank {
                acc[d * n + i] += weights[k] * field.component(d)[k] as f64;
            }
        }
    }
    if let Some(v) = wsum.iter().position(|&w| w <= 0.0) {
        return Err(Error::invalid(format!("fusion: voxel {v} is not covered by any patch")));
    }
    let data = (0..rank * n).map(|j| (acc[j] / wsum[j % n]) as f32).collect();
    let mut shape = vec![rank];
    shape.extend_from_slice(lattice);
    DisplacementField::new(Tensor::new(shape, data)?)
}

/// Registers every patch of `deformed` against the same patch of `fixed` and
/// fuses the patch fields.
pub fn local_stage(net: &RegNet, deformed: &Image, fixed: &Image, cfg: &MultiscaleConfig) -> Result<DisplacementField> {
    let lattice = fixed.lattice();
    let offsets = extract_patches(lattice, cfg)?;
    let ext = vec![cfg.patch; lattice.len()];
    let patches = offsets
        .into_par_iter()
        .map(|o| {
            let m = crop_image(deformed, &o, &ext)?;
            let f = crop_image(fixed, &o, &ext)?;
            Ok((o, net.predict(&m, &f)?))
        })
        .collect::<Result<Vec<_>>>()?;
    fuse_patches(lattice, &patches, cfg.fusion)
}

#[derive(Clone, Debug)]
pub struct MultiscaleOutput {
    pub deformed: Image,
    pub phi_final: DisplacementField,
    pub phi_global: DisplacementField,
    pub phi_local: DisplacementField,
    /// `T(moving, phi_global)`, used only to feed the local stage
    pub intermediate: Image,
}

/// Full test-stage pipeline; the output samples `moving` exactly once, through
/// the combined field.
pub fn register_multiscale(global: &RegNet, local: &RegNet, moving: &Image, fixed: &Image, cfg: &MultiscaleConfig) -> Result<MultiscaleOutput> {
    let (phi_global, intermediate) = global_stage(global, moving, fixed, cfg)?;
    let phi_local = local_stage(local, &intermediate, fixed, cfg)?;
    let phi_final = compose_fields(&phi_global, &phi_local, cfg.composition)?;
    let deformed = spatial_transform(moving, &phi_final)?;
    Ok(MultiscaleOutput { deformed, phi_final, phi_global, phi_local, intermediate })
}

/// Both trained stages.
pub struct MultiscaleModels {
    pub global: FitOutcome,
    pub local: FitOutcome,
}

/// Trains the global network on subsampled pairs, then the local network on
/// `patches_per_pair` seeded random patches of each globally deformed pair.
pub fn fit_multiscale(
    dataset: &PairDataset,
    global_cfg: &TrainConfig,
    local_cfg: &TrainConfig,
    cfg: &MultiscaleConfig,
    patches_per_pair: usize,
    opts: &FitOptions,
) -> Result<MultiscaleModels> {
    let first = dataset.pairs.first().ok_or_else(|| Error::invalid("dataset is empty"))?;
    cfg.validate(first.0.lattice())?;
    if patches_per_pair == 0 {
        return Err(Error::invalid("patches_per_pair must be >= 1"));
    }
    let coarse = dataset
        .pairs
        .iter()
        .map(|(m, f)| Ok((downsample_image(m, &cfg.factors)?, downsample_image(f, &cfg.factors)?)))
        .collect::<Result<Vec<_>>>()?;
    let global = fit(
        &PairDataset::new(coarse),
        global_cfg,
        &FitOptions { stage: Some("global".into()), ..opts.clone() },
    )?;

    let ext = vec![cfg.patch; first.0.lattice().len()];
    let mut local_pairs = Vec::new();
    for (i, (m, f)) in dataset.pairs.iter().enumerate() {
        cfg.validate(m.lattice())?;
        let (_, deformed) = global_stage(&global.model.gx, m, f, cfg)?;
        let offsets = extract_patches(m.lattice(), cfg)?;
        let mut rng = seeded_rng(mix_seed(local_cfg.seed, i as u64));
        for _ in 0..patches_per_pair {
            let o = &offsets[rng.below(offsets.len())];
            local_pairs.push((crop_image(&deformed, o, &ext)?, crop_image(f, o, &ext)?));
        }
    }
    let local = fit(
        &PairDataset::new(local_pairs),
        local_cfg,
        &FitOptions { stage: Some("local".into()), ..opts.clone() },
    )?;
    Ok(MultiscaleModels { global, local })
}
