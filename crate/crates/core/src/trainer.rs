//! Joint training of the two registration networks.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::losses::{total_loss, HyperParams, LossBreakdown};
use crate::regnet::{RegNet, RegNetConfig, RegNetParams};
use crate::rng::{mix_seed, seeded_rng};
use crate::tensor::{strides, Tensor};
use crate::warp::Image;

const STREAM_INIT_GX: u64 = 1;
const STREAM_INIT_GY: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_AUGMENT: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augmentation {
    /// random flip of every spatial axis
    pub flips: bool,
    /// random quarter turns in the last two axes when they are equal
    pub rot90: bool,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self { flips: true, rot90: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hp: HyperParams,
    pub net: RegNetConfig,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub augment: Augmentation,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Update one network per step, alternating, instead of both jointly.
    pub alternating: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hp: HyperParams::default(),
            net: RegNetConfig::default(),
            lr: 2e-4,
            epochs: 30,
            batch_size: 1,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            augment: Augmentation::default(),
            checkpoint_every: 0,
            alternating: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        self.net.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.batch_size != 1 {
            return Err(Error::invalid(format!("batch_size must be 1, got {}", self.batch_size)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::invalid("adam_eps must be positive"));
        }
        Ok(())
    }
}

/// Adaptive-moment optimizer state for one network.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &RegNetParams) -> Self {
        let zeros: BTreeMap<String, Vec<f32>> = params.iter().map(|(k, t)| (k.clone(), vec![0.0; t.len()])).collect();
        Self { t: 0, m: zeros.clone(), v: zeros }
    }

    /// One bias-corrected update of every parameter.
    pub fn update(&mut self, params: &mut RegNetParams, grads: &BTreeMap<String, Tensor<f32>>, cfg: &TrainConfig) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powf(self.t as f64);
        let c2 = 1.0 - b2.powf(self.t as f64);
        let names: Vec<String> = params.iter().map(|(k, _)| k.clone()).collect();
        for name in names {
            let g = grads
                .get(&name)
                .ok_or_else(|| Error::Backward(format!("no gradient for {name}")))?;
            let m = self.m.get_mut(&name).expect("moment exists for every parameter");
            let v = self.v.get_mut(&name).expect("moment exists for every parameter");
            let p = params.get(&name).expect("name taken from params");
            let mut out = p.data().to_vec();
            for i in 0..out.len() {
                let gi = g.data()[i] as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let delta = cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.adam_eps);
                out[i] = (out[i] as f64 - delta) as f32;
            }
            params.set(&name, Tensor::new(p.shape().to_vec(), out)?);
        }
        Ok(())
    }

    fn entries(&self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        for (kind, map) in [("m", &self.m), ("v", &self.v)] {
            for (k, v) in map {
                out.push((format!("{prefix}{kind}/{k}"), Tensor::from_parts(vec![v.len()], v.clone())));
            }
        }
        out.push((format!("{prefix}t"), u64_tensor(self.t)));
        out
    }

    fn from_entries(params: &RegNetParams, prefix: &str, entries: &mut BTreeMap<String, Tensor<f32>>) -> Result<Self> {
        let mut state = Self::new(params);
        for (kind, map) in [("m", &mut state.m), ("v", &mut state.v)] {
            for (k, slot) in map.iter_mut() {
                let key = format!("{prefix}{kind}/{k}");
                let t = entries
                    .remove(&key)
                    .ok_or_else(|| Error::format("checkpoint", format!("missing optimizer entry {key}")))?;
                if t.len() != slot.len() {
                    return Err(Error::format("checkpoint", format!("optimizer entry {key} has wrong length")));
                }
                *slot = t.into_vec();
            }
        }
        state.t = take_u64(entries, &format!("{prefix}t"))?;
        Ok(state)
    }
}

// counters are stored as two 24-bit halves so f32 holds them exactly
fn u64_tensor(v: u64) -> Tensor<f32> {
    Tensor::from_parts(vec![2], vec![(v >> 24) as f32, (v & 0xFF_FFFF) as f32])
}

fn take_u64(entries: &mut BTreeMap<String, Tensor<f32>>, key: &str) -> Result<u64> {
    let t = entries
        .remove(key)
        .ok_or_else(|| Error::format("checkpoint", format!("missing entry {key}")))?;
    match t.data() {
        [hi, lo] if *hi >= 0.0 && *lo >= 0.0 => Ok(((*hi as u64) << 24) | *lo as u64),
        _ => Err(Error::format("checkpoint", format!("entry {key} is not a counter"))),
    }
}

/// Both networks with their optimizer state and training position.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleModel {
    pub gx: RegNet,
    pub gy: RegNet,
    pub opt_gx: AdamState,
    pub opt_gy: AdamState,
    /// completed epochs
    pub epoch: u64,
    /// completed steps
    pub step: u64,
}

impl CycleModel {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let gx = RegNet::init(cfg.net.clone(), mix_seed(cfg.seed, STREAM_INIT_GX))?;
        let gy = RegNet::init(cfg.net.clone(), mix_seed(cfg.seed, STREAM_INIT_GY))?;
        Ok(Self {
            opt_gx: AdamState::new(&gx.params),
            opt_gy: AdamState::new(&gy.params),
            gx,
            gy,
            epoch: 0,
            step: 0,
        })
    }

    pub fn to_entries(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        for (tag, net) in [("gx/", &self.gx), ("gy/", &self.gy)] {
            out.extend(net.params.iter().map(|(k, t)| (format!("{tag}{k}"), t.clone())));
        }
        out.extend(self.opt_gx.entries("opt/gx/"));
        out.extend(self.opt_gy.entries("opt/gy/"));
        out.push(("state/epoch".into(), u64_tensor(self.epoch)));
        out.push(("state/step".into(), u64_tensor(self.step)));
        out
    }

    pub fn from_entries(config: &RegNetConfig, entries: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        let mut rest: BTreeMap<String, Tensor<f32>> = entries.into_iter().collect();
        let mut take_net = |tag: &str| -> Result<RegNet> {
            let keys: Vec<String> = rest.keys().filter(|k| k.starts_with(tag)).cloned().collect();
            let map = keys
                .into_iter()
                .map(|k| {
                    let t = rest.remove(&k).expect("key listed above");
                    (k[tag.len()..].to_string(), t)
                })
                .collect();
            RegNet::new(config.clone(), RegNetParams::from_map(config, map)?)
        };
        let gx = take_net("gx/")?;
        let gy = take_net("gy/")?;
        let opt_gx = AdamState::from_entries(&gx.params, "opt/gx/", &mut rest)?;
        let opt_gy = AdamState::from_entries(&gy.params, "opt/gy/", &mut rest)?;
        let epoch = take_u64(&mut rest, "state/epoch")?;
        let step = take_u64(&mut rest, "state/step")?;
        if !rest.is_empty() {
            return Err(Error::CheckpointMismatch {
                missing: vec![],
                unexpected: rest.into_keys().collect(),
                wrong_shape: vec![],
            });
        }
        Ok(Self { gx, gy, opt_gx, opt_gy, epoch, step })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path, &self.to_entries())
    }

    pub fn load(path: impl AsRef<Path>, config: &RegNetConfig) -> Result<Self> {
        Self::from_entries(config, checkpoint::load(path)?)
    }
}

/// Which networks receive an update in a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateTarget {
    Both,
    Gx,
    Gy,
}

/// One optimization step on the pair `(x, y)`; returns the loss breakdown
/// evaluated before the update.
pub fn train_step(model: &mut CycleModel, x: &Image, y: &Image, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let target = match (cfg.alternating, model.step % 2) {
        (false, _) => UpdateTarget::Both,
        (true, 0) => UpdateTarget::Gx,
        (true, _) => UpdateTarget::Gy,
    };
    let step = model.step as usize;
    let as_loss_error = |e: Error| match e {
        Error::NonFinite { op } => Error::NonFiniteLoss { step, component: op, value: f64::NAN },
        e => e,
    };
    let tape = Tape::<f32>::new();
    let gx = model.gx.bind(&tape, target != UpdateTarget::Gy);
    let gy = model.gy.bind(&tape, target != UpdateTarget::Gx);
    let xv = tape.constant(x.tensor().clone());
    let yv = tape.constant(y.tensor().clone());
    let graph = total_loss(xv, yv, &gx, &gy, &cfg.hp).map_err(as_loss_error)?;
    let breakdown = graph.breakdown();
    if let Some((component, value)) = breakdown.first_non_finite() {
        return Err(Error::NonFiniteLoss { step, component, value });
    }
    let grads = tape.backward(graph.total)?;
    let collect = |vars: &BTreeMap<String, crate::Var<'_, f32>>| -> BTreeMap<String, Tensor<f32>> {
        vars.iter()
            .filter_map(|(k, v)| grads.get(*v).map(|g| (k.clone(), g.clone())))
            .collect()
    };
    let (gx_grads, gy_grads) = (collect(gx.vars()), collect(gy.vars()));
    drop((gx, gy));
    if target != UpdateTarget::Gy {
        model.opt_gx.update(&mut model.gx.params, &gx_grads, cfg)?;
    }
    if target != UpdateTarget::Gx {
        model.opt_gy.update(&mut model.gy.params, &gy_grads, cfg)?;
    }
    model.step += 1;
    Ok(breakdown)
}

/// Training pairs; `moving` plays X and `fixed` plays Y.
#[derive(Clone, Debug, Default)]
pub struct PairDataset {
    pub pairs: Vec<(Image, Image)>,
}

impl PairDataset {
    pub fn new(pairs: Vec<(Image, Image)>) -> Self {
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Rejects data the network cannot consume.
    pub fn check_compatible(&self, net: &RegNetConfig) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        for (i, (m, f)) in self.pairs.iter().enumerate() {
            if m.lattice() != f.lattice() {
                return Err(Error::invalid(format!(
                    "pair {i}: moving lattice {:?} differs from fixed lattice {:?}",
                    m.lattice(),
                    f.lattice()
                )));
            }
            if m.channels() != 1 || f.channels() != 1 {
                return Err(Error::invalid(format!("pair {i}: images must be single channel")));
            }
            net.check_lattice(m.lattice())
                .map_err(|e| Error::invalid(format!("pair {i}: {e}")))?;
        }
        Ok(())
    }
}

/// Index permutation applied identically to both images of a pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentOp {
    pub flips: Vec<bool>,
    pub quarter_turns: usize,
}

impl AugmentOp {
    pub fn identity(rank: usize) -> Self {
        Self { flips: vec![false; rank], quarter_turns: 0 }
    }

    pub fn sample(lattice: &[usize], aug: &Augmentation, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let mut op = Self::identity(lattice.len());
        if aug.flips {
            op.flips.iter_mut().for_each(|f| *f = rng.coin());
        }
        let n = lattice.len();
        if aug.rot90 && lattice[n - 1] == lattice[n - 2] {
            op.quarter_turns = rng.below(4);
        }
        op
    }

    pub fn apply(&self, image: &Image) -> Result<Image> {
        let t = image.tensor();
        let shape = t.shape();
        let lattice = &shape[1..];
        let rank = lattice.len();
        if self.flips.len() != rank {
            return Err(Error::invalid("augment: flip count does not match lattice rank"));
        }
        let st = strides(lattice);
        let voxels: usize = lattice.iter().product();
        let (a, b) = (rank - 2, rank - 1);
        let edge = lattice[b];
        let mut src_index = Vec::with_capacity(voxels);
        let mut c = vec![0usize; rank];
        for v in 0..voxels {
            let mut r = v;
            for d in 0..rank {
                c[d] = r / st[d];
                r %= st[d];
            }
            // undo the rotation, then the flips
            for _ in 0..self.quarter_turns % 4 {
                let (i, j) = (c[a], c[b]);
                c[a] = j;
                c[b] = edge - 1 - i;
            }
            for d in 0..rank {
                if self.flips[d] {
                    c[d] = lattice[d] - 1 - c[d];
                }
            }
            src_index.push(c.iter().zip(&st).map(|(x, s)| x * s).sum::<usize>());
        }
        let mut out = Vec::with_capacity(t.len());
        for ch in 0..shape[0] {
            let src = t.channel(ch);
            out.extend(src_index.iter().map(|&s| src[s]));
        }
        Image::new(Tensor::new(shape.to_vec(), out)?)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Checkpoints, config and log are written here when set.
    pub out_dir: Option<PathBuf>,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
    /// Stage name; the final checkpoint is `<stage>.cmk` (default `global`)
    /// and non-default stages suffix the log and config file names.
    pub stage: Option<String>,
}

#[derive(Debug)]
pub struct FitOutcome {
    pub model: CycleModel,
    pub log: Vec<StepRecord>,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_FILE: &str = "train_config.json";

impl FitOptions {
    fn file_names(&self) -> (String, String, String) {
        match self.stage.as_deref() {
            None | Some("global") => ("global.cmk".into(), LOG_FILE.into(), CONFIG_FILE.into()),
            Some(s) => (format!("{s}.cmk"), format!("train_log_{s}.jsonl"), format!("train_config_{s}.json")),
        }
    }
}

/// Trains both networks for `cfg.epochs` epochs (counting any resumed ones).
pub fn fit(dataset: &PairDataset, cfg: &TrainConfig, opts: &FitOptions) -> Result<FitOutcome> {
    cfg.validate()?;
    dataset.check_compatible(&cfg.net)?;
    let mut model = match &opts.resume {
        Some(path) => CycleModel::load(path, &cfg.net)?,
        None => CycleModel::init(cfg)?,
    };
    let (ckpt_name, log_name, cfg_name) = opts.file_names();
    let mut log_writer = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let cfg_path = dir.join(&cfg_name);
            std::fs::write(&cfg_path, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&cfg_path, e))?;
            let log_path = dir.join(&log_name);
            let f = if opts.resume.is_some() {
                OpenOptions::new().create(true).append(true).open(&log_path)
            } else {
                File::create(&log_path)
            }
            .map_err(|e| Error::io(&log_path, e))?;
            Some((log_path, BufWriter::new(f)))
        }
        None => None,
    };

    let mut log = Vec::new();
    while (model.epoch as usize) < cfg.epochs {
        let epoch = model.epoch;
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        seeded_rng(mix_seed(mix_seed(cfg.seed, STREAM_SHUFFLE), epoch)).shuffle(&mut order);
        for &i in &order {
            let (m, f) = &dataset.pairs[i];
            let op = AugmentOp::sample(m.lattice(), &cfg.augment, mix_seed(mix_seed(cfg.seed, STREAM_AUGMENT), model.step));
            let (x, y) = (op.apply(m)?, op.apply(f)?);
            let losses = train_step(&mut model, &x, &y, cfg)?;
            let rec = StepRecord { step: model.step - 1, epoch, losses };
            if let Some((path, w)) = log_writer.as_mut() {
                serde_json::to_writer(&mut *w, &rec)?;
                writeln!(w).map_err(|e| Error::io(&*path, e))?;
            }
            log::debug!("epoch {epoch} step {} total {:.5}", rec.step, rec.losses.total);
            log.push(rec);
        }
        model.epoch += 1;
        if let (Some(dir), Some((path, w))) = (&opts.out_dir, log_writer.as_mut()) {
            w.flush().map_err(|e| Error::io(&*path, e))?;
            if cfg.checkpoint_every > 0 && model.epoch as usize % cfg.checkpoint_every == 0 {
                let stem = ckpt_name.trim_end_matches(".cmk");
                model.save(dir.join(format!("{stem}_epoch_{:04}.cmk", model.epoch)))?;
            }
        }
    }
    if let (Some(dir), Some((path, mut w))) = (&opts.out_dir, log_writer) {
        w.flush().map_err(|e| Error::io(&path, e))?;
        model.save(dir.join(&ckpt_name))?;
    }
    Ok(FitOutcome { model, log })
}
