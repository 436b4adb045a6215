//! Encoder-decoder registration network mapping `(moving, fixed)` to a
//! displacement field.
//!
//! The encoder halves the lattice at every level. The first `enc.len()`
//! decoder convolutions are each followed by nearest-neighbour upsampling and
//! concatenation with the encoder features of matching resolution (the last
//! skip is the input pair itself). Remaining decoder convolutions run at full
//! resolution, and a final convolution produces `rank` field components.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::losses::Registrar;
use crate::rng::seeded_rng;
use crate::tensor::{Scalar, Tensor};
use crate::warp::{DisplacementField, Image};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegNetConfig {
    pub rank: usize,
    pub enc: Vec<usize>,
    pub dec: Vec<usize>,
    pub kernel: usize,
    pub slope: f64,
    /// Standard deviation of the field-producing kernel at init.
    pub flow_init_std: f64,
}

impl Default for RegNetConfig {
    fn default() -> Self {
        Self {
            rank: 2,
            enc: vec![16, 32, 32, 32],
            dec: vec![32, 32, 32, 8, 8],
            kernel: 3,
            slope: 0.2,
            flow_init_std: 1e-5,
        }
    }
}

/// One convolution of the layer graph.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

impl RegNetConfig {
    pub fn with_rank(rank: usize) -> Self {
        Self {
            rank,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank != 2 && self.rank != 3 {
            return Err(Error::invalid(format!("regnet: rank must be 2 or 3, got {}", self.rank)));
        }
        if self.enc.is_empty() {
            return Err(Error::invalid("regnet: at least one encoder level is required"));
        }
        if self.dec.len() < self.enc.len() {
            return Err(Error::invalid(format!(
                "regnet: {} decoder widths cannot undo {} encoder levels",
                self.dec.len(),
                self.enc.len()
            )));
        }
        if self.enc.iter().chain(&self.dec).any(|&w| w == 0) {
            return Err(Error::invalid("regnet: channel widths must be positive"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::invalid(format!("regnet: kernel edge must be odd, got {}", self.kernel)));
        }
        if !(self.slope.is_finite() && self.flow_init_std.is_finite() && self.flow_init_std >= 0.0) {
            return Err(Error::invalid("regnet: slope and flow_init_std must be finite"));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.enc.len()
    }

    /// Every spatial extent must be a multiple of this.
    pub fn divisor(&self) -> usize {
        1 << self.levels()
    }

    pub fn check_lattice(&self, lattice: &[usize]) -> Result<()> {
        if lattice.len() != self.rank {
            return Err(Error::invalid(format!(
                "regnet: lattice {lattice:?} does not have rank {}",
                self.rank
            )));
        }
        let d = self.divisor();
        if lattice.iter().any(|&e| e % d != 0) {
            return Err(Error::invalid(format!(
                "regnet: lattice {lattice:?} must be divisible by {d} (2^{} encoder levels) along every axis",
                self.levels()
            )));
        }
        Ok(())
    }

    fn skip_channels(&self, level: usize) -> usize {
        if level == 0 {
            2
        } else {
            self.enc[level - 1]
        }
    }

    /// Convolutions in execution order.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let l = self.levels();
        let mut out = Vec::new();
        let mut c = 2;
        for (i, &w) in self.enc.iter().enumerate() {
            out.push(LayerSpec { name: format!("enc{i}"), cin: c, cout: w, stride: 2 });
            c = w;
        }
        for (i, &w) in self.dec.iter().enumerate() {
            out.push(LayerSpec { name: format!("dec{i}"), cin: c, cout: w, stride: 1 });
            c = if i < l { w + self.skip_channels(l - 1 - i) } else { w };
        }
        out.push(LayerSpec { name: "flow".into(), cin: c, cout: self.rank, stride: 1 });
        out
    }

    /// Expected parameter names and shapes.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut m = BTreeMap::new();
        for layer in self.layers() {
            let mut w = vec![layer.cout, layer.cin];
            w.extend(std::iter::repeat(self.kernel).take(self.rank));
            m.insert(format!("{}.weight", layer.name), w);
            m.insert(format!("{}.bias", layer.name), vec![layer.cout]);
        }
        m
    }
}

/// Named parameter tensors of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct RegNetParams {
    tensors: BTreeMap<String, Tensor<f32>>,
}

impl RegNetParams {
    /// Fan-in scaled Gaussian kernels, zero biases, near-zero field layer.
    pub fn init(config: &RegNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let taps = config.kernel.pow(config.rank as u32);
        let mut tensors = BTreeMap::new();
        for layer in config.layers() {
            let fan_in = layer.cin * taps;
            let std = if layer.name == "flow" {
                config.flow_init_std
            } else {
                (2.0 / fan_in as f64).sqrt()
            };
            let mut shape = vec![layer.cout, layer.cin];
            shape.extend(std::iter::repeat(config.kernel).take(config.rank));
            let w = Tensor::from_fn(&shape, |_| (rng.gaussian() * std) as f32);
            tensors.insert(format!("{}.weight", layer.name), w);
            tensors.insert(format!("{}.bias", layer.name), Tensor::zeros(&[layer.cout]));
        }
        Ok(Self { tensors })
    }

    /// Checks names and shapes against `config`.
    pub fn from_map(config: &RegNetConfig, tensors: BTreeMap<String, Tensor<f32>>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        let missing: Vec<String> = expected.keys().filter(|k| !tensors.contains_key(*k)).cloned().collect();
        let unexpected: Vec<String> = tensors.keys().filter(|k| !expected.contains_key(*k)).cloned().collect();
        let wrong_shape: Vec<String> = tensors
            .iter()
            .filter(|(k, t)| expected.get(*k).is_some_and(|s| s.as_slice() != t.shape()))
            .map(|(k, _)| k.clone())
            .collect();
        if !(missing.is_empty() && unexpected.is_empty() && wrong_shape.is_empty()) {
            return Err(Error::CheckpointMismatch { missing, unexpected, wrong_shape });
        }
        if let Some((k, _)) = tensors.iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::format("checkpoint", format!("parameter {k} is not finite")));
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn to_entries(&self) -> Vec<(String, Tensor<f32>)> {
        self.tensors.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub(crate) fn set(&mut self, name: &str, value: Tensor<f32>) {
        debug_assert_eq!(self.tensors[name].shape(), value.shape());
        self.tensors.insert(name.to_string(), value);
    }

    pub(crate) fn into_map(self) -> BTreeMap<String, Tensor<f32>> {
        self.tensors
    }

    /// Records every parameter on `tape`, trainable or constant.
    pub fn bind<'t, T: Scalar>(&self, tape: &'t Tape<T>, trainable: bool) -> BTreeMap<String, Var<'t, T>> {
        self.tensors
            .iter()
            .map(|(k, t)| {
                let t = t.cast::<T>();
                let v = if trainable { tape.leaf(t) } else { tape.constant(t) };
                (k.clone(), v)
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path, &self.to_entries())
    }

    pub fn load(path: impl AsRef<Path>, config: &RegNetConfig) -> Result<Self> {
        Self::from_entries(config, checkpoint::load(path)?)
    }

    pub fn from_entries(config: &RegNetConfig, entries: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (k, t) in entries {
            if map.insert(k.clone(), t).is_some() {
                return Err(Error::format("checkpoint", format!("duplicate entry {k}")));
            }
        }
        Self::from_map(config, map)
    }
}

/// Network graph bound to parameter variables on one tape.
pub struct BoundNet<'a, 't, T: Scalar> {
    config: &'a RegNetConfig,
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'a, 't, T: Scalar> BoundNet<'a, 't, T> {
    pub fn new(config: &'a RegNetConfig, vars: BTreeMap<String, Var<'t, T>>) -> Self {
        Self { config, vars }
    }

    pub fn vars(&self) -> &BTreeMap<String, Var<'t, T>> {
        &self.vars
    }

    fn conv(&self, x: Var<'t, T>, name: &str, stride: usize) -> Result<Var<'t, T>> {
        let get = |suffix: &str| {
            let key = format!("{name}.{suffix}");
            self.vars
                .get(&key)
                .copied()
                .ok_or_else(|| Error::invalid(format!("regnet: parameter {key} not bound")))
        };
        x.conv(get("weight")?, get("bias")?, &vec![stride; self.config.rank])
    }

    pub fn forward(&self, moving: Var<'t, T>, fixed: Var<'t, T>) -> Result<Var<'t, T>> {
        let cfg = self.config;
        let ms = moving.shape();
        if ms != fixed.shape() {
            return Err(Error::shape("regnet", &ms, &fixed.shape()));
        }
        if ms[0] != 1 {
            return Err(Error::invalid(format!("regnet: inputs must be single channel, got shape {ms:?}")));
        }
        cfg.check_lattice(&ms[1..])?;
        let l = cfg.levels();
        let up = vec![2; cfg.rank];

        let input = Var::concat(&[moving, fixed])?;
        let mut skips = vec![input];
        let mut x = input;
        for i in 0..l {
            x = self.conv(x, &format!("enc{i}"), 2)?.leaky_relu(cfg.slope)?;
            skips.push(x);
        }
        for i in 0..cfg.dec.len() {
            x = self.conv(x, &format!("dec{i}"), 1)?.leaky_relu(cfg.slope)?;
            if i < l {
                x = Var::concat(&[x.upsample_nearest(&up)?, skips[l - 1 - i]])?;
            }
        }
        self.conv(x, "flow", 1)
    }
}

impl<'t, T: Scalar> Registrar<'t, T> for BoundNet<'_, 't, T> {
    fn register(&self, moving: Var<'t, T>, fixed: Var<'t, T>) -> Result<Var<'t, T>> {
        self.forward(moving, fixed)
    }
}

/// Configuration plus parameters; the inference entry point.
#[derive(Clone, Debug, PartialEq)]
pub struct RegNet {
    pub config: RegNetConfig,
    pub params: RegNetParams,
}

impl RegNet {
    pub fn init(config: RegNetConfig, seed: u64) -> Result<Self> {
        let params = RegNetParams::init(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn new(config: RegNetConfig, params: RegNetParams) -> Result<Self> {
        let params = RegNetParams::from_map(&config, params.into_map())?;
        Ok(Self { config, params })
    }

    pub fn bind<'a, 't, T: Scalar>(&'a self, tape: &'t Tape<T>, trainable: bool) -> BoundNet<'a, 't, T> {
        BoundNet::new(&self.config, self.params.bind(tape, trainable))
    }

    /// Field registering `moving` onto `fixed`.
    pub fn predict(&self, moving: &Image, fixed: &Image) -> Result<DisplacementField> {
        if moving.lattice() != fixed.lattice() {
            return Err(Error::shape("predict", moving.lattice(), fixed.lattice()));
        }
        let tape = Tape::<f32>::new();
        let net = self.bind(&tape, false);
        let phi = net.forward(tape.constant(moving.tensor().clone()), tape.constant(fixed.tensor().clone()))?;
        DisplacementField::new(phi.value())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.params.save(path)
    }

    pub fn load(path: impl AsRef<Path>, config: RegNetConfig) -> Result<Self> {
        let params = RegNetParams::load(path, &config)?;
        Ok(Self { config, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    fn tiny() -> RegNetConfig {
        RegNetConfig { enc: vec![2, 2], dec: vec![2, 2, 2], ..RegNetConfig::default() }
    }

    fn random_image(lattice: &[usize], seed: u64) -> Image {
        let mut rng = seeded_rng(seed);
        let n = lattice.iter().product();
        Image::from_values(lattice, (0..n).map(|_| rng.uniform() as f32).collect()).unwrap()
    }

    #[test]
    fn tiny_config_shapes() {
        let net = RegNet::init(tiny(), 0).unwrap();
        let x = random_image(&[16, 16], 1);
        let y = random_image(&[16, 16], 2);
        let phi = net.predict(&x, &y).unwrap();
        assert_eq!(phi.tensor().shape(), &[2, 16, 16]);
        assert!(phi.mean_magnitude() < 1e-2);
    }

    #[test]
    fn default_3d_shape() {
        let cfg = RegNetConfig { rank: 3, enc: vec![2, 3], dec: vec![3, 2, 2], ..RegNetConfig::default() };
        let net = RegNet::init(cfg, 0).unwrap();
        let x = random_image(&[4, 8, 4], 1);
        let phi = net.predict(&x, &x).unwrap();
        assert_eq!(phi.tensor().shape(), &[3, 4, 8, 4]);
    }

    #[test]
    fn zero_final_layer_gives_zero_field() {
        let cfg = RegNetConfig { flow_init_std: 0.0, ..tiny() };
        let net = RegNet::init(cfg, 3).unwrap();
        let phi = net.predict(&random_image(&[8, 8], 1), &random_image(&[8, 8], 2)).unwrap();
        assert!(phi.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_init_and_forward() {
        let a = RegNet::init(tiny(), 7).unwrap();
        let b = RegNet::init(tiny(), 7).unwrap();
        let c = RegNet::init(tiny(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
        let x = random_image(&[8, 8], 1);
        let y = random_image(&[8, 8], 2);
        assert_eq!(a.predict(&x, &y).unwrap(), a.predict(&x, &y).unwrap());
    }

    #[test]
    fn divisibility_error_names_requirement() {
        let net = RegNet::init(RegNetConfig::default(), 0).unwrap();
        let x = random_image(&[24, 24], 1);
        let msg = net.predict(&x, &x).unwrap_err().to_string();
        assert!(msg.contains("divisible by 16"), "{msg}");
    }

    #[test]
    fn default_layer_graph() {
        let layers = RegNetConfig::default().layers();
        let io: Vec<(usize, usize)> = layers.iter().map(|l| (l.cin, l.cout)).collect();
        assert_eq!(
            io,
            vec![(2, 16), (16, 32), (32, 32), (32, 32), (32, 32), (64, 32), (64, 32), (48, 8), (10, 8), (8, 2)]
        );
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.cmk");
        let net = RegNet::init(tiny(), 5).unwrap();
        net.save(&path).unwrap();
        assert_eq!(RegNet::load(&path, tiny()).unwrap(), net);

        let other = RegNetConfig { enc: vec![2, 2, 2], dec: vec![2, 2, 2], ..RegNetConfig::default() };
        match RegNet::load(&path, other).unwrap_err() {
            Error::CheckpointMismatch { missing, .. } => {
                assert!(missing.contains(&"enc2.weight".to_string()), "{missing:?}")
            }
            e => panic!("unexpected {e}"),
        }

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(RegNet::load(&path, tiny()).is_err());
    }
}
