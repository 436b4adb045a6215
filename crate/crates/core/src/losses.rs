//! Training objective: registration, cycle and identity losses.
//!
//! All losses operate on tape variables so they can be differentiated through
//! the spatial transformer and the registration networks.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ops::box_counts, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// How per-voxel loss terms aggregate over the lattice.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    Mean,
    Sum,
}

/// Which self-pair each network sees in the identity loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentityPairing {
    /// `G_X` registers `(Y, Y)` and `G_Y` registers `(X, X)`.
    #[default]
    Cross,
    /// `G_X` registers `(X, X)` and `G_Y` registers `(Y, Y)`.
    Same,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    /// cycle loss weight
    pub alpha: f64,
    /// identity loss weight
    pub beta: f64,
    /// smoothness weight
    pub lambda: f64,
    /// NCC window edge in voxels (odd, >= 3)
    pub window: usize,
    /// NCC denominator stabilizer
    pub eps: f64,
    pub normalization: Normalization,
    pub identity_pairing: IdentityPairing,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.5,
            lambda: 1.0,
            window: 9,
            eps: 1e-5,
            normalization: Normalization::Mean,
            identity_pairing: IdentityPairing::Cross,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("hp.{name} must be finite and >= 0, got {v}")));
            }
        }
        check_window(self.window)?;
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::invalid(format!("hp.eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

fn check_window(w: usize) -> Result<()> {
    if w < 3 || w % 2 == 0 {
        return Err(Error::invalid(format!("NCC window must be odd and >= 3, got {w}")));
    }
    Ok(())
}

fn aggregate<'t, T: Scalar>(v: Var<'t, T>, norm: Normalization) -> Result<Var<'t, T>> {
    match norm {
        Normalization::Mean => v.mean(),
        Normalization::Sum => v.sum(),
    }
}

/// Squared local correlation coefficient per voxel, `[1, spatial...]`.
pub fn local_ncc_map<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>, window: usize, eps: f64) -> Result<Var<'t, T>> {
    check_window(window)?;
    let shape = a.shape();
    if shape != b.shape() {
        return Err(Error::shape("local_ncc", &shape, &b.shape()));
    }
    if shape[0] != 1 {
        return Err(Error::invalid(format!("local_ncc expects single-channel images, got {shape:?}")));
    }
    let tape = a.tape();
    let inv_n: Vec<T> = box_counts(&shape[1..], window)
        .into_iter()
        .map(|n| T::from_f64(1.0 / n as f64))
        .collect();
    let inv_n = tape.constant(Tensor::new(shape.clone(), inv_n)?);

    let sa = a.box_sum(window)?;
    let sb = b.box_sum(window)?;
    let saa = a.square()?.box_sum(window)?;
    let sbb = b.square()?.box_sum(window)?;
    let sab = a.mul(b)?.box_sum(window)?;

    // windowed centred moments: sum (a - mean a)(b - mean b) = sab - sa * sb / n
    let cross = sab.sub(sa.mul(sb)?.mul(inv_n)?)?;
    let var_a = saa.sub(sa.square()?.mul(inv_n)?)?;
    let var_b = sbb.sub(sb.square()?.mul(inv_n)?)?;
    cross.square()?.div_eps(var_a.mul(var_b)?, eps)
}

/// Aggregated local cross-correlation of two single-channel images.
pub fn local_ncc<'t, T: Scalar>(
    a: Var<'t, T>,
    b: Var<'t, T>,
    window: usize,
    eps: f64,
    norm: Normalization,
) -> Result<Var<'t, T>> {
    aggregate(local_ncc_map(a, b, window, eps)?, norm)
}

/// Forward-difference squared gradient of every component along every axis,
/// with the last difference on each axis taken as zero.
pub fn smoothness<'t, T: Scalar>(field: Var<'t, T>, norm: Normalization) -> Result<Var<'t, T>> {
    let phi = field.value();
    let shape = phi.shape().to_vec();
    if shape.len() < 2 {
        return Err(Error::invalid(format!("smoothness expects [components, spatial...], got {shape:?}")));
    }
    let spatial = &shape[1..];
    let st = crate::tensor::strides(spatial);
    let n: usize = spatial.iter().product();
    let comps = shape[0];
    let data = phi.data();
    let mut total = 0.0f64;
    for c in 0..comps {
        let base = c * n;
        for (ax, &ext) in spatial.iter().enumerate() {
            for v in 0..n {
                if (v / st[ax]) % ext + 1 < ext {
                    let d = (data[base + v + st[ax]] - data[base + v]).as_f64();
                    total += d * d;
                }
            }
        }
    }
    let scale = match norm {
        Normalization::Mean => 1.0 / n as f64,
        Normalization::Sum => 1.0,
    };
    let value = Tensor::scalar(T::from_f64(total * scale));
    let spatial = spatial.to_vec();
    field.tape().record("smoothness", value, &[field], move |g, _| {
        let k = g[0] * T::from_f64(2.0 * scale);
        let data = phi.data();
        let mut gx = vec![T::zero(); data.len()];
        for c in 0..comps {
            let base = c * n;
            for (ax, &ext) in spatial.iter().enumerate() {
                for v in 0..n {
                    if (v / st[ax]) % ext + 1 < ext {
                        let d = data[base + v + st[ax]] - data[base + v];
                        gx[base + v + st[ax]] = gx[base + v + st[ax]] + k * d;
                        gx[base + v] = gx[base + v] - k * d;
                    }
                }
            }
        }
        vec![Some(gx)]
    })
}

/// `-NCC(T(moving, field), fixed) + lambda * smoothness(field)`.
pub fn registration_loss<'t, T: Scalar>(
    moving: Var<'t, T>,
    fixed: Var<'t, T>,
    field: Var<'t, T>,
    hp: &HyperParams,
) -> Result<Var<'t, T>> {
    let warped = moving.spatial_transform(field)?;
    let sim = local_ncc(warped, fixed, hp.window, hp.eps, hp.normalization)?.neg()?;
    if hp.lambda == 0.0 {
        return Ok(sim);
    }
    sim.add(smoothness(field, hp.normalization)?.scale(hp.lambda)?)
}

fn l1<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>, norm: Normalization) -> Result<Var<'t, T>> {
    aggregate(a.sub(b)?.abs()?, norm)
}

/// `|T(y_hat, phi_hat_yx) - x|_1 + |T(x_hat, phi_hat_xy) - y|_1`.
pub fn cycle_loss<'t, T: Scalar>(
    x: Var<'t, T>,
    y: Var<'t, T>,
    x_hat: Var<'t, T>,
    y_hat: Var<'t, T>,
    phi_hat_xy: Var<'t, T>,
    phi_hat_yx: Var<'t, T>,
    norm: Normalization,
) -> Result<Var<'t, T>> {
    let x_tilde = y_hat.spatial_transform(phi_hat_yx)?;
    let y_tilde = x_hat.spatial_transform(phi_hat_xy)?;
    l1(x_tilde, x, norm)?.add(l1(y_tilde, y, norm)?)
}

/// A network mapping a `(moving, fixed)` pair to a displacement field.
pub trait Registrar<'t, T: Scalar> {
    fn register(&self, moving: Var<'t, T>, fixed: Var<'t, T>) -> Result<Var<'t, T>>;
}

impl<'t, T: Scalar, F> Registrar<'t, T> for F
where
    F: Fn(Var<'t, T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    fn register(&self, moving: Var<'t, T>, fixed: Var<'t, T>) -> Result<Var<'t, T>> {
        self(moving, fixed)
    }
}

/// Negative self-similarity after each network registers an image to itself.
pub fn identity_loss<'t, T: Scalar>(
    x: Var<'t, T>,
    y: Var<'t, T>,
    gx: &impl Registrar<'t, T>,
    gy: &impl Registrar<'t, T>,
    hp: &HyperParams,
) -> Result<Var<'t, T>> {
    let (for_gx, for_gy) = match hp.identity_pairing {
        IdentityPairing::Cross => (y, x),
        IdentityPairing::Same => (x, y),
    };
    let term = |g: &dyn Fn(Var<'t, T>, Var<'t, T>) -> Result<Var<'t, T>>, img: Var<'t, T>| -> Result<Var<'t, T>> {
        let phi = g(img, img)?;
        local_ncc(img.spatial_transform(phi)?, img, hp.window, hp.eps, hp.normalization)?.neg()
    };
    let a = term(&|m, f| gx.register(m, f), for_gx)?;
    let b = term(&|m, f| gy.register(m, f), for_gy)?;
    a.add(b)
}

/// Component values of one evaluation of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_regist_xy")]
    pub regist_xy: f64,
    #[serde(rename = "L_regist_yx")]
    pub regist_yx: f64,
    #[serde(rename = "L_cycle")]
    pub cycle: f64,
    #[serde(rename = "L_identity")]
    pub identity: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Name and value of the first non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<(&'static str, f64)> {
        [
            ("L_regist_xy", self.regist_xy),
            ("L_regist_yx", self.regist_yx),
            ("L_cycle", self.cycle),
            ("L_identity", self.identity),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
    }
}

/// Tape variables of every intermediate in one evaluation of the objective.
pub struct LossGraph<'t, T: Scalar> {
    pub total: Var<'t, T>,
    pub regist_xy: Var<'t, T>,
    pub regist_yx: Var<'t, T>,
    pub cycle: Var<'t, T>,
    pub identity: Var<'t, T>,
    pub phi_xy: Var<'t, T>,
    pub phi_yx: Var<'t, T>,
    pub y_hat: Var<'t, T>,
    pub x_hat: Var<'t, T>,
}

impl<T: Scalar> LossGraph<'_, T> {
    pub fn breakdown(&self) -> LossBreakdown {
        let get = |v: &Var<'_, T>| v.item().map(|x| x.as_f64()).unwrap_or(f64::NAN);
        LossBreakdown {
            regist_xy: get(&self.regist_xy),
            regist_yx: get(&self.regist_yx),
            cycle: get(&self.cycle),
            identity: get(&self.identity),
            total: get(&self.total),
        }
    }
}

/// Full objective
/// `L_regist(X, Y, G_X) + L_regist(Y, X, G_Y) + alpha * L_cycle + beta * L_identity`.
///
/// Components with zero weight are still evaluated and reported, but are not
/// connected to `total`, so backward skips them.
pub fn total_loss<'t, T: Scalar>(
    x: Var<'t, T>,
    y: Var<'t, T>,
    gx: &impl Registrar<'t, T>,
    gy: &impl Registrar<'t, T>,
    hp: &HyperParams,
) -> Result<LossGraph<'t, T>> {
    let phi_xy = gx.register(x, y)?;
    let phi_yx = gy.register(y, x)?;
    let regist_xy = registration_loss(x, y, phi_xy, hp)?;
    let regist_yx = registration_loss(y, x, phi_yx, hp)?;
    let y_hat = x.spatial_transform(phi_xy)?;
    let x_hat = y.spatial_transform(phi_yx)?;

    // second pass on the deformed pair with the order switched
    let phi_hat_yx = gy.register(y_hat, x_hat)?;
    let phi_hat_xy = gx.register(x_hat, y_hat)?;
    let cycle = cycle_loss(x, y, x_hat, y_hat, phi_hat_xy, phi_hat_yx, hp.normalization)?;
    let identity = identity_loss(x, y, gx, gy, hp)?;

    let mut total = regist_xy.add(regist_yx)?;
    if hp.alpha != 0.0 {
        total = total.add(cycle.scale(hp.alpha)?)?;
    }
    if hp.beta != 0.0 {
        total = total.add(identity.scale(hp.beta)?)?;
    }
    Ok(LossGraph {
        total,
        regist_xy,
        regist_yx,
        cycle,
        identity,
        phi_xy,
        phi_yx,
        y_hat,
        x_hat,
    })
}

/// Evaluates `local_ncc` on plain tensors.
pub fn local_ncc_value<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, window: usize, eps: f64, norm: Normalization) -> Result<f64> {
    let tape = Tape::<T>::new();
    let v = local_ncc(tape.constant(a.clone()), tape.constant(b.clone()), window, eps, norm)?;
    Ok(v.item().map(|x| x.as_f64()).unwrap_or(f64::NAN))
}
