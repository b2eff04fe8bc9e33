//! Adversarial, L1 and pixel cross-entropy losses, and the Adam update.
//!
//! Log-sigmoid terms are written through softplus so saturated logits never
//! reach `log(0)`:
//! `-log σ(l) = softplus(-l)` and `-log(1 - σ(l)) = softplus(l)`.
//! All expectations are means over batch and map positions.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::networks::{Bound, ParamKind, ParameterSet};
use crate::tensor::{Activation, Gradients, Scalar, Tape, Tensor, Var};

/// Default weight of the L1 term in the generator objective.
pub const DEFAULT_LAMBDA: f64 = 100.0;

fn same_dims<T: Scalar>(op: &'static str, tape: &Tape<T>, a: Var, b: Var) -> Result<()> {
    let (av, bv) = (tape.try_value(a)?, tape.try_value(b)?);
    if av.dims() != bv.dims() {
        return Err(Error::DimsMismatch {
            op,
            left: av.dims().to_vec(),
            right: bv.dims().to_vec(),
        });
    }
    Ok(())
}

/// Mean sigmoid cross-entropy of `logits` against a constant label.
pub fn bce_from_logits<T: Scalar>(tape: &mut Tape<T>, logits: Var, target_is_real: bool) -> Result<Var> {
    let arg = if target_is_real { tape.neg(logits)? } else { logits };
    let sp = tape.activation(Activation::Softplus, arg)?;
    tape.mean(sp)
}

/// Discriminator terms as a loss to minimize:
/// `-E[log D(x, y)]` and `-E[log(1 - D(x, G(x, z)))]`, and their sum.
pub fn discriminator_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits_real: Var,
    logits_fake: Var,
) -> Result<(Var, Var, Var)> {
    same_dims("discriminator_loss", tape, logits_real, logits_fake)?;
    let real = bce_from_logits(tape, logits_real, true)?;
    let fake = bce_from_logits(tape, logits_fake, false)?;
    let total = tape.add(real, fake)?;
    Ok((real, fake, total))
}

/// Non-saturating generator term `-E[log D(x, G(x, z))]`.
pub fn generator_adversarial_loss<T: Scalar>(tape: &mut Tape<T>, logits_fake: Var) -> Result<Var> {
    bce_from_logits(tape, logits_fake, true)
}

/// `mean |y - y_hat|`.
pub fn l1_loss<T: Scalar>(tape: &mut Tape<T>, y: Var, y_hat: Var) -> Result<Var> {
    same_dims("l1_loss", tape, y, y_hat)?;
    let d = tape.sub(y, y_hat)?;
    let a = tape.abs(d)?;
    tape.mean(a)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be finite and non-negative, got {lambda}"
        )));
    }
    Ok(())
}

/// `g_adv + lambda * g_l1`.
pub fn generator_total_loss<T: Scalar>(tape: &mut Tape<T>, g_adv: Var, g_l1: Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    let weighted = tape.scalar_mul(g_l1, T::from_f64_lossy(lambda))?;
    tape.add(g_adv, weighted)
}

/// Baseline objective on logits: `mean(softplus(l) - m * l)` with `m` in {0, 1}.
pub fn pixel_bce_with_logits<T: Scalar>(tape: &mut Tape<T>, logits: Var, mask: Var) -> Result<Var> {
    same_dims("pixel_bce_with_logits", tape, logits, mask)?;
    let sp = tape.activation(Activation::Softplus, logits)?;
    let ml = tape.mul(mask, logits)?;
    let d = tape.sub(sp, ml)?;
    tape.mean(d)
}

/// Mean binary cross-entropy of probabilities against a {0, 1} mask,
/// evaluated through the logit of each probability.
pub fn pixel_bce_loss(probabilities: &Tensor, mask: &Tensor) -> Result<f64> {
    if probabilities.dims() != mask.dims() {
        return Err(Error::DimsMismatch {
            op: "pixel_bce_loss",
            left: probabilities.dims().to_vec(),
            right: mask.dims().to_vec(),
        });
    }
    let mut sum = 0.0;
    for (&p, &m) in probabilities.values().iter().zip(mask.values()) {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
        }
        let p = (p as f64).clamp(1e-12, 1.0 - 1e-12);
        let logit = p.ln() - (-p).ln_1p();
        let softplus = logit.max(0.0) + (-logit.abs()).exp().ln_1p();
        sum += softplus - m as f64 * logit;
    }
    Ok(sum / probabilities.len() as f64)
}

/// Scalar values of one training step's losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub d_loss_real: f32,
    pub d_loss_fake: f32,
    pub d_loss_total: f32,
    pub g_adv: f32,
    pub g_l1: f32,
    pub g_total: f32,
    pub lambda: f32,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.d_loss_real,
            self.d_loss_fake,
            self.d_loss_total,
            self.g_adv,
            self.g_l1,
            self.g_total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// The additive identities between the components, evaluated in `f32`.
    pub fn is_consistent(&self) -> bool {
        self.d_loss_total == self.d_loss_real + self.d_loss_fake
            && self.g_total == self.g_adv + self.lambda * self.g_l1
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter, keyed by name.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    moments: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<(&[f32], &[f32])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

pub type ParamGrads = HashMap<String, Tensor>;

/// Pulls the gradient of every bound parameter out of `grads`. Parameters
/// the loss did not reach get no entry.
pub fn collect_grads(bound: &Bound, grads: &mut Gradients) -> ParamGrads {
    bound
        .iter()
        .filter_map(|(name, var)| grads.take(var).map(|g| (name.to_string(), g)))
        .collect()
}

/// One bias-corrected Adam update of every trainable parameter. Missing
/// gradients count as zero.
pub fn adam_step(params: &mut ParameterSet, grads: &ParamGrads, state: &mut AdamState) -> Result<()> {
    for name in grads.keys() {
        match params.get(name) {
            None => {
                return Err(Error::InvalidArgument(format!(
                    "gradient for unknown parameter {name}"
                )))
            }
            Some(p) if p.dims() != grads[name].dims() => {
                return Err(Error::DimsMismatch {
                    op: "adam_step",
                    left: p.dims().to_vec(),
                    right: grads[name].dims().to_vec(),
                })
            }
            _ => {}
        }
    }
    state.step += 1;
    let cfg = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - (cfg.beta1 as f64).powi(t);
    let c2 = 1.0 - (cfg.beta2 as f64).powi(t);
    let names: Vec<String> = params
        .iter()
        .filter(|p| p.kind == ParamKind::Trainable)
        .map(|p| p.name.clone())
        .collect();
    for name in names {
        let param = params.get_mut(&name).expect("name taken from the set");
        let n = param.len();
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        if m.len() != n {
            return Err(Error::DimsMismatch {
                op: "adam_step",
                left: param.dims().to_vec(),
                right: vec![m.len()],
            });
        }
        let grad = grads.get(&name).map(|g| g.values());
        for i in 0..n {
            let g = grad.map_or(0.0, |g| g[i]);
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] as f64 / c1;
            let v_hat = v[i] as f64 / c2;
            let update = cfg.lr as f64 * m_hat / (v_hat.sqrt() + cfg.eps as f64);
            let w = &mut param.values_mut()[i];
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_must_be_non_negative() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::scalar(0.5));
        let b = tape.constant(Tensor::scalar(0.1));
        assert!(generator_total_loss(&mut tape, a, b, -1.0).is_err());
        assert!(generator_total_loss(&mut tape, a, b, f64::NAN).is_err());
    }

    #[test]
    fn adam_rejects_unknown_and_misshaped() {
        let mut p = ParameterSet::new();
        p.insert("w", ParamKind::Trainable, Tensor::filled(&[2], 1.0).unwrap()).unwrap();
        let mut st = AdamState::new(AdamConfig::default());
        let mut g = ParamGrads::new();
        g.insert("x".into(), Tensor::filled(&[2], 1.0).unwrap());
        assert!(adam_step(&mut p, &g, &mut st).is_err());
        let mut g = ParamGrads::new();
        g.insert("w".into(), Tensor::filled(&[3], 1.0).unwrap());
        assert!(matches!(adam_step(&mut p, &g, &mut st), Err(Error::DimsMismatch { .. })));
        assert_eq!(st.step(), 0);
    }
}
