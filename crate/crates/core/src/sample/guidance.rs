use super::SampleError;
use crate::model::{Denoiser, GuidanceLayer, ValueHead};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InnerOptimizer {
    #[default]
    Sgd,
    Adagrad,
}

/// Which distributions the KL penalty compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KlForm {
    /// Denoiser predictions `p(w | h')` vs `p(w | h)` at every position.
    #[default]
    Prediction,
    /// One-step transition mixtures; only masked positions contribute,
    /// weighted by their unmasking probability.
    Transition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Langevin step size.
    pub eta: f64,
    /// KL weight.
    pub lambda: f64,
    /// Langevin temperature; 0 disables the noise term.
    pub temperature: f64,
    /// Inner steps per diffusion step.
    pub steps: usize,
    pub optimizer: InnerOptimizer,
    /// Overrides the model's guidance layer when set.
    pub layer: Option<GuidanceLayer>,
    pub kl_form: KlForm,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            eta: 0.5,
            lambda: 0.1,
            temperature: 0.0,
            steps: 5,
            optimizer: InnerOptimizer::Sgd,
            layer: None,
            kl_form: KlForm::Prediction,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<(), SampleError> {
        if !(self.eta >= 0.0) || !(self.lambda >= 0.0) || !(self.temperature >= 0.0) {
            return Err(SampleError::Config("eta, lambda and temperature must be non-negative".into()));
        }
        Ok(())
    }

    /// Whether the inner loop can move the hidden state at all.
    pub fn is_active(&self) -> bool {
        self.eta > 0.0 && self.steps > 0
    }

    pub fn layer_for(&self, model: &Denoiser) -> GuidanceLayer {
        self.layer.unwrap_or(model.config().guidance_layer)
    }

    /// Loss `(lambda KL - v) / (1 + lambda)`.
    pub fn objective(&self) -> LangevinObjective {
        LangevinObjective {
            kl_weight: self.lambda / (1.0 + self.lambda),
            value_weight: 1.0 / (1.0 + self.lambda),
        }
    }
}

/// Inner-loop loss `kl_weight * KL - value_weight * v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LangevinObjective {
    pub kl_weight: f64,
    pub value_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepStats {
    /// Weighted KL of the final hidden state against the reference.
    pub kl: f64,
    /// Value of the final hidden state.
    pub value: f64,
    /// Loss at each inner iteration, before its update.
    pub losses: Vec<f64>,
}

struct Evaluation {
    loss: f64,
    kl: f64,
    value: f64,
    grad: Option<Tensor>,
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    model: &Denoiser,
    h: &Tensor,
    t: usize,
    layer: GuidanceLayer,
    reference: &Tensor,
    kl_weights: &Tensor,
    value: &dyn ValueHead,
    objective: LangevinObjective,
    want_grad: bool,
) -> Result<Evaluation, SampleError> {
    let mut tape = Tape::frozen();
    let hv = tape.input(h.clone())?;
    let enc = model.lift(&mut tape, hv, t, layer)?;
    let z = model.token_logits(&mut tape, enc)?;
    let lp = tape.log_softmax(z)?;
    let p = tape.softmax(z)?;
    let r = tape.constant(reference.clone())?;
    let diff = tape.sub(lp, r)?;
    let terms = tape.mul(p, diff)?;
    let per_pos = tape.sum_last(terms)?;
    let w = tape.constant(kl_weights.clone())?;
    let weighted = tape.mul(per_pos, w)?;
    let kl = tape.sum(weighted)?;
    let v = value.value(model, &mut tape, enc)?;
    let a = tape.scale(kl, objective.kl_weight)?;
    let b = tape.scale(v, objective.value_weight)?;
    let loss: Var = tape.sub(a, b)?;
    let grad = if want_grad {
        Some(tape.backward(loss)?.wrt(&tape, hv))
    } else {
        None
    };
    Ok(Evaluation {
        loss: tape.value(loss).item(),
        kl: tape.value(kl).item(),
        value: tape.value(v).item(),
        grad,
    })
}

/// Langevin refinement of a hidden state.
///
/// `h` is the hidden state at `layer` (`[1, L, D]`), `reference` the
/// unguided data-token log-probabilities `[1, L, V]`, `kl_weights` a
/// per-position weight `[1, L]`. When `movable` is given, gradient and noise
/// are zeroed on rows where it is false. Randomness is consumed only when
/// `temperature > 0`.
#[allow(clippy::too_many_arguments)]
pub fn nos_step(
    model: &Denoiser,
    h: &Tensor,
    t: usize,
    layer: GuidanceLayer,
    reference: &Tensor,
    kl_weights: &Tensor,
    value: &dyn ValueHead,
    cfg: &GuidanceConfig,
    objective: LangevinObjective,
    movable: Option<&[bool]>,
    rng: &mut Rng,
) -> Result<(Tensor, StepStats), SampleError> {
    let mut cur = h.clone();
    let mut stats = StepStats::default();
    if !cfg.is_active() {
        let e = evaluate(model, &cur, t, layer, reference, kl_weights, value, objective, false)?;
        stats.kl = e.kl;
        stats.value = e.value;
        return Ok((cur, stats));
    }
    let width = h.cols();
    let mut accum = Tensor::zeros(h.shape());
    let noise_scale = (2.0 * cfg.eta * cfg.temperature).sqrt();
    for _ in 0..cfg.steps {
        let e = evaluate(model, &cur, t, layer, reference, kl_weights, value, objective, true)?;
        stats.losses.push(e.loss);
        let g = e.grad.expect("gradient requested");
        if !g.is_finite() {
            return Err(crate::tensor::TensorError::NonFinite { op: "guidance gradient" }.into());
        }
        let data = cur.data_mut();
        for (i, gi) in g.data().iter().enumerate() {
            if let Some(m) = movable {
                if !m[i / width] {
                    continue;
                }
            }
            let step = match cfg.optimizer {
                InnerOptimizer::Sgd => cfg.eta * gi,
                InnerOptimizer::Adagrad => {
                    let a = &mut accum.data_mut()[i];
                    *a += gi * gi;
                    cfg.eta * gi / (a.sqrt() + 1e-10)
                }
            };
            data[i] -= step;
        }
        if cfg.temperature > 0.0 {
            for (i, x) in cur.data_mut().iter_mut().enumerate() {
                let eps: f64 = rng.sample(StandardNormal);
                if movable.map_or(true, |m| m[i / width]) {
                    *x += noise_scale * eps;
                }
            }
        }
    }
    let e = evaluate(model, &cur, t, layer, reference, kl_weights, value, objective, false)?;
    stats.kl = e.kl;
    stats.value = e.value;
    Ok((cur, stats))
}
