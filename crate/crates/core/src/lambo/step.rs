use super::constraints::ConstraintSet;
use super::edits::{edit_distribution, sample_edit_positions};
use super::{LamboConfig, LamboError};
use crate::model::{clean_value, Denoiser, ValueHead};
use crate::noise::NoiseSchedule;
use crate::rng::Rng;
use crate::sample::{nos_step, GuidanceConfig, KlForm, LangevinObjective};
use crate::seqcore::{PositionMask, Sequence};
use crate::tensor::{Tape, Tensor};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng as _;

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub seq: Sequence,
    pub value: f64,
    /// Decoded candidates that passed the constraints.
    pub feasible: usize,
}

/// One guided edit step around `seed`.
///
/// Planned positions are masked with probability `mask_prob`, the hidden
/// state is refined for `cfg.steps` Langevin iterations with updates confined
/// to planned rows, and each iterate is decoded at the planned positions.
/// The best feasible decode replaces the incumbent (`seed`, `seed_value`)
/// only if its clean value is strictly higher.
#[allow(clippy::too_many_arguments)]
pub fn lambo2_step(
    model: &Denoiser,
    seed: &Sequence,
    seed_value: f64,
    plan: &[usize],
    mask_prob: f64,
    t: usize,
    value: &dyn ValueHead,
    cfg: &GuidanceConfig,
    rules: &ConstraintSet,
    rng: &mut Rng,
) -> Result<StepOutcome, LamboError> {
    let mut best = StepOutcome {
        seq: seed.clone(),
        value: seed_value,
        feasible: 0,
    };
    if plan.is_empty() {
        return Ok(best);
    }
    let (l, mask) = (model.length(), model.mask_index());
    let mut movable = vec![false; l];
    for &p in plan {
        movable[p] = true;
    }
    let mut corrupted = seed.clone();
    for (i, &m) in movable.iter().enumerate() {
        if m && rng.gen::<f64>() < mask_prob {
            corrupted.set(i, mask);
        }
    }
    let layer = cfg.layer_for(model);
    let mut h = model.guidance_state(&corrupted, t, layer)?;
    let reference = model.token_log_probs_tensor(&lift(model, &h, t, layer)?)?;
    let weights = match cfg.kl_form {
        KlForm::Prediction => Tensor::full(&[1, l], 1.0),
        KlForm::Transition => Tensor::from_fn(&[1, l], |i| (corrupted.get(i) == mask) as u8 as f64),
    };
    let objective = LangevinObjective {
        kl_weight: cfg.lambda,
        value_weight: 1.0 - cfg.lambda,
    };
    let inner = GuidanceConfig {
        steps: 1,
        ..cfg.clone()
    };
    for _ in 0..cfg.steps.max(1) {
        h = nos_step(model, &h, t, layer, &reference, &weights, value, &inner, objective, Some(&movable), rng)?.0;
        let probs = model.token_distribution(&lift(model, &h, t, layer)?, true)?;
        let mut cand = seed.clone();
        for &p in plan {
            let d = WeightedIndex::new(probs.row(p)).map_err(|e| LamboError::Distribution(e.to_string()))?;
            cand.set(p, d.sample(rng));
        }
        if !rules.is_feasible(&cand) {
            continue;
        }
        best.feasible += 1;
        let v = clean_value(model, &cand, value)?;
        if v > best.value {
            best.seq = cand;
            best.value = v;
        }
    }
    Ok(best)
}

fn lift(model: &Denoiser, h: &Tensor, t: usize, layer: crate::model::GuidanceLayer) -> Result<Tensor, LamboError> {
    let mut tape = Tape::frozen();
    let hv = tape.constant(h.clone())?;
    let out = model.lift(&mut tape, hv, t, layer)?;
    Ok(tape.value(out).clone())
}

/// Result of optimizing one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub seq: Sequence,
    pub value: f64,
    pub seed_value: f64,
    /// Incumbent value after each diffusion step.
    pub trace: Vec<f64>,
}

impl Design {
    pub fn edits(&self, seed: &Sequence) -> usize {
        self.seq.hamming(seed)
    }
}

/// Runs `cfg.diffusion_steps` edit steps from `seed`. Each step keeps the
/// positions already edited and draws the rest of the budget from fresh
/// saliency, so the design never moves more than `cfg.budget` positions
/// away from the seed. `model_schedule` maps corruption levels onto the
/// model's timesteps.
#[allow(clippy::too_many_arguments)]
pub fn lambo2_optimize(
    model: &Denoiser,
    model_schedule: &NoiseSchedule,
    seed: &Sequence,
    immutable: &PositionMask,
    value: &dyn ValueHead,
    cfg: &LamboConfig,
    rules: &ConstraintSet,
    rng: &mut Rng,
) -> Result<Design, LamboError> {
    cfg.validate()?;
    let mutable = immutable.mutable_positions().len();
    if cfg.budget > mutable {
        return Err(LamboError::Budget {
            budget: cfg.budget,
            available: mutable,
        });
    }
    let gen = NoiseSchedule::new(cfg.schedule, cfg.diffusion_steps)?;
    let seed_value = clean_value(model, seed, value)?;
    let mut cur = StepOutcome {
        seq: seed.clone(),
        value: seed_value,
        feasible: 0,
    };
    let mut trace = vec![seed_value];
    for k in (1..=cfg.diffusion_steps).rev() {
        let mask_prob = gen.mask_prob(k);
        let t = model_schedule.step_for_mask_fraction(mask_prob).max(1);
        let edited: Vec<usize> = (0..seed.len()).filter(|&i| cur.seq.get(i) != seed.get(i)).collect();
        let mut plan = edited.clone();
        let fresh = cfg.budget - edited.len().min(cfg.budget);
        if fresh > 0 {
            let mut blocked = immutable.bits().to_vec();
            for &i in &edited {
                blocked[i] = true;
            }
            let blocked = PositionMask::new(blocked);
            let available = blocked.mutable_positions().len();
            let scores = model.saliency(&cur.seq, value, cfg.saliency_temperature, cfg.saliency_floor, &blocked)?;
            let dist = edit_distribution(&scores, &blocked)?;
            plan.extend(sample_edit_positions(&dist, fresh.min(available), rng)?);
        }
        plan.sort_unstable();
        cur = lambo2_step(model, &cur.seq, cur.value, &plan, mask_prob, t, value, &cfg.guidance, rules, rng)?;
        trace.push(cur.value);
    }
    Ok(Design {
        seq: cur.seq,
        value: cur.value,
        seed_value,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lambo::ConstraintConfig;
    use crate::model::{DenoiserConfig, ExpectedClass, GuidanceLayer};
    use crate::noise::ScheduleKind;
    use crate::seqcore::Alphabet;
    use rand::SeedableRng;

    fn model() -> Denoiser {
        let cfg = DenoiserConfig {
            vocab: 21,
            length: 10,
            embed_dim: 4,
            channels: 6,
            encoder_blocks: 1,
            head_blocks: 1,
            kernel_width: 3,
            ensemble_size: 2,
            objective_classes: vec![4],
            timesteps: 8,
            guidance_layer: GuidanceLayer::Last,
        };
        Denoiser::new(cfg, &mut Rng::seed_from_u64(5)).unwrap()
    }

    fn setup() -> (Denoiser, NoiseSchedule, Sequence, ConstraintSet) {
        let a = Alphabet::protein();
        let seed = a.parse("ACDEFGHCKL").unwrap();
        let rules = ConstraintSet::for_seed(&seed, &a, &ConstraintConfig::default()).unwrap();
        (model(), NoiseSchedule::new(ScheduleKind::Cosine, 8).unwrap(), seed, rules)
    }

    #[test]
    fn empty_plan_returns_seed() {
        let (m, _, seed, rules) = setup();
        let v = ExpectedClass { objective: 0 };
        let out = lambo2_step(&m, &seed, 1.5, &[], 0.5, 4, &v, &GuidanceConfig::default(), &rules, &mut Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.seq, seed);
        assert_eq!(out.value, 1.5);
    }

    #[test]
    fn step_only_touches_plan() {
        let (m, _, seed, rules) = setup();
        let v = ExpectedClass { objective: 0 };
        let sv = clean_value(&m, &seed, &v).unwrap();
        let plan = [2, 5, 9];
        for k in 0..50 {
            let out = lambo2_step(&m, &seed, sv, &plan, 0.8, 5, &v, &GuidanceConfig::default(), &rules, &mut Rng::seed_from_u64(k)).unwrap();
            for i in 0..10 {
                if !plan.contains(&i) {
                    assert_eq!(out.seq.get(i), seed.get(i));
                }
            }
            assert!(out.value >= sv);
            assert!(rules.is_feasible(&out.seq));
        }
    }

    #[test]
    fn optimize_respects_budget_immutability_and_monotone_trace() {
        let (m, sched, seed, rules) = setup();
        let v = ExpectedClass { objective: 0 };
        let immutable = PositionMask::infill_region(10, 0..7);
        let cfg = LamboConfig {
            budget: 2,
            diffusion_steps: 4,
            guidance: GuidanceConfig {
                eta: 0.1,
                lambda: 0.5,
                steps: 2,
                ..GuidanceConfig::default()
            },
            ..LamboConfig::default()
        };
        for k in 0..20 {
            let d = lambo2_optimize(&m, &sched, &seed, &immutable, &v, &cfg, &rules, &mut Rng::seed_from_u64(k)).unwrap();
            assert!(d.edits(&seed) <= 2);
            for i in 7..10 {
                assert_eq!(d.seq.get(i), seed.get(i));
            }
            assert!(d.trace.windows(2).all(|w| w[1] >= w[0]));
            assert_eq!(d.trace.len(), 5);
            assert!(rules.is_feasible(&d.seq));
        }
    }

    #[test]
    fn budget_above_mutable_count_is_rejected() {
        let (m, sched, seed, rules) = setup();
        let v = ExpectedClass { objective: 0 };
        let immutable = PositionMask::infill_region(10, 0..3);
        let cfg = LamboConfig {
            budget: 4,
            ..LamboConfig::default()
        };
        let err = lambo2_optimize(&m, &sched, &seed, &immutable, &v, &cfg, &rules, &mut Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, LamboError::Budget { .. }));
    }
}
