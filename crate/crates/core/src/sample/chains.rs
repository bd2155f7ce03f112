use super::guidance::{nos_step, GuidanceConfig, KlForm, StepStats};
use super::SampleError;
use crate::model::{Denoiser, ValueHead};
use crate::noise::{gaussian_posterior_between, mask_forward_where, unmask_probability, NoiseSchedule};
use crate::rng::Rng;
use crate::seqcore::{PositionMask, Sequence};
use crate::tensor::{Tape, Tensor};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng as _;
use rand_distr::StandardNormal;

/// One snapshot of a reverse chain.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    /// Diffusion step the snapshot corresponds to.
    pub t: usize,
    pub seq: Sequence,
    /// Guidance value after the inner loop (absent for unguided steps).
    pub value: Option<f64>,
    pub kl: Option<f64>,
    pub losses: Vec<f64>,
    /// Filled by [`SampleTrace::annotate`].
    pub objective: Option<f64>,
    pub pll: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleTrace {
    pub rows: Vec<TraceRow>,
}

impl SampleTrace {
    fn push(&mut self, t: usize, seq: &Sequence, stats: Option<StepStats>) {
        let (value, kl, losses) = match stats {
            Some(s) => (Some(s.value), Some(s.kl), s.losses),
            None => (None, None, Vec::new()),
        };
        self.rows.push(TraceRow {
            t,
            seq: seq.clone(),
            value,
            kl,
            losses,
            objective: None,
            pll: None,
        });
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Scores every snapshot with `objective` and the pseudo-log-likelihood.
    pub fn annotate(&mut self, model: &Denoiser, objective: &dyn Fn(&Sequence) -> f64) -> Result<(), SampleError> {
        for row in &mut self.rows {
            row.objective = Some(objective(&row.seq));
            row.pll = Some(pseudo_log_likelihood(model, &row.seq)?);
        }
        Ok(())
    }
}

/// Guidance settings paired with the value being pushed up.
#[derive(Clone, Copy)]
pub struct Guided<'a> {
    pub cfg: &'a GuidanceConfig,
    pub value: &'a dyn ValueHead,
}

/// Settings shared by all reverse chains.
#[derive(Clone)]
pub struct Chain<'a> {
    pub schedule: &'a NoiseSchedule,
    /// Strictly decreasing steps from `T` to 0.
    pub timesteps: Vec<usize>,
    pub guidance: Option<Guided<'a>>,
    /// Seed and conserved positions for infilling.
    pub infill: Option<(&'a Sequence, &'a PositionMask)>,
    pub record: bool,
}

impl<'a> Chain<'a> {
    /// Unguided chain over `count` evenly strided steps.
    pub fn new(schedule: &'a NoiseSchedule, count: usize) -> Self {
        Chain {
            schedule,
            timesteps: schedule.strided(count),
            guidance: None,
            infill: None,
            record: false,
        }
    }

    pub fn guided(mut self, cfg: &'a GuidanceConfig, value: &'a dyn ValueHead) -> Self {
        self.guidance = Some(Guided { cfg, value });
        self
    }

    pub fn infill(mut self, seed: &'a Sequence, conserved: &'a PositionMask) -> Self {
        self.infill = Some((seed, conserved));
        self
    }

    pub fn recording(mut self, record: bool) -> Self {
        self.record = record;
        self
    }

    fn check(&self, model: &Denoiser) -> Result<(), SampleError> {
        let ts = &self.timesteps;
        let ok = ts.len() >= 2
            && ts[0] == self.schedule.steps()
            && *ts.last().unwrap() == 0
            && ts.windows(2).all(|w| w[0] > w[1]);
        if !ok || self.schedule.steps() != model.config().timesteps {
            return Err(SampleError::Timesteps);
        }
        if let Some(g) = self.guidance {
            g.cfg.validate()?;
        }
        if let Some((seed, mask)) = self.infill {
            if seed.len() != model.length() || mask.len() != model.length() {
                return Err(crate::model::ModelError::Length {
                    expected: model.length(),
                    got: seed.len().max(mask.len()),
                }
                .into());
            }
        }
        Ok(())
    }

    /// Active guidance, if any.
    fn active(&self) -> Option<Guided<'a>> {
        self.guidance.filter(|g| g.cfg.is_active())
    }
}

/// Per-position KL weights `[1, L]` for the chosen KL form.
fn kl_weights(form: KlForm, seq: &Sequence, mask_index: usize, p_unmask: f64) -> Tensor {
    let l = seq.len();
    match form {
        KlForm::Prediction => Tensor::full(&[1, l], 1.0),
        KlForm::Transition => Tensor::from_fn(&[1, l], |i| if seq.get(i) == mask_index { p_unmask } else { 0.0 }),
    }
}

/// Encoder output `[1, L, C]` of `seq` at `t`, optionally refined by guidance.
fn guided_encoding(
    model: &Denoiser,
    seq: &Sequence,
    t: usize,
    guided: Option<Guided>,
    p_unmask: f64,
    rng: &mut Rng,
) -> Result<(Tensor, Option<StepStats>), SampleError> {
    let Some(g) = guided else {
        return Ok((model.hidden(seq, t)?, None));
    };
    let layer = g.cfg.layer_for(model);
    let h = model.guidance_state(seq, t, layer)?;
    let base = lift_tensor(model, &h, t, layer)?;
    let reference = model.token_log_probs_tensor(&base)?;
    let weights = kl_weights(g.cfg.kl_form, seq, model.mask_index(), p_unmask);
    let (h2, stats) = nos_step(model, &h, t, layer, &reference, &weights, g.value, g.cfg, g.cfg.objective(), None, rng)?;
    Ok((lift_tensor(model, &h2, t, layer)?, Some(stats)))
}

fn lift_tensor(model: &Denoiser, h: &Tensor, t: usize, layer: crate::model::GuidanceLayer) -> Result<Tensor, SampleError> {
    let mut tape = Tape::frozen();
    let hv = tape.constant(h.clone())?;
    let out = model.lift(&mut tape, hv, t, layer)?;
    Ok(tape.value(out).clone())
}

fn draw(row: &[f64], rng: &mut Rng) -> usize {
    WeightedIndex::new(row).expect("valid distribution").sample(rng)
}

/// Categorical (absorbing-mask) reverse chain, optionally guided and/or
/// infilling. Returns the clean sample and one snapshot per visited step.
pub fn sample_discrete(model: &Denoiser, chain: &Chain, rng: &mut Rng) -> Result<(Sequence, SampleTrace), SampleError> {
    chain.check(model)?;
    let (l, mask) = (model.length(), model.mask_index());
    let schedule = chain.schedule;
    let mut trace = SampleTrace::default();
    let t_max = chain.timesteps[0];
    let mut w = Sequence::filled(l, mask);
    if let Some((seed, cons)) = chain.infill {
        let fresh = mask_forward_where(seed, t_max, schedule, mask, |i| cons.is_conserved(i), rng)?;
        merge_rows(&mut w, &fresh, cons);
    }
    if chain.record {
        trace.push(t_max, &w, None);
    }
    let guided = chain.active();
    for pair in chain.timesteps.windows(2) {
        let (t, s) = (pair[0], pair[1]);
        let p_unmask = unmask_probability(s, t, schedule)?;
        let (h, stats) = guided_encoding(model, &w, t, guided, p_unmask, rng)?;
        let probs = model.token_distribution(&h, true)?;
        for i in 0..l {
            if w.get(i) != mask {
                continue;
            }
            if rng.gen::<f64>() < p_unmask {
                w.set(i, draw(probs.row(i), rng));
            }
        }
        if let Some((seed, cons)) = chain.infill {
            let fresh = mask_forward_where(seed, s, schedule, mask, |i| cons.is_conserved(i), rng)?;
            merge_rows(&mut w, &fresh, cons);
        }
        if chain.record {
            trace.push(s, &w, stats);
        }
    }
    Ok((w, trace))
}

fn merge_rows(w: &mut Sequence, fresh: &Sequence, cons: &PositionMask) {
    for i in 0..w.len() {
        if cons.is_conserved(i) {
            w.set(i, fresh.get(i));
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = i;
        }
    }
    best
}

/// Gaussian reverse chain over layer-normalized embeddings. The clean
/// estimate at each step is the probability-weighted mean of token
/// embeddings; the final state is decoded by argmax at `t = 1`.
pub fn sample_continuous(model: &Denoiser, chain: &Chain, rng: &mut Rng) -> Result<(Sequence, SampleTrace), SampleError> {
    chain.check(model)?;
    let (l, e, v) = (model.length(), model.config().embed_dim, model.vocab());
    let schedule = chain.schedule;
    let table = model.token_embeddings();
    let seed_emb = match chain.infill {
        Some((seed, _)) => Some(model.embed_tensor(seed)?),
        None => None,
    };
    let mut x = Tensor::from_fn(&[1, l, e], |_| rng.sample(StandardNormal));
    let mut trace = SampleTrace::default();
    let guided = chain.active();
    let t_max = chain.timesteps[0];
    if let (Some((_, cons)), Some(se)) = (chain.infill, &seed_emb) {
        conserve_rows(&mut x, se, cons, t_max, schedule, rng);
    }
    if chain.record {
        trace.push(t_max, &decode_embedding(model, &x, chain)?, None);
    }
    for pair in chain.timesteps.windows(2) {
        let (t, s) = (pair[0], pair[1]);
        let (enc, stats) = match guided {
            None => (encode_tensor(model, &x, t)?, None),
            Some(g) => {
                let layer = g.cfg.layer_for(model);
                let h = match layer {
                    crate::model::GuidanceLayer::First => x.clone(),
                    crate::model::GuidanceLayer::Last => encode_tensor(model, &x, t)?,
                };
                let base = lift_tensor(model, &h, t, layer)?;
                let reference = model.token_log_probs_tensor(&base)?;
                let weights = Tensor::full(&[1, l], 1.0);
                let (h2, st) = nos_step(model, &h, t, layer, &reference, &weights, g.value, g.cfg, g.cfg.objective(), None, rng)?;
                (lift_tensor(model, &h2, t, layer)?, Some(st))
            }
        };
        let probs = model.token_distribution(&enc, true)?;
        let mut x0 = vec![0.0; l * e];
        for i in 0..l {
            let p = probs.row(i);
            for tok in 0..v {
                let row = table.row(tok);
                for d in 0..e {
                    x0[i * e + d] += p[tok] * row[d];
                }
            }
        }
        let x0 = Tensor::new(vec![1, l, e], x0)?;
        let (mean, var) = gaussian_posterior_between(&x, &x0, s, t, schedule)?;
        let sd = var.sqrt();
        x = if sd > 0.0 {
            let data = mean.data().iter().map(|m| m + sd * rng.sample::<f64, _>(StandardNormal)).collect();
            Tensor::new(vec![1, l, e], data)?
        } else {
            mean
        };
        if let (Some((_, cons)), Some(se)) = (chain.infill, &seed_emb) {
            conserve_rows(&mut x, se, cons, s, schedule, rng);
        }
        if chain.record {
            trace.push(s, &decode_embedding(model, &x, chain)?, stats);
        }
    }
    Ok((decode_embedding(model, &x, chain)?, trace))
}

fn encode_tensor(model: &Denoiser, x: &Tensor, t: usize) -> Result<Tensor, SampleError> {
    let mut tape = Tape::frozen();
    let xv = tape.constant(x.clone())?;
    let h = model.encode_embedded(&mut tape, xv, &[t])?;
    Ok(tape.value(h).clone())
}

/// Replaces conserved rows with the seed embedding noised to step `t`.
fn conserve_rows(x: &mut Tensor, seed: &Tensor, cons: &PositionMask, t: usize, schedule: &NoiseSchedule, rng: &mut Rng) {
    let e = x.cols();
    let a = schedule.alpha_bar(t);
    let (m, sd) = (a.sqrt(), (1.0 - a).sqrt());
    let data = x.data_mut();
    for i in 0..cons.len() {
        if !cons.is_conserved(i) {
            continue;
        }
        for d in 0..e {
            let noise = if t == 0 { 0.0 } else { sd * rng.sample::<f64, _>(StandardNormal) };
            data[i * e + d] = m * seed.data()[i * e + d] + noise;
        }
    }
}

fn decode_embedding(model: &Denoiser, x: &Tensor, chain: &Chain) -> Result<Sequence, SampleError> {
    let h = encode_tensor(model, x, 1)?;
    let probs = model.token_distribution(&h, true)?;
    let mut w = Sequence::new((0..model.length()).map(|i| argmax(probs.row(i))).collect());
    if let Some((seed, cons)) = chain.infill {
        merge_rows(&mut w, seed, cons);
    }
    Ok(w)
}

/// Left-to-right decoding: one position is unmasked per step and never
/// revisited. The step fed to the model is recovered from the current
/// fraction of masks. Conserved positions, if any, are fixed from the start.
pub fn autoregressive_sample(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    guidance: Option<Guided>,
    infill: Option<(&Sequence, &PositionMask)>,
    record: bool,
    rng: &mut Rng,
) -> Result<(Sequence, SampleTrace), SampleError> {
    if schedule.steps() != model.config().timesteps {
        return Err(SampleError::Timesteps);
    }
    let (l, mask) = (model.length(), model.mask_index());
    let mut w = Sequence::filled(l, mask);
    if let Some((seed, cons)) = infill {
        merge_rows(&mut w, seed, cons);
    }
    let guidance = guidance.filter(|g| g.cfg.is_active());
    let mut trace = SampleTrace::default();
    if record {
        trace.push(schedule.steps(), &w, None);
    }
    for i in 0..l {
        if w.get(i) != mask {
            continue;
        }
        let frac = w.ids().iter().filter(|&&x| x == mask).count() as f64 / l as f64;
        let t = schedule.step_for_mask_fraction(frac).max(1);
        let (h, stats) = match guidance {
            None => (model.hidden(&w, t)?, None),
            Some(g) => {
                let layer = g.cfg.layer_for(model);
                let h = model.guidance_state(&w, t, layer)?;
                let base = lift_tensor(model, &h, t, layer)?;
                let reference = model.token_log_probs_tensor(&base)?;
                let weights = match g.cfg.kl_form {
                    KlForm::Prediction => Tensor::full(&[1, l], 1.0),
                    KlForm::Transition => Tensor::from_fn(&[1, l], |j| (j == i) as u8 as f64),
                };
                let (h2, st) = nos_step(model, &h, t, layer, &reference, &weights, g.value, g.cfg, g.cfg.objective(), None, rng)?;
                (lift_tensor(model, &h2, t, layer)?, Some(st))
            }
        };
        let probs = model.token_distribution(&h, true)?;
        w.set(i, draw(probs.row(i), rng));
        if record {
            trace.push(schedule.step_for_mask_fraction(frac - 1.0 / l as f64), &w, stats);
        }
    }
    Ok((w, trace))
}

/// Sum over unmasked positions of `log p(w_i | w with i masked)` at `t = 1`.
pub fn pseudo_log_likelihood(model: &Denoiser, seq: &Sequence) -> Result<f64, SampleError> {
    let (l, mask) = (model.length(), model.mask_index());
    let positions: Vec<usize> = (0..l).filter(|&i| seq.get(i) != mask).collect();
    if positions.is_empty() {
        return Ok(0.0);
    }
    let copies: Vec<Sequence> = positions
        .iter()
        .map(|&i| {
            let mut c = seq.clone();
            c.set(i, mask);
            c
        })
        .collect();
    let refs: Vec<&Sequence> = copies.iter().collect();
    let mut tape = Tape::frozen();
    let (_, h) = model.encode(&mut tape, &refs, &vec![1; refs.len()])?;
    let lp = model.token_log_probs(&mut tape, h)?;
    let lp = tape.value(lp);
    let v = model.vocab();
    Ok(positions
        .iter()
        .enumerate()
        .map(|(b, &i)| lp.data()[(b * l + i) * v + seq.get(i)])
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DenoiserConfig, ExpectedClass, GuidanceLayer};
    use crate::noise::ScheduleKind;
    use crate::rng::Rng;
    use crate::sample::InnerOptimizer;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn model(t: usize) -> Denoiser {
        let cfg = DenoiserConfig {
            vocab: 4,
            length: 6,
            embed_dim: 4,
            channels: 6,
            encoder_blocks: 1,
            head_blocks: 1,
            kernel_width: 3,
            ensemble_size: 2,
            objective_classes: vec![3],
            timesteps: t,
            guidance_layer: GuidanceLayer::Last,
        };
        Denoiser::new(cfg, &mut Rng::seed_from_u64(11)).unwrap()
    }

    fn sched(t: usize) -> NoiseSchedule {
        NoiseSchedule::new(ScheduleKind::Cosine, t).unwrap()
    }

    #[test]
    fn discrete_chain_never_remasks_and_ends_clean() {
        let m = model(8);
        let s = sched(8);
        let chain = Chain::new(&s, 8).recording(true);
        let (w, trace) = sample_discrete(&m, &chain, &mut Rng::seed_from_u64(1)).unwrap();
        assert_eq!(trace.len(), 9);
        assert!(w.ids().iter().all(|&x| x < 4));
        for pair in trace.rows.windows(2) {
            for i in 0..6 {
                let (a, b) = (pair[0].seq.get(i), pair[1].seq.get(i));
                if a != m.mask_index() {
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn all_conserved_infill_returns_seed() {
        let m = model(8);
        let s = sched(8);
        let seed = Sequence::new(vec![0, 1, 2, 3, 2, 1]);
        let cons = PositionMask::all_conserved(6);
        let chain = Chain::new(&s, 4).infill(&seed, &cons);
        let (w, _) = sample_discrete(&m, &chain, &mut Rng::seed_from_u64(2)).unwrap();
        assert_eq!(w, seed);
        let (w, _) = sample_continuous(&m, &chain, &mut Rng::seed_from_u64(2)).unwrap();
        assert_eq!(w, seed);
    }

    #[test]
    fn no_conserved_infill_matches_unguided() {
        let m = model(8);
        let s = sched(8);
        let seed = Sequence::new(vec![0, 1, 2, 3, 2, 1]);
        let cons = PositionMask::none_conserved(6);
        let plain = Chain::new(&s, 4);
        let inf = Chain::new(&s, 4).infill(&seed, &cons);
        for k in 0..5 {
            let a = sample_discrete(&m, &plain, &mut Rng::seed_from_u64(k)).unwrap().0;
            let b = sample_discrete(&m, &inf, &mut Rng::seed_from_u64(k)).unwrap().0;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn inactive_guidance_reduces_to_unguided() {
        let m = model(8);
        let s = sched(8);
        let value = ExpectedClass { objective: 0 };
        let plain = Chain::new(&s, 8);
        for cfg in [
            GuidanceConfig {
                eta: 0.0,
                steps: 1,
                ..GuidanceConfig::default()
            },
            GuidanceConfig {
                steps: 0,
                temperature: 0.3,
                ..GuidanceConfig::default()
            },
        ] {
            let guided = Chain::new(&s, 8).guided(&cfg, &value);
            for k in 0..4 {
                let a = sample_discrete(&m, &plain, &mut Rng::seed_from_u64(k)).unwrap().0;
                let b = sample_discrete(&m, &guided, &mut Rng::seed_from_u64(k)).unwrap().0;
                assert_eq!(a, b);
                let a = sample_continuous(&m, &plain, &mut Rng::seed_from_u64(k)).unwrap().0;
                let b = sample_continuous(&m, &guided, &mut Rng::seed_from_u64(k)).unwrap().0;
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn guided_chains_run_with_every_option() {
        let m = model(8);
        let s = sched(8);
        let value = ExpectedClass { objective: 0 };
        for layer in [GuidanceLayer::First, GuidanceLayer::Last] {
            for optimizer in [InnerOptimizer::Sgd, InnerOptimizer::Adagrad] {
                for kl_form in [KlForm::Prediction, KlForm::Transition] {
                    let cfg = GuidanceConfig {
                        layer: Some(layer),
                        optimizer,
                        kl_form,
                        temperature: 0.01,
                        steps: 2,
                        ..GuidanceConfig::default()
                    };
                    let chain = Chain::new(&s, 4).guided(&cfg, &value).recording(true);
                    let (w, tr) = sample_discrete(&m, &chain, &mut Rng::seed_from_u64(5)).unwrap();
                    assert!(w.ids().iter().all(|&x| x < 4));
                    assert_eq!(tr.rows[1].losses.len(), 2);
                    let (w, _) = sample_continuous(&m, &chain, &mut Rng::seed_from_u64(5)).unwrap();
                    assert!(w.ids().iter().all(|&x| x < 4));
                    let g = Guided { cfg: &cfg, value: &value };
                    let (w, _) = autoregressive_sample(&m, &s, Some(g), None, false, &mut Rng::seed_from_u64(5)).unwrap();
                    assert!(w.ids().iter().all(|&x| x < 4));
                }
            }
        }
    }

    #[test]
    fn autoregressive_fixes_prefixes() {
        let m = model(8);
        let s = sched(8);
        let (w, trace) = autoregressive_sample(&m, &s, None, None, true, &mut Rng::seed_from_u64(3)).unwrap();
        assert_eq!(trace.len(), 7);
        for (k, row) in trace.rows.iter().enumerate() {
            for i in 0..6 {
                if i < k {
                    assert_eq!(row.seq.get(i), w.get(i));
                } else {
                    assert_eq!(row.seq.get(i), m.mask_index());
                }
            }
        }
    }

    #[test]
    fn pll_matches_one_at_a_time() {
        let m = model(8);
        let seq = Sequence::new(vec![3, 1, 0, 2, 2, 1]);
        let fast = pseudo_log_likelihood(&m, &seq).unwrap();
        let mut slow = 0.0;
        for i in (0..6).rev() {
            let mut c = seq.clone();
            c.set(i, m.mask_index());
            let h = m.hidden(&c, 1).unwrap();
            let lp = m.token_log_probs_tensor(&h).unwrap();
            slow += lp.row(i)[seq.get(i)];
        }
        assert!((fast - slow).abs() < 1e-9);
    }

    #[test]
    fn bad_timesteps_are_rejected() {
        let m = model(8);
        let s = sched(8);
        let mut chain = Chain::new(&s, 4);
        chain.timesteps = vec![8, 8, 0];
        assert_eq!(sample_discrete(&m, &chain, &mut Rng::seed_from_u64(0)).unwrap_err(), SampleError::Timesteps);
        let other = sched(6);
        let chain = Chain::new(&other, 3);
        assert!(sample_discrete(&m, &chain, &mut Rng::seed_from_u64(0)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn infill_conserves_seed(seed_ids in prop::collection::vec(0usize..4, 6), bits in prop::collection::vec(any::<bool>(), 6), k in 0u64..1000) {
            let m = model(8);
            let s = sched(8);
            let seed = Sequence::new(seed_ids);
            let cons = PositionMask::new(bits);
            let value = ExpectedClass { objective: 0 };
            let cfg = GuidanceConfig { steps: 1, ..GuidanceConfig::default() };
            let chain = Chain::new(&s, 4).infill(&seed, &cons).guided(&cfg, &value);
            let (w, _) = sample_discrete(&m, &chain, &mut Rng::seed_from_u64(k)).unwrap();
            let (x, _) = sample_continuous(&m, &chain, &mut Rng::seed_from_u64(k)).unwrap();
            let (y, _) = autoregressive_sample(&m, &s, None, Some((&seed, &cons)), false, &mut Rng::seed_from_u64(k)).unwrap();
            for i in 0..6 {
                if cons.is_conserved(i) {
                    prop_assert_eq!(w.get(i), seed.get(i));
                    prop_assert_eq!(x.get(i), seed.get(i));
                    prop_assert_eq!(y.get(i), seed.get(i));
                }
            }
        }
    }
}
