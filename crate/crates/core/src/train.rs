//! Joint denoiser / discriminator training, label handling and the
//! synthetic hidden-Markov corpus.

use crate::exec::par_map;
use crate::model::{Denoiser, ModelError};
use crate::noise::{mask_forward, NoiseError, NoiseSchedule, ScheduleKind};
use crate::rng::{Rng, Streams};
use crate::seqcore::Sequence;
use crate::tensor::{Tape, Tensor, TensorError, Var};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("label {label} out of range for objective {objective} with {classes} classes")]
    Label {
        objective: usize,
        label: usize,
        classes: usize,
    },
    #[error("nothing to train on")]
    EmptyCorpus,
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionKind {
    /// Absorbing-mask corruption of tokens.
    #[default]
    Categorical,
    /// Gaussian corruption of normalized token embeddings.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub lr_floor: f64,
    /// Generative updates per discriminative update.
    pub gen_disc_ratio: usize,
    pub diffusion: DiffusionKind,
    pub schedule: ScheduleKind,
    /// Examples per worker task when a batch is split across threads.
    pub chunk_size: usize,
    /// Upsample rare classes of the first objective.
    pub balance_classes: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 32,
            learning_rate: 1e-3,
            warmup_steps: 100,
            lr_floor: 1e-6,
            gen_disc_ratio: 5,
            diffusion: DiffusionKind::Categorical,
            schedule: ScheduleKind::Cosine,
            chunk_size: 8,
            balance_classes: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.chunk_size == 0 {
            return Err(TrainError::Config("batch_size and chunk_size must be positive".into()));
        }
        if self.gen_disc_ratio == 0 {
            return Err(TrainError::Config("gen_disc_ratio must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || self.lr_floor < 0.0 || self.lr_floor > self.learning_rate {
            return Err(TrainError::Config("need 0 <= lr_floor <= learning_rate, learning_rate > 0".into()));
        }
        Ok(())
    }

    /// Learning rate at update `step`: linear warmup from 0, then cosine
    /// decay to `lr_floor` at the last update.
    pub fn lr_at(&self, step: usize) -> f64 {
        let peak = self.learning_rate;
        if step < self.warmup_steps {
            return peak * step as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1);
        let frac = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.lr_floor + (peak - self.lr_floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    /// Whether update `step` trains the discriminative heads.
    pub fn is_discriminative(&self, step: usize) -> bool {
        (step + 1) % (self.gen_disc_ratio + 1) == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub seq: Sequence,
    /// One entry per objective; `None` when unlabeled.
    pub labels: Vec<Option<usize>>,
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(shapes: &[Tensor], beta1: f64, beta2: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: shapes.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (self.m[i].data_mut(), self.v[i].data_mut(), grads[i].data());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// `alpha_bar * y + (1 - alpha_bar) / K`.
pub fn smoothed_labels(y: &[f64], alpha_bar: f64) -> Vec<f64> {
    let k = y.len() as f64;
    y.iter().map(|v| alpha_bar * v + (1.0 - alpha_bar) / k).collect()
}

/// Class 0 below `cutoff`; otherwise 1 + the number of interior decile
/// edges strictly below `value` (ties go to the lower class), capped at 10.
pub fn discretize_label(value: f64, cutoff: f64, decile_edges: &[f64]) -> usize {
    if value < cutoff {
        return 0;
    }
    let above = decile_edges.iter().filter(|&&e| value > e).count();
    (1 + above).min(10)
}

/// The nine interior decile edges of `values`.
pub fn decile_edges(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    if v.is_empty() {
        return vec![];
    }
    (1..10)
        .map(|k| {
            let pos = k as f64 / 10.0 * (v.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        })
        .collect()
}

/// Sampling weights that equalize class frequencies of one objective.
/// Unlabeled examples get the mean weight. Every example keeps a positive weight.
pub fn balanced_weights(examples: &[LabeledExample], objective: usize) -> Vec<f64> {
    let mut counts = std::collections::BTreeMap::new();
    for e in examples {
        if let Some(Some(c)) = e.labels.get(objective) {
            *counts.entry(*c).or_insert(0usize) += 1;
        }
    }
    let weights: Vec<Option<f64>> = examples
        .iter()
        .map(|e| match e.labels.get(objective) {
            Some(Some(c)) => Some(1.0 / counts[c] as f64),
            _ => None,
        })
        .collect();
    let present: Vec<f64> = weights.iter().flatten().copied().collect();
    let fill = if present.is_empty() {
        1.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    weights.into_iter().map(|w| w.unwrap_or(fill)).collect()
}

/// Mean per-token cross-entropy of `targets` under log-probabilities `[B, L, V]`.
fn token_cross_entropy(tape: &mut Tape, log_probs: Var, targets: &[&Sequence], denom: f64) -> Result<Var, TensorError> {
    let shape = tape.shape(log_probs).to_vec();
    let v = shape[2];
    let mut w = Tensor::zeros(&shape);
    let l = shape[1];
    for (b, seq) in targets.iter().enumerate() {
        for (i, &tok) in seq.ids().iter().enumerate() {
            w.data_mut()[(b * l + i) * v + tok] = -1.0 / denom;
        }
    }
    let w = tape.constant(w)?;
    let y = tape.mul(log_probs, w)?;
    tape.sum(y)
}

/// One example prepared for a loss evaluation: the corrupted input (tokens
/// or noisy embedding) and its timestep.
#[derive(Debug, Clone)]
pub enum Corrupted {
    Tokens(Sequence, usize),
    /// Gaussian: per-example noise for `x_t = sqrt(ab) x0 + sqrt(1-ab) noise`.
    Embedding(Tensor, usize),
}

impl Corrupted {
    fn step(&self) -> usize {
        match self {
            Corrupted::Tokens(_, t) | Corrupted::Embedding(_, t) => *t,
        }
    }
}

/// Corrupts a clean example at step `t`.
pub fn corrupt(
    model: &Denoiser,
    kind: DiffusionKind,
    seq: &Sequence,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Corrupted, TrainError> {
    Ok(match kind {
        DiffusionKind::Categorical => Corrupted::Tokens(mask_forward(seq, t, schedule, model.mask_index(), rng)?, t),
        DiffusionKind::Gaussian => {
            let n = model.length() * model.config().embed_dim;
            let noise = Tensor::from_fn(&[n], |_| rng.sample::<f64, _>(StandardNormal));
            Corrupted::Embedding(noise, t)
        }
    })
}

/// Encoder output for a batch of corrupted inputs whose clean versions are `clean`.
fn encode_corrupted(
    model: &Denoiser,
    tape: &mut Tape,
    clean: &[&Sequence],
    inputs: &[&Corrupted],
    schedule: &NoiseSchedule,
) -> Result<Var, TrainError> {
    let ts: Vec<usize> = inputs.iter().map(|c| c.step()).collect();
    match inputs[0] {
        Corrupted::Tokens(..) => {
            let seqs: Vec<&Sequence> = inputs
                .iter()
                .map(|c| match c {
                    Corrupted::Tokens(s, _) => s,
                    Corrupted::Embedding(..) => unreachable!("mixed corruption kinds"),
                })
                .collect();
            Ok(model.encode(tape, &seqs, &ts)?.1)
        }
        Corrupted::Embedding(..) => {
            let x0 = model.embed(tape, clean)?;
            let (l, e) = (model.length(), model.config().embed_dim);
            let mut scale = Vec::with_capacity(inputs.len() * l * e);
            let mut noise = Vec::with_capacity(inputs.len() * l * e);
            for c in inputs {
                let Corrupted::Embedding(eps, t) = c else {
                    unreachable!("mixed corruption kinds")
                };
                let ab = schedule.alpha_bar(*t);
                scale.extend(std::iter::repeat(ab.sqrt()).take(l * e));
                noise.extend(eps.data().iter().map(|v| v * (1.0 - ab).sqrt()));
            }
            let shape = [inputs.len(), l, e];
            let a = tape.constant(Tensor::new(shape.to_vec(), scale)?)?;
            let n = tape.constant(Tensor::new(shape.to_vec(), noise)?)?;
            let x = tape.mul(x0, a)?;
            let x = tape.add(x, n)?;
            Ok(model.encode_embedded(tape, x, &ts)?)
        }
    }
}

/// Mean per-token cross-entropy of the clean tokens given corrupted inputs,
/// scaled by `weight` (the chunk's share of the full batch).
pub fn diffusion_loss(
    model: &Denoiser,
    tape: &mut Tape,
    clean: &[&Sequence],
    inputs: &[&Corrupted],
    schedule: &NoiseSchedule,
    weight: f64,
) -> Result<Var, TrainError> {
    let h = encode_corrupted(model, tape, clean, inputs, schedule)?;
    let lp = model.token_log_probs(tape, h)?;
    let denom = (clean.len() * model.length()) as f64 / weight;
    Ok(token_cross_entropy(tape, lp, clean, denom)?)
}

/// Cross-entropy of every ensemble head against smoothed labels, averaged
/// over heads and over present labels, summed over objectives.
pub fn discriminator_loss(
    model: &Denoiser,
    tape: &mut Tape,
    examples: &[&LabeledExample],
    inputs: &[&Corrupted],
    schedule: &NoiseSchedule,
    weight: f64,
) -> Result<Var, TrainError> {
    let clean: Vec<&Sequence> = examples.iter().map(|e| &e.seq).collect();
    let mut terms = Vec::new();
    let h = encode_corrupted(model, tape, &clean, inputs, schedule)?;
    for o in 0..model.objectives() {
        let k = model.classes(o);
        let present: Vec<(usize, usize)> = examples
            .iter()
            .enumerate()
            .filter_map(|(b, e)| e.labels.get(o).copied().flatten().map(|y| (b, y)))
            .collect();
        if present.is_empty() {
            continue;
        }
        let mut target = Tensor::zeros(&[examples.len(), k]);
        let members = model.config().ensemble_size as f64;
        for &(b, y) in &present {
            if y >= k {
                return Err(TrainError::Label {
                    objective: o,
                    label: y,
                    classes: k,
                });
            }
            let mut onehot = vec![0.0; k];
            onehot[y] = 1.0;
            let ab = schedule.alpha_bar(inputs[b].step());
            for (c, p) in smoothed_labels(&onehot, ab).into_iter().enumerate() {
                target.data_mut()[b * k + c] = -p * weight / (present.len() as f64 * members);
            }
        }
        let target = tape.constant(target)?;
        for z in model.objective_logits(tape, h, o)? {
            let lp = tape.log_softmax(z)?;
            let y = tape.mul(lp, target)?;
            terms.push(tape.sum(y)?);
        }
    }
    let mut total = match terms.first() {
        Some(&v) => v,
        None => return Ok(tape.constant(Tensor::scalar(0.0))?),
    };
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Generative,
    Discriminative,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Generative => "generative",
            LossKind::Discriminative => "discriminative",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub kind: LossKind,
    pub loss: f64,
    pub lr: f64,
}

/// Loss and parameter gradients of one chunk.
type ChunkResult = Result<(f64, Vec<Tensor>), TrainError>;

/// Trains `model` in place and returns one log row per update.
pub fn train_loop(
    model: &mut Denoiser,
    corpus: &[Sequence],
    labeled: &[LabeledExample],
    cfg: &TrainConfig,
    streams: &Streams,
) -> Result<Vec<LogRow>, TrainError> {
    cfg.validate()?;
    if corpus.is_empty() && labeled.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let schedule = NoiseSchedule::new(cfg.schedule, model.config().timesteps)?;
    let steps_t = schedule.steps();
    let values: Vec<Tensor> = model.params().ids().map(|id| model.params().value(id).clone()).collect();
    let mut adam = Adam::new(&values, 0.99, 0.999);
    let weights = if cfg.balance_classes && !labeled.is_empty() {
        balanced_weights(labeled, 0)
    } else {
        vec![1.0; labeled.len()]
    };
    let picker = if labeled.is_empty() {
        None
    } else {
        Some(WeightedIndex::new(&weights).map_err(|e| TrainError::Config(e.to_string()))?)
    };
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let lr = cfg.lr_at(step);
        let disc = !labeled.is_empty() && (corpus.is_empty() || cfg.is_discriminative(step));
        let mut rng = streams.stream("train", step as u64);
        let b = cfg.batch_size;
        let model_ref: &Denoiser = model;
        let results: Vec<ChunkResult> = if disc {
            let picker = picker.as_ref().expect("labeled corpus present");
            let mut batch = Vec::with_capacity(b);
            for _ in 0..b {
                let ex = &labeled[picker.sample(&mut rng)];
                let t = rng.gen_range(0..=steps_t);
                batch.push((ex, corrupt(model_ref, cfg.diffusion, &ex.seq, t, &schedule, &mut rng)?));
            }
            let chunks: Vec<&[(&LabeledExample, Corrupted)]> = batch.chunks(cfg.chunk_size).collect();
            par_map(&chunks, |_, chunk| {
                let mut tape = Tape::new();
                let ex: Vec<&LabeledExample> = chunk.iter().map(|c| c.0).collect();
                let inp: Vec<&Corrupted> = chunk.iter().map(|c| &c.1).collect();
                let w = chunk.len() as f64 / b as f64;
                let loss = discriminator_loss(model_ref, &mut tape, &ex, &inp, &schedule, w)?;
                finish_chunk(model_ref, &tape, loss)
            })
        } else {
            let mut batch = Vec::with_capacity(b);
            for _ in 0..b {
                let seq = &corpus[rng.gen_range(0..corpus.len())];
                let t = rng.gen_range(1..=steps_t);
                batch.push((seq, corrupt(model_ref, cfg.diffusion, seq, t, &schedule, &mut rng)?));
            }
            let chunks: Vec<&[(&Sequence, Corrupted)]> = batch.chunks(cfg.chunk_size).collect();
            par_map(&chunks, |_, chunk| {
                let mut tape = Tape::new();
                let clean: Vec<&Sequence> = chunk.iter().map(|c| c.0).collect();
                let inp: Vec<&Corrupted> = chunk.iter().map(|c| &c.1).collect();
                let w = chunk.len() as f64 / b as f64;
                let loss = diffusion_loss(model_ref, &mut tape, &clean, &inp, &schedule, w)?;
                finish_chunk(model_ref, &tape, loss)
            })
        };
        let mut total = 0.0;
        let mut grads = model.params().zero_grads();
        for r in results {
            let (l, g) = r?;
            total += l;
            for (acc, gi) in grads.iter_mut().zip(&g) {
                acc.add_assign(gi);
            }
        }
        adam.update(model.params_mut().values_mut(), &grads, lr);
        log.push(LogRow {
            step,
            kind: if disc {
                LossKind::Discriminative
            } else {
                LossKind::Generative
            },
            loss: total,
            lr,
        });
    }
    Ok(log)
}

fn finish_chunk(model: &Denoiser, tape: &Tape, loss: Var) -> ChunkResult {
    let value = tape.value(loss).item();
    let mut grads = model.params().zero_grads();
    let g = tape.backward(loss)?;
    model.params().accumulate(tape, &g, &mut grads);
    Ok((value, grads))
}

/// Per-token negative log-likelihood of `seq` by the chain rule, revealing
/// positions left to right; the step fed to the model is the one whose mask
/// rate matches the fraction of still-masked positions.
pub fn chain_rule_nll(model: &Denoiser, seq: &Sequence, schedule: &NoiseSchedule) -> Result<f64, TrainError> {
    let l = model.length();
    let mask = model.mask_index();
    let inputs: Vec<Sequence> = (0..l)
        .map(|i| {
            let mut s = seq.clone();
            for j in i..l {
                s.set(j, mask);
            }
            s
        })
        .collect();
    let ts: Vec<usize> = (0..l)
        .map(|i| schedule.step_for_mask_fraction((l - i) as f64 / l as f64))
        .collect();
    let refs: Vec<&Sequence> = inputs.iter().collect();
    let mut tape = Tape::frozen();
    let (_, h) = model.encode(&mut tape, &refs, &ts)?;
    let lp = model.token_log_probs(&mut tape, h)?;
    let lp = tape.value(lp);
    let v = model.vocab();
    let nll: f64 = (0..l).map(|i| -lp.data()[(i * l + i) * v + seq.get(i)]).sum();
    Ok(nll / l as f64)
}

/// Mean of [`chain_rule_nll`] over a held-out set.
pub fn heldout_cross_entropy(model: &Denoiser, seqs: &[Sequence], schedule: &NoiseSchedule) -> Result<f64, TrainError> {
    let per: Vec<Result<f64, TrainError>> = par_map(seqs, |_, s| chain_rule_nll(model, s, schedule));
    let mut total = 0.0;
    for r in per {
        total += r?;
    }
    Ok(total / seqs.len() as f64)
}

/// Emission profile of each hidden state, most likely token first.
pub const HMM_PROFILE: [f64; 10] = [0.3, 0.2, 0.15, 0.1, 0.08, 0.06, 0.05, 0.03, 0.02, 0.01];

/// Discrete hidden Markov model over token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Hmm {
    pub initial: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
    pub emission: Vec<Vec<f64>>,
}

fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|x| -x * x.ln()).sum()
}

fn draw(p: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

impl Hmm {
    /// Two states that stay put with probability `persistence`; state `s`
    /// emits tokens `s * profile.len() ..` with the given profile.
    pub fn two_state(persistence: f64, profile: &[f64], vocab: usize) -> Hmm {
        let k = profile.len();
        assert!(2 * k <= vocab, "vocabulary too small for disjoint emissions");
        let emission = (0..2)
            .map(|s| {
                let mut row = vec![0.0; vocab];
                row[s * k..(s + 1) * k].copy_from_slice(profile);
                row
            })
            .collect();
        Hmm {
            initial: vec![0.5, 0.5],
            transition: vec![
                vec![persistence, 1.0 - persistence],
                vec![1.0 - persistence, persistence],
            ],
            emission,
        }
    }

    pub fn sample(&self, len: usize, rng: &mut Rng) -> Sequence {
        let mut s = draw(&self.initial, rng);
        let mut ids = Vec::with_capacity(len);
        for i in 0..len {
            if i > 0 {
                s = draw(&self.transition[s], rng);
            }
            ids.push(draw(&self.emission[s], rng));
        }
        Sequence::new(ids)
    }

    pub fn sample_many(&self, count: usize, len: usize, rng: &mut Rng) -> Vec<Sequence> {
        (0..count).map(|_| self.sample(len, rng)).collect()
    }

    /// Stationary state distribution by power iteration.
    pub fn stationary(&self) -> Vec<f64> {
        let n = self.initial.len();
        let mut pi = vec![1.0 / n as f64; n];
        for _ in 0..10_000 {
            let next: Vec<f64> = (0..n)
                .map(|j| (0..n).map(|i| pi[i] * self.transition[i][j]).sum())
                .collect();
            pi = next;
        }
        pi
    }

    /// Entropy rate in nats per token, exact when emission supports are
    /// disjoint (the state is then a function of the token).
    pub fn entropy_rate(&self) -> f64 {
        let pi = self.stationary();
        pi.iter()
            .enumerate()
            .map(|(s, p)| p * (entropy(&self.transition[s]) + entropy(&self.emission[s])))
            .sum()
    }

    /// Stationary token marginal.
    pub fn unigram(&self) -> Vec<f64> {
        let pi = self.stationary();
        let v = self.emission[0].len();
        (0..v)
            .map(|tok| pi.iter().enumerate().map(|(s, p)| p * self.emission[s][tok]).sum())
            .collect()
    }
}
