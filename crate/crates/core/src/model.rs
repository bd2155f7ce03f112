//! Convolutional denoiser: token embedding, shared residual encoder,
//! language-model head and an ensemble of classification heads per objective.

use crate::rng::Rng;
use crate::seqcore::{PositionMask, Sequence};
use crate::tensor::{log_softmax_rows, softmax_rows, ParamId, ParamStore, Tape, Tensor, TensorError, Var};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence length {got} does not match model length {expected}")]
    Length { got: usize, expected: usize },
    #[error("token {id} outside model vocabulary of {vocab}")]
    Token { id: usize, vocab: usize },
    #[error("objective {0} has no heads")]
    Objective(usize),
    #[error("saliency gradient is not finite")]
    NonFiniteSaliency,
}

/// Which hidden representation guidance acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceLayer {
    /// Normalized token embeddings, before the encoder.
    First,
    /// Encoder output, just before the heads.
    #[default]
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// Data tokens; the mask token is index `vocab`.
    pub vocab: usize,
    pub length: usize,
    pub embed_dim: usize,
    pub channels: usize,
    pub encoder_blocks: usize,
    pub head_blocks: usize,
    pub kernel_width: usize,
    pub ensemble_size: usize,
    /// Class count of each objective head.
    pub objective_classes: Vec<usize>,
    /// Training diffusion steps; scales the time embedding.
    pub timesteps: usize,
    pub guidance_layer: GuidanceLayer,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            vocab: 21,
            length: 48,
            embed_dim: 16,
            channels: 64,
            encoder_blocks: 4,
            head_blocks: 2,
            kernel_width: 9,
            ensemble_size: 10,
            objective_classes: vec![],
            timesteps: 64,
            guidance_layer: GuidanceLayer::Last,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("vocab", self.vocab),
            ("length", self.length),
            ("embed_dim", self.embed_dim),
            ("channels", self.channels),
            ("kernel_width", self.kernel_width),
            ("ensemble_size", self.ensemble_size),
            ("timesteps", self.timesteps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.kernel_width % 2 == 0 {
            return Err(ModelError::Config("kernel_width must be odd".into()));
        }
        if self.embed_dim % 2 == 1 {
            return Err(ModelError::Config("embed_dim must be even".into()));
        }
        if self.objective_classes.iter().any(|&k| k < 2) {
            return Err(ModelError::Config("objective heads need at least 2 classes".into()));
        }
        Ok(())
    }

    pub fn mask_index(&self) -> usize {
        self.vocab
    }
}

#[derive(Debug, Clone)]
struct BlockIds {
    conv1: ParamId,
    bias1: ParamId,
    conv2: ParamId,
    bias2: ParamId,
}

#[derive(Debug, Clone)]
struct HeadIds {
    blocks: Vec<BlockIds>,
    out_w: ParamId,
    out_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    params: ParamStore,
    embed: ParamId,
    in_w: ParamId,
    in_b: ParamId,
    blocks: Vec<BlockIds>,
    lm_w: ParamId,
    lm_b: ParamId,
    heads: Vec<Vec<HeadIds>>,
    positions: Tensor,
}

/// `[len, dim]` sinusoidal features of `values`.
fn sinusoid(values: impl Iterator<Item = f64>, dim: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for v in values {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / dim as f64);
            out.push((v * freq).sin());
            out.push((v * freq).cos());
        }
    }
    out
}

fn gaussian(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig, rng: &mut Rng) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (e, c, k) = (cfg.embed_dim, cfg.channels, cfg.kernel_width);
        let mut p = ParamStore::new();
        let embed = p.add("embed", gaussian(&[cfg.vocab + 1, e], 1.0, rng));
        let in_w = p.add("input.w", gaussian(&[e, c], (1.0 / e as f64).sqrt(), rng));
        let in_b = p.add("input.b", Tensor::zeros(&[c]));
        let block = |p: &mut ParamStore, prefix: String, rng: &mut Rng| BlockIds {
            conv1: p.add(format!("{prefix}.conv1"), gaussian(&[k, c, c], (2.0 / (k * c) as f64).sqrt(), rng)),
            bias1: p.add(format!("{prefix}.bias1"), Tensor::zeros(&[c])),
            conv2: p.add(format!("{prefix}.conv2"), gaussian(&[k, c, c], (0.5 / (k * c) as f64).sqrt(), rng)),
            bias2: p.add(format!("{prefix}.bias2"), Tensor::zeros(&[c])),
        };
        let blocks = (0..cfg.encoder_blocks)
            .map(|b| block(&mut p, format!("encoder.{b}"), rng))
            .collect();
        let lm_w = p.add("lm.w", gaussian(&[c, cfg.vocab + 1], (1.0 / c as f64).sqrt(), rng));
        let lm_b = p.add("lm.b", Tensor::zeros(&[cfg.vocab + 1]));
        let mut heads = Vec::new();
        for (o, &classes) in cfg.objective_classes.iter().enumerate() {
            let mut members = Vec::new();
            for m in 0..cfg.ensemble_size {
                let hb = (0..cfg.head_blocks)
                    .map(|b| block(&mut p, format!("head.{o}.{m}.{b}"), rng))
                    .collect();
                let out_w = p.add(
                    format!("head.{o}.{m}.w"),
                    gaussian(&[c, classes], (1.0 / c as f64).sqrt(), rng),
                );
                let out_b = p.add(format!("head.{o}.{m}.b"), Tensor::zeros(&[classes]));
                members.push(HeadIds {
                    blocks: hb,
                    out_w,
                    out_b,
                });
            }
            heads.push(members);
        }
        let positions = Tensor::new(
            vec![cfg.length, e],
            sinusoid((0..cfg.length).map(|i| i as f64), e),
        )?;
        Ok(Denoiser {
            cfg,
            params: p,
            embed,
            in_w,
            in_b,
            blocks,
            lm_w,
            lm_b,
            heads,
            positions,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn vocab(&self) -> usize {
        self.cfg.vocab
    }

    pub fn length(&self) -> usize {
        self.cfg.length
    }

    pub fn mask_index(&self) -> usize {
        self.cfg.vocab
    }

    pub fn objectives(&self) -> usize {
        self.heads.len()
    }

    pub fn classes(&self, objective: usize) -> usize {
        self.cfg.objective_classes[objective]
    }

    fn check_seq(&self, seq: &Sequence) -> Result<(), ModelError> {
        if seq.len() != self.cfg.length {
            return Err(ModelError::Length {
                got: seq.len(),
                expected: self.cfg.length,
            });
        }
        if let Some(&id) = seq.ids().iter().find(|&&id| id > self.cfg.vocab) {
            return Err(ModelError::Token {
                id,
                vocab: self.cfg.vocab + 1,
            });
        }
        Ok(())
    }

    /// Time features for a batch, broadcast over positions: `[B, L, E]`.
    fn time_features(&self, ts: &[usize]) -> Tensor {
        let (l, e) = (self.cfg.length, self.cfg.embed_dim);
        let scale = 1000.0 / self.cfg.timesteps as f64;
        let rows = sinusoid(ts.iter().map(|&t| t as f64 * scale), e);
        let mut out = Vec::with_capacity(ts.len() * l * e);
        for b in 0..ts.len() {
            for _ in 0..l {
                out.extend_from_slice(&rows[b * e..(b + 1) * e]);
            }
        }
        Tensor::new(vec![ts.len(), l, e], out).expect("time feature shape")
    }

    /// Depth-0 hidden state: layer-normalized token embeddings, `[B, L, E]`.
    pub fn embed(&self, tape: &mut Tape, seqs: &[&Sequence]) -> Result<Var, ModelError> {
        let mut ids = Vec::with_capacity(seqs.len() * self.cfg.length);
        for s in seqs {
            self.check_seq(s)?;
            ids.extend_from_slice(s.ids());
        }
        let table = tape.param(&self.params, self.embed)?;
        let rows = tape.gather_rows(table, &ids)?;
        let x = tape.reshape(rows, &[seqs.len(), self.cfg.length, self.cfg.embed_dim])?;
        Ok(tape.layer_norm(x)?)
    }

    /// Embedding of one sequence as a plain tensor `[1, L, E]`.
    pub fn embed_tensor(&self, seq: &Sequence) -> Result<Tensor, ModelError> {
        let mut tape = Tape::frozen();
        let x = self.embed(&mut tape, &[seq])?;
        Ok(tape.value(x).clone())
    }

    /// Normalized embedding of every data token, `[vocab, E]`.
    pub fn token_embeddings(&self) -> Tensor {
        let table = self.params.value(self.embed);
        let e = self.cfg.embed_dim;
        let mut tape = Tape::frozen();
        let data = table.data()[..self.cfg.vocab * e].to_vec();
        let x = tape
            .constant(Tensor::new(vec![self.cfg.vocab, e], data).expect("table shape"))
            .expect("finite table");
        let y = tape.layer_norm(x).expect("finite");
        tape.value(y).clone()
    }

    fn residual_block(&self, tape: &mut Tape, x: Var, ids: &BlockIds) -> Result<Var, ModelError> {
        let w1 = tape.param(&self.params, ids.conv1)?;
        let b1 = tape.param(&self.params, ids.bias1)?;
        let w2 = tape.param(&self.params, ids.conv2)?;
        let b2 = tape.param(&self.params, ids.bias2)?;
        let y = tape.conv1d(x, w1)?;
        let y = tape.add_broadcast(y, b1)?;
        let y = tape.layer_norm(y)?;
        let y = tape.relu(y)?;
        let y = tape.conv1d(y, w2)?;
        let y = tape.add_broadcast(y, b2)?;
        Ok(tape.add(x, y)?)
    }

    /// Encoder output `[B, L, C]` from embedded inputs `[B, L, E]` at steps `ts`.
    pub fn encode_embedded(&self, tape: &mut Tape, x: Var, ts: &[usize]) -> Result<Var, ModelError> {
        let shape = tape.shape(x).to_vec();
        if shape != [ts.len(), self.cfg.length, self.cfg.embed_dim] {
            return Err(TensorError::InvalidShape {
                op: "encode_embedded",
                shape,
            }
            .into());
        }
        let pos = tape.constant(self.positions.clone())?;
        let time = tape.constant(self.time_features(ts))?;
        let x = tape.add_broadcast(x, pos)?;
        let x = tape.add(x, time)?;
        let w = tape.param(&self.params, self.in_w)?;
        let b = tape.param(&self.params, self.in_b)?;
        let mut h = tape.matmul(x, w)?;
        h = tape.add_broadcast(h, b)?;
        for ids in &self.blocks {
            h = self.residual_block(tape, h, ids)?;
        }
        Ok(h)
    }

    /// `(h0, h_last)` for a batch of token sequences.
    pub fn encode(&self, tape: &mut Tape, seqs: &[&Sequence], ts: &[usize]) -> Result<(Var, Var), ModelError> {
        let h0 = self.embed(tape, seqs)?;
        let h = self.encode_embedded(tape, h0, ts)?;
        Ok((h0, h))
    }

    /// Encoder output of one sequence as a tensor `[1, L, C]`.
    pub fn hidden(&self, seq: &Sequence, t: usize) -> Result<Tensor, ModelError> {
        let mut tape = Tape::frozen();
        let (_, h) = self.encode(&mut tape, &[seq], &[t])?;
        Ok(tape.value(h).clone())
    }

    /// Full LM logits including the mask slot: `[B, L, vocab + 1]`.
    pub fn lm_logits(&self, tape: &mut Tape, h: Var) -> Result<Var, ModelError> {
        let w = tape.param(&self.params, self.lm_w)?;
        let b = tape.param(&self.params, self.lm_b)?;
        let y = tape.matmul(h, w)?;
        Ok(tape.add_broadcast(y, b)?)
    }

    /// Data-token logits with the mask slot removed: `[B, L, vocab]`.
    pub fn token_logits(&self, tape: &mut Tape, h: Var) -> Result<Var, ModelError> {
        let full = self.lm_logits(tape, h)?;
        Ok(tape.slice_last(full, 0, self.cfg.vocab)?)
    }

    pub fn token_log_probs(&self, tape: &mut Tape, h: Var) -> Result<Var, ModelError> {
        let z = self.token_logits(tape, h)?;
        Ok(tape.log_softmax(z)?)
    }

    /// Softmax over all `vocab + 1` logits, or over data tokens only when
    /// `suppress_mask` is set (the mask column is then exactly 0).
    pub fn token_distribution(&self, h: &Tensor, suppress_mask: bool) -> Result<Tensor, ModelError> {
        let mut tape = Tape::frozen();
        let hv = tape.constant(h.clone())?;
        let z = self.lm_logits(&mut tape, hv)?;
        let z = tape.value(z);
        if !suppress_mask {
            return Ok(softmax_rows(z));
        }
        let v = self.cfg.vocab;
        let mut out = Vec::with_capacity(z.numel());
        for r in 0..z.rows() {
            let row = &z.row(r)[..v];
            let p = softmax_rows(&Tensor::from_vec(row.to_vec()));
            out.extend_from_slice(p.data());
            out.push(0.0);
        }
        Ok(Tensor::new(z.shape().to_vec(), out)?)
    }

    /// Data-token log-probabilities for a hidden tensor, `[.., L, vocab]`.
    pub fn token_log_probs_tensor(&self, h: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::frozen();
        let hv = tape.constant(h.clone())?;
        let z = self.token_logits(&mut tape, hv)?;
        Ok(log_softmax_rows(tape.value(z)))
    }

    fn head_member(&self, tape: &mut Tape, h: Var, ids: &HeadIds) -> Result<Var, ModelError> {
        let mut x = h;
        for b in &ids.blocks {
            x = self.residual_block(tape, x, b)?;
        }
        let pooled = tape.mean_axis1(x)?;
        let w = tape.param(&self.params, ids.out_w)?;
        let b = tape.param(&self.params, ids.out_b)?;
        let y = tape.matmul(pooled, w)?;
        Ok(tape.add_broadcast(y, b)?)
    }

    /// Class logits of every ensemble member for one objective, each `[B, K]`.
    pub fn objective_logits(&self, tape: &mut Tape, h: Var, objective: usize) -> Result<Vec<Var>, ModelError> {
        let members = self.heads.get(objective).ok_or(ModelError::Objective(objective))?;
        members.iter().map(|m| self.head_member(tape, h, m)).collect()
    }

    /// Ensemble-averaged class probabilities `[B, K]`.
    pub fn ensemble_probs(&self, tape: &mut Tape, h: Var, objective: usize) -> Result<Var, ModelError> {
        let logits = self.objective_logits(tape, h, objective)?;
        let probs = logits
            .into_iter()
            .map(|z| tape.softmax(z))
            .collect::<Result<Vec<_>, _>>()?;
        let batch = tape.shape(probs[0])[0];
        let k = self.classes(objective);
        let cat = tape.concat(&probs)?;
        let stacked = tape.reshape(cat, &[batch, probs.len(), k])?;
        Ok(tape.mean_axis1(stacked)?)
    }

    /// Per-member class probabilities for one sequence's encoder output,
    /// one row per ensemble member.
    pub fn head_probability_table(&self, h: &Tensor, objective: usize) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut tape = Tape::frozen();
        let hv = tape.constant(h.clone())?;
        let logits = self.objective_logits(&mut tape, hv, objective)?;
        Ok(logits
            .iter()
            .map(|&z| softmax_rows(tape.value(z)).data().to_vec())
            .collect())
    }

    /// Encoder output from a hidden state taken at `layer`.
    pub fn lift(&self, tape: &mut Tape, h: Var, t: usize, layer: GuidanceLayer) -> Result<Var, ModelError> {
        match layer {
            GuidanceLayer::Last => Ok(h),
            GuidanceLayer::First => self.encode_embedded(tape, h, &[t]),
        }
    }

    /// Hidden state of one sequence at `layer`, `[1, L, E or C]`.
    pub fn guidance_state(&self, seq: &Sequence, t: usize, layer: GuidanceLayer) -> Result<Tensor, ModelError> {
        match layer {
            GuidanceLayer::Last => self.hidden(seq, t),
            GuidanceLayer::First => self.embed_tensor(seq),
        }
    }

    /// Gradient of `value` with respect to the depth-0 hidden state of a
    /// clean sequence, as a `[L, E]` tensor, plus the value itself.
    pub fn value_gradient_h0(&self, seq: &Sequence, value: &dyn ValueHead) -> Result<(Tensor, f64), ModelError> {
        let h0 = self.embed_tensor(seq)?;
        let mut tape = Tape::frozen();
        let x = tape.input(h0)?;
        let h = self.encode_embedded(&mut tape, x, &[0])?;
        let v = value.value(self, &mut tape, h)?;
        let val = tape.value(v).item();
        let g = tape.backward(v)?.wrt(&tape, x);
        let g = g.reshape(&[self.cfg.length, self.cfg.embed_dim])?;
        Ok((g, val))
    }

    /// Per-position saliency scores for editing `seq`.
    ///
    /// Row-wise L1 norms of the value gradient are divided by their maximum,
    /// raised to `1 / tau` and floored at `eps`; immutable positions get 0.
    pub fn saliency(
        &self,
        seq: &Sequence,
        value: &dyn ValueHead,
        tau: f64,
        eps: f64,
        immutable: &PositionMask,
    ) -> Result<Vec<f64>, ModelError> {
        let (g, _) = self.value_gradient_h0(seq, value)?;
        if !g.is_finite() {
            return Err(ModelError::NonFiniteSaliency);
        }
        let norms: Vec<f64> = (0..g.rows()).map(|r| g.row(r).iter().map(|x| x.abs()).sum()).collect();
        Ok(saliency_from_norms(&norms, tau, eps, immutable))
    }
}

/// `max((g_i / max g)^(1/tau), eps)` in the log domain; 0 where immutable.
pub fn saliency_from_norms(norms: &[f64], tau: f64, eps: f64, immutable: &PositionMask) -> Vec<f64> {
    let top = norms
        .iter()
        .enumerate()
        .filter(|(i, _)| !immutable.is_conserved(*i))
        .map(|(_, &g)| g)
        .fold(0.0, f64::max);
    let log_eps = eps.ln();
    norms
        .iter()
        .enumerate()
        .map(|(i, &g)| {
            if immutable.is_conserved(i) {
                0.0
            } else if top <= 0.0 || g <= 0.0 {
                eps
            } else {
                ((g / top).ln() / tau).max(log_eps).exp()
            }
        })
        .collect()
}

/// A differentiable scalar read off the encoder output of one sequence.
pub trait ValueHead: Sync {
    /// `h` is the encoder output, `[1, L, C]`; the result is a scalar.
    fn value(&self, model: &Denoiser, tape: &mut Tape, h: Var) -> Result<Var, ModelError>;
}

impl<F> ValueHead for F
where
    F: Fn(&Denoiser, &mut Tape, Var) -> Result<Var, ModelError> + Sync,
{
    fn value(&self, model: &Denoiser, tape: &mut Tape, h: Var) -> Result<Var, ModelError> {
        self(model, tape, h)
    }
}

/// Expected class index under the ensemble-mean distribution of one objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpectedClass {
    pub objective: usize,
}

impl ValueHead for ExpectedClass {
    fn value(&self, model: &Denoiser, tape: &mut Tape, h: Var) -> Result<Var, ModelError> {
        let p = model.ensemble_probs(tape, h, self.objective)?;
        let k = model.classes(self.objective);
        let classes = tape.constant(Tensor::from_fn(&[k], |c| c as f64))?;
        let weighted = tape.mul_broadcast(p, classes)?;
        Ok(tape.sum(weighted)?)
    }
}

/// Value of a clean sequence (`t = 0`).
pub fn clean_value(model: &Denoiser, seq: &Sequence, value: &dyn ValueHead) -> Result<f64, ModelError> {
    let mut tape = Tape::frozen();
    let (_, h) = model.encode(&mut tape, &[seq], &[0])?;
    let v = value.value(model, &mut tape, h)?;
    Ok(tape.value(v).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small(objectives: Vec<usize>) -> Denoiser {
        let cfg = DenoiserConfig {
            vocab: 5,
            length: 7,
            embed_dim: 4,
            channels: 6,
            encoder_blocks: 2,
            head_blocks: 1,
            kernel_width: 3,
            ensemble_size: 3,
            objective_classes: objectives,
            timesteps: 8,
            guidance_layer: GuidanceLayer::Last,
        };
        Denoiser::new(cfg, &mut Rng::seed_from_u64(4)).unwrap()
    }

    fn seq() -> Sequence {
        Sequence::new(vec![0, 1, 2, 5, 4, 3, 1])
    }

    #[test]
    fn encode_is_deterministic_and_time_conditioned() {
        let m = small(vec![3]);
        let a = m.hidden(&seq(), 3).unwrap();
        assert_eq!(a, m.hidden(&seq(), 3).unwrap());
        assert!(a.max_abs_diff(&m.hidden(&seq(), 4).unwrap()) > 1e-6);
    }

    #[test]
    fn all_mask_hidden_state_varies_by_position() {
        let m = small(vec![]);
        let h = m.hidden(&Sequence::filled(7, 5), 8).unwrap();
        assert!(h.is_finite());
        let c = h.cols();
        let differs = (1..7).any(|r| {
            h.row(r).iter().zip(h.row(0)).any(|(a, b)| (a - b).abs() > 1e-9)
        });
        assert!(differs, "rows of width {c} identical");
    }

    #[test]
    fn token_distribution_rows_and_mask_suppression() {
        let m = small(vec![]);
        let h = m.hidden(&seq(), 2).unwrap();
        for suppress in [false, true] {
            let p = m.token_distribution(&h, suppress).unwrap();
            for r in 0..p.rows() {
                assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                if suppress {
                    assert_eq!(p.row(r)[5], 0.0);
                }
            }
        }
    }

    #[test]
    fn heads_differ_and_ensemble_mean_is_row_average() {
        let m = small(vec![3]);
        let h = m.hidden(&seq(), 0).unwrap();
        let table = m.head_probability_table(&h, 0).unwrap();
        assert_eq!(table.len(), 3);
        for row in &table {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(table[0].iter().zip(&table[1]).any(|(a, b)| (a - b).abs() > 1e-9));
        let mut tape = Tape::frozen();
        let hv = tape.constant(h).unwrap();
        let p = m.ensemble_probs(&mut tape, hv, 0).unwrap();
        for c in 0..3 {
            let avg = table.iter().map(|r| r[c]).sum::<f64>() / 3.0;
            assert!((tape.value(p).data()[c] - avg).abs() < 1e-15);
        }
    }

    #[test]
    fn logit_gradient_wrt_hidden_matches_finite_differences() {
        let m = small(vec![]);
        let h0 = m.hidden(&seq(), 1).unwrap();
        let pick = |tape: &mut Tape, h: Var| {
            let z = m.lm_logits(tape, h).unwrap();
            let flat = tape.reshape(z, &[7 * 6]).unwrap();
            let sel = tape.constant(Tensor::from_fn(&[42], |i| (i == 15) as u8 as f64)).unwrap();
            let y = tape.mul(flat, sel).unwrap();
            tape.sum(y).unwrap()
        };
        let mut tape = Tape::frozen();
        let hv = tape.input(h0.clone()).unwrap();
        let out = pick(&mut tape, hv);
        let g = tape.backward(out).unwrap().wrt(&tape, hv);
        for i in 0..h0.numel() {
            let f = |d: f64| {
                let mut hp = h0.clone();
                hp.data_mut()[i] += d;
                let mut t = Tape::frozen();
                let v = t.constant(hp).unwrap();
                let o = pick(&mut t, v);
                t.value(o).item()
            };
            let fd = (f(1e-5) - f(-1e-5)) / 2e-5;
            assert!((fd - g.data()[i]).abs() <= 1e-5 * fd.abs().max(1e-3));
        }
    }

    #[test]
    fn saliency_concentrates_on_single_position_value() {
        let m = small(vec![]);
        let value = |_: &Denoiser, tape: &mut Tape, h: Var| -> Result<Var, ModelError> {
            let sel = Tensor::from_fn(&[1, 7, 6], |i| (i / 6 == 2 && i % 6 == 1) as u8 as f64);
            let c = tape.constant(sel)?;
            let y = tape.mul(h, c)?;
            Ok(tape.sum(y)?)
        };
        // Route through the first layer so only position 2's embedding matters.
        let mut cfg = m.config().clone();
        cfg.encoder_blocks = 0;
        let m0 = Denoiser::new(cfg, &mut Rng::seed_from_u64(1)).unwrap();
        let s = m0
            .saliency(&seq(), &value, 1.0, 1e-6, &PositionMask::none_conserved(7))
            .unwrap();
        for (i, &v) in s.iter().enumerate() {
            if i == 2 {
                assert_eq!(v, 1.0);
            } else {
                assert_eq!(v, 1e-6);
            }
        }
    }

    #[test]
    fn saliency_is_scale_invariant_and_zero_when_immutable() {
        let m = small(vec![4]);
        let value = ExpectedClass { objective: 0 };
        let scaled = |m: &Denoiser, tape: &mut Tape, h: Var| -> Result<Var, ModelError> {
            let v = value.value(m, tape, h)?;
            Ok(tape.scale(v, 7.5)?)
        };
        let mut imm = vec![false; 7];
        imm[4] = true;
        let imm = PositionMask::new(imm);
        let a = m.saliency(&seq(), &value, 0.5, 1e-6, &imm).unwrap();
        let b = m.saliency(&seq(), &scaled, 0.5, 1e-6, &imm).unwrap();
        assert_eq!(a[4], 0.0);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn saliency_large_tau_is_uniform() {
        let norms = [0.5, 3.0, 1e-4, 2.0];
        let s = saliency_from_norms(&norms, 1e6, 1e-6, &PositionMask::none_conserved(4));
        for v in &s {
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn saliency_norms_match_finite_differences() {
        let m = small(vec![4]);
        let value = ExpectedClass { objective: 0 };
        let (g, _) = m.value_gradient_h0(&seq(), &value).unwrap();
        let h0 = m.embed_tensor(&seq()).unwrap();
        let eval = |h: Tensor| {
            let mut t = Tape::frozen();
            let x = t.constant(h).unwrap();
            let enc = m.encode_embedded(&mut t, x, &[0]).unwrap();
            let v = value.value(&m, &mut t, enc).unwrap();
            t.value(v).item()
        };
        for r in 0..7 {
            let mut fd_l1 = 0.0;
            for c in 0..4 {
                let i = r * 4 + c;
                let mut hp = h0.clone();
                hp.data_mut()[i] += 1e-5;
                let mut hm = h0.clone();
                hm.data_mut()[i] -= 1e-5;
                fd_l1 += ((eval(hp) - eval(hm)) / 2e-5).abs();
            }
            let l1: f64 = g.row(r).iter().map(|x| x.abs()).sum();
            assert!((l1 - fd_l1).abs() <= 1e-4 * fd_l1.max(1e-6), "row {r}: {l1} vs {fd_l1}");
        }
    }
}
