use super::config::{CorpusSource, ExperimentConfig};
use super::objectives::CompiledObjective;
use super::HarnessError;
use crate::model::{Denoiser, DenoiserConfig};
use crate::noise::NoiseSchedule;
use crate::rng::{Rng, Streams};
use crate::seqcore::{encode, parse_fasta, Sequence};
use crate::tensor::Checkpoint;
use crate::train::{train_loop, Hmm, LabeledExample, LogRow, HMM_PROFILE};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand::SeedableRng;
use std::path::Path;

/// Training, held-out and labeled splits with their objectives.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<Sequence>,
    pub heldout: Vec<Sequence>,
    pub labeled: Vec<LabeledExample>,
    pub objectives: Vec<CompiledObjective>,
    /// Generating model of synthetic corpora.
    pub hmm: Option<Hmm>,
}

fn plant(seqs: &mut [Sequence], positions: &[usize], targets: &[usize], rate: f64, rng: &mut Rng) {
    for s in seqs {
        for (&p, &t) in positions.iter().zip(targets) {
            if rng.gen::<f64>() < rate {
                s.set(p, t);
            }
        }
    }
}

pub fn build_corpus(cfg: &ExperimentConfig, streams: &Streams) -> Result<Corpus, HarnessError> {
    let c = &cfg.corpus;
    let len = cfg.model.length;
    let objectives: Vec<CompiledObjective> = cfg
        .objectives
        .iter()
        .map(|o| o.compile(&cfg.alphabet))
        .collect::<Result<_, _>>()?;
    let (mut train, mut heldout, hmm) = match c.source {
        CorpusSource::Hmm => {
            let tokens = cfg.alphabet.len();
            if tokens < 2 * HMM_PROFILE.len() {
                return Err(HarnessError::Config(format!(
                    "the two-state corpus needs at least {} tokens",
                    2 * HMM_PROFILE.len()
                )));
            }
            let hmm = Hmm::two_state(c.persistence, &HMM_PROFILE, tokens);
            let train = hmm.sample_many(c.train_size, len, &mut streams.stream("corpus.train", 0));
            let heldout = hmm.sample_many(c.heldout_size, len, &mut streams.stream("corpus.heldout", 0));
            (train, heldout, Some(hmm))
        }
        CorpusSource::Fasta => {
            let path = c.fasta.as_ref().expect("validated");
            let text = std::fs::read_to_string(path)
                .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
            let records = parse_fasta(&text, &cfg.alphabet).map_err(|e| HarnessError::Config(e.to_string()))?;
            let mut seqs: Vec<Sequence> = records
                .iter()
                .map(|r| encode(r, &cfg.alphabet, len))
                .collect::<Result<_, _>>()
                .map_err(|e| HarnessError::Config(e.to_string()))?;
            seqs.shuffle(&mut streams.stream("corpus.split", 0));
            if seqs.len() <= c.heldout_size {
                return Err(HarnessError::Config(format!(
                    "{} records leave nothing to train on after holding out {}",
                    seqs.len(),
                    c.heldout_size
                )));
            }
            let heldout = seqs.split_off(seqs.len() - c.heldout_size);
            seqs.truncate(c.train_size);
            (seqs, heldout, None)
        }
    };
    if let Some(p) = &c.planted {
        let targets: Vec<usize> = p
            .targets
            .chars()
            .map(|ch| cfg.alphabet.index_of(ch).ok_or_else(|| HarnessError::Config(format!("unknown residue {ch:?}"))))
            .collect::<Result<_, _>>()?;
        plant(&mut train, &p.positions, &targets, p.rate, &mut streams.stream("corpus.plant", 0));
        plant(&mut heldout, &p.positions, &targets, p.rate, &mut streams.stream("corpus.plant", 1));
    }
    let n_labeled = c.labeled_size.unwrap_or(train.len()).min(train.len());
    let labeled = if objectives.is_empty() {
        Vec::new()
    } else {
        train[..n_labeled]
            .iter()
            .map(|s| LabeledExample {
                seq: s.clone(),
                labels: objectives.iter().map(|o| Some(o.label(o.value(s)))).collect(),
            })
            .collect()
    };
    Ok(Corpus {
        train,
        heldout,
        labeled,
        objectives,
        hmm,
    })
}

/// A trained or loaded model with its training schedule.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub model: Denoiser,
    pub schedule: NoiseSchedule,
    /// Empty when the model was loaded.
    pub log: Vec<LogRow>,
}

pub fn prepare_model(cfg: &ExperimentConfig, corpus: &Corpus, streams: &Streams) -> Result<Prepared, HarnessError> {
    let model_cfg = cfg.model_config()?;
    let schedule = NoiseSchedule::new(cfg.train.schedule, model_cfg.timesteps)?;
    if let Some(path) = &cfg.checkpoint {
        let model = load_checkpoint(path, &model_cfg)?;
        return Ok(Prepared {
            model,
            schedule,
            log: Vec::new(),
        });
    }
    let mut model = Denoiser::new(model_cfg, &mut streams.stream("model.init", 0))?;
    let log = train_loop(&mut model, &corpus.train, &corpus.labeled, &cfg.train, &streams.child("train", 0))?;
    Ok(Prepared { model, schedule, log })
}

pub fn save_checkpoint(model: &Denoiser, path: &Path) -> Result<(), HarnessError> {
    let meta = serde_json::json!({ "model": model.config() });
    std::fs::write(path, model.params().to_checkpoint(meta).to_json())?;
    Ok(())
}

/// Loads parameters saved by [`save_checkpoint`]; the stored model config
/// must equal `expected`.
pub fn load_checkpoint(path: &Path, expected: &DenoiserConfig) -> Result<Denoiser, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let ck = Checkpoint::from_json(&text).map_err(|e| HarnessError::Checkpoint(e.to_string()))?;
    let stored: DenoiserConfig = serde_json::from_value(ck.meta.get("model").cloned().unwrap_or_default())
        .map_err(|e| HarnessError::Checkpoint(format!("model config: {e}")))?;
    if &stored != expected {
        return Err(HarnessError::Checkpoint(
            "stored model config differs from the experiment config".into(),
        ));
    }
    let mut model = Denoiser::new(stored, &mut Rng::seed_from_u64(0))?;
    model
        .params_mut()
        .load_checkpoint(&ck)
        .map_err(|e| HarnessError::Checkpoint(e.to_string()))?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::super::objectives::Objective;
    use super::*;
    use crate::model::DenoiserConfig;
    use crate::train::TrainConfig;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            model: DenoiserConfig {
                length: 12,
                embed_dim: 4,
                channels: 6,
                encoder_blocks: 1,
                head_blocks: 1,
                kernel_width: 3,
                ensemble_size: 2,
                timesteps: 8,
                ..DenoiserConfig::default()
            },
            train: TrainConfig {
                steps: 4,
                batch_size: 4,
                warmup_steps: 1,
                ..TrainConfig::default()
            },
            corpus: super::super::config::CorpusConfig {
                train_size: 30,
                heldout_size: 5,
                labeled_size: Some(10),
                ..Default::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn corpus_is_reproducible_and_labeled() {
        let cfg = tiny();
        let a = build_corpus(&cfg, &Streams::new(3)).unwrap();
        let b = build_corpus(&cfg, &Streams::new(3)).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.heldout.len(), 5);
        assert_eq!(a.labeled.len(), 10);
        for ex in &a.labeled {
            assert_eq!(ex.labels, vec![Some(a.objectives[0].label(a.objectives[0].value(&ex.seq)))]);
        }
    }

    #[test]
    fn planting_raises_target_frequency() {
        let mut cfg = tiny();
        cfg.corpus.planted = Some(super::super::config::PlantedConfig {
            positions: vec![0, 5],
            targets: "WY".into(),
            rate: 1.0,
        });
        cfg.objectives = vec![Objective::PlantedLinear {
            positions: vec![0, 5],
            targets: "WY".into(),
            weights: vec![],
        }];
        let c = build_corpus(&cfg, &Streams::new(1)).unwrap();
        assert!(c.train.iter().all(|s| c.objectives[0].value(s) == 2.0));
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let cfg = tiny();
        let corpus = build_corpus(&cfg, &Streams::new(0)).unwrap();
        let prepared = prepare_model(&cfg, &corpus, &Streams::new(0)).unwrap();
        assert_eq!(prepared.log.len(), 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        save_checkpoint(&prepared.model, &path).unwrap();
        let m = load_checkpoint(&path, prepared.model.config()).unwrap();
        for id in m.params().ids() {
            assert_eq!(m.params().value(id), prepared.model.params().value(id));
        }
        let mut other = prepared.model.config().clone();
        other.channels = 8;
        let err = load_checkpoint(&path, &other).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
