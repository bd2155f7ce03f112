use super::objectives::Objective;
use super::HarnessError;
use crate::lambo::LamboConfig;
use crate::model::{DenoiserConfig, GuidanceLayer};
use crate::sample::{InnerOptimizer, KlForm};
use crate::seqcore::Alphabet;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    /// Two-state hidden Markov sequences.
    #[default]
    Hmm,
    /// Records from `corpus.fasta`.
    Fasta,
}

/// Target residues planted at fixed positions of corpus sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedConfig {
    pub positions: Vec<usize>,
    pub targets: String,
    /// Per-position planting probability.
    #[serde(default = "half")]
    pub rate: f64,
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub source: CorpusSource,
    pub fasta: Option<PathBuf>,
    /// Probability that the hidden state is kept between positions.
    pub persistence: f64,
    pub train_size: usize,
    pub heldout_size: usize,
    /// Training sequences that carry objective labels (from the start of
    /// the training split); `None` labels all of them.
    pub labeled_size: Option<usize>,
    pub planted: Option<PlantedConfig>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            source: CorpusSource::Hmm,
            fasta: None,
            persistence: 0.95,
            train_size: 4000,
            heldout_size: 200,
            labeled_size: None,
            planted: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ChainKind {
    /// Absorbing-mask chain over tokens.
    #[default]
    Discrete,
    /// Gaussian chain over embeddings.
    Continuous,
}

/// Cartesian grid of guidance settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub lambda: Vec<f64>,
    pub eta: Vec<f64>,
    pub steps: Vec<usize>,
    pub optimizer: Vec<InnerOptimizer>,
    pub layer: Vec<GuidanceLayer>,
    pub temperature: f64,
    pub kl_form: KlForm,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            lambda: vec![0.001, 0.01, 0.1, 1.0, 10.0],
            eta: vec![0.5],
            steps: vec![5],
            optimizer: vec![InnerOptimizer::Sgd],
            layer: vec![GuidanceLayer::Last],
            temperature: 0.0,
            kl_form: KlForm::Prediction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub kind: ChainKind,
    /// Reverse steps per chain (strided over the training steps).
    pub steps: usize,
    /// Samples per grid cell.
    pub samples: usize,
    /// Objective whose head guides sampling.
    pub objective: usize,
    pub grid: GridConfig,
    pub unguided: bool,
    /// Also run every cell in left-to-right mode.
    pub autoregressive: bool,
    /// Chains per cell whose per-step trace is written.
    pub traced: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            kind: ChainKind::Discrete,
            steps: 16,
            samples: 200,
            objective: 0,
            grid: GridConfig::default(),
            unguided: true,
            autoregressive: false,
            traced: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McmcConfig {
    /// Chains to run; 0 disables the comparison.
    pub chains: usize,
    /// Proposals per chain.
    pub steps: usize,
    pub temperature: f64,
    /// Weight of the value term in the energy.
    pub value_weight: f64,
    /// Guided chains used as the reference, each over every training step.
    pub reference_chains: usize,
    /// KL weight of the reference chains; `None` picks the grid value whose
    /// mean objective is closest to `target`.
    pub reference_lambda: Option<f64>,
    pub target: f64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            chains: 0,
            steps: 640,
            temperature: 1.0,
            value_weight: 1.0,
            reference_chains: 32,
            reference_lambda: None,
            target: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InfillConfig {
    /// Held-out sequences to infill.
    pub count: usize,
    /// Length of the contiguous region, as a fraction of the sequence.
    pub region_fraction: f64,
    /// Guide the infill with the configured sampling objective.
    pub guided: bool,
    pub lambda: f64,
    pub eta: f64,
    pub inner_steps: usize,
}

impl Default for InfillConfig {
    fn default() -> Self {
        InfillConfig {
            count: 200,
            region_fraction: 0.25,
            guided: false,
            lambda: 0.1,
            eta: 0.5,
            inner_steps: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DesignConfig {
    /// Seeds drawn from the held-out split.
    pub seeds: usize,
    /// Seeds must score at most this on the first objective.
    pub max_seed_value: Option<f64>,
    /// Trailing positions that are never edited.
    pub immutable_suffix: usize,
    /// Also lock the seed's cysteine positions.
    pub lock_cysteines: bool,
}

impl Default for DesignConfig {
    fn default() -> Self {
        DesignConfig {
            seeds: 200,
            max_seed_value: None,
            immutable_suffix: 8,
            lock_cysteines: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub budgets: Vec<usize>,
    pub salient_temperature: f64,
    pub uniform_temperature: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            budgets: vec![2, 8, 32],
            salient_temperature: 0.1,
            uniform_temperature: 1e6,
        }
    }
}

/// Everything a run needs besides the root seed and output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub alphabet: Alphabet,
    pub corpus: CorpusConfig,
    pub objectives: Vec<Objective>,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    /// Parameters to load instead of training.
    pub checkpoint: Option<PathBuf>,
    pub sampling: SamplingConfig,
    pub mcmc: McmcConfig,
    pub infill: InfillConfig,
    pub design: DesignConfig,
    pub lambo: LamboConfig,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            alphabet: Alphabet::protein(),
            corpus: CorpusConfig::default(),
            objectives: vec![Objective::SheetFraction {
                residues: "EMAL".to_string(),
            }],
            model: DenoiserConfig::default(),
            train: TrainConfig::default(),
            checkpoint: None,
            sampling: SamplingConfig::default(),
            mcmc: McmcConfig::default(),
            infill: InfillConfig::default(),
            design: DesignConfig::default(),
            lambo: LamboConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML or JSON (by extension; `.json` is JSON, anything else
    /// TOML) and applies `key.path=value` overrides.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        Self::parse(&text, is_json, overrides)
    }

    pub fn parse(text: &str, is_json: bool, overrides: &[String]) -> Result<Self, HarnessError> {
        let mut value: toml::Value = if is_json {
            let v: serde_json::Value = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
            toml::Value::try_from(v).map_err(|e| HarnessError::Config(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: ExperimentConfig = value.try_into().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks cross-field consistency.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let cfg_err = |m: String| Err(HarnessError::Config(m));
        if self.model.vocab != self.alphabet.len() {
            return cfg_err(format!(
                "model.vocab = {} but the alphabet has {} tokens",
                self.model.vocab,
                self.alphabet.len()
            ));
        }
        self.model.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.lambo.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        let compiled: Result<Vec<_>, _> = self.objectives.iter().map(|o| o.compile(&self.alphabet)).collect();
        let compiled = compiled?;
        let classes: Vec<usize> = compiled.iter().map(|c| c.classes()).collect();
        if !self.model.objective_classes.is_empty() && self.model.objective_classes != classes {
            return cfg_err(format!(
                "model.objective_classes {:?} does not match the objectives {:?}",
                self.model.objective_classes, classes
            ));
        }
        if !self.objectives.is_empty() && self.sampling.objective >= self.objectives.len() {
            return cfg_err("sampling.objective is out of range".into());
        }
        if self.sampling.steps == 0 || self.sampling.steps > self.model.timesteps {
            return cfg_err("sampling.steps must be in 1..=model.timesteps".into());
        }
        if self.corpus.source == CorpusSource::Fasta && self.corpus.fasta.is_none() {
            return cfg_err("corpus.source = \"fasta\" needs corpus.fasta".into());
        }
        if !(0.0..=1.0).contains(&self.corpus.persistence) {
            return cfg_err("corpus.persistence must lie in [0, 1]".into());
        }
        if let Some(p) = &self.corpus.planted {
            if p.positions.len() != p.targets.chars().count() || p.positions.iter().any(|&i| i >= self.model.length) {
                return cfg_err("corpus.planted positions must pair with targets and fit the length".into());
            }
        }
        if !(0.0..=1.0).contains(&self.infill.region_fraction) {
            return cfg_err("infill.region_fraction must lie in [0, 1]".into());
        }
        if self.design.immutable_suffix >= self.model.length {
            return cfg_err("design.immutable_suffix leaves nothing to edit".into());
        }
        let g = &self.sampling.grid;
        if g.lambda.iter().any(|l| !(*l >= 0.0)) || g.eta.iter().any(|e| !(*e >= 0.0)) || !(g.temperature >= 0.0) {
            return cfg_err("sampling.grid values must be non-negative".into());
        }
        Ok(())
    }

    /// Model config with objective head sizes taken from the objectives.
    pub fn model_config(&self) -> Result<DenoiserConfig, HarnessError> {
        let mut m = self.model.clone();
        m.objective_classes = self
            .objectives
            .iter()
            .map(|o| o.compile(&self.alphabet).map(|c| c.classes()))
            .collect::<Result<_, _>>()?;
        Ok(m)
    }
}

/// Sets `a.b.c = value`, where `value` is parsed as a TOML value and falls
/// back to a plain string.
fn apply_override(root: &mut toml::Value, spec: &str) -> Result<(), HarnessError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override {spec:?} is not key=value")))?;
    let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| HarnessError::Config(format!("override {key:?}: {part:?} is not inside a table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(HarnessError::Config("empty override key".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_and_json_agree() {
        let toml_text = "[train]\nsteps = 10\n[sampling]\nsamples = 3\n";
        let json_text = r#"{"train": {"steps": 10}, "sampling": {"samples": 3}}"#;
        let a = ExperimentConfig::parse(toml_text, false, &[]).unwrap();
        let b = ExperimentConfig::parse(json_text, true, &[]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.steps, 10);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::parse("bogus = 1", false, &[]).is_err());
        assert!(ExperimentConfig::parse("[train]\nstepz = 1", false, &[]).is_err());
        assert!(ExperimentConfig::parse(r#"{"lambo": {"budgett": 3}}"#, true, &[]).is_err());
    }

    #[test]
    fn overrides_apply() {
        let c = ExperimentConfig::parse(
            "",
            false,
            &["train.steps=7".into(), "sampling.grid.lambda=[0.5]".into(), "corpus.source=fasta".into(), "corpus.fasta=x.fa".into()],
        )
        .unwrap();
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.sampling.grid.lambda, vec![0.5]);
        assert_eq!(c.corpus.source, CorpusSource::Fasta);
    }

    #[test]
    fn inconsistent_configs_are_rejected() {
        assert!(ExperimentConfig::parse("[model]\nvocab = 5", false, &[]).is_err());
        assert!(ExperimentConfig::parse("[model]\nobjective_classes = [3]", false, &[]).is_err());
        assert!(ExperimentConfig::parse("[sampling]\nsteps = 999", false, &[]).is_err());
        assert!(ExperimentConfig::parse("[lambo.guidance]\nlambda = 2.0", false, &[]).is_err());
    }
}
