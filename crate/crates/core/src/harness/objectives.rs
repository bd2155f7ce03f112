use super::HarnessError;
use crate::seqcore::{Alphabet, Sequence};
use serde::{Deserialize, Serialize};

/// Ground-truth sequence objectives. Each is a pure function of the sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Objective {
    /// Fraction of non-pad residues drawn from `residues`.
    SheetFraction {
        #[serde(default = "default_sheet")]
        residues: String,
    },
    /// Occurrences of `motif` (overlapping), labeled up to `classes - 1`.
    MotifCount {
        motif: String,
        #[serde(default = "default_motif_classes")]
        classes: usize,
    },
    /// Weighted count of positions holding their target residue.
    PlantedLinear {
        positions: Vec<usize>,
        targets: String,
        #[serde(default)]
        weights: Vec<f64>,
    },
}

fn default_sheet() -> String {
    "EMAL".to_string()
}

fn default_motif_classes() -> usize {
    5
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::SheetFraction { .. } => "sheet_fraction",
            Objective::MotifCount { .. } => "motif_count",
            Objective::PlantedLinear { .. } => "planted_linear",
        }
    }

    pub fn compile(&self, alphabet: &Alphabet) -> Result<CompiledObjective, HarnessError> {
        let ids = |text: &str| -> Result<Vec<usize>, HarnessError> {
            text.chars()
                .map(|c| {
                    alphabet
                        .index_of(c)
                        .ok_or_else(|| HarnessError::Config(format!("residue {c:?} is not in the alphabet")))
                })
                .collect()
        };
        let rule = match self {
            Objective::SheetFraction { residues } => {
                let mut member = vec![false; alphabet.vocab_size()];
                for id in ids(residues)? {
                    member[id] = true;
                }
                Rule::Sheet {
                    member,
                    pad: alphabet.pad_index(),
                }
            }
            Objective::MotifCount { motif, classes } => {
                if motif.is_empty() || *classes < 2 {
                    return Err(HarnessError::Config("motif must be non-empty with at least 2 classes".into()));
                }
                Rule::Motif {
                    motif: ids(motif)?,
                    classes: *classes,
                }
            }
            Objective::PlantedLinear {
                positions,
                targets,
                weights,
            } => {
                let targets = ids(targets)?;
                if targets.len() != positions.len() || positions.is_empty() {
                    return Err(HarnessError::Config("planted positions and targets must pair up".into()));
                }
                let weights = if weights.is_empty() {
                    vec![1.0; positions.len()]
                } else {
                    weights.clone()
                };
                if weights.len() != positions.len() || weights.iter().any(|w| !(*w >= 0.0)) {
                    return Err(HarnessError::Config("planted weights must be non-negative, one per position".into()));
                }
                Rule::Planted {
                    positions: positions.clone(),
                    targets,
                    weights,
                }
            }
        };
        Ok(CompiledObjective { rule })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Rule {
    Sheet { member: Vec<bool>, pad: usize },
    Motif { motif: Vec<usize>, classes: usize },
    Planted { positions: Vec<usize>, targets: Vec<usize>, weights: Vec<f64> },
}

/// An objective bound to token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledObjective {
    rule: Rule,
}

impl CompiledObjective {
    pub fn value(&self, w: &Sequence) -> f64 {
        match &self.rule {
            Rule::Sheet { member, pad } => sheet_fraction(w, member, *pad),
            Rule::Motif { motif, .. } => motif_count(w, motif) as f64,
            Rule::Planted {
                positions,
                targets,
                weights,
            } => planted_linear(w, positions, targets, weights),
        }
    }

    /// Number of discrete label classes.
    pub fn classes(&self) -> usize {
        match &self.rule {
            Rule::Sheet { .. } => 11,
            Rule::Motif { classes, .. } => *classes,
            Rule::Planted { weights, .. } => weights.iter().sum::<f64>().round() as usize + 1,
        }
    }

    /// Class of an objective value.
    pub fn label(&self, value: f64) -> usize {
        let raw = match &self.rule {
            Rule::Sheet { .. } => (10.0 * value).round(),
            _ => value.round(),
        };
        (raw.max(0.0) as usize).min(self.classes() - 1)
    }

    /// Largest reachable objective value, for plot axes.
    pub fn upper(&self) -> f64 {
        match &self.rule {
            Rule::Sheet { .. } => 1.0,
            Rule::Motif { classes, .. } => (*classes - 1) as f64,
            Rule::Planted { weights, .. } => weights.iter().sum(),
        }
    }
}

/// Fraction of non-pad tokens in `member`; 0 for an all-pad sequence.
pub fn sheet_fraction(w: &Sequence, member: &[bool], pad: usize) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for &x in w.ids() {
        if x == pad {
            continue;
        }
        n += 1;
        if member.get(x).copied().unwrap_or(false) {
            hit += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

pub fn motif_count(w: &Sequence, motif: &[usize]) -> usize {
    if motif.len() > w.len() {
        return 0;
    }
    w.ids().windows(motif.len()).filter(|win| *win == motif).count()
}

pub fn planted_linear(w: &Sequence, positions: &[usize], targets: &[usize], weights: &[f64]) -> f64 {
    positions
        .iter()
        .zip(targets)
        .zip(weights)
        .filter(|((&p, &t), _)| p < w.len() && w.get(p) == t)
        .map(|(_, w)| w)
        .sum()
}
