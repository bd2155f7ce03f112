use super::LamboError;
use crate::seqcore::{Alphabet, Sequence};
use regex::Regex;
use serde::{Deserialize, Serialize};

pub const DEFAULT_SEQUON: &str = "N[^P][ST]";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstraintConfig {
    pub conserve_cysteines: bool,
    pub cysteine_parity: bool,
    /// Pattern searched in the residue string; `None` disables the check.
    pub sequon: Option<String>,
    /// Half-open `[start, end)` chain segments for the parity rule; empty
    /// means the whole sequence.
    pub segments: Vec<(usize, usize)>,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        ConstraintConfig {
            conserve_cysteines: true,
            cysteine_parity: true,
            sequon: Some(DEFAULT_SEQUON.to_string()),
            segments: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    CysteineChanged { position: usize },
    OddCysteines { segment: usize },
    Sequon { position: usize },
}

/// Liability rules bound to one seed.
#[derive(Debug, Clone)]
pub struct ConstraintSet {
    alphabet: Alphabet,
    cysteine: Option<usize>,
    canonical: Vec<usize>,
    parity: bool,
    sequon: Option<Regex>,
    segments: Vec<(usize, usize)>,
}

impl ConstraintSet {
    pub fn for_seed(seed: &Sequence, alphabet: &Alphabet, cfg: &ConstraintConfig) -> Result<Self, LamboError> {
        let cysteine = alphabet.index_of('C');
        let canonical = match cysteine {
            Some(c) if cfg.conserve_cysteines => (0..seed.len()).filter(|&i| seed.get(i) == c).collect(),
            _ => Vec::new(),
        };
        let sequon = match &cfg.sequon {
            Some(p) => Some(Regex::new(p).map_err(|e| LamboError::Constraint(e.to_string()))?),
            None => None,
        };
        let segments = if cfg.segments.is_empty() {
            vec![(0, seed.len())]
        } else {
            cfg.segments.clone()
        };
        if segments.iter().any(|&(a, b)| a > b || b > seed.len()) {
            return Err(LamboError::Constraint(format!("segments {segments:?} exceed length {}", seed.len())));
        }
        Ok(ConstraintSet {
            alphabet: alphabet.clone(),
            cysteine,
            canonical,
            parity: cfg.cysteine_parity,
            sequon,
            segments,
        })
    }

    /// Positions that must stay fixed for the cysteine rule.
    pub fn canonical_cysteines(&self) -> &[usize] {
        &self.canonical
    }

    /// Every rule `w` breaks; empty means feasible.
    pub fn check(&self, w: &Sequence) -> Vec<Violation> {
        let mut out = Vec::new();
        if let Some(c) = self.cysteine {
            for &i in &self.canonical {
                if w.get(i) != c {
                    out.push(Violation::CysteineChanged { position: i });
                }
            }
            if self.parity {
                for (k, &(a, b)) in self.segments.iter().enumerate() {
                    if w.ids()[a..b].iter().filter(|&&x| x == c).count() % 2 == 1 {
                        out.push(Violation::OddCysteines { segment: k });
                    }
                }
            }
        }
        if let Some(re) = &self.sequon {
            // Residue string without pads, with a map back to positions.
            let pad = self.alphabet.pad_index();
            let mut text = String::new();
            let mut origin = Vec::new();
            for (i, &x) in w.ids().iter().enumerate() {
                if x != pad {
                    let ch = self.alphabet.symbol(x);
                    text.push(ch);
                    origin.extend(std::iter::repeat(i).take(ch.len_utf8()));
                }
            }
            let mut start = 0;
            while start < text.len() {
                match re.find_at(&text, start) {
                    Some(m) => {
                        out.push(Violation::Sequon { position: origin[m.start()] });
                        start = m.start() + 1;
                        while !text.is_char_boundary(start) {
                            start += 1;
                        }
                    }
                    None => break,
                }
            }
        }
        out
    }

    pub fn is_feasible(&self, w: &Sequence) -> bool {
        self.check(w).is_empty()
    }
}
