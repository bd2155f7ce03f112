//! Token alphabets, fixed-length sequences, conservation masks and FASTA
//! ingestion for pre-aligned data.

use serde::{Deserialize, Serialize};
use std::fmt;

/// The twenty canonical amino acids in the usual one-letter order.
pub const AMINO_ACIDS: &str = "ACDEFGHIKLMNPQRSTVWY";

/// Symbol used when rendering the absorbing mask token.
pub const MASK_SYMBOL: char = '#';

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SeqError {
    #[error("alphabet symbol {0:?} appears more than once")]
    DuplicateSymbol(char),
    #[error("pad symbol {0:?} is not part of the alphabet")]
    PadNotInAlphabet(char),
    #[error("alphabet symbol {0:?} collides with the reserved mask symbol")]
    ReservedSymbol(char),
    #[error("line {line}: malformed FASTA header")]
    MalformedHeader { line: usize },
    #[error("line {line}: residues found before the first FASTA header")]
    MissingHeader { line: usize },
    #[error("line {line}: residue {symbol:?} is not in the alphabet")]
    UnknownResidue { symbol: char, line: usize },
    #[error("sequence of length {len} exceeds the fixed length {max}")]
    TooLong { len: usize, max: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
}

/// Ordered set of data symbols plus an implicit absorbing mask token.
///
/// The pad symbol is an ordinary data token. The mask token is never part of
/// clean data and always sits at index `len()`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "AlphabetSpec", into = "AlphabetSpec")]
pub struct Alphabet {
    symbols: Vec<char>,
    pad: char,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AlphabetSpec {
    symbols: String,
    pad: char,
}

impl TryFrom<AlphabetSpec> for Alphabet {
    type Error = SeqError;
    fn try_from(spec: AlphabetSpec) -> Result<Self, SeqError> {
        Alphabet::new(&spec.symbols, spec.pad)
    }
}

impl From<Alphabet> for AlphabetSpec {
    fn from(a: Alphabet) -> Self {
        AlphabetSpec {
            symbols: a.symbols.iter().collect(),
            pad: a.pad,
        }
    }
}

impl Alphabet {
    pub fn new(symbols: &str, pad: char) -> Result<Self, SeqError> {
        let mut seen = Vec::new();
        for c in symbols.chars().map(|c| c.to_ascii_uppercase()) {
            if c == MASK_SYMBOL {
                return Err(SeqError::ReservedSymbol(c));
            }
            if seen.contains(&c) {
                return Err(SeqError::DuplicateSymbol(c));
            }
            seen.push(c);
        }
        if !seen.contains(&pad) {
            return Err(SeqError::PadNotInAlphabet(pad));
        }
        Ok(Alphabet { symbols: seen, pad })
    }

    /// 20 amino acids followed by the `-` gap/pad token.
    pub fn protein() -> Self {
        let mut s = AMINO_ACIDS.to_string();
        s.push('-');
        Alphabet::new(&s, '-').expect("static alphabet is valid")
    }

    /// Number of data tokens (pad included, mask excluded).
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Data tokens plus the mask token.
    pub fn vocab_size(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn mask_index(&self) -> usize {
        self.symbols.len()
    }

    pub fn pad_index(&self) -> usize {
        self.index_of(self.pad).expect("pad is validated at construction")
    }

    pub fn pad_symbol(&self) -> char {
        self.pad
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        let c = c.to_ascii_uppercase();
        self.symbols.iter().position(|&s| s == c)
    }

    pub fn symbol(&self, id: usize) -> char {
        if id == self.mask_index() {
            MASK_SYMBOL
        } else {
            self.symbols[id]
        }
    }

    /// Parses a string of data symbols (mask symbol allowed) into a sequence.
    pub fn parse(&self, text: &str) -> Result<Sequence, SeqError> {
        let ids = text
            .chars()
            .map(|c| {
                if c == MASK_SYMBOL {
                    Ok(self.mask_index())
                } else {
                    self.index_of(c)
                        .ok_or(SeqError::UnknownResidue { symbol: c, line: 1 })
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Sequence::new(ids))
    }
}

/// A fixed-length vector of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Sequence {
    ids: Vec<usize>,
}

impl Sequence {
    pub fn new(ids: Vec<usize>) -> Self {
        Sequence { ids }
    }

    pub fn filled(len: usize, id: usize) -> Self {
        Sequence { ids: vec![id; len] }
    }

    /// The all-`[MASK]` sequence, the prior of the absorbing process.
    pub fn all_masked(len: usize, alphabet: &Alphabet) -> Self {
        Self::filled(len, alphabet.mask_index())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn ids_mut(&mut self) -> &mut [usize] {
        &mut self.ids
    }

    pub fn into_ids(self) -> Vec<usize> {
        self.ids
    }

    pub fn get(&self, i: usize) -> usize {
        self.ids[i]
    }

    pub fn set(&mut self, i: usize, id: usize) {
        self.ids[i] = id;
    }

    pub fn validate(&self, alphabet: &Alphabet) -> Result<(), SeqError> {
        match self.ids.iter().find(|&&id| id > alphabet.mask_index()) {
            Some(&id) => Err(SeqError::TokenOutOfRange {
                id,
                vocab: alphabet.vocab_size(),
            }),
            None => Ok(()),
        }
    }

    /// True when no position holds the mask token.
    pub fn is_clean(&self, alphabet: &Alphabet) -> bool {
        self.ids.iter().all(|&id| id < alphabet.mask_index())
    }

    pub fn count_masked(&self, alphabet: &Alphabet) -> usize {
        let m = alphabet.mask_index();
        self.ids.iter().filter(|&&id| id == m).count()
    }

    pub fn hamming(&self, other: &Sequence) -> usize {
        self.ids
            .iter()
            .zip(&other.ids)
            .filter(|(a, b)| a != b)
            .count()
    }

    /// Renders the sequence; trailing pads are dropped when `strip_pads` is set.
    pub fn decode(&self, alphabet: &Alphabet, strip_pads: bool) -> String {
        let mut ids: &[usize] = &self.ids;
        if strip_pads {
            let pad = alphabet.pad_index();
            while let [rest @ .., last] = ids {
                if *last != pad {
                    break;
                }
                ids = rest;
            }
        }
        ids.iter().map(|&id| alphabet.symbol(id)).collect()
    }
}

/// Per-position conservation flags; `true` marks a position that must keep
/// the seed token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionMask {
    bits: Vec<bool>,
}

impl PositionMask {
    pub fn new(bits: Vec<bool>) -> Self {
        PositionMask { bits }
    }

    pub fn all_conserved(len: usize) -> Self {
        PositionMask {
            bits: vec![true; len],
        }
    }

    pub fn none_conserved(len: usize) -> Self {
        PositionMask {
            bits: vec![false; len],
        }
    }

    /// Conserves everything except the half-open `region`.
    pub fn infill_region(len: usize, region: std::ops::Range<usize>) -> Self {
        PositionMask {
            bits: (0..len).map(|i| !region.contains(&i)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_conserved(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn conserved_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn mutable_positions(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| !self.bits[i]).collect()
    }

    pub fn inverted(&self) -> Self {
        PositionMask {
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// Position-wise union: conserved in either mask.
    pub fn union(&self, other: &PositionMask) -> Self {
        PositionMask {
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(a, b)| *a || *b)
                .collect(),
        }
    }
}

/// Takes `seed` at conserved positions and `sample` elsewhere.
pub fn merge_conserved(
    sample: &Sequence,
    seed: &Sequence,
    mask: &PositionMask,
) -> Result<Sequence, SeqError> {
    if sample.len() != seed.len() {
        return Err(SeqError::LengthMismatch {
            left: sample.len(),
            right: seed.len(),
        });
    }
    if mask.len() != seed.len() {
        return Err(SeqError::LengthMismatch {
            left: mask.len(),
            right: seed.len(),
        });
    }
    let ids = sample
        .ids
        .iter()
        .zip(&seed.ids)
        .zip(&mask.bits)
        .map(|((&s, &k), &keep)| if keep { k } else { s })
        .collect();
    Ok(Sequence { ids })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FastaRecord {
    pub id: String,
    pub residues: String,
}

impl fmt::Display for FastaRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, ">{}", self.id)?;
        writeln!(f, "{}", self.residues)
    }
}

/// Parses FASTA text, validating every residue against `alphabet`.
///
/// Sequence lines are concatenated and uppercased; blank lines are ignored.
pub fn parse_fasta(text: &str, alphabet: &Alphabet) -> Result<Vec<FastaRecord>, SeqError> {
    let mut records: Vec<FastaRecord> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('>') {
            let id = header.trim();
            if id.is_empty() {
                return Err(SeqError::MalformedHeader { line: line_no });
            }
            records.push(FastaRecord {
                id: id.to_string(),
                residues: String::new(),
            });
            continue;
        }
        let record = records
            .last_mut()
            .ok_or(SeqError::MissingHeader { line: line_no })?;
        for c in line.chars().filter(|c| !c.is_whitespace()) {
            let up = c.to_ascii_uppercase();
            if alphabet.index_of(up).is_none() {
                return Err(SeqError::UnknownResidue {
                    symbol: c,
                    line: line_no,
                });
            }
            record.residues.push(up);
        }
    }
    Ok(records)
}

/// Encodes a record to exactly `len` tokens, right-padding with the pad token.
pub fn encode(record: &FastaRecord, alphabet: &Alphabet, len: usize) -> Result<Sequence, SeqError> {
    let n = record.residues.chars().count();
    if n > len {
        return Err(SeqError::TooLong { len: n, max: len });
    }
    let mut ids = Vec::with_capacity(len);
    for c in record.residues.chars() {
        ids.push(
            alphabet
                .index_of(c)
                .ok_or(SeqError::UnknownResidue { symbol: c, line: 0 })?,
        );
    }
    ids.resize(len, alphabet.pad_index());
    Ok(Sequence { ids })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn protein_alphabet_layout() {
        let a = Alphabet::protein();
        assert_eq!(a.len(), 21);
        assert_eq!(a.mask_index(), 21);
        assert_eq!(a.vocab_size(), 22);
        assert_eq!(a.pad_index(), 20);
        assert_eq!(a.symbol(21), MASK_SYMBOL);
    }

    #[test]
    fn alphabet_rejects_duplicates_and_missing_pad() {
        assert_eq!(Alphabet::new("AAC-", '-'), Err(SeqError::DuplicateSymbol('A')));
        assert_eq!(Alphabet::new("AC", '-'), Err(SeqError::PadNotInAlphabet('-')));
        assert_eq!(Alphabet::new("AC#-", '-'), Err(SeqError::ReservedSymbol('#')));
    }

    #[test]
    fn fasta_single_record() {
        let a = Alphabet::protein();
        let recs = parse_fasta(">a\nACD-", &a).unwrap();
        assert_eq!(
            recs,
            vec![FastaRecord {
                id: "a".into(),
                residues: "ACD-".into()
            }]
        );
    }

    #[test]
    fn fasta_unknown_residue_names_symbol() {
        let a = Alphabet::protein();
        let err = parse_fasta(">a\nACZ", &a).unwrap_err();
        assert_eq!(err, SeqError::UnknownResidue { symbol: 'Z', line: 2 });
        assert!(err.to_string().contains("'Z'"));
    }

    #[test]
    fn fasta_empty_and_malformed() {
        let a = Alphabet::protein();
        assert!(parse_fasta("", &a).unwrap().is_empty());
        assert_eq!(
            parse_fasta(">\nAC", &a).unwrap_err(),
            SeqError::MalformedHeader { line: 1 }
        );
        assert_eq!(
            parse_fasta("AC\n>a", &a).unwrap_err(),
            SeqError::MissingHeader { line: 1 }
        );
    }

    #[test]
    fn fasta_multiline_lowercase_and_order() {
        let a = Alphabet::protein();
        let recs = parse_fasta(">x desc\nac\nde\n\n>y\n>z\nW", &a).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].id, "x desc");
        assert_eq!(recs[0].residues, "ACDE");
        assert_eq!(recs[1].residues, "");
        assert_eq!(recs[2].residues, "W");
    }

    #[test]
    fn encode_pads_and_rejects_long() {
        let a = Alphabet::protein();
        let rec = |s: &str| FastaRecord {
            id: "r".into(),
            residues: s.into(),
        };
        let s = encode(&rec("AC"), &a, 4).unwrap();
        assert_eq!(s.decode(&a, false), "AC--");
        assert_eq!(s.ids(), &[0, 1, 20, 20]);
        assert_eq!(encode(&rec("ACDE"), &a, 4).unwrap().decode(&a, false), "ACDE");
        assert_eq!(
            encode(&rec("ACDEF"), &a, 4).unwrap_err(),
            SeqError::TooLong { len: 5, max: 4 }
        );
    }

    #[test]
    fn merge_rules() {
        let a = Alphabet::protein();
        let seed = a.parse("AA").unwrap();
        let sample = a.parse("CC").unwrap();
        let m = PositionMask::new(vec![true, false]);
        assert_eq!(merge_conserved(&sample, &seed, &m).unwrap().decode(&a, false), "AC");
        assert_eq!(
            merge_conserved(&sample, &seed, &PositionMask::all_conserved(2)).unwrap(),
            seed
        );
        assert_eq!(
            merge_conserved(&sample, &seed, &PositionMask::none_conserved(2)).unwrap(),
            sample
        );
        let short = a.parse("A").unwrap();
        assert!(matches!(
            merge_conserved(&short, &seed, &m),
            Err(SeqError::LengthMismatch { .. })
        ));
    }

    fn seq_strategy(len: usize) -> impl Strategy<Value = Vec<usize>> {
        proptest::collection::vec(0usize..21, len)
    }

    proptest! {
        #[test]
        fn merge_is_idempotent(
            sample in seq_strategy(12),
            seed in seq_strategy(12),
            bits in proptest::collection::vec(any::<bool>(), 12),
        ) {
            let (sample, seed, mask) = (Sequence::new(sample), Sequence::new(seed), PositionMask::new(bits));
            let once = merge_conserved(&sample, &seed, &mask).unwrap();
            let twice = merge_conserved(&once, &seed, &mask).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn encode_decode_round_trip(body in "[ACDEFGHIKLMNPQRSTVWY]{0,10}", extra in 0usize..6) {
            let a = Alphabet::protein();
            let len = body.len() + extra;
            let rec = FastaRecord { id: "p".into(), residues: body.clone() };
            let s = encode(&rec, &a, len).unwrap();
            prop_assert_eq!(s.len(), len);
            prop_assert_eq!(s.decode(&a, true), body.clone());
            let padded: String = body.chars().chain(std::iter::repeat('-').take(extra)).collect();
            prop_assert_eq!(s.decode(&a, false), padded);
        }

        #[test]
        fn header_count_equals_record_count(bodies in proptest::collection::vec("[ACDE-]{0,8}", 0..6)) {
            let a = Alphabet::protein();
            let text: String = bodies.iter().enumerate().map(|(i, b)| format!(">r{i}\n{b}\n")).collect();
            let recs = parse_fasta(&text, &a).unwrap();
            prop_assert_eq!(recs.len(), text.matches('>').count());
        }
    }
}
