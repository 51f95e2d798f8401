//! Character-level tokenizer over the corpus alphabet, plus the handful of
//! reserved control symbols the pipeline needs.

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::fmt::Write as _;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const MASK: usize = 2;
pub const UNK: usize = 3;
pub const END: usize = 4;
const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<mask>", "<unk>", "<end>"];

pub type TokenSeq = Vec<usize>;

#[derive(Clone, Debug)]
pub struct Tokenizer {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Tokenizer {
    /// Builds the vocabulary from the character inventory of a corpus.
    /// Newlines delimit documents and are not part of the alphabet.
    pub fn from_corpus(text: &str) -> Self {
        let chars: Vec<char> = text
            .chars()
            .filter(|&c| c != '\n' && c != '\r')
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        Self::from_chars(chars)
    }

    fn from_chars(chars: Vec<char>) -> Self {
        let index = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, SPECIALS.len() + i))
            .collect();
        Tokenizer { chars, index }
    }

    pub fn vocab_size(&self) -> usize {
        SPECIALS.len() + self.chars.len()
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// Encode a document. Out-of-alphabet characters map to `<unk>` and are
    /// counted in the second return value.
    pub fn encode(&self, text: &str) -> (TokenSeq, usize) {
        let mut unk = 0;
        let ids = text
            .chars()
            .map(|c| match self.index.get(&c) {
                Some(&i) => i,
                None => {
                    unk += 1;
                    UNK
                }
            })
            .collect();
        (ids, unk)
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id >= SPECIALS.len() {
                out.push(self.chars[id - SPECIALS.len()]);
            }
        }
        out
    }

    pub fn decode_symbol(&self, id: usize) -> String {
        if id < SPECIALS.len() {
            SPECIALS[id].to_string()
        } else {
            self.chars[id - SPECIALS.len()].to_string()
        }
    }

    /// One symbol per line; index order is significant.
    pub fn to_vocab_file(&self) -> String {
        let mut out = String::new();
        for s in SPECIALS {
            let _ = writeln!(out, "{s}");
        }
        for &c in &self.chars {
            let _ = writeln!(out, "{}", escape_char(c));
        }
        out
    }

    pub fn from_vocab_file(contents: &str) -> Result<Self> {
        let mut lines = contents.lines();
        for want in SPECIALS {
            match lines.next() {
                Some(got) if got == want => {}
                other => {
                    return Err(Error::invalid(format!(
                        "vocabulary file: expected {want}, got {other:?}"
                    )))
                }
            }
        }
        let mut chars = Vec::new();
        for line in lines {
            chars.push(unescape_char(line)?);
        }
        Ok(Self::from_chars(chars))
    }
}

fn escape_char(c: char) -> String {
    match c {
        ' ' => "\\s".to_string(),
        '\\' => "\\\\".to_string(),
        '\t' => "\\t".to_string(),
        other => other.to_string(),
    }
}

fn unescape_char(line: &str) -> Result<char> {
    let c = match line {
        "\\s" => ' ',
        "\\\\" => '\\',
        "\\t" => '\t',
        other => {
            let mut it = other.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => c,
                _ => {
                    return Err(Error::invalid(format!(
                        "vocabulary file: bad symbol line {line:?}"
                    )))
                }
            }
        }
    };
    Ok(c)
}

/// Grouped token sequence with the trailing partial group made observable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchedSeq {
    /// `⌈L/p⌉` groups of exactly `p` ids, the last one PAD-filled.
    pub groups: Vec<Vec<usize>>,
    /// Flag per group: does it contain PAD filler?
    pub pad_flags: Vec<bool>,
    pub patch: usize,
}

/// Group `ids` into patches of `p` tokens; the trailing partial group is
/// filled with `<pad>` and flagged.
pub fn patch_group(ids: &[usize], p: usize) -> Result<PatchedSeq> {
    if p == 0 {
        return Err(Error::invalid("patch size must be ≥ 1"));
    }
    let mut groups = Vec::new();
    let mut pad_flags = Vec::new();
    for chunk in ids.chunks(p) {
        let mut g = chunk.to_vec();
        let padded = g.len() < p;
        g.resize(p, PAD);
        groups.push(g);
        pad_flags.push(padded);
    }
    Ok(PatchedSeq {
        groups,
        pad_flags,
        patch: p,
    })
}

/// Inverse of [`patch_group`]: concatenates groups and strips PAD filler.
pub fn patch_ungroup(seq: &PatchedSeq) -> TokenSeq {
    let mut out = Vec::with_capacity(seq.groups.len() * seq.patch);
    for g in &seq.groups {
        out.extend(g.iter().copied());
    }
    while out.last() == Some(&PAD) {
        out.pop();
    }
    out
}
