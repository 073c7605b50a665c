//! Token sequence types and the LCS-ratio content metric.
//!
//! Semantic utterances are flat id sequences. Acoustic utterances are frames
//! of `K` grouped codec ids at a fixed 50 Hz frame rate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Acoustic frames per second.
pub const FRAME_RATE_HZ: usize = 50;

pub const MASK: &str = "mask";
pub const SEPARATOR: &str = "separator";
pub const EOS: &str = "eos";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabKind {
    Semantic,
    AcousticGroup,
}

/// A closed id space with named reserved ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
    kind: VocabKind,
    reserved: BTreeMap<String, u32>,
}

impl Vocabulary {
    pub fn new(size: usize, kind: VocabKind, reserved: BTreeMap<String, u32>) -> Result<Self> {
        if size < 2 {
            return Err(Error::Vocabulary(format!("size {size} < 2")));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (name, &id) in &reserved {
            if id as usize >= size {
                return Err(Error::Vocabulary(format!(
                    "reserved id {name}={id} not below size {size}"
                )));
            }
            if !seen.insert(id) {
                return Err(Error::Vocabulary(format!("reserved id {id} used twice")));
            }
        }
        Ok(Vocabulary {
            size,
            kind,
            reserved,
        })
    }

    /// `content` ordinary ids followed by mask, separator and eos.
    pub fn semantic(content: usize) -> Self {
        let c = content as u32;
        let reserved = BTreeMap::from([
            (MASK.to_string(), c),
            (SEPARATOR.to_string(), c + 1),
            (EOS.to_string(), c + 2),
        ]);
        Vocabulary::new(content + 3, VocabKind::Semantic, reserved).expect("valid layout")
    }

    /// A group codebook plus one end-of-sequence code.
    pub fn acoustic_group(codebook: usize) -> Self {
        let reserved = BTreeMap::from([(EOS.to_string(), codebook as u32)]);
        Vocabulary::new(codebook + 1, VocabKind::AcousticGroup, reserved).expect("valid layout")
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    /// Number of ids that are not reserved.
    pub fn content_size(&self) -> usize {
        self.size - self.reserved.len()
    }

    pub fn reserved(&self) -> &BTreeMap<String, u32> {
        &self.reserved
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.reserved.get(name).copied()
    }

    pub fn mask(&self) -> Option<u32> {
        self.id(MASK)
    }

    pub fn separator(&self) -> Option<u32> {
        self.id(SEPARATOR)
    }

    pub fn eos(&self) -> Option<u32> {
        self.id(EOS)
    }

    pub fn is_reserved(&self, id: u32) -> bool {
        self.reserved.values().any(|&r| r == id)
    }

    /// Checks that every id is in range and, when `allow_reserved` is false,
    /// that no reserved id appears.
    pub fn check(&self, seq: &TokenSequence, allow_reserved: bool) -> Result<()> {
        for &t in &seq.tokens {
            if t as usize >= self.size {
                return Err(Error::TokenOutOfRange {
                    utt_id: seq.utt_id.clone(),
                    token: t,
                    size: self.size,
                });
            }
            if !allow_reserved && self.is_reserved(t) {
                return Err(Error::ReservedInInput {
                    utt_id: seq.utt_id.clone(),
                    token: t,
                });
            }
        }
        Ok(())
    }
}

/// One utterance of semantic token ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub utt_id: String,
    pub tokens: Vec<u32>,
}

impl TokenSequence {
    pub fn new(utt_id: impl Into<String>, tokens: Vec<u32>) -> Self {
        TokenSequence {
            utt_id: utt_id.into(),
            tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dedup_runs(&self) -> TokenSequence {
        TokenSequence::new(self.utt_id.clone(), dedup_runs(&self.tokens))
    }
}

/// Frames of `K` grouped codec ids, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcousticSequence {
    pub utt_id: String,
    groups: usize,
    codes: Vec<u32>,
}

impl AcousticSequence {
    pub fn new(utt_id: impl Into<String>, groups: usize) -> Self {
        assert!(groups > 0, "an acoustic frame needs at least one group");
        AcousticSequence {
            utt_id: utt_id.into(),
            groups,
            codes: Vec::new(),
        }
    }

    pub fn from_frames(utt_id: impl Into<String>, groups: usize, frames: &[Vec<u32>]) -> Result<Self> {
        let mut seq = AcousticSequence::new(utt_id, groups);
        for frame in frames {
            seq.push(frame)?;
        }
        Ok(seq)
    }

    pub fn push(&mut self, frame: &[u32]) -> Result<()> {
        if frame.len() != self.groups {
            return Err(Error::GroupCount {
                utt_id: self.utt_id.clone(),
                frame: self.n_frames(),
                got: frame.len(),
                expected: self.groups,
            });
        }
        self.codes.extend_from_slice(frame);
        Ok(())
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn n_frames(&self) -> usize {
        self.codes.len() / self.groups
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn frame(&self, i: usize) -> &[u32] {
        &self.codes[i * self.groups..(i + 1) * self.groups]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[u32]> {
        self.codes.chunks_exact(self.groups)
    }

    pub fn duration_s(&self) -> f64 {
        self.n_frames() as f64 / FRAME_RATE_HZ as f64
    }

    /// First `n` frames (or all of them when shorter).
    pub fn prefix(&self, n: usize) -> AcousticSequence {
        let n = n.min(self.n_frames());
        AcousticSequence {
            utt_id: self.utt_id.clone(),
            groups: self.groups,
            codes: self.codes[..n * self.groups].to_vec(),
        }
    }

    pub fn check_codebook(&self, codebook: usize) -> Result<()> {
        for (i, frame) in self.frames().enumerate() {
            if let Some(&c) = frame.iter().find(|&&c| c as usize >= codebook) {
                return Err(Error::TokenOutOfRange {
                    utt_id: format!("{}[frame {i}]", self.utt_id),
                    token: c,
                    size: codebook,
                });
            }
        }
        Ok(())
    }
}

/// Collapses runs of equal consecutive ids to a single id.
pub fn dedup_runs(tokens: &[u32]) -> Vec<u32> {
    let mut out = tokens.to_vec();
    out.dedup();
    out
}

/// Length of the longest common subsequence, two-row dynamic program.
pub fn lcs_length(a: &[u32], b: &[u32]) -> usize {
    let (a, b) = if a.len() < b.len() { (b, a) } else { (a, b) };
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS ratio over run-deduplicated ids, normalized by the shorter sequence.
/// `None` when either side is empty.
pub fn lcsr_ids(a: &[u32], b: &[u32]) -> Option<f64> {
    let a = dedup_runs(a);
    let b = dedup_runs(b);
    let shorter = a.len().min(b.len());
    if shorter == 0 {
        return None;
    }
    Some(lcs_length(&a, &b) as f64 / shorter as f64)
}

pub fn lcsr(a: &TokenSequence, b: &TokenSequence) -> Result<f64> {
    lcsr_ids(&a.tokens, &b.tokens).ok_or_else(|| Error::EmptyUtterance {
        utt_id: if a.is_empty() {
            a.utt_id.clone()
        } else {
            b.utt_id.clone()
        },
    })
}

/// LCSR of a system output against a reference, scoring an empty output 0.
pub fn hypothesis_lcsr(hypothesis: &TokenSequence, reference: &TokenSequence) -> Result<f64> {
    if hypothesis.is_empty() && !reference.is_empty() {
        return Ok(0.0);
    }
    lcsr(hypothesis, reference)
}

/// Mean of [`hypothesis_lcsr`] over `(hypothesis, reference)` pairs.
pub fn mean_hypothesis_lcsr<'a, I>(pairs: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a TokenSequence, &'a TokenSequence)>,
{
    let scores = pairs
        .into_iter()
        .map(|(h, r)| hypothesis_lcsr(h, r))
        .collect::<Result<Vec<_>>>()?;
    if scores.is_empty() {
        return Err(Error::EmptyInput("no utterance pairs to score".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Unweighted mean LCSR over aligned pairs.
pub fn mean_lcsr<'a, I>(pairs: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a TokenSequence, &'a TokenSequence)>,
{
    let mut sum = 0.0;
    let mut n = 0usize;
    for (a, b) in pairs {
        sum += lcsr(a, b)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyInput("no utterance pairs to score".into()));
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(t: &[u32]) -> TokenSequence {
        TokenSequence::new("u", t.to_vec())
    }

    #[test]
    fn dedup_examples() {
        assert!(dedup_runs(&[]).is_empty());
        assert_eq!(dedup_runs(&[7, 7, 7, 7]), vec![7]);
        assert_eq!(dedup_runs(&[5, 5, 2, 2, 5]), vec![5, 2, 5]);
    }

    #[test]
    fn lcs_examples() {
        assert_eq!(lcs_length(&[1, 2, 3], &[1, 2, 3]), 3);
        assert_eq!(lcs_length(&[1, 2], &[3, 4]), 0);
        assert_eq!(lcs_length(&[], &[3, 4]), 0);
    }

    #[test]
    fn lcsr_examples() {
        assert_eq!(lcsr(&seq(&[1, 1, 2, 3]), &seq(&[1, 1, 2, 3])).unwrap(), 1.0);
        assert_eq!(lcsr(&seq(&[1, 2]), &seq(&[3, 4])).unwrap(), 0.0);
        assert_eq!(
            lcsr(&seq(&[1, 1, 2, 3, 4]), &seq(&[1, 3, 3, 4, 5])).unwrap(),
            0.75
        );
    }

    #[test]
    fn lcsr_rejects_empty() {
        let err = lcsr(&TokenSequence::new("blank", vec![]), &seq(&[1])).unwrap_err();
        assert!(matches!(err, Error::EmptyUtterance { utt_id } if utt_id == "blank"));
    }

    #[test]
    fn vocabulary_invariants() {
        let v = Vocabulary::semantic(64);
        assert_eq!(v.size(), 67);
        assert_eq!(v.content_size(), 64);
        assert_eq!((v.mask(), v.separator(), v.eos()), (Some(64), Some(65), Some(66)));
        assert!(Vocabulary::new(1, VocabKind::Semantic, BTreeMap::new()).is_err());
        let dup = BTreeMap::from([("a".to_string(), 1), ("b".to_string(), 1)]);
        assert!(Vocabulary::new(4, VocabKind::Semantic, dup).is_err());
        let high = BTreeMap::from([("a".to_string(), 4)]);
        assert!(Vocabulary::new(4, VocabKind::Semantic, high).is_err());
    }

    #[test]
    fn vocabulary_check() {
        let v = Vocabulary::semantic(4);
        assert!(v.check(&seq(&[0, 3]), false).is_ok());
        assert!(matches!(
            v.check(&seq(&[4]), false),
            Err(Error::ReservedInInput { token: 4, .. })
        ));
        assert!(v.check(&seq(&[4]), true).is_ok());
        assert!(matches!(
            v.check(&seq(&[9]), true),
            Err(Error::TokenOutOfRange { token: 9, .. })
        ));
    }

    #[test]
    fn acoustic_frames() {
        let mut a = AcousticSequence::new("x", 2);
        a.push(&[1, 2]).unwrap();
        a.push(&[3, 4]).unwrap();
        assert!(a.push(&[5]).is_err());
        assert_eq!(a.n_frames(), 2);
        assert_eq!(a.frame(1), &[3, 4]);
        assert_eq!(a.prefix(1).n_frames(), 1);
        assert!(a.check_codebook(4).is_err());
        assert!(a.check_codebook(5).is_ok());
    }
}
