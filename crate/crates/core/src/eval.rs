//! Token error rate by Levenshtein alignment.

use crate::error::{AsrError, Result};
use crate::vocab::TokenId;
use serde::{Deserialize, Serialize};

#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_tokens: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn add(&mut self, o: &EditCounts) {
        self.substitutions += o.substitutions;
        self.insertions += o.insertions;
        self.deletions += o.deletions;
        self.reference_tokens += o.reference_tokens;
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRate {
    pub counts: EditCounts,
    /// Errors over reference tokens; 0 for an empty reference set with no
    /// insertions.
    pub rate: f64,
}

/// Minimum-edit alignment of one pair. Among equal-cost alignments the
/// backtrace prefers substitution, then insertion, then deletion.
pub fn align(reference: &[TokenId], hypothesis: &[TokenId]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for (j, v) in d.iter_mut().take(w).enumerate() {
        *v = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let ins = d[i * w + j - 1] + 1;
            let del = d[(i - 1) * w + j] + 1;
            d[i * w + j] = sub.min(ins).min(del);
        }
    }
    let mut c = EditCounts {
        reference_tokens: n,
        ..EditCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                c.substitutions += usize::from(!same);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && d[i * w + j - 1] + 1 == here {
            c.insertions += 1;
            j -= 1;
        } else {
            c.deletions += 1;
            i -= 1;
        }
    }
    c
}

/// Corpus-level rate: edits and reference lengths are summed over pairs
/// before dividing.
pub fn error_rate(references: &[Vec<TokenId>], hypotheses: &[Vec<TokenId>]) -> Result<ErrorRate> {
    if references.len() != hypotheses.len() {
        return Err(AsrError::contract(format!(
            "{} references but {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    let mut counts = EditCounts::default();
    for (r, h) in references.iter().zip(hypotheses) {
        counts.add(&align(r, h));
    }
    let rate = if counts.reference_tokens == 0 {
        if counts.errors() == 0 { 0.0 } else { f64::INFINITY }
    } else {
        counts.errors() as f64 / counts.reference_tokens as f64
    };
    Ok(ErrorRate { counts, rate })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_edits() {
        let c = align(&[1, 2, 3], &[1, 3]);
        assert_eq!((c.substitutions, c.insertions, c.deletions), (0, 0, 1));
        let c = align(&[1, 2], &[1, 4, 2]);
        assert_eq!((c.substitutions, c.insertions, c.deletions), (0, 1, 0));
        let c = align(&[1, 2], &[3, 4]);
        assert_eq!((c.substitutions, c.insertions, c.deletions), (2, 0, 0));
    }

    #[test]
    fn tie_prefers_substitution() {
        // [1,2] vs [2,3]: two substitutions or one deletion plus one insertion.
        let c = align(&[1, 2], &[2, 3]);
        assert_eq!(c.errors(), 2);
        assert_eq!(c.substitutions, 2);
    }

    #[test]
    fn corpus_level_sum() {
        let r = error_rate(&[vec![1, 2, 3, 4], vec![5]], &[vec![1, 2, 3, 4], vec![]]).unwrap();
        assert!((r.rate - 0.2).abs() < 1e-12);
        assert!(error_rate(&[vec![1]], &[]).is_err());
    }
}
