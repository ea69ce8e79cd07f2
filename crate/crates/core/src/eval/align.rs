//! Unit-cost Levenshtein alignment with a fixed tie-breaking order.

use serde::Serialize;

/// One alignment step. Indices point into the reference and hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EditOp {
    Match { r: usize, h: usize },
    Sub { r: usize, h: usize },
    Del { r: usize },
    Ins { h: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Alignment {
    pub ops: Vec<EditOp>,
}

impl Alignment {
    pub fn substitutions(&self) -> usize {
        self.count(|op| matches!(op, EditOp::Sub { .. }))
    }

    pub fn deletions(&self) -> usize {
        self.count(|op| matches!(op, EditOp::Del { .. }))
    }

    pub fn insertions(&self) -> usize {
        self.count(|op| matches!(op, EditOp::Ins { .. }))
    }

    pub fn distance(&self) -> usize {
        self.substitutions() + self.deletions() + self.insertions()
    }

    fn count(&self, f: impl Fn(&EditOp) -> bool) -> usize {
        self.ops.iter().filter(|op| f(op)).count()
    }
}

/// Minimal edit alignment of `hyp` against `reference`.
///
/// Among optimal alignments the backtrace prefers, at every cell,
/// match > substitution > deletion > insertion.
pub fn align<T: PartialEq>(reference: &[T], hyp: &[T]) -> Alignment {
    let (m, n) = (reference.len(), hyp.len());
    let w = n + 1;
    let mut d = vec![0usize; (m + 1) * w];
    for i in 0..=m {
        d[i * w] = i;
    }
    for j in 0..=n {
        d[j] = j;
    }
    for i in 1..=m {
        for j in 1..=n {
            let diag = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let up = d[(i - 1) * w + j] + 1;
            let left = d[i * w + j - 1] + 1;
            d[i * w + j] = diag.min(up).min(left);
        }
    }

    let mut ops = Vec::with_capacity(m.max(n));
    let (mut i, mut j) = (m, n);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            let diag = d[(i - 1) * w + j - 1];
            if same && diag == here {
                ops.push(EditOp::Match { r: i - 1, h: j - 1 });
                i -= 1;
                j -= 1;
                continue;
            }
            if !same && diag + 1 == here {
                ops.push(EditOp::Sub { r: i - 1, h: j - 1 });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            ops.push(EditOp::Del { r: i - 1 });
            i -= 1;
        } else {
            ops.push(EditOp::Ins { h: j - 1 });
            j -= 1;
        }
    }
    ops.reverse();
    Alignment { ops }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sequences_all_match() {
        let a = align(&[1, 2, 3], &[1, 2, 3]);
        assert_eq!(a.distance(), 0);
        assert!(a.ops.iter().all(|op| matches!(op, EditOp::Match { .. })));
    }

    #[test]
    fn single_deletion() {
        let a = align(&["a", "b"], &["a"]);
        assert_eq!(a.deletions(), 1);
        assert_eq!(a.distance(), 1);
        assert_eq!(a.ops[1], EditOp::Del { r: 1 });
    }

    #[test]
    fn empty_sides() {
        assert_eq!(align::<u8>(&[], &[]).ops.len(), 0);
        assert_eq!(align(&[1, 2], &[]).deletions(), 2);
        assert_eq!(align(&[], &[1, 2]).insertions(), 2);
    }

    #[test]
    fn substitution_preferred_over_del_ins_pair() {
        let a = align(&[1, 2, 3], &[1, 9, 3]);
        assert_eq!(a.substitutions(), 1);
        assert_eq!(a.insertions() + a.deletions(), 0);
    }
}
