//! Canonical-indexed mispronunciation annotations.
//!
//! Every canonical position records how it was realized: kept, substituted
//! or deleted, plus any phonemes inserted immediately before it. Insertions
//! after the last canonical phoneme go to a virtual terminal slot, which
//! counts as mispronounced whenever it is non-empty.
//!
//! Text form, one entry per canonical position: `C`, `S:<p>`, `D`, each
//! optionally prefixed by `I:<p>+` for insertions (`I:<p>` alone means an
//! insertion before a kept phoneme). An optional extra entry made only of
//! insertions (`I:x` or `I:x+I:y`) is the terminal slot.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::eval::align::{align, EditOp};

/// Four-way error class per canonical position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorType {
    Correct = 0,
    Substitution = 1,
    Deletion = 2,
    Insertion = 3,
}

impl ErrorType {
    pub const ALL: [ErrorType; 4] = [
        ErrorType::Correct,
        ErrorType::Substitution,
        ErrorType::Deletion,
        ErrorType::Insertion,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Realization {
    Kept,
    Substituted(usize),
    Deleted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionTag {
    pub inserted_before: Vec<usize>,
    pub core: Realization,
}

impl PositionTag {
    pub fn correct() -> Self {
        Self {
            inserted_before: Vec::new(),
            core: Realization::Kept,
        }
    }

    /// Core errors take precedence over an accompanying insertion.
    pub fn error_type(&self) -> ErrorType {
        match self.core {
            Realization::Substituted(_) => ErrorType::Substitution,
            Realization::Deleted => ErrorType::Deletion,
            Realization::Kept if !self.inserted_before.is_empty() => ErrorType::Insertion,
            Realization::Kept => ErrorType::Correct,
        }
    }

    pub fn is_mispronounced(&self) -> bool {
        self.error_type() != ErrorType::Correct
    }

    /// Phonemes actually produced for canonical phoneme `canon`.
    pub fn realize(&self, canon: usize) -> Vec<usize> {
        let mut out = self.inserted_before.clone();
        match self.core {
            Realization::Kept => out.push(canon),
            Realization::Substituted(p) => out.push(p),
            Realization::Deleted => {}
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ErrorTags {
    pub positions: Vec<PositionTag>,
    /// Insertions after the final canonical phoneme.
    pub terminal: Vec<usize>,
}

impl ErrorTags {
    pub fn all_correct(m: usize) -> Self {
        Self {
            positions: vec![PositionTag::correct(); m],
            terminal: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// 1 where the canonical position is mispronounced.
    pub fn position_flags(&self) -> Vec<u8> {
        self.positions
            .iter()
            .map(|p| u8::from(p.is_mispronounced()))
            .collect()
    }

    pub fn types(&self) -> Vec<ErrorType> {
        self.positions.iter().map(PositionTag::error_type).collect()
    }

    /// Rebuilds the perceived sequence from the canonical one.
    pub fn apply(&self, canonical: &[usize]) -> Result<Vec<usize>> {
        if canonical.len() != self.positions.len() {
            return Err(invalid(format!(
                "{} tags for {} canonical phonemes",
                self.positions.len(),
                canonical.len()
            )));
        }
        let mut out: Vec<usize> = canonical
            .iter()
            .zip(&self.positions)
            .flat_map(|(&c, t)| t.realize(c))
            .collect();
        out.extend(&self.terminal);
        Ok(out)
    }

    /// Derives tags from a canonical/perceived pair via edit alignment.
    pub fn from_alignment(canonical: &[usize], perceived: &[usize]) -> Self {
        let mut positions = Vec::with_capacity(canonical.len());
        let mut pending = Vec::new();
        for op in align(canonical, perceived).ops {
            let core = match op {
                EditOp::Ins { h } => {
                    pending.push(perceived[h]);
                    continue;
                }
                EditOp::Match { .. } => Realization::Kept,
                EditOp::Sub { h, .. } => Realization::Substituted(perceived[h]),
                EditOp::Del { .. } => Realization::Deleted,
            };
            positions.push(PositionTag {
                inserted_before: std::mem::take(&mut pending),
                core,
            });
        }
        Self {
            positions,
            terminal: pending,
        }
    }

    pub fn to_text(&self, symbol: impl Fn(usize) -> String) -> String {
        let mut entries: Vec<String> = self
            .positions
            .iter()
            .map(|t| {
                let mut parts: Vec<String> = t
                    .inserted_before
                    .iter()
                    .map(|&p| format!("I:{}", symbol(p)))
                    .collect();
                match t.core {
                    Realization::Kept if !parts.is_empty() => {}
                    Realization::Kept => parts.push("C".into()),
                    Realization::Substituted(p) => parts.push(format!("S:{}", symbol(p))),
                    Realization::Deleted => parts.push("D".into()),
                }
                parts.join("+")
            })
            .collect();
        if !self.terminal.is_empty() {
            entries.push(
                self.terminal
                    .iter()
                    .map(|&p| format!("I:{}", symbol(p)))
                    .collect::<Vec<_>>()
                    .join("+"),
            );
        }
        entries.join(" ")
    }

    /// Parses the text form for a canonical sequence of length `m`.
    pub fn parse(
        text: &str,
        m: usize,
        mut id: impl FnMut(&str) -> Result<usize>,
    ) -> Result<Self> {
        let entries: Vec<&str> = text.split_whitespace().collect();
        if entries.len() != m && entries.len() != m + 1 {
            return Err(Error::Format(format!(
                "expected {m} tag entries (plus optional terminal), got {}",
                entries.len()
            )));
        }
        let mut positions = Vec::with_capacity(m);
        let mut terminal = Vec::new();
        for (k, entry) in entries.iter().enumerate() {
            let mut inserted = Vec::new();
            let mut core = None;
            let parts: Vec<&str> = entry.split('+').collect();
            for (pi, part) in parts.iter().enumerate() {
                let last = pi + 1 == parts.len();
                if let Some(p) = part.strip_prefix("I:") {
                    inserted.push(id(p)?);
                } else if !last {
                    return Err(Error::Format(format!(
                        "entry {k} ({entry}): only insertions may precede '+'"
                    )));
                } else if *part == "C" {
                    core = Some(Realization::Kept);
                } else if *part == "D" {
                    core = Some(Realization::Deleted);
                } else if let Some(p) = part.strip_prefix("S:") {
                    core = Some(Realization::Substituted(id(p)?));
                } else {
                    return Err(Error::Format(format!("entry {k}: bad tag {part:?}")));
                }
            }
            if k == m {
                if core.is_some() || inserted.is_empty() {
                    return Err(Error::Format(format!(
                        "terminal entry {entry:?} may only hold insertions"
                    )));
                }
                terminal = inserted;
            } else {
                positions.push(PositionTag {
                    inserted_before: inserted,
                    core: core.unwrap_or(Realization::Kept),
                });
            }
        }
        Ok(Self {
            positions,
            terminal,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sym(i: usize) -> String {
        format!("p{i}")
    }

    fn id(s: &str) -> Result<usize> {
        s.strip_prefix('p')
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| Error::UnknownSymbol(s.into()))
    }

    #[test]
    fn types_follow_flags() {
        let tags = ErrorTags::from_alignment(&[1, 2, 3, 4], &[1, 9, 4, 7]);
        for (flag, ty) in tags.position_flags().iter().zip(tags.types()) {
            assert_eq!(*flag == 0, ty == ErrorType::Correct);
        }
    }

    #[test]
    fn alignment_tags_rebuild_perceived() {
        let canonical = [1, 2, 3, 4];
        for perceived in [
            vec![1, 2, 3, 4],
            vec![1, 5, 3, 4],
            vec![1, 3, 4],
            vec![1, 2, 8, 3, 4],
            vec![1, 2, 3, 4, 9],
            vec![],
        ] {
            let tags = ErrorTags::from_alignment(&canonical, &perceived);
            assert_eq!(tags.apply(&canonical).unwrap(), perceived);
        }
    }

    #[test]
    fn text_roundtrip() {
        let tags = ErrorTags {
            positions: vec![
                PositionTag::correct(),
                PositionTag {
                    inserted_before: vec![7],
                    core: Realization::Kept,
                },
                PositionTag {
                    inserted_before: vec![],
                    core: Realization::Substituted(3),
                },
                PositionTag {
                    inserted_before: vec![5],
                    core: Realization::Deleted,
                },
            ],
            terminal: vec![2, 1],
        };
        let text = tags.to_text(sym);
        assert_eq!(text, "C I:p7 S:p3 I:p5+D I:p2+I:p1");
        assert_eq!(ErrorTags::parse(&text, 4, id).unwrap(), tags);
    }

    #[test]
    fn malformed_text_rejected() {
        assert!(ErrorTags::parse("C C", 3, id).is_err());
        assert!(ErrorTags::parse("C X", 2, id).is_err());
        assert!(ErrorTags::parse("C C", 1, id).is_err());
        assert!(ErrorTags::parse("D+I:p1 C", 2, id).is_err());
    }
}
