//! Hierarchical mispronunciation detection and diagnosis scoring.
//!
//! Detection and diagnosis are judged per canonical position through the
//! canonical/predicted alignment; recognition accuracy (PER, COR) is judged
//! against the perceived sequence through a separate perceived/predicted
//! alignment.
//!
//! Predicted insertions are attached to the canonical position that follows
//! them, mirroring how perceived insertions are tagged. Trailing insertions
//! land in a terminal slot that is only scored when either side has one.

pub mod align;
mod io;

use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tags::ErrorTags;
use align::{align as edit_align, EditOp};

pub use io::{read_score_records, ScoreRecord, SymbolTable};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptTriple {
    pub canonical: Vec<usize>,
    pub perceived: Vec<usize>,
    pub tags: ErrorTags,
    pub predicted: Vec<usize>,
}

impl TranscriptTriple {
    /// Tags derived from the canonical/perceived alignment.
    pub fn new(canonical: Vec<usize>, perceived: Vec<usize>, predicted: Vec<usize>) -> Self {
        let tags = ErrorTags::from_alignment(&canonical, &perceived);
        Self {
            canonical,
            perceived,
            tags,
            predicted,
        }
    }

    pub fn with_tags(
        canonical: Vec<usize>,
        perceived: Vec<usize>,
        tags: ErrorTags,
        predicted: Vec<usize>,
    ) -> Self {
        Self {
            canonical,
            perceived,
            tags,
            predicted,
        }
    }

    /// Checks that the tags rebuild the perceived sequence exactly.
    pub fn validate(&self) -> Result<()> {
        let rebuilt = self.tags.apply(&self.canonical)?;
        if rebuilt != self.perceived {
            let pos = rebuilt
                .iter()
                .zip(&self.perceived)
                .position(|(a, b)| a != b)
                .unwrap_or(rebuilt.len().min(self.perceived.len()));
            return Err(invalid(format!(
                "tags disagree with perceived sequence at perceived position {pos} \
                 (tags give {rebuilt:?}, perceived is {:?})",
                self.perceived
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricCounts {
    pub ta: usize,
    pub tr: usize,
    pub fa: usize,
    pub fr: usize,
    pub cd: usize,
    pub ed: usize,
    pub s: usize,
    pub d: usize,
    pub i: usize,
    pub n: usize,
}

impl AddAssign for MetricCounts {
    fn add_assign(&mut self, o: Self) {
        self.ta += o.ta;
        self.tr += o.tr;
        self.fa += o.fa;
        self.fr += o.fr;
        self.cd += o.cd;
        self.ed += o.ed;
        self.s += o.s;
        self.d += o.d;
        self.i += o.i;
        self.n += o.n;
    }
}

/// Metrics in percent. `None` marks a zero denominator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub frr: Option<f64>,
    pub far: Option<f64>,
    pub edr: Option<f64>,
    pub per: Option<f64>,
    pub cor: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

/// Per-position realization: phonemes inserted before it, then its core.
fn predicted_realizations(canonical: &[usize], predicted: &[usize]) -> (Vec<Vec<usize>>, Vec<usize>) {
    let mut slots = Vec::with_capacity(canonical.len());
    let mut pending = Vec::new();
    for op in edit_align(canonical, predicted).ops {
        match op {
            EditOp::Ins { h } => pending.push(predicted[h]),
            EditOp::Match { h, .. } | EditOp::Sub { h, .. } => {
                pending.push(predicted[h]);
                slots.push(std::mem::take(&mut pending));
            }
            EditOp::Del { .. } => slots.push(std::mem::take(&mut pending)),
        }
    }
    (slots, pending)
}

/// Counts TA/TR/FA/FR/CD/ED over canonical positions and S/D/I/N against
/// the perceived sequence.
pub fn categorize(triple: &TranscriptTriple) -> Result<MetricCounts> {
    triple.validate()?;
    let mut c = MetricCounts::default();
    let (pred_slots, pred_tail) = predicted_realizations(&triple.canonical, &triple.predicted);

    let mut judge = |canon: &[usize], perceived: &[usize], predicted: &[usize]| {
        let mispronounced = perceived != canon;
        let accepted = predicted == canon;
        match (mispronounced, accepted) {
            (false, true) => c.ta += 1,
            (false, false) => c.fr += 1,
            (true, true) => c.fa += 1,
            (true, false) => {
                c.tr += 1;
                if predicted == perceived {
                    c.cd += 1;
                } else {
                    c.ed += 1;
                }
            }
        }
    };
    for (j, &canon) in triple.canonical.iter().enumerate() {
        let perceived = triple.tags.positions[j].realize(canon);
        judge(&[canon], &perceived, &pred_slots[j]);
    }
    if !triple.tags.terminal.is_empty() || !pred_tail.is_empty() {
        judge(&[], &triple.tags.terminal, &pred_tail);
    }

    let rec = edit_align(&triple.perceived, &triple.predicted);
    c.s = rec.substitutions();
    c.d = rec.deletions();
    c.i = rec.insertions();
    c.n = triple.perceived.len();
    Ok(c)
}

pub fn report(c: &MetricCounts) -> MetricReport {
    let precision = ratio(c.tr, c.tr + c.fr);
    let recall = ratio(c.tr, c.tr + c.fa);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    MetricReport {
        precision,
        recall,
        f1,
        frr: ratio(c.fr, c.fr + c.ta),
        far: ratio(c.fa, c.fa + c.tr),
        edr: ratio(c.ed, c.tr),
        per: ratio(c.s + c.d + c.i, c.n),
        cor: (c.n > 0).then(|| 100.0 * (1.0 - (c.s + c.d) as f64 / c.n as f64)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UtteranceScore {
    pub id: String,
    pub counts: MetricCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedRecord {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusReport {
    pub report: MetricReport,
    pub counts: MetricCounts,
    pub utterances: Vec<UtteranceScore>,
    pub skipped: Vec<SkippedRecord>,
}

impl CorpusReport {
    pub fn is_clean(&self) -> bool {
        self.skipped.is_empty()
    }

    /// Per-utterance breakdown as CSV.
    pub fn utterance_csv(&self) -> String {
        let mut out = String::from("id,ta,tr,fa,fr,cd,ed,s,d,i,n\n");
        for u in &self.utterances {
            let c = &u.counts;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                u.id, c.ta, c.tr, c.fa, c.fr, c.cd, c.ed, c.s, c.d, c.i, c.n
            ));
        }
        out
    }
}

/// Micro-averaged corpus score: counts are summed before any ratio.
/// Records that fail validation are skipped and listed.
pub fn corpus_score<I>(triples: I) -> CorpusReport
where
    I: IntoIterator<Item = (String, TranscriptTriple)>,
{
    let mut counts = MetricCounts::default();
    let mut utterances = Vec::new();
    let mut skipped = Vec::new();
    for (id, triple) in triples {
        match categorize(&triple) {
            Ok(c) => {
                counts += c;
                utterances.push(UtteranceScore { id, counts: c });
            }
            Err(e) => {
                log::warn!("skipping utterance {id}: {e}");
                skipped.push(SkippedRecord {
                    id,
                    reason: e.to_string(),
                });
            }
        }
    }
    CorpusReport {
        report: report(&counts),
        counts,
        utterances,
        skipped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn speak() -> TranscriptTriple {
        // s p iy k t / s b iy g d / s p ih g th
        let (s, p, iy, k, t, b, g, d, ih, th) = (0, 1, 2, 3, 4, 5, 6, 7, 8, 9);
        TranscriptTriple::new(vec![s, p, iy, k, t], vec![s, b, iy, g, d], vec![s, p, ih, g, th])
    }

    #[test]
    fn speak_counts() {
        let c = categorize(&speak()).unwrap();
        assert_eq!((c.ta, c.fa, c.fr, c.tr, c.cd, c.ed), (1, 1, 1, 2, 1, 1));
        let r = report(&c);
        for v in [r.precision, r.recall, r.f1] {
            assert!((v.unwrap() - 200.0 / 3.0).abs() < 1e-10);
        }
    }

    #[test]
    fn perfect_diagnosis() {
        let mut t = speak();
        t.predicted = t.perceived.clone();
        let c = categorize(&t).unwrap();
        assert_eq!((c.fa, c.fr, c.ed), (0, 0, 0));
        assert_eq!(c.tr, c.cd);
        let r = report(&c);
        assert_eq!(r.per, Some(0.0));
        assert_eq!(r.cor, Some(100.0));
    }

    #[test]
    fn canonical_prediction_accepts_everything() {
        let mut t = speak();
        t.predicted = t.canonical.clone();
        let c = categorize(&t).unwrap();
        assert_eq!((c.tr, c.fr), (0, 0));
        assert_eq!(c.fa, 3);
    }

    #[test]
    fn undefined_precision() {
        let r = report(&MetricCounts {
            ta: 3,
            ..Default::default()
        });
        assert_eq!(r.precision, None);
        assert_eq!(r.edr, None);
        assert_eq!(r.frr, Some(0.0));
    }

    #[test]
    fn inconsistent_tags_rejected() {
        let mut t = speak();
        t.perceived[0] = 42;
        let err = categorize(&t).unwrap_err().to_string();
        assert!(err.contains("position 0"), "{err}");
    }

    #[test]
    fn insertion_is_detected_on_following_position() {
        // canonical a b, perceived a x b, predicted a x b
        let t = TranscriptTriple::new(vec![0, 1], vec![0, 7, 1], vec![0, 7, 1]);
        let c = categorize(&t).unwrap();
        assert_eq!((c.ta, c.tr, c.cd), (1, 1, 1));
        // predicted misses the insertion
        let t = TranscriptTriple::new(vec![0, 1], vec![0, 7, 1], vec![0, 1]);
        assert_eq!(categorize(&t).unwrap().fa, 1);
    }

    #[test]
    fn terminal_slot_only_when_used() {
        let t = TranscriptTriple::new(vec![0, 1], vec![0, 1], vec![0, 1, 5]);
        let c = categorize(&t).unwrap();
        assert_eq!((c.ta, c.fr), (2, 1));
        let t = TranscriptTriple::new(vec![0, 1], vec![0, 1, 5], vec![0, 1]);
        let c = categorize(&t).unwrap();
        assert_eq!((c.ta, c.fa), (2, 1));
    }
}
