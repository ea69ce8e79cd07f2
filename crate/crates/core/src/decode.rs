//! Greedy CTC / OTTC decoding and label-synchronous joint AM/LM beam search.
//!
//! Hypotheses are scored as `lambda * am + (1 - lambda) * lm`. The AM part is
//! the best monotone segmentation of the frames into the hypothesis labels
//! (each label covering at least one frame), divided by the frame count. The
//! LM part is the decoder's summed token log-probability divided by the
//! number of scored tokens (`<eos>` included once finished).

use mddkit_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{argmax, PosteriorGrid};
use crate::models::{AmKind, Decoder, DecoderState, InferenceModel};
use crate::vocab::Specials;

/// Merges runs and keeps only real phonemes (ids below `blank`).
fn collapse(path: &[usize], sp: Specials) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &c in path {
        if prev != Some(c) && c < sp.blank {
            out.push(c);
        }
        prev = Some(c);
    }
    out
}

/// Per-frame argmax, merge repeats, drop blanks and other specials.
pub fn ctc_greedy(grid: &PosteriorGrid, sp: Specials) -> Vec<usize> {
    collapse(&grid.argmax_path(), sp)
}

/// Argmax restricted to phonemes and `<sil>` per frame.
pub fn ottc_path(grid: &PosteriorGrid, sp: Specials) -> Vec<usize> {
    (0..grid.num_frames())
        .map(|i| {
            let row = grid.probs().row(i);
            let best = argmax(&row[..sp.blank]);
            if row[sp.sil] > row[best] {
                sp.sil
            } else {
                best
            }
        })
        .collect()
}

/// Dense decoding: every frame carries a real label; runs merge, `<sil>`
/// is dropped.
pub fn ottc_greedy(grid: &PosteriorGrid, sp: Specials) -> Vec<usize> {
    collapse(&ottc_path(grid, sp), sp)
}

/// Fraction of frames whose unrestricted argmax is `<blank>`.
pub fn blank_occupancy(grid: &PosteriorGrid, blank: usize) -> f64 {
    let path = grid.argmax_path();
    path.iter().filter(|&&c| c == blank).count() as f64 / path.len() as f64
}

/// Best monotone segmentation score of `prefix` over all frames, divided by
/// the frame count. `-inf` when the prefix is longer than the utterance.
pub fn am_prefix_score(grid: &PosteriorGrid, prefix: &[usize]) -> f64 {
    let n = grid.num_frames();
    let m = prefix.len();
    if m > n || m == 0 {
        return f64::NEG_INFINITY;
    }
    let mut row: Vec<f64> = Vec::new();
    for (j, &y) in prefix.iter().enumerate() {
        let mut next = vec![f64::NEG_INFINITY; n];
        for t in 0..n {
            let stay = if t > 0 { next[t - 1] } else { f64::NEG_INFINITY };
            let advance = match (j, t) {
                (0, 0) => 0.0,
                (0, _) => f64::NEG_INFINITY,
                (_, 0) => f64::NEG_INFINITY,
                _ => row[t - 1],
            };
            next[t] = stay.max(advance) + grid.log_prob(t, y);
        }
        row = next;
    }
    row[n - 1] / n as f64
}

/// Incremental segmentation scorer with optional `<sil>` runs before the
/// first and after the last label.
#[derive(Debug, Clone)]
pub struct SegmentScorer<'a> {
    grid: &'a PosteriorGrid,
    sil: Option<usize>,
    /// `lead[t]`: frames `0..=t` all silence.
    lead: Vec<f64>,
    /// `trail[t]`: frames `t..n` all silence (`trail[n] = 0`).
    trail: Vec<f64>,
    /// `best_rest[t]`: frames `t..n` at their best phoneme/silence score.
    best_rest: Vec<f64>,
    distinct_adjacent: bool,
}

/// DP row for a label prefix: `row[t]` is the best score with the last
/// label ending at frame `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRow {
    row: Vec<f64>,
    len: usize,
    last: Option<usize>,
}

impl<'a> SegmentScorer<'a> {
    pub fn new(grid: &'a PosteriorGrid, sil: Option<usize>, sp: Specials) -> Self {
        let n = grid.num_frames();
        let sil_lp = |t: usize| sil.map_or(f64::NEG_INFINITY, |s| grid.log_prob(t, s));
        let mut lead = vec![0.0; n];
        let mut acc = 0.0;
        for (t, slot) in lead.iter_mut().enumerate() {
            acc += sil_lp(t);
            *slot = acc;
        }
        let mut trail = vec![0.0; n + 1];
        let mut best_rest = vec![0.0; n + 1];
        for t in (0..n).rev() {
            trail[t] = trail[t + 1] + sil_lp(t);
            let lp = grid.log_probs().row(t);
            let mut best = lp[..sp.blank].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if sil.is_some() {
                best = best.max(sil_lp(t));
            }
            best_rest[t] = best_rest[t + 1] + best;
        }
        Self {
            grid,
            sil,
            lead,
            trail,
            best_rest,
            distinct_adjacent: false,
        }
    }

    /// Scores two adjacent equal labels as impossible. Dense frame labels
    /// cannot separate `a a` from a longer `a`, so without this the AM score
    /// ties every hypothesis with its run-split copies.
    pub fn distinct_adjacent(mut self) -> Self {
        self.distinct_adjacent = true;
        self
    }

    pub fn num_frames(&self) -> usize {
        self.grid.num_frames()
    }

    pub fn empty(&self) -> SegmentRow {
        SegmentRow {
            row: Vec::new(),
            len: 0,
            last: None,
        }
    }

    pub fn extend(&self, prev: &SegmentRow, label: usize) -> SegmentRow {
        let n = self.num_frames();
        let mut row = vec![f64::NEG_INFINITY; n];
        if self.distinct_adjacent && prev.last == Some(label) {
            return SegmentRow {
                row,
                len: prev.len + 1,
                last: Some(label),
            };
        }
        for t in 0..n {
            let stay = if t > 0 { row[t - 1] } else { f64::NEG_INFINITY };
            let advance = if prev.len == 0 {
                if t == 0 {
                    0.0
                } else {
                    self.lead[t - 1]
                }
            } else if t == 0 {
                f64::NEG_INFINITY
            } else {
                prev.row[t - 1]
            };
            row[t] = stay.max(advance) + self.grid.log_prob(t, label);
        }
        SegmentRow {
            row,
            len: prev.len + 1,
            last: Some(label),
        }
    }

    /// Upper bound on any completion's score, per frame.
    pub fn partial(&self, r: &SegmentRow) -> f64 {
        if r.len == 0 {
            return self.best_rest[0] / self.num_frames() as f64;
        }
        let best = (0..self.num_frames())
            .map(|t| r.row[t] + self.best_rest[t + 1])
            .fold(f64::NEG_INFINITY, f64::max);
        best / self.num_frames() as f64
    }

    /// Score of the prefix as a complete hypothesis, per frame.
    pub fn finish(&self, r: &SegmentRow) -> f64 {
        let n = self.num_frames();
        if r.len == 0 {
            return if self.sil.is_some() {
                self.lead[n - 1] / n as f64
            } else {
                f64::NEG_INFINITY
            };
        }
        let best = (0..n)
            .map(|t| r.row[t] + self.trail[t + 1])
            .fold(f64::NEG_INFINITY, f64::max);
        best / n as f64
    }

    pub fn score(&self, labels: &[usize]) -> f64 {
        let mut r = self.empty();
        for &y in labels {
            r = self.extend(&r, y);
        }
        self.finish(&r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub temperature: f64,
    pub lambda: f64,
    pub max_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_size: 10,
            temperature: 1.1,
            lambda: 0.9,
            max_len: 64,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(invalid("beam_size must be >= 1"));
        }
        if !(self.temperature > 0.0) {
            return Err(invalid(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(invalid(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub am_logprob: f64,
    pub lm_logprob: f64,
    pub combined: f64,
    pub terminated: bool,
}

impl Hypothesis {
    fn new(tokens: Vec<usize>, am: f64, lm: f64, lambda: f64, terminated: bool) -> Self {
        Self {
            tokens,
            am_logprob: am,
            lm_logprob: lm,
            combined: combine(am, lm, lambda),
            terminated,
        }
    }
}

/// `lambda * am + (1 - lambda) * lm`, with a zero weight silencing an
/// infinite component.
pub fn combine(am: f64, lm: f64, lambda: f64) -> f64 {
    let a = if lambda == 0.0 { 0.0 } else { lambda * am };
    let l = if lambda == 1.0 { 0.0 } else { (1.0 - lambda) * lm };
    a + l
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamOutput {
    /// Best first.
    pub hypotheses: Vec<Hypothesis>,
    /// No hypothesis reached `<eos>`; `hypotheses` holds the best partials.
    pub unterminated: bool,
}

#[derive(Debug, Clone)]
struct Running {
    tokens: Vec<usize>,
    lm_sum: f64,
    seg: SegmentRow,
    state: DecoderState,
}

fn rank(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    b.combined
        .total_cmp(&a.combined)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Tokens the LM may propose: phonemes and `<eos>`.
fn proposals(lp: &[f64], sp: Specials, k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..sp.blank).chain([sp.eos]).collect();
    ids.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
    ids.truncate(k);
    ids
}

pub fn joint_beam_search(
    grid: &PosteriorGrid,
    h_enc: &Tensor,
    decoder: &Decoder,
    cfg: &BeamConfig,
) -> Result<BeamOutput> {
    cfg.validate()?;
    let sp = decoder.specials();
    if grid.num_classes() != decoder.config().vocab_size {
        return Err(invalid("posterior grid and decoder disagree on vocabulary size"));
    }
    let scorer = SegmentScorer::new(grid, Some(sp.sil), sp).distinct_adjacent();
    let max_len = cfg.max_len.min(grid.num_frames());
    let lambda = cfg.lambda;
    let cache = decoder.cache_memory(h_enc)?;
    let mut running = vec![Running {
        tokens: Vec::new(),
        lm_sum: 0.0,
        seg: scorer.empty(),
        state: decoder.begin(&cache)?,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut last_partials: Vec<Hypothesis> = Vec::new();
    for _ in 0..=max_len {
        let mut cands: Vec<(Hypothesis, Option<(usize, Running)>)> = Vec::new();
        for r in &running {
            let lp = decoder.next_log_probs(&r.state, cfg.temperature)?;
            let count = (r.tokens.len() + 1) as f64;
            for tok in proposals(&lp, sp, cfg.beam_size) {
                let lm_sum = r.lm_sum + lp[tok];
                if tok == sp.eos {
                    let am = scorer.finish(&r.seg);
                    cands.push((Hypothesis::new(r.tokens.clone(), am, lm_sum / count, lambda, true), None));
                } else if r.tokens.len() < max_len {
                    let seg = scorer.extend(&r.seg, tok);
                    let am = scorer.partial(&seg);
                    let mut tokens = r.tokens.clone();
                    tokens.push(tok);
                    let hyp = Hypothesis::new(tokens.clone(), am, lm_sum / count, lambda, false);
                    let run = Running {
                        tokens,
                        lm_sum,
                        seg,
                        state: r.state.clone(),
                    };
                    cands.push((hyp, Some((tok, run))));
                }
            }
        }
        cands.sort_by(|a, b| rank(&a.0, &b.0));
        cands.truncate(cfg.beam_size);
        let mut next = Vec::new();
        last_partials.clear();
        for (hyp, run) in cands {
            match run {
                None => finished.push(hyp),
                Some((tok, mut run)) => {
                    // Only survivors pay for the decoder step.
                    run.state = decoder.advance(&cache, &run.state, tok)?;
                    last_partials.push(hyp);
                    next.push(run);
                }
            }
        }
        running = next;
        if running.is_empty() {
            break;
        }
        // Partial AM scores are upper bounds; once every running hypothesis
        // falls below the best finished one under lambda = 1, none can win.
        if lambda == 1.0 {
            if let Some(best) = finished.iter().map(|h| h.combined).reduce(f64::max) {
                if last_partials.iter().all(|h| h.combined < best) {
                    break;
                }
            }
        }
    }
    if finished.is_empty() {
        log::warn!("beam search: no hypothesis reached <eos> within {max_len} tokens");
        last_partials.sort_by(rank);
        return Ok(BeamOutput {
            hypotheses: last_partials,
            unterminated: true,
        });
    }
    finished.sort_by(rank);
    finished.truncate(cfg.beam_size);
    Ok(BeamOutput {
        hypotheses: finished,
        unterminated: false,
    })
}

/// Repeated argmax over phonemes and `<eos>`.
pub fn greedy_lm_decode(h_enc: &Tensor, decoder: &Decoder, max_len: usize, temperature: f64) -> Result<Vec<usize>> {
    let sp = decoder.specials();
    let mut tokens = vec![sp.bos];
    loop {
        let lp = decoder.step_log_probs(h_enc, &tokens, temperature)?;
        let next = proposals(&lp, sp, 1)[0];
        if next == sp.eos || tokens.len() > max_len {
            break;
        }
        tokens.push(next);
    }
    Ok(tokens[1..].to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    CtcGreedy,
    OttcGreedy,
    JointBeam,
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ctc-greedy" => Ok(Self::CtcGreedy),
            "ottc-greedy" => Ok(Self::OttcGreedy),
            "joint-beam" => Ok(Self::JointBeam),
            _ => Err(invalid(format!(
                "unknown decode mode {s:?} (expected ctc-greedy, ottc-greedy or joint-beam)"
            ))),
        }
    }
}

/// One decoded utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub am_logprob: Option<f64>,
    pub lm_logprob: Option<f64>,
    pub combined: Option<f64>,
    pub terminated: bool,
}

pub fn check_mode(model: &InferenceModel, mode: DecodeMode) -> Result<()> {
    match (mode, model.am_kind) {
        (DecodeMode::CtcGreedy, AmKind::Ottc) => Err(invalid("ctc-greedy needs a CTC-trained encoder")),
        (DecodeMode::OttcGreedy, AmKind::Ctc) => Err(invalid("ottc-greedy needs an OTTC-trained encoder")),
        (DecodeMode::JointBeam, _) => model.require_decoder().map(|_| ()),
        _ => Ok(()),
    }
}

/// Encodes `features` and decodes with `mode`.
pub fn decode_features(
    model: &InferenceModel,
    features: &Tensor,
    mode: DecodeMode,
    beam: &BeamConfig,
) -> Result<Decoded> {
    check_mode(model, mode)?;
    let enc = model.encoder.encode(features)?;
    let grid = PosteriorGrid::from_logits(&enc.logits)?;
    let sp = model.vocab.specials();
    Ok(match mode {
        DecodeMode::CtcGreedy | DecodeMode::OttcGreedy => {
            let tokens = if mode == DecodeMode::CtcGreedy {
                ctc_greedy(&grid, sp)
            } else {
                ottc_greedy(&grid, sp)
            };
            Decoded {
                tokens,
                am_logprob: None,
                lm_logprob: None,
                combined: None,
                terminated: true,
            }
        }
        DecodeMode::JointBeam => {
            let out = joint_beam_search(&grid, &enc.hidden, model.require_decoder()?, beam)?;
            let best = out
                .hypotheses
                .into_iter()
                .next()
                .ok_or_else(|| invalid("beam search produced no hypotheses"))?;
            Decoded {
                tokens: best.tokens,
                am_logprob: Some(best.am_logprob),
                lm_logprob: Some(best.lm_logprob),
                combined: Some(best.combined),
                terminated: !out.unterminated,
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    // 3 phonemes (0..3), blank 3, bos 4, eos 5, sil 6
    fn sp() -> Specials {
        Specials::for_size(7)
    }

    fn one_hot_grid(path: &[usize]) -> PosteriorGrid {
        let rows: Vec<Vec<f64>> = path
            .iter()
            .map(|&c| {
                let mut r = vec![0.01; 7];
                r[c] = 1.0 - 0.06;
                r
            })
            .collect();
        PosteriorGrid::from_probs(&rows).unwrap()
    }

    #[test]
    fn ctc_collapse() {
        assert_eq!(ctc_greedy(&one_hot_grid(&[0, 0, 3, 1]), sp()), vec![0, 1]);
        assert_eq!(ctc_greedy(&one_hot_grid(&[3, 3, 3]), sp()), Vec::<usize>::new());
        assert_eq!(ctc_greedy(&one_hot_grid(&[0, 3, 0, 6, 2]), sp()), vec![0, 0, 2]);
    }

    #[test]
    fn ottc_runs() {
        assert_eq!(ottc_greedy(&one_hot_grid(&[0, 0, 1, 1, 1]), sp()), vec![0, 1]);
        assert_eq!(ottc_greedy(&one_hot_grid(&[0, 1, 0]), sp()), vec![0, 1, 0]);
        // a blank-peaked frame falls back to the best real label
        let path = ottc_path(&one_hot_grid(&[6, 3, 2]), sp());
        assert!(!path.contains(&3));
    }

    #[test]
    fn prefix_score_examples() {
        let g = one_hot_grid(&[1]);
        assert!((am_prefix_score(&g, &[1]) - g.log_prob(0, 1)).abs() < 1e-15);
        assert_eq!(am_prefix_score(&g, &[1, 2]), f64::NEG_INFINITY);
    }

    #[test]
    fn scorer_without_sil_matches_prefix_score() {
        let g = one_hot_grid(&[0, 0, 1, 2, 2, 1]);
        let s = SegmentScorer::new(&g, None, sp());
        for labels in [vec![0], vec![0, 1], vec![0, 1, 2], vec![2, 2, 1]] {
            assert!((s.score(&labels) - am_prefix_score(&g, &labels)).abs() < 1e-12);
        }
    }

    #[test]
    fn combine_is_linear() {
        let (am, lm) = (-0.7, -2.5);
        let d = combine(am, lm, 0.8) - combine(am, lm, 0.3);
        assert!((d - 0.5 * (am - lm)).abs() < 1e-12);
        assert_eq!(combine(f64::NEG_INFINITY, -1.0, 0.0), -1.0);
    }
}
