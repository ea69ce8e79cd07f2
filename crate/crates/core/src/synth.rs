//! Synthetic mispronunciation corpus.
//!
//! Canonical sequences come from a fixed random bigram grammar. Errors are
//! injected per canonical position (substitute, delete, or insert a phoneme
//! before it). Frames realise the perceived sequence: silence, then one run
//! of noisy center vectors per phoneme, then silence.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use mddkit_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tags::{ErrorTags, PositionTag, Realization};
use crate::vocab::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_phonemes: usize,
    pub dim: usize,
    pub noise_sigma: f64,
    /// Standard deviation of the random phoneme centers.
    pub center_scale: f64,
    /// Required pairwise center distance, in units of `noise_sigma`.
    pub min_separation: f64,
    pub num_utts: usize,
    /// Canonical phonemes per utterance, inclusive.
    pub utt_len_range: (usize, usize),
    /// Frames per phoneme, inclusive.
    pub seg_len_range: (usize, usize),
    /// Frames of leading and of trailing silence, inclusive.
    pub sil_len_range: (usize, usize),
    pub sub_rate: f64,
    pub del_rate: f64,
    pub ins_rate: f64,
    /// Probabilities of each phoneme's preferred successors, most likely
    /// first. The bigram grammar draws one successor list per phoneme.
    pub successor_probs: Vec<f64>,
    /// Train / validation / test fractions.
    pub split: (f64, f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_phonemes: 12,
            dim: 16,
            noise_sigma: 1.0,
            center_scale: 1.0,
            min_separation: 4.0,
            num_utts: 500,
            utt_len_range: (4, 8),
            seg_len_range: (3, 8),
            sil_len_range: (2, 4),
            sub_rate: 0.15,
            del_rate: 0.03,
            ins_rate: 0.03,
            successor_probs: vec![0.95, 0.04, 0.01],
            split: (0.7, 0.15, 0.15),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_phonemes < 4 {
            return Err(invalid("synthetic vocabulary needs at least 4 phonemes"));
        }
        if self.dim == 0 || !(self.noise_sigma >= 0.0) || !(self.center_scale > 0.0) {
            return Err(invalid("dim must be positive, noise_sigma >= 0, center_scale > 0"));
        }
        for (name, r) in [("sub_rate", self.sub_rate), ("del_rate", self.del_rate), ("ins_rate", self.ins_rate)] {
            if !(0.0..1.0).contains(&r) {
                return Err(invalid(format!("{name} must lie in [0, 1), got {r}")));
            }
        }
        if self.sub_rate + self.del_rate + self.ins_rate >= 1.0 {
            return Err(invalid("error rates must sum to less than 1"));
        }
        for (name, (lo, hi)) in [
            ("utt_len_range", self.utt_len_range),
            ("seg_len_range", self.seg_len_range),
        ] {
            if lo == 0 || lo > hi {
                return Err(invalid(format!("{name} must satisfy 1 <= low <= high")));
            }
        }
        if self.sil_len_range.0 > self.sil_len_range.1 {
            return Err(invalid("sil_len_range must satisfy low <= high"));
        }
        let probs = &self.successor_probs;
        if probs.is_empty() || probs.len() >= self.num_phonemes {
            return Err(invalid(format!(
                "successor_probs needs between 1 and {} entries",
                self.num_phonemes - 1
            )));
        }
        if probs.iter().any(|p| !(*p > 0.0)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid("successor_probs must be positive and sum to 1"));
        }
        if self.num_utts == 0 {
            return Err(invalid("num_utts must be positive"));
        }
        check_ratios(self.split)
    }
}

/// Phoneme inventory with one feature center per phoneme plus one for
/// silence (last row).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthVocab {
    pub vocab: Vocab,
    /// `(K + 1) x d`, row-major.
    pub centers: Vec<f64>,
    pub dim: usize,
    pub noise_sigma: f64,
    /// Preferred successors per phoneme with their probabilities.
    pub grammar: Vec<Vec<(usize, f64)>>,
}

impl SynthVocab {
    pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let vocab = Vocab::arpabet(cfg.num_phonemes)?;
        let k = cfg.num_phonemes;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let normal = Normal::new(0.0, cfg.center_scale).expect("positive scale");
        let mut centers: Vec<f64> = (0..k * cfg.dim).map(|_| normal.sample(&mut rng)).collect();
        centers.extend(std::iter::repeat(0.0).take(cfg.dim));
        let grammar = (0..k)
            .map(|p| {
                let mut others: Vec<usize> = (0..k).filter(|&q| q != p).collect();
                others.shuffle(&mut rng);
                others.iter().zip(&cfg.successor_probs).map(|(&q, &w)| (q, w)).collect()
            })
            .collect();
        let v = Self {
            vocab,
            centers,
            dim: cfg.dim,
            noise_sigma: cfg.noise_sigma,
            grammar,
        };
        let min = v.min_center_distance();
        if min < cfg.min_separation * cfg.noise_sigma {
            log::warn!(
                "phoneme centers are only {min:.3} apart, below {} x sigma = {:.3}",
                cfg.min_separation,
                cfg.min_separation * cfg.noise_sigma
            );
        }
        Ok(v)
    }

    pub fn center(&self, class: usize) -> &[f64] {
        &self.centers[class * self.dim..(class + 1) * self.dim]
    }

    /// Center row for silence.
    pub fn sil_row(&self) -> usize {
        self.vocab.num_phonemes()
    }

    pub fn min_center_distance(&self) -> f64 {
        let rows = self.vocab.num_phonemes() + 1;
        let mut best = f64::INFINITY;
        for a in 0..rows {
            for b in a + 1..rows {
                let d: f64 = self
                    .center(a)
                    .iter()
                    .zip(self.center(b))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                best = best.min(d);
            }
        }
        best
    }

    /// Index of the nearest center (phonemes, then silence).
    pub fn nearest_center(&self, frame: &[f64]) -> usize {
        let rows = self.vocab.num_phonemes() + 1;
        let mut best = (0, f64::INFINITY);
        for r in 0..rows {
            let d: f64 = self.center(r).iter().zip(frame).map(|(c, x)| (c - x) * (c - x)).sum();
            if d < best.1 {
                best = (r, d);
            }
        }
        best.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub canonical: Vec<usize>,
    pub perceived: Vec<usize>,
    pub tags: ErrorTags,
    /// `n x d`, values exactly representable as `f32`.
    pub frames: Tensor,
    /// Center row that generated each frame (silence = `K`).
    pub frame_labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: SynthVocab,
    pub utterances: Vec<Utterance>,
}

fn sample_range<R: Rng>(rng: &mut R, (lo, hi): (usize, usize)) -> usize {
    rng.random_range(lo..=hi)
}

fn sample_canonical<R: Rng>(v: &SynthVocab, len: usize, rng: &mut R) -> Vec<usize> {
    let k = v.vocab.num_phonemes();
    let mut out = vec![rng.random_range(0..k)];
    while out.len() < len {
        let prev = *out.last().expect("non-empty");
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut next = v.grammar[prev].last().expect("successors").0;
        for &(q, w) in &v.grammar[prev] {
            acc += w;
            if u < acc {
                next = q;
                break;
            }
        }
        out.push(next);
    }
    out
}

fn other_phoneme<R: Rng>(k: usize, avoid: usize, rng: &mut R) -> usize {
    let r = rng.random_range(0..k - 1);
    if r >= avoid {
        r + 1
    } else {
        r
    }
}

/// Per-position error injection; the tags record exactly what was injected.
fn inject<R: Rng>(canonical: &[usize], k: usize, cfg: &SynthConfig, rng: &mut R) -> ErrorTags {
    let mut positions = Vec::with_capacity(canonical.len());
    for &c in canonical {
        let u: f64 = rng.random();
        let mut tag = PositionTag::correct();
        if u < cfg.sub_rate {
            tag.core = Realization::Substituted(other_phoneme(k, c, rng));
        } else if u < cfg.sub_rate + cfg.del_rate {
            tag.core = Realization::Deleted;
        } else if u < cfg.sub_rate + cfg.del_rate + cfg.ins_rate {
            tag.inserted_before.push(rng.random_range(0..k));
        }
        positions.push(tag);
    }
    ErrorTags {
        positions,
        terminal: Vec::new(),
    }
}

/// Frames for a perceived sequence; the RNG is private to the utterance so
/// the result depends only on `(perceived, seed, index)`.
pub fn synthesize_frames(v: &SynthVocab, perceived: &[usize], cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
    let sil = v.sil_row();
    let mut labels = Vec::new();
    labels.extend(std::iter::repeat(sil).take(sample_range(rng, cfg.sil_len_range)));
    for &p in perceived {
        labels.extend(std::iter::repeat(p).take(sample_range(rng, cfg.seg_len_range)));
    }
    labels.extend(std::iter::repeat(sil).take(sample_range(rng, cfg.sil_len_range)));
    if labels.is_empty() {
        labels.push(sil);
    }
    let normal = Normal::new(0.0, v.noise_sigma.max(0.0)).expect("valid sigma");
    let mut data = Vec::with_capacity(labels.len() * v.dim);
    for &l in &labels {
        for &c in v.center(l) {
            let x = c + if v.noise_sigma > 0.0 { normal.sample(rng) } else { 0.0 };
            data.push(x as f32 as f64);
        }
    }
    let frames = Tensor::new(vec![labels.len(), v.dim], data).expect("frame shape");
    (frames, labels)
}

pub fn utterance_id(index: usize) -> String {
    format!("utt{index:05}")
}

pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<Corpus> {
    let vocab = SynthVocab::generate(cfg, seed)?;
    let k = cfg.num_phonemes;
    let mut text_rng = ChaCha8Rng::seed_from_u64(seed);
    text_rng.set_stream(1);
    let mut utterances = Vec::with_capacity(cfg.num_utts);
    for idx in 0..cfg.num_utts {
        let len = sample_range(&mut text_rng, cfg.utt_len_range);
        let canonical = sample_canonical(&vocab, len, &mut text_rng);
        let tags = inject(&canonical, k, cfg, &mut text_rng);
        let perceived = tags.apply(&canonical)?;
        let mut frame_rng = ChaCha8Rng::seed_from_u64(seed);
        frame_rng.set_stream(2 + idx as u64);
        let (frames, frame_labels) = synthesize_frames(&vocab, &perceived, cfg, &mut frame_rng);
        utterances.push(Utterance {
            id: utterance_id(idx),
            canonical,
            perceived,
            tags,
            frames,
            frame_labels,
        });
    }
    Ok(Corpus { vocab, utterances })
}

fn check_ratios((a, b, c): (f64, f64, f64)) -> Result<()> {
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("split ratios ({a}, {b}, {c}) must be in [0, 1] and sum to 1")));
    }
    Ok(())
}

/// Seeded shuffle, then contiguous train / val / test slices sized by
/// rounding. A split with a positive ratio that receives no item is an error.
pub fn split<T: Clone>(items: &[T], ratios: (f64, f64, f64), seed: u64) -> Result<[Vec<T>; 3]> {
    check_ratios(ratios)?;
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    order.shuffle(&mut rng);
    let n_train = (ratios.0 * n as f64).round() as usize;
    let n_val = ((ratios.1 * n as f64).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let sizes = [n_train, n_val, n - n_train - n_val];
    for (name, (size, r)) in ["train", "val", "test"].iter().zip(sizes.iter().zip([ratios.0, ratios.1, ratios.2])) {
        if r > 0.0 && *size == 0 {
            return Err(invalid(format!("{name} split is empty for {n} items")));
        }
    }
    let pick = |r: std::ops::Range<usize>| order[r].iter().map(|&i| items[i].clone()).collect();
    Ok([
        pick(0..sizes[0]),
        pick(sizes[0]..sizes[0] + sizes[1]),
        pick(sizes[0] + sizes[1]..n),
    ])
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub canonical: String,
    pub perceived: String,
    pub tags: String,
    pub feature_file: String,
    pub num_frames: usize,
    pub dim: usize,
}

pub fn write_features<W: Write>(w: &mut W, frames: &Tensor) -> Result<()> {
    let (n, d) = frames.dims2()?;
    let to_u32 = |v: usize| u32::try_from(v).map_err(|_| invalid("feature matrix too large"));
    w.write_all(&to_u32(n)?.to_le_bytes())?;
    w.write_all(&to_u32(d)?.to_le_bytes())?;
    for &v in frames.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_features<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut head = [0u8; 8];
    r.read_exact(&mut head)?;
    let n = u32::from_le_bytes(head[..4].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(head[4..].try_into().expect("4 bytes")) as usize;
    let mut buf = Vec::new();
    r.take((n * d * 4) as u64).read_to_end(&mut buf)?;
    if buf.len() != n * d * 4 {
        return Err(Error::Format(format!("feature file truncated: expected {n}x{d} floats")));
    }
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Tensor::new(vec![n, d], data)?)
}

pub fn load_features(path: &Path) -> Result<Tensor> {
    let f = File::open(path).map_err(|e| Error::Missing(format!("feature file {}: {e}", path.display())))?;
    read_features(&mut BufReader::new(f))
}

impl Corpus {
    pub fn manifest_record(&self, u: &Utterance) -> ManifestRecord {
        let v = &self.vocab.vocab;
        ManifestRecord {
            id: u.id.clone(),
            canonical: v.decode(&u.canonical),
            perceived: v.decode(&u.perceived),
            tags: u.tags.to_text(|p| v.symbol(p).to_string()),
            feature_file: format!("feats/{}.f32", u.id),
            num_frames: u.frames.shape()[0],
            dim: u.frames.shape()[1],
        }
    }

    /// Writes `vocab.json`, `feats/*.f32` and one manifest per split.
    pub fn write(&self, dir: &Path, ratios: (f64, f64, f64), seed: u64) -> Result<[usize; 3]> {
        fs::create_dir_all(dir.join("feats"))?;
        fs::write(dir.join("vocab.json"), serde_json::to_string_pretty(&self.vocab)?)?;
        for u in &self.utterances {
            let mut w = BufWriter::new(File::create(dir.join("feats").join(format!("{}.f32", u.id)))?);
            write_features(&mut w, &u.frames)?;
            w.flush()?;
        }
        let ids: Vec<usize> = (0..self.utterances.len()).collect();
        let parts = split(&ids, ratios, seed)?;
        let mut sizes = [0; 3];
        for (k, part) in parts.iter().enumerate() {
            let mut sorted = part.clone();
            sorted.sort_unstable();
            let mut w = BufWriter::new(File::create(dir.join(format!("{}.jsonl", SPLIT_NAMES[k])))?);
            for &i in &sorted {
                serde_json::to_writer(&mut w, &self.manifest_record(&self.utterances[i]))?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
            sizes[k] = sorted.len();
        }
        Ok(sizes)
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let f = File::open(path).map_err(|e| Error::Missing(format!("manifest {}: {e}", path.display())))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (k, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), k + 1)))?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Format(format!("duplicate id {} in {}", rec.id, path.display())));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_vocab(dir: &Path) -> Result<SynthVocab> {
    let path = dir.join("vocab.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// A loaded training/evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub canonical: Vec<usize>,
    pub perceived: Vec<usize>,
    pub tags: ErrorTags,
    pub features: Tensor,
}

impl Example {
    pub fn from_record(rec: &ManifestRecord, dir: &Path, vocab: &Vocab) -> Result<Self> {
        let canonical = vocab.encode(&rec.canonical)?;
        let perceived = vocab.encode(&rec.perceived)?;
        let tags = ErrorTags::parse(&rec.tags, canonical.len(), |s| vocab.id(s))?;
        if tags.apply(&canonical)? != perceived {
            return Err(Error::Format(format!("{}: tags do not rebuild the perceived sequence", rec.id)));
        }
        let features = load_features(&dir.join(&rec.feature_file))?;
        if features.shape() != [rec.num_frames, rec.dim] {
            return Err(Error::Format(format!(
                "{}: feature file is {:?}, manifest says {}x{}",
                rec.id,
                features.shape(),
                rec.num_frames,
                rec.dim
            )));
        }
        Ok(Self {
            id: rec.id.clone(),
            canonical,
            perceived,
            tags,
            features,
        })
    }

    pub fn from_utterance(u: &Utterance) -> Self {
        Self {
            id: u.id.clone(),
            canonical: u.canonical.clone(),
            perceived: u.perceived.clone(),
            tags: u.tags.clone(),
            features: u.frames.clone(),
        }
    }
}

pub fn manifest_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}

/// Loads every example of one split written by [`Corpus::write`].
pub fn load_split(dir: &Path, split: &str) -> Result<(SynthVocab, Vec<Example>)> {
    let vocab = read_vocab(dir)?;
    let recs = read_manifest(&manifest_path(dir, split))?;
    let examples = recs
        .iter()
        .map(|r| Example::from_record(r, dir, &vocab.vocab))
        .collect::<Result<Vec<_>>>()?;
    Ok((vocab, examples))
}

/// In-memory split of a generated corpus, same partition as the files.
pub fn split_examples(corpus: &Corpus, ratios: (f64, f64, f64), seed: u64) -> Result<[Vec<Example>; 3]> {
    let ids: Vec<usize> = (0..corpus.utterances.len()).collect();
    let parts = split(&ids, ratios, seed)?;
    Ok(parts.map(|mut p| {
        p.sort_unstable();
        p.iter().map(|&i| Example::from_utterance(&corpus.utterances[i])).collect()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_corpus_has_no_errors() {
        let cfg = SynthConfig {
            sub_rate: 0.0,
            del_rate: 0.0,
            ins_rate: 0.0,
            num_utts: 20,
            ..Default::default()
        };
        let c = generate(&cfg, 3).unwrap();
        for u in &c.utterances {
            assert_eq!(u.canonical, u.perceived);
            assert!(u.tags.position_flags().iter().all(|&f| f == 0));
        }
    }

    #[test]
    fn full_substitution() {
        let cfg = SynthConfig {
            sub_rate: 0.999_999,
            del_rate: 0.0,
            ins_rate: 0.0,
            num_utts: 20,
            ..Default::default()
        };
        let c = generate(&cfg, 3).unwrap();
        for u in &c.utterances {
            assert_eq!(u.canonical.len(), u.perceived.len());
            assert!(u.canonical.iter().zip(&u.perceived).all(|(a, b)| a != b));
        }
    }

    #[test]
    fn feature_roundtrip() {
        let t = Tensor::new(vec![2, 3], vec![0.5, -1.25, 3.0, 0.0, 1e-3f32 as f64, 7.0]).unwrap();
        let mut buf = Vec::new();
        write_features(&mut buf, &t).unwrap();
        assert_eq!(buf.len(), 8 + 6 * 4);
        assert_eq!(read_features(&mut buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn split_edge_cases() {
        let items: Vec<usize> = (0..10).collect();
        let [a, b, c] = split(&items, (1.0, 0.0, 0.0), 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (10, 0, 0));
        assert!(split(&items[..2], (0.5, 0.25, 0.25), 1).is_err());
        assert!(split(&items, (0.5, 0.5, 0.5), 1).is_err());
    }
}
