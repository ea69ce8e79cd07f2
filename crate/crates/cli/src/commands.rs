use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use mddkit_core::decode::{blank_occupancy, check_mode, decode_features, DecodeMode};
use mddkit_core::eval::{corpus_score, CorpusReport, MetricReport, SymbolTable, TranscriptTriple};
use mddkit_core::gradcheck::{check_loss, LossKind};
use mddkit_core::models::{AmKind, InferenceModel, Model};
use mddkit_core::ot::{frame_weights, solve_coupling, LabelWeights};
use mddkit_core::synth::{self, load_split, Example};
use mddkit_core::train::{am_targets, best_path, initial_model, train_stage, Prerequisites, Stage};
use mddkit_core::{ErrorTags, PosteriorGrid};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::exit::CliError;

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

/// Writes to `out`, or stdout when absent.
fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn stage_dir(cfg: &RunConfig, stage: Stage) -> PathBuf {
    cfg.paths.run_dir.join(stage.name())
}

pub fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let corpus = synth::generate(&cfg.synth, cfg.seed)?;
    let sizes = corpus.write(&cfg.paths.data_dir, cfg.synth.split, cfg.seed)?;
    println!(
        "wrote {} utterances to {} (train {}, val {}, test {})",
        corpus.utterances.len(),
        cfg.paths.data_dir.display(),
        sizes[0],
        sizes[1],
        sizes[2]
    );
    Ok(())
}

pub fn train(cfg: &RunConfig, stage: Stage, resume: bool) -> Result<(), CliError> {
    let (vocab, train) = load_split(&cfg.paths.data_dir, "train")?;
    let (_, val) = load_split(&cfg.paths.data_dir, "val")?;
    let prereq = Prerequisites {
        ctc_joint: Some(best_path(&stage_dir(cfg, Stage::CtcJoint))),
        crottc_am: Some(best_path(&stage_dir(cfg, Stage::CrottcAm))),
    };
    let model = initial_model(stage, &vocab.vocab, &cfg.models, vocab.dim, cfg.seed, &prereq)?;
    let dir = stage_dir(cfg, stage);
    let summary = train_stage(stage, model, &train, &val, &cfg.train_options(), &dir, resume)?;
    let best = summary.history.iter().find(|r| r.epoch == summary.best_epoch);
    println!(
        "{stage}: {} epochs, best epoch {} (val F1 {}, PER {}), checkpoint {}",
        summary.history.len(),
        summary.best_epoch,
        fmt_opt(best.and_then(|r| r.val_f1)),
        fmt_opt(best.and_then(|r| r.val_per)),
        summary.best_path.display()
    );
    Ok(())
}

/// One line of `decode` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub predicted: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub am_logprob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lm_logprob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub combined: Option<f64>,
    #[serde(default = "yes")]
    pub terminated: bool,
}

fn yes() -> bool {
    true
}

fn load_model(path: &Path, mode: DecodeMode) -> Result<InferenceModel, CliError> {
    let model = InferenceModel::load(path)?;
    check_mode(&model, mode).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(model)
}

fn decode_split(
    model: &InferenceModel,
    data: &[Example],
    mode: DecodeMode,
    beam: &mddkit_core::decode::BeamConfig,
) -> Result<Vec<PredictionRecord>, CliError> {
    data.iter()
        .map(|ex| {
            let d = decode_features(model, &ex.features, mode, beam)?;
            Ok(PredictionRecord {
                id: ex.id.clone(),
                predicted: model.vocab.decode(&d.tokens),
                am_logprob: d.am_logprob,
                lm_logprob: d.lm_logprob,
                combined: d.combined,
                terminated: d.terminated,
            })
        })
        .collect()
}

pub fn decode(
    cfg: &RunConfig,
    checkpoint: &Path,
    mode: DecodeMode,
    split: &str,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let model = load_model(checkpoint, mode)?;
    let (vocab, data) = load_split(&cfg.paths.data_dir, split)?;
    if vocab.vocab != model.vocab {
        return Err(CliError::Data("checkpoint and corpus use different vocabularies".into()));
    }
    let mut text = String::new();
    for rec in decode_split(&model, &data, mode, &cfg.beam())? {
        text.push_str(&serde_json::to_string(&rec)?);
        text.push('\n');
    }
    emit(out, &text)
}

/// Reference side of scoring; any manifest with these fields works.
#[derive(Debug, Clone, Deserialize)]
struct Reference {
    id: String,
    canonical: String,
    perceived: String,
    #[serde(default)]
    tags: Option<String>,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let f = fs::File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| CliError::Data(format!("{} line {}: {e}", path.display(), k + 1)))?,
        );
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct ScoreOutput<'a> {
    report: &'a MetricReport,
    counts: &'a mddkit_core::eval::MetricCounts,
    scored: usize,
    skipped: Vec<(&'a str, &'a str)>,
}

/// Joins predictions to references by id. Unmatched ids on either side
/// are reported as skipped.
pub fn score_files(predictions: &Path, manifest: &Path) -> Result<CorpusReport, CliError> {
    let preds: Vec<PredictionRecord> = read_jsonl(predictions)?;
    let refs: Vec<Reference> = read_jsonl(manifest)?;
    let mut by_id: BTreeMap<&str, &Reference> = BTreeMap::new();
    for r in &refs {
        if by_id.insert(&r.id, r).is_some() {
            return Err(CliError::Data(format!("duplicate id {} in {}", r.id, manifest.display())));
        }
    }
    let mut table = SymbolTable::new();
    let mut triples = Vec::new();
    let mut extra = Vec::new();
    let mut seen = HashSet::new();
    for p in &preds {
        if !seen.insert(p.id.as_str()) {
            extra.push((p.id.clone(), "duplicate prediction".to_string()));
            continue;
        }
        let Some(r) = by_id.get(p.id.as_str()) else {
            extra.push((p.id.clone(), "not in manifest".to_string()));
            continue;
        };
        let canonical = table.encode(&r.canonical);
        let perceived = table.encode(&r.perceived);
        let predicted = table.encode(&p.predicted);
        let triple = match &r.tags {
            Some(text) => match ErrorTags::parse(text, canonical.len(), |s| Ok(table.intern(s))) {
                Ok(tags) => TranscriptTriple::with_tags(canonical, perceived, tags, predicted),
                Err(e) => {
                    extra.push((p.id.clone(), e.to_string()));
                    continue;
                }
            },
            None => TranscriptTriple::new(canonical, perceived, predicted),
        };
        triples.push((p.id.clone(), triple));
    }
    for r in &refs {
        if !seen.contains(r.id.as_str()) {
            extra.push((r.id.clone(), "no prediction".to_string()));
        }
    }
    triples.sort_by(|a, b| a.0.cmp(&b.0));
    let mut report = corpus_score(triples);
    for (id, reason) in extra {
        log::warn!("skipping {id}: {reason}");
        report.skipped.push(mddkit_core::eval::SkippedRecord { id, reason });
    }
    report.skipped.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(report)
}

pub fn score(predictions: &Path, manifest: &Path, out: Option<&Path>, utterances: Option<&Path>) -> Result<(), CliError> {
    let report = score_files(predictions, manifest)?;
    let output = ScoreOutput {
        report: &report.report,
        counts: &report.counts,
        scored: report.utterances.len(),
        skipped: report.skipped.iter().map(|s| (s.id.as_str(), s.reason.as_str())).collect(),
    };
    let mut text = serde_json::to_string_pretty(&output)?;
    text.push('\n');
    emit(out, &text)?;
    if let Some(p) = utterances {
        write_text(p, &report.utterance_csv())?;
    }
    if !report.is_clean() {
        return Err(CliError::Data(format!("{} records skipped", report.skipped.len())));
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Parses a comma-separated grid, keeping the first copy of duplicates.
pub fn parse_lambdas(text: &str) -> Result<Vec<f64>, CliError> {
    let mut out: Vec<f64> = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let v: f64 = part
            .parse()
            .map_err(|_| CliError::Config(format!("lambda {part:?} is not a number")))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(CliError::Config(format!("lambda {v} outside [0, 1]")));
        }
        if !out.contains(&v) {
            out.push(v);
        }
    }
    if out.is_empty() {
        return Err(CliError::Config("empty lambda grid".into()));
    }
    Ok(out)
}

pub const SWEEP_HEADER: &str = "lambda,f1,per,precision,recall,cor,far";

pub fn sweep_lambda(
    cfg: &RunConfig,
    checkpoint: &Path,
    lambdas: &[f64],
    split: &str,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let model = load_model(checkpoint, DecodeMode::JointBeam)?;
    let (vocab, data) = load_split(&cfg.paths.data_dir, split)?;
    if vocab.vocab != model.vocab {
        return Err(CliError::Data("checkpoint and corpus use different vocabularies".into()));
    }
    let mut text = format!("{SWEEP_HEADER}\n");
    for &lambda in lambdas {
        let beam = cfg.beam_at(lambda);
        let mut triples = Vec::with_capacity(data.len());
        for ex in &data {
            let d = decode_features(&model, &ex.features, DecodeMode::JointBeam, &beam)?;
            let t = TranscriptTriple::with_tags(ex.canonical.clone(), ex.perceived.clone(), ex.tags.clone(), d.tokens);
            triples.push((ex.id.clone(), t));
        }
        let r = corpus_score(triples).report;
        writeln!(
            text,
            "{lambda},{},{},{},{},{},{}",
            fmt_opt(r.f1),
            fmt_opt(r.per),
            fmt_opt(r.precision),
            fmt_opt(r.recall),
            fmt_opt(r.cor),
            fmt_opt(r.far)
        )
        .expect("string write");
    }
    emit(out, &text)
}

/// Files written by `dump-alignment`.
pub const POSTERIOR_FILE: &str = "posteriors.csv";
pub const PLAN_FILE: &str = "plan.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const ATTN_ENC_FILE: &str = "attention_enc.csv";
pub const ATTN_DEC_FILE: &str = "attention_dec.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    pub id: String,
    pub am_kind: AmKind,
    pub frames: usize,
    pub targets: String,
    /// Fraction of frames whose argmax is `<blank>`.
    pub blank_share: f64,
    pub has_attention: bool,
}

fn matrix_csv(t: &mddkit_tensor::Tensor, col: &str) -> Result<String, CliError> {
    let (r, c) = t.dims2().map_err(|e| CliError::Other(e.to_string()))?;
    let mut s = String::from("row");
    for j in 0..c {
        write!(s, ",{col}{j}").expect("string write");
    }
    s.push('\n');
    for i in 0..r {
        write!(s, "{i}").expect("string write");
        for j in 0..c {
            write!(s, ",{}", t.data()[i * c + j]).expect("string write");
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn dump_alignment(cfg: &RunConfig, checkpoint: &Path, id: &str, split: &str, out: &Path) -> Result<(), CliError> {
    let model = Model::load(checkpoint)?;
    let (vocab, data) = load_split(&cfg.paths.data_dir, split)?;
    if vocab.vocab != model.vocab {
        return Err(CliError::Data("checkpoint and corpus use different vocabularies".into()));
    }
    let ex = data
        .iter()
        .find(|e| e.id == id)
        .ok_or_else(|| CliError::Data(format!("utterance {id:?} is not in the {split} split")))?;
    let v = &model.vocab;
    let enc = model.encoder.encode(&ex.features)?;
    let grid = PosteriorGrid::from_logits(&enc.logits)?;
    let alpha = frame_weights(&enc.scores)?;
    let targets = am_targets(&ex.perceived, v.sil(), cfg.train.sil_targets);
    let plan = solve_coupling(&alpha, &LabelWeights::uniform(targets.len())?)?;
    let argmax = grid.argmax_path();

    let mut post = String::from("frame,alpha,argmax");
    for c in 0..v.size() {
        write!(post, ",p_{}", v.symbol(c)).expect("string write");
    }
    post.push('\n');
    for (i, &a) in argmax.iter().enumerate() {
        write!(post, "{i},{},{}", alpha.as_slice()[i], v.symbol(a)).expect("string write");
        for c in 0..v.size() {
            write!(post, ",{}", grid.prob(i, c)).expect("string write");
        }
        post.push('\n');
    }
    let mut plan_csv = String::from("frame,position,label,mass\n");
    for &(i, j) in plan.support() {
        writeln!(plan_csv, "{i},{j},{},{}", v.symbol(targets[j]), plan.get(i, j)).expect("string write");
    }
    fs::create_dir_all(out)?;
    write_text(&out.join(POSTERIOR_FILE), &post)?;
    write_text(&out.join(PLAN_FILE), &plan_csv)?;

    let attention = model.teacher_readout(&ex.features, &ex.canonical, &ex.perceived)?;
    if let Some(t) = &attention {
        write_text(&out.join(ATTN_ENC_FILE), &matrix_csv(&t.attn_enc, "frame")?)?;
        write_text(&out.join(ATTN_DEC_FILE), &matrix_csv(&t.attn_dec, "token")?)?;
    }
    let summary = AlignmentSummary {
        id: ex.id.clone(),
        am_kind: model.am_kind,
        frames: grid.num_frames(),
        targets: v.decode(&targets),
        blank_share: blank_occupancy(&grid, v.blank()),
        has_attention: attention.is_some(),
    };
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    write_text(&out.join(SUMMARY_FILE), &text)?;
    println!(
        "{}: {} frames, blank argmax share {:.4}, written to {}",
        summary.id,
        summary.frames,
        summary.blank_share,
        out.display()
    );
    Ok(())
}

/// Prints one row per loss. `flip_sign` negates every analytic gradient,
/// which has to make every row fail.
pub fn gradcheck(cfg: &RunConfig, flip_sign: bool) -> Result<(), CliError> {
    let g = &cfg.gradcheck;
    let mut text = format!("{:<18} {:>9} {:>12} status\n", "loss", "instances", "max_rel_err");
    let mut failed = Vec::new();
    for kind in LossKind::ALL {
        let s = check_loss(kind, g, cfg.seed, flip_sign)?;
        writeln!(
            text,
            "{:<18} {:>9} {:>12.3e} {}",
            kind.name(),
            s.instances,
            s.max_error,
            if s.passed { "pass" } else { "FAIL" }
        )
        .expect("string write");
        if !s.passed {
            failed.push(kind.name());
        }
    }
    print!("{text}");
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "{} above tolerance {:e}",
            failed.join(", "),
            g.tolerance
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_grid_dedupes_in_order() {
        assert_eq!(parse_lambdas("0.5, 0, 0.5,1,0").unwrap(), vec![0.5, 0.0, 1.0]);
        assert_eq!(parse_lambdas("1.0,1").unwrap(), vec![1.0]);
    }

    #[test]
    fn lambda_grid_rejects_bad_values() {
        for bad in ["", " , ", "0.2,x", "1.5", "-0.1"] {
            assert!(matches!(parse_lambdas(bad), Err(CliError::Config(_))), "{bad:?}");
        }
    }
}
