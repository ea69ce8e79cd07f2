//! Training loops for the three stages.
//!
//! * `ctc-joint`: encoder + decoder on `omega1 * CTC / m + (1 - omega1) * LM`.
//! * `crottc-am`: encoder alone on the two-view OTTC + consistency loss.
//! * `if-finetune`: CROTTC encoder + stage-one decoder + a fresh teacher on
//!   the full multi-task objective.
//!
//! Every stage writes `last.ckpt` (weights, optimizer state, history) after
//! each epoch, `best.ckpt` when validation F1 improves, and `log.csv`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use mddkit_tensor::{Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{make_views, AugmentPolicy, FrameMatrix};
use crate::decode::{ctc_greedy, decode_features, ottc_greedy, BeamConfig, DecodeMode};
use crate::error::{invalid, Error, Result};
use crate::eval::{corpus_score, CorpusReport, TranscriptTriple};
use crate::grid::PosteriorGrid;
use crate::losses::{
    am_loss_node, ctc_loss_node, error_head_losses_node, guided_attention_node, lm_loss_node, min_frames,
    total_loss_node, ComponentNodes, LossWeights, ViewNodes,
};
use crate::models::{
    checkpoint_training_meta, detach_teacher, AmKind, Bound, Checkpoint, Decoder, DecoderConfig, Encoder, EncoderConfig, Model,
    Params, Teacher, TeacherConfig,
};
use crate::ot::OttcOptions;
use crate::synth::Example;
use crate::vocab::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    CtcJoint,
    CrottcAm,
    IfFinetune,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::CtcJoint, Stage::CrottcAm, Stage::IfFinetune];

    pub fn name(self) -> &'static str {
        match self {
            Stage::CtcJoint => "ctc-joint",
            Stage::CrottcAm => "crottc-am",
            Stage::IfFinetune => "if-finetune",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| invalid(format!("unknown stage {s:?} (expected ctc-joint, crottc-am or if-finetune)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Epochs for `ctc-joint` and `crottc-am`.
    pub epochs: usize,
    /// Epochs for `if-finetune`; the decoder has to relearn attention over
    /// the swapped-in encoder.
    pub finetune_epochs: usize,
    /// Utterances per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    /// Wrap alignment targets in `<sil>` to cover leading/trailing silence.
    pub sil_targets: bool,
    pub detach_plan: bool,
    pub guided_bandwidth: f64,
    /// Keep updating the encoder during `if-finetune`.
    pub finetune_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            finetune_epochs: 80,
            batch_size: 8,
            learning_rate: 2e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 5.0,
            sil_targets: true,
            detach_plan: false,
            guided_bandwidth: 0.2,
            finetune_encoder: false,
        }
    }
}

impl TrainConfig {
    pub fn epochs_for(&self, stage: Stage) -> usize {
        match stage {
            Stage::IfFinetune => self.finetune_epochs,
            _ => self.epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.finetune_epochs == 0 || self.batch_size == 0 {
            return Err(invalid("epochs and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(self.adam_eps > 0.0) {
            return Err(invalid("learning_rate and adam_eps must be positive"));
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid(format!("Adam betas must lie in [0, 1), got {b}")));
            }
        }
        if !(self.grad_clip >= 0.0) || !(self.guided_bandwidth > 0.0) {
            return Err(invalid("grad_clip must be >= 0 and guided_bandwidth > 0"));
        }
        Ok(())
    }
}

/// Adam with per-parameter state keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Starts a new optimizer step (bias correction uses the count).
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &[f64]) {
        let n = param.numel();
        let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let t = self.step.max(1) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), mi), vi) in param.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
            *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
        }
    }

    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (prefix, map) in [(ADAM_M, &self.m), (ADAM_V, &self.v)] {
            for (k, d) in map {
                out.push((format!("{prefix}{k}"), Tensor::vector(d.clone())));
            }
        }
        out
    }

    fn restore(&mut self, step: u64, ck: &Checkpoint) {
        self.step = step;
        self.m.clear();
        self.v.clear();
        for (name, t) in &ck.tensors {
            if let Some(k) = name.strip_prefix(ADAM_M) {
                self.m.insert(k.to_string(), t.data().to_vec());
            } else if let Some(k) = name.strip_prefix(ADAM_V) {
                self.v.insert(k.to_string(), t.data().to_vec());
            }
        }
    }
}

/// Model shape settings; vocabulary sizes and the input width are filled in
/// from the data.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfigs {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub teacher: TeacherConfig,
}

impl ModelConfigs {
    pub fn fitted(&self, vocab: &Vocab, input_dim: usize) -> Self {
        let mut c = self.clone();
        c.encoder.input_dim = input_dim;
        c.encoder.vocab_size = vocab.size();
        c.decoder.vocab_size = vocab.size();
        c.decoder.hidden_dim = c.encoder.hidden_dim;
        c.teacher.vocab_size = vocab.size();
        c.teacher.hidden_dim = c.encoder.hidden_dim;
        c
    }
}

/// SplitMix64 finalizer; turns `(seed, tag)` into an independent seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Checkpoints consumed by later stages.
#[derive(Debug, Clone, Default)]
pub struct Prerequisites {
    /// `ctc-joint` output, supplies the decoder.
    pub ctc_joint: Option<PathBuf>,
    /// `crottc-am` output, supplies the encoder.
    pub crottc_am: Option<PathBuf>,
}

fn require(path: &Option<PathBuf>, what: &str, stage: Stage) -> Result<Model> {
    let p = path
        .as_ref()
        .ok_or_else(|| Error::Missing(format!("stage {stage} needs the {what} checkpoint; run that stage first")))?;
    if !p.exists() {
        return Err(Error::Missing(format!(
            "stage {stage} needs the {what} checkpoint at {}; run that stage first",
            p.display()
        )));
    }
    Model::load(p)
}

/// Fresh (or assembled) model for the start of a stage.
pub fn initial_model(
    stage: Stage,
    vocab: &Vocab,
    configs: &ModelConfigs,
    input_dim: usize,
    seed: u64,
    prereq: &Prerequisites,
) -> Result<Model> {
    let c = configs.fitted(vocab, input_dim);
    match stage {
        Stage::CtcJoint => Ok(Model {
            vocab: vocab.clone(),
            am_kind: AmKind::Ctc,
            encoder: Encoder::new(c.encoder, derive_seed(seed, 1))?,
            decoder: Some(Decoder::new(c.decoder, derive_seed(seed, 2))?),
            teacher: None,
        }),
        Stage::CrottcAm => Ok(Model {
            vocab: vocab.clone(),
            am_kind: AmKind::Ottc,
            encoder: Encoder::new(c.encoder, derive_seed(seed, 3))?,
            decoder: None,
            teacher: None,
        }),
        Stage::IfFinetune => {
            let am = require(&prereq.crottc_am, "crottc-am", stage)?;
            let joint = require(&prereq.ctc_joint, "ctc-joint", stage)?;
            if am.am_kind != AmKind::Ottc {
                return Err(invalid("the crottc-am checkpoint does not hold an OTTC encoder"));
            }
            if am.vocab != *vocab || joint.vocab != *vocab {
                return Err(invalid("prerequisite checkpoints were trained on a different vocabulary"));
            }
            let decoder = joint
                .decoder
                .ok_or_else(|| Error::Missing("the ctc-joint checkpoint has no decoder".into()))?;
            if decoder.config().hidden_dim != am.encoder.config().hidden_dim {
                return Err(invalid("decoder and encoder widths differ"));
            }
            let mut tc = c.teacher;
            tc.hidden_dim = am.encoder.config().hidden_dim;
            Ok(Model {
                vocab: vocab.clone(),
                am_kind: AmKind::Ottc,
                encoder: am.encoder,
                decoder: Some(decoder),
                teacher: Some(Teacher::new(tc, derive_seed(seed, 4))?),
            })
        }
    }
}

/// Everything a stage needs besides the model and data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub augment: AugmentPolicy,
    /// Joint decoding used for `if-finetune` validation; its lambda is
    /// replaced by `weights.lambda`.
    pub beam: BeamConfig,
    pub seed: u64,
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// AM term: CTC / m for `ctc-joint`, the two-view loss otherwise.
    pub am: f64,
    pub lm: f64,
    pub pos: f64,
    pub typ: f64,
    pub ga: f64,
    pub val_f1: Option<f64>,
    pub val_per: Option<f64>,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainState {
    stage: Stage,
    epoch: usize,
    adam_step: u64,
    best_epoch: Option<usize>,
    history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_path: PathBuf,
}

pub fn best_path(dir: &Path) -> PathBuf {
    dir.join("best.ckpt")
}

pub fn last_path(dir: &Path) -> PathBuf {
    dir.join("last.ckpt")
}

pub fn log_path(dir: &Path) -> PathBuf {
    dir.join("log.csv")
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss,am,lm,pos,type,ga,val_f1,val_per,skipped\n");
    for r in history {
        out.push_str(&format!(
            "{},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{},{},{}\n",
            r.epoch,
            r.loss,
            r.am,
            r.lm,
            r.pos,
            r.typ,
            r.ga,
            opt_cell(r.val_f1),
            opt_cell(r.val_per),
            r.skipped
        ));
    }
    out
}

/// Alignment targets: the perceived phonemes, optionally wrapped in `<sil>`.
pub fn am_targets(perceived: &[usize], sil: usize, sil_targets: bool) -> Vec<usize> {
    if sil_targets {
        let mut t = Vec::with_capacity(perceived.len() + 2);
        t.push(sil);
        t.extend_from_slice(perceived);
        t.push(sil);
        t
    } else {
        perceived.to_vec()
    }
}

/// Greedy AM decoding of a whole split, scored against the references.
pub fn evaluate_greedy(model: &Model, data: &[Example]) -> Result<CorpusReport> {
    let sp = model.vocab.specials();
    let mut triples = Vec::with_capacity(data.len());
    for ex in data {
        let enc = model.encoder.encode(&ex.features)?;
        let grid = PosteriorGrid::from_logits(&enc.logits)?;
        let predicted = match model.am_kind {
            AmKind::Ctc => ctc_greedy(&grid, sp),
            AmKind::Ottc => ottc_greedy(&grid, sp),
        };
        triples.push((
            ex.id.clone(),
            TranscriptTriple::new(ex.canonical.clone(), ex.perceived.clone(), predicted),
        ));
    }
    Ok(corpus_score(triples))
}

/// Joint beam decoding of a whole split, scored against the references.
pub fn evaluate_joint(model: &Model, data: &[Example], beam: &BeamConfig) -> Result<CorpusReport> {
    let inference = detach_teacher(model.clone());
    let mut triples = Vec::with_capacity(data.len());
    for ex in data {
        let d = decode_features(&inference, &ex.features, DecodeMode::JointBeam, beam)?;
        triples.push((
            ex.id.clone(),
            TranscriptTriple::new(ex.canonical.clone(), ex.perceived.clone(), d.tokens),
        ));
    }
    Ok(corpus_score(triples))
}

struct Bounds {
    enc: Bound,
    dec: Option<Bound>,
    tea: Option<Bound>,
}

#[derive(Default, Clone, Copy)]
struct Parts {
    am: f64,
    lm: f64,
    pos: f64,
    typ: f64,
    ga: f64,
}

struct Ctx<'a> {
    stage: Stage,
    model: &'a Model,
    opts: &'a TrainOptions,
}

impl Ctx<'_> {
    fn trainable(&self) -> [bool; 3] {
        match self.stage {
            Stage::CtcJoint => [true, true, false],
            Stage::CrottcAm => [true, false, false],
            Stage::IfFinetune => [self.opts.train.finetune_encoder, true, true],
        }
    }

    fn bind(&self, g: &mut Graph) -> Bounds {
        let t = self.trainable();
        Bounds {
            enc: self.model.encoder.params().bind(g, t[0]),
            dec: self.model.decoder.as_ref().map(|d| d.params().bind(g, t[1])),
            tea: self.model.teacher.as_ref().map(|x| x.params().bind(g, t[2])),
        }
    }

    /// Loss node for one utterance; `None` when the utterance cannot be
    /// used (too short for its targets).
    fn example_loss(
        &self,
        g: &mut Graph,
        b: &Bounds,
        ex: &Example,
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<(Var, Parts)>> {
        let vocab = &self.model.vocab;
        let cfg = &self.opts.train;
        let w = &self.opts.weights;
        let targets = am_targets(&ex.perceived, vocab.sil(), cfg.sil_targets);
        let n = ex.features.shape()[0];
        let val = |g: &Graph, v: Var| g.value(v).item();
        match self.stage {
            Stage::CtcJoint => {
                if n < min_frames(&targets) {
                    return Ok(None);
                }
                let x = g.constant(ex.features.clone());
                let enc = self.model.encoder.forward(g, &b.enc, x)?;
                let lp = g.log_softmax(enc.logits, 1)?;
                let ctc = ctc_loss_node(g, lp, &targets, vocab.blank())?;
                let ctc = g.scale(ctc, 1.0 / targets.len().max(1) as f64);
                let dec = self.model.decoder.as_ref().expect("ctc-joint has a decoder");
                let nodes = dec.forward(g, b.dec.as_ref().expect("bound"), enc.hidden, &tokens_with_bos(vocab, &ex.perceived))?;
                let lm = lm_loss_node(g, nodes.logits, &ex.perceived, vocab.eos())?;
                let parts = Parts {
                    am: val(g, ctc),
                    lm: val(g, lm),
                    ..Default::default()
                };
                let a = g.scale(ctc, w.omega1);
                let l = g.scale(lm, 1.0 - w.omega1);
                Ok(Some((g.add(a, l)?, parts)))
            }
            Stage::CrottcAm | Stage::IfFinetune => {
                if n < targets.len() {
                    return Ok(None);
                }
                let fm = FrameMatrix::new(ex.features.clone(), 1.0)?;
                let views = make_views(&fm, &self.opts.augment, rng)?;
                let mut view_nodes = Vec::with_capacity(2);
                let mut hidden_a = None;
                for v in [views.a.frames(), views.b.frames()] {
                    let x = g.constant(v.clone());
                    let enc = self.model.encoder.forward(g, &b.enc, x)?;
                    hidden_a.get_or_insert(enc.hidden);
                    let lp = g.log_softmax(enc.logits, 1)?;
                    view_nodes.push(ViewNodes {
                        log_probs: lp,
                        frame_scores: enc.scores,
                    });
                }
                let opts = OttcOptions {
                    detach_plan: cfg.detach_plan,
                };
                let am = am_loss_node(g, view_nodes[0], view_nodes[1], &targets, w.eta, opts)?;
                if self.stage == Stage::CrottcAm {
                    let parts = Parts {
                        am: val(g, am.total),
                        ..Default::default()
                    };
                    return Ok(Some((am.total, parts)));
                }
                let h_enc = hidden_a.expect("two views");
                let dec = self.model.decoder.as_ref().expect("if-finetune has a decoder");
                let teacher = self.model.teacher.as_ref().expect("if-finetune has a teacher");
                let d = dec.forward(g, b.dec.as_ref().expect("bound"), h_enc, &tokens_with_bos(vocab, &ex.perceived))?;
                let lm = lm_loss_node(g, d.logits, &ex.perceived, vocab.eos())?;
                if ex.canonical.is_empty() || n < teacher.config().downsample_factor {
                    return Ok(None);
                }
                let t = teacher.forward(g, b.tea.as_ref().expect("bound"), h_enc, d.hidden, &ex.canonical)?;
                let (pos, typ) = error_head_losses_node(g, t.pos_probs, t.type_probs, &ex.tags)?;
                let ga_e = guided_attention_node(g, t.attn_enc, cfg.guided_bandwidth)?;
                let ga_d = guided_attention_node(g, t.attn_dec, cfg.guided_bandwidth)?;
                let ga = g.add(ga_e, ga_d)?;
                let ga = g.scale(ga, 0.5);
                let parts = Parts {
                    am: val(g, am.total),
                    lm: val(g, lm),
                    pos: val(g, pos),
                    typ: val(g, typ),
                    ga: val(g, ga),
                };
                let total = total_loss_node(
                    g,
                    &ComponentNodes {
                        am: am.total,
                        lm,
                        pos,
                        typ,
                        ga,
                    },
                    w,
                )?;
                Ok(Some((total, parts)))
            }
        }
    }
}

fn tokens_with_bos(vocab: &Vocab, seq: &[usize]) -> Vec<usize> {
    let mut t = Vec::with_capacity(seq.len() + 1);
    t.push(vocab.bos());
    t.extend_from_slice(seq);
    t
}

fn groups_mut(model: &mut Model) -> [Option<&mut Params>; 3] {
    [
        Some(model.encoder.params_mut()),
        model.decoder.as_mut().map(Decoder::params_mut),
        model.teacher.as_mut().map(Teacher::params_mut),
    ]
}

/// Runs one epoch; returns the mean training components.
fn run_epoch(
    stage: Stage,
    model: &mut Model,
    adam: &mut Adam,
    train: &[Example],
    opts: &TrainOptions,
    epoch: usize,
) -> Result<(EpochRecord, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, 100 + stage.index()));
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut sum = Parts::default();
    let mut loss_sum = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    let mut g = Graph::new();
    for batch in order.chunks(opts.train.batch_size) {
        g.reset();
        let ctx = Ctx { stage, model, opts };
        let bounds = ctx.bind(&mut g);
        let mut losses = Vec::with_capacity(batch.len());
        for &i in batch {
            match ctx.example_loss(&mut g, &bounds, &train[i], &mut rng)? {
                Some((l, p)) => {
                    let lv = g.value(l).item();
                    if !lv.is_finite() {
                        log::warn!("{}: non-finite loss, skipped", train[i].id);
                        skipped += 1;
                        continue;
                    }
                    loss_sum += lv;
                    sum.am += p.am;
                    sum.lm += p.lm;
                    sum.pos += p.pos;
                    sum.typ += p.typ;
                    sum.ga += p.ga;
                    losses.push(l);
                }
                None => {
                    log::warn!("{}: too few frames for its targets, skipped", train[i].id);
                    skipped += 1;
                }
            }
        }
        if losses.is_empty() {
            continue;
        }
        used += losses.len();
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = g.add(total, l)?;
        }
        let root = g.scale(total, 1.0 / losses.len() as f64);
        let grads = g.backward(root)?;
        let trainable = ctx.trainable();
        let mut collected: Vec<(usize, usize, Vec<f64>)> = Vec::new();
        let bound_groups = [Some(&bounds.enc), bounds.dec.as_ref(), bounds.tea.as_ref()];
        for (gi, bg) in bound_groups.iter().enumerate() {
            if let (Some(bg), true) = (bg, trainable[gi]) {
                for (pi, &v) in bg.vars().iter().enumerate() {
                    if let Some(gr) = grads.get(v) {
                        collected.push((gi, pi, gr.data().to_vec()));
                    }
                }
            }
        }
        let norm = collected
            .iter()
            .flat_map(|(_, _, d)| d.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            log::warn!("epoch {epoch}: non-finite gradient norm, batch skipped");
            continue;
        }
        let factor = if opts.train.grad_clip > 0.0 && norm > opts.train.grad_clip {
            opts.train.grad_clip / norm
        } else {
            1.0
        };
        adam.begin_step();
        let mut groups = groups_mut(model);
        for (gi, pi, mut d) in collected {
            if factor != 1.0 {
                d.iter_mut().for_each(|x| *x *= factor);
            }
            let params = groups[gi].as_mut().expect("bound group exists");
            let name = params.names()[pi].clone();
            adam.update(&name, &mut params.tensors_mut()[pi], &d);
        }
    }
    let k = used.max(1) as f64;
    Ok((
        EpochRecord {
            epoch,
            loss: loss_sum / k,
            am: sum.am / k,
            lm: sum.lm / k,
            pos: sum.pos / k,
            typ: sum.typ / k,
            ga: sum.ga / k,
            val_f1: None,
            val_per: None,
            skipped,
        },
        used,
    ))
}

/// Ordering key for model selection: higher F1, then lower PER.
fn selection_key(r: &EpochRecord) -> (f64, f64) {
    (r.val_f1.unwrap_or(f64::NEG_INFINITY), -r.val_per.unwrap_or(f64::INFINITY))
}

/// Trains `stage` from `model` (or from `dir/last.ckpt` when `resume` is set
/// and it exists) up to `opts.train.epochs_for(stage)` epochs.
pub fn train_stage(
    stage: Stage,
    mut model: Model,
    train: &[Example],
    val: &[Example],
    opts: &TrainOptions,
    dir: &Path,
    resume: bool,
) -> Result<TrainSummary> {
    opts.train.validate()?;
    opts.weights.validate()?;
    opts.augment.validate()?;
    opts.beam.validate()?;
    if train.is_empty() {
        return Err(invalid("training split is empty"));
    }
    fs::create_dir_all(dir)?;
    let mut adam = Adam::new(&opts.train);
    let mut state = TrainState {
        stage,
        epoch: 0,
        adam_step: 0,
        best_epoch: None,
        history: Vec::new(),
    };
    let last = last_path(dir);
    if resume && last.exists() {
        let ck = Checkpoint::load(&last)?;
        let meta = checkpoint_training_meta(&ck)
            .ok_or_else(|| Error::Format(format!("{} carries no training state", last.display())))?;
        let st: TrainState = serde_json::from_value(meta)?;
        if st.stage != stage {
            return Err(invalid(format!("{} belongs to stage {}, not {stage}", last.display(), st.stage)));
        }
        model = Model::from_checkpoint(&ck)?;
        adam.restore(st.adam_step, &ck);
        log::info!("resuming {stage} after epoch {}", st.epoch);
        state = st;
    }
    for epoch in state.epoch + 1..=opts.train.epochs_for(stage) {
        let started = Instant::now();
        let (mut rec, used) = run_epoch(stage, &mut model, &mut adam, train, opts, epoch)?;
        if used == 0 {
            return Err(invalid(format!("epoch {epoch}: no usable training utterances")));
        }
        if !val.is_empty() {
            let rep = if stage == Stage::IfFinetune {
                let beam = BeamConfig {
                    lambda: opts.weights.lambda,
                    ..opts.beam.clone()
                };
                evaluate_joint(&model, val, &beam)?
            } else {
                evaluate_greedy(&model, val)?
            };
            rec.val_f1 = rep.report.f1;
            rec.val_per = rep.report.per;
        }
        log::info!(
            "{stage} epoch {epoch}: loss {:.5} val F1 {} PER {} ({:.1}s)",
            rec.loss,
            opt_cell(rec.val_f1),
            opt_cell(rec.val_per),
            started.elapsed().as_secs_f64()
        );
        let improved = match state.best_epoch {
            None => true,
            Some(b) => selection_key(&rec) > selection_key(&state.history[b - 1]),
        };
        state.history.push(rec);
        state.epoch = epoch;
        state.adam_step = adam.steps();
        if improved {
            state.best_epoch = Some(epoch);
            model.to_checkpoint(Some(serde_json::json!({"stage": stage, "epoch": epoch})), Vec::new())?
                .save(&best_path(dir))?;
        }
        model
            .to_checkpoint(Some(serde_json::to_value(&state)?), adam.state_tensors())?
            .save(&last)?;
        fs::write(log_path(dir), history_csv(&state.history))?;
    }
    let best_epoch = state
        .best_epoch
        .ok_or_else(|| invalid("no epoch was trained (already complete?)"))?;
    Ok(TrainSummary {
        history: state.history,
        best_epoch,
        best_path: best_path(dir),
    })
}
