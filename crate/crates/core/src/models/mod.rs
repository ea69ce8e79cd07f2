//! Desk-scale encoder, decoder and training-time teacher.

pub mod checkpoint;
pub mod decoder;
pub mod encoder;
pub mod layers;
pub mod params;
pub mod rope;
pub mod teacher;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::Vocab;
pub use checkpoint::Checkpoint;
pub use decoder::{Decoder, DecoderConfig, DecoderNodes, DecoderState, MemoryCache};
pub use encoder::{Encoded, Encoder, EncoderConfig, EncoderNodes};
pub use params::{Bound, Params};
pub use rope::{rope, rope_node};
pub use teacher::{Teacher, TeacherConfig, TeacherNodes};

/// Which alignment objective trained the encoder's frame classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AmKind {
    Ctc,
    Ottc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelMeta {
    vocab: Vocab,
    am_kind: AmKind,
    encoder: EncoderConfig,
    decoder: Option<DecoderConfig>,
    teacher: Option<TeacherConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    training: Option<serde_json::Value>,
}

/// Full training-time model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub vocab: Vocab,
    pub am_kind: AmKind,
    pub encoder: Encoder,
    pub decoder: Option<Decoder>,
    pub teacher: Option<Teacher>,
}

/// Encoder plus optional decoder; never holds teacher parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceModel {
    pub vocab: Vocab,
    pub am_kind: AmKind,
    pub encoder: Encoder,
    pub decoder: Option<Decoder>,
}

/// Drops the teacher; decoding never sees canonical input afterwards.
pub fn detach_teacher(model: Model) -> InferenceModel {
    InferenceModel {
        vocab: model.vocab,
        am_kind: model.am_kind,
        encoder: model.encoder,
        decoder: model.decoder,
    }
}

fn collect_tensors(parts: &[Option<&Params>]) -> Vec<(String, mddkit_tensor::Tensor)> {
    parts
        .iter()
        .flatten()
        .flat_map(|p| p.named().map(|(n, t)| (n.to_string(), t.clone())))
        .collect()
}

impl Model {
    pub fn params(&self) -> Vec<&Params> {
        let mut v = vec![self.encoder.params()];
        v.extend(self.decoder.as_ref().map(Decoder::params));
        v.extend(self.teacher.as_ref().map(Teacher::params));
        v
    }

    fn meta(&self, training: Option<serde_json::Value>) -> ModelMeta {
        ModelMeta {
            vocab: self.vocab.clone(),
            am_kind: self.am_kind,
            encoder: self.encoder.config().clone(),
            decoder: self.decoder.as_ref().map(|d| d.config().clone()),
            teacher: self.teacher.as_ref().map(|t| t.config().clone()),
            training,
        }
    }

    /// Checkpoint with optional extra tensors (optimizer state) and
    /// training metadata.
    pub fn to_checkpoint(
        &self,
        training: Option<serde_json::Value>,
        extra: Vec<(String, mddkit_tensor::Tensor)>,
    ) -> Result<Checkpoint> {
        let mut tensors = collect_tensors(&[
            Some(self.encoder.params()),
            self.decoder.as_ref().map(Decoder::params),
            self.teacher.as_ref().map(Teacher::params),
        ]);
        tensors.extend(extra);
        Ok(Checkpoint {
            meta: serde_json::to_value(self.meta(training))?,
            tensors,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_value(ck.meta.clone())?;
        let mut encoder = Encoder::new(meta.encoder, 0)?;
        encoder.params_mut().load_from(|n| ck.get(n))?;
        let decoder = match meta.decoder {
            Some(cfg) => {
                let mut d = Decoder::new(cfg, 0)?;
                d.params_mut().load_from(|n| ck.get(n))?;
                Some(d)
            }
            None => None,
        };
        let teacher = match meta.teacher {
            Some(cfg) => {
                let mut t = Teacher::new(cfg, 0)?;
                t.params_mut().load_from(|n| ck.get(n))?;
                Some(t)
            }
            None => None,
        };
        Ok(Self {
            vocab: meta.vocab,
            am_kind: meta.am_kind,
            encoder,
            decoder,
            teacher,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint(None, Vec::new())?.save(path)
    }

    /// Teacher outputs for one utterance, with the decoder teacher-forced on
    /// `<bos> + perceived`. `None` without a teacher.
    pub fn teacher_readout(
        &self,
        features: &mddkit_tensor::Tensor,
        canonical: &[usize],
        perceived: &[usize],
    ) -> Result<Option<TeacherReadout>> {
        let (Some(teacher), Some(decoder)) = (&self.teacher, &self.decoder) else {
            return Ok(None);
        };
        let mut g = mddkit_tensor::Graph::new();
        let pe = self.encoder.params().bind(&mut g, false);
        let pd = decoder.params().bind(&mut g, false);
        let pt = teacher.params().bind(&mut g, false);
        let x = g.constant(features.clone());
        let enc = self.encoder.forward(&mut g, &pe, x)?;
        let mut tokens = vec![self.vocab.bos()];
        tokens.extend_from_slice(perceived);
        let dec = decoder.forward(&mut g, &pd, enc.hidden, &tokens)?;
        let t = teacher.forward(&mut g, &pt, enc.hidden, dec.hidden, canonical)?;
        Ok(Some(TeacherReadout {
            pos_probs: g.value(t.pos_probs).data().to_vec(),
            type_probs: g.value(t.type_probs).clone(),
            attn_enc: g.value(t.attn_enc).clone(),
            attn_dec: g.value(t.attn_dec).clone(),
        }))
    }
}

/// Plain-value teacher outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherReadout {
    pub pos_probs: Vec<f64>,
    /// `m x 4`.
    pub type_probs: mddkit_tensor::Tensor,
    /// `m x n'`.
    pub attn_enc: mddkit_tensor::Tensor,
    /// `m x L`.
    pub attn_dec: mddkit_tensor::Tensor,
}

/// Training metadata stored alongside the weights, if any.
pub fn checkpoint_training_meta(ck: &Checkpoint) -> Option<serde_json::Value> {
    ck.meta.get("training").cloned()
}

impl InferenceModel {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Model {
            vocab: self.vocab.clone(),
            am_kind: self.am_kind,
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            teacher: None,
        }
        .to_checkpoint(None, Vec::new())
    }

    /// Loads any model checkpoint; teacher weights, if present, are dropped.
    pub fn load(path: &Path) -> Result<Self> {
        Ok(detach_teacher(Model::load(path)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn require_decoder(&self) -> Result<&Decoder> {
        self.decoder
            .as_ref()
            .ok_or_else(|| Error::Missing("this checkpoint has no decoder; joint decoding needs one".into()))
    }
}
