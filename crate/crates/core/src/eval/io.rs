use std::collections::HashMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use super::TranscriptTriple;
use crate::error::{Error, Result};
use crate::tags::ErrorTags;
use crate::vocab::Vocab;

/// One line of scoring input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRecord {
    pub id: String,
    pub canonical: String,
    pub perceived: String,
    pub predicted: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<String>,
}

/// Maps phoneme strings to ids, growing as new symbols appear.
#[derive(Debug, Clone, Default)]
pub struct SymbolTable {
    ids: HashMap<String, usize>,
    symbols: Vec<String>,
}

impl SymbolTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts with the vocabulary's phonemes at their usual ids.
    pub fn from_vocab(vocab: &Vocab) -> Self {
        let mut t = Self::new();
        for p in vocab.phonemes() {
            t.intern(p);
        }
        t
    }

    pub fn intern(&mut self, symbol: &str) -> usize {
        if let Some(&i) = self.ids.get(symbol) {
            return i;
        }
        let i = self.symbols.len();
        self.ids.insert(symbol.to_string(), i);
        self.symbols.push(symbol.to_string());
        i
    }

    pub fn encode(&mut self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|s| self.intern(s)).collect()
    }

    pub fn symbol(&self, id: usize) -> &str {
        &self.symbols[id]
    }
}

impl ScoreRecord {
    pub fn to_triple(&self, table: &mut SymbolTable) -> Result<TranscriptTriple> {
        let canonical = table.encode(&self.canonical);
        let perceived = table.encode(&self.perceived);
        let predicted = table.encode(&self.predicted);
        Ok(match &self.tags {
            Some(text) => {
                let tags = ErrorTags::parse(text, canonical.len(), |s| Ok(table.intern(s)))?;
                TranscriptTriple::with_tags(canonical, perceived, tags, predicted)
            }
            None => TranscriptTriple::new(canonical, perceived, predicted),
        })
    }
}

/// Parses JSON-lines scoring input. Blank lines are ignored; malformed lines
/// come back as `Err((line_number, reason))`.
pub fn read_score_records<R: BufRead>(
    reader: R,
    table: &mut SymbolTable,
) -> Result<Vec<std::result::Result<(String, TranscriptTriple), (usize, String)>>> {
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<ScoreRecord>(&line)
            .map_err(Error::from)
            .and_then(|r| Ok((r.id.clone(), r.to_triple(table)?)));
        out.push(parsed.map_err(|e| (k + 1, e.to_string())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_records_and_reports_bad_lines() {
        let input = r#"{"id":"u1","canonical":"s p iy k t","perceived":"s b iy g d","predicted":"s p ih g th"}

{"id":"u2","canonical":"a","perceived":"a"}
{"id":"u3","canonical":"a b","perceived":"a","predicted":"a","tags":"C D"}
"#;
        let mut t = SymbolTable::new();
        let recs = read_score_records(input.as_bytes(), &mut t).unwrap();
        assert_eq!(recs.len(), 3);
        assert!(recs[0].is_ok());
        assert_eq!(recs[1].as_ref().unwrap_err().0, 3);
        let (_, triple) = recs[2].as_ref().unwrap();
        assert!(triple.validate().is_ok());
    }
}
