//! Phoneme inventory with the special tokens shared by every model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// ARPAbet symbols used to name synthetic phonemes.
pub const ARPABET: [&str; 39] = [
    "aa", "ae", "ah", "ao", "aw", "ay", "b", "ch", "d", "dh", "eh", "er", "ey", "f", "g", "hh",
    "ih", "iy", "jh", "k", "l", "m", "n", "ng", "ow", "oy", "p", "r", "s", "sh", "t", "th", "uh",
    "uw", "v", "w", "y", "z", "zh",
];

pub const BLANK: &str = "<blank>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SIL: &str = "<sil>";

/// Phonemes occupy ids `0..num_phonemes`; the four specials follow in the
/// order blank, bos, eos, sil.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    phonemes: Vec<String>,
}

impl Vocab {
    pub fn new(phonemes: Vec<String>) -> Result<Self> {
        if phonemes.is_empty() {
            return Err(Error::Invalid("vocabulary needs at least one phoneme".into()));
        }
        for (i, p) in phonemes.iter().enumerate() {
            if p.is_empty() || p.contains(char::is_whitespace) || p.contains([':', '+']) {
                return Err(Error::Invalid(format!("bad phoneme symbol {p:?}")));
            }
            if p.starts_with('<') || phonemes[..i].contains(p) {
                return Err(Error::Invalid(format!("reserved or duplicate symbol {p:?}")));
            }
        }
        Ok(Self { phonemes })
    }

    /// The first `k` ARPAbet symbols.
    pub fn arpabet(k: usize) -> Result<Self> {
        if k == 0 || k > ARPABET.len() {
            return Err(Error::Invalid(format!(
                "phoneme count must be in 1..={}, got {k}",
                ARPABET.len()
            )));
        }
        Self::new(ARPABET[..k].iter().map(|s| s.to_string()).collect())
    }

    pub fn num_phonemes(&self) -> usize {
        self.phonemes.len()
    }

    /// Total number of output classes, specials included.
    pub fn size(&self) -> usize {
        self.phonemes.len() + 4
    }

    pub fn blank(&self) -> usize {
        self.phonemes.len()
    }

    pub fn bos(&self) -> usize {
        self.phonemes.len() + 1
    }

    pub fn eos(&self) -> usize {
        self.phonemes.len() + 2
    }

    pub fn sil(&self) -> usize {
        self.phonemes.len() + 3
    }

    pub fn is_phoneme(&self, id: usize) -> bool {
        id < self.phonemes.len()
    }

    pub fn symbol(&self, id: usize) -> &str {
        let p = self.phonemes.len();
        match id {
            i if i < p => &self.phonemes[i],
            i if i == p => BLANK,
            i if i == p + 1 => BOS,
            i if i == p + 2 => EOS,
            i if i == p + 3 => SIL,
            _ => "<unk>",
        }
    }

    pub fn id(&self, symbol: &str) -> Result<usize> {
        if let Some(i) = self.phonemes.iter().position(|p| p == symbol) {
            return Ok(i);
        }
        match symbol {
            BLANK => Ok(self.blank()),
            BOS => Ok(self.bos()),
            EOS => Ok(self.eos()),
            SIL => Ok(self.sil()),
            _ => Err(Error::UnknownSymbol(symbol.to_string())),
        }
    }

    /// Parses a space-separated phoneme string. Only real phonemes are accepted.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|s| {
                let id = self.id(s)?;
                if self.is_phoneme(id) {
                    Ok(id)
                } else {
                    Err(Error::Invalid(format!("special token {s} in phoneme string")))
                }
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.symbol(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn phonemes(&self) -> &[String] {
        &self.phonemes
    }
}

/// Special token ids for an output layer of `size` classes laid out as
/// [`Vocab`] does.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Specials {
    pub blank: usize,
    pub bos: usize,
    pub eos: usize,
    pub sil: usize,
}

impl Specials {
    pub fn for_size(size: usize) -> Self {
        assert!(size >= 5, "output layer too small for the special tokens");
        Self {
            blank: size - 4,
            bos: size - 3,
            eos: size - 2,
            sil: size - 1,
        }
    }
}

impl Vocab {
    pub fn specials(&self) -> Specials {
        Specials::for_size(self.size())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_follow_phonemes() {
        let v = Vocab::arpabet(12).unwrap();
        assert_eq!(v.size(), 16);
        assert_eq!(v.symbol(v.blank()), BLANK);
        assert_eq!(v.id(EOS).unwrap(), v.eos());
        assert_eq!(v.symbol(v.sil()), SIL);
    }

    #[test]
    fn encode_roundtrip_and_rejections() {
        let v = Vocab::arpabet(12).unwrap();
        let ids = v.encode("aa b  ch").unwrap();
        assert_eq!(v.decode(&ids), "aa b ch");
        assert!(v.encode("aa zz").is_err());
        assert!(v.encode("aa <eos>").is_err());
        assert!(v.encode("").unwrap().is_empty());
    }

    #[test]
    fn duplicate_symbols_rejected() {
        assert!(Vocab::new(vec!["a".into(), "a".into()]).is_err());
        assert!(Vocab::new(vec!["a:b".into()]).is_err());
    }
}
