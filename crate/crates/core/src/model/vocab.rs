use std::collections::{BTreeMap, HashMap};
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::motion::toy;

/// Padding id; padded positions are masked out of attention.
pub const PAD: usize = 0;
/// The unconditional ("null") token used for classifier-free guidance.
pub const NULL: usize = 1;

const SPECIALS: [&str; 2] = ["<pad>", "<null>"];
const GLUE_WORDS: [&str; 3] = ["in", "style", "and"];

/// Closed word vocabulary followed by reserved style-token slots.
///
/// Ids: `0` pad, `1` null, then the words, then `style_slots` slots that
/// style tokens (written `<name>` in prompts) are bound to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
    style_slots: usize,
}

impl Vocab {
    pub fn new<S: AsRef<str>>(words: &[S], style_slots: usize) -> Result<Self> {
        let mut v = Vocab {
            words: Vec::new(),
            index: HashMap::new(),
            style_slots,
        };
        for w in SPECIALS.iter().copied().chain(words.iter().map(AsRef::as_ref)) {
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary word {w:?}")));
            }
            if v.index.insert(w.to_string(), v.words.len()).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary word {w:?}")));
            }
            v.words.push(w.to_string());
        }
        Ok(v)
    }

    /// Every toy prompt word plus the style glue words, with 8 style slots.
    pub fn toy() -> Self {
        let mut words = toy::prompt_words();
        words.extend(GLUE_WORDS);
        Vocab::new(&words, 8).expect("static word list")
    }

    /// Total ids including specials and style slots.
    pub fn len(&self) -> usize {
        self.words.len() + self.style_slots
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn style_slots(&self) -> Range<usize> {
        self.words.len()..self.len()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Ids of plain words (no specials, no slots).
    pub fn word_ids(&self) -> Range<usize> {
        SPECIALS.len()..self.words.len()
    }

    /// Splits on whitespace; `<name>` tokens are resolved through `styles`.
    pub fn tokenize(&self, text: &str, styles: &dyn Fn(&str) -> Option<usize>) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        let mut n_style = 0;
        for w in text.split_whitespace() {
            let id = match w.strip_prefix('<').and_then(|r| r.strip_suffix('>')) {
                Some(name) if !SPECIALS.contains(&w) => {
                    n_style += 1;
                    styles(name).ok_or_else(|| Error::UnknownToken(w.to_string()))?
                }
                _ => self.id(w).ok_or_else(|| Error::UnknownToken(w.to_string()))?,
            };
            out.push(id);
        }
        if n_style > self.style_slots {
            return Err(Error::Invalid(format!(
                "prompt uses {n_style} style tokens, at most {} allowed",
                self.style_slots
            )));
        }
        Ok(out)
    }

    /// Tokenizes a prompt that may not mention style tokens.
    pub fn tokenize_plain(&self, text: &str) -> Result<Vec<usize>> {
        self.tokenize(text, &|_| None)
    }

    fn to_map(&self) -> BTreeMap<String, usize> {
        let mut m: BTreeMap<String, usize> = self.index.clone().into_iter().collect();
        for (k, id) in self.style_slots().enumerate() {
            m.insert(format!("<slot{k}>"), id);
        }
        m
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_map())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: BTreeMap<String, usize> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let mut by_id: Vec<(usize, String)> = m.into_iter().map(|(w, i)| (i, w)).collect();
        by_id.sort();
        if by_id.iter().enumerate().any(|(i, (id, _))| i != *id) {
            return Err(Error::format(path, "vocabulary ids are not contiguous from 0"));
        }
        if by_id.len() < 2 || by_id[0].1 != SPECIALS[0] || by_id[1].1 != SPECIALS[1] {
            return Err(Error::format(path, "vocabulary must start with <pad> and <null>"));
        }
        let slots = by_id.iter().rev().take_while(|(_, w)| w.starts_with("<slot")).count();
        let words: Vec<String> = by_id[2..by_id.len() - slots].iter().map(|(_, w)| w.clone()).collect();
        Vocab::new(&words, slots).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizes_toy_prompts() {
        let v = Vocab::toy();
        let ids = v.tokenize_plain("a person is walking forward").unwrap();
        assert_eq!(ids.len(), 5);
        assert!(ids.iter().all(|i| v.word_ids().contains(i)));
        assert!(matches!(v.tokenize_plain("a person is dancing"), Err(Error::UnknownToken(_))));
    }

    #[test]
    fn style_suffix_is_three_tokens() {
        let v = Vocab::toy();
        let slot = v.style_slots().start;
        let lookup = |n: &str| (n == "Chicken").then_some(slot);
        let base = v.tokenize("a person is walking", &lookup).unwrap();
        let styled = v.tokenize("a person is walking in <Chicken> style", &lookup).unwrap();
        assert_eq!(styled.len(), base.len() + 3);
        assert_eq!(styled[base.len() + 1], slot);
        assert!(v.tokenize("in <Duck> style", &lookup).is_err());
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.json");
        let v = Vocab::toy();
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
    }

    #[test]
    fn rejects_duplicates() {
        assert!(Vocab::new(&["a", "a"], 0).is_err());
        assert!(Vocab::new(&["<null>"], 0).is_err());
    }
}
