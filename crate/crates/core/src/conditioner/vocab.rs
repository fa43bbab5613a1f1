use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::toy_world::grammar::grammar_words;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
/// Reserved; the empty prompt is encoded as `BOS EOS PAD…`.
pub const EMPTY: u32 = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<empty>"];

/// Word-level vocabulary; line number in the vocabulary file is the id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

/// Token ids padded to a fixed length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokens {
    pub ids: Vec<u32>,
    /// Set when words had to be dropped to fit.
    pub truncated: bool,
}

impl Tokens {
    /// Positions that are not padding.
    pub fn mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&i| i != PAD).collect()
    }
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::invalid(format!("vocabulary must start with {SPECIALS:?}")));
            }
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("bad token {t:?} at line {i}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::invalid(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Special tokens followed by every caption-grammar word.
    pub fn grammar() -> Self {
        let tokens = SPECIALS
            .iter()
            .copied()
            .chain(grammar_words())
            .map(str::to_string)
            .collect();
        Self::from_tokens(tokens).expect("grammar vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Lowercase, split on whitespace, wrap in BOS/EOS and pad to `max_tokens`.
    pub fn tokenize(&self, text: &str, max_tokens: usize) -> Tokens {
        assert!(max_tokens >= 2, "max_tokens must leave room for BOS and EOS");
        let lower = text.to_lowercase();
        let words: Vec<u32> = lower.split_whitespace().map(|w| self.id(w)).collect();
        let keep = words.len().min(max_tokens - 2);
        let mut ids = Vec::with_capacity(max_tokens);
        ids.push(BOS);
        ids.extend_from_slice(&words[..keep]);
        ids.push(EOS);
        ids.resize(max_tokens, PAD);
        Tokens {
            ids,
            truncated: keep < words.len(),
        }
    }

    /// Words for every non-special id, space separated.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i as usize >= SPECIALS.len())
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect()).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_world::enumerate_captions;

    #[test]
    fn empty_prompt_encoding() {
        let v = Vocabulary::grammar();
        let t = v.tokenize("", 12);
        assert_eq!(t.ids[..2], [BOS, EOS]);
        assert!(t.ids[2..].iter().all(|&i| i == PAD));
        assert!(!t.truncated);
    }

    #[test]
    fn short_caption_has_five_real_ids() {
        let t = Vocabulary::grammar().tokenize("a red circle", 12);
        assert_eq!(t.ids.iter().filter(|&&i| i != PAD).count(), 5);
        assert!(!t.ids.contains(&UNK));
    }

    #[test]
    fn every_grammar_caption_roundtrips() {
        let v = Vocabulary::grammar();
        for c in enumerate_captions() {
            let s = c.to_string();
            let t = v.tokenize(&s, 12);
            assert!(!t.truncated);
            assert!(!t.ids.contains(&UNK), "{s}");
            assert_eq!(v.detokenize(&t.ids), s);
        }
    }

    #[test]
    fn unknown_words_and_truncation() {
        let v = Vocabulary::grammar();
        let t = v.tokenize("A Pink circle", 12);
        assert_eq!(t.ids[2], UNK);
        let long = "a red circle and a blue square and a green triangle";
        let t = v.tokenize(long, 12);
        assert!(t.truncated);
        assert_eq!(t.ids.len(), 12);
        assert_eq!(t.ids[11], EOS);
    }

    #[test]
    fn file_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let v = Vocabulary::grammar();
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
        fs::write(&p, "<pad>\n<bos>\n").unwrap();
        assert!(Vocabulary::load(&p).is_err());
    }
}
