//! Fixed word vocabulary shared by every environment, and the
//! lowercase/punctuation tokenizer over it.
//!
//! Ids are stable: LangRoom's fifteen tokens occupy ids `0..15`, so a model
//! trained on the full vocabulary can be fine-tuned on LangRoom (and vice
//! versa) without remapping.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::EnvError;

pub const PAD: usize = 0;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Number of LangRoom tokens at the front of [`DEFAULT_TOKENS`].
pub const LANGROOM_VOCAB: usize = 15;

pub const DEFAULT_TOKENS: &[&str] = &[
    PAD_TOKEN, "what", "color", "is", "the", "it", "?", "ball", "block", "key", "box", "red",
    "green", "blue", "yellow",
    // HomeGridLite templates and the grammar corpus
    ".", ",", "find", "get", "put", "move", "open", "in", "to", "i", "moved", "there", "will",
    "be", "later", "no", "turn", "around", "bottle", "fruit", "papers", "plates", "recycling",
    "trash", "compost", "bin", "living", "dining", "room", "kitchen", "pedal", "grasp", "lift",
    UNK_TOKEN,
];

const PUNCT: &[char] = &['?', '.', ',', '!'];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    unk: Option<usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_tokens(DEFAULT_TOKENS.iter().map(|s| s.to_string())).expect("default vocab")
    }
}

impl Vocab {
    /// Builds a vocabulary; token 0 must be `<pad>` and tokens must be
    /// unique.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self, EnvError> {
        let tokens: Vec<String> = tokens.into_iter().collect();
        if tokens.first().map(String::as_str) != Some(PAD_TOKEN) {
            return Err(EnvError::Config("vocab line 0 must be <pad>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(EnvError::Config(format!("bad vocab entry {t:?} on line {i}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(EnvError::Config(format!("duplicate vocab entry {t:?}")));
            }
        }
        let unk = index.get(UNK_TOKEN).copied();
        Ok(Self { tokens, index, unk })
    }

    /// One token per line, line number = id.
    pub fn parse(text: &str) -> Result<Self, EnvError> {
        Self::from_tokens(text.lines().map(|l| l.trim_end_matches('\r').to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, EnvError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EnvError::Config(format!("reading vocab {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            let _ = writeln!(s, "{t}");
        }
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of a token that is known to be in the vocabulary.
    pub fn expect_id(&self, token: &str) -> usize {
        self.id(token)
            .unwrap_or_else(|| panic!("token {token:?} missing from vocabulary"))
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn unk(&self) -> Option<usize> {
        self.unk
    }

    /// Lowercases, splits on whitespace and separates punctuation marks
    /// into their own tokens. Unknown words map to `<unk>` (or are
    /// dropped when the vocabulary has none).
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split_words(text)
            .into_iter()
            .filter_map(|w| self.id(&w).or(self.unk))
            .collect()
    }

    /// Joins tokens with spaces, attaching punctuation to the preceding
    /// word. Pads are skipped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == PAD {
                continue;
            }
            let tok = self.token(id).unwrap_or(UNK_TOKEN);
            let is_punct = tok.len() == 1 && tok.chars().all(|c| PUNCT.contains(&c));
            if !out.is_empty() && !is_punct {
                out.push(' ');
            }
            out.push_str(tok);
        }
        out
    }
}

fn split_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    for raw in text.split_whitespace() {
        let mut cur = String::new();
        for ch in raw.chars() {
            if PUNCT.contains(&ch) {
                if !cur.is_empty() {
                    words.push(std::mem::take(&mut cur));
                }
                words.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            words.push(cur);
        }
    }
    words
}
