//! Whitespace vocabulary with reserved special tokens and one reserved id
//! per source.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::CorpusRegistry;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
/// Delimiter between a source prompt and the body.
pub const SEP: u32 = 4;
pub const FIRST_SOURCE: u32 = 5;

const RESERVED: [&str; 5] = ["[PAD]", "[MASK]", "[BOS]", "[EOS]", "[SEP]"];
const UNK_TEXT: &str = "[UNK]";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabOptions {
    /// Cap on base tokens, excluding `[UNK]`.
    pub max_base_tokens: Option<usize>,
    pub min_frequency: usize,
    /// Include the lowercased display-name words as base tokens, so names
    /// can also be spelled out through ordinary tokens.
    pub name_words: bool,
    /// Words always present as base tokens (label verbalizers and such).
    pub extra_words: Vec<String>,
}

impl Default for VocabOptions {
    fn default() -> Self {
        VocabOptions {
            max_base_tokens: None,
            min_frequency: 1,
            name_words: false,
            extra_words: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    source_names: Vec<String>,
    base: HashMap<String, u32>,
}

fn normalize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

impl Vocabulary {
    /// Builds a vocabulary over every document of `registry`.
    ///
    /// Base tokens are ordered by descending frequency, ties broken
    /// lexicographically.
    pub fn build(registry: &CorpusRegistry, opts: &VocabOptions) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for (_, doc) in registry.documents() {
            for w in normalize(doc) {
                *counts.entry(w).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= opts.min_frequency.max(1))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        if let Some(cap) = opts.max_base_tokens {
            ranked.truncate(cap);
        }
        let mut words: Vec<String> = ranked.into_iter().map(|(w, _)| w).collect();
        let mut forced: Vec<String> = opts.extra_words.iter().flat_map(|w| normalize(w)).collect();
        if opts.name_words {
            for n in registry.display_names() {
                forced.extend(normalize(&n));
            }
        }
        for w in forced {
            if !words.contains(&w) {
                words.push(w);
            }
        }
        Self::from_parts(&registry.display_names(), words)
    }

    /// Reserved tokens, then one token per source, `[UNK]`, and `words`.
    pub fn from_parts<S: AsRef<str>>(source_names: &[S], words: Vec<String>) -> Result<Self> {
        let source_names: Vec<String> = source_names.iter().map(|s| s.as_ref().to_string()).collect();
        if source_names.is_empty() {
            return Err(Error::Data("vocabulary needs at least one source".into()));
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(source_names.iter().map(|n| format!("[SRC:{n}]")));
        tokens.push(UNK_TEXT.to_string());
        let mut base = HashMap::with_capacity(words.len());
        for w in words {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid base token {w:?}")));
            }
            let id = tokens.len() as u32;
            if base.insert(w.clone(), id).is_some() {
                return Err(Error::Data(format!("duplicate base token {w:?}")));
            }
            tokens.push(w);
        }
        Ok(Vocabulary {
            tokens,
            source_names,
            base,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_sources(&self) -> usize {
        self.source_names.len()
    }

    pub fn source_names(&self) -> &[String] {
        &self.source_names
    }

    /// Token id of source `k` (registration order).
    pub fn source_id(&self, k: usize) -> u32 {
        assert!(k < self.num_sources(), "source index {k} out of range");
        FIRST_SOURCE + k as u32
    }

    /// Source index of `id`, if it is a source token.
    pub fn source_of(&self, id: u32) -> Option<usize> {
        let k = id.checked_sub(FIRST_SOURCE)? as usize;
        (k < self.num_sources()).then_some(k)
    }

    pub fn unk(&self) -> u32 {
        FIRST_SOURCE + self.num_sources() as u32
    }

    /// First id after `[UNK]`; base tokens occupy `first_base()..len()`.
    pub fn first_base(&self) -> u32 {
        self.unk() + 1
    }

    pub fn is_reserved(&self, id: u32) -> bool {
        id <= self.unk()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.base.get(&word.to_lowercase()).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Lowercased whitespace tokens; unseen forms map to `[UNK]`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        normalize(text)
            .map(|w| self.base.get(&w).copied().unwrap_or_else(|| self.unk()))
            .collect()
    }

    /// Number of whitespace tokens of `text` that encode to `[UNK]`.
    pub fn count_unknown(&self, text: &str) -> usize {
        normalize(text).filter(|w| !self.base.contains_key(w)).count()
    }

    /// Space-joined surface forms; source tokens render as `[<name>]`.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            match self.source_of(id) {
                Some(k) => {
                    let _ = write!(out, "[{}]", self.source_names[k]);
                }
                None => out.push_str(self.token(id).ok_or_else(|| {
                    Error::Data(format!("token id {id} out of range for vocabulary of {}", self.len()))
                })?),
            }
        }
        Ok(out)
    }

    /// Base-token ids spelling source `k`'s display name.
    pub fn name_tokens(&self, k: usize) -> Vec<u32> {
        self.encode(&self.source_names[k])
    }

    /// One token per line; line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        let bad = |line: usize, message: String| Error::Parse {
            path: "vocabulary".into(),
            line,
            message,
        };
        for (i, r) in RESERVED.iter().enumerate() {
            if lines.get(i) != Some(r) {
                return Err(bad(i + 1, format!("expected reserved token {r}")));
            }
        }
        let mut names = Vec::new();
        let mut i = RESERVED.len();
        while let Some(n) = lines.get(i).and_then(|l| l.strip_prefix("[SRC:")).and_then(|l| l.strip_suffix(']')) {
            names.push(n.to_string());
            i += 1;
        }
        if lines.get(i) != Some(&UNK_TEXT) {
            return Err(bad(i + 1, "expected [UNK] after the source tokens".into()));
        }
        let words = lines[i + 1..].iter().map(|s| s.to_string()).collect();
        Self::from_parts(&names, words)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
