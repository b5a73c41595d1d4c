//! Multi-source corpora: named sub-corpora, naming policies, file
//! ingestion, and a synthetic Markov-chain generator.

mod entropy;
mod load;
mod synthetic;

pub use entropy::{analytic_entropy_gap, EntropyGap, StationaryMode};
pub use load::{load_corpus, write_directory_corpus, CorpusFormat};
pub use synthetic::{
    generate_split, generate_synthetic, parse_token_ids, token_name, SyntheticSpec,
};

use std::fmt;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// How sources are named in their prompts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NamingPolicy {
    /// Keep names verbatim, or replace them by the supplied abbreviations
    /// (one per source, in registration order).
    Abbreviation(Vec<String>),
    /// `A`, `B`, `C`, … in registration order.
    Alphabet,
    /// Source `i` is shown as the name of source `perm[i]`. The permutation
    /// must have no fixed point; empty means "shift every name by one".
    Misplaced(Vec<usize>),
}

impl NamingPolicy {
    pub fn abbreviation() -> Self {
        NamingPolicy::Abbreviation(Vec::new())
    }

    pub fn misplaced() -> Self {
        NamingPolicy::Misplaced(Vec::new())
    }

    /// Display names for `names` under this policy.
    pub fn apply(&self, names: &[String]) -> Result<Vec<String>> {
        let m = names.len();
        match self {
            NamingPolicy::Abbreviation(abbr) if abbr.is_empty() => Ok(names.to_vec()),
            NamingPolicy::Abbreviation(abbr) => {
                if abbr.len() != m {
                    return Err(Error::Data(format!(
                        "{} abbreviations supplied for {m} sources",
                        abbr.len()
                    )));
                }
                Ok(abbr.clone())
            }
            NamingPolicy::Alphabet => Ok((0..m).map(alphabet_name).collect()),
            NamingPolicy::Misplaced(perm) => {
                if m < 2 {
                    return Err(Error::Data(
                        "misplaced naming needs at least two sources (no derangement of one)"
                            .into(),
                    ));
                }
                let perm = if perm.is_empty() {
                    (0..m).map(|i| (i + 1) % m).collect()
                } else {
                    perm.clone()
                };
                let mut seen = vec![false; m];
                if perm.len() != m || perm.iter().any(|&p| p >= m || std::mem::replace(&mut seen[p], true)) {
                    return Err(Error::Data(format!(
                        "misplaced permutation {perm:?} is not a permutation of {m} sources"
                    )));
                }
                if let Some(i) = (0..m).find(|&i| perm[i] == i) {
                    return Err(Error::Data(format!(
                        "misplaced permutation keeps source {i} on its own name"
                    )));
                }
                Ok(perm.iter().map(|&p| names[p].clone()).collect())
            }
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            NamingPolicy::Abbreviation(_) => "abbreviation",
            NamingPolicy::Alphabet => "alphabet",
            NamingPolicy::Misplaced(_) => "misplaced",
        }
    }

    /// Parses `abbreviation`, `abbreviation:A1,A2`, `alphabet`,
    /// `misplaced` or `misplaced:1,0`.
    pub fn parse(s: &str) -> Result<Self> {
        let (kind, args) = match s.split_once(':') {
            Some((k, a)) => (k.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        let list = |a: Option<&str>| -> Vec<String> {
            a.map(|a| a.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect())
                .unwrap_or_default()
        };
        match kind {
            "abbreviation" => Ok(NamingPolicy::Abbreviation(list(args))),
            "alphabet" if args.is_none() => Ok(NamingPolicy::Alphabet),
            "misplaced" => {
                let perm = list(args)
                    .iter()
                    .map(|x| x.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Data(format!("bad misplaced permutation: {e}")))?;
                Ok(NamingPolicy::Misplaced(perm))
            }
            _ => Err(Error::Data(format!(
                "unknown naming policy {s:?} (expected abbreviation, alphabet or misplaced)"
            ))),
        }
    }
}

impl fmt::Display for NamingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NamingPolicy::Abbreviation(a) if a.is_empty() => write!(f, "abbreviation"),
            NamingPolicy::Abbreviation(a) => write!(f, "abbreviation:{}", a.join(",")),
            NamingPolicy::Alphabet => write!(f, "alphabet"),
            NamingPolicy::Misplaced(p) if p.is_empty() => write!(f, "misplaced"),
            NamingPolicy::Misplaced(p) => {
                let s: Vec<String> = p.iter().map(|x| x.to_string()).collect();
                write!(f, "misplaced:{}", s.join(","))
            }
        }
    }
}

/// `A`..`Z`, then `AA`, `AB`, …
fn alphabet_name(mut i: usize) -> String {
    let mut out = Vec::new();
    loop {
        out.push(b'A' + (i % 26) as u8);
        if i < 26 {
            break;
        }
        i = i / 26 - 1;
    }
    out.reverse();
    String::from_utf8(out).unwrap()
}

/// One named sub-corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceCorpus {
    /// Name the source was registered under.
    pub name: String,
    /// Name shown in prompts after the naming policy.
    pub display_name: String,
    pub documents: Vec<String>,
}

/// The union of named source sub-corpora.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusRegistry {
    sources: Vec<SourceCorpus>,
    policy: NamingPolicy,
}

impl CorpusRegistry {
    /// Registers sources (with no documents yet) under a naming policy.
    pub fn register<S: AsRef<str>>(names: &[S], policy: NamingPolicy) -> Result<Self> {
        let names: Vec<String> = names.iter().map(|s| s.as_ref().to_string()).collect();
        if names.is_empty() {
            return Err(Error::Data("no sources found".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.trim().is_empty() || n.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("source name {n:?} must be a non-empty word")));
            }
            if names[..i].contains(n) {
                return Err(Error::Data(format!("duplicate source name {n:?}")));
            }
        }
        let display = policy.apply(&names)?;
        for (i, n) in display.iter().enumerate() {
            if n.trim().is_empty() || display[..i].contains(n) {
                return Err(Error::Data(format!("display name {n:?} is empty or repeated")));
            }
        }
        let sources = names
            .into_iter()
            .zip(display)
            .map(|(name, display_name)| SourceCorpus {
                name,
                display_name,
                documents: Vec::new(),
            })
            .collect();
        Ok(CorpusRegistry { sources, policy })
    }

    /// Same documents under a different naming policy.
    pub fn with_policy(&self, policy: NamingPolicy) -> Result<Self> {
        let names: Vec<&str> = self.sources.iter().map(|s| s.name.as_str()).collect();
        let mut out = CorpusRegistry::register(&names, policy)?;
        for (dst, src) in out.sources.iter_mut().zip(&self.sources) {
            dst.documents = src.documents.clone();
        }
        Ok(out)
    }

    pub fn add_document(&mut self, source: usize, text: impl Into<String>) {
        self.sources[source].documents.push(text.into());
    }

    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn sources(&self) -> &[SourceCorpus] {
        &self.sources
    }

    pub fn source(&self, i: usize) -> &SourceCorpus {
        &self.sources[i]
    }

    pub fn policy(&self) -> &NamingPolicy {
        &self.policy
    }

    pub fn display_names(&self) -> Vec<String> {
        self.sources.iter().map(|s| s.display_name.clone()).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.sources.iter().map(|s| s.name.clone()).collect()
    }

    /// Index of the source whose registered or display name is `name`.
    pub fn find(&self, name: &str) -> Option<usize> {
        self.sources
            .iter()
            .position(|s| s.display_name == name)
            .or_else(|| self.sources.iter().position(|s| s.name == name))
    }

    pub fn document_counts(&self) -> Vec<usize> {
        self.sources.iter().map(|s| s.documents.len()).collect()
    }

    pub fn total_documents(&self) -> usize {
        self.sources.iter().map(|s| s.documents.len()).sum()
    }

    /// Every document tagged with its source index, in registry order.
    pub fn documents(&self) -> impl Iterator<Item = (usize, &str)> {
        self.sources
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.documents.iter().map(move |d| (i, d.as_str())))
    }

    /// Splits every source deterministically: each `every`-th document
    /// (1-based) goes to the second registry.
    pub fn split_every(&self, every: usize) -> (Self, Self) {
        let mut train = self.clone();
        let mut held = self.clone();
        for ((t, h), s) in train.sources.iter_mut().zip(held.sources.iter_mut()).zip(&self.sources) {
            t.documents.clear();
            h.documents.clear();
            for (j, d) in s.documents.iter().enumerate() {
                if every > 0 && (j + 1) % every == 0 {
                    h.documents.push(d.clone());
                } else {
                    t.documents.push(d.clone());
                }
            }
        }
        (train, held)
    }

    /// SHA-256 over each source's documents (length-prefixed), hex encoded.
    pub fn digest(&self) -> Vec<(String, String)> {
        self.sources
            .iter()
            .map(|s| {
                let mut h = Sha256::new();
                for d in &s.documents {
                    h.update((d.len() as u64).to_le_bytes());
                    h.update(d.as_bytes());
                }
                (s.name.clone(), hex::encode(h.finalize()))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn abbreviation_with_supplied_short_names() {
        let r = CorpusRegistry::register(
            &["Wikipedia", "BookCorpus"],
            NamingPolicy::Abbreviation(vec!["WIKI".into(), "BOOK".into()]),
        )
        .unwrap();
        assert_eq!(r.display_names(), vec!["WIKI", "BOOK"]);
        let verbatim = CorpusRegistry::register(&["News", "Wiki"], NamingPolicy::abbreviation()).unwrap();
        assert_eq!(verbatim.display_names(), vec!["News", "Wiki"]);
    }

    #[test]
    fn alphabet_letters() {
        let r = CorpusRegistry::register(&["News", "Comments", "Wiki"], NamingPolicy::Alphabet).unwrap();
        assert_eq!(r.display_names(), vec!["A", "B", "C"]);
        assert_eq!(alphabet_name(25), "Z");
        assert_eq!(alphabet_name(26), "AA");
        assert_eq!(alphabet_name(27), "AB");
    }

    #[test]
    fn misplaced_swap_and_derangement_checks() {
        let r = CorpusRegistry::register(&["News", "Comments"], NamingPolicy::misplaced()).unwrap();
        assert_eq!(r.display_names(), vec!["Comments", "News"]);
        assert!(CorpusRegistry::register(&["News"], NamingPolicy::misplaced()).is_err());
        assert!(
            CorpusRegistry::register(&["a", "b", "c"], NamingPolicy::Misplaced(vec![0, 2, 1])).is_err()
        );
        let r = CorpusRegistry::register(&["a", "b", "c"], NamingPolicy::Misplaced(vec![2, 0, 1])).unwrap();
        assert_eq!(r.display_names(), vec!["c", "a", "b"]);
    }

    #[test]
    fn duplicate_names_rejected() {
        assert!(CorpusRegistry::register(&["a", "a"], NamingPolicy::Alphabet).is_err());
    }

    #[test]
    fn policy_change_keeps_documents() {
        let mut r = CorpusRegistry::register(&["x", "y", "z"], NamingPolicy::abbreviation()).unwrap();
        r.add_document(0, "one two");
        r.add_document(2, "three");
        for p in [NamingPolicy::Alphabet, NamingPolicy::misplaced()] {
            let q = r.with_policy(p).unwrap();
            assert_eq!(q.document_counts(), r.document_counts());
            let a: Vec<_> = q.documents().collect();
            let b: Vec<_> = r.documents().collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn policy_text_roundtrip() {
        for p in [
            NamingPolicy::abbreviation(),
            NamingPolicy::Abbreviation(vec!["W".into(), "B".into()]),
            NamingPolicy::Alphabet,
            NamingPolicy::misplaced(),
            NamingPolicy::Misplaced(vec![1, 2, 0]),
        ] {
            assert_eq!(NamingPolicy::parse(&p.to_string()).unwrap(), p);
        }
    }

    #[test]
    fn digest_tracks_content() {
        let mut r = CorpusRegistry::register(&["a"], NamingPolicy::abbreviation()).unwrap();
        r.add_document(0, "hello");
        let d1 = r.digest();
        r.add_document(0, "world");
        assert_ne!(d1, r.digest());
        let mut q = CorpusRegistry::register(&["a"], NamingPolicy::Alphabet).unwrap();
        q.add_document(0, "hello");
        assert_eq!(q.digest(), d1);
    }
}
