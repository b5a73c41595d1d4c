//! Synthetic multi-source corpora: each source is a first-order Markov
//! chain over a shared token inventory `w0 … w{V-1}`.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use super::{CorpusRegistry, NamingPolicy};
use crate::error::{Error, Result};

/// Surface form of generator token `i`.
pub fn token_name(i: usize) -> String {
    format!("w{i}")
}

/// Inverse of [`token_name`] over a whitespace-separated document.
pub fn parse_token_ids(doc: &str) -> Result<Vec<usize>> {
    doc.split_whitespace()
        .map(|t| {
            t.strip_prefix('w')
                .and_then(|n| n.parse().ok())
                .ok_or_else(|| Error::Data(format!("{t:?} is not a generator token")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    /// One row-major `V×V` stochastic matrix per source.
    pub transitions: Vec<Vec<f64>>,
    /// One initial-state distribution per source.
    pub initial: Vec<Vec<f64>>,
    pub doc_len: usize,
    pub docs_per_source: usize,
    /// Extra documents per source drawn for a held-out split.
    pub heldout_per_source: usize,
    pub source_names: Vec<String>,
}

fn default_names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("source{i}")).collect()
}

fn dirichlet_row(rng: &mut ChaCha8Rng, support: &[usize], v: usize, concentration: f64) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    let mut row = vec![0.0; v];
    let mut total = 0.0;
    for &s in support {
        // Floor keeps every supported transition strictly positive.
        let g: f64 = gamma.sample(rng).max(1e-12);
        row[s] = g;
        total += g;
    }
    row.iter_mut().for_each(|x| *x /= total);
    row
}

impl SyntheticSpec {
    pub fn num_sources(&self) -> usize {
        self.transitions.len()
    }

    pub fn transition_row(&self, source: usize, state: usize) -> &[f64] {
        let v = self.vocab_size;
        &self.transitions[source][state * v..(state + 1) * v]
    }

    /// One source walking the deterministic cycle `w0 → w1 → … → w0`.
    pub fn cycle(vocab_size: usize, doc_len: usize, docs: usize) -> Self {
        let v = vocab_size;
        let mut t = vec![0.0; v * v];
        for i in 0..v {
            t[i * v + (i + 1) % v] = 1.0;
        }
        let mut init = vec![0.0; v];
        init[0] = 1.0;
        SyntheticSpec {
            vocab_size: v,
            transitions: vec![t],
            initial: vec![init],
            doc_len,
            docs_per_source: docs,
            heldout_per_source: 0,
            source_names: default_names(1),
        }
    }

    /// `k` sources over disjoint token blocks of `tokens_per_source` each.
    ///
    /// States outside a source's block jump uniformly into the block, so
    /// each chain keeps a single closed class.
    pub fn disjoint(
        k: usize,
        tokens_per_source: usize,
        doc_len: usize,
        docs: usize,
        concentration: f64,
        matrix_seed: u64,
    ) -> Self {
        let v = k * tokens_per_source;
        let mut rng = ChaCha8Rng::seed_from_u64(matrix_seed);
        let mut transitions = Vec::with_capacity(k);
        let mut initial = Vec::with_capacity(k);
        for src in 0..k {
            let block: Vec<usize> = (src * tokens_per_source..(src + 1) * tokens_per_source).collect();
            let mut t = vec![0.0; v * v];
            for s in 0..v {
                let row = if block.contains(&s) {
                    dirichlet_row(&mut rng, &block, v, concentration)
                } else {
                    let mut r = vec![0.0; v];
                    block.iter().for_each(|&b| r[b] = 1.0 / tokens_per_source as f64);
                    r
                };
                t[s * v..(s + 1) * v].copy_from_slice(&row);
            }
            let mut init = vec![0.0; v];
            block.iter().for_each(|&b| init[b] = 1.0 / tokens_per_source as f64);
            transitions.push(t);
            initial.push(init);
        }
        SyntheticSpec {
            vocab_size: v,
            transitions,
            initial,
            doc_len,
            docs_per_source: docs,
            heldout_per_source: 0,
            source_names: default_names(k),
        }
    }

    /// `k` sources sharing all `v` tokens, rows drawn from a symmetric
    /// Dirichlet; small concentrations make the sources more distinct.
    pub fn shared(
        k: usize,
        v: usize,
        doc_len: usize,
        docs: usize,
        concentration: f64,
        matrix_seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(matrix_seed);
        let all: Vec<usize> = (0..v).collect();
        let transitions = (0..k)
            .map(|_| {
                (0..v)
                    .flat_map(|_| dirichlet_row(&mut rng, &all, v, concentration))
                    .collect()
            })
            .collect();
        SyntheticSpec {
            vocab_size: v,
            transitions,
            initial: vec![vec![1.0 / v as f64; v]; k],
            doc_len,
            docs_per_source: docs,
            heldout_per_source: 0,
            source_names: default_names(k),
        }
    }

    pub fn with_names<S: AsRef<str>>(mut self, names: &[S]) -> Self {
        self.source_names = names.iter().map(|s| s.as_ref().to_string()).collect();
        self
    }

    pub fn with_heldout(mut self, per_source: usize) -> Self {
        self.heldout_per_source = per_source;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_sources();
        let v = self.vocab_size;
        if k == 0 || v == 0 || self.doc_len == 0 {
            return Err(Error::Data("synthetic spec needs K, V, L >= 1".into()));
        }
        if self.initial.len() != k || self.source_names.len() != k {
            return Err(Error::Data(format!(
                "expected {k} initial distributions and names, got {} and {}",
                self.initial.len(),
                self.source_names.len()
            )));
        }
        let check = |row: &[f64], what: String| -> Result<()> {
            if row.len() != v {
                return Err(Error::Data(format!("{what}: expected {v} entries, got {}", row.len())));
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::Data(format!("{what}: negative or non-finite probability")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::Data(format!("{what}: sums to {s}, not 1")));
            }
            Ok(())
        };
        for src in 0..k {
            if self.transitions[src].len() != v * v {
                return Err(Error::Data(format!(
                    "source {src} transition matrix has {} entries, expected {}",
                    self.transitions[src].len(),
                    v * v
                )));
            }
            for s in 0..v {
                check(self.transition_row(src, s), format!("source {src} transition row {s}"))?;
            }
            check(&self.initial[src], format!("source {src} initial distribution"))?;
        }
        Ok(())
    }

    /// Exact log-probability of a token sequence under source `k`.
    pub fn log_likelihood(&self, source: usize, tokens: &[usize]) -> f64 {
        let Some((&first, rest)) = tokens.split_first() else {
            return 0.0;
        };
        let mut ll = self.initial[source][first].ln();
        let mut prev = first;
        for &t in rest {
            ll += self.transition_row(source, prev)[t].ln();
            prev = t;
        }
        ll
    }

    /// Exact posterior over sources under a uniform source prior.
    pub fn posterior(&self, tokens: &[usize]) -> Vec<f64> {
        let lls: Vec<f64> = (0..self.num_sources()).map(|k| self.log_likelihood(k, tokens)).collect();
        let max = lls.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return vec![1.0 / lls.len() as f64; lls.len()];
        }
        let w: Vec<f64> = lls.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|x| x / z).collect()
    }

    fn sample_doc(&self, source: usize, rng: &mut ChaCha8Rng) -> String {
        let mut out = String::new();
        let mut state = sample_index(&self.initial[source], rng);
        for i in 0..self.doc_len {
            if i > 0 {
                state = sample_index(self.transition_row(source, state), rng);
                out.push(' ');
            }
            out.push_str(&token_name(state));
        }
        out
    }

    /// Parses the key-value spec format.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let perr = |line: usize, message: String| Error::Parse {
            path: origin.to_string(),
            line,
            message,
        };
        let mut kv: Vec<(usize, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| perr(i + 1, "expected `key = value`".into()))?;
            kv.push((i + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let find = |key: &str| kv.iter().find(|(_, k, _)| k == key);
        let num = |key: &str, default: Option<usize>| -> Result<usize> {
            match find(key) {
                Some((l, _, v)) => v.parse().map_err(|_| perr(*l, format!("{key}: not an integer: {v}"))),
                None => default.ok_or_else(|| perr(0, format!("missing key {key}"))),
            }
        };
        let float = |key: &str, default: f64| -> Result<f64> {
            match find(key) {
                Some((l, _, v)) => v.parse().map_err(|_| perr(*l, format!("{key}: not a number: {v}"))),
                None => Ok(default),
            }
        };
        const KNOWN: &[&str] = &[
            "preset",
            "sources",
            "vocab_size",
            "doc_len",
            "docs_per_source",
            "heldout_per_source",
            "names",
            "concentration",
            "matrix_seed",
            "tokens_per_source",
        ];
        for (l, k, _) in &kv {
            let indexed = k.starts_with("initial.") || k.starts_with("transition.");
            if !indexed && !KNOWN.contains(&k.as_str()) {
                return Err(perr(*l, format!("unknown key {k}")));
            }
        }
        let preset = find("preset").map(|(_, _, v)| v.as_str()).unwrap_or("explicit");
        let k = num("sources", None)?;
        let doc_len = num("doc_len", None)?;
        let docs = num("docs_per_source", None)?;
        let conc = float("concentration", 0.5)?;
        let mseed = num("matrix_seed", Some(0))? as u64;
        let mut spec = match preset {
            "shared" => SyntheticSpec::shared(k, num("vocab_size", None)?, doc_len, docs, conc, mseed),
            "disjoint" => {
                SyntheticSpec::disjoint(k, num("tokens_per_source", None)?, doc_len, docs, conc, mseed)
            }
            "cycle" => {
                if k != 1 {
                    return Err(perr(0, "cycle preset has exactly one source".into()));
                }
                SyntheticSpec::cycle(num("vocab_size", None)?, doc_len, docs)
            }
            "explicit" => {
                let v = num("vocab_size", None)?;
                let row = |key: String, len: usize| -> Result<Vec<f64>> {
                    let (l, _, val) = find(&key).ok_or_else(|| perr(0, format!("missing key {key}")))?;
                    let xs = val
                        .split_whitespace()
                        .map(|x| x.parse::<f64>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| perr(*l, format!("{key}: {e}")))?;
                    if xs.len() != len {
                        return Err(perr(*l, format!("{key}: expected {len} numbers, got {}", xs.len())));
                    }
                    Ok(xs)
                };
                let mut transitions = Vec::new();
                let mut initial = Vec::new();
                for src in 0..k {
                    transitions.push(row(format!("transition.{src}"), v * v)?);
                    initial.push(row(format!("initial.{src}"), v)?);
                }
                SyntheticSpec {
                    vocab_size: v,
                    transitions,
                    initial,
                    doc_len,
                    docs_per_source: docs,
                    heldout_per_source: 0,
                    source_names: default_names(k),
                }
            }
            other => return Err(perr(0, format!("unknown preset {other}"))),
        };
        spec.heldout_per_source = num("heldout_per_source", Some(0))?;
        if let Some((l, _, names)) = find("names") {
            let names: Vec<String> = names.split_whitespace().map(String::from).collect();
            if names.len() != k {
                return Err(perr(*l, format!("names: expected {k} names, got {}", names.len())));
            }
            spec.source_names = names;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Serialises with explicit matrices; `parse` reads it back exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let join = |xs: &[f64]| xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "preset = explicit");
        let _ = writeln!(s, "sources = {}", self.num_sources());
        let _ = writeln!(s, "vocab_size = {}", self.vocab_size);
        let _ = writeln!(s, "doc_len = {}", self.doc_len);
        let _ = writeln!(s, "docs_per_source = {}", self.docs_per_source);
        let _ = writeln!(s, "heldout_per_source = {}", self.heldout_per_source);
        let _ = writeln!(s, "names = {}", self.source_names.join(" "));
        for k in 0..self.num_sources() {
            let _ = writeln!(s, "initial.{k} = {}", join(&self.initial[k]));
            let _ = writeln!(s, "transition.{k} = {}", join(&self.transitions[k]));
        }
        s
    }
}

fn sample_index(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > 0.0 {
            acc += x;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

fn doc_rng(seed: u64, source: usize, doc: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((source as u64) << 40) | doc as u64);
    rng
}

fn registry_for(spec: &SyntheticSpec, seed: u64, docs: std::ops::Range<usize>) -> Result<CorpusRegistry> {
    let mut reg = CorpusRegistry::register(&spec.source_names, NamingPolicy::abbreviation())?;
    for src in 0..spec.num_sources() {
        for d in docs.clone() {
            let doc = spec.sample_doc(src, &mut doc_rng(seed, src, d));
            reg.add_document(src, doc);
        }
    }
    Ok(reg)
}

/// Samples `docs_per_source` documents per source; each document has its
/// own RNG stream, so the result depends only on `(spec, seed)`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<CorpusRegistry> {
    spec.validate()?;
    registry_for(spec, seed, 0..spec.docs_per_source)
}

/// Training corpus plus `heldout_per_source` further documents per source.
pub fn generate_split(spec: &SyntheticSpec, seed: u64) -> Result<(CorpusRegistry, CorpusRegistry)> {
    spec.validate()?;
    let n = spec.docs_per_source;
    Ok((
        registry_for(spec, seed, 0..n)?,
        registry_for(spec, seed, n..n + spec.heldout_per_source)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn cycle_chain_documents_are_identical_walks() {
        let spec = SyntheticSpec::cycle(5, 5, 10);
        let reg = generate_synthetic(&spec, 3).unwrap();
        for d in &reg.source(0).documents {
            assert_eq!(d, "w0 w1 w2 w3 w4");
        }
    }

    #[test]
    fn disjoint_sources_share_no_tokens() {
        let spec = SyntheticSpec::disjoint(2, 6, 20, 50, 0.5, 1);
        let reg = generate_synthetic(&spec, 9).unwrap();
        let sets: Vec<HashSet<&str>> = reg
            .sources()
            .iter()
            .map(|s| s.documents.iter().flat_map(|d| d.split_whitespace()).collect())
            .collect();
        assert!(sets[0].is_disjoint(&sets[1]));
        assert!(!sets[0].is_empty());
    }

    #[test]
    fn deterministic_per_seed_and_counts() {
        let spec = SyntheticSpec::shared(3, 8, 12, 7, 0.5, 2);
        let a = generate_synthetic(&spec, 5).unwrap();
        let b = generate_synthetic(&spec, 5).unwrap();
        let c = generate_synthetic(&spec, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.total_documents(), 3 * 7);
    }

    #[test]
    fn invalid_row_is_named() {
        let mut spec = SyntheticSpec::shared(2, 3, 4, 1, 1.0, 0);
        spec.transitions[1][3] += 0.25;
        let err = generate_synthetic(&spec, 0).unwrap_err().to_string();
        assert!(err.contains("source 1 transition row 1"), "{err}");
    }

    #[test]
    fn text_roundtrip_is_exact() {
        let spec = SyntheticSpec::shared(2, 4, 6, 3, 0.3, 7)
            .with_names(&["news", "wiki"])
            .with_heldout(2);
        let back = SyntheticSpec::parse(&spec.to_text(), "mem").unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn preset_file_and_unknown_key() {
        let text = "preset = disjoint\nsources = 2\ntokens_per_source = 3\ndoc_len = 4\ndocs_per_source = 2\n";
        let spec = SyntheticSpec::parse(text, "mem").unwrap();
        assert_eq!(spec.vocab_size, 6);
        let err = SyntheticSpec::parse("sources = 1\nbogus = 2\n", "mem").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn posterior_sums_to_one() {
        let spec = SyntheticSpec::shared(3, 5, 10, 1, 0.5, 4);
        let p = spec.posterior(&[0, 1, 2, 3, 4, 0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
