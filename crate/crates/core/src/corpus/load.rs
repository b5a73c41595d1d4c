use std::fs;
use std::path::Path;

use super::{CorpusRegistry, NamingPolicy};
use crate::error::{Error, Result};

/// On-disk corpus layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    /// `<root>/<source>/*.txt`, one document per file.
    DirectoryPerSource,
    /// One `source<TAB>text` record per line.
    LineRecords,
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dir" | "directory" | "directory-per-source" => Ok(CorpusFormat::DirectoryPerSource),
            "lines" | "line-records" => Ok(CorpusFormat::LineRecords),
            _ => Err(Error::Usage(format!("unknown corpus format {s:?}"))),
        }
    }
}

pub fn load_corpus(path: &Path, format: CorpusFormat, policy: NamingPolicy) -> Result<CorpusRegistry> {
    match format {
        CorpusFormat::DirectoryPerSource => load_dir(path, policy),
        CorpusFormat::LineRecords => {
            let records = read_records(path)?;
            let mut names: Vec<&str> = Vec::new();
            for (_, src, _) in &records {
                if !names.contains(&src.as_str()) {
                    names.push(src);
                }
            }
            let mut reg = CorpusRegistry::register(&names, policy)?;
            for (_, src, text) in &records {
                let i = names.iter().position(|n| n == src).unwrap();
                reg.add_document(i, text.as_str());
            }
            Ok(reg)
        }
    }
}

impl CorpusRegistry {
    /// Appends line records to an already registered (frozen) source list.
    /// A record naming an unknown source is rejected with its line number.
    pub fn extend_from_records(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records = parse_records(path, &text)?;
        let mut staged = Vec::with_capacity(records.len());
        for (line, src, doc) in records {
            let Some(i) = self.sources.iter().position(|s| s.name == src) else {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line,
                    message: format!(
                        "unknown source {src:?}; registered sources: {}",
                        self.names().join(", ")
                    ),
                });
            };
            staged.push((i, doc));
        }
        for (i, doc) in staged {
            self.add_document(i, doc);
        }
        Ok(())
    }
}

fn read_records(path: &Path) -> Result<Vec<(usize, String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_records(path, &text)
}

fn parse_records(path: &Path, text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(src), Some(doc), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: "expected exactly two tab-separated fields: source, text".into(),
            });
        };
        if src.is_empty() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: "empty source field".into(),
            });
        }
        out.push((i + 1, src.to_string(), doc.to_string()));
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: no sources found", path.display())));
    }
    Ok(out)
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    v.sort();
    Ok(v)
}

fn load_dir(root: &Path, policy: NamingPolicy) -> Result<CorpusRegistry> {
    let subdirs: Vec<_> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if subdirs.is_empty() {
        return Err(Error::Data(format!("{}: no sources found", root.display())));
    }
    let names: Vec<String> = subdirs
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    let mut reg = CorpusRegistry::register(&names, policy)?;
    for (i, dir) in subdirs.iter().enumerate() {
        for file in sorted_entries(dir)? {
            if file.is_file() && file.extension().is_some_and(|e| e == "txt") {
                let doc = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
                reg.add_document(i, doc.trim_end_matches(['\n', '\r']));
            }
        }
    }
    Ok(reg)
}

/// Writes `<root>/<source>/<index>.txt` for every document.
pub fn write_directory_corpus(reg: &CorpusRegistry, root: &Path) -> Result<()> {
    for s in reg.sources() {
        let dir = root.join(&s.name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (j, d) in s.documents.iter().enumerate() {
            let p = dir.join(format!("{j:06}.txt"));
            fs::write(&p, format!("{d}\n")).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(())
}
