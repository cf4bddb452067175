use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Bijection between retained external ids and dense indices `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocab {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    counts: Vec<u64>,
}

impl Vocab {
    /// Builds a vocabulary from `(id, count)` pairs in index order.
    pub fn from_entries<I, S>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, u64)>,
        S: Into<String>,
    {
        let mut vocab = Vocab::default();
        for (id, count) in entries {
            let id = id.into();
            if vocab.index.contains_key(&id) {
                return Err(Error::Invalid(format!("duplicate vocabulary entry `{id}`")));
            }
            vocab.index.insert(id.clone(), vocab.ids.len());
            vocab.ids.push(id);
            vocab.counts.push(count);
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn count(&self, index: usize) -> u64 {
        self.counts[index]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// `index<TAB>external_id<TAB>count`, one line per entry.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, (id, c)) in self.ids.iter().zip(&self.counts).enumerate() {
            let _ = writeln!(out, "{i}\t{id}\t{c}");
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                line: n + 1,
                message,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(parse_err(format!("expected 3 fields, got {}", fields.len())));
            }
            let index: usize = fields[0]
                .parse()
                .map_err(|e| parse_err(format!("bad index `{}`: {e}", fields[0])))?;
            if index != entries.len() {
                return Err(parse_err(format!("index {index} out of sequence")));
            }
            let count: u64 = fields[2]
                .parse()
                .map_err(|e| parse_err(format!("bad count `{}`: {e}", fields[2])))?;
            entries.push((fields[1].to_string(), count));
        }
        Vocab::from_entries(entries)
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::from_tsv(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tsv_roundtrip() {
        let v = Vocab::from_entries([("a", 6), ("b", 9)]).unwrap();
        assert_eq!(v.to_tsv(), "0\ta\t6\n1\tb\t9\n");
        assert_eq!(Vocab::from_tsv(&v.to_tsv()).unwrap(), v);
        assert_eq!(v.index_of("b"), Some(1));
        assert_eq!(v.index_of("c"), None);
    }

    #[test]
    fn rejects_duplicates_and_gaps() {
        assert!(Vocab::from_entries([("a", 1), ("a", 2)]).is_err());
        assert!(Vocab::from_tsv("1\ta\t3\n").is_err());
    }
}
