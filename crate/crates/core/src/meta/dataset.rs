use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Deserialize;

use crate::corpus::tokenize;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    pub sentence: Vec<String>,
    pub label: usize,
}

/// Labeled sentences grouped by class id. Class ids index `label_names`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub label_names: Vec<String>,
    pub by_class: BTreeMap<usize, Vec<LabeledExample>>,
}

#[derive(Deserialize)]
struct RawExample {
    label: String,
    text: String,
}

impl Dataset {
    /// Builds from `(label, text)` pairs. Class ids follow sorted label order.
    pub fn from_pairs<I, L, T>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (L, T)>,
        L: Into<String>,
        T: AsRef<str>,
    {
        let mut grouped: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
        for (label, text) in pairs {
            let sentence = tokenize(text.as_ref());
            let label = label.into();
            if sentence.is_empty() {
                return Err(Error::Format(format!("empty sentence for label `{label}`")));
            }
            grouped.entry(label).or_default().push(sentence);
        }
        let mut ds = Dataset::default();
        for (id, (name, sentences)) in grouped.into_iter().enumerate() {
            ds.label_names.push(name);
            ds.by_class.insert(
                id,
                sentences
                    .into_iter()
                    .map(|sentence| LabeledExample {
                        sentence,
                        label: id,
                    })
                    .collect(),
            );
        }
        Ok(ds)
    }

    /// JSON lines of `{label, text}`.
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut pairs = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawExample = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                msg: e.to_string(),
            })?;
            if raw.text.split_whitespace().next().is_none() {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: idx + 1,
                    msg: "empty text".into(),
                });
            }
            pairs.push((raw.label, raw.text));
        }
        Self::from_pairs(pairs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for examples in self.by_class.values() {
            for ex in examples {
                let rec = serde_json::json!({
                    "label": self.label_names[ex.label],
                    "text": ex.sentence.join(" "),
                });
                writeln!(w, "{rec}").map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }

    pub fn num_examples(&self) -> usize {
        self.by_class.values().map(Vec::len).sum()
    }

    pub fn sentences(&self) -> impl Iterator<Item = &[String]> {
        self.by_class
            .values()
            .flatten()
            .map(|e| e.sentence.as_slice())
    }

    pub fn label_index(&self) -> HashMap<&str, usize> {
        self.label_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_ids_follow_sorted_labels() {
        let ds = Dataset::from_pairs([("b", "x y"), ("a", "z"), ("b", "w")]).unwrap();
        assert_eq!(ds.label_names, vec!["a", "b"]);
        assert_eq!(ds.by_class[&1].len(), 2);
        assert_eq!(ds.num_examples(), 3);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let ds = Dataset::from_pairs([("pos", "Great phone"), ("neg", "bad battery")]).unwrap();
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);
        std::fs::write(&path, "{\"label\":\"a\",\"text\":\"  \"}\n").unwrap();
        assert!(matches!(
            Dataset::load(&path),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
