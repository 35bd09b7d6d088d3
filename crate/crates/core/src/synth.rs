//! Bundled synthetic few-shot benchmark.
//!
//! Every training class owns a set of signal words. A test class combines
//! part of the vocabulary of its own group of two (by default) training
//! classes, so novel classes are new mixtures of familiar topics. A sentence mixes a couple of its class's signal
//! words with generic filler words, so two sentences of the same class often
//! share no signal word at all. The knowledge corpus holds short class
//! documents dense in their class's signal words, plus longer background
//! documents made of unrelated words. Retrieving class documents for a query
//! therefore exposes the rest of the class vocabulary.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{chunk_corpus, write_corpus, Document, DEFAULT_WINDOW};
use crate::error::{Error, Result};
use crate::meta::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub train_classes: usize,
    pub test_classes: usize,
    pub signal_words_per_class: usize,
    /// Number of training classes whose words each test class combines.
    pub test_sources: usize,
    pub title_words_per_class: usize,
    pub filler_words: usize,
    pub background_words: usize,
    /// Signal words per sentence.
    pub sentence_signal: usize,
    /// Filler words per sentence.
    pub sentence_filler: usize,
    pub train_examples_per_class: usize,
    /// Held-out examples of the training classes.
    pub val_examples_per_class: usize,
    pub test_examples_per_class: usize,
    pub class_docs_per_class: usize,
    pub class_doc_min_words: usize,
    pub class_doc_max_words: usize,
    /// Share of class-document words drawn from the class signal set.
    pub class_doc_signal_fraction: f64,
    pub background_doc_min_words: usize,
    pub background_doc_max_words: usize,
    /// Exact passage count of the chunked corpus.
    pub total_passages: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            train_classes: 8,
            test_classes: 4,
            signal_words_per_class: 6,
            test_sources: 2,
            title_words_per_class: 2,
            filler_words: 60,
            background_words: 300,
            sentence_signal: 3,
            sentence_filler: 2,
            train_examples_per_class: 40,
            val_examples_per_class: 10,
            test_examples_per_class: 40,
            class_docs_per_class: 80,
            class_doc_min_words: 30,
            class_doc_max_words: 50,
            class_doc_signal_fraction: 0.9,
            background_doc_min_words: 120,
            background_doc_max_words: 260,
            total_passages: 2000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthBenchmark {
    pub corpus: Vec<Document>,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

struct ClassSpec {
    name: String,
    title: Vec<String>,
    signal: Vec<String>,
}

fn word_factory(rng: &mut ChaCha8Rng) -> impl FnMut(usize) -> Vec<String> + '_ {
    const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let mut used: HashSet<String> = HashSet::new();
    move |count| {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let syllables = rng.gen_range(2..=3);
            let mut w = String::with_capacity(6);
            for _ in 0..syllables {
                w.push(*CONSONANTS.choose(rng).unwrap() as char);
                w.push(*VOWELS.choose(rng).unwrap() as char);
            }
            if used.insert(w.clone()) {
                out.push(w);
            }
        }
        out
    }
}

fn pick<'a>(
    rng: &mut ChaCha8Rng,
    words: &'a [String],
    k: usize,
) -> impl Iterator<Item = &'a String> {
    index::sample(rng, words.len(), k)
        .into_iter()
        .map(move |i| &words[i])
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.test_sources == 0 || self.test_classes * self.test_sources > self.train_classes {
            return Err(Error::Config(
                "test classes need disjoint groups of training classes".into(),
            ));
        }
        if self.sentence_signal > self.signal_words_per_class
            || self.sentence_filler > self.filler_words
        {
            return Err(Error::Config(
                "sentence needs more distinct words than available".into(),
            ));
        }
        if self.class_doc_min_words == 0
            || self.class_doc_min_words > self.class_doc_max_words
            || self.class_doc_max_words > DEFAULT_WINDOW
            || self.background_doc_min_words == 0
            || self.background_doc_min_words > self.background_doc_max_words
        {
            return Err(Error::Config("invalid document length range".into()));
        }
        let class_docs = (self.train_classes + self.test_classes) * self.class_docs_per_class;
        if class_docs > self.total_passages {
            return Err(Error::Config(
                "class documents alone exceed the passage budget".into(),
            ));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<SynthBenchmark> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut word_rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xa5a5_a5a5);
        let mut words = word_factory(&mut word_rng);

        let titles: Vec<Vec<String>> = (0..self.train_classes + self.test_classes)
            .map(|_| words(self.title_words_per_class))
            .collect();
        let mut train_signal: Vec<Vec<String>> = (0..self.train_classes)
            .map(|_| words(self.signal_words_per_class))
            .collect();
        let filler = words(self.filler_words);
        let background = words(self.background_words);

        // each test class mixes the words of its own group of training classes
        let mut order: Vec<usize> = (0..self.train_classes).collect();
        order.shuffle(&mut rng);
        let mut test_signal = Vec::with_capacity(self.test_classes);
        for sources in order
            .chunks_exact(self.test_sources)
            .take(self.test_classes)
        {
            let mut signal: Vec<String> = Vec::with_capacity(self.signal_words_per_class);
            for (k, &src) in sources.iter().enumerate() {
                let share = (self.signal_words_per_class + k) / self.test_sources;
                signal.extend(pick(&mut rng, &train_signal[src], share).cloned());
            }
            signal.shuffle(&mut rng);
            test_signal.push(signal);
        }
        train_signal.extend(test_signal);
        let classes: Vec<ClassSpec> = titles
            .into_iter()
            .zip(train_signal)
            .map(|(title, signal)| ClassSpec {
                name: title.join("-"),
                title,
                signal,
            })
            .collect();

        let sentence = |rng: &mut ChaCha8Rng, class: &ClassSpec| -> String {
            let mut toks: Vec<&String> = pick(rng, &class.signal, self.sentence_signal)
                .chain(pick(rng, &filler, self.sentence_filler))
                .collect();
            toks.shuffle(rng);
            toks.iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(" ")
        };

        let mut train_pairs = Vec::new();
        let mut val_pairs = Vec::new();
        let mut test_pairs = Vec::new();
        for (i, class) in classes.iter().enumerate() {
            if i < self.train_classes {
                for _ in 0..self.train_examples_per_class {
                    train_pairs.push((class.name.clone(), sentence(&mut rng, class)));
                }
                for _ in 0..self.val_examples_per_class {
                    val_pairs.push((class.name.clone(), sentence(&mut rng, class)));
                }
            } else {
                for _ in 0..self.test_examples_per_class {
                    test_pairs.push((class.name.clone(), sentence(&mut rng, class)));
                }
            }
        }

        let mut docs = Vec::new();
        for (i, class) in classes.iter().enumerate() {
            for j in 0..self.class_docs_per_class {
                let len = rng.gen_range(self.class_doc_min_words..=self.class_doc_max_words);
                let body: Vec<&str> = (0..len)
                    .map(|_| {
                        if rng.gen_bool(self.class_doc_signal_fraction) {
                            class.signal.choose(&mut rng).unwrap().as_str()
                        } else {
                            background.choose(&mut rng).unwrap().as_str()
                        }
                    })
                    .collect();
                docs.push(Document::new(
                    format!("c{i:02}-{j:03}"),
                    &class.title.join(" "),
                    &body.join(" "),
                )?);
            }
        }
        // background documents fill the remaining passage budget exactly
        let mut remaining = self.total_passages - docs.len();
        let mut k = 0;
        while remaining > 0 {
            let max_words = self
                .background_doc_max_words
                .min(remaining * DEFAULT_WINDOW);
            let min_words = self.background_doc_min_words.min(max_words);
            let mut len = rng.gen_range(min_words..=max_words);
            let mut n_passages = len.div_ceil(DEFAULT_WINDOW);
            if n_passages > remaining {
                len = remaining * DEFAULT_WINDOW;
                n_passages = remaining;
            }
            let title: Vec<&str> = pick(&mut rng, &background, 2).map(String::as_str).collect();
            let body: Vec<&str> = (0..len)
                .map(|_| background.choose(&mut rng).unwrap().as_str())
                .collect();
            docs.push(Document::new(
                format!("bg-{k:04}"),
                &title.join(" "),
                &body.join(" "),
            )?);
            remaining -= n_passages;
            k += 1;
        }
        docs.shuffle(&mut rng);

        Ok(SynthBenchmark {
            corpus: docs,
            train: Dataset::from_pairs(train_pairs)?,
            val: Dataset::from_pairs(val_pairs)?,
            test: Dataset::from_pairs(test_pairs)?,
        })
    }
}

impl SynthBenchmark {
    pub fn passage_count(&self) -> usize {
        chunk_corpus(&self.corpus, DEFAULT_WINDOW).len()
    }

    /// Writes `corpus.jsonl`, `train.jsonl`, `val.jsonl` and `test.jsonl`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_corpus(&dir.join("corpus.jsonl"), &self.corpus)?;
        self.train.save(&dir.join("train.jsonl"))?;
        self.val.save(&dir.join("val.jsonl"))?;
        self.test.save(&dir.join("test.jsonl"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_benchmark_shape() {
        let b = SynthConfig::default().generate().unwrap();
        assert_eq!(b.passage_count(), 2000);
        assert_eq!(b.train.num_classes(), 8);
        assert_eq!(b.test.num_classes(), 4);
        let train: HashSet<_> = b.train.label_names.iter().collect();
        assert!(b.test.label_names.iter().all(|l| !train.contains(l)));
        assert_eq!(b.val.label_names, b.train.label_names);
        assert!(b.train.sentences().all(|s| s.len() == 5));
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        let a = SynthConfig::default().generate().unwrap();
        let b = SynthConfig::default().generate().unwrap();
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.test, b.test);
    }
}
