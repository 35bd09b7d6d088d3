//! Frozen dense retrieval over a flat inner-product index.
//!
//! The embedder is a seeded random projection of token ids: a text vector is
//! the mean of the projection rows of its in-vocabulary tokens. Nothing here
//! is ever updated by training.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::binio;
use crate::corpus::{Passage, TokenId, Vocabulary, UNK};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RGMIDX\0\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEmbedder {
    projection: Array2<f64>,
    seed: u64,
}

impl FrozenEmbedder {
    /// `vocab_size x d_r` standard-normal projection drawn from `seed`.
    pub fn new(vocab_size: usize, d_r: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection =
            Array2::from_shape_simple_fn((vocab_size, d_r), || StandardNormal.sample(&mut rng));
        Self { projection, seed }
    }

    pub fn dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn projection(&self) -> &Array2<f64> {
        &self.projection
    }

    /// Mean projection row over known ids; UNK is skipped. No known ids gives
    /// the zero vector.
    pub fn embed_ids(&self, ids: &[TokenId]) -> Array1<f64> {
        let mut out = Array1::zeros(self.dim());
        let mut n = 0usize;
        for &id in ids
            .iter()
            .filter(|&&id| id != UNK && (id as usize) < self.projection.nrows())
        {
            out += &self.projection.row(id as usize);
            n += 1;
        }
        if n > 0 {
            out /= n as f64;
        }
        out
    }

    pub fn embed_text<S: AsRef<str>>(&self, vocab: &Vocabulary, tokens: &[S]) -> Array1<f64> {
        self.embed_ids(&vocab.encode(tokens))
    }

    pub fn embed_passage(&self, vocab: &Vocabulary, passage: &Passage) -> Array1<f64> {
        let ids: Vec<TokenId> = passage.retrieval_tokens().map(|t| vocab.id(t)).collect();
        self.embed_ids(&ids)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub passage_id: u64,
    pub score: f64,
}

/// Total order where "greater" means ranked earlier: higher score, then lower id.
#[derive(Debug, Clone, Copy)]
struct Ranked(Hit);

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0
            .score
            .total_cmp(&other.0.score)
            .then_with(|| other.0.passage_id.cmp(&self.0.passage_id))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

#[derive(Debug, Clone, PartialEq)]
pub struct PassageIndex {
    ids: Vec<u64>,
    vectors: Array2<f64>,
    embedder_seed: u64,
}

/// Dot product with a fixed left-to-right summation order.
pub fn dot(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |acc, (x, y)| acc + x * y)
}

impl PassageIndex {
    pub fn from_parts(ids: Vec<u64>, vectors: Array2<f64>, embedder_seed: u64) -> Result<Self> {
        if ids.len() != vectors.nrows() {
            return Err(Error::Shape(format!(
                "{} ids for {} vectors",
                ids.len(),
                vectors.nrows()
            )));
        }
        if vectors.iter().any(|x| !x.is_finite()) {
            return Err(Error::Format("non-finite passage vector".into()));
        }
        Ok(Self {
            ids,
            vectors,
            embedder_seed,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn embedder_seed(&self) -> u64 {
        self.embedder_seed
    }

    /// Up to `m` passages by descending dot product, ties by ascending id.
    pub fn top_m(&self, query: ArrayView1<'_, f64>, m: usize) -> Vec<Hit> {
        assert_eq!(query.len(), self.dim(), "query width must match the index");
        if m == 0 {
            return Vec::new();
        }
        let mut heap: BinaryHeap<Reverse<Ranked>> = BinaryHeap::with_capacity(m + 1);
        for (row, &passage_id) in self.vectors.rows().into_iter().zip(&self.ids) {
            let cand = Ranked(Hit {
                passage_id,
                score: dot(row, query),
            });
            if heap.len() < m {
                heap.push(Reverse(cand));
            } else if let Some(Reverse(worst)) = heap.peek() {
                if cand > *worst {
                    heap.pop();
                    heap.push(Reverse(cand));
                }
            }
        }
        let mut out: Vec<Ranked> = heap.into_iter().map(|Reverse(r)| r).collect();
        out.sort_by(|a, b| b.cmp(a));
        out.into_iter().map(|r| r.0).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(MAGIC).map_err(io)?;
        binio::write_u32(&mut w, VERSION).map_err(io)?;
        binio::write_u64(&mut w, self.len() as u64).map_err(io)?;
        binio::write_u64(&mut w, self.dim() as u64).map_err(io)?;
        binio::write_u64(&mut w, self.embedder_seed).map_err(io)?;
        for &id in &self.ids {
            binio::write_u64(&mut w, id).map_err(io)?;
        }
        binio::write_f64s(&mut w, self.vectors.as_slice().expect("standard layout")).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        if !binio::read_magic(&mut r, MAGIC).map_err(io)? {
            return Err(bad("not a passage index"));
        }
        let version = binio::read_u32(&mut r).map_err(io)?;
        if version != VERSION {
            return Err(bad(&format!("unsupported index version {version}")));
        }
        let m = binio::read_u64(&mut r).map_err(io)?;
        let d_r = binio::read_u64(&mut r).map_err(io)?;
        let seed = binio::read_u64(&mut r).map_err(io)?;
        let n = binio::checked_len(m, d_r).ok_or_else(|| bad("implausible shape"))?;
        let mut ids = Vec::with_capacity(m as usize);
        for _ in 0..m {
            ids.push(binio::read_u64(&mut r).map_err(io)?);
        }
        let data = binio::read_f64s(&mut r, n).map_err(io)?;
        let vectors =
            Array2::from_shape_vec((m as usize, d_r as usize), data).expect("length checked");
        Self::from_parts(ids, vectors, seed)
    }
}

/// One vector per passage (title + body), in input order.
pub fn build_index(
    embedder: &FrozenEmbedder,
    vocab: &Vocabulary,
    passages: &[Passage],
) -> PassageIndex {
    let rows: Vec<Array1<f64>> = passages
        .par_iter()
        .map(|p| embedder.embed_passage(vocab, p))
        .collect();
    let mut vectors = Array2::zeros((passages.len(), embedder.dim()));
    for (mut dst, src) in vectors.rows_mut().into_iter().zip(&rows) {
        dst.assign(src);
    }
    PassageIndex {
        ids: passages.iter().map(|p| p.passage_id).collect(),
        vectors,
        embedder_seed: embedder.seed(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn embed_single_and_repeated_token() {
        let e = FrozenEmbedder::new(10, 4, 5);
        assert_eq!(e.embed_ids(&[7]), e.projection().row(7));
        assert_eq!(e.embed_ids(&[7, 7]), e.projection().row(7));
        assert_eq!(e.embed_ids(&[]), Array1::<f64>::zeros(4));
        assert_eq!(e.embed_ids(&[UNK]), Array1::<f64>::zeros(4));
    }

    #[test]
    fn same_seed_same_projection() {
        assert_eq!(FrozenEmbedder::new(30, 8, 1), FrozenEmbedder::new(30, 8, 1));
        assert_ne!(FrozenEmbedder::new(30, 8, 1), FrozenEmbedder::new(30, 8, 2));
    }

    #[test]
    fn ranks_by_dot_product() {
        let idx = PassageIndex::from_parts(vec![0, 1], array![[1.0, 0.0], [0.0, 1.0]], 0).unwrap();
        let hits = idx.top_m(array![1.0, 0.1].view(), 5);
        assert_eq!(hits.len(), 2);
        assert_eq!(
            hits[0],
            Hit {
                passage_id: 0,
                score: 1.0
            }
        );
        assert_eq!(
            hits[1],
            Hit {
                passage_id: 1,
                score: 0.1
            }
        );
        assert!(idx.top_m(array![1.0, 0.1].view(), 0).is_empty());
    }

    #[test]
    fn ties_break_by_id() {
        let idx = PassageIndex::from_parts(vec![9, 3, 5], array![[1.0], [1.0], [1.0]], 0).unwrap();
        let ids: Vec<u64> = idx
            .top_m(array![2.0].view(), 2)
            .iter()
            .map(|h| h.passage_id)
            .collect();
        assert_eq!(ids, vec![3, 5]);
    }

    #[test]
    fn build_index_shape_and_determinism() {
        let vocab = Vocabulary::from_tokens(["a", "b", "c", "d"]);
        let mk = |id, body: &str| Passage {
            passage_id: id,
            doc_id: "x".into(),
            title: vec!["t".into()],
            body: crate::corpus::tokenize(body),
            ordinal: 0,
        };
        let passages = vec![mk(0, "a b"), mk(1, "c"), mk(2, "d a")];
        let e = FrozenEmbedder::new(vocab.len(), 16, 3);
        let idx = build_index(&e, &vocab, &passages);
        assert_eq!(idx.vectors().dim(), (3, 16));
        assert_eq!(
            idx,
            build_index(&FrozenEmbedder::new(vocab.len(), 16, 3), &vocab, &passages)
        );
    }

    #[test]
    fn rejects_mismatched_parts() {
        assert!(PassageIndex::from_parts(vec![0], Array2::zeros((2, 3)), 0).is_err());
        assert!(PassageIndex::from_parts(vec![0], array![[f64::NAN]], 0).is_err());
    }

    #[test]
    fn truncated_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.bin");
        let idx = PassageIndex::from_parts(vec![0, 1], array![[1.0, 2.0], [3.0, 4.0]], 4).unwrap();
        idx.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(PassageIndex::load(&path).is_err());
    }
}
