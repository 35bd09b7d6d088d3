//! Trainable sentence encoder: an embedding lookup producing per-token states,
//! mean-pooled into a sentence vector.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio;
use crate::corpus::TokenId;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RGMENC01";

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// V x d embedding table.
    pub embeddings: Array2<f64>,
    pub seed: u64,
    pub step: u64,
}

/// Per-token states `H`, one row per input id.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStates(pub Array2<f64>);

impl TokenStates {
    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }
}

/// Upstream gradient for [`EncoderParams::backward`].
pub enum Upstream<'a> {
    /// dLoss/dH, L x d.
    States(ArrayView2<'a, f64>),
    /// dLoss/df for the mean-pooled vector.
    Pooled(ArrayView1<'a, f64>),
}

impl EncoderParams {
    /// Embeddings drawn uniformly from `[-0.5/d, 0.5/d]`.
    pub fn init(vocab_size: usize, d: usize, seed: u64) -> Self {
        Self::init_with_scale(vocab_size, d, 0.5 / d as f64, seed)
    }

    /// Uniform init on `[-a, a]`.
    pub fn init_with_scale(vocab_size: usize, d: usize, a: f64, seed: u64) -> Self {
        assert!(d >= 1, "model width must be positive");
        assert!(a > 0.0 && a.is_finite(), "init scale must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embeddings = Array2::from_shape_simple_fn((vocab_size, d), || rng.gen_range(-a..a));
        Self {
            embeddings,
            seed,
            step: 0,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    /// `H[j] = E[ids[j]]`.
    pub fn encode_sequence(&self, ids: &[TokenId]) -> TokenStates {
        let d = self.dim();
        let mut h = Array2::zeros((ids.len(), d));
        for (mut row, &id) in h.rows_mut().into_iter().zip(ids) {
            assert!(
                (id as usize) < self.vocab_size(),
                "token id {id} outside vocabulary of {}",
                self.vocab_size()
            );
            row.assign(&self.embeddings.row(id as usize));
        }
        TokenStates(h)
    }

    /// Mean-pooled sentence vector for `ids`.
    pub fn embed(&self, ids: &[TokenId]) -> Array1<f64> {
        sentence_embedding(&self.encode_sequence(ids))
    }

    /// Gradient on the embedding table for one sequence, as a fresh V x d matrix.
    pub fn backward(&self, ids: &[TokenId], upstream: Upstream<'_>) -> Array2<f64> {
        let mut grad = Array2::zeros(self.embeddings.raw_dim());
        accumulate_grad(&mut grad, ids, upstream);
        grad
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(MAGIC).map_err(io)?;
        binio::write_u64(&mut w, self.vocab_size() as u64).map_err(io)?;
        binio::write_u64(&mut w, self.dim() as u64).map_err(io)?;
        binio::write_u64(&mut w, self.seed).map_err(io)?;
        binio::write_u64(&mut w, self.step).map_err(io)?;
        binio::write_f64s(&mut w, self.embeddings.as_slice().expect("standard layout"))
            .map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        if !binio::read_magic(&mut r, MAGIC).map_err(io)? {
            return Err(Error::Format(format!(
                "{}: not an encoder checkpoint",
                path.display()
            )));
        }
        let v = binio::read_u64(&mut r).map_err(io)?;
        let d = binio::read_u64(&mut r).map_err(io)?;
        let seed = binio::read_u64(&mut r).map_err(io)?;
        let step = binio::read_u64(&mut r).map_err(io)?;
        let n = binio::checked_len(v, d).ok_or_else(|| {
            Error::Format(format!("{}: implausible shape {v}x{d}", path.display()))
        })?;
        let data = binio::read_f64s(&mut r, n).map_err(io)?;
        let embeddings =
            Array2::from_shape_vec((v as usize, d as usize), data).expect("length checked");
        Ok(Self {
            embeddings,
            seed,
            step,
        })
    }
}

/// Row mean of `H`.
pub fn sentence_embedding(h: &TokenStates) -> Array1<f64> {
    assert!(!h.is_empty(), "cannot pool an empty sequence");
    h.0.mean_axis(Axis(0)).expect("non-empty")
}

/// Scatter-adds upstream rows into `grad` by token id. A pooled upstream is
/// spread as `df / L` to every position.
pub fn accumulate_grad(grad: &mut Array2<f64>, ids: &[TokenId], upstream: Upstream<'_>) {
    match upstream {
        Upstream::States(dh) => {
            assert_eq!(
                dh.nrows(),
                ids.len(),
                "upstream rows must match sequence length"
            );
            for (row, &id) in dh.rows().into_iter().zip(ids) {
                grad.row_mut(id as usize).scaled_add(1.0, &row);
            }
        }
        Upstream::Pooled(df) => {
            let scale = 1.0 / ids.len() as f64;
            for &id in ids {
                grad.row_mut(id as usize).scaled_add(scale, &df);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn shapes_and_lookup() {
        let enc = EncoderParams::init(10, 4, 1);
        let h = enc.encode_sequence(&[1, 2, 3, 4, 5]);
        assert_eq!(h.0.dim(), (5, 4));
        let same = enc.encode_sequence(&[7, 7, 7]);
        assert_eq!(same.0.row(0), same.0.row(2));
        assert_eq!(enc.encode_sequence(&[3, 1]), enc.encode_sequence(&[3, 1]));
    }

    #[test]
    fn init_range() {
        let enc = EncoderParams::init(50, 8, 3);
        assert!(enc.embeddings.iter().all(|x| x.abs() <= 0.5 / 8.0));
        assert_eq!(enc, EncoderParams::init(50, 8, 3));
    }

    #[test]
    fn identity_embedding() {
        let mut enc = EncoderParams::init(4, 4, 0);
        enc.embeddings = Array2::eye(4);
        let h = enc.encode_sequence(&[2, 0, 3]);
        assert_eq!(
            h.0,
            array![[0., 0., 1., 0.], [1., 0., 0., 0.], [0., 0., 0., 1.]]
        );
    }

    #[test]
    fn mean_pooling() {
        let h = TokenStates(array![[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(sentence_embedding(&h), array![0.5, 0.5]);
        let single = TokenStates(array![[3.0, -1.0]]);
        assert_eq!(sentence_embedding(&single), array![3.0, -1.0]);
    }

    #[test]
    fn pooling_matches_row_mean_and_ignores_order() {
        let enc = EncoderParams::init(20, 6, 9);
        let ids = [4u32, 9, 1, 15, 4, 2];
        let f = enc.embed(&ids);
        for k in 0..6 {
            let manual: f64 = ids
                .iter()
                .map(|&i| enc.embeddings[[i as usize, k]])
                .sum::<f64>()
                / 6.0;
            assert!((f[k] - manual).abs() < 1e-12);
        }
        let mut rev = ids;
        rev.reverse();
        let g = enc.embed(&rev);
        assert!((&f - &g).iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn pooled_gradient_of_repeated_token() {
        let enc = EncoderParams::init(5, 3, 0);
        let v = array![1.0, -2.0, 0.5];
        let g = enc.backward(&[2, 2, 2, 2], Upstream::Pooled(v.view()));
        for k in 0..3 {
            assert!((g[[2, k]] - v[k]).abs() < 1e-15);
        }
        assert!(g.row(0).iter().all(|&x| x == 0.0));
        let zero = enc.backward(&[1, 3], Upstream::Pooled(Array1::zeros(3).view()));
        assert!(zero.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // loss = w . f + sum(G * H)
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut enc = EncoderParams::init(8, 5, 2);
        let ids = [3u32, 1, 3, 7, 0];
        let w: Array1<f64> = Array1::from_shape_simple_fn(5, || rng.gen_range(-1.0..1.0));
        let gmat: Array2<f64> = Array2::from_shape_simple_fn((5, 5), || rng.gen_range(-1.0..1.0));
        let loss = |e: &EncoderParams| {
            let h = e.encode_sequence(&ids);
            w.dot(&sentence_embedding(&h)) + (&gmat * &h.0).sum()
        };
        let mut analytic = enc.backward(&ids, Upstream::Pooled(w.view()));
        accumulate_grad(&mut analytic, &ids, Upstream::States(gmat.view()));

        let eps = 1e-5;
        for i in 0..8 {
            for k in 0..5 {
                let orig = enc.embeddings[[i, k]];
                enc.embeddings[[i, k]] = orig + eps;
                let up = loss(&enc);
                enc.embeddings[[i, k]] = orig - eps;
                let down = loss(&enc);
                enc.embeddings[[i, k]] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let a = analytic[[i, k]];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-4, "({i},{k}) analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.bin");
        let mut enc = EncoderParams::init(12, 4, 77);
        enc.step = 42;
        enc.save(&path).unwrap();
        assert_eq!(EncoderParams::load(&path).unwrap(), enc);
        std::fs::write(&path, b"garbage!").unwrap();
        assert!(EncoderParams::load(&path).is_err());
    }
}
