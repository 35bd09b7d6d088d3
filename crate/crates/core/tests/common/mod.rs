//! Independent oracles shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use ndarray::{Array1, Array2};
use ragmeta::corpus::{build_vocabulary, chunk_corpus, Document, Vocabulary, DEFAULT_WINDOW};
use ragmeta::fusion::FusionParams;
use ragmeta::meta::{Dataset, KnowledgeBase, Model};
use ragmeta::retriever::{Hit, PassageIndex};
use ragmeta::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

/// Straight-line multi-head cross attention: explicit loops over every index.
pub struct NaiveAttention {
    /// weights[head][class][position]
    pub weights: Vec<Vec<Vec<f64>>>,
    pub z: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
}

fn project(a: &Array2<f64>, w: &Array2<f64>) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; w.ncols()]; a.nrows()];
    for i in 0..a.nrows() {
        for j in 0..w.ncols() {
            let mut acc = 0.0;
            for k in 0..a.ncols() {
                acc += a[[i, k]] * w[[k, j]];
            }
            out[i][j] = acc;
        }
    }
    out
}

pub fn naive_attention(params: &FusionParams, p: &Array2<f64>, x: &Array2<f64>) -> NaiveAttention {
    let c = p.nrows();
    let l = x.nrows();
    let d = p.ncols();
    let h = params.w_q.len();
    let dh = d / h;
    let mut weights = Vec::with_capacity(h);
    let mut concat = vec![vec![0.0; d]; c];
    for head in 0..h {
        let q = project(p, &params.w_q[head]);
        let k = project(x, &params.w_k[head]);
        let v = project(x, &params.w_v[head]);
        let mut head_w = vec![vec![0.0; l]; c];
        for i in 0..c {
            let mut logits = vec![0.0; l];
            for j in 0..l {
                let mut acc = 0.0;
                for t in 0..dh {
                    acc += q[i][t] * k[j][t];
                }
                logits[j] = acc / (dh as f64).sqrt();
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = logits.iter().map(|z| (z - max).exp()).sum();
            for j in 0..l {
                head_w[i][j] = (logits[j] - max).exp() / total;
            }
            for t in 0..dh {
                let mut acc = 0.0;
                for j in 0..l {
                    acc += head_w[i][j] * v[j][t];
                }
                concat[i][head * dh + t] = acc;
            }
        }
        weights.push(head_w);
    }
    let mut z = vec![vec![0.0; d]; c];
    let mut scores = vec![0.0; c];
    for i in 0..c {
        for j in 0..d {
            let mut acc = 0.0;
            for t in 0..d {
                acc += concat[i][t] * params.w_o[[t, j]];
            }
            z[i][j] = acc;
        }
        for j in 0..d {
            scores[i] += (z[i][j] + p[[i, j]]) * params.r[j];
        }
    }
    NaiveAttention { weights, z, scores }
}

/// Scores every passage and sorts: higher score first, lower id on ties.
pub fn exhaustive_top_m(index: &PassageIndex, query: &Array1<f64>, m: usize) -> Vec<Hit> {
    let mut all: Vec<Hit> = (0..index.len())
        .map(|row| {
            let mut score = 0.0;
            for k in 0..index.dim() {
                score += index.vectors()[[row, k]] * query[k];
            }
            Hit {
                passage_id: index.ids()[row],
                score,
            }
        })
        .collect();
    all.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.passage_id.cmp(&b.passage_id))
    });
    all.truncate(m);
    all
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Largest relative error between `analytic` and central differences of
/// `loss` over every entry of every model tensor, with the tensor name.
pub fn max_fd_error<F>(model: &Model, analytic: &[Vec<f64>], eps: f64, mut loss: F) -> (f64, String)
where
    F: FnMut(&Model) -> f64,
{
    let names = model.tensor_names();
    let mut probe = model.clone();
    let mut worst = (0.0, String::new());
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let orig = probe.tensors_mut()[t][i];
            probe.tensors_mut()[t][i] = orig + eps;
            let up = loss(&probe);
            probe.tensors_mut()[t][i] = orig - eps;
            let down = loss(&probe);
            probe.tensors_mut()[t][i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let e = rel_err(grad[i], numeric);
            if e > worst.0 {
                worst = (e, format!("{}[{i}]", names[t]));
            }
        }
    }
    worst
}

/// Three classes of two-word sentences and a tiny corpus whose passages all
/// fit a 10-token fusion input.
pub struct Micro {
    pub vocab: Vocabulary,
    pub kb: KnowledgeBase,
    pub dataset: Dataset,
    pub cfg: TrainConfig,
}

pub fn micro_instance() -> Micro {
    let words = [
        ["ant", "bee", "cat", "dog"],
        ["elk", "fox", "gnu", "hen"],
        ["ibis", "jay", "kiwi", "lynx"],
    ];
    let mut pairs = Vec::new();
    for (c, ws) in words.iter().enumerate() {
        for i in 0..4 {
            pairs.push((
                format!("class{c}"),
                format!("{} {}", ws[i], ws[(i + 1) % 4]),
            ));
        }
    }
    let dataset = Dataset::from_pairs(pairs).unwrap();
    let docs: Vec<Document> = words
        .iter()
        .enumerate()
        .flat_map(|(c, ws)| {
            (0..2).map(move |j| {
                Document::new(
                    format!("doc{c}{j}"),
                    &format!("t{c}"),
                    &format!("{} {} {}", ws[j], ws[j + 1], ws[j + 2]),
                )
                .unwrap()
            })
        })
        .collect();
    let passages = chunk_corpus(&docs, DEFAULT_WINDOW);
    let vocab = build_vocabulary(&docs, dataset.sentences(), 1);
    let kb = KnowledgeBase::build(&vocab, passages, 4, 3);
    let cfg = TrainConfig {
        c: 3,
        n: 2,
        q: 2,
        m: 2,
        d: 8,
        h: 2,
        d_r: 4,
        max_len: 10,
        embed_init: Some(0.5),
        seed: 5,
        ..TrainConfig::default()
    };
    Micro {
        vocab,
        kb,
        dataset,
        cfg,
    }
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
