//! Multi-view passages fusion network.
//!
//! Class prototypes attend over the token states of a query concatenated with
//! one retrieved passage. Each head computes
//! `softmax(P Wq (X Wk)^T / sqrt(d_h)) X Wv`; heads are concatenated and
//! projected by `Wo`, the prototypes are added back as a residual and the
//! result is scored against a learnable vector `r`. Each passage yields one
//! score vector ("view"); views are pooled by column mean or column max.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RGMFUS01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Mean => "mean",
            Pooling::Max => "max",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            other => Err(Error::Config(format!("unknown pooling strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    /// Per-head projections, each `d x d_h`.
    pub w_q: Vec<Array2<f64>>,
    pub w_k: Vec<Array2<f64>>,
    pub w_v: Vec<Array2<f64>>,
    /// `d x d` output projection.
    pub w_o: Array2<f64>,
    /// Scoring vector.
    pub r: Array1<f64>,
}

/// Class prototypes, one row per class in ascending label order.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeMatrix {
    pub rows: Array2<f64>,
    pub labels: Vec<usize>,
}

impl PrototypeMatrix {
    pub fn new(rows: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if rows.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} prototypes for {} labels",
                rows.nrows(),
                labels.len()
            )));
        }
        if rows.nrows() < 2 {
            return Err(Error::Shape("need at least two classes".into()));
        }
        Ok(Self { rows, labels })
    }

    pub fn num_classes(&self) -> usize {
        self.rows.nrows()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.rows.view()
    }
}

/// Intermediates of one view kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ViewCache {
    q: Vec<Array2<f64>>,
    k: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    attn: Vec<Array2<f64>>,
    heads_concat: Array2<f64>,
    z_tilde: Array2<f64>,
}

impl ViewCache {
    /// Per-head `c x L` attention weights.
    pub fn attention(&self) -> &[Array2<f64>] {
        &self.attn
    }

    /// `Z + P`.
    pub fn z_tilde(&self) -> &Array2<f64> {
        &self.z_tilde
    }
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

impl FusionParams {
    /// Every entry uniform in `[-1/sqrt(d), 1/sqrt(d)]`, `r` included.
    pub fn init<R: Rng>(d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || d == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "head count {heads} must divide width {d}"
            )));
        }
        let dh = d / heads;
        let a = 1.0 / (d as f64).sqrt();
        let mut mat =
            |rows, cols| Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-a..a));
        let w_q = (0..heads).map(|_| mat(d, dh)).collect();
        let w_k = (0..heads).map(|_| mat(d, dh)).collect();
        let w_v = (0..heads).map(|_| mat(d, dh)).collect();
        let w_o = mat(d, d);
        let r = Array1::from_shape_simple_fn(d, || rng.gen_range(-a..a));
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            r,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Array2<f64>| Array2::zeros(m.raw_dim());
        Self {
            w_q: self.w_q.iter().map(z).collect(),
            w_k: self.w_k.iter().map(z).collect(),
            w_v: self.w_v.iter().map(z).collect(),
            w_o: z(&self.w_o),
            r: Array1::zeros(self.r.len()),
        }
    }

    pub fn heads(&self) -> usize {
        self.w_q.len()
    }

    pub fn dim(&self) -> usize {
        self.w_o.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads()
    }

    fn check_inputs(&self, p: ArrayView2<'_, f64>, x: ArrayView2<'_, f64>) {
        assert_eq!(
            p.ncols(),
            self.dim(),
            "prototype width must equal model width"
        );
        assert_eq!(
            x.ncols(),
            self.dim(),
            "token state width must equal model width"
        );
        assert!(x.nrows() >= 1, "need at least one token state");
    }

    /// Forward pass for one view: returns `s = (Z + P) r` and the cache.
    pub fn forward_view(
        &self,
        p: ArrayView2<'_, f64>,
        x: ArrayView2<'_, f64>,
    ) -> (Array1<f64>, ViewCache) {
        self.check_inputs(p, x);
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let c = p.nrows();
        let mut heads_concat = Array2::zeros((c, self.dim()));
        let mut cache_q = Vec::with_capacity(self.heads());
        let mut cache_k = Vec::with_capacity(self.heads());
        let mut cache_v = Vec::with_capacity(self.heads());
        let mut cache_a = Vec::with_capacity(self.heads());
        for i in 0..self.heads() {
            let q = p.dot(&self.w_q[i]);
            let k = x.dot(&self.w_k[i]);
            let v = x.dot(&self.w_v[i]);
            let mut attn = q.dot(&k.t());
            attn *= scale;
            softmax_rows(&mut attn);
            heads_concat
                .slice_mut(s![.., i * dh..(i + 1) * dh])
                .assign(&attn.dot(&v));
            cache_q.push(q);
            cache_k.push(k);
            cache_v.push(v);
            cache_a.push(attn);
        }
        let z_tilde = heads_concat.dot(&self.w_o) + p;
        let scores = z_tilde.dot(&self.r);
        let cache = ViewCache {
            q: cache_q,
            k: cache_k,
            v: cache_v,
            attn: cache_a,
            heads_concat,
            z_tilde,
        };
        (scores, cache)
    }

    /// `Z = Concat(head_1..head_h) Wo`, `c x d`.
    pub fn cross_attention(&self, p: ArrayView2<'_, f64>, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let (_, cache) = self.forward_view(p, x);
        cache.heads_concat.dot(&self.w_o)
    }

    /// Per-head `c x L` softmax weights.
    pub fn attention_weights(
        &self,
        p: ArrayView2<'_, f64>,
        x: ArrayView2<'_, f64>,
    ) -> Vec<Array2<f64>> {
        self.forward_view(p, x).1.attn
    }

    pub fn view_score(&self, p: ArrayView2<'_, f64>, x: ArrayView2<'_, f64>) -> Array1<f64> {
        self.forward_view(p, x).0
    }

    /// Backward for one view. Parameter gradients are added into `grads`;
    /// returns `(dP, dX)`.
    pub fn backward_view(
        &self,
        p: ArrayView2<'_, f64>,
        x: ArrayView2<'_, f64>,
        cache: &ViewCache,
        d_scores: ArrayView1<'_, f64>,
        grads: &mut FusionParams,
    ) -> (Array2<f64>, Array2<f64>) {
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        grads.r.scaled_add(1.0, &cache.z_tilde.t().dot(&d_scores));
        let d_z = outer(d_scores, self.r.view());
        let mut d_p = d_z.clone();
        grads.w_o.scaled_add(1.0, &cache.heads_concat.t().dot(&d_z));
        let d_concat = d_z.dot(&self.w_o.t());

        let mut d_x = Array2::zeros(x.raw_dim());
        for i in 0..self.heads() {
            let d_head = d_concat.slice(s![.., i * dh..(i + 1) * dh]);
            let attn = &cache.attn[i];
            let d_attn = d_head.dot(&cache.v[i].t());
            let d_v = attn.t().dot(&d_head);
            // softmax backward, row by row
            let row_dot = (&d_attn * attn).sum_axis(Axis(1)).insert_axis(Axis(1));
            let d_logits = attn * &(&d_attn - &row_dot) * scale;
            let d_q = d_logits.dot(&cache.k[i]);
            let d_k = d_logits.t().dot(&cache.q[i]);

            grads.w_q[i].scaled_add(1.0, &p.t().dot(&d_q));
            d_p.scaled_add(1.0, &d_q.dot(&self.w_q[i].t()));
            grads.w_k[i].scaled_add(1.0, &x.t().dot(&d_k));
            d_x.scaled_add(1.0, &d_k.dot(&self.w_k[i].t()));
            grads.w_v[i].scaled_add(1.0, &x.t().dot(&d_v));
            d_x.scaled_add(1.0, &d_v.dot(&self.w_v[i].t()));
        }
        (d_p, d_x)
    }

    /// Adds `other * alpha` tensor-wise.
    pub fn scaled_add(&mut self, alpha: f64, other: &FusionParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.1.iter_mut().zip(b.1) {
                *x += alpha * y;
            }
        }
    }

    /// Named flat views in a fixed order: `w_q.i`, `w_k.i`, `w_v.i` per head,
    /// then `w_o`, `r`.
    pub fn tensors(&self) -> Vec<(String, &[f64], Vec<usize>)> {
        let mut out = Vec::with_capacity(3 * self.heads() + 2);
        for (name, mats) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v)] {
            for (i, m) in mats.iter().enumerate() {
                out.push((
                    format!("{name}.{i}"),
                    m.as_slice().expect("standard layout"),
                    m.shape().to_vec(),
                ));
            }
        }
        out.push((
            "w_o".into(),
            self.w_o.as_slice().expect("standard layout"),
            self.w_o.shape().to_vec(),
        ));
        out.push((
            "r".into(),
            self.r.as_slice().expect("standard layout"),
            self.r.shape().to_vec(),
        ));
        out
    }

    /// Mutable counterpart of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::with_capacity(3 * self.heads() + 2);
        for (name, mats) in [
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
        ] {
            for (i, m) in mats.iter_mut().enumerate() {
                out.push((
                    format!("{name}.{i}"),
                    m.as_slice_mut().expect("standard layout"),
                ));
            }
        }
        out.push((
            "w_o".into(),
            self.w_o.as_slice_mut().expect("standard layout"),
        ));
        out.push(("r".into(), self.r.as_slice_mut().expect("standard layout")));
        out
    }

    /// Named tensor table: count, then per tensor name, shape and row-major data.
    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(MAGIC).map_err(io)?;
        let tensors = self.tensors();
        binio::write_u64(&mut w, tensors.len() as u64).map_err(io)?;
        for (name, data, shape) in tensors {
            binio::write_u32(&mut w, name.len() as u32).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            binio::write_u32(&mut w, shape.len() as u32).map_err(io)?;
            for dim in shape {
                binio::write_u64(&mut w, dim as u64).map_err(io)?;
            }
            binio::write_f64s(&mut w, data).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let bad = |msg: String| Error::Format(format!("{}: {msg}", path.display()));
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        if !binio::read_magic(&mut r, MAGIC).map_err(io)? {
            return Err(bad("not a fusion checkpoint".into()));
        }
        let count = binio::read_u64(&mut r).map_err(io)?;
        if count < 5 || (count - 2) % 3 != 0 {
            return Err(bad(format!("unexpected tensor count {count}")));
        }
        let heads = ((count - 2) / 3) as usize;
        let mut table = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = binio::read_u32(&mut r).map_err(io)? as usize;
            if name_len > 256 {
                return Err(bad("tensor name too long".into()));
            }
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(io)?;
            let name =
                String::from_utf8(name).map_err(|_| bad("tensor name is not utf-8".into()))?;
            let ndim = binio::read_u32(&mut r).map_err(io)? as usize;
            if !(1..=2).contains(&ndim) {
                return Err(bad(format!("tensor `{name}` has rank {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(binio::read_u64(&mut r).map_err(io)?);
            }
            let n = binio::checked_len(shape[0], *shape.get(1).unwrap_or(&1))
                .ok_or_else(|| bad(format!("tensor `{name}` is implausibly large")))?;
            let data = binio::read_f64s(&mut r, n).map_err(io)?;
            table.push((name, shape, data));
        }
        let mut take = |expected: &str| -> Result<(Vec<u64>, Vec<f64>)> {
            let pos = table
                .iter()
                .position(|(n, _, _)| n == expected)
                .ok_or_else(|| bad(format!("missing tensor `{expected}`")))?;
            let (_, shape, data) = table.swap_remove(pos);
            Ok((shape, data))
        };
        let mut mat = |name: String| -> Result<Array2<f64>> {
            let (shape, data) = take(&name)?;
            if shape.len() != 2 {
                return Err(bad(format!("`{name}` must be a matrix")));
            }
            Ok(
                Array2::from_shape_vec((shape[0] as usize, shape[1] as usize), data)
                    .expect("length checked"),
            )
        };
        let w_q = (0..heads)
            .map(|i| mat(format!("w_q.{i}")))
            .collect::<Result<Vec<_>>>()?;
        let w_k = (0..heads)
            .map(|i| mat(format!("w_k.{i}")))
            .collect::<Result<Vec<_>>>()?;
        let w_v = (0..heads)
            .map(|i| mat(format!("w_v.{i}")))
            .collect::<Result<Vec<_>>>()?;
        let w_o = mat("w_o".into())?;
        let (r_shape, r_data) = take("r")?;
        if r_shape.len() != 1 {
            return Err(bad("`r` must be a vector".into()));
        }
        let params = Self {
            w_q,
            w_k,
            w_v,
            w_o,
            r: Array1::from(r_data),
        };
        params.validate().map_err(|e| bad(e.to_string()))?;
        Ok(params)
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        let h = self.heads();
        if h == 0 || !d.is_multiple_of(h) {
            return Err(Error::Shape(format!("{h} heads for width {d}")));
        }
        let dh = d / h;
        let proj_ok = self
            .w_q
            .iter()
            .chain(&self.w_k)
            .chain(&self.w_v)
            .all(|m| m.dim() == (d, dh));
        if !proj_ok || self.w_o.dim() != (d, d) || self.r.len() != d {
            return Err(Error::Shape("inconsistent fusion tensor shapes".into()));
        }
        Ok(())
    }
}

fn outer(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Array2<f64> {
    let col = a.insert_axis(Axis(1));
    let row = b.insert_axis(Axis(0));
    &col * &row
}

/// Column mean or column max of the `m x c` score matrix.
pub fn pool_scores(scores: ArrayView2<'_, f64>, strategy: Pooling) -> Array1<f64> {
    assert!(scores.nrows() >= 1, "cannot pool zero views");
    match strategy {
        // shifted by the first view so that identical views pool to exactly that view
        Pooling::Mean => {
            let first = scores.row(0);
            let m = scores.nrows() as f64;
            let mut out = first.to_owned();
            for row in scores.rows().into_iter().skip(1) {
                out.zip_mut_with(&(&row - &first), |o, d| *o += d / m);
            }
            out
        }
        Pooling::Max => scores.map_axis(Axis(0), |col| {
            col.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        }),
    }
}

/// Gradient of pooling w.r.t. each view. MAX sends the whole column gradient
/// to the first row attaining the maximum.
pub fn pool_backward(
    scores: ArrayView2<'_, f64>,
    strategy: Pooling,
    d_pool: ArrayView1<'_, f64>,
) -> Array2<f64> {
    let m = scores.nrows();
    let mut d_s = Array2::zeros(scores.raw_dim());
    match strategy {
        Pooling::Mean => {
            for mut row in d_s.rows_mut() {
                row.assign(&(&d_pool / m as f64));
            }
        }
        Pooling::Max => {
            for (j, col) in scores.columns().into_iter().enumerate() {
                let mut best = 0;
                for k in 1..m {
                    if col[k] > col[best] {
                        best = k;
                    }
                }
                d_s[[best, j]] = d_pool[j];
            }
        }
    }
    d_s
}

/// Scores every view and pools them. Returns `(s_pool, S)`.
pub fn score_views(
    params: &FusionParams,
    p: ArrayView2<'_, f64>,
    xs: &[ArrayView2<'_, f64>],
    strategy: Pooling,
) -> (Array1<f64>, Array2<f64>) {
    let rows: Vec<Array1<f64>> = xs.par_iter().map(|x| params.view_score(p, *x)).collect();
    let s = stack_rows(&rows, p.nrows());
    (pool_scores(s.view(), strategy), s)
}

pub(crate) fn stack_rows(rows: &[Array1<f64>], width: usize) -> Array2<f64> {
    let mut s = Array2::zeros((rows.len(), width));
    for (mut dst, src) in s.rows_mut().into_iter().zip(rows) {
        dst.assign(src);
    }
    s
}

#[derive(Debug, Clone)]
pub struct FusionBackward {
    pub s_pool: Array1<f64>,
    pub params: FusionParams,
    pub d_p: Array2<f64>,
    pub d_xs: Vec<Array2<f64>>,
}

/// Forward and reverse pass of `pool . score . attention` over all views.
/// Views run in parallel; their gradients are summed in view order.
pub fn fusion_backward(
    params: &FusionParams,
    p: ArrayView2<'_, f64>,
    xs: &[ArrayView2<'_, f64>],
    strategy: Pooling,
    d_pool: ArrayView1<'_, f64>,
) -> FusionBackward {
    let forward: Vec<(Array1<f64>, ViewCache)> =
        xs.par_iter().map(|x| params.forward_view(p, *x)).collect();
    let rows: Vec<Array1<f64>> = forward.iter().map(|(s, _)| s.clone()).collect();
    let s = stack_rows(&rows, p.nrows());
    let s_pool = pool_scores(s.view(), strategy);
    let d_s = pool_backward(s.view(), strategy, d_pool);

    let per_view: Vec<(FusionParams, Array2<f64>, Array2<f64>)> = forward
        .par_iter()
        .zip(xs.par_iter())
        .enumerate()
        .map(|(k, ((_, cache), x))| {
            let mut g = params.zeros_like();
            let (dp, dx) = params.backward_view(p, *x, cache, d_s.row(k), &mut g);
            (g, dp, dx)
        })
        .collect();

    let mut grads = params.zeros_like();
    let mut d_p = Array2::zeros(p.raw_dim());
    let mut d_xs = Vec::with_capacity(xs.len());
    for (g, dp, dx) in per_view {
        grads.scaled_add(1.0, &g);
        d_p += &dp;
        d_xs.push(dx);
    }
    FusionBackward {
        s_pool,
        params: grads,
        d_p,
        d_xs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
    }

    fn setup(
        seed: u64,
        c: usize,
        l: usize,
        d: usize,
        h: usize,
    ) -> (FusionParams, Array2<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = FusionParams::init(d, h, &mut rng).unwrap();
        let p = random(c, d, &mut rng);
        let x = random(l, d, &mut rng);
        (params, p, x)
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(FusionParams::init(10, 4, &mut rng).is_err());
        assert!(FusionParams::init(8, 0, &mut rng).is_err());
    }

    #[test]
    fn single_key_makes_z_independent_of_prototypes() {
        let (params, p, x) = setup(1, 3, 1, 6, 1);
        let z = params.cross_attention(p.view(), x.view());
        let expected = x.dot(&params.w_v[0]).dot(&params.w_o);
        for row in z.rows() {
            for (a, b) in row.iter().zip(expected.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        for w in params.attention_weights(p.view(), x.view()) {
            assert!(w.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn duplicated_views_pool_identically() {
        let row = array![0.1, -0.7, 1.0 / 3.0];
        let s = ndarray::stack(Axis(0), &[row.view(), row.view(), row.view()]).unwrap();
        assert_eq!(pool_scores(s.view(), Pooling::Mean), row);
        assert_eq!(pool_scores(s.view(), Pooling::Max), row);
    }

    #[test]
    fn identical_prototypes_give_identical_rows() {
        let (params, mut p, x) = setup(2, 3, 5, 8, 2);
        let row0 = p.row(0).to_owned();
        p.row_mut(2).assign(&row0);
        let z = params.cross_attention(p.view(), x.view());
        assert_eq!(z.row(0), z.row(2));
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let (params, p, x) = setup(3, 4, 1, 8, 2);
        let x5 = x.broadcast((5, 8)).unwrap().to_owned();
        for w in params.attention_weights(p.view(), x5.view()) {
            assert!(w.iter().all(|&v| (v - 0.2).abs() < 1e-12));
        }
    }

    #[test]
    fn zero_r_and_zero_wo() {
        let (mut params, p, x) = setup(4, 3, 6, 8, 4);
        let mut zero_r = params.clone();
        zero_r.r.fill(0.0);
        assert!(zero_r
            .view_score(p.view(), x.view())
            .iter()
            .all(|&v| v == 0.0));

        params.w_o.fill(0.0);
        let s = params.view_score(p.view(), x.view());
        let residual = p.dot(&params.r);
        assert!((&s - &residual).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn pooling_examples() {
        let s = array![[1.0, 2.0], [3.0, 0.0]];
        assert_eq!(pool_scores(s.view(), Pooling::Mean), array![2.0, 1.0]);
        assert_eq!(pool_scores(s.view(), Pooling::Max), array![3.0, 2.0]);
        let same = array![[0.5, -1.0], [0.5, -1.0], [0.5, -1.0]];
        assert_eq!(pool_scores(same.view(), Pooling::Mean), array![0.5, -1.0]);
        assert_eq!(pool_scores(same.view(), Pooling::Max), array![0.5, -1.0]);
    }

    #[test]
    fn pooling_strategy_parses() {
        assert_eq!("MAX".parse::<Pooling>().unwrap(), Pooling::Max);
        assert_eq!("mean".parse::<Pooling>().unwrap(), Pooling::Mean);
        assert!("median".parse::<Pooling>().is_err());
    }

    #[test]
    fn max_pool_gradient_goes_to_first_argmax() {
        let s = array![[1.0, 5.0], [3.0, 5.0], [3.0, 0.0]];
        let d = pool_backward(s.view(), Pooling::Max, array![1.0, 2.0].view());
        assert_eq!(d, array![[0.0, 2.0], [1.0, 0.0], [0.0, 0.0]]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let (params, p, x) = setup(5, 3, 4, 8, 2);
        let xs = [x.view(), x.view()];
        for strategy in [Pooling::Mean, Pooling::Max] {
            let out = fusion_backward(&params, p.view(), &xs, strategy, Array1::zeros(3).view());
            assert!(out
                .params
                .tensors()
                .iter()
                .all(|(_, t, _)| t.iter().all(|&v| v == 0.0)));
            assert!(out.d_p.iter().all(|&v| v == 0.0));
            assert!(out.d_xs.iter().all(|dx| dx.iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn mean_pool_splits_upstream_evenly() {
        let (params, p, x) = setup(6, 3, 4, 8, 2);
        let d_pool = array![0.3, -0.6, 0.9];
        let single = fusion_backward(&params, p.view(), &[x.view()], Pooling::Mean, d_pool.view());
        let xs = [x.view(), x.view(), x.view()];
        let triple = fusion_backward(&params, p.view(), &xs, Pooling::Mean, d_pool.view());
        for dx in &triple.d_xs {
            let expected = &single.d_xs[0] / 3.0;
            assert!((dx - &expected).iter().all(|v| v.abs() < 1e-12));
        }
        assert!((&triple.d_p - &single.d_p).iter().all(|v| v.abs() < 1e-12));
    }

    fn loss_of(
        params: &FusionParams,
        p: &Array2<f64>,
        xs: &[Array2<f64>],
        strategy: Pooling,
        w: &Array1<f64>,
    ) -> f64 {
        let views: Vec<_> = xs.iter().map(|x| x.view()).collect();
        score_views(params, p.view(), &views, strategy).0.dot(w)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let eps = 1e-5;
        for strategy in [Pooling::Mean, Pooling::Max] {
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            let mut params = FusionParams::init(8, 2, &mut rng).unwrap();
            let mut p = random(3, 8, &mut rng);
            let mut xs = vec![random(5, 8, &mut rng), random(7, 8, &mut rng)];
            let w = Array1::from_shape_simple_fn(3, || rng.gen_range(-1.0..1.0));
            let views: Vec<_> = xs.iter().map(|x| x.view()).collect();
            let out = fusion_backward(&params, p.view(), &views, strategy, w.view());
            let check = |a: f64, n: f64, what: &str| {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
                assert!(rel < 1e-4, "{strategy} {what}: analytic {a} numeric {n}");
            };

            let analytic: Vec<Vec<f64>> = out
                .params
                .tensors()
                .iter()
                .map(|(_, t, _)| t.to_vec())
                .collect();
            for (t, grad) in analytic.iter().enumerate() {
                for (i, &a) in grad.iter().enumerate() {
                    let orig = params.tensors()[t].1[i];
                    params.tensors_mut()[t].1[i] = orig + eps;
                    let up = loss_of(&params, &p, &xs, strategy, &w);
                    params.tensors_mut()[t].1[i] = orig - eps;
                    let down = loss_of(&params, &p, &xs, strategy, &w);
                    params.tensors_mut()[t].1[i] = orig;
                    check(a, (up - down) / (2.0 * eps), "param");
                }
            }
            for idx in 0..p.len() {
                let (r, c) = (idx / 8, idx % 8);
                let orig = p[[r, c]];
                p[[r, c]] = orig + eps;
                let up = loss_of(&params, &p, &xs, strategy, &w);
                p[[r, c]] = orig - eps;
                let down = loss_of(&params, &p, &xs, strategy, &w);
                p[[r, c]] = orig;
                check(out.d_p[[r, c]], (up - down) / (2.0 * eps), "prototype");
            }
            for k in 0..xs.len() {
                for idx in 0..xs[k].len() {
                    let (r, c) = (idx / 8, idx % 8);
                    let orig = xs[k][[r, c]];
                    xs[k][[r, c]] = orig + eps;
                    let up = loss_of(&params, &p, &xs, strategy, &w);
                    xs[k][[r, c]] = orig - eps;
                    let down = loss_of(&params, &p, &xs, strategy, &w);
                    xs[k][[r, c]] = orig;
                    check(
                        out.d_xs[k][[r, c]],
                        (up - down) / (2.0 * eps),
                        "token state",
                    );
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fusion.bin");
        let (params, _, _) = setup(8, 2, 2, 8, 4);
        params.save(&path).unwrap();
        assert_eq!(FusionParams::load(&path).unwrap(), params);
    }

    proptest! {
        #[test]
        fn attention_rows_are_distributions(seed in 0u64..500, c in 1usize..5, l in 1usize..9) {
            let (params, p, x) = setup(seed, c, l, 8, 2);
            for w in params.attention_weights(p.view(), x.view()) {
                for row in w.rows() {
                    prop_assert!(row.iter().all(|&v| v >= 0.0));
                    prop_assert!((row.sum() - 1.0).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn prototype_permutation_is_equivariant(seed in 0u64..500) {
            let (params, p, x) = setup(seed, 4, 6, 8, 2);
            let perm = [2usize, 0, 3, 1];
            let mut pp = p.clone();
            for (dst, &src) in perm.iter().enumerate() {
                pp.row_mut(dst).assign(&p.row(src));
            }
            let s = params.view_score(p.view(), x.view());
            let sp = params.view_score(pp.view(), x.view());
            for (dst, &src) in perm.iter().enumerate() {
                prop_assert!((sp[dst] - s[src]).abs() < 1e-12);
            }
        }

        #[test]
        fn pooling_ignores_view_order(seed in 0u64..500, m in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random(m, 4, &mut rng);
            let mut rev = s.clone();
            rev.invert_axis(Axis(0));
            for strategy in [Pooling::Mean, Pooling::Max] {
                let a = pool_scores(s.view(), strategy);
                let b = pool_scores(rev.view(), strategy);
                prop_assert!((&a - &b).iter().all(|v| v.abs() < 1e-12));
            }
            let mean = pool_scores(s.view(), Pooling::Mean);
            let max = pool_scores(s.view(), Pooling::Max);
            prop_assert!(max.iter().zip(&mean).all(|(a, b)| a >= b));
        }
    }
}
