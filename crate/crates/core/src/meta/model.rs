//! Per-episode orchestration: prototypes, retrieval, fusion scoring and the
//! reverse pass through fusion and encoder.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::episode::Episode;
use super::loss::{argmax, nll, nll_grad};
use crate::config::{ScorerKind, TrainConfig, ViewMode};
use crate::corpus::{
    format_concat_input, format_fusion_input, format_sentence, Passage, TokenId, Vocabulary,
};
use crate::encoder::{accumulate_grad, sentence_embedding, EncoderParams, Upstream};
use crate::error::{Error, Result};
use crate::fusion::{
    pool_backward, pool_scores, stack_rows, FusionParams, Pooling, PrototypeMatrix, ViewCache,
};
use crate::retriever::{build_index, FrozenEmbedder, Hit, PassageIndex};

/// All trainable state.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: EncoderParams,
    pub fusion: FusionParams,
}

/// Gradients shaped like [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub encoder: Array2<f64>,
    pub fusion: FusionParams,
}

impl Model {
    pub fn init(vocab_size: usize, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let encoder = match cfg.embed_init {
            Some(a) => EncoderParams::init_with_scale(vocab_size, cfg.d, a, cfg.seed),
            None => EncoderParams::init(vocab_size, cfg.d, cfg.seed),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9));
        let fusion = FusionParams::init(cfg.d, cfg.h, &mut rng)?;
        Ok(Self { encoder, fusion })
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            encoder: Array2::zeros(self.encoder.embeddings.raw_dim()),
            fusion: self.fusion.zeros_like(),
        }
    }

    /// Encoder table first, then the fusion tensors in their fixed order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self
            .encoder
            .embeddings
            .as_slice_mut()
            .expect("standard layout")];
        out.extend(self.fusion.tensors_mut().into_iter().map(|(_, t)| t));
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = vec!["embeddings".to_string()];
        out.extend(self.fusion.tensors().into_iter().map(|(n, _, _)| n));
        out
    }

    /// Writes `encoder.bin` and `fusion.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.encoder.save(&dir.join("encoder.bin"))?;
        self.fusion.save(&dir.join("fusion.bin"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let encoder = EncoderParams::load(&dir.join("encoder.bin"))?;
        let fusion = FusionParams::load(&dir.join("fusion.bin"))?;
        if encoder.dim() != fusion.dim() {
            return Err(Error::Format(format!(
                "encoder width {} does not match fusion width {}",
                encoder.dim(),
                fusion.dim()
            )));
        }
        Ok(Self { encoder, fusion })
    }
}

impl ModelGrads {
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = vec![self.encoder.as_slice().expect("standard layout")];
        out.extend(self.fusion.tensors().into_iter().map(|(_, t, _)| t));
        out
    }

    pub fn scaled_add(&mut self, alpha: f64, other: &ModelGrads) {
        self.encoder.scaled_add(alpha, &other.encoder);
        self.fusion.scaled_add(alpha, &other.fusion);
    }
}

type RetrievalCache = HashMap<(Vec<String>, usize), Vec<Hit>>;

/// Frozen retriever together with the passage store it indexes.
pub struct KnowledgeBase {
    pub embedder: FrozenEmbedder,
    pub index: PassageIndex,
    passages: HashMap<u64, Passage>,
    cache: Option<Mutex<RetrievalCache>>,
}

impl KnowledgeBase {
    pub fn new(
        embedder: FrozenEmbedder,
        index: PassageIndex,
        passages: Vec<Passage>,
    ) -> Result<Self> {
        if index.dim() != embedder.dim() && !index.is_empty() {
            return Err(Error::Shape(format!(
                "index width {} does not match embedder width {}",
                index.dim(),
                embedder.dim()
            )));
        }
        let passages: HashMap<u64, Passage> =
            passages.into_iter().map(|p| (p.passage_id, p)).collect();
        if let Some(missing) = index.ids().iter().find(|id| !passages.contains_key(id)) {
            return Err(Error::Format(format!(
                "index refers to unknown passage {missing}"
            )));
        }
        Ok(Self {
            embedder,
            index,
            passages,
            cache: None,
        })
    }

    /// Creates the embedder and indexes `passages`.
    pub fn build(vocab: &Vocabulary, passages: Vec<Passage>, d_r: usize, seed: u64) -> Self {
        let embedder = FrozenEmbedder::new(vocab.len(), d_r, seed);
        let index = build_index(&embedder, vocab, &passages);
        Self::new(embedder, index, passages).expect("freshly built index is consistent")
    }

    /// Memoizes retrieval results by query text.
    pub fn with_cache(mut self) -> Self {
        self.cache = Some(Mutex::new(HashMap::new()));
        self
    }

    pub fn passage(&self, id: u64) -> Option<&Passage> {
        self.passages.get(&id)
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn retrieve(&self, vocab: &Vocabulary, query: &[String], m: usize) -> Vec<Hit> {
        if m == 0 || self.index.is_empty() {
            return Vec::new();
        }
        let key = || (query.to_vec(), m);
        if let Some(cache) = &self.cache {
            if let Some(hits) = cache.lock().expect("cache lock").get(&key()) {
                return hits.clone();
            }
        }
        let qv = self.embedder.embed_text(vocab, query);
        let hits = self.index.top_m(qv.view(), m);
        if let Some(cache) = &self.cache {
            cache
                .lock()
                .expect("cache lock")
                .insert(key(), hits.clone());
        }
        hits
    }
}

/// Everything scoring needs besides the trainable model.
#[derive(Clone, Copy)]
pub struct Context<'a> {
    pub vocab: &'a Vocabulary,
    pub kb: &'a KnowledgeBase,
    pub m: usize,
    pub strategy: Pooling,
    pub max_len: usize,
    pub view_mode: ViewMode,
    pub scorer: ScorerKind,
}

impl<'a> Context<'a> {
    pub fn new(vocab: &'a Vocabulary, kb: &'a KnowledgeBase, cfg: &TrainConfig) -> Self {
        Self {
            vocab,
            kb,
            m: cfg.m,
            strategy: cfg.strategy,
            max_len: cfg.max_len,
            view_mode: cfg.view_mode,
            scorer: cfg.scorer,
        }
    }

    /// Fills `episode.retrieved` with the top-m passages of every query.
    pub fn attach_retrieval(&self, episode: &mut Episode) {
        episode.retrieved = episode
            .query
            .iter()
            .map(|q| self.kb.retrieve(self.vocab, &q.sentence, self.m))
            .collect();
    }

    /// Fusion inputs for one query: one per passage in parallel mode, a single
    /// concatenation in concat mode, or the passage-absent input when nothing
    /// was retrieved.
    pub fn view_inputs(&self, query: &[String], hits: &[Hit]) -> Result<Vec<Vec<TokenId>>> {
        let passages: Vec<&Passage> = hits
            .iter()
            .map(|h| {
                self.kb
                    .passage(h.passage_id)
                    .ok_or_else(|| Error::Format(format!("unknown passage {}", h.passage_id)))
            })
            .collect::<Result<_>>()?;
        if passages.is_empty() {
            return Ok(vec![format_fusion_input(
                self.vocab,
                query,
                None,
                self.max_len,
            )?]);
        }
        match self.view_mode {
            ViewMode::Parallel => passages
                .iter()
                .map(|p| format_fusion_input(self.vocab, query, Some(p), self.max_len))
                .collect(),
            ViewMode::Concat => {
                let budget = self.max_len.saturating_mul(passages.len());
                Ok(vec![format_concat_input(
                    self.vocab, query, &passages, budget,
                )?])
            }
        }
    }
}

/// Row `z` is the mean of the embeddings in `groups[z]`.
pub fn compute_prototypes(
    groups: &[Vec<Array1<f64>>],
    labels: Vec<usize>,
) -> Result<PrototypeMatrix> {
    let d = groups
        .iter()
        .flatten()
        .next()
        .map(|f| f.len())
        .ok_or_else(|| Error::Shape("no support embeddings".into()))?;
    let mut rows = Array2::zeros((groups.len(), d));
    for (mut row, group) in rows.rows_mut().into_iter().zip(groups) {
        if group.is_empty() {
            return Err(Error::Shape("empty support class".into()));
        }
        for f in group {
            row += f;
        }
        row /= group.len() as f64;
    }
    PrototypeMatrix::new(rows, labels)
}

struct SupportEncoding {
    ids: Vec<Vec<Vec<TokenId>>>,
    prototypes: PrototypeMatrix,
}

fn encode_support(model: &Model, vocab: &Vocabulary, episode: &Episode) -> Result<SupportEncoding> {
    let ids: Vec<Vec<Vec<TokenId>>> = episode
        .support
        .iter()
        .map(|class| {
            class
                .iter()
                .map(|ex| format_sentence(vocab, &ex.sentence))
                .collect()
        })
        .collect();
    let groups: Vec<Vec<Array1<f64>>> = ids
        .iter()
        .map(|class| class.iter().map(|s| model.encoder.embed(s)).collect())
        .collect();
    let prototypes = compute_prototypes(&groups, episode.classes.clone())?;
    Ok(SupportEncoding { ids, prototypes })
}

/// Prototype matrix of an episode's support set.
pub fn episode_prototypes(
    model: &Model,
    vocab: &Vocabulary,
    episode: &Episode,
) -> Result<PrototypeMatrix> {
    Ok(encode_support(model, vocab, episode)?.prototypes)
}

/// `s_z = -||f - p_z||^2`.
pub fn protonet_score(f_query: &Array1<f64>, prototypes: ArrayView2<'_, f64>) -> Array1<f64> {
    prototypes
        .rows()
        .into_iter()
        .map(|p| {
            -p.iter()
                .zip(f_query)
                .map(|(a, b)| (b - a) * (b - a))
                .sum::<f64>()
        })
        .collect()
}

/// Pooled class scores for a single query: retrieves, formats, encodes and
/// fuses its views.
pub fn score_query(
    model: &Model,
    ctx: &Context<'_>,
    prototypes: &PrototypeMatrix,
    query: &[String],
) -> Result<Array1<f64>> {
    let hits = ctx.kb.retrieve(ctx.vocab, query, ctx.m);
    score_query_with_hits(model, ctx, prototypes, query, &hits)
}

fn score_query_with_hits(
    model: &Model,
    ctx: &Context<'_>,
    prototypes: &PrototypeMatrix,
    query: &[String],
    hits: &[Hit],
) -> Result<Array1<f64>> {
    match ctx.scorer {
        ScorerKind::Protonet => {
            let f = model.encoder.embed(&format_sentence(ctx.vocab, query));
            Ok(protonet_score(&f, prototypes.view()))
        }
        ScorerKind::Fusion => {
            let inputs = ctx.view_inputs(query, hits)?;
            let rows: Vec<Array1<f64>> = inputs
                .par_iter()
                .map(|ids| {
                    let x = model.encoder.encode_sequence(ids);
                    model.fusion.view_score(prototypes.view(), x.view())
                })
                .collect();
            let s = stack_rows(&rows, prototypes.num_classes());
            Ok(pool_scores(s.view(), ctx.strategy))
        }
    }
}

/// Pooled scores for every query of an episode whose retrieval is attached.
pub fn episode_scores(
    model: &Model,
    ctx: &Context<'_>,
    episode: &Episode,
) -> Result<Vec<Array1<f64>>> {
    let support = encode_support(model, ctx.vocab, episode)?;
    episode
        .query
        .iter()
        .zip(&episode.retrieved)
        .map(|(q, hits)| score_query_with_hits(model, ctx, &support.prototypes, &q.sentence, hits))
        .collect()
}

/// Mean query NLL of one episode, forward only.
pub fn episode_loss_value(model: &Model, ctx: &Context<'_>, episode: &Episode) -> Result<f64> {
    let scores = episode_scores(model, ctx, episode)?;
    let total: f64 = scores
        .iter()
        .zip(episode.targets())
        .map(|(s, y)| nll(s.view(), y).0)
        .sum();
    Ok(total / scores.len() as f64)
}

/// Mean of [`episode_loss_value`] over a batch.
pub fn batch_loss_value(model: &Model, ctx: &Context<'_>, episodes: &[Episode]) -> Result<f64> {
    let mut total = 0.0;
    for ep in episodes {
        total += episode_loss_value(model, ctx, ep)?;
    }
    Ok(total / episodes.len() as f64)
}

#[derive(Debug, Clone)]
pub struct EpisodeGrad {
    pub loss: f64,
    pub correct: usize,
    pub queries: usize,
    pub clamped: usize,
    pub grads: ModelGrads,
}

struct ViewPass {
    ids: Vec<TokenId>,
    x: Array2<f64>,
    scores: Array1<f64>,
    cache: ViewCache,
}

/// Loss, accuracy and exact gradients of one episode's mean query NLL.
pub fn episode_grad(model: &Model, ctx: &Context<'_>, episode: &Episode) -> Result<EpisodeGrad> {
    let support = encode_support(model, ctx.vocab, episode)?;
    let p = support.prototypes.view();
    let n_query = episode.query.len();
    let mut grads = model.zero_grads();
    let mut d_p = Array2::zeros(p.raw_dim());
    let mut loss = 0.0;
    let mut correct = 0;
    let mut clamped = 0;

    for (query, hits) in episode.query.iter().zip(&episode.retrieved) {
        let target = episode.target(query);
        match ctx.scorer {
            ScorerKind::Fusion => {
                let inputs = ctx.view_inputs(&query.sentence, hits)?;
                let passes: Vec<ViewPass> = inputs
                    .into_par_iter()
                    .map(|ids| {
                        let x = model.encoder.encode_sequence(&ids).0;
                        let (scores, cache) = model.fusion.forward_view(p, x.view());
                        ViewPass {
                            ids,
                            x,
                            scores,
                            cache,
                        }
                    })
                    .collect();
                let rows: Vec<Array1<f64>> = passes.iter().map(|v| v.scores.clone()).collect();
                let s = stack_rows(&rows, p.nrows());
                let s_pool = pool_scores(s.view(), ctx.strategy);
                let (l, hit_floor) = nll(s_pool.view(), target);
                loss += l;
                clamped += usize::from(hit_floor);
                correct += usize::from(argmax(s_pool.view()) == target);

                let d_pool = nll_grad(s_pool.view(), target) / n_query as f64;
                let d_s = pool_backward(s.view(), ctx.strategy, d_pool.view());
                let per_view: Vec<(FusionParams, Array2<f64>, Array2<f64>)> = passes
                    .par_iter()
                    .enumerate()
                    .map(|(k, v)| {
                        let mut g = model.fusion.zeros_like();
                        let (dp, dx) =
                            model
                                .fusion
                                .backward_view(p, v.x.view(), &v.cache, d_s.row(k), &mut g);
                        (g, dp, dx)
                    })
                    .collect();
                for ((g, dp, dx), pass) in per_view.iter().zip(&passes) {
                    grads.fusion.scaled_add(1.0, g);
                    d_p += dp;
                    accumulate_grad(&mut grads.encoder, &pass.ids, Upstream::States(dx.view()));
                }
            }
            ScorerKind::Protonet => {
                let ids = format_sentence(ctx.vocab, &query.sentence);
                let f = sentence_embedding(&model.encoder.encode_sequence(&ids));
                let s = protonet_score(&f, p);
                let (l, hit_floor) = nll(s.view(), target);
                loss += l;
                clamped += usize::from(hit_floor);
                correct += usize::from(argmax(s.view()) == target);
                let d_s = nll_grad(s.view(), target) / n_query as f64;
                let mut d_f = Array1::zeros(f.len());
                for (z, proto) in p.rows().into_iter().enumerate() {
                    let diff = &f - &proto;
                    d_f.scaled_add(-2.0 * d_s[z], &diff);
                    d_p.row_mut(z).scaled_add(2.0 * d_s[z], &diff);
                }
                accumulate_grad(&mut grads.encoder, &ids, Upstream::Pooled(d_f.view()));
            }
        }
    }

    for (z, class) in support.ids.iter().enumerate() {
        let d_f = &d_p.row(z) / class.len() as f64;
        for ids in class {
            accumulate_grad(&mut grads.encoder, ids, Upstream::Pooled(d_f.view()));
        }
    }

    Ok(EpisodeGrad {
        loss: loss / n_query as f64,
        correct,
        queries: n_query,
        clamped,
        grads,
    })
}

/// Batch loss and gradients averaged over episodes.
pub fn batch_grad(model: &Model, ctx: &Context<'_>, episodes: &[Episode]) -> Result<EpisodeGrad> {
    assert!(!episodes.is_empty(), "empty batch");
    let scale = 1.0 / episodes.len() as f64;
    let mut total = EpisodeGrad {
        loss: 0.0,
        correct: 0,
        queries: 0,
        clamped: 0,
        grads: model.zero_grads(),
    };
    for ep in episodes {
        let g = episode_grad(model, ctx, ep)?;
        total.loss += g.loss * scale;
        total.correct += g.correct;
        total.queries += g.queries;
        total.clamped += g.clamped;
        total.grads.scaled_add(scale, &g.grads);
    }
    Ok(total)
}
