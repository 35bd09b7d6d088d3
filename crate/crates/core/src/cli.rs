//! The `ragmeta` command line.
//!
//! Commands read a TOML run config (`--config`) whose `[train]` table holds
//! [`TrainConfig`] fields and whose `[paths]` table names the inputs and the
//! work directory. Flags override the file. Tables go to stdout, logs to
//! stderr.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ScorerKind, TrainConfig, ViewMode};
use crate::corpus::{
    build_vocabulary, chunk_corpus, format_sentence, read_corpus, read_passages, tokenize,
    write_passages, Vocabulary, DEFAULT_WINDOW, UNK,
};
use crate::error::{Error, Result};
use crate::fusion::{Pooling, PrototypeMatrix};
use crate::meta::eval::{report_csv, ReportRow};
use crate::meta::train::write_metrics;
use crate::meta::{
    compute_prototypes, episode_grad, evaluate, sample_episode, train, Context, Dataset, Episode,
    KnowledgeBase, Model,
};
use crate::retriever::{build_index, FrozenEmbedder, PassageIndex};
use crate::synth::SynthConfig;

#[derive(Debug, Parser)]
#[command(
    name = "ragmeta",
    version,
    about = "Retrieval-augmented few-shot text classification"
)]
pub struct Cli {
    #[command(flatten)]
    pub shared: SharedArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SharedArgs {
    /// TOML run config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Retrieved passages per query.
    #[arg(long, global = true)]
    pub m: Option<usize>,
    #[arg(long, global = true)]
    pub strategy: Option<Pooling>,
    /// Classes per episode.
    #[arg(long, global = true)]
    pub c: Option<usize>,
    /// Support examples per class.
    #[arg(long, global = true)]
    pub n: Option<usize>,
    /// Queries per episode.
    #[arg(long, global = true)]
    pub q: Option<usize>,
    /// Work directory for passages, vocabulary, index and checkpoints.
    #[arg(long, global = true)]
    pub work: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the bundled synthetic benchmark and a matching run config.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Chunk the corpus into passages and build the vocabulary.
    Ingest {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Embed every passage with the frozen retriever.
    BuildIndex,
    /// Episodic meta-training.
    Train {
        #[arg(long)]
        scorer: Option<ScorerKind>,
    },
    /// Meta-test every trained checkpoint and print the report table.
    Eval {
        #[arg(long, default_value_t = 600)]
        episodes: usize,
    },
    /// Accuracy as a function of the number of retrieved passages.
    SweepPassages {
        /// Comma-separated m values.
        #[arg(long, value_delimiter = ',', default_value = "0,1,3,5,7")]
        ms: Vec<usize>,
        /// Evaluate the trained checkpoint at each m instead of retraining.
        #[arg(long)]
        no_train: bool,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
    },
    /// Time one training episode with parallel views and with all passages concatenated.
    BenchFusion {
        #[arg(long, default_value_t = 50)]
        episodes: usize,
    },
    /// Dump attention weights of the trained model for one query.
    Inspect {
        #[arg(long)]
        query: String,
        /// Labeled JSONL whose first n examples per class form the prototypes.
        #[arg(long)]
        support: PathBuf,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub work: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        // relative paths are taken from the config file's directory
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.paths.corpus,
            &mut cfg.paths.train,
            &mut cfg.paths.val,
            &mut cfg.paths.test,
            &mut cfg.paths.work,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn resolve(shared: &SharedArgs) -> Result<Self> {
        let mut cfg = match &shared.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        let t = &mut cfg.train;
        if let Some(v) = shared.seed {
            t.seed = v;
        }
        if let Some(v) = shared.m {
            t.m = v;
        }
        if let Some(v) = shared.strategy {
            t.strategy = v;
        }
        if let Some(v) = shared.c {
            t.c = v;
        }
        if let Some(v) = shared.n {
            t.n = v;
        }
        if let Some(v) = shared.q {
            t.q = v;
        }
        if let Some(w) = &shared.work {
            cfg.paths.work = Some(w.clone());
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn work_dir(&self) -> PathBuf {
        self.paths
            .work
            .clone()
            .unwrap_or_else(|| PathBuf::from("work"))
    }

    fn split(&self, name: &str, path: &Option<PathBuf>) -> Result<PathBuf> {
        path.clone()
            .ok_or_else(|| Error::Config(format!("no {name} split configured under [paths]")))
    }
}

/// Artifact locations inside the work directory.
struct Work(PathBuf);

impl Work {
    fn passages(&self) -> PathBuf {
        self.0.join("passages.jsonl")
    }
    fn vocab(&self) -> PathBuf {
        self.0.join("vocab.txt")
    }
    fn index(&self) -> PathBuf {
        self.0.join("index.bin")
    }
    fn model(&self, scorer: ScorerKind) -> PathBuf {
        self.0.join(format!("model-{scorer}"))
    }
    fn metrics(&self, scorer: ScorerKind) -> PathBuf {
        self.0.join(format!("metrics-{scorer}.csv"))
    }
    fn report(&self) -> PathBuf {
        self.0.join("report.csv")
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_vocab_and_kb(work: &Work, cfg: &TrainConfig) -> Result<(Vocabulary, KnowledgeBase)> {
    load_knowledge_base(&work.0, cfg.cache_retrieval)
}

/// Vocabulary and retriever from a work directory prepared by `ingest` and
/// `build-index`.
pub fn load_knowledge_base(work_dir: &Path, cache: bool) -> Result<(Vocabulary, KnowledgeBase)> {
    let work = Work(work_dir.to_path_buf());
    let vocab = Vocabulary::load(&work.vocab())?;
    let passages = read_passages(&work.passages())?;
    let index = PassageIndex::load(&work.index())?;
    if index.len() != passages.len() {
        return Err(Error::Format(format!(
            "index holds {} passages but the store holds {}; rerun build-index",
            index.len(),
            passages.len()
        )));
    }
    let embedder = FrozenEmbedder::new(vocab.len(), index.dim(), index.embedder_seed());
    let kb = KnowledgeBase::new(embedder, index, passages)?;
    Ok((vocab, if cache { kb.with_cache() } else { kb }))
}

/// Checkpoint plus the config it was trained with.
pub fn save_checkpoint(dir: &Path, model: &Model, cfg: &TrainConfig) -> Result<()> {
    model.save(dir)?;
    let path = dir.join("train.toml");
    let text = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(Model, TrainConfig)> {
    let model = Model::load(dir)?;
    let path = dir.join("train.toml");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let cfg =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok((model, cfg))
}

fn emit(out: &mut dyn std::io::Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io(Path::new("<stdout>"), e))
}

pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> Result<()> {
    let cfg = RunConfig::resolve(&cli.shared)?;
    let work = Work(cfg.work_dir());
    match cli.command {
        Command::Synth { out: dir } => cmd_synth(&dir, &cfg, out),
        Command::Ingest { corpus } => {
            let corpus = match corpus {
                Some(p) => p,
                None => cfg.split("corpus", &cfg.paths.corpus)?,
            };
            cmd_ingest(&corpus, cfg.paths.train.as_deref(), &work, out)
        }
        Command::BuildIndex => cmd_build_index(&cfg.train, &work, out),
        Command::Train { scorer } => {
            let mut t = cfg.train.clone();
            if let Some(s) = scorer {
                t.scorer = s;
            }
            cmd_train(&t, &cfg, &work).map(|_| ())
        }
        Command::Eval { episodes } => cmd_eval(&cfg, &work, episodes, out),
        Command::SweepPassages {
            ms,
            no_train,
            episodes,
        } => cmd_sweep_passages(&cfg, &work, &ms, no_train, episodes, out),
        Command::BenchFusion { episodes } => cmd_bench_fusion(&cfg, &work, episodes, out),
        Command::Inspect { query, support } => cmd_inspect(&cfg, &work, &query, &support, out),
    }
}

fn cmd_synth(dir: &Path, cfg: &RunConfig, out: &mut dyn std::io::Write) -> Result<()> {
    let synth = SynthConfig {
        seed: cfg.train.seed.wrapping_add(SynthConfig::default().seed),
        ..SynthConfig::default()
    };
    let bench = synth.generate()?;
    bench.write(dir)?;
    let run = RunConfig {
        paths: Paths {
            corpus: Some("corpus.jsonl".into()),
            train: Some("train.jsonl".into()),
            val: Some("val.jsonl".into()),
            test: Some("test.jsonl".into()),
            work: Some("work".into()),
        },
        train: synthetic_train_config(),
    };
    let path = dir.join("ragmeta.toml");
    let text = toml::to_string(&run).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    emit(out, &format!("{}\n", path.display()))
}

/// Settings that train the synthetic benchmark in well under a minute.
pub fn synthetic_train_config() -> TrainConfig {
    TrainConfig {
        c: 5,
        n: 1,
        q: 5,
        m: 5,
        d: 64,
        d_r: 128,
        h: 4,
        embed_init: Some(1.0),
        max_len: 48,
        max_lr: 3e-4,
        warmup_steps: 200,
        decay_steps: 1800,
        val_episodes: 0,
        cache_retrieval: true,
        ..TrainConfig::default()
    }
}

fn cmd_ingest(
    corpus: &Path,
    train: Option<&Path>,
    work: &Work,
    out: &mut dyn std::io::Write,
) -> Result<()> {
    let docs = read_corpus(corpus)?;
    if docs.is_empty() {
        log::warn!("{} holds no documents", corpus.display());
    }
    let passages = chunk_corpus(&docs, DEFAULT_WINDOW);
    let sentences = match train {
        Some(p) => Some(Dataset::load(p)?),
        None => None,
    };
    let vocab = build_vocabulary(&docs, sentences.iter().flat_map(|d| d.sentences()), 1);
    create_dir(&work.0)?;
    write_passages(&work.passages(), &passages)?;
    vocab.save(&work.vocab())?;
    log::info!("vocabulary of {} tokens", vocab.len());
    emit(out, &format!("{}\n", passages.len()))
}

fn cmd_build_index(cfg: &TrainConfig, work: &Work, out: &mut dyn std::io::Write) -> Result<()> {
    let vocab = Vocabulary::load(&work.vocab())?;
    let passages = read_passages(&work.passages())?;
    let embedder = FrozenEmbedder::new(vocab.len(), cfg.d_r, cfg.seed);
    let index = build_index(&embedder, &vocab, &passages);
    index.save(&work.index())?;
    emit(out, &format!("{}\n", index.len()))
}

fn cmd_train(t: &TrainConfig, cfg: &RunConfig, work: &Work) -> Result<Model> {
    let (vocab, kb) = load_vocab_and_kb(work, t)?;
    let train_set = Dataset::load(&cfg.split("train", &cfg.paths.train)?)?;
    let val_set = match &cfg.paths.val {
        Some(p) if t.val_episodes > 0 => Some(Dataset::load(p)?),
        _ => None,
    };
    let ctx = Context::new(&vocab, &kb, t);
    let model = Model::init(vocab.len(), t)?;
    log::info!("training {} for {} steps", t.scorer, t.total_steps());
    let outcome = train(t, model, &ctx, &train_set, val_set.as_ref())?;
    if outcome.stopped_early {
        log::info!(
            "stopped early, best validation accuracy {:?}",
            outcome.best_val
        );
    }
    let dir = work.model(t.scorer);
    save_checkpoint(&dir, &outcome.model, t)?;
    write_metrics(&work.metrics(t.scorer), &outcome.log)?;
    Ok(outcome.model)
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn cmd_eval(
    cfg: &RunConfig,
    work: &Work,
    episodes: usize,
    out: &mut dyn std::io::Write,
) -> Result<()> {
    let test_path = cfg.split("test", &cfg.paths.test)?;
    let test = Dataset::load(&test_path)?;
    let mut rows = Vec::new();
    for scorer in [ScorerKind::Fusion, ScorerKind::Protonet] {
        let dir = work.model(scorer);
        if !dir.exists() {
            log::info!("no {scorer} checkpoint under {}", work.0.display());
            continue;
        }
        let (model, mut t) = load_checkpoint(&dir)?;
        t.seed = cfg.train.seed;
        t.c = cfg.train.c;
        t.n = cfg.train.n;
        t.q = cfg.train.q;
        t.m = cfg.train.m;
        t.strategy = cfg.train.strategy;
        let (vocab, kb) = load_vocab_and_kb(work, &t)?;
        let ctx = Context::new(&vocab, &kb, &t);
        let c = t.c.min(test.num_classes());
        if c < t.c {
            log::warn!(
                "test split has {} classes; evaluating {c}-way",
                test.num_classes()
            );
        }
        let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
        let report = evaluate(&model, &ctx, &test, (c, t.n, t.q), episodes, &mut rng)?;
        rows.push(ReportRow {
            dataset: dataset_name(&test_path),
            model: scorer.to_string(),
            c,
            n: t.n,
            m: if scorer == ScorerKind::Protonet {
                0
            } else {
                t.m
            },
            strategy: t.strategy.to_string(),
            mean_accuracy: report.mean,
            std_error: report.std_err,
        });
    }
    if rows.is_empty() {
        return Err(Error::Config(format!(
            "no checkpoints under {}; run train first",
            work.0.display()
        )));
    }
    let csv = report_csv(&rows);
    std::fs::write(work.report(), &csv).map_err(|e| Error::io(work.report(), e))?;
    emit(out, &csv)
}

/// Keeps the first occurrence of every value.
pub fn dedup_ms(ms: &[usize]) -> Vec<usize> {
    let mut seen = BTreeSet::new();
    let kept: Vec<usize> = ms.iter().copied().filter(|m| seen.insert(*m)).collect();
    if kept.len() < ms.len() {
        log::warn!("duplicate m values dropped; sweeping {kept:?}");
    }
    kept
}

fn cmd_sweep_passages(
    cfg: &RunConfig,
    work: &Work,
    ms: &[usize],
    no_train: bool,
    episodes: usize,
    out: &mut dyn std::io::Write,
) -> Result<()> {
    let test = Dataset::load(&cfg.split("test", &cfg.paths.test)?)?;
    let trained = if no_train {
        Some(load_checkpoint(&work.model(ScorerKind::Fusion))?)
    } else {
        None
    };
    emit(out, "m,accuracy,std_error\n")?;
    for m in dedup_ms(ms) {
        let point = || -> Result<(f64, f64)> {
            let (model, mut t) = match &trained {
                Some((model, t)) => (model.clone(), t.clone()),
                None => {
                    let t = TrainConfig {
                        m,
                        ..cfg.train.clone()
                    };
                    let (vocab, kb) = load_vocab_and_kb(work, &t)?;
                    let ctx = Context::new(&vocab, &kb, &t);
                    let train_set = Dataset::load(&cfg.split("train", &cfg.paths.train)?)?;
                    let model =
                        train(&t, Model::init(vocab.len(), &t)?, &ctx, &train_set, None)?.model;
                    (model, t)
                }
            };
            t.m = m;
            let (vocab, kb) = load_vocab_and_kb(work, &t)?;
            let ctx = Context::new(&vocab, &kb, &t);
            let c = t.c.min(test.num_classes());
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            let r = evaluate(&model, &ctx, &test, (c, t.n, t.q), episodes, &mut rng)?;
            Ok((r.mean, r.std_err))
        };
        match point() {
            Ok((acc, se)) => emit(out, &format!("{m},{acc},{se}\n"))?,
            Err(e) => log::error!("m={m}: {e}"),
        }
    }
    Ok(())
}

/// Mean seconds per training episode (forward and backward) for each view
/// mode, on the same pre-sampled episodes.
pub fn bench_modes(
    model: &Model,
    vocab: &Vocabulary,
    kb: &KnowledgeBase,
    t: &TrainConfig,
    episodes: &[Episode],
) -> Result<Vec<(ViewMode, f64)>> {
    let mut results = Vec::new();
    for mode in [ViewMode::Parallel, ViewMode::Concat] {
        let tm = TrainConfig {
            view_mode: mode,
            ..t.clone()
        };
        let ctx = Context::new(vocab, kb, &tm);
        // one untimed pass warms caches and the thread pool
        episode_grad(model, &ctx, &episodes[0])?;
        let start = Instant::now();
        for ep in episodes {
            episode_grad(model, &ctx, ep)?;
        }
        results.push((mode, start.elapsed().as_secs_f64() / episodes.len() as f64));
    }
    Ok(results)
}

fn cmd_bench_fusion(
    cfg: &RunConfig,
    work: &Work,
    episodes: usize,
    out: &mut dyn std::io::Write,
) -> Result<()> {
    let episodes = if episodes < 50 {
        log::warn!("timing needs at least 50 episodes; using 50");
        50
    } else {
        episodes
    };
    let t = &cfg.train;
    let (vocab, kb) = load_vocab_and_kb(work, t)?;
    let train_set = Dataset::load(&cfg.split("train", &cfg.paths.train)?)?;
    let model = match load_checkpoint(&work.model(ScorerKind::Fusion)) {
        Ok((m, _)) => m,
        Err(_) => Model::init(vocab.len(), t)?,
    };
    let ctx = Context::new(&vocab, &kb, t);
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let mut eps = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut ep = sample_episode(&train_set, t.c, t.n, t.q, &mut rng)?;
        ctx.attach_retrieval(&mut ep);
        eps.push(ep);
    }
    let mut csv = String::from("mode,m,seconds_per_episode\n");
    for (mode, secs) in bench_modes(&model, &vocab, &kb, t, &eps)? {
        writeln!(csv, "{mode},{},{secs}", t.m).expect("write to string");
    }
    emit(out, &csv)
}

/// Prototypes from the first `n` examples of every class in `support`.
pub fn prototypes_from(
    model: &Model,
    vocab: &Vocabulary,
    support: &Dataset,
    n: usize,
) -> Result<PrototypeMatrix> {
    let mut groups = Vec::new();
    let mut labels = Vec::new();
    for (&label, examples) in &support.by_class {
        let group: Vec<Array1<f64>> = examples
            .iter()
            .take(n)
            .map(|ex| model.encoder.embed(&format_sentence(vocab, &ex.sentence)))
            .collect();
        if group.is_empty() {
            continue;
        }
        groups.push(group);
        labels.push(label);
    }
    compute_prototypes(&groups, labels)
}

fn cmd_inspect(
    cfg: &RunConfig,
    work: &Work,
    query: &str,
    support: &Path,
    out: &mut dyn std::io::Write,
) -> Result<()> {
    let (model, mut t) = load_checkpoint(&work.model(ScorerKind::Fusion))?;
    t.m = cfg.train.m;
    let (vocab, kb) = load_vocab_and_kb(work, &t)?;
    let tokens = tokenize(query);
    let unknown: Vec<&str> = tokens
        .iter()
        .filter(|w| vocab.get(w).is_none())
        .map(String::as_str)
        .collect();
    if !unknown.is_empty() {
        log::warn!("mapped to {}: {}", vocab.token(UNK), unknown.join(" "));
    }
    let support = Dataset::load(support)?;
    let protos = prototypes_from(&model, &vocab, &support, t.n)?;
    let ctx = Context::new(&vocab, &kb, &t);
    let hits = kb.retrieve(&vocab, &tokens, t.m);
    let mut csv = String::from("view,head,class,position,token,weight\n");
    for (v, ids) in ctx.view_inputs(&tokens, &hits)?.iter().enumerate() {
        let x = model.encoder.encode_sequence(ids);
        for (h, weights) in model
            .fusion
            .attention_weights(protos.view(), x.view())
            .iter()
            .enumerate()
        {
            for (row, &label) in protos.labels.iter().enumerate() {
                for (pos, &id) in ids.iter().enumerate() {
                    writeln!(
                        csv,
                        "{v},{h},{},{pos},{},{}",
                        support.label_names[label],
                        vocab.token(id),
                        weights[[row, pos]]
                    )
                    .expect("write to string");
                }
            }
        }
    }
    emit(out, &csv)
}

/// Entry point of the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(cli, &mut lock) {
        Ok(()) => {
            let _ = lock.flush();
            0
        }
        Err(Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::BrokenPipe => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
