use std::fmt::Write as _;

use ndarray::Array1;
use rand::Rng;

use super::dataset::Dataset;
use super::episode::{sample_episode, Episode};
use super::loss::argmax;
use super::model::{episode_scores, Context, Model};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mean: f64,
    /// Standard error of the mean over episodes.
    pub std_err: f64,
    pub per_episode: Vec<f64>,
}

impl EvalReport {
    pub fn from_accuracies(per_episode: Vec<f64>) -> Self {
        let n = per_episode.len() as f64;
        let mean = per_episode.iter().sum::<f64>() / n;
        let std_err = if per_episode.len() > 1 {
            let var = per_episode.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            std_err,
            per_episode,
        }
    }
}

/// Fraction of queries whose highest score is the true class.
pub fn episode_accuracy(episode: &Episode, scores: &[Array1<f64>]) -> f64 {
    let hits = scores
        .iter()
        .zip(episode.targets())
        .filter(|(s, y)| argmax(s.view()) == *y)
        .count();
    hits as f64 / scores.len() as f64
}

/// Samples `episodes` test episodes and scores each with `score`.
pub fn evaluate_with<R, F>(
    dataset: &Dataset,
    (c, n, q): (usize, usize, usize),
    episodes: usize,
    rng: &mut R,
    mut score: F,
) -> Result<EvalReport>
where
    R: Rng,
    F: FnMut(&mut Episode) -> Result<Vec<Array1<f64>>>,
{
    let mut accs = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut ep = sample_episode(dataset, c, n, q, rng)?;
        let scores = score(&mut ep)?;
        accs.push(episode_accuracy(&ep, &scores));
    }
    Ok(EvalReport::from_accuracies(accs))
}

/// Meta-test accuracy of `model` on freshly sampled episodes.
pub fn evaluate<R: Rng>(
    model: &Model,
    ctx: &Context<'_>,
    dataset: &Dataset,
    shape: (usize, usize, usize),
    episodes: usize,
    rng: &mut R,
) -> Result<EvalReport> {
    evaluate_with(dataset, shape, episodes, rng, |ep| {
        ctx.attach_retrieval(ep);
        episode_scores(model, ctx, ep)
    })
}

/// Accuracy over a fixed list of episodes with retrieval already attached.
pub fn accuracy_over(model: &Model, ctx: &Context<'_>, episodes: &[Episode]) -> Result<EvalReport> {
    let mut accs = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let scores = episode_scores(model, ctx, ep)?;
        accs.push(episode_accuracy(ep, &scores));
    }
    Ok(EvalReport::from_accuracies(accs))
}

/// One line of the final report table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub dataset: String,
    pub model: String,
    pub c: usize,
    pub n: usize,
    pub m: usize,
    pub strategy: String,
    pub mean_accuracy: f64,
    pub std_error: f64,
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("dataset,model,C,N,m,strategy,mean_accuracy,std_error\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.dataset, r.model, r.c, r.n, r.m, r.strategy, r.mean_accuracy, r.std_error
        )
        .expect("write to string");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dataset() -> Dataset {
        let pairs: Vec<(String, String)> = (0..6)
            .flat_map(|c| (0..8).map(move |i| (format!("l{c}"), format!("w{c} x{i}"))))
            .collect();
        Dataset::from_pairs(pairs).unwrap()
    }

    #[test]
    fn perfect_scorer() {
        let ds = dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let report = evaluate_with(&ds, (5, 1, 5), 20, &mut rng, |ep| {
            Ok(ep
                .targets()
                .into_iter()
                .map(|y| {
                    let mut s = Array1::zeros(ep.num_classes());
                    s[y] = 1.0;
                    s
                })
                .collect())
        })
        .unwrap();
        assert_eq!(report.mean, 1.0);
        assert_eq!(report.std_err, 0.0);
    }

    #[test]
    fn random_scorer_is_near_chance() {
        let ds = dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut noise = ChaCha8Rng::seed_from_u64(3);
        let report = evaluate_with(&ds, (5, 1, 5), 600, &mut rng, |ep| {
            Ok((0..ep.query.len())
                .map(|_| Array1::from_shape_simple_fn(ep.num_classes(), || noise.gen::<f64>()))
                .collect())
        })
        .unwrap();
        // 600 episodes x 5 queries: binomial sd of the mean is about 0.0073
        assert!((report.mean - 0.2).abs() < 0.03, "{}", report.mean);
        assert!(report.std_err > 0.0);
    }

    #[test]
    fn report_layout() {
        let csv = report_csv(&[ReportRow {
            dataset: "synthetic".into(),
            model: "fusion".into(),
            c: 5,
            n: 1,
            m: 5,
            strategy: "mean".into(),
            mean_accuracy: 0.5,
            std_error: 0.01,
        }]);
        assert_eq!(
            csv,
            "dataset,model,C,N,m,strategy,mean_accuracy,std_error\nsynthetic,fusion,5,1,5,mean,0.5,0.01\n"
        );
    }
}
