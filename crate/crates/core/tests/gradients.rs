mod common;

use common::{max_fd_error, micro_instance, seeded};
use ragmeta::meta::{batch_grad, batch_loss_value, sample_episode, Context, Episode, Model};
use ragmeta::{Pooling, ScorerKind};

fn episodes(micro: &common::Micro, ctx: &Context<'_>, count: usize, seed: u64) -> Vec<Episode> {
    let mut rng = seeded(seed);
    (0..count)
        .map(|_| {
            let mut ep = sample_episode(&micro.dataset, 3, 2, 2, &mut rng).unwrap();
            ctx.attach_retrieval(&mut ep);
            ep
        })
        .collect()
}

fn check(strategy: Pooling, scorer: ScorerKind) {
    let micro = micro_instance();
    let cfg = ragmeta::TrainConfig {
        strategy,
        scorer,
        ..micro.cfg.clone()
    };
    let ctx = Context::new(&micro.vocab, &micro.kb, &cfg);
    let eps = episodes(&micro, &ctx, 2, 11);
    for ep in &eps {
        assert!(ep.retrieved.iter().all(|h| h.len() == 2));
        for (q, hits) in ep.query.iter().zip(&ep.retrieved) {
            for ids in ctx.view_inputs(&q.sentence, hits).unwrap() {
                assert!(ids.len() <= 10);
            }
        }
    }
    let model = Model::init(micro.vocab.len(), &cfg).unwrap();
    let g = batch_grad(&model, &ctx, &eps).unwrap();
    assert!((g.loss - batch_loss_value(&model, &ctx, &eps).unwrap()).abs() < 1e-12);
    let analytic: Vec<Vec<f64>> = g.grads.tensors().into_iter().map(<[f64]>::to_vec).collect();
    let (err, at) = max_fd_error(&model, &analytic, 1e-5, |m| {
        batch_loss_value(m, &ctx, &eps).unwrap()
    });
    assert!(
        err < 1e-4,
        "{strategy} {scorer}: relative error {err:e} at {at}"
    );
}

#[test]
fn fusion_mean_gradient_matches_finite_differences() {
    check(Pooling::Mean, ScorerKind::Fusion);
}

#[test]
fn fusion_max_gradient_matches_finite_differences() {
    check(Pooling::Max, ScorerKind::Fusion);
}

#[test]
fn protonet_gradient_matches_finite_differences() {
    check(Pooling::Mean, ScorerKind::Protonet);
}

#[test]
fn concat_view_gradient_matches_finite_differences() {
    let micro = micro_instance();
    let cfg = ragmeta::TrainConfig {
        view_mode: ragmeta::ViewMode::Concat,
        ..micro.cfg.clone()
    };
    let ctx = Context::new(&micro.vocab, &micro.kb, &cfg);
    let eps = episodes(&micro, &ctx, 1, 12);
    let model = Model::init(micro.vocab.len(), &cfg).unwrap();
    let g = batch_grad(&model, &ctx, &eps).unwrap();
    let analytic: Vec<Vec<f64>> = g.grads.tensors().into_iter().map(<[f64]>::to_vec).collect();
    let (err, at) = max_fd_error(&model, &analytic, 1e-5, |m| {
        batch_loss_value(m, &ctx, &eps).unwrap()
    });
    assert!(err < 1e-4, "relative error {err:e} at {at}");
}
