use proptest::prelude::*;
use storyvae_core::corpus::{build_vocab, synth_corpus, SynthConfig};
use storyvae_core::model::{Injection, ModelConfig, PosteriorParams, VaeModel};
use storyvae_core::negatives::NegativeConfig;
use storyvae_core::topics::{fit_lda, LdaConfig};
use storyvae_core::training::*;
use storyvae_core::{rng, Error};
use storyvae_numerics::{Graph, Tensor};

const MAX_LEN: usize = 40;

fn fixture(n_docs: usize, seed: u64, injection: Injection) -> (VaeModel, TrainingData) {
    let corpus = synth_corpus(&SynthConfig { n_docs, seed, ..SynthConfig::default() }).unwrap();
    let vocab = build_vocab(&corpus, 300).unwrap();
    let lda = fit_lda(&corpus, &LdaConfig { k: 2, iters: 30, seed, ..LdaConfig::default() }).unwrap();
    let data = TrainingData::build(&corpus, &vocab, MAX_LEN, Some(&lda), Some(&NegativeConfig::default()), seed).unwrap();
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        max_len: MAX_LEN,
        d_model: 16,
        n_layers: 1,
        ff_dim: 32,
        latent_dim: 4,
        injection,
        ..ModelConfig::default()
    };
    (VaeModel::new(cfg, seed).unwrap(), data)
}

fn all_on() -> LossWeights {
    LossWeights { alpha: 0.7, beta: 1.3, gamma: 0.9, c: 0.5 }
}

#[test]
fn recon_of_confident_correct_logits_is_near_zero() {
    let mut data = vec![-50.0; 2 * 3];
    data[1] = 50.0;
    data[3 + 2] = 50.0;
    let logits = Tensor::new(data, &[2, 3]).unwrap();
    assert!(recon_loss(&logits, &[1, 2], &[true, true]).unwrap() < 1e-30);
}

#[test]
fn recon_matches_hand_log_softmax() {
    let logits = Tensor::new(vec![0.2, -1.0, 0.5, 1.5, 0.0, -0.3], &[2, 3]).unwrap();
    let lse = |r: &[f64]| r.iter().map(|x| x.exp()).sum::<f64>().ln();
    let want = (lse(&[0.2, -1.0, 0.5]) - 0.5) + (lse(&[1.5, 0.0, -0.3]) - 1.5);
    assert!((recon_loss(&logits, &[2, 0], &[true, true]).unwrap() - want).abs() < 1e-9);
    let only_first = lse(&[0.2, -1.0, 0.5]) - 0.5;
    assert!((recon_loss(&logits, &[2, 0], &[true, false]).unwrap() - only_first).abs() < 1e-9);
}

#[test]
fn recon_of_fully_padded_story_is_an_error() {
    let logits = Tensor::zeros(&[2, 3]);
    assert!(recon_loss(&logits, &[0, 0], &[false, false]).is_err());
}

#[test]
fn topic_loss_with_zero_in_q_stays_finite() {
    let v = topic_loss(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
    assert!(v.is_finite() && v > 5.0);
    assert!(topic_loss(&[1.0], &[0.5, 0.5]).is_err());
}

#[test]
fn total_reduces_to_recon_when_kl_hits_target() {
    let parts = LossParts { recon: 12.5, kl: 2.0, topic: 3.0, discourse: 4.0 };
    let w = LossWeights { alpha: 0.0, beta: 1.0, gamma: 0.0, c: 2.0 };
    assert_eq!(total_loss(parts, &w).total, 12.5);
}

#[test]
fn graph_terms_match_pure_functions() {
    let mut g = Graph::new();
    let mu = g.constant(Tensor::new(vec![0.3, -0.2, 1.0, 0.0], &[2, 2]).unwrap());
    let lv = g.constant(Tensor::new(vec![0.1, -0.4, 0.0, 0.5], &[2, 2]).unwrap());
    let kl = kl_graph(&mut g, mu, lv).unwrap();
    let pure = kl_loss(&[
        PosteriorParams { mu: vec![0.3, -0.2], log_var: vec![0.1, -0.4] },
        PosteriorParams { mu: vec![1.0, 0.0], log_var: vec![0.0, 0.5] },
    ]);
    assert!((g.value(kl).item() - pure).abs() < 1e-12);

    let logits = g.constant(Tensor::new(vec![0.4, -0.7], &[2, 1]).unwrap());
    let d = discourse_graph(&mut g, logits, &[1.0, 0.0]).unwrap();
    let s = |x: f64| 1.0 / (1.0 + (-x).exp());
    let want = (discourse_loss(s(0.4), 1.0) + discourse_loss(s(-0.7), 0.0)) / 2.0;
    assert!((g.value(d).item() - want).abs() < 1e-12);
}

#[test]
fn composed_objective_passes_grad_check() {
    for injection in [Injection::Prepend, Injection::Memory] {
        let (model, data) = fixture(4, 3, injection);
        let noise = BatchNoise::sample(3, 0, 4, 4);
        let err = grad_check_objective(&model, &data, &all_on(), &noise, 1e-5, 3, 3).unwrap();
        assert!(err < 1e-4, "{injection}: {err}");
    }
}

#[test]
fn every_head_sends_gradient_to_encoder_embeddings() {
    let (model, data) = fixture(4, 4, Injection::Prepend);
    let idx: Vec<usize> = (0..4).collect();
    let noise = BatchNoise::sample(4, 0, 4, 4);
    let enc_tok = model.params().names().iter().position(|n| n == "enc.tok").unwrap();
    let heads = [
        LossWeights { alpha: 0.0, beta: 0.0, gamma: 0.0, c: 0.0 },
        LossWeights { alpha: 0.0, beta: 1.0, gamma: 0.0, c: 0.0 },
        LossWeights { alpha: 1.0, beta: 0.0, gamma: 0.0, c: 0.0 },
        LossWeights { alpha: 0.0, beta: 0.0, gamma: 1.0, c: 0.0 },
    ];
    for (h, w) in heads.iter().enumerate() {
        let mut g = Graph::new();
        let p = model.bind(&mut g);
        let (total, parts) = objective_graph(&model, &mut g, &p, &data, &idx, w, &noise, 0).unwrap();
        // isolate the head under test by differentiating its own term only
        let target = match h {
            0 => total,
            _ => {
                let recon = g.constant(Tensor::scalar(parts.recon));
                g.sub(total, recon).unwrap()
            }
        };
        g.backward(target).unwrap();
        let grad = g.grad(p.vars[enc_tok]).expect("encoder embedding is on the path");
        let norm = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm > 0.0, "head {h} sends no gradient");
    }
}

#[test]
fn zeroing_a_weight_leaves_other_terms_bit_identical() {
    let (model, data) = fixture(6, 5, Injection::Memory);
    let idx: Vec<usize> = (0..6).collect();
    let noise = BatchNoise::sample(5, 0, 6, 4);
    let full = batch_loss(&model, &data, &idx, &all_on(), &noise).unwrap();
    let no_topic = batch_loss(&model, &data, &idx, &LossWeights { alpha: 0.0, ..all_on() }, &noise).unwrap();
    assert_eq!((full.recon, full.kl, full.discourse), (no_topic.recon, no_topic.kl, no_topic.discourse));
    let no_disc = batch_loss(&model, &data, &idx, &LossWeights { gamma: 0.0, ..all_on() }, &noise).unwrap();
    assert_eq!((full.recon, full.kl, full.topic), (no_disc.recon, no_disc.kl, no_disc.topic));
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let run = || {
        let (mut model, data) = fixture(8, 6, Injection::Prepend);
        let cfg = TrainConfig { epochs: 3, batch_size: 4, seed: 6, weights: all_on(), ..TrainConfig::default() };
        train(&mut model, &data, &cfg).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_eq!(a.len(), 3);
}

#[test]
fn training_lowers_the_loss() {
    let (mut model, data) = fixture(8, 7, Injection::Memory);
    let cfg = TrainConfig { epochs: 15, lr: 3e-3, batch_size: 4, seed: 7, weights: all_on(), ..TrainConfig::default() };
    let h = train(&mut model, &data, &cfg).unwrap();
    assert!(h.last().unwrap().total < h[0].total);
}

#[test]
fn non_finite_parameters_abort_with_the_term() {
    let (mut model, data) = fixture(4, 8, Injection::Prepend);
    model.params_mut().get_mut("enc.tok").unwrap().data.iter_mut().for_each(|x| *x = f64::NAN);
    let cfg = TrainConfig { epochs: 1, batch_size: 4, weights: all_on(), ..TrainConfig::default() };
    match train(&mut model, &data, &cfg) {
        Err(Error::NonFiniteLoss { term, epoch }) => {
            assert_eq!(term, "recon");
            assert_eq!(epoch, 1);
        }
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}

#[test]
fn weights_are_validated() {
    let (mut model, data) = fixture(4, 9, Injection::Prepend);
    let cfg = TrainConfig { weights: LossWeights { beta: -1.0, ..all_on() }, ..TrainConfig::default() };
    assert!(train(&mut model, &data, &cfg).is_err());
    let no_topics = TrainingData { topics: None, ..data.clone() };
    let cfg = TrainConfig { epochs: 1, weights: all_on(), ..TrainConfig::default() };
    assert!(train(&mut model, &no_topics, &cfg).is_err());
}

#[test]
fn epoch_log_has_the_expected_columns() {
    assert_eq!(LossBreakdown::CSV_HEADER, "epoch,recon,kl,topic,discourse,total");
    let row = total_loss(LossParts { recon: 1.0, kl: 2.0, topic: 3.0, discourse: 4.0 }, &all_on()).csv_row(7);
    assert_eq!(row.split(',').count(), 6);
    assert!(row.starts_with("7,1,2,3,4,"));
}

fn grid_fixture() -> (VaeModel, TrainingData, TrainingData) {
    let (model, data) = fixture(12, 10, Injection::Prepend);
    let train_idx: Vec<usize> = (0..8).collect();
    let valid_idx: Vec<usize> = (8..12).collect();
    (model, data.subset(&train_idx), data.subset(&valid_idx))
}

fn grid_cfg() -> TrainConfig {
    TrainConfig { epochs: 2, batch_size: 4, seed: 10, ..TrainConfig::default() }
}

#[test]
fn grid_of_one_point_returns_it() {
    let (model, train_d, valid_d) = grid_fixture();
    let r = grid_search(&model, &train_d, &valid_d, &[all_on()], &grid_cfg(), RankMetric::Total).unwrap();
    assert_eq!(r.best, all_on());
    assert_eq!(r.rows.len(), 1);
    assert!(grid_search(&model, &train_d, &valid_d, &[], &grid_cfg(), RankMetric::Total).is_err());
}

#[test]
fn duplicated_grid_points_score_identically() {
    let (model, train_d, valid_d) = grid_fixture();
    let r = grid_search(&model, &train_d, &valid_d, &[all_on(), all_on()], &grid_cfg(), RankMetric::Total).unwrap();
    assert_eq!(r.rows[0].score, r.rows[1].score);
}

#[test]
fn clean_point_beats_discourse_weight_on_corrupted_labels() {
    let (model, mut train_d, mut valid_d) = grid_fixture();
    let mut r = rng::stream(10, "corrupt");
    for d in [&mut train_d, &mut valid_d] {
        let disc = d.discourse.as_mut().unwrap();
        for l in disc.original_labels.iter_mut().chain(disc.negative_labels.iter_mut()) {
            *l = f64::from(rand::Rng::random_bool(&mut r, 0.5));
        }
    }
    let clean = LossWeights { gamma: 0.0, ..all_on() };
    let noisy = LossWeights { gamma: 2.0, ..all_on() };
    let res = grid_search(&model, &train_d, &valid_d, &[noisy, clean], &grid_cfg(), RankMetric::Total).unwrap();
    assert_eq!(res.best, clean);
}

proptest! {
    #[test]
    fn kl_is_non_negative_and_zero_only_at_the_prior(
        pairs in prop::collection::vec((-3.0f64..3.0, -2.0f64..2.0), 1..6),
    ) {
        let (mu, lv): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let p = PosteriorParams { mu: mu.clone(), log_var: lv };
        let k = kl_single(&p);
        prop_assert!(k >= 0.0);
        let prior = PosteriorParams { mu: vec![0.0; mu.len()], log_var: vec![0.0; mu.len()] };
        prop_assert_eq!(kl_single(&prior), 0.0);
        if mu.iter().any(|&m| m.abs() > 1e-3) {
            prop_assert!(k > 0.0);
        }
    }

    #[test]
    fn discourse_loss_is_bce(score in 0.01f64..0.99, label in prop::bool::ANY) {
        let y = f64::from(label);
        let want = -(y * score.ln() + (1.0 - y) * (1.0 - score).ln());
        prop_assert!((discourse_loss(score, y) - want).abs() < 1e-12);
    }
}
