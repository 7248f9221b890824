use rand::Rng as _;
use storyvae_core::corpus::{build_vocab, encode_story, synth_corpus, EncodedStory, SynthConfig, Vocab};
use storyvae_core::model::*;
use storyvae_core::rng;

fn setup(injection: Injection, seed: u64) -> (VaeModel, Vocab, Vec<EncodedStory>) {
    let corpus = synth_corpus(&SynthConfig { n_docs: 8, seed, ..SynthConfig::default() }).unwrap();
    let vocab = build_vocab(&corpus, 200).unwrap();
    let cfg = ModelConfig { vocab_size: vocab.len(), max_len: 40, injection, ..ModelConfig::default() };
    let stories = corpus.iter().map(|s| encode_story(s, &vocab, 40).unwrap()).collect();
    (VaeModel::new(cfg, seed).unwrap(), vocab, stories)
}

fn set(model: &mut VaeModel, name: &str, values: Vec<f64>) {
    let t = model.params_mut().get_mut(name).unwrap();
    assert_eq!(t.len(), values.len());
    t.data = values;
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn encoder_outputs_have_latent_shape_and_are_deterministic() {
    let (model, _, stories) = setup(Injection::Prepend, 0);
    let a = model.encode(&stories[0]).unwrap();
    assert_eq!(a.mu.len(), 16);
    assert_eq!(a.log_var.len(), 16);
    assert_eq!(a, model.encode(&stories[0]).unwrap());
}

#[test]
fn swapping_two_tokens_changes_mu() {
    let (model, _, stories) = setup(Injection::Prepend, 1);
    let mut swapped = stories[0].clone();
    let (i, j) = (1..swapped.real_len())
        .flat_map(|i| (i + 1..swapped.real_len()).map(move |j| (i, j)))
        .find(|&(i, j)| swapped.encoder_ids[i] != swapped.encoder_ids[j])
        .unwrap();
    swapped.encoder_ids.swap(i, j);
    let a = model.encode(&stories[0]).unwrap();
    let b = model.encode(&swapped).unwrap();
    assert!(max_diff(&a.mu, &b.mu) > 1e-9);
}

#[test]
fn padding_does_not_change_the_posterior() {
    let (model, _, stories) = setup(Injection::Memory, 2);
    let alone = model.encode(&stories[0]).unwrap();
    let batched = model.encode_batch(&stories.iter().collect::<Vec<_>>()).unwrap();
    assert!(max_diff(&alone.mu, &batched[0].mu) < 1e-10);
}

#[test]
fn reparameterization_moments() {
    let params = PosteriorParams { mu: vec![1.5, -0.5], log_var: vec![0.4f64.ln(), 2f64.ln()] };
    let mut r = rng::stream(3, "moments");
    let n = 100_000;
    let zs: Vec<Vec<f64>> = (0..n).map(|_| reparameterize(&params, &standard_normal(2, &mut r)).unwrap().z).collect();
    for d in 0..2 {
        let mean = zs.iter().map(|z| z[d]).sum::<f64>() / n as f64;
        let var = zs.iter().map(|z| (z[d] - mean).powi(2)).sum::<f64>() / n as f64;
        let want_var = params.log_var[d].exp();
        assert!((mean - params.mu[d]).abs() < 0.02 * params.mu[d].abs());
        assert!((var - want_var).abs() < 0.02 * want_var);
    }
}

#[test]
fn prepend_discards_the_latent_position() {
    let (model, _, stories) = setup(Injection::Prepend, 4);
    let len = stories[0].real_len();
    let logits = model.decode_logits(&[0.1; 16], &stories[0].decoder_input_ids[..len]).unwrap();
    assert_eq!(logits.shape, vec![len, model.config().vocab_size]);
    assert_eq!(model.decoder_internal_len(len), len + 1);
    assert_eq!(model.extra_slots_per_layer(), 0);
}

#[test]
fn memory_adds_exactly_one_slot_per_layer() {
    let (model, _, _) = setup(Injection::Memory, 5);
    assert_eq!(model.extra_slots_per_layer(), 1);
    assert_eq!(model.decoder_internal_len(7), 7);
    let mem2 = model.params().get("dec.mem2.w").unwrap();
    assert_eq!(mem2.shape, vec![64, 2 * 2 * 64]);
}

#[test]
fn decoder_is_causal_under_both_injections_over_twenty_configs() {
    for config in 0..20u64 {
        let injection = if config % 2 == 0 { Injection::Prepend } else { Injection::Memory };
        let (model, _, stories) = setup(injection, 100 + config);
        let mut r = rng::stream(config, "causal");
        let len = stories[0].real_len();
        let ids = stories[0].decoder_input_ids[..len].to_vec();
        let z = standard_normal(16, &mut r);
        let base = model.decode_logits(&z, &ids).unwrap();
        let t = r.random_range(0..len - 1);
        let mut perturbed = ids.clone();
        perturbed[t + 1] = (perturbed[t + 1] + 1 + r.random_range(0..5)) % model.config().vocab_size;
        let other = model.decode_logits(&z, &perturbed).unwrap();
        let v = model.config().vocab_size;
        assert_eq!(base.data[..(t + 1) * v], other.data[..(t + 1) * v], "config {config} leaked at t={t}");
        assert!(max_diff(&base.data[(t + 1) * v..], &other.data[(t + 1) * v..]) > 0.0);
    }
}

#[test]
fn decoder_output_depends_on_z_for_both_injections() {
    for injection in [Injection::Prepend, Injection::Memory] {
        let (model, _, stories) = setup(injection, 6);
        let len = stories[0].real_len();
        let ids = &stories[0].decoder_input_ids[..len];
        let mut r = rng::stream(6, "z");
        let a = model.decode_logits(&standard_normal(16, &mut r), ids).unwrap();
        let b = model.decode_logits(&standard_normal(16, &mut r), ids).unwrap();
        let v = model.config().vocab_size;
        assert!(max_diff(&a.data[..v], &b.data[..v]) > 1e-6, "{injection}: first position ignores z");
        assert!(max_diff(&a.data[(len - 1) * v..], &b.data[(len - 1) * v..]) > 1e-6, "{injection}: last position ignores z");
    }
}

#[test]
fn topic_head_hand_cases() {
    let (mut model, _, _) = setup(Injection::Prepend, 7);
    set(&mut model, "head.topic.w", vec![0.0; 32]);
    set(&mut model, "head.topic.b", vec![0.0; 2]);
    assert_eq!(model.topic_head(&[0.3; 16]).unwrap().probs, vec![0.5, 0.5]);

    let mut w = vec![0.0; 32];
    w[0] = 1.0;
    w[3] = 1.0;
    set(&mut model, "head.topic.w", w);
    let mut z = vec![0.0; 16];
    z[0] = 2f64.ln();
    let p = model.topic_head(&z).unwrap().probs;
    assert!((p[0] - 2.0 / 3.0).abs() < 1e-12 && (p[1] - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn topic_head_is_a_distribution() {
    let (model, _, _) = setup(Injection::Memory, 8);
    let mut r = rng::stream(8, "simplex");
    for _ in 0..20 {
        let p = model.topic_head(&standard_normal(16, &mut r)).unwrap().probs;
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&x| x > 0.0));
    }
}

#[test]
fn discourse_head_hand_cases() {
    let (mut model, _, _) = setup(Injection::Prepend, 9);
    set(&mut model, "head.disc.w", vec![0.0; 16]);
    set(&mut model, "head.disc.b", vec![0.0]);
    assert_eq!(model.discourse_head(&[1.0; 16]).unwrap(), 0.5);

    set(&mut model, "head.disc.b", vec![50.0]);
    assert!(model.discourse_head(&[1.0; 16]).unwrap() > 1.0 - 1e-12);

    let mut w = vec![0.0; 16];
    w[0] = 1.0;
    set(&mut model, "head.disc.w", w);
    set(&mut model, "head.disc.b", vec![0.0]);
    let mut z = vec![0.0; 16];
    z[0] = 3f64.ln();
    z[1] = 7.0;
    assert!((model.discourse_head(&z).unwrap() - 0.75).abs() < 1e-12);
}

#[test]
fn prior_samples_are_reproducible_and_standard() {
    let (model, _, _) = setup(Injection::Prepend, 10);
    let a = model.sample_prior(&mut rng::stream(1, "prior"));
    let b = model.sample_prior(&mut rng::stream(1, "prior"));
    assert_eq!(a, b);

    let mut r = rng::stream(2, "prior");
    let n = 100_000;
    let draws: Vec<f64> = (0..n).map(|_| model.sample_prior(&mut r).z[3]).collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    assert!(mean.abs() < 0.02);
    assert!((var - 1.0).abs() < 0.03);
    let lag1 = draws.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>() / ((n - 1) as f64 * var);
    assert!(lag1.abs() < 0.02);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (model, _, stories) = setup(Injection::Memory, 11);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let prov = Provenance { seed: Some(11), config_hash: Some("abc".into()), epochs: Some(0) };
    model.save(&path, prov.clone()).unwrap();
    let (loaded, p2) = VaeModel::load(&path).unwrap();
    assert_eq!(p2, prov);
    assert_eq!(loaded.config(), model.config());
    let len = stories[0].real_len();
    let z = vec![0.2; 16];
    let a = model.decode_logits(&z, &stories[0].decoder_input_ids[..len]).unwrap();
    let b = loaded.decode_logits(&z, &stories[0].decoder_input_ids[..len]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn out_of_vocabulary_ids_are_rejected() {
    let (model, _, _) = setup(Injection::Prepend, 12);
    let v = model.config().vocab_size;
    assert!(model.decode_logits(&[0.0; 16], &[2, v]).is_err());
    assert!(model.decode_logits(&[0.0; 3], &[2, 9]).is_err());
}
