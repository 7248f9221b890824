//! One function per subcommand. Every random stream is derived from the
//! root seed by name, so each stage can be re-run on its own.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::info;
use serde_json::json;
use storyvae_core::corpus::{build_vocab, encode_story, load_dataset, synth_corpus, EncodedStory, Story, SynthConfig, Vocab};
use storyvae_core::eval::{
    active_units, discourse_separation, generate_batch, iw_ppl, mean_seq_rep, probe_topic_accuracy, qd_sweep, spearman,
    Generated, ProbeInput,
};
use storyvae_core::model::{Injection, ModelConfig, Provenance, VaeModel};
use storyvae_core::negatives::{build_discourse_dataset, NegationCues, NegativeConfig};
use storyvae_core::rng::{self, derive_seed};
use storyvae_core::topics::{coherence_npmi, fit_lda, infer_corpus, select_k, topic_purity, LdaConfig, TopicModel};
use storyvae_core::training::{
    evaluate, grad_check_objective, train_observed, BatchNoise, LatentMode, LossBreakdown, LossWeights, TrainingData,
};
use storyvae_numerics::op_suite;

use crate::output::Run;
use crate::Failure;

type Outcome = Result<(), Failure>;

fn dataset_rows(stories: &[Story]) -> impl Iterator<Item = serde_json::Value> + '_ {
    stories.iter().map(|s| {
        let sentences: Vec<String> = s.sentences.iter().map(|w| w.join(" ")).collect();
        match s.topic {
            Some(t) => json!({ "sentences": sentences, "topic": t }),
            None => json!({ "sentences": sentences }),
        }
    })
}

fn load_train(run: &Run) -> Result<Vec<Story>, Failure> {
    Ok(load_dataset(&run.input("paths.train", run.cfg.paths.train.as_ref(), "train.jsonl")?)?)
}

fn load_test(run: &Run) -> Result<Vec<Story>, Failure> {
    Ok(load_dataset(&run.input("paths.test", run.cfg.paths.test.as_ref(), "test.jsonl")?)?)
}

fn negative_config(run: &Run) -> Result<NegativeConfig, Failure> {
    let cues = match &run.cfg.paths.cues {
        Some(p) => NegationCues::load(&run.input("paths.cues", Some(p), "")?)?,
        None => NegationCues::default(),
    };
    Ok(run.cfg.negative_config(cues))
}

fn load_model(run: &Run) -> Result<(VaeModel, Vocab), Failure> {
    let paths = &run.cfg.paths;
    let (model, provenance) = VaeModel::load(&run.input("paths.checkpoint", paths.checkpoint.as_ref(), "model.json")?)?;
    let vocab = Vocab::load(&run.input("paths.vocab", paths.vocab.as_ref(), "vocab.tsv")?)?;
    if vocab.len() != model.config().vocab_size {
        return Err(Failure::Config {
            field: "paths.vocab".into(),
            message: format!("{} tokens, checkpoint expects {}", vocab.len(), model.config().vocab_size),
        });
    }
    if let Some(h) = &provenance.config_hash {
        info!("checkpoint trained under config {h}");
    }
    Ok((model, vocab))
}

fn encode_all(stories: &[Story], vocab: &Vocab, max_len: usize) -> Result<Vec<EncodedStory>, Failure> {
    Ok(stories.iter().map(|s| encode_story(s, vocab, max_len)).collect::<Result<_, _>>()?)
}

/// `n` prior samples decoded at nucleus mass `p`; sample `i` uses its own
/// latent and token streams.
fn sample_prior_stories(model: &VaeModel, vocab: &Vocab, seed: u64, n: usize, p: f64, max_tokens: usize) -> Result<Vec<Generated>, Failure> {
    let zs: Vec<Vec<f64>> = (0..n)
        .map(|i| model.sample_prior(&mut rng::indexed_stream(seed, "z", i as u64)).z)
        .collect();
    let mut rngs: Vec<_> = (0..n).map(|i| rng::indexed_stream(seed, "tokens", i as u64)).collect();
    Ok(generate_batch(model, vocab, &zs, p, max_tokens, &mut rngs)?)
}

pub fn synth(run: &mut Run) -> Outcome {
    let cfg = &run.cfg;
    let corpus = synth_corpus(&cfg.synth_config(derive_seed(cfg.seed, "corpus")))?;
    let n_test = ((corpus.len() as f64 * cfg.synth.test_fraction).round() as usize).clamp(1, corpus.len() - 1);
    let (train, test) = corpus.split_at(corpus.len() - n_test);
    run.write_jsonl("train.jsonl", dataset_rows(train))?;
    run.write_jsonl("test.jsonl", dataset_rows(test))?;
    println!("synth: {} train, {} test stories", train.len(), test.len());
    Ok(())
}

pub fn lda(run: &mut Run) -> Outcome {
    let train = load_train(run)?;
    let cfg = &run.cfg;
    let seed = derive_seed(cfg.seed, "lda");
    let top_n = cfg.lda.top_n;
    let selection = if cfg.lda.candidates.is_empty() {
        None
    } else {
        Some(select_k(&train, &cfg.lda.candidates, &cfg.lda_config(cfg.lda.k, seed), top_n)?)
    };
    let k = selection.as_ref().map_or(cfg.lda.k, |s| s.best_k);
    let model = fit_lda(&train, &cfg.lda_config(k, seed))?;
    let coherence = coherence_npmi(&model, &train, top_n)?;
    let purity = if train.iter().all(|s| s.topic.is_some()) {
        Some(topic_purity(&model, &train)?)
    } else {
        None
    };
    let top_words: Vec<Vec<&str>> = (0..k)
        .map(|t| model.top_words(t, top_n).into_iter().map(|w| model.vocab.word(w)).collect())
        .collect();
    let report = json!({
        "k": k,
        "selection": selection,
        "coherence_npmi": coherence,
        "purity": purity,
        "top_words": top_words,
    });
    run.write_json("topics.json", &model)?;
    run.write_json("lda.json", &report)?;
    println!("lda: K={k}, coherence {coherence:.4}{}", purity.map_or(String::new(), |p| format!(", purity {p:.3}")));
    Ok(())
}

pub fn negatives(run: &mut Run) -> Outcome {
    let train = load_train(run)?;
    let ncfg = negative_config(run)?;
    let set = build_discourse_dataset(&train, derive_seed(run.cfg.seed, "negatives"), &ncfg)?;
    run.write_jsonl("negatives.jsonl", &set)?;
    println!("negatives: {} labeled stories", set.len());
    Ok(())
}

fn training_data(run: &Run, stories: &[Story], vocab: &Vocab, topics: Option<&TopicModel>, stream: &str) -> Result<TrainingData, Failure> {
    let cfg = &run.cfg;
    let negatives = if cfg.train.gamma > 0.0 { Some(negative_config(run)?) } else { None };
    Ok(TrainingData::build(
        stories,
        vocab,
        cfg.data.max_len,
        topics,
        negatives.as_ref(),
        derive_seed(cfg.seed, stream),
    )?)
}

pub fn train(run: &mut Run) -> Outcome {
    let train = load_train(run)?;
    let test = run
        .maybe_input(run.cfg.paths.test.as_ref(), "test.jsonl")
        .map(|p| load_dataset(&p))
        .transpose()?;
    let cfg = run.cfg.clone();
    let vocab = build_vocab(&train, cfg.data.vocab_size)?;
    let topics = if cfg.train.alpha > 0.0 {
        let path = run.input("paths.topics", cfg.paths.topics.as_ref(), "topics.json")?;
        Some(TopicModel::load(&path)?)
    } else {
        None
    };
    let n_topics = topics.as_ref().map_or(cfg.lda.k, |t| t.k);
    let data = training_data(run, &train, &vocab, topics.as_ref(), "data")?;
    let mut model = VaeModel::new(cfg.model_config(vocab.len(), n_topics), derive_seed(cfg.seed, "init"))?;
    info!("training {} parameters on {} stories", model.params().n_scalars(), data.len());

    let mut log = format!("{},config_hash,seed\n", LossBreakdown::CSV_HEADER);
    let history = train_observed(&mut model, &data, &cfg.train_config(derive_seed(cfg.seed, "train")), |epoch, b| {
        let _ = writeln!(log, "{},{},{}", b.csv_row(epoch), run.hash, cfg.seed);
    })?;

    let heldout = match &test {
        Some(test) => {
            let test_data = training_data(run, test, &vocab, topics.as_ref(), "test-data")?;
            Some(evaluate(&model, &test_data, &cfg.weights(), LatentMode::Mean, cfg.train.batch_size)?)
        }
        None => None,
    };

    let vocab_path = run.artifact("vocab.tsv");
    vocab.save_with_header(&vocab_path, &[format!("config_hash {}", run.hash), format!("seed {}", cfg.seed)])?;
    let ckpt = run.artifact("model.json");
    let provenance = Provenance {
        seed: Some(cfg.seed),
        config_hash: Some(run.hash.clone()),
        epochs: Some(cfg.train.epochs),
    };
    model.save(&ckpt, provenance)?;
    run.write_text("train_log.csv", &log)?;
    let last = history.last().copied().unwrap_or_default();
    run.write_json("train.json", &json!({ "final_epoch": last, "heldout_at_mean": heldout }))?;
    println!("train: {last}");
    Ok(())
}

pub fn generate(run: &mut Run) -> Outcome {
    let (model, vocab) = load_model(run)?;
    let e = &run.cfg.eval;
    let samples = sample_prior_stories(&model, &vocab, derive_seed(run.cfg.seed, "generate"), e.n_samples, e.p, e.max_tokens)?;
    let p = e.p;
    let rows: Vec<_> = samples
        .iter()
        .map(|g| {
            let sentences: Vec<String> = g.story.sentences.iter().map(|w| w.join(" ")).collect();
            json!({ "sentences": sentences, "ended": g.ended, "p": p })
        })
        .collect();
    run.write_jsonl("generated.jsonl", rows)?;
    println!("generate: {} stories at p={p}", samples.len());
    Ok(())
}

pub fn eval(run: &mut Run) -> Outcome {
    let (model, vocab) = load_model(run)?;
    let test = load_test(run)?;
    let cfg = run.cfg.clone();
    let encoded = encode_all(&test, &vocab, model.config().max_len)?;

    let iw = iw_ppl(&model, &encoded, cfg.eval.k, derive_seed(cfg.seed, "iw"))?;
    let au = active_units(&model, &encoded, cfg.eval.au_threshold)?;
    let weights = LossWeights {
        alpha: 0.0,
        gamma: 0.0,
        ..cfg.weights()
    };
    let terms = evaluate(&model, &TrainingData::new(encoded)?, &weights, LatentMode::Mean, cfg.train.batch_size)?;

    let e = &cfg.eval;
    let samples = sample_prior_stories(&model, &vocab, derive_seed(cfg.seed, "eval-generate"), e.n_samples, e.p, e.max_tokens)?;
    let generated: Vec<Vec<String>> = samples.iter().map(|g| g.story.flat_words()).collect();
    let references: Vec<Vec<String>> = test.iter().map(Story::flat_words).collect();
    let seq_rep: BTreeMap<String, serde_json::Value> = (1..=4)
        .map(|n| {
            let v = json!({ "generated": mean_seq_rep(&generated, n), "reference": mean_seq_rep(&references, n) });
            (format!("seq_rep_{n}"), v)
        })
        .collect();

    let mut au_csv = String::from("dim,A_u,active,config_hash,seed\n");
    for (d, v) in au.variances.iter().enumerate() {
        let _ = writeln!(au_csv, "{d},{v},{},{},{}", u8::from(*v > au.threshold), run.hash, cfg.seed);
    }
    run.write_text("au.csv", &au_csv)?;

    let report = json!({
        "iw_ppl": iw,
        "active_units": { "active": au.active, "latent_dim": au.variances.len(), "threshold": au.threshold },
        "terms_at_mean": terms,
        "seq_rep": { "p": e.p, "n_samples": e.n_samples, "values": seq_rep },
    });
    run.write_json("eval.json", &report)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

pub fn sweep(run: &mut Run) -> Outcome {
    let (model, vocab) = load_model(run)?;
    let test = load_test(run)?;
    let report = qd_sweep(&model, &vocab, &test, &run.cfg.sweep_config())?;
    let p: Vec<f64> = report.rows.iter().map(|r| r.p).collect();
    let column = |f: fn(&storyvae_core::eval::SweepRow) -> f64| report.rows.iter().map(f).collect::<Vec<_>>();
    let rho_rep = spearman(&p, &column(|r| r.seq_rep_4)).ok();
    let rho_self = spearman(&p, &column(|r| r.self_bleu)).ok();
    let csv = report.csv(&run.hash);
    run.write_text("sweep.csv", &csv)?;
    let fmt = |r: Option<f64>| r.map_or("n/a".to_string(), |v| format!("{v:.3}"));
    println!(
        "sweep: {} rows; spearman(p, seq_rep_4) {}, spearman(p, self_bleu) {}",
        report.rows.len(),
        fmt(rho_rep),
        fmt(rho_self)
    );
    Ok(())
}

pub fn probe(run: &mut Run) -> Outcome {
    let (model, vocab) = load_model(run)?;
    let train = load_train(run)?;
    let test = load_test(run)?;
    let cfg = run.cfg.clone();
    let stories: Vec<Story> = train.iter().chain(&test).cloned().collect();
    let labels: Vec<usize> = if stories.iter().all(|s| s.topic.is_some()) {
        stories.iter().map(|s| s.topic.unwrap_or_default()).collect()
    } else {
        let path = run.input("paths.topics", cfg.paths.topics.as_ref(), "topics.json")?;
        let topics = TopicModel::load(&path)?;
        infer_corpus(&topics, &stories, derive_seed(cfg.seed, "probe-labels"))
            .iter()
            .map(|q| q.argmax())
            .collect()
    };
    let max_len = model.config().max_len;
    let encoded = encode_all(&stories, &vocab, max_len)?;
    let probe_cfg = cfg.probe_config();
    let seed = derive_seed(cfg.seed, "probe");
    let acc_mu = probe_topic_accuracy(&model, &encoded, &labels, ProbeInput::Mu, &probe_cfg, seed)?;
    let acc_z = probe_topic_accuracy(&model, &encoded, &labels, ProbeInput::Z, &probe_cfg, seed)?;

    let labeled = build_discourse_dataset(&test, derive_seed(cfg.seed, "probe-negatives"), &negative_config(run)?)?;
    let scored: Vec<(EncodedStory, f64)> = labeled
        .iter()
        .map(|l| encode_story(&l.story, &vocab, max_len).map(|e| (e, l.label)))
        .collect::<Result<_, _>>()?;
    let sep = discourse_separation(&model, &scored)?;

    let report = json!({
        "topic_probe": { "accuracy_mu": acc_mu, "accuracy_z": acc_z, "stories": stories.len() },
        "discourse": { "mean_original": sep.mean_original, "mean_negative": sep.mean_negative, "gap": sep.gap() },
    });
    run.write_json("probe.json", &report)?;
    println!(
        "probe: topic accuracy mu {acc_mu:.3}, z {acc_z:.3}; discourse gap {:.3}",
        sep.gap()
    );
    Ok(())
}

fn tiny_model(vocab_size: usize, injection: Injection, seed: u64) -> Result<VaeModel, Failure> {
    let cfg = ModelConfig {
        vocab_size,
        max_len: 24,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        ff_dim: 16,
        latent_dim: 3,
        injection,
        n_topics: 2,
    };
    Ok(VaeModel::new(cfg, seed)?)
}

pub fn grad_check(run: &mut Run) -> Outcome {
    let g = run.cfg.grad_check.clone();
    let mut worst_per_op: BTreeMap<&'static str, f64> = BTreeMap::new();
    for seed in 0..g.seeds {
        for c in op_suite(seed, g.eps)? {
            let w = worst_per_op.entry(c.name).or_default();
            *w = w.max(c.max_rel_error);
        }
    }

    let weights = LossWeights {
        alpha: 0.7,
        beta: 1.3,
        gamma: 0.9,
        c: 0.5,
    };
    let mut objective = Vec::new();
    for seed in 0..g.seeds {
        let synth = SynthConfig {
            n_docs: 3,
            seed,
            sents_per_doc: 2,
            ..SynthConfig::default()
        };
        let corpus = synth_corpus(&synth)?;
        let vocab = build_vocab(&corpus, 200)?;
        let lda = fit_lda(&corpus, &LdaConfig { k: 2, iters: 10, seed, ..LdaConfig::default() })?;
        let data = TrainingData::build(&corpus, &vocab, 24, Some(&lda), Some(&NegativeConfig::default()), seed)?;
        let injection = if seed % 2 == 0 { Injection::Prepend } else { Injection::Memory };
        let model = tiny_model(vocab.len(), injection, seed)?;
        let noise = BatchNoise::sample(seed, 0, data.len(), model.config().latent_dim);
        let err = grad_check_objective(&model, &data, &weights, &noise, g.eps, g.per_tensor, seed)?;
        objective.push(json!({ "seed": seed, "injection": injection, "max_rel_error": err }));
    }

    let worst_op = worst_per_op.values().copied().fold(0.0, f64::max);
    let worst_obj = objective
        .iter()
        .filter_map(|o| o["max_rel_error"].as_f64())
        .fold(0.0, f64::max);
    let tolerance = g.tolerance;
    let passed = worst_op < tolerance && worst_obj < tolerance;
    run.write_json(
        "grad_check.json",
        &json!({
            "eps": g.eps,
            "tolerance": tolerance,
            "passed": passed,
            "ops": worst_per_op,
            "objective": objective,
        }),
    )?;
    println!(
        "grad-check: worst op error {worst_op:.2e}, worst objective error {worst_obj:.2e} over {} seeds: {}",
        g.seeds,
        if passed { "pass" } else { "FAIL" }
    );
    if passed {
        Ok(())
    } else {
        Err(Failure::Runtime(format!(
            "gradient check exceeded tolerance {tolerance:e}: ops {worst_op:.2e}, objective {worst_obj:.2e}"
        )))
    }
}
