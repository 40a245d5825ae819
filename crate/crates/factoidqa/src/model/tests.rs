use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use crate::featurize::FeaturizedExample;
use crate::tokenize::{CLS_ID, PAD_ID, SEP_ID};

use super::*;

fn toy_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        max_positions: 16,
        hidden: 8,
        num_layers: 2,
        num_heads: 2,
        ffn_dim: 16,
        segments: 2,
        dropout: 0.0,
        layer_norm_eps: 1e-12,
        init_std: 0.02,
    }
}

/// Builds `[CLS] q.. [SEP] p.. [SEP]` with synthetic ids; passage token j
/// covers code points (2j, 2j+1) of a single-letter-word passage. `gold` is
/// in absolute token positions (the passage starts at `q_len + 2`).
fn example(
    pair_id: &str,
    q_len: usize,
    p_len: usize,
    gold: Option<(usize, usize)>,
) -> FeaturizedExample {
    assert!(p_len <= 26);
    let mut input_ids = vec![CLS_ID];
    let mut segment_ids = vec![0u8];
    let mut passage_mask = vec![false];
    let mut offset_map: Vec<Option<(usize, usize)>> = vec![None];
    for i in 0..q_len {
        input_ids.push(4 + (i as u32 % 16));
        segment_ids.push(0);
        passage_mask.push(false);
        offset_map.push(None);
    }
    input_ids.push(SEP_ID);
    segment_ids.push(0);
    passage_mask.push(false);
    offset_map.push(None);
    for j in 0..p_len {
        input_ids.push(4 + ((q_len + j) as u32 % 16));
        segment_ids.push(1);
        passage_mask.push(true);
        offset_map.push(Some((2 * j, 2 * j + 1)));
    }
    input_ids.push(SEP_ID);
    segment_ids.push(1);
    passage_mask.push(false);
    offset_map.push(None);
    let passage = (0..p_len)
        .map(|j| ((b'a' + j as u8) as char).to_string())
        .collect::<Vec<String>>()
        .join(" ");
    FeaturizedExample {
        pair_id: pair_id.to_string(),
        input_ids,
        segment_ids,
        passage_mask,
        offset_map,
        gold_span: gold,
        passage,
    }
}

fn snapshot(model: &SpanModel) -> BTreeMap<String, Vec<f64>> {
    model
        .tensor_names()
        .into_iter()
        .map(|name| {
            let data = model.tensor(&name).unwrap().to_vec();
            (name, data)
        })
        .collect()
}

fn groups_of(names: &BTreeMap<String, Vec<f64>>, prefix: &str) -> Vec<String> {
    names
        .keys()
        .filter(|name| name.starts_with(prefix))
        .cloned()
        .collect()
}

#[test]
fn layer_group_names_round_trip() {
    for group in [
        LayerGroup::Embedding,
        LayerGroup::Transformer(1),
        LayerGroup::Transformer(12),
        LayerGroup::Head,
    ] {
        let name = group.to_string();
        assert_eq!(LayerGroup::from_str(&name).unwrap(), group);
        let json = serde_json::to_string(&group).unwrap();
        assert_eq!(serde_json::from_str::<LayerGroup>(&json).unwrap(), group);
    }
    for bad in ["layer_0", "layer_x", "foo", "layer_"] {
        assert!(LayerGroup::from_str(bad).is_err(), "{bad} should not parse");
    }
    assert!(LayerGroup::Embedding < LayerGroup::Transformer(1));
    assert!(LayerGroup::Transformer(1) < LayerGroup::Transformer(2));
    assert!(LayerGroup::Transformer(2) < LayerGroup::Head);
}

#[test]
fn config_validation_rejects_bad_fields() {
    type Edit = Box<dyn Fn(&mut ModelConfig)>;
    let cases: Vec<(&str, Edit)> = vec![
        ("indivisible heads", Box::new(|c| c.num_heads = 3)),
        ("tiny vocab", Box::new(|c| c.vocab_size = 3)),
        ("zero layers", Box::new(|c| c.num_layers = 0)),
        ("dropout one", Box::new(|c| c.dropout = 1.0)),
        ("negative dropout", Box::new(|c| c.dropout = -0.1)),
        ("zero eps", Box::new(|c| c.layer_norm_eps = 0.0)),
    ];
    for (what, mutate) in cases {
        let mut cfg = toy_config();
        mutate(&mut cfg);
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.exit_code(), 2, "{what}");
    }
    assert!(toy_config().validate().is_ok());
}

#[test]
fn parameter_counts_match_allocated_storage() {
    let cfg = toy_config();
    let model = SpanModel::new(cfg.clone(), 0).unwrap();
    assert_eq!(model.parameter_groups(), cfg.group_parameter_counts());
    assert_eq!(
        cfg.total_parameters(),
        model.parameter_groups().values().sum::<usize>()
    );
}

#[test]
fn distilbert_shape_hits_published_scale() {
    let cfg = ModelConfig::distilbert_shaped();
    let counts = cfg.group_parameter_counts();
    let total = cfg.total_parameters();
    let embedding = counts[&LayerGroup::Embedding];
    let non_embedding = total - embedding;

    assert_eq!(total, 65_193_986);
    assert_eq!(embedding, 22_665_216);
    assert_eq!(counts[&LayerGroup::Transformer(1)], 7_087_872);
    assert_eq!(counts[&LayerGroup::Head], 1_538);

    assert!((64_000_000..=67_000_000).contains(&total));
    assert!((41_000_000..=44_000_000).contains(&non_embedding));
    let fraction = non_embedding as f64 / total as f64;
    assert!((0.63..=0.67).contains(&fraction), "fraction {fraction}");
}

#[test]
fn uniform_logits_give_ln_n_loss() {
    let ex = example("u1", 2, 3, Some((4, 5)));
    let n = ex.input_ids.len();
    let scores = SpanScores {
        start_logits: vec![0.0; n],
        end_logits: vec![0.0; n],
    };
    let loss = span_loss(&scores, &ex).unwrap();
    assert_eq!(loss, (n as f64).ln());
}

#[test]
fn pad_positions_leave_the_softmax() {
    let mut ex = example("u2", 2, 3, Some((4, 5)));
    let valid = ex.input_ids.len();
    for _ in 0..3 {
        ex.input_ids.push(PAD_ID);
        ex.segment_ids.push(1);
        ex.passage_mask.push(false);
        ex.offset_map.push(None);
    }
    let n = ex.input_ids.len();
    let scores = SpanScores {
        start_logits: vec![0.0; n],
        end_logits: vec![0.0; n],
    };
    let loss = span_loss(&scores, &ex).unwrap();
    assert_eq!(loss, (valid as f64).ln());

    // Gold landing on a pad position is invalid.
    ex.gold_span = Some((n - 1, n - 1));
    assert!(span_loss(&scores, &ex).is_err());
}

#[test]
fn loss_gradients_sum_to_zero_and_point_at_gold() {
    let ex = example("u3", 1, 4, Some((3, 5)));
    let n = ex.input_ids.len();
    let scores = SpanScores {
        start_logits: (0..n).map(|t| t as f64 * 0.1).collect(),
        end_logits: (0..n).map(|t| 0.3 - t as f64 * 0.05).collect(),
    };
    let valid = valid_positions(&ex);
    let (loss, d_start, d_end) = loss_and_dlogits(&scores, (3, 5), &valid, "u3").unwrap();
    assert!(loss > 0.0);
    assert!(d_start.iter().sum::<f64>().abs() < 1e-12);
    assert!(d_end.iter().sum::<f64>().abs() < 1e-12);
    assert!(d_start[3] < 0.0);
    assert!(d_end[5] < 0.0);
}

#[test]
fn span_loss_matches_a_naive_softmax_oracle() {
    let ex = example("o1", 2, 4, Some((5, 6)));
    let n = ex.input_ids.len();
    let scores = SpanScores {
        start_logits: (0..n).map(|t| (t as f64 * 0.7).sin()).collect(),
        end_logits: (0..n).map(|t| (t as f64 * 1.3).cos()).collect(),
    };
    let naive = |logits: &[f64], gold: usize| -> f64 {
        let denom: f64 = logits.iter().map(|&l| l.exp()).sum();
        -(logits[gold].exp() / denom).ln()
    };
    let want = 0.5 * naive(&scores.start_logits, 5) + 0.5 * naive(&scores.end_logits, 6);
    let got = span_loss(&scores, &ex).unwrap();
    assert!((got - want).abs() < 1e-10, "got {got}, want {want}");
}

#[test]
fn padding_does_not_change_real_positions() {
    let model = SpanModel::new(toy_config(), 13).unwrap();
    let plain = example("p1", 2, 4, None);
    let n = plain.input_ids.len();
    let mut padded = plain.clone();
    for _ in 0..5 {
        padded.input_ids.push(PAD_ID);
        padded.segment_ids.push(1);
        padded.passage_mask.push(false);
        padded.offset_map.push(None);
    }
    let a = &model.forward(&[&plain]).unwrap()[0];
    let b = &model.forward(&[&padded]).unwrap()[0];
    assert_eq!(a.start_logits[..], b.start_logits[..n]);
    assert_eq!(a.end_logits[..], b.end_logits[..n]);
}

#[test]
fn zeroed_head_gives_flat_logits() {
    let mut model = SpanModel::new(toy_config(), 1).unwrap();
    model.tensor_mut("head.weight").unwrap().fill(0.0);
    model.tensor_mut("head.bias").unwrap().fill(0.0);
    let ex = example("flat", 2, 4, None);
    let scores = &model.forward(&[&ex]).unwrap()[0];
    assert!(scores.start_logits.iter().all(|&l| l == 0.0));
    assert!(scores.end_logits.iter().all(|&l| l == 0.0));
}

#[test]
fn forward_is_deterministic_and_batch_invariant() {
    let model = SpanModel::new(toy_config(), 3).unwrap();
    let a = example("a", 2, 4, None);
    let b = example("b", 1, 6, None);
    let c = example("c", 3, 2, None);

    let once = model.forward(&[&a, &b, &c]).unwrap();
    let twice = model.forward(&[&a, &b, &c]).unwrap();
    assert_eq!(once, twice);

    let permuted = model.forward(&[&c, &a, &b]).unwrap();
    assert_eq!(permuted[1], once[0]);
    assert_eq!(permuted[2], once[1]);
    assert_eq!(permuted[0], once[2]);

    let seq = model.forward_seq(&[&a, &b, &c]).unwrap();
    assert_eq!(seq, once);

    let solo = model.forward(&[&b]).unwrap();
    assert_eq!(solo[0], once[1]);
}

#[test]
fn same_seed_same_model_different_seed_different_model() {
    let m1 = SpanModel::new(toy_config(), 42).unwrap();
    let m2 = SpanModel::new(toy_config(), 42).unwrap();
    let m3 = SpanModel::new(toy_config(), 43).unwrap();
    assert_eq!(snapshot(&m1), snapshot(&m2));
    assert_ne!(
        m1.tensor("head.weight").unwrap(),
        m3.tensor("head.weight").unwrap()
    );
}

#[test]
fn forward_rejects_malformed_examples() {
    let model = SpanModel::new(toy_config(), 0).unwrap();

    let mut too_long = example("long", 6, 8, None);
    assert!(too_long.input_ids.len() > 16);
    assert!(model.forward(&[&too_long]).is_err());
    too_long.input_ids.truncate(4);
    assert!(
        model.forward(&[&too_long]).is_err(),
        "field lengths disagree"
    );

    let mut bad_vocab = example("vocab", 2, 2, None);
    bad_vocab.input_ids[1] = 99;
    assert!(model.forward(&[&bad_vocab]).is_err());

    let mut bad_segment = example("segment", 2, 2, None);
    bad_segment.segment_ids[3] = 7;
    assert!(model.forward(&[&bad_segment]).is_err());
}

#[test]
fn non_finite_parameters_surface_as_numerical_errors() {
    let mut model = SpanModel::new(toy_config(), 0).unwrap();
    model.tensor_mut("head.weight").unwrap()[0] = f64::NAN;
    let ex = example("nan", 2, 3, Some((4, 4)));
    let err = model.forward(&[&ex]).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert_eq!(err.kind(), "numerical");
}

#[test]
fn gradients_match_finite_differences() {
    let mut cfg = toy_config();
    cfg.init_std = 0.3;
    let mut model = SpanModel::new(cfg, 11).unwrap();
    let ex1 = example("g1", 2, 4, Some((4, 6)));
    let ex2 = example("g2", 1, 3, Some((3, 3)));
    let batch = [&ex1, &ex2];

    let (loss, grads) = model.loss_and_gradients(&batch).unwrap();
    assert!(loss.is_finite());
    assert_eq!(grads.len(), model.tensor_names().len());

    let h = 1e-5;
    let mut checked = 0usize;
    for (name, grad) in &grads {
        for (idx, &analytic) in grad.iter().enumerate() {
            let orig = model.tensor(name).unwrap()[idx];
            model.tensor_mut(name).unwrap()[idx] = orig + h;
            let up = model.batch_loss(&batch).unwrap();
            model.tensor_mut(name).unwrap()[idx] = orig - h;
            let down = model.batch_loss(&batch).unwrap();
            model.tensor_mut(name).unwrap()[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            let abs = (analytic - fd).abs();
            let rel = abs / analytic.abs().max(fd.abs()).max(1e-8);
            assert!(
                abs < 1e-7 || rel < 1e-4,
                "tensor {name}[{idx}]: analytic {analytic}, finite difference {fd}"
            );
            checked += 1;
        }
    }
    // Every parameter in the toy model gets checked, not a sample.
    assert_eq!(checked, toy_config().total_parameters());
}

#[test]
fn unused_embedding_rows_get_zero_gradients() {
    let model = SpanModel::new(toy_config(), 5).unwrap();
    let ex = example("z1", 1, 2, Some((3, 4)));
    let (_, grads) = model.loss_and_gradients(&[&ex]).unwrap();
    let d = model.config.hidden;
    let token_grad = &grads["embedding.token"];
    // Token id 19 never appears in the example.
    assert!(token_grad[19 * d..20 * d].iter().all(|&g| g == 0.0));
    let used = ex.input_ids[0] as usize;
    assert!(token_grad[used * d..(used + 1) * d]
        .iter()
        .any(|&g| g != 0.0));
}

#[test]
fn train_batch_overfits_one_example() {
    let mut model = SpanModel::new(toy_config(), 1).unwrap();
    let ex = example("fit", 2, 5, Some((5, 7)));
    let adam = AdamConfig::with_learning_rate(1e-2);
    let first = model.train_batch(&[&ex], &adam).unwrap();
    let mut last = first;
    for _ in 0..99 {
        last = model.train_batch(&[&ex], &adam).unwrap();
    }
    assert!(
        last < first / 4.0 && last < 0.2,
        "loss went {first} -> {last}"
    );

    // The fitted model puts its top span on the gold tokens.
    let scores = model.forward(&[&ex]).unwrap();
    let spans = decode(&scores[0], &ex, 10, 1).unwrap();
    assert_eq!((spans[0].start_token, spans[0].end_token), (5, 7));
}

#[test]
fn training_is_reproducible_from_the_seed() {
    let mut cfg = toy_config();
    cfg.dropout = 0.1;
    let mut m1 = SpanModel::new(cfg.clone(), 7).unwrap();
    let mut m2 = SpanModel::new(cfg, 7).unwrap();
    let ex1 = example("r1", 2, 4, Some((4, 5)));
    let ex2 = example("r2", 1, 5, Some((3, 3)));
    let adam = AdamConfig::with_learning_rate(1e-3);
    for _ in 0..3 {
        let l1 = m1.train_batch(&[&ex1, &ex2], &adam).unwrap();
        let l2 = m2.train_batch(&[&ex1, &ex2], &adam).unwrap();
        assert_eq!(l1, l2);
    }
    assert_eq!(snapshot(&m1), snapshot(&m2));
}

#[test]
fn dropout_perturbs_training_but_not_inference() {
    let mut cfg = toy_config();
    cfg.dropout = 0.5;
    let mut model = SpanModel::new(cfg, 7).unwrap();
    let ex = example("d1", 2, 4, Some((4, 5)));

    // Inference ignores dropout entirely.
    let a = model.forward(&[&ex]).unwrap();
    let b = model.forward(&[&ex]).unwrap();
    assert_eq!(a, b);

    // Two train steps on identical parameters would report the same loss if
    // the dropout stream did not advance.
    let adam = AdamConfig::with_learning_rate(1e-30);
    let l1 = model.train_batch(&[&ex], &adam).unwrap();
    let l2 = model.train_batch(&[&ex], &adam).unwrap();
    assert_ne!(l1, l2);
}

#[test]
fn set_trainable_validates_groups() {
    let mut model = SpanModel::new(toy_config(), 0).unwrap();
    assert_eq!(model.trainable().len(), 4);

    let mut bad = BTreeSet::new();
    bad.insert(LayerGroup::Transformer(3));
    assert!(model.set_trainable(&bad).is_err());
    assert!(model.set_trainable(&BTreeSet::new()).is_err());

    let mut head_only = BTreeSet::new();
    head_only.insert(LayerGroup::Head);
    model.set_trainable(&head_only).unwrap();
    assert_eq!(model.trainable(), head_only);
}

#[test]
fn backward_depth_follows_the_lowest_trainable_group() {
    let mut model = SpanModel::new(toy_config(), 0).unwrap();
    let cases: Vec<(Vec<LayerGroup>, (usize, bool))> = vec![
        (vec![LayerGroup::Head], (2, false)),
        (
            vec![LayerGroup::Head, LayerGroup::Transformer(2)],
            (1, false),
        ),
        (vec![LayerGroup::Transformer(1)], (0, false)),
        (vec![LayerGroup::Embedding, LayerGroup::Head], (0, true)),
    ];
    for (groups, want) in cases {
        let set: BTreeSet<LayerGroup> = groups.into_iter().collect();
        model.set_trainable(&set).unwrap();
        assert_eq!(model.backward_depth(), want);
    }
}

#[test]
fn frozen_groups_never_move() {
    let mut model = SpanModel::new(toy_config(), 2).unwrap();
    let ex = example("f1", 2, 4, Some((4, 6)));
    let adam = AdamConfig::with_learning_rate(1e-2);

    let mut head_only = BTreeSet::new();
    head_only.insert(LayerGroup::Head);
    model.set_trainable(&head_only).unwrap();

    let before = snapshot(&model);
    for _ in 0..3 {
        model.train_batch(&[&ex], &adam).unwrap();
    }
    let after = snapshot(&model);
    for name in groups_of(&before, "embedding.")
        .into_iter()
        .chain(groups_of(&before, "layer_1."))
        .chain(groups_of(&before, "layer_2."))
    {
        assert_eq!(before[&name], after[&name], "{name} moved while frozen");
    }
    assert_ne!(before["head.weight"], after["head.weight"]);
    assert_ne!(before["head.bias"], after["head.bias"]);

    // Unfreeze the top layer: it starts moving, the bottom stays put.
    let mut wider = head_only.clone();
    wider.insert(LayerGroup::Transformer(2));
    model.set_trainable(&wider).unwrap();
    let mid = snapshot(&model);
    for _ in 0..2 {
        model.train_batch(&[&ex], &adam).unwrap();
    }
    let last = snapshot(&model);
    for name in groups_of(&mid, "embedding.")
        .into_iter()
        .chain(groups_of(&mid, "layer_1."))
    {
        assert_eq!(mid[&name], last[&name], "{name} moved while frozen");
    }
    assert_ne!(
        mid["layer_2.attention.query.weight"],
        last["layer_2.attention.query.weight"]
    );

    // Step counters advanced only while trainable: the head saw all five
    // steps, the top layer two, everything else none.
    let steps = &model.adam.as_ref().unwrap().group_steps;
    assert_eq!(steps.get(&LayerGroup::Head), Some(&5));
    assert_eq!(steps.get(&LayerGroup::Transformer(2)), Some(&2));
    assert_eq!(steps.get(&LayerGroup::Transformer(1)), None);
    assert_eq!(steps.get(&LayerGroup::Embedding), None);
}

#[test]
fn adam_rejects_bad_hyperparameters() {
    for bad in [
        AdamConfig::with_learning_rate(0.0),
        AdamConfig::with_learning_rate(-1.0),
        AdamConfig {
            beta1: 1.0,
            ..AdamConfig::with_learning_rate(1e-3)
        },
        AdamConfig {
            epsilon: 0.0,
            ..AdamConfig::with_learning_rate(1e-3)
        },
    ] {
        assert!(bad.validate().is_err());
    }
    assert!(AdamConfig::with_learning_rate(3e-5).validate().is_ok());
}

#[test]
fn checkpoint_round_trips_and_resumes_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");

    let mut cfg = toy_config();
    cfg.dropout = 0.1;
    let mut model = SpanModel::new(cfg, 9).unwrap();
    let mut head_and_top = BTreeSet::new();
    head_and_top.insert(LayerGroup::Head);
    head_and_top.insert(LayerGroup::Transformer(2));
    model.set_trainable(&head_and_top).unwrap();

    let ex1 = example("c1", 2, 4, Some((4, 5)));
    let ex2 = example("c2", 1, 3, Some((3, 3)));
    let adam = AdamConfig::with_learning_rate(1e-3);
    model.train_batch(&[&ex1, &ex2], &adam).unwrap();
    model.train_batch(&[&ex2, &ex1], &adam).unwrap();

    model.save(&path).unwrap();
    let mut restored = SpanModel::load(&path).unwrap();

    assert_eq!(restored.config, model.config);
    assert_eq!(restored.trainable(), model.trainable());
    assert_eq!(snapshot(&restored), snapshot(&model));

    // Resuming taps the same dropout stream and moments: one more identical
    // step stays bit-exact on both sides.
    let l_orig = model.train_batch(&[&ex1, &ex2], &adam).unwrap();
    let l_rest = restored.train_batch(&[&ex1, &ex2], &adam).unwrap();
    assert_eq!(l_orig, l_rest);
    assert_eq!(snapshot(&restored), snapshot(&model));
}

#[test]
fn checkpoint_is_versioned_and_tamper_evident() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let model = SpanModel::new(toy_config(), 0).unwrap();
    model.save(&path).unwrap();

    let text = std::fs::read_to_string(&path).unwrap();
    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(value["format"], "factoidqa.checkpoint");
    assert_eq!(value["version"], 1);
    assert!(value["tensors"]["embedding.token"].is_object());
    assert!(value["tensors"]["head.bias"]["shape"].is_array());
    assert!(value["optimizer"].is_null());

    let mut wrong_format = value.clone();
    wrong_format["format"] = "something.else".into();
    std::fs::write(&path, serde_json::to_string(&wrong_format).unwrap()).unwrap();
    assert!(SpanModel::load(&path).is_err());

    let mut wrong_version = value.clone();
    wrong_version["version"] = 99.into();
    std::fs::write(&path, serde_json::to_string(&wrong_version).unwrap()).unwrap();
    assert!(SpanModel::load(&path).is_err());

    let mut bad_shape = value.clone();
    bad_shape["tensors"]["head.bias"]["shape"] = serde_json::json!([3]);
    std::fs::write(&path, serde_json::to_string(&bad_shape).unwrap()).unwrap();
    let err = SpanModel::load(&path).unwrap_err();
    assert!(err.to_string().contains("head.bias"), "{err}");

    value["tensors"]
        .as_object_mut()
        .unwrap()
        .remove("head.bias");
    std::fs::write(&path, serde_json::to_string(&value).unwrap()).unwrap();
    let err = SpanModel::load(&path).unwrap_err();
    assert!(
        err.to_string().contains("missing tensor head.bias"),
        "{err}"
    );
}

#[test]
fn decode_matches_a_brute_force_oracle() {
    let ex = example("d1", 2, 4, None);
    let n = ex.input_ids.len();
    assert_eq!(n, 9);
    // All candidate logit sums are distinct, so the ranking has no ties for
    // rounding to disturb.
    let start_logits = vec![0.1, -0.3, 0.2, 0.0, 1.0, 0.5, -0.2, 0.8, 0.3];
    let end_logits = vec![-0.1, 0.4, 0.0, 0.2, 0.3, 1.15, 0.6, -0.5, 0.0];
    let scores = SpanScores {
        start_logits: start_logits.clone(),
        end_logits: end_logits.clone(),
    };

    let max_answer_len = 3;
    let spans = decode(&scores, &ex, max_answer_len, 100).unwrap();

    // Oracle: directly enumerate passage spans with softmaxes computed the
    // straightforward way.
    let passage: Vec<usize> = (0..n).filter(|&t| ex.passage_mask[t]).collect();
    let soft = |logits: &[f64]| -> Vec<f64> {
        let denom: f64 = passage.iter().map(|&t| logits[t].exp()).sum();
        logits.iter().map(|&l| l.exp() / denom).collect()
    };
    let ps = soft(&start_logits);
    let pe = soft(&end_logits);
    let mut want: Vec<(usize, usize, f64)> = Vec::new();
    for &s in &passage {
        for &e in &passage {
            if e < s {
                continue;
            }
            let span_len = e - s + 1;
            if span_len <= max_answer_len {
                want.push((s, e, ps[s] * pe[e]));
            }
        }
    }
    want.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());

    assert_eq!(spans.len(), want.len());
    for (got, (s, e, p)) in spans.iter().zip(&want) {
        assert_eq!((got.start_token, got.end_token), (*s, *e));
        assert!((got.probability - p).abs() < 1e-12);
    }
    // Texts come from the passage via the offset map.
    assert_eq!(spans[0].pair_id, "d1");
    for span in &spans {
        let width = span.end_token - span.start_token;
        assert_eq!(span.text.chars().count(), 2 * width + 1);
    }
}

#[test]
fn decode_breaks_ties_earliest_then_shortest() {
    let ex = example("t1", 1, 3, None);
    let n = ex.input_ids.len();
    let scores = SpanScores {
        start_logits: vec![0.0; n],
        end_logits: vec![0.0; n],
    };
    let spans = decode(&scores, &ex, 3, 100).unwrap();
    let order: Vec<(usize, usize)> = spans.iter().map(|s| (s.start_token, s.end_token)).collect();
    // Passage occupies positions 3..6; all six spans tie at 1/9.
    assert_eq!(order, [(3, 3), (3, 4), (3, 5), (4, 4), (4, 5), (5, 5)]);
    for span in &spans {
        assert!((span.probability - 1.0 / 9.0).abs() < 1e-15);
    }

    let top2 = decode(&scores, &ex, 3, 2).unwrap();
    assert_eq!(top2.len(), 2);
    assert_eq!((top2[1].start_token, top2[1].end_token), (3, 4));
}

#[test]
fn decode_respects_max_answer_len() {
    let ex = example("m1", 1, 4, None);
    let n = ex.input_ids.len();
    let scores = SpanScores {
        start_logits: vec![0.0; n],
        end_logits: vec![0.0; n],
    };
    let spans = decode(&scores, &ex, 1, 100).unwrap();
    assert_eq!(spans.len(), 4);
    assert!(spans.iter().all(|s| s.start_token == s.end_token));
}

#[test]
fn decode_with_null_scores_the_cls_span() {
    let ex = example("n1", 2, 4, None);
    let n = ex.input_ids.len();
    let scores = SpanScores {
        start_logits: vec![0.0; n],
        end_logits: vec![0.0; n],
    };
    let (spans, null) = decode_with_null(&scores, &ex, 4, 100).unwrap();
    // Support is [CLS] plus four passage tokens: uniform gives 1/25 per span.
    assert!((null - 1.0 / 25.0).abs() < 1e-15);
    assert_eq!(spans.len(), 10);
    for span in &spans {
        assert!((span.probability - 1.0 / 25.0).abs() < 1e-15);
        assert!(span.start_token >= 4);
    }
}

#[test]
fn decode_validates_its_inputs() {
    let ex = example("v1", 2, 3, None);
    let n = ex.input_ids.len();
    let good = SpanScores {
        start_logits: vec![0.0; n],
        end_logits: vec![0.0; n],
    };
    assert!(decode(&good, &ex, 0, 5).is_err());
    assert!(decode(&good, &ex, 5, 0).is_err());

    let short = SpanScores {
        start_logits: vec![0.0; n - 1],
        end_logits: vec![0.0; n],
    };
    assert!(decode(&short, &ex, 5, 5).is_err());
}

#[test]
fn decode_without_passage_tokens_yields_no_candidates() {
    let no_passage = example("v2", 2, 0, None);
    let m = no_passage.input_ids.len();
    let scores = SpanScores {
        start_logits: vec![0.0; m],
        end_logits: vec![0.0; m],
    };
    assert_eq!(decode(&scores, &no_passage, 5, 5).unwrap(), vec![]);
    let (spans, null) = decode_with_null(&scores, &no_passage, 5, 5).unwrap();
    assert!(spans.is_empty());
    assert_eq!(null, 1.0);
}

#[test]
fn empty_batches_are_rejected() {
    let mut model = SpanModel::new(toy_config(), 0).unwrap();
    let adam = AdamConfig::with_learning_rate(1e-3);
    assert!(model.train_batch(&[], &adam).is_err());
    assert!(model.loss_and_gradients(&[]).is_err());
}
