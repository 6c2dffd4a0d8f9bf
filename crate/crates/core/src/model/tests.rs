use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::*;
use super::*;
use crate::corpus::{encode, Kind, TokenizerConfig};
use crate::numerics::Padding;

fn tiny() -> ModelConfig {
    ModelConfig {
        layers: 2,
        d_model: 8,
        heads: 2,
        char_len: 4,
        conv_first: 12,
        mlp_hidden: 10,
        ..ModelConfig::default()
    }
}

fn seq(text: &str, kind: Kind, cfg: &ModelConfig) -> TokenSeq {
    encode(text, kind, &cfg.tokenizer())
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn bound(cfg: &ModelConfig, seed: u64) -> (Graph, ModelVars) {
    let params = init_params(cfg, seed);
    let mut g = Graph::new();
    let vars = ModelVars::bind(&mut g, &params, cfg, false).unwrap();
    (g, vars)
}

#[test]
fn overlap_embedding_rows_follow_buckets() {
    let cfg = tiny();
    let (mut g, vars) = bound(&cfg, 1);
    let ov = OverlapVector::new(vec![0.3, 0.75, 0.4, 0.3]).unwrap();
    let e = embed_overlap(&mut g, vars.bucket_table, &ov).unwrap();
    let t = g.value(e).clone();
    let table = g.value(vars.bucket_table).clone();
    assert_eq!(t.shape(), &[4, 8]);
    for (i, b) in [30, 75, 40, 30].into_iter().enumerate() {
        assert_eq!(t.row(i), table.row(b));
    }

    let ov = OverlapVector::new(vec![0.301, 0.309, 0.0, 0.0]).unwrap();
    let e = embed_overlap(&mut g, vars.bucket_table, &ov).unwrap();
    let t = g.value(e);
    assert_eq!(t.row(0), t.row(1));
    assert_eq!(t.row(2), t.row(3));
}

#[test]
fn position_table_values() {
    let p = position_table(3, 6).unwrap();
    for j in 0..3 {
        assert_eq!(p.at(0, 2 * j), 0.0);
        assert_eq!(p.at(0, 2 * j + 1), 1.0);
    }
    assert!((p.at(1, 0) - p.at(0, 0) - 1f64.sin()).abs() < 1e-12);
    assert!((p.at(1, 0) - 0.8415).abs() < 1e-4);
    assert!(matches!(
        position_table(2, 5),
        Err(ModelError::OddDimension(5))
    ));

    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[3, 6]));
    let y = position_encode(&mut g, x).unwrap();
    assert_eq!(g.value(y), &p);
}

#[test]
fn attention_with_one_key() {
    let cfg = tiny();
    let (mut g, vars) = bound(&cfg, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let q = g.constant(random_tensor(&mut rng, &[3, 8]));
    let kv = g.constant(random_tensor(&mut rng, &[1, 8]));
    let w = &vars.nl.mechanisms[0].attn;
    let (out, weights) = multi_head_attention(&mut g, q, kv, kv, w, 2).unwrap();
    for a in weights {
        assert!(g.value(a).data().iter().all(|&v| v == 1.0));
    }
    let v = linear(&mut g, kv, &w.v).unwrap();
    let o = linear(&mut g, v, &w.o).unwrap();
    let (out, o) = (g.value(out), g.value(o));
    for i in 0..3 {
        for (a, b) in out.row(i).iter().zip(o.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_weights_are_distributions() {
    let cfg = tiny();
    let (mut g, vars) = bound(&cfg, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = &vars.nl.mechanisms[0].attn;

    let row = random_tensor(&mut rng, &[1, 8]);
    let same = Tensor::from_rows(&vec![row.row(0).to_vec(); 4]);
    let q = g.constant(random_tensor(&mut rng, &[2, 8]));
    let k = g.constant(same);
    let (_, weights) = multi_head_attention(&mut g, q, k, k, w, 2).unwrap();
    for a in weights {
        assert!(g.value(a).data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    for _ in 0..20 {
        let q = g.constant(random_tensor(&mut rng, &[5, 8]));
        let k = g.constant(random_tensor(&mut rng, &[7, 8]));
        let (_, weights) = multi_head_attention(&mut g, q, k, k, w, 2).unwrap();
        for a in weights {
            for r in g.value(a).rows() {
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn attention_rejects_mismatched_key_value() {
    let cfg = tiny();
    let (mut g, vars) = bound(&cfg, 3);
    let q = g.constant(Tensor::zeros(&[2, 8]));
    let k = g.constant(Tensor::zeros(&[3, 8]));
    let v = g.constant(Tensor::zeros(&[4, 8]));
    assert!(multi_head_attention(&mut g, q, k, v, &vars.nl.mechanisms[0].attn, 2).is_err());
}

#[test]
fn char_embedding_shape_and_sharing() {
    let cfg = tiny();
    let (mut g, vars) = bound(&cfg, 4);
    let a = seq("msg a b msg c d e", Kind::NaturalLanguage, &cfg);
    let b = seq("msg", Kind::Code, &cfg);
    let out = char_embed(&mut g, &vars.chars, &[&a, &b]).unwrap();
    let (ta, tb) = (g.value(out[0]), g.value(out[1]));
    assert_eq!(ta.shape(), &[7, 8]);
    assert_eq!(ta.row(0), ta.row(3));
    assert_eq!(ta.row(0), tb.row(0));
    assert_ne!(ta.row(0), ta.row(1));
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn similar_identifiers_embed_closer() {
    let cfg = ModelConfig {
        char_len: 16,
        d_model: 16,
        ..tiny()
    };
    for seed in 0..5 {
        let (mut g, vars) = bound(&cfg, seed);
        let s = seq(
            "joint_table_b joint_table_c qxvzkwmrplyhd",
            Kind::Code,
            &cfg,
        );
        let out = char_embed(&mut g, &vars.chars, &[&s]).unwrap();
        let t = g.value(out[0]);
        assert!(
            cosine(t.row(0), t.row(1)) > cosine(t.row(0), t.row(2)),
            "seed {seed}"
        );
    }
}

fn gate_fixture(seed: u64) -> (Graph, ModelVars, Var, Var) {
    let cfg = tiny();
    let (mut g, vars) = bound(&cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = g.constant(random_tensor(&mut rng, &[4, 8]));
    let s = g.constant(random_tensor(&mut rng, &[4, 8]));
    (g, vars, c, s)
}

#[test]
fn gating_with_equal_logits_averages_values() {
    let (mut g, vars, c, _) = gate_fixture(5);
    let w = vars.nl.mechanisms[0].gate;
    // Same keys and values on both streams give equal logits.
    let w = super::params::GatingWeights {
        key_semantic: w.key_control,
        value_semantic: w.value_control,
        ..w
    };
    let (out, gate) = gating(&mut g, c, c, &w, 2).unwrap();
    assert!(g
        .value(gate)
        .data()
        .iter()
        .all(|&v| (v - 0.5).abs() < 1e-12));
    let vo = linear(&mut g, c, &w.value_control).unwrap();
    let expected = linear(&mut g, vo, &w.out).unwrap();
    for (a, b) in g.value(out).data().iter().zip(g.value(expected).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn gating_depends_on_semantic_input() {
    let (mut g, vars, c, s) = gate_fixture(6);
    let w = vars.nl.mechanisms[0].gate;
    let (a, _) = gating(&mut g, c, s, &w, 2).unwrap();
    let mut shifted = g.value(s).clone();
    shifted.data_mut()[3] += 1e-3;
    let s2 = g.constant(shifted);
    let (b, _) = gating(&mut g, c, s2, &w, 2).unwrap();
    let diff: f64 = g
        .value(a)
        .data()
        .iter()
        .zip(g.value(b).data())
        .map(|(x, y)| (x - y).abs())
        .sum();
    assert!(diff > 1e-8);
}

#[test]
fn gating_shape_mismatch() {
    let (mut g, vars, c, _) = gate_fixture(7);
    let s = g.constant(Tensor::zeros(&[3, 8]));
    assert!(gating(&mut g, c, s, &vars.nl.mechanisms[0].gate, 2).is_err());
}

fn pair(cfg: &ModelConfig, q: &str, c: &str) -> PairInput {
    PairInput::new(
        cfg.overlap_metric,
        &seq(q, Kind::NaturalLanguage, cfg),
        &seq(c, Kind::Code, cfg),
    )
    .unwrap()
}

fn encode_nl(cfg: &ModelConfig, params: &ParamSet, p: &PairInput) -> Tensor {
    let mut g = Graph::new();
    let vars = ModelVars::bind(&mut g, params, cfg, false).unwrap();
    let t = char_embed(&mut g, &vars.chars, &[&p.query]).unwrap()[0];
    let x = embed_overlap(&mut g, vars.bucket_table, &p.overlap_nl).unwrap();
    let y = encoder_forward(&mut g, x, t, &vars.nl, cfg, &mut Mode::inference()).unwrap();
    g.value(y).clone()
}

#[test]
fn encoder_shape_and_depth() {
    let cfg = tiny();
    let p = pair(&cfg, "select name from users", "SELECT name FROM users");
    let deep = encode_nl(&cfg, &init_params(&cfg, 8), &p);
    assert_eq!(deep.shape(), &[4, 8]);
    let shallow_cfg = ModelConfig {
        layers: 1,
        ..cfg.clone()
    };
    let shallow = encode_nl(&shallow_cfg, &init_params(&shallow_cfg, 8), &p);
    assert_ne!(deep, shallow);
}

#[test]
fn encoder_is_order_sensitive() {
    let cfg = tiny();
    let params = init_params(&cfg, 9);
    let code = seq("x = alpha + beta", Kind::Code, &cfg);
    let a = PairInput::new(
        cfg.overlap_metric,
        &seq("alpha beta", Kind::NaturalLanguage, &cfg),
        &code,
    )
    .unwrap();
    let b = PairInput::new(
        cfg.overlap_metric,
        &seq("beta alpha", Kind::NaturalLanguage, &cfg),
        &code,
    )
    .unwrap();
    let ea = encode_nl(&cfg, &params, &a);
    let eb = encode_nl(&cfg, &params, &b);
    // Swap the rows of one output back; they still differ because of positions.
    let swapped = Tensor::from_rows(&[eb.row(1).to_vec(), eb.row(0).to_vec()]);
    assert_ne!(ea, swapped);
}

#[test]
fn zero_mechanism_weights_leave_normalized_embedding() {
    let cfg = ModelConfig {
        layers: 1,
        ..tiny()
    };
    let mut params = init_params(&cfg, 10);
    for (name, t) in params.iter_mut() {
        let keep =
            name.starts_with("embed.") || name.starts_with("char.") || name.ends_with("norm.gain");
        if !keep {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let p = pair(
        &cfg,
        "count orders by region",
        "SELECT region, COUNT(*) FROM orders",
    );
    let out = encode_nl(&cfg, &params, &p);

    let mut g = Graph::new();
    let vars = ModelVars::bind(&mut g, &params, &cfg, false).unwrap();
    let x = embed_overlap(&mut g, vars.bucket_table, &p.overlap_nl).unwrap();
    let m = &vars.nl.mechanisms[0];
    let y = g.layer_norm(x, m.norm_gain, m.norm_bias).unwrap();
    for (a, b) in out.data().iter().zip(g.value(y).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn pooling_properties() {
    let cfg = tiny();
    let (mut g, vars) = bound(&cfg, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = &vars.nl.pool;

    let one = g.constant(random_tensor(&mut rng, &[1, 8]));
    let p = pool_encoder(&mut g, one, w, vars.pool_pad).unwrap();
    let c = g
        .conv1d(one, w.w, Some(w.b), Padding::Learned(vars.pool_pad))
        .unwrap();
    assert_eq!(g.value(p).data(), g.value(c).data());

    let x = random_tensor(&mut rng, &[5, 8]);
    let xv = g.constant(x.clone());
    let p = pool_encoder(&mut g, xv, w, vars.pool_pad).unwrap();
    let c = g
        .conv1d(xv, w.w, Some(w.b), Padding::Learned(vars.pool_pad))
        .unwrap();
    for r in g.value(c).rows() {
        for (v, m) in r.iter().zip(g.value(p).data()) {
            assert!(m >= v);
        }
    }

    let empty = g.constant(Tensor::zeros(&[0, 8]));
    assert!(pool_encoder(&mut g, empty, w, vars.pool_pad).is_err());
}

#[test]
fn pooling_ignores_duplicated_rows_away_from_edges() {
    // A kernel-1 pool makes the conv position-independent, so duplicating a
    // row cannot introduce a new value.
    let cfg = ModelConfig {
        conv_kernel: 1,
        ..tiny()
    };
    let (mut g, vars) = bound(&cfg, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random_tensor(&mut rng, &[3, 8]);
    let mut rows = x.rows();
    rows.insert(1, rows[1].clone());
    let a = g.constant(x);
    let b = g.constant(Tensor::from_rows(&rows));
    let pa = pool_encoder(&mut g, a, &vars.nl.pool, vars.pool_pad).unwrap();
    let pb = pool_encoder(&mut g, b, &vars.nl.pool, vars.pool_pad).unwrap();
    assert_eq!(g.value(pa), g.value(pb));
}

#[test]
fn cross_attention_shapes_and_swap() {
    let cfg = ModelConfig {
        share_cross_weights: true,
        ..tiny()
    };
    let (mut g, vars) = bound(&cfg, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let nl = g.constant(random_tensor(&mut rng, &[3, 8]));
    let code = g.constant(random_tensor(&mut rng, &[5, 8]));
    let (a, b) =
        cross_attention_block(&mut g, nl, code, &vars.cross_nl, &vars.cross_code, 2).unwrap();
    assert_eq!(g.value(a).shape(), &[8]);
    assert_eq!(g.value(b).shape(), &[8]);
    let (c, d) =
        cross_attention_block(&mut g, code, nl, &vars.cross_nl, &vars.cross_code, 2).unwrap();
    assert_eq!(g.value(a), g.value(d));
    assert_eq!(g.value(b), g.value(c));
}

#[test]
fn relevance_from_logit_examples() {
    assert_eq!(relevance_from_logits(&[0.7, 0.7]), 0.5);
    assert!((relevance_from_logits(&[3f64.ln(), 0.0]) - 0.75).abs() < 1e-12);
}

#[test]
fn scores_are_probabilities_and_deterministic() {
    let cfg = tiny();
    let model = Model::init(cfg.clone(), 14).unwrap();
    let p = pair(&cfg, "get user email", "SELECT email FROM user");
    let q = pair(&cfg, "delete old rows", "DELETE FROM logs WHERE ts < 5");
    let logits = model.logits(&[&p, &q]).unwrap();
    for l in &logits {
        let r = relevance_from_logits(l);
        let other = softmax(&Tensor::vector(l.to_vec())).data()[1];
        assert!(r > 0.0 && r < 1.0);
        assert!((r + other - 1.0).abs() < 1e-9);
    }
    let again = Model::init(cfg, 14).unwrap().logits(&[&p, &q]).unwrap();
    assert_eq!(logits, again);
    // Batching does not change per-pair results.
    assert_eq!(model.logits(&[&q]).unwrap()[0], logits[1]);
}

#[test]
fn checkpoint_roundtrip_preserves_scores() {
    let cfg = tiny();
    let model = Model::init(cfg.clone(), 15).unwrap();
    let ckpt = model.to_checkpoint(7);
    let bytes = ckpt.to_bytes();
    let back = Checkpoint::read_from(&bytes[..]).unwrap();
    let restored = Model::from_checkpoint(&back).unwrap();
    assert_eq!(restored.config(), model.config());
    let p = pair(&cfg, "sum totals", "SELECT SUM(total) FROM t");
    let (a, b) = (
        model.score_pairs(&[&p]).unwrap(),
        restored.score_pairs(&[&p]).unwrap(),
    );
    // Stored values are single precision.
    assert!((a[0] - b[0]).abs() < 1e-5);
}

#[test]
fn describe_lists_every_parameter() {
    let model = Model::init(tiny(), 0).unwrap();
    let text = model.describe();
    assert_eq!(text.lines().count(), model.params().len() + 1);
    assert!(text.contains("embed.char\t[100, 8]\t800"));
    let total: usize = text
        .lines()
        .last()
        .unwrap()
        .split('\t')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(total, model.params().num_values());
}

#[test]
fn tokenizer_config_follows_model() {
    let cfg = tiny();
    assert_eq!(
        cfg.tokenizer(),
        TokenizerConfig {
            char_len: 4,
            max_len_nl: 50,
            max_len_code: 200
        }
    );
}
