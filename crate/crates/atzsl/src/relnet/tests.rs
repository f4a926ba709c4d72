use super::*;
use crate::diffcore::{Graph, Tensor};

pub(crate) fn tiny_config() -> NetConfig {
    NetConfig {
        input_dim: 4,
        prototype_dim: 3,
        feature_hidden: vec![5],
        attr_hidden: 4,
        embed_dim: 3,
        relation_hidden: 4,
        temperature: 1.0,
        combine: Combine::Concat,
    }
}

fn protos(rows: &[(u32, &[f64])]) -> PrototypeSet {
    let dim = rows[0].1.len();
    let ids = rows.iter().map(|&(id, _)| ClassId(id)).collect();
    let data = rows.iter().flat_map(|&(_, p)| p.to_vec()).collect();
    PrototypeSet::new(ids, Tensor::matrix(rows.len(), dim, data).unwrap()).unwrap()
}

#[test]
fn zero_weight_head_scores_equal_bias() {
    let mut net = RelationNet::init_params(&tiny_config(), 3).unwrap();
    let last = net.relation_layers.last_mut().unwrap();
    last.weight = Tensor::zeros(last.weight.shape().to_vec());
    last.bias = Tensor::from_vec(vec![0.75]).unwrap();
    let ps = protos(&[(0, &[1.0, 2.0, 3.0]), (1, &[4.0, 5.0, 6.0])]);
    for x in [[0.0; 4], [1.0, -2.0, 3.0, -4.0]] {
        let scores = relation_scores(&net, &Tensor::from_vec(x.to_vec()).unwrap(), &ps).unwrap();
        assert!(scores.data().iter().all(|&s| s == 0.75));
    }
}

#[test]
fn score_count_matches_prototype_count() {
    let net = RelationNet::init_params(&tiny_config(), 3).unwrap();
    let ps = protos(&[
        (0, &[0.1, 0.2, 0.3]),
        (1, &[0.4, 0.5, 0.6]),
        (2, &[0.7, 0.8, 0.9]),
        (5, &[1.0, 1.1, 1.2]),
    ]);
    let x = Tensor::from_vec(vec![0.5, -0.5, 0.25, 0.0]).unwrap();
    assert_eq!(relation_scores(&net, &x, &ps).unwrap().len(), 4);
}

#[test]
fn hand_computed_one_hidden_unit_score() {
    // 1-d input, 1-d prototype, single hidden unit everywhere, hand-set weights.
    let config = NetConfig {
        input_dim: 1,
        prototype_dim: 1,
        feature_hidden: vec![1],
        attr_hidden: 1,
        embed_dim: 1,
        relation_hidden: 1,
        temperature: 1.0,
        combine: Combine::Concat,
    };
    let mut net = RelationNet::init_params(&config, 0).unwrap();
    let set = |d: &mut Dense, w: &[f64], b: &[f64]| {
        let shape = d.weight.shape().to_vec();
        d.weight = Tensor::new(shape, w.to_vec()).unwrap();
        d.bias = Tensor::from_vec(b.to_vec()).unwrap();
    };
    // f_φ: relu(2x + 1) then ·0.5 − 0.25
    set(&mut net.feature_layers[0], &[2.0], &[1.0]);
    set(&mut net.feature_layers[1], &[0.5], &[-0.25]);
    // g_ϕ: relu(−p + 0.5) then ·3 + 0.2
    set(&mut net.attr_layers[0], &[-1.0], &[0.5]);
    set(&mut net.attr_layers[1], &[3.0], &[0.2]);
    // ψ over [fx, gp]: relu(0.7·fx − 0.3·gp + 0.1) then ·2 − 1
    set(&mut net.relation_layers[0], &[0.7, -0.3], &[0.1]);
    set(&mut net.relation_layers[1], &[2.0], &[-1.0]);

    let x = 0.8;
    let p = -0.4;
    let fx = 0.5 * f64::max(0.0, 2.0 * x + 1.0) - 0.25;
    let gp = 3.0 * f64::max(0.0, -p + 0.5) + 0.2;
    let hidden = f64::max(0.0, 0.7 * fx - 0.3 * gp + 0.1);
    let expected = 2.0 * hidden - 1.0;

    let ps = protos(&[(0, &[p])]);
    let scores = relation_scores(&net, &Tensor::from_vec(vec![x]).unwrap(), &ps).unwrap();
    assert!((scores.data()[0] - expected).abs() < 1e-12);
}

#[test]
fn equal_scores_give_uniform_probabilities() {
    for gamma in [0.1, 1.0, 42.0] {
        let scores = Tensor::from_vec(vec![3.7; 5]).unwrap();
        let probs = class_probabilities(&scores, gamma).unwrap();
        assert!(probs.data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }
}

#[test]
fn huge_temperature_approaches_uniform() {
    let scores = Tensor::from_vec(vec![12.0, -3.0, 0.5, 7.7]).unwrap();
    let probs = class_probabilities(&scores, 1e9).unwrap();
    for &p in probs.data() {
        assert!((p - 0.25).abs() < 1e-6);
    }
}

#[test]
fn analytic_two_class_softmax() {
    let scores = Tensor::from_vec(vec![2f64.ln(), 0.0]).unwrap();
    let probs = class_probabilities(&scores, 1.0).unwrap();
    assert!((probs.data()[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((probs.data()[1] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn nonpositive_temperature_rejected() {
    let scores = Tensor::from_vec(vec![1.0, 2.0]).unwrap();
    assert!(class_probabilities(&scores, 0.0).is_err());
    assert!(class_probabilities(&scores, -1.0).is_err());
}

#[test]
fn probabilities_form_a_simplex() {
    // Random finite scores, including extreme magnitudes.
    let mut state = 0xfeedu64;
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
        ((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 400.0
    };
    for n in [1usize, 2, 7, 33] {
        let scores = Tensor::from_vec((0..n).map(|_| next()).collect()).unwrap();
        for gamma in [0.05, 1.0, 300.0] {
            let probs = class_probabilities(&scores, gamma).unwrap();
            assert!(probs.data().iter().all(|&p| p >= 0.0));
            let total: f64 = probs.data().iter().sum();
            assert!((total - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn certain_prediction_has_zero_loss_and_uniform_has_ln_n() {
    // Drive the score gap so large that the softmax saturates exactly.
    let config = tiny_config();
    let mut net = RelationNet::init_params(&config, 5).unwrap();
    let last = net.relation_layers.last_mut().unwrap();
    last.weight = Tensor::zeros(last.weight.shape().to_vec());
    last.bias = Tensor::from_vec(vec![0.0]).unwrap();
    let ps = protos(&[
        (0, &[0.0, 0.0, 0.0]),
        (1, &[1.0, 1.0, 1.0]),
        (2, &[2.0, 2.0, 2.0]),
    ]);
    let x = Tensor::from_vec(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    // Zero head: every score equals the bias, so probabilities are uniform.
    let loss = ce_loss(&net, &x, 1, &ps, 1.0).unwrap();
    assert!((loss - 3f64.ln()).abs() < 1e-12);

    // Probability exactly 1 on the true class: loss 0. Scores are produced by
    // a hand-built graph so the gap can saturate the softmax.
    let mut g = Graph::new();
    let scores = g.leaf(Tensor::matrix(1, 2, vec![1000.0, 0.0]).unwrap());
    let loss = net.ce_from_scores(&mut g, scores, &[0], 1.0).unwrap();
    assert_eq!(g.value(loss).item().unwrap(), 0.0);
}

#[test]
fn ce_loss_matches_direct_summation_oracle() {
    let config = tiny_config();
    let net = RelationNet::init_params(&config, 11).unwrap();
    let ps = protos(&[
        (0, &[0.3, -0.7, 0.2]),
        (1, &[-0.1, 0.4, 0.9]),
        (2, &[0.8, 0.8, -0.5]),
    ]);
    let x = Tensor::from_vec(vec![0.4, -0.2, 0.9, -1.3]).unwrap();
    for label in 0..3 {
        for gamma in [0.5, 1.0, 3.0] {
            let loss = ce_loss(&net, &x, label, &ps, gamma).unwrap();
            // Independent oracle: −Σ_j q_j log p_j by direct summation over
            // naively normalized exponentials.
            let scores = relation_scores(&net, &x, &ps).unwrap();
            let exps: Vec<f64> = scores.data().iter().map(|&r| (r / gamma).exp()).collect();
            let total: f64 = exps.iter().sum();
            let oracle: f64 = (0..3)
                .map(|j| {
                    let q = if j == label { 1.0 } else { 0.0 };
                    -q * (exps[j] / total).ln()
                })
                .sum();
            assert!((loss - oracle).abs() < 1e-12, "label {label} γ {gamma}");
        }
    }
}

#[test]
fn ce_loss_is_nonnegative() {
    let net = RelationNet::init_params(&tiny_config(), 21).unwrap();
    let ps = protos(&[(0, &[1.0, 0.0, 2.0]), (1, &[0.0, 3.0, 1.0])]);
    let mut state = 7u64;
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
        (state >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
    };
    for _ in 0..50 {
        let x = Tensor::from_vec((0..4).map(|_| next()).collect()).unwrap();
        let loss = ce_loss(&net, &x, 0, &ps, 1.0).unwrap();
        assert!(loss >= 0.0);
    }
}

#[test]
fn invalid_label_index_rejected() {
    let net = RelationNet::init_params(&tiny_config(), 3).unwrap();
    let ps = protos(&[(0, &[0.0, 0.0, 0.0])]);
    let x = Tensor::from_vec(vec![0.0; 4]).unwrap();
    assert!(ce_loss(&net, &x, 1, &ps, 1.0).is_err());
}

#[test]
fn single_unseen_class_always_predicted() {
    let net = RelationNet::init_params(&tiny_config(), 8).unwrap();
    let ps = protos(&[(7, &[0.5, 0.5, 0.5])]);
    let x = Tensor::from_vec(vec![1.0, -1.0, 0.5, 0.0]).unwrap();
    assert_eq!(predict_standard(&net, &x, &ps).unwrap(), ClassId(7));
}

#[test]
fn prediction_is_argmax_of_scores() {
    // Zero head with per-class bias is not expressible, so check the argmax
    // rule directly on probabilities.
    let probs = Tensor::from_vec(vec![1.0, 5.0, 2.0]).unwrap();
    let ids = [ClassId(10), ClassId(11), ClassId(12)];
    assert_eq!(argmax_class(&probs, &ids), ClassId(11));
    // Ties break toward the lowest class id.
    let tied = Tensor::from_vec(vec![0.5, 0.5]).unwrap();
    assert_eq!(argmax_class(&tied, &[ClassId(9), ClassId(2)]), ClassId(2));
}

#[test]
fn empty_prototype_set_rejected_for_prediction() {
    let net = RelationNet::init_params(&tiny_config(), 8).unwrap();
    let x = Tensor::from_vec(vec![0.0; 4]).unwrap();
    let empty = PrototypeSet::new(vec![], Tensor::matrix(0, 3, vec![]).unwrap()).unwrap();
    assert!(predict_standard(&net, &x, &empty).is_err());
}

#[test]
fn prediction_invariant_to_temperature() {
    let mut rng_state = 99u64;
    let mut next = || {
        rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
        (rng_state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    };
    let net1 = RelationNet::init_params(&tiny_config(), 31).unwrap();
    let mut net10 = net1.clone();
    net10.config.temperature = 10.0;
    let ps = protos(&[
        (0, &[0.2, 0.4, 0.6]),
        (1, &[0.9, 0.1, 0.5]),
        (2, &[0.3, 0.8, 0.2]),
    ]);
    for _ in 0..100 {
        let x = Tensor::from_vec((0..4).map(|_| next()).collect()).unwrap();
        assert_eq!(
            predict_standard(&net1, &x, &ps).unwrap(),
            predict_standard(&net10, &x, &ps).unwrap()
        );
    }
}

#[test]
fn generalized_prediction_takes_union_argmax() {
    let net = RelationNet::init_params(&tiny_config(), 13).unwrap();
    let seen = protos(&[(0, &[0.1, 0.1, 0.1])]);
    let unseen = protos(&[(1, &[0.9, 0.9, 0.9])]);
    let x = Tensor::from_vec(vec![0.4, -0.6, 0.2, 0.7]).unwrap();
    let winner = predict_generalized(&net, &x, &seen, &unseen).unwrap();
    // Whichever union member wins must be the union argmax.
    let union = PrototypeSet::union(&seen, &unseen).unwrap();
    let scores = relation_scores(&net, &x, &union).unwrap();
    let best = if scores.data()[0] >= scores.data()[1] {
        ClassId(0)
    } else {
        ClassId(1)
    };
    assert_eq!(winner, best);
}

#[test]
fn duplicate_class_id_in_union_rejected() {
    let net = RelationNet::init_params(&tiny_config(), 13).unwrap();
    let seen = protos(&[(0, &[0.1, 0.1, 0.1])]);
    let dup = protos(&[(0, &[0.9, 0.9, 0.9])]);
    let x = Tensor::from_vec(vec![0.0; 4]).unwrap();
    assert!(predict_generalized(&net, &x, &seen, &dup).is_err());
}

#[test]
fn init_is_deterministic_with_zero_biases() {
    let config = tiny_config();
    let a = RelationNet::init_params(&config, 1234).unwrap();
    let b = RelationNet::init_params(&config, 1234).unwrap();
    for (ta, tb) in a.param_tensors().iter().zip(b.param_tensors()) {
        assert!(ta
            .data()
            .iter()
            .zip(tb.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    for dense in a
        .feature_layers
        .iter()
        .chain(&a.attr_layers)
        .chain(&a.relation_layers)
    {
        assert!(dense.bias.data().iter().all(|&v| v == 0.0));
    }
    let c = RelationNet::init_params(&config, 1235).unwrap();
    assert!(a.param_tensors()[0].data() != c.param_tensors()[0].data());
}

#[test]
fn init_weight_mean_is_near_zero() {
    // One wide layer gives ~1e5 draws; the empirical mean of U(−b, b) over n
    // draws lies within 3·b/√(3n) of 0 with ~99.7% confidence (seed fixed).
    let config = NetConfig {
        input_dim: 320,
        prototype_dim: 2,
        feature_hidden: vec![320],
        attr_hidden: 2,
        embed_dim: 2,
        relation_hidden: 2,
        temperature: 1.0,
        combine: Combine::Concat,
    };
    let net = RelationNet::init_params(&config, 2024).unwrap();
    let w = &net.feature_layers[0].weight;
    let n = w.len() as f64;
    assert!(n >= 1e5);
    let bound = (6.0 / (320.0 + 320.0)).sqrt();
    let mean = w.data().iter().sum::<f64>() / n;
    let sigma_mean = bound / (3.0f64).sqrt() / n.sqrt();
    assert!(mean.abs() <= 3.0 * sigma_mean, "mean {mean} vs 3σ {}", 3.0 * sigma_mean);
}

#[test]
fn product_combine_uses_embed_width() {
    let mut config = tiny_config();
    config.combine = Combine::Product;
    let net = RelationNet::init_params(&config, 4).unwrap();
    assert_eq!(
        net.relation_layers[0].weight.shape(),
        &[config.embed_dim, config.relation_hidden]
    );
    let ps = protos(&[(0, &[0.3, 0.1, 0.2]), (1, &[0.6, 0.4, 0.5])]);
    let x = Tensor::from_vec(vec![0.2, 0.4, 0.6, 0.8]).unwrap();
    assert_eq!(relation_scores(&net, &x, &ps).unwrap().len(), 2);
}

#[test]
fn input_gradient_unchanged_by_bias_translated_prototype_embeddings() {
    // Adding a constant vector to every prototype embedding through the
    // attribute module's output bias, while subtracting its image from the
    // relation head's first-layer bias, leaves the network function and hence
    // the input gradient unchanged.
    let config = tiny_config();
    let net = RelationNet::init_params(&config, 77).unwrap();
    let shift = [0.37, -0.92, 0.15];

    let mut translated = net.clone();
    {
        let attr_out = translated.attr_layers.last_mut().unwrap();
        let mut b = attr_out.bias.data().to_vec();
        for (bv, &s) in b.iter_mut().zip(&shift) {
            *bv += s;
        }
        attr_out.bias = Tensor::from_vec(b).unwrap();
    }
    {
        // Compensate: ψ sees [fx, gp]; the prototype part occupies the second
        // embed_dim block of the first-layer weight rows.
        let w = translated.relation_layers[0].weight.clone();
        let e = config.embed_dim;
        let mut b = translated.relation_layers[0].bias.data().to_vec();
        for out in 0..b.len() {
            let mut dot = 0.0;
            for (k, &s) in shift.iter().enumerate() {
                dot += s * w.at2(e + k, out);
            }
            b[out] -= dot;
        }
        translated.relation_layers[0].bias = Tensor::from_vec(b).unwrap();
    }

    let ps = protos(&[(0, &[0.3, -0.7, 0.2]), (1, &[-0.1, 0.4, 0.9])]);
    let x = Tensor::from_vec(vec![0.4, -0.2, 0.9, -1.3]).unwrap();

    let grad_of = |net: &RelationNet| -> Vec<f64> {
        let mut g = Graph::new();
        let params = net.bind(&mut g);
        let xn = g.leaf(Tensor::matrix(1, 4, x.data().to_vec()).unwrap());
        let pn = g.leaf(ps.matrix().clone());
        let loss = net.ce_loss_node(&mut g, &params, xn, pn, &[1], 1.0).unwrap();
        g.backward(loss).unwrap().get(xn).data().to_vec()
    };
    let g1 = grad_of(&net);
    let g2 = grad_of(&translated);
    for (a, b) in g1.iter().zip(&g2) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }

    // And the autodiff gradient agrees with central finite differences.
    let h = 1e-5;
    for i in 0..4 {
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        let lp = ce_loss(&net, &Tensor::from_vec(plus).unwrap(), 1, &ps, 1.0).unwrap();
        let lm = ce_loss(&net, &Tensor::from_vec(minus).unwrap(), 1, &ps, 1.0).unwrap();
        let fd = (lp - lm) / (2.0 * h);
        assert!((g1[i] - fd).abs() <= 1e-4 * f64::max(1.0, g1[i].abs()));
    }
}
