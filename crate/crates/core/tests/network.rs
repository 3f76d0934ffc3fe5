use neuropt_core::network::{
    BuildConfig, Checkpoint, CheckpointMeta, InputBatch, Network, SeqLayer,
};
use neuropt_core::space::{enumerate_reduced, BatchSize, CellOp, Genotype, PenaltyConfig};
use neuropt_core::tensor::{AdamConfig, PoolKind, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

fn bounds(dim: usize, lo: f64, hi: f64) -> BuildConfig {
    BuildConfig::new(vec![lo; dim], vec![hi; dim])
}

fn small(dim: usize, n: usize, cells: usize) -> BuildConfig {
    let mut c = bounds(dim, -100.0, 100.0);
    c.input_size = n;
    c.cells = cells;
    c.num_sol = 8;
    c
}

fn path_cell() -> Genotype {
    Genotype::from_edges(
        &[(1, 2), (2, 3), (3, 7), (1, 4), (4, 7)],
        [
            CellOp::Conv3x3,
            CellOp::MaxPool3x3,
            CellOp::AvgPool3x3,
            CellOp::Conv3x3,
            CellOp::Conv3x3,
        ],
        BatchSize::ThirtyTwo,
    )
}

fn backprop_sum(net: &mut Network, input: Tensor) {
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, input).unwrap();
    let loss = tape.sum(out);
    tape.backward(loss, net.store_mut()).unwrap();
}

#[test]
fn worked_example_shapes() {
    let mut cfg = bounds(9, -1.0, 1.0);
    cfg.input_size = 5;
    let net = Network::sequential(
        &cfg,
        1,
        &[
            SeqLayer::Conv {
                filters: 1,
                kernel: 2,
                stride: 1,
                pad: 0,
            },
            SeqLayer::Pool {
                kind: PoolKind::Max,
                window: 2,
                stride: 1,
            },
        ],
    )
    .unwrap();
    assert_eq!(net.shapes()[0], [1, 5, 5]);
    assert_eq!(net.shapes()[1], [1, 4, 4]);
    assert_eq!(net.shapes()[2], [1, 3, 3]);
    assert_eq!(net.head().features, 9);
    let x = net.solutions(Tensor::zeros(vec![1, 1, 5, 5])).unwrap();
    assert_eq!(x.shape(), &[1, 9]);
}

#[test]
fn ten_five_by_five_filters_have_260_parameters() {
    let mut cfg = bounds(1, -1.0, 1.0);
    cfg.input_size = 28;
    let net = Network::sequential(
        &cfg,
        1,
        &[SeqLayer::Conv {
            filters: 10,
            kernel: 5,
            stride: 1,
            pad: 0,
        }],
    )
    .unwrap();
    let s = net.store();
    let w = s.value(s.find("layer0.conv.weight").unwrap()).len();
    let b = s.value(s.find("layer0.conv.bias").unwrap()).len();
    assert_eq!(w + b, 260);
}

#[test]
fn linear_conv_cell_gives_thirty() {
    let g = Genotype::from_edges(&[(1, 2), (2, 7)], [CellOp::Conv3x3; 5], BatchSize::One);
    let net = Network::build(&g, &small(4, 32, 1)).unwrap();
    let spatial: Vec<usize> = net.shapes().iter().filter(|s| s[1] > 1).map(|s| s[1]).collect();
    assert_eq!(spatial.iter().min(), Some(&30));
    assert!(net.shapes().contains(&[8, 30, 30]));
}

#[test]
fn zero_head_emits_bounds_midpoint() {
    let mut cfg = small(3, 10, 1);
    cfg.lower = vec![-1.0, 0.0, 10.0];
    cfg.upper = vec![3.0, 1.0, 20.0];
    let mut net = Network::build(&path_cell(), &cfg).unwrap();
    net.init_weights(1);
    let h = *net.head();
    net.store_mut().value_mut(h.weight).data_mut().fill(0.0);
    let x = net.solutions(InputBatch::generate(4, 10, 0).all().clone()).unwrap();
    for i in 0..4 {
        assert_eq!(x.row(i), &[1.0, 0.5, 15.0]);
    }
}

#[test]
fn forward_is_deterministic() {
    let mut net = Network::build(&path_cell(), &small(5, 12, 2)).unwrap();
    net.init_weights(2);
    let batch = InputBatch::generate(6, 12, 3);
    let a = net.solutions(batch.slice(0, 6)).unwrap();
    let b = net.solutions(batch.slice(0, 6)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn head_bias_gradient_matches_finite_differences() {
    let mut net = Network::build(&path_cell(), &small(4, 12, 2)).unwrap();
    net.init_weights(5);
    let input = InputBatch::generate(3, 12, 1).all().clone();
    let mean = |net: &Network| {
        let x = net.solutions(input.clone()).unwrap();
        x.data().iter().sum::<f64>() / x.len() as f64
    };
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, input.clone()).unwrap();
    let n = tape.value(out).len();
    let loss = tape.dot_const(out, vec![1.0 / n as f64; n]).unwrap();
    tape.backward(loss, net.store_mut()).unwrap();
    let bias = net.head().bias;
    let analytic = net.store().grad(bias).to_vec();
    let h = 1e-5;
    for k in 0..analytic.len() {
        let orig = net.store().value(bias).data()[k];
        net.store_mut().value_mut(bias).data_mut()[k] = orig + h;
        let up = mean(&net);
        net.store_mut().value_mut(bias).data_mut()[k] = orig - h;
        let down = mean(&net);
        net.store_mut().value_mut(bias).data_mut()[k] = orig;
        let fd = (up - down) / (2.0 * h);
        assert!((fd - analytic[k]).abs() / analytic[k].abs().max(1.0) < 1e-4);
    }
}

#[test]
fn glorot_mean_is_centered() {
    let mut cfg = bounds(100, -1.0, 1.0);
    cfg.input_size = 10;
    let mut net = Network::sequential(&cfg, 1, &[]).unwrap();
    net.init_weights(17);
    let w = net.store().value(net.head().weight);
    assert_eq!(w.len(), 10_000);
    let a = (6.0f64 / 200.0).sqrt();
    let sigma = a / 3f64.sqrt();
    let mean = w.data().iter().sum::<f64>() / w.len() as f64;
    assert!(mean.abs() <= 3.0 * sigma / 100.0, "mean {mean}");
    assert!(w.data().iter().all(|v| v.abs() < a));
}

#[test]
fn frozen_body_survives_adam() {
    let mut net = Network::build(&path_cell(), &small(3, 12, 2)).unwrap();
    net.init_weights(8);
    let before = net.store().clone();
    net.freeze_body();
    let input = InputBatch::generate(2, 12, 0).all().clone();
    let cfg = AdamConfig::default().with_learning_rate(0.01);
    for _ in 0..100 {
        backprop_sum(&mut net, input.clone());
        net.store_mut().adam_step(&cfg).unwrap();
    }
    let head = *net.head();
    for (id, p) in net.store().iter() {
        if id == head.weight || id == head.bias {
            assert_ne!(p.value, before.get(id).value);
        } else {
            assert_eq!(p.value, before.get(id).value, "{}", p.name);
        }
    }
}

#[test]
fn replace_head_resizes_and_keeps_body() {
    let mut net = Network::build(&path_cell(), &small(30, 12, 1)).unwrap();
    net.init_weights(4);
    let before = net.store().clone();
    let f = net.head().features;
    net.replace_head(vec![-5.0; 50], vec![5.0; 50], 9).unwrap();
    assert_eq!(net.store().value(net.head().weight).shape(), &[f, 50]);
    assert_eq!(net.dim(), 50);
    let head = *net.head();
    for (id, p) in net.store().iter() {
        if id != head.weight && id != head.bias {
            assert_eq!(p.value, before.get(id).value);
        }
    }
    let x = net.solutions(InputBatch::generate(2, 12, 0).all().clone()).unwrap();
    assert_eq!(x.shape(), &[2, 50]);
    assert!(x.data().iter().all(|v| v.abs() < 5.0));
}

#[test]
fn fresh_init_differs_from_transferred_weights() {
    let mut a = Network::build(&path_cell(), &small(6, 12, 1)).unwrap();
    let mut b = a.clone();
    a.init_weights(1);
    b.init_weights(2);
    assert_ne!(a.store(), b.store());
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let mut net = Network::build(&path_cell(), &small(7, 12, 2)).unwrap();
    net.init_weights(21);
    let input = InputBatch::generate(2, 12, 5).all().clone();
    for _ in 0..3 {
        backprop_sum(&mut net, input.clone());
        net.store_mut().adam_step(&AdamConfig::default()).unwrap();
    }
    net.freeze_body();
    let meta = CheckpointMeta {
        epochs: 3,
        evals: 6,
        best_value: Some(0.1 + 0.2),
        best_solution: Some(vec![1.0 / 3.0, -2e-300, 7.0]),
        objective: Some("sphere:7".into()),
        weight_seed: Some(21),
        input_seed: Some(5),
    };
    let ck = net.to_checkpoint(meta);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.json");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.network.store().step(), 3);
    assert_eq!(
        back.network.solutions(input.clone()).unwrap(),
        net.solutions(input).unwrap()
    );

    let mut text = ck.to_json().unwrap();
    text = text.replacen("\"schema\": 1", "\"schema\": 99", 1);
    assert!(Checkpoint::from_json(&text).is_err());
}

/// Permutation of node labels (0 and 6 fixed) mapping `a` onto `b`.
fn find_relabeling(a: &Genotype, b: &Genotype) -> Option<[usize; 7]> {
    let (ga, gb) = (a.decode(), b.decode());
    let mut perm = [0, 1, 2, 3, 4, 5, 6];
    let mut found = None;
    permute(&mut perm, 1, &mut |p| {
        if found.is_some() {
            return;
        }
        for i in 0..7 {
            for j in 0..7 {
                if ga.has_edge(i, j) != (p[i] < p[j] && gb.has_edge(p[i], p[j])) {
                    return;
                }
            }
        }
        for v in 1..6 {
            if ga.degree(v) > 0 && ga.op(v) != gb.op(p[v]) {
                return;
            }
        }
        found = Some(*p);
    });
    found
}

fn permute(p: &mut [usize; 7], k: usize, visit: &mut dyn FnMut(&[usize; 7])) {
    if k == 6 {
        visit(p);
        return;
    }
    for i in k..6 {
        p.swap(k, i);
        permute(p, k + 1, visit);
        p.swap(k, i);
    }
}

/// Copies weights of `src` (built from `a`) into `dst` (built from `b`)
/// following the node relabeling, including the output concat order.
fn transfer(src: &Network, dst: &mut Network, a: &Genotype, perm: &[usize; 7]) {
    let rename = |name: &str| -> String {
        name.split('.')
            .map(|part| {
                for prefix in ["n", "from"] {
                    if let Some(v) = part.strip_prefix(prefix).and_then(|s| s.parse::<usize>().ok()) {
                        return format!("{prefix}{}", perm[v]);
                    }
                }
                part.to_string()
            })
            .collect::<Vec<_>>()
            .join(".")
    };
    let members_a: Vec<usize> = a.decode().predecessors(6).collect();
    let mut members_b: Vec<usize> = members_a.iter().map(|&u| perm[u]).collect();
    members_b.sort();
    for (_, p) in src.store().iter() {
        let target = dst.store().find(&rename(&p.name)).unwrap_or_else(|| panic!("{}", p.name));
        let mut value = p.value.clone();
        if p.name.ends_with("out.proj.weight") {
            let shape = value.shape().to_vec();
            let (co, block) = (shape[0], shape[1] / members_a.len());
            let mut data = vec![0.0; value.len()];
            for (ka, &u) in members_a.iter().enumerate() {
                let kb = members_b.iter().position(|&w| w == perm[u]).unwrap();
                for o in 0..co {
                    for c in 0..block {
                        data[o * shape[1] + kb * block + c] = value.data()[o * shape[1] + ka * block + c];
                    }
                }
            }
            value = Tensor::new(shape, data).unwrap();
        }
        *dst.store_mut().value_mut(target) = value;
    }
}

#[test]
fn isomorphic_genotypes_compute_the_same_function() {
    let mut by_key: HashMap<String, Vec<Genotype>> = HashMap::new();
    for g in enumerate_reduced(5).unwrap() {
        if g.decode().validate(&PenaltyConfig::default()).is_valid() {
            by_key.entry(g.canonical_key().as_str().to_string()).or_default().push(g);
        }
    }
    let mut keys: Vec<_> = by_key.keys().cloned().collect();
    keys.sort();
    let input = InputBatch::generate(2, 14, 4).all().clone();
    let mut checked = 0;
    for key in keys {
        let group = &by_key[&key];
        if group.len() < 2 || checked >= 60 {
            continue;
        }
        let (a, b) = (&group[0], &group[group.len() - 1]);
        let perm = find_relabeling(a, b).expect("same key implies a relabeling");
        let cfg = small(3, 14, 2);
        let mut na = Network::build(a, &cfg).unwrap();
        let mut nb = Network::build(b, &cfg).unwrap();
        assert_eq!(na.program().len(), nb.program().len());
        assert_eq!(na.num_params(), nb.num_params());
        na.init_weights(checked as u64);
        transfer(&na, &mut nb, a, &perm);
        let xa = na.solutions(input.clone()).unwrap();
        let xb = nb.solutions(input.clone()).unwrap();
        assert!(xa.max_abs_diff(&xb) < 1e-9, "{a} vs {b}");
        checked += 1;
    }
    assert!(checked >= 20, "only {checked} isomorphic pairs");
}

fn valid_genotype(seed: u64) -> Genotype {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let g = Genotype::random(&mut rng);
        if g.decode().validate(&PenaltyConfig::default()).is_valid() {
            return g;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn inferred_shapes_match_forward_pass(seed in any::<u64>(), cells in 1usize..4, n in 8usize..20) {
        let g = valid_genotype(seed);
        let cfg = small(5, n, cells);
        let mut net = match Network::build(&g, &cfg) {
            Ok(net) => net,
            Err(e) => {
                prop_assert!(e.to_string().contains("cell depth exceeds input size"));
                return Ok(());
            }
        };
        net.init_weights(seed);
        let mut tape = Tape::new();
        let nodes = net.forward_trace(&mut tape, InputBatch::generate(2, n, seed).all().clone()).unwrap();
        for (slot, node) in nodes.iter().enumerate() {
            let shape = tape.value(*node).shape();
            let [c, h, w] = net.shapes()[slot];
            if shape.len() == 4 {
                prop_assert_eq!(shape, &[2, c, h, w][..]);
            } else {
                prop_assert_eq!(shape, &[2, c * h * w][..]);
            }
        }
    }

    #[test]
    fn solutions_stay_inside_bounds(seed in any::<u64>(), lo in -50.0f64..0.0, width in 0.1f64..100.0) {
        let g = valid_genotype(seed);
        let mut cfg = small(4, 16, 1);
        cfg.lower = vec![lo; 4];
        cfg.upper = vec![lo + width; 4];
        if let Ok(mut net) = Network::build(&g, &cfg) {
            net.init_weights(seed);
            let x = net.solutions(InputBatch::generate(3, 16, seed).all().clone()).unwrap();
            for v in x.data() {
                prop_assert!(*v >= lo && *v <= lo + width);
            }
        }
    }
}
