//! Release-gate checks against independent oracles: finite differences,
//! brute-force enumeration, a coordinate-geometry protein model, direct
//! interpolation residuals and hand-worked shape arithmetic.

use neuropt_core::ensemble::{adapt, adapt_members, averaging_blend, bagging_logits, bagging_solutions, joint_loss, stacking_features, TransferConfig};
use neuropt_core::network::{BuildConfig, InputBatch, NetShape, Network, SeqLayer};
use neuropt_core::objectives::{finite_diff_oracle, protein_table, Family, Objective, ObjectiveSpec, ProteinModel};
use neuropt_core::search::rbf::RbfSurrogate;
use neuropt_core::space::{enumerate_reduced, space_size, BatchSize, CellOp, Genotype, PenaltyConfig};
use neuropt_core::tensor::{NodeId, ParamId, ParamStore, PoolKind, Tape, Tensor};
use neuropt_core::trainer::{train, TrainConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeSet, HashMap};
use std::f64::consts::PI;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        CheckResult {
            name,
            passed,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

/// Every check, in a fixed order.
pub fn run_all() -> Vec<CheckResult> {
    vec![
        shape_arithmetic(),
        parameter_count(),
        space_cardinality(),
        layer_gradients(20),
        objective_gradients(20),
        protein_gradients(20),
        rbf_interpolation(50),
        rbf_cubic_recovery(),
        penalty_cases(),
        isomorphism_classes(),
        reference_shift_invariance(),
        ensemble_identities(),
        protein_energy_oracle(100),
    ]
}

fn bounds(dim: usize) -> BuildConfig {
    BuildConfig::new(vec![-1.0; dim], vec![1.0; dim])
}

/// 5x5 input, 2x2 conv with stride 1, 2x2 max pool with stride 1: 4x4, then
/// 3x3, then nine features.
pub fn shape_arithmetic() -> CheckResult {
    let mut cfg = bounds(9);
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
    );
    let Ok(net) = net else {
        return CheckResult::new("shape arithmetic", false, "worked example does not build");
    };
    let shapes = &net.shapes()[..3];
    let passed = shapes == [[1, 5, 5], [1, 4, 4], [1, 3, 3]] && net.head().features == 9;
    CheckResult::new(
        "shape arithmetic",
        passed,
        format!("shapes {shapes:?}, {} features", net.head().features),
    )
}

/// Ten 5x5 filters on one channel plus biases hold 260 parameters.
pub fn parameter_count() -> CheckResult {
    let mut cfg = bounds(1);
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
    .expect("valid layer");
    let s = net.store();
    let count: usize = ["layer0.conv.weight", "layer0.conv.bias"]
        .iter()
        .map(|n| s.value(s.find(n).expect("named parameter")).len())
        .sum();
    CheckResult::new("parameter count", count == 260, format!("{count} parameters"))
}

pub fn space_cardinality() -> CheckResult {
    let expected = (1u64 << 21) * 3u64.pow(5) * 2;
    let got = space_size();
    CheckResult::new("search-space size", got == expected && got == 1_019_215_872, format!("{got}"))
}

/// Tensor whose entries are a shuffled grid with spacing well above the
/// finite-difference step, so max pooling never switches winners.
fn spaced_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * (i as f64 + 0.5) / n as f64).collect();
    v.shuffle(rng);
    Tensor::new(shape, v).expect("consistent shape")
}

/// Worst relative error of central differences against reverse mode, over
/// every parameter scalar and every input scalar.
fn fd_error<F>(store: &mut ParamStore, input: &Tensor, loss: F) -> f64
where
    F: Fn(&ParamStore, &mut Tape, NodeId) -> NodeId,
{
    let rel = |fd: f64, g: f64| (fd - g).abs() / fd.abs().max(g.abs()).max(1e-6);
    let eval = |store: &ParamStore, x: &Tensor| {
        let mut t = Tape::new();
        let xn = t.constant(x.clone());
        let l = loss(store, &mut t, xn);
        t.value(l).data()[0]
    };
    store.zero_grad();
    let mut tape = Tape::new();
    let xn = tape.variable(input.clone());
    let l = loss(store, &mut tape, xn);
    let grads = tape.backward(l, store).expect("single backward");
    let dx = grads.wrt(xn).expect("input gradient").to_vec();
    let analytic: Vec<Vec<f64>> = store.ids().map(|id| store.grad(id).to_vec()).collect();

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let ids: Vec<ParamId> = store.ids().collect();
    for (p, id) in ids.into_iter().enumerate() {
        for k in 0..store.value(id).len() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + h;
            let up = eval(store, input);
            store.value_mut(id).data_mut()[k] = orig - h;
            let down = eval(store, input);
            store.value_mut(id).data_mut()[k] = orig;
            worst = worst.max(rel((up - down) / (2.0 * h), analytic[p][k]));
        }
    }
    let mut x = input.clone();
    for k in 0..x.len() {
        let orig = x.data()[k];
        x.data_mut()[k] = orig + h;
        let up = eval(store, &x);
        x.data_mut()[k] = orig - h;
        let down = eval(store, &x);
        x.data_mut()[k] = orig;
        worst = worst.max(rel((up - down) / (2.0 * h), dx[k]));
    }
    worst
}

type LayerCase = fn(&mut ChaCha8Rng) -> f64;

fn coeffs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn conv_case(rng: &mut ChaCha8Rng) -> f64 {
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=1);
    let mut s = ParamStore::new();
    let w = s.add("w", spaced_tensor(rng, vec![3, 2, 3, 3]));
    let b = s.add("b", spaced_tensor(rng, vec![3]));
    let x = spaced_tensor(rng, vec![2, 2, 6, 6]);
    let out = neuropt_core::tensor::conv_output_size(6, 3, stride, pad).expect("fits");
    let c = coeffs(rng, 2 * 3 * out * out);
    fd_error(&mut s, &x, |s, t, x| {
        let y = t.conv2d(s, x, w, Some(b), stride, pad).unwrap();
        t.dot_const(y, c.clone()).unwrap()
    })
}

fn pool_case(kind: PoolKind, rng: &mut ChaCha8Rng) -> f64 {
    let mut s = ParamStore::new();
    let x = spaced_tensor(rng, vec![2, 2, 5, 5]);
    let c = coeffs(rng, 2 * 2 * 3 * 3);
    fd_error(&mut s, &x, |_, t, x| {
        let y = t.pool2d(x, kind, 3, 1).unwrap();
        t.dot_const(y, c.clone()).unwrap()
    })
}

fn dense_case(rng: &mut ChaCha8Rng) -> f64 {
    let mut s = ParamStore::new();
    let w = s.add("w", spaced_tensor(rng, vec![12, 4]));
    let b = s.add("b", spaced_tensor(rng, vec![4]));
    let x = spaced_tensor(rng, vec![3, 3, 2, 2]);
    let c = coeffs(rng, 12);
    fd_error(&mut s, &x, |s, t, x| {
        let f = t.flatten(x);
        let y = t.dense(s, f, w, Some(b)).unwrap();
        t.dot_const(y, c.clone()).unwrap()
    })
}

fn tanh_case(rng: &mut ChaCha8Rng) -> f64 {
    let mut s = ParamStore::new();
    let x = spaced_tensor(rng, vec![3, 4, 1, 1]);
    let lo: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..0.0)).collect();
    let hi: Vec<f64> = lo.iter().map(|l| l + rng.random_range(0.5..5.0)).collect();
    let c = coeffs(rng, 12);
    fd_error(&mut s, &x, |_, t, x| {
        let f = t.flatten(x);
        let y = t.scaled_tanh(f, &lo, &hi).unwrap();
        t.dot_const(y, c.clone()).unwrap()
    })
}

fn merge_case(rng: &mut ChaCha8Rng) -> f64 {
    let mut s = ParamStore::new();
    let w = s.add("w", spaced_tensor(rng, vec![2, 2, 1, 1]));
    let x = spaced_tensor(rng, vec![1, 2, 7, 7]);
    let c = coeffs(rng, 4 * 5 * 5);
    fd_error(&mut s, &x, |s, t, x| {
        let p = t.conv2d(s, x, w, None, 1, 0).unwrap();
        let sum = t.add(&[p, x]).unwrap();
        let crop = t.center_crop(sum, 5, 5).unwrap();
        let other = t.center_crop(x, 5, 5).unwrap();
        let cat = t.concat_channels(&[crop, other]).unwrap();
        t.dot_const(cat, c.clone()).unwrap()
    })
}

/// Convolution (random stride and padding), both poolings, dense, flatten,
/// scaled tanh, and the add, crop and concat merges, each at `points`
/// random draws. Passes below a relative error of 1e-4.
pub fn layer_gradients(points: usize) -> CheckResult {
    let cases: [(&str, LayerCase); 6] = [
        ("conv", conv_case),
        ("max pool", |r| pool_case(PoolKind::Max, r)),
        ("avg pool", |r| pool_case(PoolKind::Avg, r)),
        ("dense+flatten", dense_case),
        ("scaled tanh", tanh_case),
        ("add+crop+concat", merge_case),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = (0.0f64, "");
    for (name, case) in cases {
        for _ in 0..points {
            let e = case(&mut rng);
            if !(e <= worst.0) {
                worst = (e, name);
            }
        }
    }
    CheckResult::new(
        "layer gradients",
        worst.0 < 1e-4,
        format!("worst relative error {:.2e} ({})", worst.0, worst.1),
    )
}

/// Every benchmark family at D = 10 plus the sphere and shifted quadratic,
/// `points` uniform points each. Error is `|fd - g| / max(1, |g|)`.
pub fn objective_gradients(points: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut specs: Vec<String> = Family::ALL.iter().map(|f| format!("F{}:10:3", f.number())).collect();
    specs.extend(["sphere:10".to_string(), "quad:10:3".to_string()]);
    let objectives: Vec<(String, Objective)> = specs
        .into_iter()
        .map(|s| {
            let obj = s.parse::<ObjectiveSpec>().expect("valid id").build().expect("builds");
            (s, obj)
        })
        .collect();
    let mut worst = (0.0f64, String::new());
    for (name, obj) in &objectives {
        for _ in 0..points {
            let x: Vec<f64> = obj.lower().iter().zip(obj.upper()).map(|(&l, &u)| rng.random_range(l..u)).collect();
            let e = finite_diff_oracle(obj.landscape(), &x, 1e-5).unwrap_or(f64::INFINITY);
            if !(e <= worst.0) {
                worst = (e, name.clone());
            }
        }
    }
    CheckResult::new(
        "objective gradients",
        worst.0 < 1e-4,
        format!("worst error {:.2e} ({})", worst.0, worst.1),
    )
}

/// All protein sequences at `points` self-avoiding conformations each.
pub fn protein_gradients(points: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = (0.0f64, "");
    for model in protein_table() {
        for _ in 0..points {
            let angles = model.random_conformation(&mut rng, 0.7);
            let e = finite_diff_oracle(model, &angles, 1e-5).unwrap_or(f64::INFINITY);
            if !(e <= worst.0) {
                worst = (e, model.id());
            }
        }
    }
    CheckResult::new(
        "protein gradients",
        worst.0 < 1e-5,
        format!("worst error {:.2e} ({}), {} sequences", worst.0, worst.1, protein_table().len()),
    )
}

/// Residual at the centers of `fits` random surrogates: N uniform in
/// [10, 100], dimension uniform in 3..=6, points and targets uniform.
pub fn rbf_interpolation(fits: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..fits {
        let n = rng.random_range(10..=100);
        let d = rng.random_range(3..=6);
        let centers: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random()).collect()).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        match RbfSurrogate::fit(&centers, &y) {
            Ok(s) => {
                for (c, v) in centers.iter().zip(&y) {
                    worst = worst.max((s.predict(c) - v).abs());
                }
            }
            Err(_) => worst = f64::INFINITY,
        }
    }
    CheckResult::new("rbf interpolation", worst < 1e-8, format!("worst residual {worst:.2e} over {fits} fits"))
}

/// A cubic sampled at 81 points on [-2, 2], checked at 200 held-out points in
/// [-1, 1].
pub fn rbf_cubic_recovery() -> CheckResult {
    let p = |x: f64| 0.5 - 2.0 * x + 1.5 * x * x + x * x * x;
    let centers: Vec<Vec<f64>> = (0..=80).map(|i| vec![-2.0 + 4.0 * i as f64 / 80.0]).collect();
    let y: Vec<f64> = centers.iter().map(|c| p(c[0])).collect();
    let Ok(s) = RbfSurrogate::fit(&centers, &y) else {
        return CheckResult::new("rbf cubic recovery", false, "fit failed");
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let worst = (0..200)
        .map(|_| {
            let x: f64 = rng.random_range(-1.0..1.0);
            (s.predict(&[x]) - p(x)).abs()
        })
        .fold(0.0, f64::max);
    CheckResult::new("rbf cubic recovery", worst < 1e-6, format!("worst error {worst:.2e}"))
}

pub fn penalty_cases() -> CheckResult {
    let cfg = PenaltyConfig {
        edge_excess: 3.0,
        dangling_node: 7.0,
    };
    let ops = [CellOp::Conv3x3; 5];
    let path: Vec<(usize, usize)> = (1..7).map(|v| (v, v + 1)).collect();
    let mut ten = path.clone();
    ten.extend([(1, 3), (1, 4), (1, 5), (1, 6)]);
    let cases = [
        ("ten edges", Genotype::from_edges(&ten, ops, BatchSize::One), cfg.edge_excess),
        ("edgeless", Genotype::from_edges(&[], ops, BatchSize::One), 6.0 * cfg.dangling_node),
        ("full path", Genotype::from_edges(&path, ops, BatchSize::One), 0.0),
    ];
    let mut detail = Vec::new();
    let mut passed = true;
    for (name, g, want) in cases {
        let got = g.decode().validate(&cfg).penalty;
        passed &= got == want;
        detail.push(format!("{name} {got} (want {want})"));
    }
    CheckResult::new("penalty", passed, detail.join(", "))
}

fn adjacency(g: &Genotype) -> [[bool; 7]; 7] {
    let mut adj = [[false; 7]; 7];
    let mut k = 0;
    for i in 0..7 {
        for j in i + 1..7 {
            adj[i][j] = g.edges()[k];
            k += 1;
        }
    }
    adj
}

/// Relabels intermediate nodes (`perm[v - 1]` is the new label of node `v`);
/// `None` when an edge would point backwards.
fn relabel(g: &Genotype, perm: &[usize]) -> Option<Genotype> {
    let adj = adjacency(g);
    let mut label = [0usize; 7];
    label[6] = 6;
    label[1..6].copy_from_slice(perm);
    let mut pairs = Vec::new();
    for i in 0..7 {
        for j in 0..7 {
            if adj[i][j] {
                let (a, b) = (label[i], label[j]);
                if a > b {
                    return None;
                }
                pairs.push((a + 1, b + 1));
            }
        }
    }
    let mut ops = [CellOp::Conv3x3; 5];
    for v in 1..6 {
        ops[label[v] - 1] = g.ops()[v - 1];
    }
    Some(Genotype::from_edges(&pairs, ops, g.batch()))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..n {
        let mut next = Vec::new();
        for p in &out {
            for v in (1..=n).filter(|v| !p.contains(v)) {
                let mut q = p.clone();
                q.push(v);
                next.push(q);
            }
        }
        out = next;
    }
    out
}

fn root(parent: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    parent[x] = r;
    r
}

/// Equivalence classes of `space` under every relabeling of the intermediate
/// nodes, by union-find.
pub fn permutation_classes(space: &[Genotype]) -> usize {
    let index: HashMap<Genotype, usize> = space.iter().enumerate().map(|(i, g)| (*g, i)).collect();
    let mut parent: Vec<usize> = (0..space.len()).collect();
    let perms = permutations(5);
    for (i, g) in space.iter().enumerate() {
        for p in &perms {
            if let Some(&j) = relabel(g, p).and_then(|h| index.get(&h)) {
                let (a, b) = (root(&mut parent, i), root(&mut parent, j));
                parent[a] = b;
            }
        }
    }
    (0..space.len()).map(|i| root(&mut parent, i)).collect::<BTreeSet<_>>().len()
}

/// Canonical keys on the reduced four-node space against the permutation
/// classes.
pub fn isomorphism_classes() -> CheckResult {
    let space: Vec<Genotype> = match enumerate_reduced(4) {
        Ok(s) => s.collect(),
        Err(e) => return CheckResult::new("isomorphism classes", false, e.to_string()),
    };
    let keys: BTreeSet<_> = space.iter().map(|g| g.canonical_key()).collect();
    let classes = permutation_classes(&space);
    CheckResult::new(
        "isomorphism classes",
        keys.len() == classes,
        format!("{} keys, {classes} classes, {} genotypes", keys.len(), space.len()),
    )
}

fn path_genotype() -> Genotype {
    Genotype::from_edges(&[(1, 2), (2, 7)], [CellOp::Conv3x3; 5], BatchSize::One)
}

/// Training with the reference value shifted by 1e6 leaves weights and the
/// best solution bit-identical.
pub fn reference_shift_invariance() -> CheckResult {
    let obj = ObjectiveSpec::ShiftedQuadratic { dim: 4, seed: 2 }.build().expect("builds");
    let shape = NetShape {
        cells: 1,
        channels: 2,
        num_sol: 16,
        input_size: 6,
    };
    let cfg = shape.config(obj.lower().to_vec(), obj.upper().to_vec());
    let mut a = Network::build(&path_genotype().with_batch(BatchSize::ThirtyTwo), &cfg).expect("valid genotype");
    a.init_weights(3);
    let mut b = a.clone();
    let inputs = InputBatch::for_config(&cfg, 4);
    let tc = TrainConfig {
        max_epochs: 5,
        max_budget: 5,
        initial_budget: 1,
        ..TrainConfig::default()
    };
    let ra = train(&mut a, &obj, &inputs, &tc).expect("trains");
    let shifted = TrainConfig { f_star: 1e6, ..tc };
    let rb = train(&mut b, &obj, &inputs, &shifted).expect("trains");
    let same = a.store() == b.store() && ra.best_solution == rb.best_solution && ra.best_value == rb.best_value;
    CheckResult::new("reference shift", same, format!("best {:.6e} vs {:.6e}", ra.best_value, rb.best_value))
}

/// Bagging identical members, the averaging blend against bagging's pre-tanh
/// mean, and the hybrid joint loss against separately computed member
/// losses. Passes within 1e-12.
pub fn ensemble_identities() -> CheckResult {
    let src = ObjectiveSpec::ShiftedQuadratic { dim: 3, seed: 1 }.build().expect("builds");
    let target = ObjectiveSpec::ShiftedQuadratic { dim: 5, seed: 1 }.build().expect("builds");
    let shape = NetShape {
        cells: 1,
        channels: 2,
        num_sol: 12,
        input_size: 6,
    };
    let cfg = shape.config(src.lower().to_vec(), src.upper().to_vec());
    let members: Vec<Network> = (0..3)
        .map(|k| {
            let mut n = Network::build(&path_genotype(), &cfg).expect("valid genotype");
            n.init_weights(10 + k);
            n
        })
        .collect();
    let tcfg = TransferConfig::default();
    let adapted = adapt_members(&members, &target, &tcfg).expect("adapts");
    let input = InputBatch::for_config(adapted[0].config(), 5);

    let one = adapt(&members[0], &target, 9).expect("adapts");
    let single = one.solutions(input.all().clone()).expect("forward");
    let bag = bagging_solutions(&vec![one; 4], input.all()).expect("forward");
    let e_bag = bag.max_abs_diff(&single) / 100.0;

    let features = stacking_features(&adapted, input.all()).expect("forward");
    let blend = averaging_blend(adapted.len(), &target, shape.num_sol).expect("builds");
    let mut tape = Tape::new();
    let (pre, _) = blend.forward_with_logits(&mut tape, features).expect("forward");
    let e_stack = tape.value(pre).max_abs_diff(&bagging_logits(&adapted, input.all()).expect("forward"));

    let joint = joint_loss(&adapted, &target, input.all()).expect("evaluates");
    let mean: f64 = adapted
        .iter()
        .map(|m| joint_loss(std::slice::from_ref(m), &target, input.all()).expect("evaluates"))
        .sum::<f64>()
        / adapted.len() as f64;
    let e_hybrid = (joint - mean).abs() / mean.abs();

    let worst = e_bag.max(e_stack).max(e_hybrid);
    CheckResult::new(
        "ensemble identities",
        worst <= 1e-12,
        format!("bagging {e_bag:.1e}, stacking {e_stack:.1e}, hybrid {e_hybrid:.1e}"),
    )
}

/// Chain built by rotating the bond vector with an explicit 2x2 matrix.
pub fn oracle_positions(angles_deg: &[f64]) -> Vec<[f64; 2]> {
    let mut bond = [1.0, 0.0];
    let mut pts = vec![[0.0, 0.0], bond];
    for &deg in angles_deg {
        let (s, c) = (deg * PI / 180.0).sin_cos();
        bond = [c * bond[0] - s * bond[1], s * bond[0] + c * bond[1]];
        let last = *pts.last().expect("nonempty");
        pts.push([last[0] + bond[0], last[1] + bond[1]]);
    }
    pts
}

/// Bending term plus pairwise `r^-12 - C r^-6` with `C` = 1, 1/2 and -1/2
/// for AA, BB and mixed pairs.
pub fn oracle_energy(sequence: &str, angles_deg: &[f64]) -> f64 {
    let is_a: Vec<bool> = sequence.chars().map(|c| c == 'A').collect();
    let p = oracle_positions(angles_deg);
    let mut e: f64 = angles_deg.iter().map(|&d| 0.25 * (1.0 - (d * PI / 180.0).cos())).sum();
    for i in 0..p.len() {
        for j in i + 2..p.len() {
            let r = ((p[i][0] - p[j][0]).powi(2) + (p[i][1] - p[j][1]).powi(2)).sqrt();
            let c = match (is_a[i], is_a[j]) {
                (true, true) => 1.0,
                (false, false) => 0.5,
                _ => -0.5,
            };
            e += r.powi(-12) - c * r.powi(-6);
        }
    }
    e
}

/// `per_sequence` self-avoiding conformations of every sequence against the
/// coordinate oracle, plus the exact three-monomer straight chain. Overlapping
/// monomers are excluded: near `r = 0` the `r^-12` term amplifies rounding
/// in the positions beyond the tolerance for any pair of implementations.
pub fn protein_energy_oracle(per_sequence: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = (0.0f64, "");
    for model in protein_table() {
        let seq = model.sequence_string();
        for _ in 0..per_sequence {
            let angles = model.random_conformation(&mut rng, 0.5);
            let rel = match model.energy(&angles) {
                Ok(got) => {
                    let want = oracle_energy(&seq, &angles);
                    (got - want).abs() / want.abs().max(f64::MIN_POSITIVE)
                }
                Err(_) => f64::INFINITY,
            };
            if !(rel <= worst.0) {
                worst = (rel, model.id());
            }
        }
    }
    let aaa = ProteinModel::new("AAA", "AAA").and_then(|m| m.energy(&[0.0]));
    let exact = aaa.as_ref().is_ok_and(|e| *e == 2f64.powi(-12) - 2f64.powi(-6));
    CheckResult::new(
        "protein energy",
        worst.0 < 1e-10 && exact,
        format!("worst relative error {:.2e} ({}), AAA straight chain {:?}", worst.0, worst.1, aaa.ok()),
    )
}
