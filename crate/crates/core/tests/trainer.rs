use neuropt_core::network::{BuildConfig, InputBatch, Network};
use neuropt_core::objectives::{Landscape, Objective, ObjectiveError, ObjectiveSpec};
use neuropt_core::space::{BatchSize, CellOp, Genotype};
use neuropt_core::trainer::{budgeted_train, train, StopReason, TrainConfig};
use std::sync::atomic::{AtomicUsize, Ordering};

fn genotype(batch: BatchSize) -> Genotype {
    Genotype::from_edges(
        &[(1, 2), (2, 7), (1, 3), (3, 7)],
        [CellOp::Conv3x3, CellOp::AvgPool3x3, CellOp::Conv3x3, CellOp::Conv3x3, CellOp::Conv3x3],
        batch,
    )
}

fn setup(spec: &str, batch: BatchSize, num_sol: usize) -> (Network, Objective, InputBatch) {
    let objective = spec.parse::<ObjectiveSpec>().unwrap().build().unwrap();
    let mut cfg = BuildConfig::new(objective.lower().to_vec(), objective.upper().to_vec());
    cfg.input_size = 8;
    cfg.cells = 1;
    cfg.num_sol = num_sol;
    let mut net = Network::build(&genotype(batch), &cfg).unwrap();
    net.init_weights(7);
    let inputs = InputBatch::for_config(&cfg, 3);
    (net, objective, inputs)
}

fn epochs(n: usize) -> TrainConfig {
    TrainConfig {
        max_epochs: n,
        max_budget: n,
        initial_budget: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn two_epochs_cost_two_passes_regardless_of_batch() {
    for batch in [BatchSize::One, BatchSize::ThirtyTwo] {
        let (mut net, obj, inputs) = setup("sphere:4", batch, 500);
        let r = train(&mut net, &obj, &inputs, &epochs(2)).unwrap();
        assert_eq!(r.evals, 1000);
        assert_eq!(obj.evaluations(), 1000);
        assert_eq!(r.epochs, 2);
        assert_eq!(r.stop, StopReason::MaxEpochs);
    }
}

#[test]
fn reference_shift_leaves_trajectory_bit_identical() {
    let (net, obj, inputs) = setup("F5:6:1", BatchSize::ThirtyTwo, 64);
    let mut a = net.clone();
    let mut b = net;
    let ra = train(&mut a, &obj, &inputs, &epochs(4)).unwrap();
    let cfg = TrainConfig {
        f_star: 1e6,
        ..epochs(4)
    };
    let rb = train(&mut b, &obj, &inputs, &cfg).unwrap();
    assert_eq!(a.store(), b.store());
    assert_eq!(ra.best_solution, rb.best_solution);
    assert_eq!(ra.best_value, rb.best_value);
    for (x, y) in ra.history.iter().zip(&rb.history) {
        assert!((x.loss - (y.loss + 1e6)).abs() <= 1e-9 * y.loss.abs().max(1e6));
    }
}

#[test]
fn training_is_deterministic_and_best_is_monotone() {
    let (net, obj, inputs) = setup("F4:5:2", BatchSize::One, 40);
    let mut a = net.clone();
    let mut b = net;
    let ra = train(&mut a, &obj, &inputs, &epochs(3)).unwrap();
    let rb = train(&mut b, &obj, &inputs, &epochs(3)).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a.store(), b.store());
    for w in ra.history.windows(2) {
        assert!(w[1].best_f <= w[0].best_f);
    }
    assert_eq!(ra.best_value, obj.value(&ra.best_solution).unwrap());
}

#[test]
fn training_lowers_the_loss() {
    let (mut net, obj, inputs) = setup("sphere:4", BatchSize::ThirtyTwo, 64);
    let cfg = TrainConfig {
        adam: neuropt_core::tensor::AdamConfig::default().with_learning_rate(0.01),
        ..epochs(30)
    };
    let r = train(&mut net, &obj, &inputs, &cfg).unwrap();
    assert!(r.history.last().unwrap().loss < 0.1 * r.history[0].loss);
}

#[test]
fn frozen_parameters_are_untouched() {
    let (mut net, obj, inputs) = setup("quad:3:1", BatchSize::ThirtyTwo, 64);
    net.freeze_body();
    let before = net.store().clone();
    train(&mut net, &obj, &inputs, &epochs(3)).unwrap();
    let head = *net.head();
    for (id, p) in net.store().iter() {
        if id != head.weight && id != head.bias {
            assert_eq!(p.value, before.get(id).value);
        }
    }
}

#[test]
fn eval_budget_truncates_the_last_slice() {
    let (mut net, obj, inputs) = setup("sphere:3", BatchSize::ThirtyTwo, 100);
    let cfg = TrainConfig {
        eval_budget: Some(70),
        ..epochs(10)
    };
    let r = train(&mut net, &obj, &inputs, &cfg).unwrap();
    assert_eq!(r.evals, 70);
    assert_eq!(obj.evaluations(), 70);
    assert_eq!(r.stop, StopReason::Budget);
    assert_eq!(r.epochs, 1);
}

#[test]
fn plateau_stops_after_first_rung() {
    let (mut net, obj, inputs) = setup("sphere:3", BatchSize::ThirtyTwo, 64);
    let ids: Vec<_> = net.store().ids().collect();
    for id in ids {
        net.store_mut().set_frozen(id, true);
    }
    let r = budgeted_train(&mut net, &obj, &inputs, &TrainConfig::default()).unwrap();
    assert_eq!(r.epochs, 5);
    assert_eq!(r.stop, StopReason::EarlyStop);
}

#[test]
fn steady_improvement_reaches_max_budget() {
    let (mut net, obj, inputs) = setup("sphere:3", BatchSize::One, 16);
    let cfg = TrainConfig {
        max_epochs: 12,
        max_budget: 12,
        initial_budget: 1,
        psi: 0.0,
        ..TrainConfig::default()
    };
    let r = budgeted_train(&mut net, &obj, &inputs, &cfg).unwrap();
    assert_eq!(r.epochs, 12);
    assert_eq!(r.stop, StopReason::MaxEpochs);
}

#[derive(Debug)]
struct Poisoned {
    calls: AtomicUsize,
    after: usize,
}

impl Landscape for Poisoned {
    fn value(&self, x: &[f64]) -> Result<f64, ObjectiveError> {
        let k = self.calls.fetch_add(1, Ordering::Relaxed);
        Ok(if k >= self.after {
            f64::NAN
        } else {
            x.iter().map(|v| v * v).sum()
        })
    }

    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>), ObjectiveError> {
        Ok((self.value(x)?, x.iter().map(|v| 2.0 * v).collect()))
    }
}

#[test]
fn nan_objective_aborts_with_best_preserved() {
    let obj = Objective::new(
        ObjectiveSpec::Sphere { dim: 2 },
        vec![-1.0; 2],
        vec![1.0; 2],
        Box::new(Poisoned {
            calls: AtomicUsize::new(0),
            after: 50,
        }),
    );
    let mut cfg = BuildConfig::new(vec![-1.0; 2], vec![1.0; 2]);
    cfg.input_size = 8;
    cfg.cells = 1;
    cfg.num_sol = 32;
    let mut net = Network::build(&genotype(BatchSize::One), &cfg).unwrap();
    net.init_weights(1);
    let inputs = InputBatch::for_config(&cfg, 1);
    let r = train(&mut net, &obj, &inputs, &epochs(5)).unwrap();
    assert!(matches!(r.stop, StopReason::NumericFailure(_)));
    assert_eq!(r.evals, 51);
    assert!(r.best_value.is_finite());
    assert_eq!(r.best_solution.len(), 2);
}

#[test]
fn mismatched_objective_is_rejected() {
    let (mut net, _, inputs) = setup("sphere:3", BatchSize::One, 8);
    let other = ObjectiveSpec::Sphere { dim: 4 }.build().unwrap();
    assert!(train(&mut net, &other, &inputs, &epochs(1)).is_err());
}
