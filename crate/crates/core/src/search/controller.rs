//! Recurrent policy over genotype tokens, trained with REINFORCE.
//!
//! Two stacked Elman layers read a one-hot of the previous token (a start
//! token at step 0) and a per-position softmax head emits the next gene.

use crate::space::{gene_alphabets, Genotype};
use crate::tensor::{AdamConfig, ParamId, ParamStore, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub hidden: usize,
    /// Decay of the reward baseline's moving average.
    pub baseline_decay: f64,
    pub adam: AdamConfig,
    /// Half-width of the uniform initialization of recurrent weights.
    pub init_scale: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            hidden: 35,
            baseline_decay: 0.95,
            adam: AdamConfig {
                learning_rate: 0.1,
                beta1: 0.9,
                weight_decay: 1e-4,
                ..AdamConfig::default()
            },
            init_scale: 0.1,
        }
    }
}

/// Reward of a cost: `-log10(max(cost, 1e-12))` clipped to `[-12, 12]`.
pub fn reward(cost: f64) -> f64 {
    (-cost.max(1e-12).log10()).clamp(-12.0, 12.0)
}

/// Tokens drawn by one rollout and their log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub actions: Vec<u8>,
    pub log_probs: Vec<f64>,
}

impl Trace {
    pub fn log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct Ids {
    w1: ParamId,
    u1: ParamId,
    b1: ParamId,
    w2: ParamId,
    u2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct Controller {
    cfg: ControllerConfig,
    alphabets: Vec<u8>,
    vocab: usize,
    store: ParamStore,
    ids: Ids,
    heads: Vec<(ParamId, ParamId)>,
    baseline: Option<f64>,
}

/// Activations of one rollout, kept for backpropagation through time.
struct Rollout {
    inputs: Vec<usize>,
    h1: Vec<Vec<f64>>,
    h2: Vec<Vec<f64>>,
    probs: Vec<Vec<f64>>,
}

fn matvec_add(w: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks(n)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += w^T y` for `w` of shape `[y.len(), out.len()]`.
fn matvec_t_add(w: &[f64], y: &[f64], out: &mut [f64]) {
    let n = out.len();
    for (yi, row) in y.iter().zip(w.chunks(n)) {
        out.iter_mut().zip(row).for_each(|(o, a)| *o += yi * a);
    }
}

/// `g += y x^T`.
fn outer_add(g: &mut [f64], y: &[f64], x: &[f64]) {
    let n = x.len();
    for (yi, row) in y.iter().zip(g.chunks_mut(n)) {
        row.iter_mut().zip(x).for_each(|(a, b)| *a += yi * b);
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl Controller {
    /// A controller over the genotype alphabet.
    pub fn for_genotypes(cfg: ControllerConfig, seed: u64) -> Self {
        Self::new(gene_alphabets().to_vec(), cfg, seed)
    }

    /// A controller emitting one token per entry of `alphabets`. Heads start
    /// at zero so every position is initially uniform.
    pub fn new(alphabets: Vec<u8>, cfg: ControllerConfig, seed: u64) -> Self {
        assert!(alphabets.iter().all(|&a| a >= 1), "alphabets must be non-empty");
        let vocab = alphabets.iter().copied().max().unwrap_or(1) as usize + 1;
        let h = cfg.hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut uniform = |name: &str, shape: Vec<usize>, store: &mut ParamStore| {
            let n = shape.iter().product();
            let data = (0..n)
                .map(|_| rng.random_range(-cfg.init_scale..=cfg.init_scale))
                .collect();
            store.add(name, Tensor::new(shape, data).expect("shape matches data"))
        };
        let ids = Ids {
            w1: uniform("rnn.l1.input", vec![h, vocab], &mut store),
            u1: uniform("rnn.l1.recurrent", vec![h, h], &mut store),
            b1: store.add("rnn.l1.bias", Tensor::zeros(vec![h])),
            w2: uniform("rnn.l2.input", vec![h, h], &mut store),
            u2: uniform("rnn.l2.recurrent", vec![h, h], &mut store),
            b2: store.add("rnn.l2.bias", Tensor::zeros(vec![h])),
        };
        let heads = alphabets
            .iter()
            .enumerate()
            .map(|(t, &a)| {
                (
                    store.add(format!("head{t}.weight"), Tensor::zeros(vec![a as usize, h])),
                    store.add(format!("head{t}.bias"), Tensor::zeros(vec![a as usize])),
                )
            })
            .collect();
        Controller {
            cfg,
            alphabets,
            vocab,
            store,
            ids,
            heads,
            baseline: None,
        }
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn alphabets(&self) -> &[u8] {
        &self.alphabets
    }

    pub fn baseline(&self) -> Option<f64> {
        self.baseline
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    fn step_hidden(&self, input: usize, h1: &[f64], h2: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let s = &self.store;
        let h = self.cfg.hidden;
        let mut a1 = s.value(self.ids.b1).data().to_vec();
        let w1 = s.value(self.ids.w1).data();
        for (i, a) in a1.iter_mut().enumerate() {
            *a += w1[i * self.vocab + input];
        }
        matvec_add(s.value(self.ids.u1).data(), h1, &mut a1);
        let n1: Vec<f64> = a1.iter().map(|v| v.tanh()).collect();
        let mut a2 = s.value(self.ids.b2).data().to_vec();
        matvec_add(s.value(self.ids.w2).data(), &n1, &mut a2);
        matvec_add(s.value(self.ids.u2).data(), h2, &mut a2);
        let n2: Vec<f64> = a2.iter().map(|v| v.tanh()).collect();
        debug_assert_eq!(n2.len(), h);
        (n1, n2)
    }

    fn logits(&self, t: usize, h2: &[f64]) -> Vec<f64> {
        let (w, b) = self.heads[t];
        let mut out = self.store.value(b).data().to_vec();
        matvec_add(self.store.value(w).data(), h2, &mut out);
        out
    }

    /// Runs the policy. With `actions` given the tokens are forced (teacher
    /// forcing); otherwise they are drawn from `rng` at `temperature`, where
    /// zero means greedy.
    fn rollout(&self, actions: Option<&[u8]>, rng: Option<&mut dyn rand::RngCore>, temperature: f64) -> (Rollout, Vec<u8>) {
        let h = self.cfg.hidden;
        let mut r = Rollout {
            inputs: Vec::new(),
            h1: vec![vec![0.0; h]],
            h2: vec![vec![0.0; h]],
            probs: Vec::new(),
        };
        let mut chosen = Vec::with_capacity(self.alphabets.len());
        let mut rng = rng;
        let mut input = self.vocab - 1;
        for t in 0..self.alphabets.len() {
            let (n1, n2) = self.step_hidden(input, r.h1.last().unwrap(), r.h2.last().unwrap());
            let logits = self.logits(t, &n2);
            let probs = softmax(&logits);
            let a = match actions {
                Some(a) => a[t],
                None if temperature <= 0.0 => {
                    let mut best = 0;
                    for (k, p) in probs.iter().enumerate() {
                        if *p > probs[best] {
                            best = k;
                        }
                    }
                    best as u8
                }
                None => {
                    let tempered = if temperature == 1.0 {
                        probs.clone()
                    } else {
                        softmax(&logits.iter().map(|l| l / temperature).collect::<Vec<_>>())
                    };
                    let u: f64 = rng.as_deref_mut().expect("sampling needs an rng").random();
                    let mut acc = 0.0;
                    let mut pick = tempered.len() - 1;
                    for (k, p) in tempered.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            pick = k;
                            break;
                        }
                    }
                    pick as u8
                }
            };
            r.inputs.push(input);
            r.h1.push(n1);
            r.h2.push(n2);
            r.probs.push(probs);
            chosen.push(a);
            input = a as usize;
        }
        (r, chosen)
    }

    /// Draws one token sequence with its per-token log-probabilities.
    pub fn sample_tokens<R: Rng>(&self, rng: &mut R) -> Trace {
        let (r, actions) = self.rollout(None, Some(rng as &mut dyn rand::RngCore), 1.0);
        let log_probs = actions.iter().zip(&r.probs).map(|(&a, p)| p[a as usize].ln()).collect();
        Trace { actions, log_probs }
    }

    /// Most likely token at every step given the previous greedy choices.
    pub fn greedy_tokens(&self) -> Vec<u8> {
        self.rollout(None, None, 0.0).1
    }

    /// Samples a genotype; only valid for controllers over the genotype alphabet.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> (Genotype, Trace) {
        let trace = self.sample_tokens(rng);
        let g = Genotype::from_genes(&trace.actions).expect("controller emits genotype alphabets");
        (g, trace)
    }

    /// Log-probability of a full token sequence.
    pub fn log_prob(&self, actions: &[u8]) -> f64 {
        let (r, _) = self.rollout(Some(actions), None, 1.0);
        actions.iter().zip(&r.probs).map(|(&a, p)| p[a as usize].ln()).sum()
    }

    /// Adds `coef * d log P(actions) / d theta` into `grads` (indexed by
    /// parameter, same layout as the store).
    fn accumulate_log_prob_grad(&self, actions: &[u8], coef: f64, grads: &mut [Vec<f64>]) {
        let (r, _) = self.rollout(Some(actions), None, 1.0);
        let s = &self.store;
        let h = self.cfg.hidden;
        let ids = self.ids;
        let mut dh1_next = vec![0.0; h];
        let mut dh2_next = vec![0.0; h];
        for t in (0..actions.len()).rev() {
            let (hw, hb) = self.heads[t];
            let mut dlogits: Vec<f64> = r.probs[t].iter().map(|p| -coef * p).collect();
            dlogits[actions[t] as usize] += coef;
            let h1 = &r.h1[t + 1];
            let h2 = &r.h2[t + 1];
            outer_add(&mut grads[hw.index()], &dlogits, h2);
            grads[hb.index()].iter_mut().zip(&dlogits).for_each(|(g, d)| *g += d);

            let mut dh2 = std::mem::take(&mut dh2_next);
            matvec_t_add(s.value(hw).data(), &dlogits, &mut dh2);
            let da2: Vec<f64> = dh2.iter().zip(h2).map(|(d, y)| d * (1.0 - y * y)).collect();
            outer_add(&mut grads[ids.w2.index()], &da2, h1);
            outer_add(&mut grads[ids.u2.index()], &da2, &r.h2[t]);
            grads[ids.b2.index()].iter_mut().zip(&da2).for_each(|(g, d)| *g += d);
            dh2_next = vec![0.0; h];
            matvec_t_add(s.value(ids.u2).data(), &da2, &mut dh2_next);

            let mut dh1 = std::mem::take(&mut dh1_next);
            matvec_t_add(s.value(ids.w2).data(), &da2, &mut dh1);
            let da1: Vec<f64> = dh1.iter().zip(h1).map(|(d, y)| d * (1.0 - y * y)).collect();
            let gw1 = &mut grads[ids.w1.index()];
            for (i, d) in da1.iter().enumerate() {
                gw1[i * self.vocab + r.inputs[t]] += d;
            }
            outer_add(&mut grads[ids.u1.index()], &da1, &r.h1[t]);
            grads[ids.b1.index()].iter_mut().zip(&da1).for_each(|(g, d)| *g += d);
            dh1_next = vec![0.0; h];
            matvec_t_add(s.value(ids.u1).data(), &da1, &mut dh1_next);
        }
    }

    fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect()
    }

    /// Gradient of `log P(actions)` flattened in store order.
    pub fn log_prob_gradient(&self, actions: &[u8]) -> Vec<f64> {
        let mut g = self.zero_grads();
        self.accumulate_log_prob_grad(actions, 1.0, &mut g);
        g.concat()
    }

    /// All parameters flattened in store order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.store.iter().flat_map(|(_, p)| p.value.data().to_vec()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.store.num_scalars(), "flat parameter length");
        let mut offset = 0;
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            let v = self.store.value_mut(id).data_mut();
            let n = v.len();
            v.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    /// One REINFORCE step: ascends `(1/M) sum_k (R_k - b) sum_t grad log p(a_t)`
    /// with baseline `b` the moving average of past rewards (the batch mean
    /// on the first call), then folds the batch into the baseline. Samples
    /// with non-finite rewards are skipped. Returns the number used.
    pub fn update(&mut self, batch: &[(Vec<u8>, f64)]) -> usize {
        let used: Vec<&(Vec<u8>, f64)> = batch
            .iter()
            .filter(|(_, r)| {
                if !r.is_finite() {
                    log::warn!("skipping controller sample with reward {r}");
                }
                r.is_finite()
            })
            .collect();
        if used.is_empty() {
            return 0;
        }
        let m = used.len() as f64;
        let baseline = self
            .baseline
            .unwrap_or_else(|| used.iter().map(|(_, r)| r).sum::<f64>() / m);
        let mut grads = self.zero_grads();
        let mut any = false;
        for (actions, r) in &used {
            let adv = r - baseline;
            if adv != 0.0 {
                any = true;
                self.accumulate_log_prob_grad(actions, adv / m, &mut grads);
            }
        }
        if any {
            self.apply(grads);
        }
        let decay = self.cfg.baseline_decay;
        let mut b = baseline;
        for (_, r) in &used {
            b = decay * b + (1.0 - decay) * r;
        }
        self.baseline = Some(b);
        used.len()
    }

    fn apply(&mut self, grads: Vec<Vec<f64>>) {
        let ids: Vec<ParamId> = self.store.ids().collect();
        for (id, g) in ids.into_iter().zip(grads) {
            // Adam minimizes, so feed the negated ascent direction.
            self.store
                .grad_mut(id)
                .iter_mut()
                .zip(g)
                .for_each(|(d, v)| *d = -v);
        }
        self.store
            .adam_step(&self.cfg.adam)
            .expect("finite rewards give finite gradients");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_is_clipped_log_cost() {
        assert_eq!(reward(1.0), 0.0);
        assert_eq!(reward(1e-3), 3.0);
        assert_eq!(reward(0.0), 12.0);
        assert_eq!(reward(1e20), -12.0);
        assert_eq!(reward(-5.0), 12.0);
    }

    #[test]
    fn fresh_controller_is_uniform() {
        let c = Controller::for_genotypes(ControllerConfig::default(), 1);
        let g = crate::space::sample_uniform(3);
        let expected: f64 = gene_alphabets().iter().map(|&a| -(a as f64).ln()).sum();
        assert!((c.log_prob(&g.genes()) - expected).abs() < 1e-12);
    }

    #[test]
    fn trace_log_prob_matches_forced_rollout() {
        let mut c = Controller::new(vec![2, 3, 2, 3], ControllerConfig::default(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let flat: Vec<f64> = (0..c.flat_params().len()).map(|_| rng.random_range(-0.5..0.5)).collect();
        c.set_flat_params(&flat);
        let t = c.sample_tokens(&mut rng);
        assert!((t.log_prob() - c.log_prob(&t.actions)).abs() < 1e-12);
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        let mut c = Controller::new(vec![2, 3, 2], ControllerConfig { hidden: 5, ..Default::default() }, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let flat: Vec<f64> = (0..c.flat_params().len()).map(|_| rng.random_range(-0.8..0.8)).collect();
        c.set_flat_params(&flat);
        let actions = vec![1, 2, 0];
        let g = c.log_prob_gradient(&actions);
        let h = 1e-6;
        for k in 0..flat.len() {
            let mut p = flat.clone();
            p[k] += h;
            c.set_flat_params(&p);
            let up = c.log_prob(&actions);
            p[k] -= 2.0 * h;
            c.set_flat_params(&p);
            let down = c.log_prob(&actions);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-7 * (1.0 + g[k].abs()), "param {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn equal_rewards_leave_parameters_unchanged() {
        let mut c = Controller::new(vec![2, 2], ControllerConfig::default(), 3);
        c.baseline = Some(1.5);
        let before = c.flat_params();
        c.update(&[(vec![0, 1], 1.5), (vec![1, 1], 1.5)]);
        assert_eq!(c.flat_params(), before);
    }

    #[test]
    fn nan_rewards_are_skipped() {
        let mut c = Controller::new(vec![2], ControllerConfig::default(), 3);
        assert_eq!(c.update(&[(vec![0], f64::NAN)]), 0);
        assert_eq!(c.update(&[(vec![0], f64::NAN), (vec![1], 1.0)]), 1);
    }

    #[test]
    fn greedy_is_deterministic() {
        let c = Controller::for_genotypes(ControllerConfig::default(), 9);
        assert_eq!(c.greedy_tokens(), c.greedy_tokens());
    }
}
