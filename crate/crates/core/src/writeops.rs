//! Write-ops: task, adversarial and orthogonality losses, and the step rules
//! that apply gradients to writable parameters.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datakit::Batch;
use crate::readops::{Model, ModelError, ReadOptions};
use crate::registry::{Owner, ParamMode, Registry, RegistryError, StepRule};
use crate::{GradientMap, Graph, Tensor, TensorError, Var};

pub const DISC_W: &str = "adv.W";
pub const DISC_B: &str = "adv.b";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "one")]
    pub task: f64,
    #[serde(default = "default_adv")]
    pub adv: f64,
    #[serde(default = "default_diff")]
    pub diff: f64,
    #[serde(default = "one")]
    pub gp: f64,
}

fn one() -> f64 {
    1.0
}

fn default_adv() -> f64 {
    0.05
}

fn default_diff() -> f64 {
    0.01
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { task: 1.0, adv: default_adv(), diff: default_diff(), gp: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.task > 0.0 && self.task.is_finite()) {
            return Err("loss_weights.task must be positive".into());
        }
        for (name, v) in [("adv", self.adv), ("diff", self.diff), ("gp", self.gp)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("loss_weights.{name} must be non-negative"));
            }
        }
        Ok(())
    }
}

/// Mean cross-entropy over the batch.
pub fn task_loss<'g>(logits: Var<'g>, labels: &[usize]) -> Result<Var<'g>, TensorError> {
    logits.softmax_cross_entropy(labels)
}

/// Cross-entropy of a linear discriminator predicting `task_labels` from
/// `shared`. Upstream gradients are reversed and scaled by `lambda`; the
/// discriminator's own gradients are not.
pub fn adversarial_loss<'g>(
    shared: Var<'g>,
    task_labels: &[usize],
    disc_w: Var<'g>,
    disc_b: Var<'g>,
    lambda: f64,
) -> Result<Var<'g>, ModelError> {
    let k = disc_w.shape()[1];
    if k < 2 {
        return Err(ModelError::Contract(format!("discriminator needs at least 2 tasks, got {k}")));
    }
    if !(lambda >= 0.0) {
        return Err(ModelError::Contract("gradient reversal scale must be non-negative".into()));
    }
    Ok(shared.grad_reverse(lambda)?.matmul(disc_w)?.add_row(disc_b)?.softmax_cross_entropy(task_labels)?)
}

/// `‖SᵀP‖²_F`.
pub fn orthogonality_loss<'g>(s: Var<'g>, p: Var<'g>) -> Result<Var<'g>, TensorError> {
    if s.shape()[0] != p.shape()[0] {
        return Err(TensorError::shape("orthogonality_loss", format!("batch sizes differ: {} vs {}", s.shape()[0], p.shape()[0])));
    }
    s.t()?.matmul(p)?.frobenius_sq()
}

/// Registers a shared linear task discriminator over `d` features.
pub fn register_discriminator(registry: &mut Registry, d: usize, tasks: usize, seed: u64) -> Result<(), RegistryError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = (6.0 / (d + tasks) as f64).sqrt();
    let w = Tensor::new(&[d, tasks], (0..d * tasks).map(|_| rng.random_range(-bound..bound)).collect()).expect("disc shape");
    registry.register(DISC_W, w, ParamMode::Swr, Owner::Shared)?;
    registry.register(DISC_B, Tensor::zeros(&[1, tasks]), ParamMode::Swr, Owner::Shared)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constraints {
    pub adversarial: bool,
    pub orthogonal: bool,
    #[serde(default = "one")]
    pub grl_lambda: f64,
}

impl Constraints {
    pub const NONE: Constraints = Constraints { adversarial: false, orthogonal: false, grl_lambda: 1.0 };
    pub const ADVERSARIAL_ORTHOGONAL: Constraints = Constraints { adversarial: true, orthogonal: true, grl_lambda: 1.0 };
}

pub struct Objective<'g> {
    pub total: Var<'g>,
    pub task: Var<'g>,
    pub logits: Var<'g>,
}

/// `λ_task·L_task + λ_adv·L_adv + λ_diff·L_Diff` for one task batch; the
/// constraint terms are present only when enabled.
pub fn objective<'g>(
    model: &Model,
    graph: &'g Graph,
    registry: &Registry,
    task: &str,
    batch: &Batch,
    weights: &LossWeights,
    constraints: &Constraints,
) -> Result<Objective<'g>, ModelError> {
    let read = model.read(graph, registry, task, batch, ReadOptions::default())?;
    let task_term = task_loss(read.logits, &batch.labels)?;
    let mut total = task_term.scale(weights.task)?;
    if constraints.adversarial {
        let k = model.task_index(task).expect("read checked the task");
        let labels = vec![k; batch.len()];
        let w = graph.param(DISC_W, registry.value(DISC_W)?.clone());
        let b = graph.param(DISC_B, registry.value(DISC_B)?.clone());
        let adv = adversarial_loss(read.shared, &labels, w, b, constraints.grl_lambda)?;
        total = total.add(adv.scale(weights.adv)?)?;
    }
    if constraints.orthogonal {
        let p = read.private.ok_or_else(|| ModelError::NoPrivateEncoder(task.to_string()))?;
        total = total.add(orthogonality_loss(read.shared, p)?.scale(weights.diff)?)?;
    }
    Ok(Objective { total, task: task_term, logits: read.logits })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    /// Diagonal AdaDelta; the step is additionally scaled by `lr`.
    Adadelta {
        #[serde(default = "one")]
        lr: f64,
        #[serde(default = "default_rho")]
        rho: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_rho() -> f64 {
    0.95
}

fn default_eps() -> f64 {
    1e-6
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adadelta { lr: 1.0, rho: default_rho(), eps: default_eps() }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), String> {
        match *self {
            OptimizerConfig::Sgd { lr } if lr > 0.0 && lr.is_finite() => Ok(()),
            OptimizerConfig::Adadelta { lr, rho, eps } if lr > 0.0 && lr.is_finite() && (0.0..1.0).contains(&rho) && eps > 0.0 => Ok(()),
            _ => Err("optimizer needs lr > 0, rho in [0, 1), eps > 0".into()),
        }
    }
}

/// Running `E[g²]` and `E[Δx²]` of one parameter.
#[derive(Debug, Clone, PartialEq)]
struct Accumulators {
    sq_grad: Tensor,
    sq_delta: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    state: HashMap<String, Accumulators>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self { config, state: HashMap::new() }
    }
}

impl StepRule for Optimizer {
    fn update(&mut self, id: &str, param: &mut Tensor, grad: &Tensor) {
        match self.config {
            OptimizerConfig::Sgd { lr } => {
                for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
                    *p -= lr * g;
                }
            }
            OptimizerConfig::Adadelta { lr, rho, eps } => {
                let acc = self
                    .state
                    .entry(id.to_string())
                    .or_insert_with(|| Accumulators { sq_grad: Tensor::zeros(param.shape()), sq_delta: Tensor::zeros(param.shape()) });
                if acc.sq_grad.shape() != param.shape() {
                    *acc = Accumulators { sq_grad: Tensor::zeros(param.shape()), sq_delta: Tensor::zeros(param.shape()) };
                }
                let (eg, ed) = (acc.sq_grad.data_mut(), acc.sq_delta.data_mut());
                for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                    eg[i] = rho * eg[i] + (1.0 - rho) * g * g;
                    let delta = -((ed[i] + eps).sqrt() / (eg[i] + eps).sqrt()) * g;
                    ed[i] = rho * ed[i] + (1.0 - rho) * delta * delta;
                    *p += lr * delta;
                }
            }
        }
    }
}

/// Applies `grads` for `task` through the registry's permission check.
pub fn step(optimizer: &mut Optimizer, registry: &mut Registry, task: &str, grads: &GradientMap) -> Result<(), RegistryError> {
    registry.apply_update(task, grads, optimizer)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::datakit::{Input, Sample};
    use crate::readops::{Activation, EncoderSpec, ModelSpec, ReadOpKind, TaskHeadSpec};
    use crate::registry::TaskAgent;
    use crate::tensorcore::{finite_diff_check, loss_fn};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_f64(shape, data).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn task_loss_examples() {
        let g = Graph::new();
        let uniform = g.constant(Tensor::zeros(&[3, 2]));
        assert!((task_loss(uniform, &[0, 1, 1]).unwrap().item() - 2f64.ln()).abs() < 1e-15);
        let sharp = g.constant(t(&[1, 2], &[200.0, -200.0]));
        assert!(task_loss(sharp, &[0]).unwrap().item() < 1e-100);
        // Per-sample losses 0.3 and 0.7: the wrong-class logit z satisfies ln(1 + e^z) = l.
        let z = |l: f64| (l.exp() - 1.0).ln();
        let logits = g.constant(t(&[2, 2], &[z(0.3), 0.0, 0.0, z(0.7)]));
        assert!((task_loss(logits, &[1, 0]).unwrap().item() - 0.5).abs() < 1e-12);
        assert!(matches!(task_loss(uniform, &[0, 1, 2]), Err(TensorError::Label { .. })));
    }

    #[test]
    fn adversarial_at_chance_is_ln_k() {
        let g = Graph::new();
        let s = g.param("s", t(&[2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let w = g.param("w", Tensor::zeros(&[3, 5]));
        let b = g.param("b", Tensor::zeros(&[1, 5]));
        let l = adversarial_loss(s, &[0, 4], w, b, 1.0).unwrap();
        assert!((l.item() - 5f64.ln()).abs() < 1e-12);
        let w1 = g.param("w1", Tensor::zeros(&[3, 1]));
        let b1 = g.param("b1", Tensor::zeros(&[1, 1]));
        assert!(adversarial_loss(s, &[0, 0], w1, b1, 1.0).is_err());
    }

    #[test]
    fn reversal_flips_and_scales_upstream_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, w, b) = (random(&mut rng, &[4, 3]), random(&mut rng, &[3, 3]), random(&mut rng, &[1, 3]));
        let enc = random(&mut rng, &[3, 3]);
        let labels = [0, 2, 1, 1];
        let grads = |lambda: Option<f64>| {
            let g = Graph::new();
            let e = g.param("enc", enc.clone());
            let s = g.constant(x.clone()).matmul(e).unwrap().tanh().unwrap();
            let (wv, bv) = (g.param("w", w.clone()), g.param("b", b.clone()));
            let loss = match lambda {
                Some(l) => adversarial_loss(s, &labels, wv, bv, l).unwrap(),
                None => s.matmul(wv).unwrap().add_row(bv).unwrap().softmax_cross_entropy(&labels).unwrap(),
            };
            g.backward(loss, &["enc", "w", "b"], false).unwrap()
        };
        let plain = grads(None);
        for lambda in [0.0, 0.3, 1.0] {
            let rev = grads(Some(lambda));
            for (a, p) in rev.get("enc").unwrap().data().iter().zip(plain.get("enc").unwrap().data()) {
                assert!((a - (-lambda * p)).abs() < 1e-14, "lambda {lambda}");
            }
            assert_eq!(rev.get("w"), plain.get("w"));
            assert_eq!(rev.get("b"), plain.get("b"));
        }
        let zero = grads(Some(0.0));
        assert!(zero.get("enc").unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn orthogonality_examples() {
        let g = Graph::new();
        let s = g.constant(t(&[2, 1], &[1.0, 0.0]));
        let p = g.constant(t(&[2, 1], &[0.0, 1.0]));
        assert_eq!(orthogonality_loss(s, p).unwrap().item(), 0.0);
        let i = g.constant(Tensor::eye(2));
        assert_eq!(orthogonality_loss(i, i).unwrap().item(), 2.0);
        let short = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(orthogonality_loss(i, short), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn orthogonality_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (s, p) = (random(&mut rng, &[3, 4]), random(&mut rng, &[3, 2]));
        let mut brute = 0.0;
        for i in 0..4 {
            for j in 0..2 {
                let m: f64 = (0..3).map(|b| s.get(b, i) * p.get(b, j)).sum();
                brute += m * m;
            }
        }
        let g = Graph::new();
        let v = orthogonality_loss(g.constant(s), g.constant(p)).unwrap().item();
        assert!((v - brute).abs() < 1e-12);
    }

    #[test]
    fn orthogonality_is_minimizable() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, &[8, 4]);
        let mut a = random(&mut rng, &[4, 3]);
        let mut b = random(&mut rng, &[4, 2]);
        let loss_at = |a: &Tensor, b: &Tensor| {
            let g = Graph::new();
            let xv = g.constant(x.clone());
            let l = orthogonality_loss(xv.matmul(g.param("a", a.clone())).unwrap(), xv.matmul(g.param("b", b.clone())).unwrap()).unwrap();
            let grads = g.backward(l, &["a", "b"], false).unwrap();
            (l.item(), grads)
        };
        let initial = loss_at(&a, &b).0;
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { lr: 0.01 });
        let mut last = initial;
        for _ in 0..3000 {
            let (l, grads) = loss_at(&a, &b);
            last = l;
            opt.update("a", &mut a, grads.get("a").unwrap());
            opt.update("b", &mut b, grads.get("b").unwrap());
        }
        assert!(last < 1e-3 * initial, "{initial} -> {last}");
    }

    #[test]
    fn sgd_example_and_zero_gradient() {
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { lr: 0.1 });
        let mut p = t(&[2], &[1.0, 2.0]);
        opt.update("p", &mut p, &t(&[2], &[0.5, -1.0]));
        assert_eq!(p.data(), &[0.95, 2.1]);
        let before = p.clone();
        opt.update("p", &mut p, &Tensor::zeros(&[2]));
        assert_eq!(p, before);
    }

    #[test]
    fn adadelta_zero_gradient_is_fixed_point_and_descends() {
        let mut opt = Optimizer::new(OptimizerConfig::default());
        let mut p = t(&[2], &[1.0, -3.0]);
        for _ in 0..100 {
            opt.update("p", &mut p, &Tensor::zeros(&[2]));
        }
        assert_eq!(p.data(), &[1.0, -3.0]);
        // First step from fresh accumulators: Δ = -sqrt(ε)/sqrt((1-ρ)g² + ε)·g.
        let mut q = t(&[1], &[0.0]);
        opt.update("q", &mut q, &t(&[1], &[2.0]));
        let expected = -(1e-6f64).sqrt() / ((1.0 - 0.95) * 4.0 + 1e-6f64).sqrt() * 2.0;
        assert!((q.data()[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn step_respects_permissions() {
        let mut reg = Registry::new();
        reg.add_task(TaskAgent::new("a", "a")).unwrap();
        reg.add_task(TaskAgent::new("b", "b")).unwrap();
        reg.register("own", t(&[1], &[1.0]), ParamMode::Pwr, Owner::task("a")).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { lr: 1.0 });
        let mut g = GradientMap::new();
        g.insert("own", t(&[1], &[0.5]));
        assert!(matches!(step(&mut opt, &mut reg, "b", &g), Err(RegistryError::Permission { .. })));
        step(&mut opt, &mut reg, "a", &g).unwrap();
        assert_eq!(reg.value("own").unwrap().data(), &[0.5]);
    }

    #[test]
    fn combined_objective_matches_finite_differences() {
        let spec = ModelSpec {
            read_op: ReadOpKind::Star,
            shared: EncoderSpec::mlp(3, &[4], Activation::Tanh),
            private: Some(EncoderSpec::mlp(3, &[2], Activation::Tanh)),
        };
        let mut reg = Registry::new();
        let heads: Vec<TaskHeadSpec> = (0..2).map(|i| TaskHeadSpec { id: format!("t{i}"), num_classes: 2 }).collect();
        let model = Model::build(&mut reg, spec, &heads, 4).unwrap();
        register_discriminator(&mut reg, 4, 2, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<Sample> = (0..5)
            .map(|id| Sample { id, input: Input::Dense((0..3).map(|_| rng.random_range(-1.0..1.0)).collect()), label: id % 2 })
            .collect();
        let batch = Batch::from_samples(&samples);
        let weights = LossWeights { task: 1.0, adv: 0.5, diff: 0.3, gp: 1.0 };
        let no_adv = Constraints { adversarial: false, ..Constraints::ADVERSARIAL_ORTHOGONAL };
        for task in ["t0", "t1"] {
            let writable: Vec<String> = reg.writable_view(task).unwrap().iter().map(|p| p.id().to_string()).collect();
            // Shared encoder gradients are reversed on purpose under the
            // adversarial term; every other parameter must match exactly.
            let beyond_reversal: Vec<String> = writable.iter().filter(|id| !id.starts_with("shared.")).cloned().collect();
            for (ids, constraints) in [(&writable, no_adv), (&beyond_reversal, Constraints::ADVERSARIAL_ORTHOGONAL)] {
                let params: BTreeMap<String, Tensor> = ids.iter().map(|id| (id.clone(), reg.value(id).unwrap().clone())).collect();
                let (m, r, b) = (model.clone(), reg.clone(), batch.clone());
                let err = finite_diff_check(
                    loss_fn(move |g, _| {
                        objective(&m, g, &r, task, &b, &weights, &constraints)
                            .map(|o| o.total)
                            .map_err(|e| TensorError::Contract(e.to_string()))
                    }),
                    &params,
                    1e-6,
                )
                .unwrap();
                assert!(err < 1e-3, "{task} {constraints:?}: {err}");
            }
        }
    }

    proptest! {
        #[test]
        fn sgd_update_is_linear(p in proptest::collection::vec(-10.0f64..10.0, 3), g in proptest::collection::vec(-10.0f64..10.0, 3), lr in 0.001f64..1.0) {
            let mut opt = Optimizer::new(OptimizerConfig::Sgd { lr });
            let mut x = t(&[3], &p);
            opt.update("x", &mut x, &t(&[3], &g));
            for i in 0..3 {
                prop_assert_eq!(x.data()[i], p[i] - lr * g[i]);
            }
        }
    }
}
