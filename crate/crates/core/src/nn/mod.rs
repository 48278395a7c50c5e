//! Minimal dense network split into a feature extractor and a growing
//! classification head.
//!
//! The extractor is a stack of affine layers, each followed by a rectifier.
//! The classifier is a single affine layer with one output per class seen so
//! far; it grows by one block of outputs per task. Logits are
//! `classifier(extractor(x))`, optionally truncated to the first
//! `n_classes_active` outputs.

mod optim;
mod scheduler;
mod state;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

pub use optim::{sgd_step, OptimizerConfig};
pub use scheduler::{PatienceScheduler, SchedulerAction, SchedulerConfig};
pub use state::ParamState;

use crate::{Error, Result, Tensor};

/// Scale of the uniform noise used for freshly added classifier rows.
pub const HEAD_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub gradient: Tensor,
    pub momentum: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        Self {
            gradient: Tensor::zeros_like(&value),
            momentum: Tensor::zeros_like(&value),
            value,
            trainable: true,
        }
    }

    fn zero_grad(&mut self) {
        self.gradient.fill(0.0);
    }
}

/// Affine layer `z = W x + b` with `W` stored row-major as `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Parameter::new(Tensor::zeros(vec![out_dim, in_dim])),
            bias: Parameter::new(Tensor::zeros(vec![out_dim])),
        }
    }

    /// He-uniform weights, zero bias.
    pub fn he_uniform<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / in_dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        let w: Vec<f64> = (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect();
        Self {
            weight: Parameter::new(Tensor::new(vec![out_dim, in_dim], w).expect("sized")),
            bias: Parameter::new(Tensor::zeros(vec![out_dim])),
        }
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    /// `inputs (B, in) -> (B, n_out)` using the first `n_out` rows of `W`.
    fn affine(&self, inputs: &Tensor, n_out: usize) -> Tensor {
        let (batch, k) = (inputs.rows(), inputs.cols());
        let w = self.weight.value.data();
        let b = self.bias.value.data();
        let mut out = Vec::with_capacity(batch * n_out);
        for r in 0..batch {
            let x = inputs.row(r);
            for o in 0..n_out {
                let row = &w[o * k..(o + 1) * k];
                let mut s = b[o];
                for (wi, xi) in row.iter().zip(x) {
                    s += wi * xi;
                }
                out.push(s);
            }
        }
        Tensor::new(vec![batch, n_out], out).expect("sized")
    }

    /// Accumulates parameter gradients for upstream `d_out (B, n_out)` and
    /// returns the gradient w.r.t. the layer input when `need_input_grad`.
    fn backward(&mut self, inputs: &Tensor, d_out: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let (batch, k) = (inputs.rows(), inputs.cols());
        let n_out = d_out.cols();
        if self.weight.trainable {
            let dw = self.weight.gradient.data_mut();
            for r in 0..batch {
                let x = inputs.row(r);
                let g = d_out.row(r);
                for (o, &go) in g.iter().enumerate() {
                    if go == 0.0 {
                        continue;
                    }
                    let row = &mut dw[o * k..(o + 1) * k];
                    for (d, xi) in row.iter_mut().zip(x) {
                        *d += go * xi;
                    }
                }
            }
        }
        if self.bias.trainable {
            let db = self.bias.gradient.data_mut();
            for r in 0..batch {
                for (d, g) in db.iter_mut().zip(d_out.row(r)) {
                    *d += g;
                }
            }
        }
        if !need_input_grad {
            return None;
        }
        let w = self.weight.value.data();
        let mut d_in = vec![0.0; batch * k];
        for r in 0..batch {
            let g = d_out.row(r);
            let di = &mut d_in[r * k..(r + 1) * k];
            for (o, &go) in g.iter().enumerate().take(n_out) {
                if go == 0.0 {
                    continue;
                }
                for (d, wi) in di.iter_mut().zip(&w[o * k..(o + 1) * k]) {
                    *d += go * wi;
                }
            }
        }
        Some(Tensor::new(vec![batch, k], d_in).expect("sized"))
    }

    fn params(&self) -> [&Parameter; 2] {
        [&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Activations retained between `forward` and `backward`.
#[derive(Debug, Clone)]
struct Trace {
    inputs: Tensor,
    /// Post-rectifier output of each extractor layer.
    activations: Vec<Tensor>,
    n_active: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    extractor: Vec<Dense>,
    classifier: Dense,
    class_to_task: Vec<usize>,
    snapshots: BTreeMap<usize, ParamState>,
    trace: Option<Trace>,
}

impl Model {
    /// Builds an extractor with the given hidden widths (He-uniform init) and
    /// an empty classifier. With no hidden layers the extractor is the identity.
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        if input_dim == 0 || hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        let mut extractor = Vec::with_capacity(hidden.len());
        let mut fan_in = input_dim;
        for &width in hidden {
            extractor.push(Dense::he_uniform(fan_in, width, rng));
            fan_in = width;
        }
        Ok(Self::from_parts(extractor, Dense::zeros(fan_in, 0), Vec::new()))
    }

    /// Assembles a model from explicit layers. `class_to_task` must cover the
    /// classifier outputs.
    pub fn from_parts(extractor: Vec<Dense>, classifier: Dense, class_to_task: Vec<usize>) -> Self {
        assert_eq!(
            classifier.out_dim(),
            class_to_task.len(),
            "class_to_task must cover every classifier output"
        );
        Self {
            extractor,
            classifier,
            class_to_task,
            snapshots: BTreeMap::new(),
            trace: None,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.extractor
            .first()
            .map_or(self.classifier.in_dim(), Dense::in_dim)
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.in_dim()
    }

    pub fn n_classes(&self) -> usize {
        self.classifier.out_dim()
    }

    pub fn n_tasks(&self) -> usize {
        self.class_to_task.last().copied().unwrap_or(0)
    }

    /// Task number (1-based) of every classifier output.
    pub fn class_to_task(&self) -> &[usize] {
        &self.class_to_task
    }

    pub fn extractor(&self) -> &[Dense] {
        &self.extractor
    }

    pub fn extractor_mut(&mut self) -> &mut [Dense] {
        &mut self.extractor
    }

    pub fn classifier(&self) -> &Dense {
        &self.classifier
    }

    pub fn classifier_mut(&mut self) -> &mut Dense {
        &mut self.classifier
    }

    /// Extends the classifier with `n_new` outputs for a new task and returns
    /// its task number. Existing rows are left untouched; new rows get
    /// uniform noise in `±HEAD_INIT_SCALE` and zero bias.
    pub fn add_task<R: Rng + ?Sized>(&mut self, n_new: usize, rng: &mut R) -> Result<usize> {
        if n_new == 0 {
            return Err(Error::Config("a task needs at least one class".into()));
        }
        let feat = self.feature_dim();
        let old = self.n_classes();
        let dist = Uniform::new_inclusive(-HEAD_INIT_SCALE, HEAD_INIT_SCALE).expect("finite bounds");

        let mut w = self.classifier.weight.value.data().to_vec();
        w.extend((0..n_new * feat).map(|_| dist.sample(rng)));
        let mut b = self.classifier.bias.value.data().to_vec();
        b.resize(old + n_new, 0.0);

        let grow = |p: &mut Parameter, value: Tensor| {
            let mut m = p.momentum.data().to_vec();
            m.resize(value.len(), 0.0);
            p.momentum = Tensor::new(value.shape().to_vec(), m).expect("sized");
            p.gradient = Tensor::zeros_like(&value);
            p.value = value;
        };
        grow(
            &mut self.classifier.weight,
            Tensor::new(vec![old + n_new, feat], w)?,
        );
        grow(&mut self.classifier.bias, Tensor::new(vec![old + n_new], b)?);

        let task = self.n_tasks() + 1;
        self.class_to_task.extend(std::iter::repeat_n(task, n_new));
        self.trace = None;
        Ok(task)
    }

    fn check_input(&self, inputs: &Tensor, n_active: usize) -> Result<()> {
        if inputs.shape().len() != 2 || inputs.cols() != self.input_dim() {
            return Err(Error::Config(format!(
                "input shape {:?} does not match model input width {}",
                inputs.shape(),
                self.input_dim()
            )));
        }
        if n_active > self.n_classes() {
            return Err(Error::Config(format!(
                "{n_active} active classes requested, classifier has {}",
                self.n_classes()
            )));
        }
        Ok(())
    }

    fn run_extractor(&self, inputs: &Tensor, keep: bool) -> (Tensor, Vec<Tensor>) {
        let mut acts = Vec::new();
        let mut h = inputs.clone();
        for layer in &self.extractor {
            let mut z = layer.affine(&h, layer.out_dim());
            z.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            if keep {
                acts.push(z.clone());
            }
            h = z;
        }
        (h, acts)
    }

    /// Ψ(x) for a `(B, input_dim)` batch.
    pub fn features(&self, inputs: &Tensor) -> Result<Tensor> {
        self.check_input(inputs, 0)?;
        Ok(self.run_extractor(inputs, false).0)
    }

    /// Logits over the first `n_active` classes, without retaining activations.
    pub fn logits(&self, inputs: &Tensor, n_active: usize) -> Result<Tensor> {
        self.check_input(inputs, n_active)?;
        let (h, _) = self.run_extractor(inputs, false);
        Ok(self.classifier.affine(&h, n_active))
    }

    /// Training forward pass: like [`Model::logits`] but keeps the
    /// activations needed by [`Model::backward`].
    pub fn forward(&mut self, inputs: &Tensor, n_active: usize) -> Result<Tensor> {
        self.check_input(inputs, n_active)?;
        let (h, activations) = self.run_extractor(inputs, true);
        let logits = self.classifier.affine(&h, n_active);
        self.trace = Some(Trace {
            inputs: inputs.clone(),
            activations,
            n_active,
        });
        Ok(logits)
    }

    /// Overwrites every parameter gradient with d(loss)/d(param) given the
    /// gradient of the loss at the logits of the last `forward` call.
    /// Frozen parameters receive a zero gradient.
    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<()> {
        let trace = self
            .trace
            .take()
            .ok_or_else(|| Error::Usage("backward called without a preceding forward".into()))?;
        if grad_logits.shape() != [trace.inputs.rows(), trace.n_active] {
            let shape = grad_logits.shape().to_vec();
            self.trace = Some(trace);
            return Err(Error::Config(format!(
                "logit gradient shape {shape:?} does not match the forward batch"
            )));
        }
        self.zero_grad();

        let extractor_trainable = self
            .extractor
            .iter()
            .any(|l| l.weight.trainable || l.bias.trainable);
        let head_in = trace.activations.last().unwrap_or(&trace.inputs);
        let mut upstream = self
            .classifier
            .backward(head_in, grad_logits, extractor_trainable && !self.extractor.is_empty());

        for i in (0..self.extractor.len()).rev() {
            let Some(mut d) = upstream.take() else { break };
            let out = &trace.activations[i];
            for (g, a) in d.data_mut().iter_mut().zip(out.data()) {
                if *a <= 0.0 {
                    *g = 0.0;
                }
            }
            let layer_in = if i == 0 { &trace.inputs } else { &trace.activations[i - 1] };
            let need = i > 0
                && self.extractor[..i]
                    .iter()
                    .any(|l| l.weight.trainable || l.bias.trainable);
            upstream = self.extractor[i].backward(layer_in, &d, need);
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Parameter::zero_grad);
    }

    /// Sets the trainable flag of the extractor and classifier groups.
    pub fn set_trainable(&mut self, extractor: bool, classifier: bool) {
        for layer in &mut self.extractor {
            for p in layer.params_mut() {
                p.trainable = extractor;
            }
        }
        for p in self.classifier.params_mut() {
            p.trainable = classifier;
        }
    }

    /// Extractor parameters first (weight, bias per layer), then the classifier.
    pub fn params(&self) -> Vec<&Parameter> {
        self.extractor
            .iter()
            .chain(std::iter::once(&self.classifier))
            .flat_map(Dense::params)
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.extractor
            .iter_mut()
            .chain(std::iter::once(&mut self.classifier))
            .flat_map(Dense::params_mut)
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Copy of all parameter values.
    pub fn state(&self) -> ParamState {
        ParamState::new(self.params().iter().map(|p| p.value.clone()).collect())
    }

    /// Restores parameter values; shapes must match exactly. Optimizer
    /// momentum is kept.
    pub fn load_state(&mut self, state: &ParamState) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != state.values().len() {
            return Err(Error::Config(format!(
                "state holds {} parameters, model has {}",
                state.values().len(),
                params.len()
            )));
        }
        for (p, v) in params.iter().zip(state.values()) {
            if p.value.shape() != v.shape() {
                return Err(Error::Config(format!(
                    "state shape {:?} does not match parameter shape {:?}",
                    v.shape(),
                    p.value.shape()
                )));
            }
        }
        for (p, v) in params.iter_mut().zip(state.values()) {
            p.value = v.clone();
        }
        self.trace = None;
        Ok(())
    }

    /// Zeroes optimizer momentum on every parameter.
    pub fn reset_momentum(&mut self) {
        for p in self.params_mut() {
            p.momentum.fill(0.0);
        }
    }

    /// Records θ^t, the parameters after learning task `t`.
    pub fn store_snapshot(&mut self, task: usize) {
        let s = self.state();
        self.snapshots.insert(task, s);
    }

    pub fn snapshot(&self, task: usize) -> Option<&ParamState> {
        self.snapshots.get(&task)
    }

    pub fn snapshots(&self) -> &BTreeMap<usize, ParamState> {
        &self.snapshots
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn set(p: &mut Parameter, values: &[f64]) {
        p.value.data_mut().copy_from_slice(values);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut head = Dense::zeros(2, 2);
        set(&mut head.weight, &[1.0, 0.0, 0.0, 1.0]);
        let model = Model::from_parts(vec![], head, vec![1, 1]);
        let x = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        assert_eq!(model.logits(&x, 2).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let model = Model::from_parts(vec![Dense::zeros(3, 4)], Dense::zeros(4, 2), vec![1, 1]);
        let x = Tensor::from_rows(&[[0.3, -7.0, 2.5], [1.0, 1.0, 1.0]]).unwrap();
        assert!(model.logits(&x, 2).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_layer_net_matches_hand_evaluation() {
        // h = relu(W1 x + b1), logits = W2 h + b2
        let mut l1 = Dense::zeros(2, 2);
        set(&mut l1.weight, &[1.0, -1.0, 0.5, 2.0]);
        set(&mut l1.bias, &[0.0, -1.0]);
        let mut head = Dense::zeros(2, 2);
        set(&mut head.weight, &[2.0, 1.0, -1.0, 3.0]);
        set(&mut head.bias, &[0.5, 0.0]);
        let model = Model::from_parts(vec![l1], head, vec![1, 1]);
        // x = (1, 2): z1 = (1-2, 0.5+4-1) = (-1, 3.5) -> h = (0, 3.5)
        // logits = (0 + 3.5 + 0.5, 0 + 10.5) = (4.0, 10.5)
        let x = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        assert_eq!(model.logits(&x, 2).unwrap().data(), &[4.0, 10.5]);
        assert_eq!(model.logits(&x, 1).unwrap().data(), &[4.0]);
        assert_eq!(model.features(&x).unwrap().data(), &[0.0, 3.5]);
    }

    #[test]
    fn input_width_mismatch_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::new(3, &[4], &mut rng).unwrap();
        model.add_task(2, &mut rng).unwrap();
        let x = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        assert!(matches!(model.forward(&x, 2), Err(Error::Config(_))));
        let x = Tensor::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        assert!(matches!(model.forward(&x, 3), Err(Error::Config(_))));
    }

    #[test]
    fn backward_without_forward_is_usage_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::new(2, &[3], &mut rng).unwrap();
        model.add_task(2, &mut rng).unwrap();
        let g = Tensor::zeros(vec![1, 2]);
        assert!(matches!(model.backward(&g), Err(Error::Usage(_))));
        let x = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        model.forward(&x, 2).unwrap();
        model.backward(&g).unwrap();
        // the trace is consumed
        assert!(matches!(model.backward(&g), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = Model::new(3, &[5, 4], &mut rng).unwrap();
        model.add_task(3, &mut rng).unwrap();
        for p in model.params_mut() {
            p.gradient.fill(1.0);
        }
        let x = Tensor::from_rows(&[[0.2, 0.5, -0.1], [1.0, 0.0, 2.0]]).unwrap();
        model.forward(&x, 3).unwrap();
        model.backward(&Tensor::zeros(vec![2, 3])).unwrap();
        assert!(model
            .params()
            .iter()
            .all(|p| p.gradient.data().iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn single_weight_squared_error_gradient() {
        // f(x) = w x, L = (w x - y)^2, dL/dw = 2 (w x - y) x
        let (w, x, y) = (0.7, 1.5, 2.0);
        let mut head = Dense::zeros(1, 1);
        set(&mut head.weight, &[w]);
        let mut model = Model::from_parts(vec![], head, vec![1]);
        let logits = model.forward(&Tensor::from_rows(&[[x]]).unwrap(), 1).unwrap();
        let residual = logits.data()[0] - y;
        model
            .backward(&Tensor::new(vec![1, 1], vec![2.0 * residual]).unwrap())
            .unwrap();
        let expected = 2.0 * (w * x - y) * x;
        assert!((model.classifier().weight.gradient.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameters_get_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut model = Model::new(2, &[3], &mut rng).unwrap();
        model.add_task(2, &mut rng).unwrap();
        model.set_trainable(false, true);
        let x = Tensor::from_rows(&[[1.0, -1.0]]).unwrap();
        model.forward(&x, 2).unwrap();
        model
            .backward(&Tensor::new(vec![1, 2], vec![0.3, -0.3]).unwrap())
            .unwrap();
        for layer in model.extractor() {
            assert!(layer.weight.gradient.data().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn classifier_growth_preserves_existing_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = Model::new(4, &[6], &mut rng).unwrap();
        assert_eq!(model.add_task(2, &mut rng).unwrap(), 1);
        model.classifier_mut().bias.value.data_mut()[1] = 0.25;
        let before = model.classifier().clone();
        assert_eq!(model.add_task(3, &mut rng).unwrap(), 2);
        let after = model.classifier();
        assert_eq!(after.out_dim(), 5);
        assert_eq!(&after.weight.value.data()[..12], before.weight.value.data());
        assert_eq!(&after.bias.value.data()[..2], before.bias.value.data());
        assert_eq!(&after.bias.value.data()[2..], &[0.0; 3]);
        assert!(after.weight.value.data()[12..]
            .iter()
            .all(|v| v.abs() <= HEAD_INIT_SCALE));
        assert_eq!(model.class_to_task(), &[1, 1, 2, 2, 2]);
    }

    #[test]
    fn state_round_trips_through_load() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = Model::new(2, &[3], &mut rng).unwrap();
        model.add_task(2, &mut rng).unwrap();
        let s = model.state();
        model.params_mut()[0].value.data_mut()[0] += 1.0;
        assert_ne!(model.state(), s);
        model.load_state(&s).unwrap();
        assert_eq!(model.state(), s);
    }
}
