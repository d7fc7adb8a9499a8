//! Optimizers and the minibatch training loop.

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{ArrayD, Zip};

use crate::data::{gather, minibatch_indices, Dataset};
use crate::error::{MadeError, Result};
use crate::eval::test_nll;
use crate::masks::{fixed_mask, make_mask_list, mask_stream, sample_mask_set, MaskSet, SeedRecord};
use crate::network::{self, init_params, Architecture, Gradients, MadeParams};
use crate::scalar::Scalar;
use crate::seed::{self, Stream};

pub const DEFAULT_ADADELTA_DECAY: f64 = 0.95;
pub const DEFAULT_ADADELTA_EPSILON: f64 = 1e-7;
pub const DEFAULT_ADAGRAD_EPSILON: f64 = 1e-6;
pub const DEFAULT_BATCH_SIZE: usize = 100;
pub const DEFAULT_LOOKAHEAD: usize = 30;
pub const DEFAULT_VALID_MASKS: usize = 300;
pub const DEFAULT_TEST_MASKS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Sgd { learning_rate: f64 },
    Adagrad { learning_rate: f64, epsilon: f64 },
    Adadelta { decay: f64, epsilon: f64 },
}

impl Optimizer {
    pub fn name(&self) -> &'static str {
        match self {
            Optimizer::Sgd { .. } => "sgd",
            Optimizer::Adagrad { .. } => "adagrad",
            Optimizer::Adadelta { .. } => "adadelta",
        }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adadelta {
            decay: DEFAULT_ADADELTA_DECAY,
            epsilon: DEFAULT_ADADELTA_EPSILON,
        }
    }
}

/// Which masks are used for each update, and which are averaged at
/// validation and test time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskPolicy {
    /// One mask with the natural ordering.
    Fixed,
    /// Round-robin over a list of this many sampled masks.
    Cycle(usize),
    /// A fresh mask for every minibatch.
    Unlimited,
}

impl fmt::Display for MaskPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskPolicy::Fixed => f.write_str("fixed"),
            MaskPolicy::Cycle(r) => write!(f, "cycle:{r}"),
            MaskPolicy::Unlimited => f.write_str("unlimited"),
        }
    }
}

impl FromStr for MaskPolicy {
    type Err = MadeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(MaskPolicy::Fixed),
            "unlimited" => Ok(MaskPolicy::Unlimited),
            other => {
                let r = other
                    .strip_prefix("cycle:")
                    .and_then(|r| r.parse::<usize>().ok())
                    .ok_or_else(|| MadeError::Config(format!("unknown mask policy {other:?}")))?;
                if r == 0 {
                    return Err(MadeError::Config("cycle length must be >= 1".into()));
                }
                Ok(MaskPolicy::Cycle(r))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub lookahead: usize,
    pub max_epochs: usize,
    pub mask_policy: MaskPolicy,
    pub valid_masks_for_unlimited: usize,
    pub test_masks_for_unlimited: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Optimizer::default(),
            batch_size: DEFAULT_BATCH_SIZE,
            lookahead: DEFAULT_LOOKAHEAD,
            max_epochs: 1000,
            mask_policy: MaskPolicy::Fixed,
            valid_masks_for_unlimited: DEFAULT_VALID_MASKS,
            test_masks_for_unlimited: DEFAULT_TEST_MASKS,
            seed: 1234,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(MadeError::Config("batch_size must be >= 1".into()));
        }
        if self.lookahead == 0 {
            return Err(MadeError::Config("lookahead must be >= 1".into()));
        }
        if self.mask_policy == MaskPolicy::Cycle(0) {
            return Err(MadeError::Config("cycle length must be >= 1".into()));
        }
        if self.mask_policy == MaskPolicy::Unlimited
            && (self.valid_masks_for_unlimited == 0 || self.test_masks_for_unlimited == 0)
        {
            return Err(MadeError::Config(
                "unlimited policy needs evaluation masks".into(),
            ));
        }
        Ok(())
    }
}

/// Per-tensor accumulators: adagrad keeps `Σg²`; adadelta keeps `E[g²]` and
/// `E[Δ²]`. Allocated lazily on the first step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState<F> {
    pub sq_grad: Vec<ArrayD<F>>,
    pub sq_delta: Vec<ArrayD<F>>,
    pub steps: u64,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new() -> Self {
        OptimizerState {
            sq_grad: Vec::new(),
            sq_delta: Vec::new(),
            steps: 0,
        }
    }
}

/// Applies one update to `params` in place.
pub fn optimizer_step<F: Scalar>(
    state: &mut OptimizerState<F>,
    params: &mut MadeParams<F>,
    grads: &Gradients<F>,
    optimizer: &Optimizer,
) -> Result<()> {
    let grad_tensors = grads.tensors();
    if let Some(i) = grad_tensors
        .iter()
        .position(|g| g.iter().any(|v| !v.is_finite()))
    {
        let name = &params.arch.tensor_shapes()[i].0;
        return Err(MadeError::Diverged(format!(
            "non-finite gradient in tensor {name} at update {}",
            state.steps
        )));
    }
    let mut param_tensors = params.tensors_mut();
    if param_tensors.len() != grad_tensors.len()
        || param_tensors
            .iter()
            .zip(&grad_tensors)
            .any(|(p, g)| p.shape() != g.shape())
    {
        return Err(MadeError::Shape(
            "gradient shapes do not match parameters".into(),
        ));
    }
    let zeros = || {
        grad_tensors
            .iter()
            .map(|g| ArrayD::zeros(g.raw_dim()))
            .collect()
    };
    match *optimizer {
        Optimizer::Sgd { learning_rate } => {
            let lr = F::of(learning_rate);
            for (p, g) in param_tensors.iter_mut().zip(&grad_tensors) {
                Zip::from(p).and(g).for_each(|p, &g| *p -= lr * g);
            }
        }
        Optimizer::Adagrad {
            learning_rate,
            epsilon,
        } => {
            if state.sq_grad.is_empty() {
                state.sq_grad = zeros();
            }
            let (lr, eps) = (F::of(learning_rate), F::of(epsilon));
            for ((p, g), acc) in param_tensors
                .iter_mut()
                .zip(&grad_tensors)
                .zip(state.sq_grad.iter_mut())
            {
                Zip::from(p).and(g).and(acc).for_each(|p, &g, acc| {
                    *acc += g * g;
                    *p -= lr * g / (acc.sqrt() + eps);
                });
            }
        }
        Optimizer::Adadelta { decay, epsilon } => {
            if state.sq_grad.is_empty() {
                state.sq_grad = zeros();
                state.sq_delta = zeros();
            }
            let (rho, eps) = (F::of(decay), F::of(epsilon));
            let one_minus = F::one() - rho;
            for (((p, g), eg), ed) in param_tensors
                .iter_mut()
                .zip(&grad_tensors)
                .zip(state.sq_grad.iter_mut())
                .zip(state.sq_delta.iter_mut())
            {
                Zip::from(p)
                    .and(g)
                    .and(eg)
                    .and(ed)
                    .for_each(|p, &g, eg, ed| {
                        *eg = rho * *eg + one_minus * g * g;
                        let delta = -((*ed + eps).sqrt() / (*eg + eps).sqrt()) * g;
                        *ed = rho * *ed + one_minus * delta * delta;
                        *p += delta;
                    });
            }
        }
    }
    state.steps += 1;
    Ok(())
}

/// Fresh mask set for update `step` under the unlimited policy.
pub fn resample_unlimited_mask(
    step: u64,
    master_seed: u64,
    arch: &Architecture,
) -> Result<MaskSet> {
    sample_mask_set(
        arch.dim,
        &arch.hidden,
        arch.use_direct,
        SeedRecord {
            master: master_seed,
            stream: Stream::Unlimited,
            index: step,
        },
    )
}

/// Training and evaluation masks implied by a policy and a master seed.
#[derive(Clone, Debug)]
pub struct MaskSchedule {
    arch: Architecture,
    policy: MaskPolicy,
    seed: u64,
    list: Vec<MaskSet>,
}

impl MaskSchedule {
    pub fn new(arch: &Architecture, policy: MaskPolicy, seed: u64) -> Result<Self> {
        arch.validate()?;
        let list = match policy {
            MaskPolicy::Fixed => vec![fixed_mask(arch.dim, &arch.hidden, seed, arch.use_direct)?],
            MaskPolicy::Cycle(r) => {
                make_mask_list(r, arch.dim, &arch.hidden, seed, arch.use_direct)?
            }
            MaskPolicy::Unlimited => Vec::new(),
        };
        Ok(MaskSchedule {
            arch: arch.clone(),
            policy,
            seed,
            list,
        })
    }

    pub fn policy(&self) -> MaskPolicy {
        self.policy
    }

    /// Index recorded in the mask-usage log for update `step`.
    pub fn usage_index(&self, step: u64) -> u64 {
        match self.policy {
            MaskPolicy::Fixed => 0,
            MaskPolicy::Cycle(r) => step % r as u64,
            MaskPolicy::Unlimited => step,
        }
    }

    pub fn training_mask(&self, step: u64) -> Result<Cow<'_, MaskSet>> {
        match self.policy {
            MaskPolicy::Unlimited => Ok(Cow::Owned(resample_unlimited_mask(
                step, self.seed, &self.arch,
            )?)),
            _ => Ok(Cow::Borrowed(&self.list[self.usage_index(step) as usize])),
        }
    }

    /// Masks averaged over for validation or test. Finite policies reuse the
    /// training list; the unlimited policy draws `count` dedicated masks.
    pub fn evaluation_masks(&self, stream: Stream, count: usize) -> Result<Vec<MaskSet>> {
        match self.policy {
            MaskPolicy::Unlimited => mask_stream(
                count,
                self.arch.dim,
                &self.arch.hidden,
                self.seed,
                stream,
                self.arch.use_direct,
            ),
            _ => Ok(self.list.clone()),
        }
    }
}

/// Lookahead early stopping on a quantity to be minimised.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    lookahead: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(lookahead: usize) -> Self {
        EarlyStopping {
            lookahead,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records `value` for `epoch`; returns `true` if it is a new best.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        if value < self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.lookahead
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 0 is the untrained model.
    pub epoch: usize,
    pub train_nll: f64,
    pub valid_nll: f64,
    pub best_so_far: f64,
    /// Seconds since training started.
    pub seconds: f64,
}

impl EpochRecord {
    /// Tab-separated training-log line (without newline).
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{:.3}",
            self.epoch, self.train_nll, self.valid_nll, self.best_so_far, self.seconds
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_nll: f64,
    pub wall_seconds: f64,
    /// Mask index used by every update, in order.
    pub mask_usage: Vec<u64>,
    pub stopped_early: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<F> {
    /// Parameters from the epoch with the lowest validation NLL.
    pub params: MadeParams<F>,
    /// Masks to average over at test time.
    pub test_masks: Vec<MaskSet>,
    pub report: TrainReport,
}

pub fn train<F: Scalar>(
    arch: &Architecture,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<TrainOutcome<F>> {
    train_with_observer(arch, dataset, config, |_| {})
}

/// [`train`], calling `observer` after every epoch (including epoch 0).
pub fn train_with_observer<F: Scalar>(
    arch: &Architecture,
    dataset: &Dataset,
    config: &TrainConfig,
    mut observer: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<F>> {
    arch.validate()?;
    config.validate()?;
    if arch.dim != dataset.dim {
        return Err(MadeError::Config(format!(
            "architecture has D={} but dataset {} has D={}",
            arch.dim, dataset.name, dataset.dim
        )));
    }
    if dataset.train.nrows() == 0 || dataset.valid.nrows() == 0 {
        return Err(MadeError::Config(
            "train and valid splits must be non-empty".into(),
        ));
    }

    let start = Instant::now();
    let schedule = MaskSchedule::new(arch, config.mask_policy, config.seed)?;
    let valid_masks =
        schedule.evaluation_masks(Stream::ValidMasks, config.valid_masks_for_unlimited)?;
    let mut params: MadeParams<F> =
        init_params(arch, &mut seed::stream_rng(config.seed, Stream::Init, 0))?;
    let mut state = OptimizerState::new();
    let mut stopper = EarlyStopping::new(config.lookahead);
    let mut records = Vec::new();
    let mut mask_usage = Vec::new();

    let valid_nll = |p: &MadeParams<F>| -> Result<f64> {
        let v = test_nll(p, &valid_masks, dataset.valid.view())?.mean;
        if !v.is_finite() {
            return Err(MadeError::Diverged(format!("validation NLL is {v}")));
        }
        Ok(v)
    };

    let initial_train = {
        let mask = schedule.training_mask(0)?;
        test_nll(
            &params,
            std::slice::from_ref(mask.as_ref()),
            dataset.train.view(),
        )?
        .mean
    };
    let v0 = valid_nll(&params)?;
    stopper.observe(0, v0);
    let mut best_params = params.clone();
    let record = EpochRecord {
        epoch: 0,
        train_nll: initial_train,
        valid_nll: v0,
        best_so_far: v0,
        seconds: start.elapsed().as_secs_f64(),
    };
    observer(&record);
    records.push(record);

    let mut step: u64 = 0;
    for epoch in 1..=config.max_epochs {
        let epoch_seed = seed::derive(config.seed, Stream::Shuffle, epoch as u64);
        let mut loss_sum = 0.0;
        for batch in minibatch_indices(dataset.train.nrows(), config.batch_size, epoch_seed) {
            let x = gather::<F>(dataset.train.view(), &batch);
            let mask = schedule.training_mask(step)?;
            let (loss, grads) = network::loss_and_gradients(&params, &mask, x.view())?;
            let loss = loss.widen();
            if !loss.is_finite() {
                return Err(MadeError::Diverged(format!(
                    "training loss is {loss} at update {step}"
                )));
            }
            optimizer_step(&mut state, &mut params, &grads, &config.optimizer)?;
            mask_usage.push(schedule.usage_index(step));
            loss_sum += loss * batch.len() as f64;
            step += 1;
        }
        let v = valid_nll(&params)?;
        if stopper.observe(epoch, v) {
            best_params = params.clone();
        }
        let record = EpochRecord {
            epoch,
            train_nll: loss_sum / dataset.train.nrows() as f64,
            valid_nll: v,
            best_so_far: stopper.best(),
            seconds: start.elapsed().as_secs_f64(),
        };
        observer(&record);
        records.push(record);
        if stopper.should_stop() {
            break;
        }
    }

    let stopped_early = stopper.should_stop();
    let test_masks =
        schedule.evaluation_masks(Stream::TestMasks, config.test_masks_for_unlimited)?;
    Ok(TrainOutcome {
        params: best_params,
        test_masks,
        report: TrainReport {
            epochs: records,
            best_epoch: stopper.best_epoch(),
            best_valid_nll: stopper.best(),
            wall_seconds: start.elapsed().as_secs_f64(),
            mask_usage,
            stopped_early,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::verify_autoregressive;
    use crate::network::Activation;
    use ndarray::{Array1, Array2};

    fn scalar_params(value: f64) -> MadeParams<f64> {
        // Smallest architecture; only `c[0]` is used as "the" scalar.
        let arch = Architecture::new(2, vec![1], Activation::Relu);
        let mut p = MadeParams::zeros(&arch).unwrap();
        p.c[0] = value;
        p
    }

    fn scalar_grad(g: f64) -> Gradients<f64> {
        let mut grads = scalar_params(0.0);
        grads.c[0] = g;
        grads
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        for opt in [
            Optimizer::Sgd { learning_rate: 0.1 },
            Optimizer::Adagrad {
                learning_rate: 0.1,
                epsilon: 1e-6,
            },
            Optimizer::default(),
        ] {
            let mut p = scalar_params(0.7);
            p.v.fill(-0.3);
            let before = p.clone();
            let mut state = OptimizerState::new();
            for _ in 0..3 {
                optimizer_step(&mut state, &mut p, &scalar_grad(0.0), &opt).unwrap();
            }
            assert_eq!(p, before);
        }
    }

    #[test]
    fn sgd_unit_step() {
        let mut p = scalar_params(1.0);
        let mut state = OptimizerState::new();
        optimizer_step(
            &mut state,
            &mut p,
            &scalar_grad(1.0),
            &Optimizer::Sgd { learning_rate: 0.1 },
        )
        .unwrap();
        assert!((p.c[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn adadelta_first_step_by_hand() {
        // E[g²] = 0.05 * 4 = 0.2; Δ = -sqrt(1e-7) / sqrt(0.2 + 1e-7) * 2.
        let expected = -(1e-7f64).sqrt() * 2.0 / (0.2f64 + 1e-7).sqrt();
        assert!((expected - -1.4142132088e-3).abs() < 1e-12);
        let mut p = scalar_params(0.0);
        let mut state = OptimizerState::new();
        let opt = Optimizer::Adadelta {
            decay: 0.95,
            epsilon: 1e-7,
        };
        optimizer_step(&mut state, &mut p, &scalar_grad(2.0), &opt).unwrap();
        assert!((p.c[0] - expected).abs() < 1e-18);
        let e_delta = state.sq_delta[0..]
            .iter()
            .find(|t| t.iter().any(|&v| v != 0.0))
            .unwrap();
        assert!((e_delta.iter().sum::<f64>() - 0.05 * expected * expected).abs() < 1e-20);
    }

    #[test]
    fn adagrad_first_step() {
        let mut p = scalar_params(0.0);
        let mut state = OptimizerState::new();
        let opt = Optimizer::Adagrad {
            learning_rate: 0.1,
            epsilon: 1e-6,
        };
        optimizer_step(&mut state, &mut p, &scalar_grad(3.0), &opt).unwrap();
        assert!((p.c[0] - -0.1 * 3.0 / (3.0 + 1e-6)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = scalar_params(0.0);
        let mut state = OptimizerState::new();
        let err = optimizer_step(
            &mut state,
            &mut p,
            &scalar_grad(f64::NAN),
            &Optimizer::default(),
        )
        .unwrap_err();
        assert!(
            matches!(err, MadeError::Diverged(ref m) if m.contains("tensor c")),
            "{err}"
        );
    }

    #[test]
    fn lookahead_contract() {
        // Improvements only at epochs 1 and 2, then flat.
        let mut es = EarlyStopping::new(30);
        let mut last = 0;
        for epoch in 0..100 {
            let v = match epoch {
                0 => 10.0,
                1 => 9.0,
                2 => 8.0,
                _ => 8.5,
            };
            es.observe(epoch, v);
            last = epoch;
            if es.should_stop() {
                break;
            }
        }
        assert_eq!(last, 32);
        assert_eq!(es.best_epoch(), 2);
        assert_eq!(es.best(), 8.0);
    }

    #[test]
    fn mask_policy_parsing() {
        assert_eq!("fixed".parse::<MaskPolicy>().unwrap(), MaskPolicy::Fixed);
        assert_eq!(
            "cycle:8".parse::<MaskPolicy>().unwrap(),
            MaskPolicy::Cycle(8)
        );
        assert_eq!(
            "unlimited".parse::<MaskPolicy>().unwrap(),
            MaskPolicy::Unlimited
        );
        assert!("cycle:0".parse::<MaskPolicy>().is_err());
        for p in [
            MaskPolicy::Fixed,
            MaskPolicy::Cycle(3),
            MaskPolicy::Unlimited,
        ] {
            assert_eq!(p.to_string().parse::<MaskPolicy>().unwrap(), p);
        }
    }

    #[test]
    fn cycle_schedule_is_periodic() {
        let arch = Architecture::new(5, vec![4], Activation::Relu);
        let s = MaskSchedule::new(&arch, MaskPolicy::Cycle(8), 3).unwrap();
        let usage: Vec<u64> = (0..16).map(|i| s.usage_index(i)).collect();
        let expect: Vec<u64> = (0..8).chain(0..8).collect();
        assert_eq!(usage, expect);
        assert_eq!(*s.training_mask(3).unwrap(), *s.training_mask(11).unwrap());
    }

    #[test]
    fn unlimited_masks_are_deterministic_and_distinct() {
        let arch = Architecture::new(100, vec![20], Activation::Relu);
        assert_eq!(
            resample_unlimited_mask(5, 9, &arch).unwrap(),
            resample_unlimited_mask(5, 9, &arch).unwrap()
        );
        let orderings: Vec<_> = (0..100)
            .map(|s| {
                resample_unlimited_mask(s, 9, &arch)
                    .unwrap()
                    .ordering()
                    .clone()
            })
            .collect();
        assert!(orderings.iter().any(|o| *o != orderings[0]));
        let small = Architecture::new(7, vec![6, 5], Activation::Relu).with_direct(true);
        for step in 0..1000 {
            assert!(
                verify_autoregressive(&resample_unlimited_mask(step, 4, &small).unwrap()).passed()
            );
        }
    }

    #[test]
    fn empty_split_is_a_configuration_error() {
        let arch = Architecture::new(3, vec![2], Activation::Relu);
        let rows = Array2::<u8>::zeros((4, 3));
        let ds = Dataset::new("t", rows, Array2::zeros((0, 3)), Array2::zeros((1, 3))).unwrap();
        assert!(matches!(
            train::<f64>(&arch, &ds, &TrainConfig::default()),
            Err(MadeError::Config(_))
        ));
    }

    #[test]
    fn cycle_training_logs_mask_usage() {
        let arch = Architecture::new(4, vec![5], Activation::Relu);
        let rows: Array1<u8> = (0..64usize).map(|i| u8::from(i * 37 % 5 < 2)).collect();
        let m = rows.into_shape_with_order((16, 4)).unwrap();
        let ds = Dataset::new("t", m.clone(), m.clone(), m).unwrap();
        let cfg = TrainConfig {
            batch_size: 2,
            max_epochs: 2,
            mask_policy: MaskPolicy::Cycle(8),
            ..TrainConfig::default()
        };
        let out = train::<f64>(&arch, &ds, &cfg).unwrap();
        let expect: Vec<u64> = (0..8).chain(0..8).collect();
        assert_eq!(out.report.mask_usage, expect);
        assert_eq!(out.test_masks.len(), 8);
        assert_eq!(out.report.epochs.len(), 3);
    }
}
