//! Training: Adamax on the composite loss with a reduce-on-plateau learning
//! rate, plus a finite-difference gradient check.

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{composite, composite_with_logit_grad, dice_score, LossWeights};
use super::net::SliceNet;
use super::{Predictor, PredictorError, Result};
use crate::phantom::Phantom;
use crate::seed::SeedPath;
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub plateau_factor: f64,
    pub patience: usize,
    pub cooldown: usize,
    pub epochs: usize,
    pub loss: LossWeights,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Slices per optimizer step.
    pub batch_size: usize,
    /// Channel dropout applied while training.
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            plateau_factor: 0.25,
            patience: 3,
            cooldown: 2,
            epochs: 50,
            loss: LossWeights::default(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 2,
            dropout_rate: 0.05,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PredictorError::InvalidConfig(m));
        let w = self.loss;
        if !(w.cross_entropy >= 0.0 && w.dice >= 0.0 && (w.cross_entropy + w.dice - 1.0).abs() < 1e-9) {
            return bad(format!("loss weights {w:?} must be non-negative and sum to 1"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("plateau factor {} outside (0, 1)", self.plateau_factor));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {}", self.lr));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad(format!("betas ({}, {})", self.beta1, self.beta2));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate {}", self.dropout_rate));
        }
        Ok(())
    }
}

/// Adam with the infinity norm in place of the second moment.
#[derive(Debug, Clone)]
pub struct Adamax {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    u: Vec<f64>,
    t: u64,
}

impl Adamax {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adamax {
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            u: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let step = lr / (1.0 - self.beta1.powi(self.t as i32));
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.u[i] = (self.beta2 * self.u[i]).max(g.abs() + self.eps);
            params[i] -= step * self.m[i] / self.u[i];
        }
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has not
/// improved (relative threshold 1e-4) for more than `patience` epochs, then
/// ignores `cooldown` epochs.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    cooldown: usize,
    threshold: f64,
    best: f64,
    bad_epochs: usize,
    cooldown_left: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, cooldown: usize) -> Self {
        PlateauScheduler {
            lr,
            factor,
            patience,
            cooldown,
            threshold: 1e-4,
            best: f64::INFINITY,
            bad_epochs: 0,
            cooldown_left: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one epoch's loss; returns the learning rate for the next epoch.
    pub fn step(&mut self, loss: f64) -> f64 {
        if loss < self.best * (1.0 - self.threshold) {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.cooldown_left > 0 {
            self.cooldown_left -= 1;
            self.bad_epochs = 0;
        }
        if self.bad_epochs > self.patience {
            self.lr *= self.factor;
            self.cooldown_left = self.cooldown;
            self.bad_epochs = 0;
        }
        self.lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean mini-batch loss while training (dropout on).
    pub train_loss: f64,
    /// Validation loss if a validation set was given.
    pub val_loss: Option<f64>,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Training-set loss before the first update (dropout off).
    pub initial_loss: f64,
    pub history: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.history.last().map(|r| r.train_loss)
    }
}

/// Composite loss of the deterministic prediction, averaged over subjects.
fn eval_loss(net: &SliceNet, subjects: &[Phantom], weights: LossWeights) -> Result<f64> {
    let losses: Vec<f64> = subjects
        .par_iter()
        .map(|s| {
            let mut p = Vec::with_capacity(s.image.len());
            for z in 0..s.image.dims()[2] {
                p.extend(net.forward_slice(net.slice_input(&s.image, z), 0.0, None).probs);
            }
            let y: Vec<f64> = s.label.data().iter().map(|&v| f64::from(v)).collect();
            composite(&p, &y, weights)
        })
        .collect();
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Mean Dice of the 0.5-thresholded deterministic prediction.
pub fn evaluate_dice(pred: &dyn Predictor, subjects: &[Phantom]) -> Result<f64> {
    let mut total = 0.0;
    for s in subjects {
        let p = pred.predict(&s.image, 0.0, 0)?;
        let bin = p.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })?;
        total += dice_score(&bin, &s.label)?;
    }
    Ok(total / subjects.len().max(1) as f64)
}

/// Trains `net` in place. The plateau schedule monitors the validation loss,
/// or the training loss when `validation` is empty. Deterministic in
/// `cfg.seed` regardless of thread count.
pub fn train(net: &mut SliceNet, cohort: &[Phantom], validation: &[Phantom], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if cohort.is_empty() {
        return Err(PredictorError::EmptyCohort);
    }
    for s in cohort.iter().chain(validation) {
        net.check_dims(s.image.dims())?;
        s.image.check_same_dims(&s.label)?;
    }

    let root = SeedPath::root(cfg.seed);
    let slices: Vec<(usize, usize)> = cohort
        .iter()
        .enumerate()
        .flat_map(|(s, p)| (0..p.image.dims()[2]).map(move |z| (s, z)))
        .collect();
    let labels: Vec<Vec<f64>> = cohort
        .iter()
        .map(|p| p.label.data().iter().map(|&v| f64::from(v)).collect())
        .collect();

    let initial_loss = eval_loss(net, cohort, cfg.loss)?;
    if !initial_loss.is_finite() {
        return Err(PredictorError::Diverged {
            epoch: 0,
            loss: initial_loss,
        });
    }
    let mut optimizer = Adamax::new(net.n_params(), cfg.beta1, cfg.beta2, cfg.eps);
    let mut scheduler = PlateauScheduler::new(cfg.lr, cfg.plateau_factor, cfg.patience, cfg.cooldown);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = scheduler.lr();
        let mut order = slices.clone();
        order.shuffle(&mut root.label("shuffle").index(epoch as u64).rng());
        let dropout_root = root.label("dropout").index(epoch as u64);

        let mut batch_losses = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            let caches: Vec<_> = batch
                .par_iter()
                .map(|&(s, z)| {
                    let input = net.slice_input(&cohort[s].image, z);
                    let mut rng = dropout_root.index(s as u64).index(z as u64).rng();
                    net.forward_slice(input, cfg.dropout_rate, Some(&mut rng))
                })
                .collect();
            let plane = caches[0].probs.len();
            let mut p = Vec::with_capacity(plane * batch.len());
            let mut y = Vec::with_capacity(plane * batch.len());
            for (cache, &(s, z)) in caches.iter().zip(batch) {
                p.extend_from_slice(&cache.probs);
                y.extend_from_slice(&labels[s][z * plane..(z + 1) * plane]);
            }
            let (loss, grad_logits) = composite_with_logit_grad(&p, &y, cfg.loss);
            if !loss.is_finite() {
                return Err(PredictorError::Diverged { epoch, loss });
            }
            let per_slice: Vec<Vec<f64>> = caches
                .par_iter()
                .zip(grad_logits.par_chunks(plane))
                .map(|(cache, g)| {
                    let mut grads = vec![0.0; net.n_params()];
                    net.backward_slice(cache, g, &mut grads);
                    grads
                })
                .collect();
            let mut grads = vec![0.0; net.n_params()];
            for g in &per_slice {
                for (a, b) in grads.iter_mut().zip(g) {
                    *a += b;
                }
            }
            optimizer.step(net.params_mut(), &grads, lr);
            batch_losses.push(loss);
        }

        let train_loss = batch_losses.iter().sum::<f64>() / batch_losses.len() as f64;
        let val_loss = if validation.is_empty() {
            None
        } else {
            Some(eval_loss(net, validation, cfg.loss)?)
        };
        let monitored = val_loss.unwrap_or(train_loss);
        if !monitored.is_finite() || net.params().iter().any(|v| !v.is_finite()) {
            return Err(PredictorError::Diverged { epoch, loss: monitored });
        }
        scheduler.step(monitored);
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
    }
    Ok(TrainReport { initial_loss, history })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-7)`, maximised.
    pub max_rel_error: f64,
    /// `(parameter index, analytic, numeric)`.
    pub entries: Vec<(usize, f64, f64)>,
}

/// Compares backpropagated gradients of the composite loss on slice `z` with
/// central differences (`h = 1e-3`) on `n_params` randomly chosen parameters.
/// Dropout is off.
pub fn gradient_check(
    net: &SliceNet,
    image: &Volume,
    label: &Volume,
    z: usize,
    n_params: usize,
    weights: LossWeights,
    seed: u64,
) -> Result<GradCheck> {
    const H: f64 = 1e-3;
    net.check_dims(image.dims())?;
    image.check_same_dims(label)?;
    let plane = image.dims()[0] * image.dims()[1];
    let y: Vec<f64> = label.data()[z * plane..(z + 1) * plane]
        .iter()
        .map(|&v| f64::from(v))
        .collect();
    let input = net.slice_input(image, z);

    let cache = net.forward_slice(input.clone(), 0.0, None);
    let (_, g_logits) = composite_with_logit_grad(&cache.probs, &y, weights);
    let mut analytic = vec![0.0; net.n_params()];
    net.backward_slice(&cache, &g_logits, &mut analytic);

    let loss_at = |params: &SliceNet| {
        let c = params.forward_slice(input.clone(), 0.0, None);
        composite(&c.probs, &y, weights)
    };
    let count = n_params.min(net.n_params());
    let chosen = index::sample(
        &mut SeedPath::root(seed).label("gradcheck").rng(),
        net.n_params(),
        count,
    );
    let mut probe = net.clone();
    let mut entries = Vec::with_capacity(count);
    let mut max_rel: f64 = 0.0;
    for i in chosen.iter() {
        let original = probe.params()[i];
        probe.params_mut()[i] = original + H;
        let up = loss_at(&probe);
        probe.params_mut()[i] = original - H;
        let down = loss_at(&probe);
        probe.params_mut()[i] = original;
        let numeric = (up - down) / (2.0 * H);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
        max_rel = max_rel.max(rel);
        entries.push((i, a, numeric));
    }
    Ok(GradCheck {
        max_rel_error: max_rel,
        entries,
    })
}

/// Full analytic gradient of the slice loss; used by tests.
#[cfg(test)]
pub(crate) fn slice_gradient(
    net: &SliceNet,
    image: &Volume,
    label: &Volume,
    z: usize,
    weights: LossWeights,
) -> Vec<f64> {
    let plane = image.dims()[0] * image.dims()[1];
    let y: Vec<f64> = label.data()[z * plane..(z + 1) * plane]
        .iter()
        .map(|&v| f64::from(v))
        .collect();
    let cache = net.forward_slice(net.slice_input(image, z), 0.0, None);
    let (_, g) = composite_with_logit_grad(&cache.probs, &y, weights);
    let mut grads = vec![0.0; net.n_params()];
    net.backward_slice(&cache, &g, &mut grads);
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_cohort, generate_phantom, PhantomSpec};
    use crate::predictor::PredictorConfig;

    fn small_spec(seed: u64) -> PhantomSpec {
        PhantomSpec {
            dims: [16, 16, 12],
            n_lesions: 1,
            radius_range: [2.0, 3.0],
            seed,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn scheduler_follows_plateau_semantics() {
        let mut s = PlateauScheduler::new(1.0, 0.25, 3, 2);
        assert_eq!(s.step(1.0), 1.0); // best
        for _ in 0..3 {
            assert_eq!(s.step(1.0), 1.0); // 3 bad epochs: not yet more than patience
        }
        assert_eq!(s.step(1.0), 0.25); // 4th bad epoch
        assert_eq!(s.step(1.0), 0.25); // cooldown
        assert_eq!(s.step(1.0), 0.25); // cooldown
        for _ in 0..3 {
            assert_eq!(s.step(1.0), 0.25);
        }
        assert_eq!(s.step(1.0), 0.0625);
        assert_eq!(s.step(0.5), 0.0625); // improvement
    }

    #[test]
    fn adamax_first_step_moves_by_lr() {
        let mut opt = Adamax::new(2, 0.9, 0.999, 1e-8);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &[0.5, -2.0], 0.01);
        // m = 0.1 g, u = |g|, bias correction 1/(1 - 0.9): step = lr * sign(g)
        assert!((p[0] - 0.99).abs() < 1e-6);
        assert!((p[1] + 0.99).abs() < 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let subject = generate_phantom(&small_spec(3)).unwrap();
        let net = SliceNet::new(PredictorConfig::default(), 1).unwrap();
        let report = gradient_check(&net, &subject.image, &subject.label, 4, 120, LossWeights::default(), 9).unwrap();
        assert_eq!(report.entries.len(), 120);
        assert!(report.max_rel_error <= 1e-3, "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn deeper_net_gradients_match() {
        let subject = generate_phantom(&small_spec(4)).unwrap();
        let cfg = PredictorConfig {
            n_blocks: 3,
            base_filters: 4,
            context_slices: 1,
        };
        let net = SliceNet::new(cfg, 2).unwrap();
        let report = gradient_check(&net, &subject.image, &subject.label, 0, 100, LossWeights::default(), 1).unwrap();
        assert!(report.max_rel_error <= 1e-3, "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn zero_net_has_zero_weight_gradients() {
        let cfg = PredictorConfig::default();
        let net = SliceNet::from_params(cfg, vec![0.0; SliceNet::new(cfg, 0).unwrap().n_params()]).unwrap();
        let zeros = Volume::zeros([8, 8, 3], [1.0; 3]).unwrap();
        let label = Volume::from_fn([8, 8, 3], [1.0; 3], |x, _, _| (x < 4) as u8 as f32).unwrap();
        let grads = slice_gradient(&net, &zeros, &label, 1, LossWeights::default());
        for (_, _, l) in net.layout().convs() {
            for &g in &grads[l.weight_offset..l.weight_offset + l.weight_len()] {
                assert_eq!(g, 0.0);
            }
        }
        let check = gradient_check(&net, &zeros, &label, 1, net.n_params(), LossWeights::default(), 0).unwrap();
        for (i, a, n) in check.entries {
            let is_weight = net
                .layout()
                .convs()
                .any(|(_, _, l)| (l.weight_offset..l.weight_offset + l.weight_len()).contains(&i));
            if is_weight {
                assert_eq!(a, 0.0);
                assert!(n.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let cohort = generate_cohort(&small_spec(10), 3).unwrap();
        let cfg = TrainConfig {
            epochs: 4,
            seed: 5,
            ..TrainConfig::default()
        };
        let mut a = SliceNet::new(PredictorConfig::default(), 5).unwrap();
        let ra = train(&mut a, &cohort, &[], &cfg).unwrap();
        let mut b = SliceNet::new(PredictorConfig::default(), 5).unwrap();
        let rb = train(&mut b, &cohort, &[], &cfg).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
        assert!(ra.final_train_loss().unwrap() < ra.initial_loss);
        assert_eq!(ra.history.len(), 4);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut net = SliceNet::new(PredictorConfig::default(), 0).unwrap();
        let cohort = generate_cohort(&small_spec(1), 1).unwrap();
        let bad_weights = TrainConfig {
            loss: LossWeights {
                cross_entropy: 0.5,
                dice: 0.7,
            },
            ..TrainConfig::default()
        };
        assert!(train(&mut net, &cohort, &[], &bad_weights).is_err());
        assert!(matches!(
            train(&mut net, &[], &[], &TrainConfig::default()),
            Err(PredictorError::EmptyCohort)
        ));
    }

    #[test]
    fn divergence_is_reported() {
        let cohort = generate_cohort(&small_spec(1), 1).unwrap();
        let mut net = SliceNet::new(PredictorConfig::default(), 0).unwrap();
        net.params_mut()[0] = f64::NAN;
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&mut net, &cohort, &[], &cfg),
            Err(PredictorError::Diverged { .. })
        ));
    }
}
