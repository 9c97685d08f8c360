//! Two-step training, evaluation and replacement sweeps.
//!
//! Step 1 trains real-valued weights under binary activations, step 2
//! initializes from step 1 and binarizes both. Dynamic embeddings are
//! attached to a trained network with zero-initialized outputs and
//! fine-tuned afterwards.

pub mod data;
pub mod loss;
pub mod optim;
pub mod sweep;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::blocks::WeightMode;
use crate::error::{Error, Result};
use crate::network::{Checkpoint, Network};
use crate::tensor::RealTensor;

pub use data::{Augment, Dataset, Split};
pub use loss::{loss, Distillation};
pub use optim::{cosine_lr, AdamW};
pub use sweep::{sweep_replacement, SweepConfig, SweepRow};

fn default_batch() -> usize {
    32
}

fn default_smoothing() -> f64 {
    0.1
}

fn default_dataset() -> String {
    "synthetic:5000".into()
}

fn default_true() -> bool {
    true
}

/// Hyperparameters of one training phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// 1 = real weights with binary activations, 2 = fully binary.
    pub step: u8,
    pub iterations: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Peak of the cosine schedule.
    pub learning_rate: f64,
    /// Decoupled weight decay on conv, MLP and classifier weights.
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_smoothing")]
    pub smoothing: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dataset")]
    pub dataset: String,
    #[serde(default = "default_true")]
    pub augment: bool,
    /// Use at most this many training images.
    #[serde(default)]
    pub train_limit: Option<usize>,
}

impl TrainConfig {
    /// Desk-scale step 1: peak lr 2e-3, weight decay 1e-5.
    pub fn step1(iterations: u64) -> Self {
        Self {
            step: 1,
            iterations,
            batch_size: default_batch(),
            learning_rate: 2e-3,
            weight_decay: 1e-5,
            smoothing: default_smoothing(),
            seed: 0,
            dataset: default_dataset(),
            augment: true,
            train_limit: None,
        }
    }

    /// Desk-scale step 2: half the step-1 learning rate, no weight decay.
    pub fn step2(iterations: u64) -> Self {
        Self {
            step: 2,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            ..Self::step1(iterations)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !matches!(self.step, 1 | 2) {
            return bad(format!("step must be 1 or 2, got {}", self.step));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be finite and non-negative", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay {} must be non-negative", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return bad(format!("smoothing {} outside [0, 1)", self.smoothing));
        }
        Ok(())
    }
}

/// Accuracy and loss of one evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub top1: f64,
    pub top5: f64,
    /// Mean unsmoothed cross-entropy.
    pub loss: f64,
    /// Training loss per iteration, when the metrics close a training run.
    pub history: Vec<f64>,
}

/// Result of one training phase.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    /// Mean minibatch loss per iteration.
    pub history: Vec<f64>,
}

/// Teacher logits for every training image, `[n_train, classes]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    pub logits: RealTensor,
    pub weight: f64,
}

/// Runs `cfg.iterations` AdamW steps on `net` in its current weight mode.
/// Batch order and augmentation come from `cfg.seed` on stream `cfg.step`.
pub fn train(net: &mut Network, data: &Dataset, cfg: &TrainConfig, teacher: Option<&Teacher>) -> Result<Vec<f64>> {
    cfg.validate()?;
    let spec = net.spec();
    let norm = data.normalization();
    let data = match cfg.train_limit {
        Some(n) => data.take(n),
        None => data.clone(),
    };
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if data.shape() != (spec.input_channels, spec.resolution, spec.resolution) {
        return Err(Error::Dataset(format!(
            "images are {:?}, network `{}` expects {}x{}x{}",
            data.shape(),
            spec.name,
            spec.input_channels,
            spec.resolution,
            spec.resolution
        )));
    }
    if data.classes() > spec.classes {
        return Err(Error::Dataset(format!("{} classes for a {}-way classifier", data.classes(), spec.classes)));
    }
    if let Some(t) = teacher {
        if t.logits.shape() != [data.len(), spec.classes] {
            return Err(Error::dim(format!("teacher logits {:?} for {} images", t.logits.shape(), data.len())));
        }
    }
    let classes = spec.classes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(cfg.step as u64);
    let mut opt = AdamW::new();
    let decay: Vec<bool> = net.trainable_mut().iter().map(|(_, _, k)| k.decayed()).collect();
    let mut order: Vec<usize> = Vec::new();
    let mut history = Vec::with_capacity(cfg.iterations as usize);
    let batch = cfg.batch_size.min(data.len());
    for t in 0..cfg.iterations {
        if order.len() < batch {
            let mut epoch: Vec<usize> = (0..data.len()).collect();
            epoch.shuffle(&mut rng);
            order.extend(epoch);
        }
        let idx: Vec<usize> = order.drain(..batch).collect();
        let aug = cfg.augment.then(|| (Augment::default(), &mut rng));
        let (x, labels) = data.batch(&idx, &norm, aug);
        let mut targets = loss::smoothed_targets(&labels, classes, cfg.smoothing)?;
        if let Some(teacher) = teacher {
            let rows: Vec<f64> = idx
                .iter()
                .flat_map(|&i| teacher.logits.data()[i * classes..(i + 1) * classes].iter().copied())
                .collect();
            Distillation {
                teacher_logits: RealTensor::new([idx.len(), classes], rows)?,
                weight: teacher.weight,
            }
            .mix(&mut targets)?;
        }

        let mut g = Graph::new();
        let xin = g.input(x);
        let (logits, stats) = net.graph_forward(&mut g, xin, true)?;
        let root = g.cross_entropy(logits, targets)?;
        let value = g.value(root).data()[0];
        if !value.is_finite() {
            return Err(Error::InvalidArgument(format!("loss diverged at iteration {t}")));
        }
        {
            let mut params: Vec<&mut RealTensor> = net.trainable_mut().into_iter().map(|(_, p, _)| p).collect();
            for p in params.iter_mut() {
                p.zero_grad();
            }
            g.backward(root, &mut params)?;
            let lr = cosine_lr(cfg.learning_rate, t, cfg.iterations);
            opt.step(&mut params, &decay, lr, cfg.weight_decay)?;
        }
        net.update_running_stats(&stats)?;
        history.push(value);
    }
    net.meta.iterations += cfg.iterations;
    Ok(history)
}

fn phase(net: &mut Network, data: &Dataset, cfg: &TrainConfig, mode: WeightMode) -> Result<TrainRun> {
    // zero iterations leave the network, its mode and its metadata untouched
    if cfg.iterations == 0 {
        cfg.validate()?;
        return Ok(TrainRun {
            checkpoint: Checkpoint::from_network(net),
            history: Vec::new(),
        });
    }
    net.weight_mode = mode;
    let history = train(net, data, cfg, None)?;
    net.meta.step = cfg.step as u32;
    Ok(TrainRun {
        checkpoint: Checkpoint::from_network(net),
        history,
    })
}

/// Step 1: binary activations, real-valued weights.
pub fn train_step1(net: &mut Network, data: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    if cfg.step != 1 {
        return Err(Error::InvalidArgument(format!("train_step1 needs step = 1, got {}", cfg.step)));
    }
    phase(net, data, cfg, WeightMode::Real)
}

/// Step 2: loads `init` (which must match the spec of `net`) and trains
/// with binary weights and activations.
pub fn train_step2(net: &mut Network, init: &Checkpoint, data: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    if cfg.step != 2 {
        return Err(Error::InvalidArgument(format!("train_step2 needs step = 2, got {}", cfg.step)));
    }
    net.load_state(init, true)?;
    phase(net, data, cfg, WeightMode::Binary)
}

/// Attaches zero-initialized dynamic embeddings to a trained network and
/// fine-tunes the result with binary weights. The returned network starts
/// out computing exactly the same function as `trained`.
pub fn finetune_dynamic(trained: &Network, data: &Dataset, cfg: &TrainConfig) -> Result<(Network, TrainRun)> {
    let mut spec = trained.spec().clone().with_dynamic_convs();
    spec.name = format!("{}-dynamic", spec.name);
    let mut net = Network::build(&spec, cfg.seed)?;
    let untouched = net.load_state(&Checkpoint::from_network(trained), false)?;
    if let Some(n) = untouched.iter().find(|n| !n.contains(".dyn.")) {
        return Err(Error::Incompatible(format!("tensor `{n}` missing from the trained network")));
    }
    net.meta = trained.meta;
    let run = phase(&mut net, data, cfg, WeightMode::Binary)?;
    Ok((net, run))
}

/// Evaluates in inference mode, `batch` images at a time.
pub fn evaluate(net: &Network, data: &Dataset, norm: &data::Normalization, batch: usize) -> Result<Metrics> {
    if data.is_empty() {
        return Ok(Metrics::default());
    }
    let classes = net.spec().classes;
    let k5 = classes.min(5);
    let (mut top1, mut top5, mut total) = (0usize, 0usize, 0.0);
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(batch.max(1)) {
        let (x, labels) = data.batch(idx, norm, None);
        let logits = net.forward(&x)?;
        for (row, &l) in logits.data().chunks_exact(classes).zip(&labels) {
            // per-row sums keep the result independent of the batch size
            total -= loss::softmax(row)[l].ln();
            // rank = number of classes scoring strictly higher, ties favour
            // the lower index
            let rank = row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > row[l] || (v == row[l] && j < l))
                .count();
            top1 += (rank == 0) as usize;
            top5 += (rank < k5) as usize;
        }
    }
    let n = data.len() as f64;
    Ok(Metrics {
        top1: top1 as f64 / n,
        top5: top5 as f64 / n,
        loss: total / n,
        history: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::preset;

    fn setup() -> (Network, Split) {
        let net = Network::build(&preset("desk-tiny").unwrap(), 1).unwrap();
        (net, data::synthetic(64, 20, 9))
    }

    fn quick(step: u8, iters: u64) -> TrainConfig {
        let c = if step == 1 { TrainConfig::step1(iters) } else { TrainConfig::step2(iters) };
        TrainConfig { batch_size: 8, ..c }
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let (mut net, d) = setup();
        let before = net.clone();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            weight_decay: 0.0,
            ..quick(1, 2)
        };
        train_step1(&mut net, &d.train, &cfg).unwrap();
        let trainable = |n: &Network| -> Vec<RealTensor> {
            n.tensors().into_iter().filter(|(_, _, k)| k.trainable()).map(|(_, t, _)| t.clone()).collect()
        };
        assert_eq!(trainable(&net), trainable(&before));
    }

    #[test]
    fn zero_iterations_return_init() {
        let (mut net, d) = setup();
        let init = Checkpoint::from_network(&net);
        let run = train_step2(&mut net, &init, &d.train, &quick(2, 0)).unwrap();
        assert_eq!(run.checkpoint, init);
    }

    #[test]
    fn training_is_reproducible() {
        let (net, d) = setup();
        let a = train_step1(&mut net.clone(), &d.train, &quick(1, 3)).unwrap();
        let b = train_step1(&mut net.clone(), &d.train, &quick(1, 3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.checkpoint.meta.step, 1);
        assert_eq!(a.checkpoint.weight_mode, WeightMode::Real);
    }

    #[test]
    fn step_mismatch_and_bad_init() {
        let (mut net, d) = setup();
        assert!(train_step1(&mut net, &d.train, &quick(2, 1)).is_err());
        let other = Network::build(&preset("desk-tiny-conv").unwrap(), 0).unwrap();
        let init = Checkpoint::from_network(&other);
        assert!(matches!(
            train_step2(&mut net, &init, &d.train, &quick(2, 1)),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn evaluation_is_deterministic_and_ordered() {
        let (net, d) = setup();
        let norm = d.train.normalization();
        let a = evaluate(&net, &d.test, &norm, 7).unwrap();
        assert_eq!(a, evaluate(&net, &d.test, &norm, 3).unwrap());
        assert!(a.top5 >= a.top1);
        assert!((0.0..=1.0).contains(&a.top1));
    }

    #[test]
    fn dynamic_finetune_starts_from_the_same_function() {
        let (net, d) = setup();
        let (dynamic, _) = finetune_dynamic(&net, &d.train, &quick(2, 0)).unwrap();
        assert!(dynamic.spec().layers.iter().any(|l| l.dynamic));
        let norm = d.train.normalization();
        let (x, _) = d.test.batch(&[0, 1, 2, 3], &norm, None);
        assert_eq!(dynamic.forward(&x).unwrap(), net.forward(&x).unwrap());
    }

    #[test]
    fn distillation_hook_changes_the_update() {
        let (net, d) = setup();
        let cfg = quick(1, 1);
        let mut a = net.clone();
        train(&mut a, &d.train, &cfg, None).unwrap();
        let mut b = net.clone();
        let teacher = Teacher {
            logits: RealTensor::from_fn([d.train.len(), 10], |i| (i % 10) as f64),
            weight: 0.5,
        };
        train(&mut b, &d.train, &cfg, Some(&teacher)).unwrap();
        assert_ne!(a, b);
        let wrong = Teacher {
            logits: RealTensor::zeros([3, 10]),
            weight: 0.5,
        };
        assert!(train(&mut b, &d.train, &cfg, Some(&wrong)).is_err());
    }
}
