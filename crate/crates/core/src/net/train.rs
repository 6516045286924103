//! Mini-batch training with deterministic gradient reduction.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::arch::NetSpec;
use super::loss::masked_cross_entropy;
use super::model::{Mode, Model, Params};
use crate::error::{Error, Result};

/// Samples per sequential gradient chunk. Chunks are reduced in index
/// order, so results do not depend on the thread count.
const CHUNK: usize = 16;
/// Chunks evaluated concurrently before folding into the batch sum.
const GROUP: usize = 8;

/// Labeled training patches: FOV intensities with their ROI labels,
/// both in network (channel-last) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PatchSet {
    fov: [usize; 3],
    roi: [usize; 3],
    inputs: Vec<f32>,
    labels: Vec<bool>,
}

impl PatchSet {
    pub fn new(fov: [usize; 3], roi: [usize; 3]) -> Self {
        Self {
            fov,
            roi,
            inputs: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn fov(&self) -> [usize; 3] {
        self.fov
    }

    pub fn roi(&self) -> [usize; 3] {
        self.roi
    }

    fn fov_len(&self) -> usize {
        self.fov.iter().product()
    }

    fn roi_len(&self) -> usize {
        self.roi.iter().product()
    }

    pub fn push(&mut self, input: &[f32], label: &[bool]) -> Result<()> {
        if input.len() != self.fov_len() || label.len() != self.roi_len() {
            return Err(Error::DimensionMismatch(format!(
                "patch of {} / {} values for fov {:?}, roi {:?}",
                input.len(),
                label.len(),
                self.fov,
                self.roi
            )));
        }
        self.inputs.extend_from_slice(input);
        self.labels.extend_from_slice(label);
        Ok(())
    }

    pub fn extend(&mut self, other: &PatchSet) -> Result<()> {
        if other.fov != self.fov || other.roi != self.roi {
            return Err(Error::DimensionMismatch("patch sets with different geometry".into()));
        }
        self.inputs.extend_from_slice(&other.inputs);
        self.labels.extend_from_slice(&other.labels);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len().checked_div(self.roi_len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input(&self, i: usize) -> &[f32] {
        let n = self.fov_len();
        &self.inputs[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> &[bool] {
        let n = self.roi_len();
        &self.labels[i * n..(i + 1) * n]
    }

    /// Fraction of foreground label voxels.
    pub fn foreground_fraction(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        self.labels.iter().filter(|&&l| l).count() as f64 / self.labels.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Epochs at the exploration learning rate.
    pub epochs: usize,
    pub lr: f64,
    /// Additional epochs at the fine-tuning learning rate.
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 1000,
            epochs: 100,
            lr: 1e-4,
            finetune_epochs: 0,
            finetune_lr: 1e-6,
            dropout: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if self.epochs + self.finetune_epochs == 0 {
            return Err(Error::InvalidArgument("at least one epoch is required".into()));
        }
        if !(self.lr >= 0.0 && self.finetune_lr >= 0.0) {
            return Err(Error::InvalidArgument("learning rates must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-patch masked loss over the epoch.
    pub train_loss: f64,
    pub val_jaccard: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation Jaccard.
    pub params: Params<f32>,
    pub best_epoch: usize,
    pub trace: Vec<EpochRecord>,
}

/// Summed masked loss and gradient of the mean loss over `indices`.
/// `seeds[k]` drives the dropout mask of sample `indices[k]`.
pub fn batch_gradient(
    model: &Model<f32>,
    set: &PatchSet,
    indices: &[usize],
    seeds: &[u64],
) -> Result<(f64, Params<f32>)> {
    if indices.is_empty() || indices.len() != seeds.len() {
        return Err(Error::InvalidArgument("batch needs one seed per sample".into()));
    }
    let scale = 1.0 / indices.len() as f32;
    let chunk_grad = |range: std::ops::Range<usize>| -> Result<(f64, Params<f32>)> {
        let mut grads = model.params().zeros_like();
        let mut loss = 0.0;
        for k in range {
            let i = indices[k];
            let mut rng = ChaCha8Rng::seed_from_u64(seeds[k]);
            let out = model.forward_sample(set.input(i), Mode::Train, &mut rng)?;
            let p_fg: Vec<f32> = out.probs.iter().map(|p| p[1]).collect();
            let ml = masked_cross_entropy(&p_fg, set.label(i))?;
            loss += ml.loss as f64;
            if ml.mask.iter().any(|&m| m) {
                let g: Vec<f32> = ml.grad_logits.iter().map(|&v| v * scale).collect();
                model.backward_sample(out.cache.as_ref().expect("train mode caches"), &g, &mut grads)?;
            }
        }
        Ok((loss, grads))
    };
    let ranges: Vec<_> = (0..indices.len())
        .step_by(CHUNK)
        .map(|s| s..(s + CHUNK).min(indices.len()))
        .collect();
    let mut total = model.params().zeros_like();
    let mut loss = 0.0;
    for group in ranges.chunks(GROUP) {
        let parts: Vec<Result<(f64, Params<f32>)>> = group.par_iter().cloned().map(chunk_grad).collect();
        for part in parts {
            let (l, g) = part?;
            loss += l;
            total.add_assign(&g);
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss is not finite".into()));
    }
    Ok((loss, total))
}

/// Pooled Jaccard index of argmax predictions over a patch set. An empty
/// union counts as perfect agreement.
pub fn evaluate_jaccard(model: &Model<f32>, set: &PatchSet) -> Result<f64> {
    let counts: Vec<Result<[usize; 3]>> = (0..set.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = model.forward_sample(set.input(i), Mode::Eval, &mut rng)?;
            let mut c = [0usize; 3];
            for (p, &y) in out.probs.iter().zip(set.label(i)) {
                let pred = p[1] > p[0];
                match (pred, y) {
                    (true, true) => c[0] += 1,
                    (true, false) => c[1] += 1,
                    (false, true) => c[2] += 1,
                    _ => {}
                }
            }
            Ok(c)
        })
        .collect();
    let mut tot = [0usize; 3];
    for c in counts {
        let c = c?;
        for k in 0..3 {
            tot[k] += c[k];
        }
    }
    let union = tot[0] + tot[1] + tot[2];
    Ok(if union == 0 { 1.0 } else { tot[0] as f64 / union as f64 })
}

pub fn train(spec: &NetSpec, init: Params<f32>, train_set: &PatchSet, val_set: &PatchSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_observed(spec, init, train_set, val_set, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_observed(
    spec: &NetSpec,
    init: Params<f32>,
    train_set: &PatchSet,
    val_set: &PatchSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set has no patches".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Empty("validation set has no patches".into()));
    }
    for set in [train_set, val_set] {
        if set.fov() != spec.fov || set.roi() != spec.roi {
            return Err(Error::DimensionMismatch(format!(
                "patches are {:?}/{:?}, network expects {:?}/{:?}",
                set.fov(),
                set.roi(),
                spec.fov,
                spec.roi
            )));
        }
    }
    let spec = spec.clone().with_dropout(cfg.dropout);
    let mut model = Model::new(spec, init)?;
    let mut adam = AdamState::new(
        model.params(),
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut trace = Vec::new();
    let mut best: Option<(f64, usize, Params<f32>)> = None;
    for epoch in 0..cfg.epochs + cfg.finetune_epochs {
        adam.config.lr = if epoch < cfg.epochs { cfg.lr } else { cfg.finetune_lr };
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
            let (loss, grads) = batch_gradient(&model, train_set, batch, &seeds)?;
            loss_sum += loss;
            adam_step(model.params_mut(), &grads, &mut adam)?;
        }
        let val_jaccard = evaluate_jaccard(&model, val_set)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / train_set.len() as f64,
            val_jaccard,
        };
        on_epoch(&record);
        trace.push(record);
        if best.as_ref().is_none_or(|b| val_jaccard > b.0) {
            best = Some((val_jaccard, epoch + 1, model.params().clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        params,
        best_epoch,
        trace,
    })
}

/// Writes the per-epoch trace as CSV (`epoch,train_loss,val_jaccard`).
pub fn write_trace_csv(path: &Path, trace: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv_at(path, e))?;
    for r in trace {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::arch::{parse_arch, ArchOptions};

    fn tiny() -> NetSpec {
        let opts = ArchOptions {
            fov: [5, 5, 3],
            roi: [3, 3, 1],
            channels_early: 4,
            channels_late: 4,
            hidden_width: 8,
            dropout: 0.5,
        };
        parse_arch("C 3x3x3 - NN", &opts).unwrap()
    }

    fn toy_set(n: usize, seed: u64) -> PatchSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = PatchSet::new([5, 5, 3], [3, 3, 1]);
        for _ in 0..n {
            let bright = rng.random::<bool>();
            let input: Vec<f32> = (0..75)
                .map(|_| if bright { 0.8 } else { 0.1 } + rng.random::<f32>() * 0.1)
                .collect();
            set.push(&input, &[bright; 9]).unwrap();
        }
        set
    }

    #[test]
    fn zero_lr_single_batch_keeps_params() {
        let spec = tiny();
        let init = Params::he_init(&spec, 1);
        let cfg = TrainConfig {
            batch_size: 64,
            epochs: 1,
            lr: 0.0,
            ..TrainConfig::default()
        };
        let out = train(&spec, init.clone(), &toy_set(20, 1), &toy_set(8, 2), &cfg).unwrap();
        assert_eq!(out.params, init);
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn seeded_training_is_reproducible_and_learns() {
        let spec = tiny();
        let cfg = TrainConfig {
            batch_size: 20,
            epochs: 30,
            lr: 3e-3,
            dropout: 0.2,
            seed: 9,
            ..TrainConfig::default()
        };
        let (tr, va) = (toy_set(60, 3), toy_set(20, 4));
        let a = train(&spec, Params::he_init(&spec, 2), &tr, &va, &cfg).unwrap();
        let b = train(&spec, Params::he_init(&spec, 2), &tr, &va, &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.params, b.params);
        let best = a.trace.iter().map(|r| r.val_jaccard).fold(0.0, f64::max);
        assert!(best > 0.9, "best val jaccard {best}");
        assert_eq!(a.trace[a.best_epoch - 1].val_jaccard, best);
    }

    #[test]
    fn all_true_negative_batch_has_zero_gradient() {
        let spec = tiny();
        let mut params = Params::<f32>::he_init(&spec, 5);
        // bias the output strongly towards background
        let out_bias = params.arrays.iter_mut().find(|a| a.name == "output.bias").unwrap();
        for (k, b) in out_bias.data.iter_mut().enumerate() {
            *b = if k % 2 == 0 { 50.0 } else { -50.0 };
        }
        let model = Model::new(spec, params).unwrap();
        let mut set = PatchSet::new([5, 5, 3], [3, 3, 1]);
        set.push(&[0.2; 75], &[false; 9]).unwrap();
        set.push(&[0.4; 75], &[false; 9]).unwrap();
        let (loss, g) = batch_gradient(&model, &set, &[0, 1], &[1, 2]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.arrays.iter().all(|a| a.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn chunked_gradient_matches_single_pass() {
        let spec = tiny();
        let params = Params::<f32>::he_init(&spec, 4);
        let model = Model::new(spec, params).unwrap();
        let set = toy_set(40, 6);
        let idx: Vec<usize> = (0..40).collect();
        let seeds: Vec<u64> = (100..140).collect();
        let (l_all, g_all) = batch_gradient(&model, &set, &idx, &seeds).unwrap();
        let mut l_sum = 0.0;
        let mut sum = model.params().zeros_like();
        for k in 0..40 {
            let (l, g) = batch_gradient(&model, &set, &idx[k..k + 1], &seeds[k..k + 1]).unwrap();
            l_sum += l;
            sum.add_assign(&g);
        }
        assert!((l_all - l_sum).abs() < 1e-4);
        for (a, b) in g_all.arrays.iter().zip(&sum.arrays) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y / 40.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn rejects_empty_and_mismatched_sets() {
        let spec = tiny();
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let empty = PatchSet::new([5, 5, 3], [3, 3, 1]);
        assert!(train(&spec, Params::he_init(&spec, 0), &empty, &toy_set(2, 0), &cfg).is_err());
        let other = PatchSet::new([7, 7, 3], [3, 3, 1]);
        assert!(train(&spec, Params::he_init(&spec, 0), &toy_set(2, 0), &other, &cfg).is_err());
    }

    #[test]
    fn trace_csv_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let trace = [EpochRecord {
            epoch: 1,
            train_loss: 0.5,
            val_jaccard: 0.25,
        }];
        write_trace_csv(&path, &trace).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "epoch,train_loss,val_jaccard");
        assert_eq!(text.lines().nth(1).unwrap(), "1,0.5,0.25");
    }
}
