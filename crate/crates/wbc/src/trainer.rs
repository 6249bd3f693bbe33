//! Mini-batch SGD with classical momentum, weight decay folded into the
//! gradient, and a halving learning-rate schedule. Batches are built as
//! P identities × K images; everything is seeded and deterministic.

use std::io::Write;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::dataio::{Dataset, Split};
use crate::error::{Error, Result};
use crate::loss::{batch_loss_over, mine_triplets, subsample_triplets, LossConfig};
use crate::model::{backward, forward, ModelConfig, ModelGrads, ModelParams};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct SGDConfig {
    pub initial_lr: f64,
    /// The learning rate is divided by 2 every `halve_period` iterations.
    pub halve_period: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Images per identity within a batch (`K`); `P = batch_size / K`.
    pub k_images: usize,
    pub max_iters: u64,
    /// Triplet ranking margin α.
    pub margin: f64,
    /// Cap on mined triplets per batch; the excess is subsampled, seeded.
    pub triplet_cap: usize,
    pub seed: u64,
}

impl Default for SGDConfig {
    fn default() -> Self {
        Self {
            initial_lr: 0.008,
            halve_period: 4000,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 300,
            k_images: 4,
            max_iters: 16000,
            margin: 0.2,
            triplet_cap: 400_000,
            seed: 0,
        }
    }
}

impl SGDConfig {
    /// Small defaults that finish in seconds: batch 32 (8 identities × 4
    /// images), halving every 200 iterations, 500 iterations total.
    pub fn desk_scale() -> Self {
        Self {
            batch_size: 32,
            halve_period: 200,
            max_iters: 500,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0) {
            return Err(Error::config("initial_lr must be positive".to_string()));
        }
        if self.halve_period == 0 {
            return Err(Error::config("halve_period must be at least 1".to_string()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)".to_string()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be non-negative".to_string()));
        }
        if self.margin < 0.0 {
            return Err(Error::config("margin must be non-negative".to_string()));
        }
        if self.k_images < 2 {
            return Err(Error::config(
                "k_images must be at least 2 (positives need a pair)".to_string(),
            ));
        }
        if self.batch_size == 0 || self.batch_size % self.k_images != 0 {
            return Err(Error::config(format!(
                "batch_size {} must be a positive multiple of k_images {}",
                self.batch_size, self.k_images
            )));
        }
        if self.batch_size / self.k_images < 2 {
            return Err(Error::config(
                "batches need at least two identities for triplets".to_string(),
            ));
        }
        if self.triplet_cap == 0 {
            return Err(Error::config("triplet_cap must be positive".to_string()));
        }
        Ok(())
    }

    pub fn identities_per_batch(&self) -> usize {
        self.batch_size / self.k_images
    }
}

/// Optimizer state: iteration counter, per-block velocity buffers (in block
/// order), and the RNG stream driving batch construction and subsampling.
#[derive(Clone, Debug)]
pub struct TrainState<F> {
    pub iteration: u64,
    velocities: Vec<Vec<F>>,
    pub rng: ChaCha8Rng,
}

impl<F: Scalar> TrainState<F> {
    pub fn new(params: &ModelParams<F>, seed: u64) -> Self {
        Self {
            iteration: 0,
            velocities: params
                .blocks()
                .iter()
                .map(|(_, b)| vec![F::zero(); b.len()])
                .collect(),
            rng: <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed),
        }
    }
}

/// `initial_lr / 2^⌊iter / halve_period⌋`.
pub fn lr_schedule(iter: u64, cfg: &SGDConfig) -> f64 {
    let halvings = (iter / cfg.halve_period) as i32;
    cfg.initial_lr * 0.5f64.powi(halvings)
}

/// One parameter update: `v ← momentum·v − lr·(g + weight_decay·θ)`,
/// `θ ← θ + v`. Advances the iteration counter.
pub fn sgd_step<F: Scalar>(
    params: &mut ModelParams<F>,
    grads: &ModelGrads<F>,
    state: &mut TrainState<F>,
    cfg: &SGDConfig,
) -> Result<()> {
    let lr = F::from_f64(lr_schedule(state.iteration, cfg));
    let momentum = F::from_f64(cfg.momentum);
    let decay = F::from_f64(cfg.weight_decay);

    let grad_blocks = grads.blocks();
    let param_blocks = params.blocks_mut();
    if grad_blocks.len() != param_blocks.len() || param_blocks.len() != state.velocities.len() {
        return Err(Error::dimension(format!(
            "block counts differ: {} params, {} grads, {} velocities",
            param_blocks.len(),
            grad_blocks.len(),
            state.velocities.len()
        )));
    }
    for (((p_name, theta), (g_name, g)), v) in param_blocks
        .into_iter()
        .zip(grad_blocks)
        .zip(&mut state.velocities)
    {
        if p_name != g_name || theta.len() != g.len() || theta.len() != v.len() {
            return Err(Error::dimension(format!(
                "block {p_name} does not line up with gradient block {g_name}"
            )));
        }
        for i in 0..theta.len() {
            v[i] = momentum * v[i] - lr * (g[i] + decay * theta[i]);
            theta[i] += v[i];
        }
    }
    state.iteration += 1;
    Ok(())
}

/// One epoch of P×K batches over `labels` (a label per dataset index in
/// `indices`), sampled without replacement. Identities contribute
/// ⌊n_id / K⌋ chunks; leftover images are dropped for that epoch.
pub fn make_batches(
    indices: &[usize],
    labels: &[usize],
    cfg: &SGDConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    if indices.len() != labels.len() {
        return Err(Error::dimension(format!(
            "{} indices vs {} labels",
            indices.len(),
            labels.len()
        )));
    }
    let p = cfg.identities_per_batch();
    let k = cfg.k_images;

    let max_label = labels.iter().copied().max().unwrap_or(0);
    let mut per_identity: Vec<Vec<usize>> = vec![Vec::new(); max_label + 1];
    for (&idx, &label) in indices.iter().zip(labels) {
        per_identity[label].push(idx);
    }

    let eligible = per_identity.iter().filter(|v| v.len() >= k).count();
    if eligible < 2 {
        return Err(Error::config(format!(
            "P×K batching needs at least two identities with ≥ {k} images, found {eligible}"
        )));
    }

    // Chunk each identity's shuffled images into groups of K.
    let mut chunks: Vec<(usize, Vec<usize>)> = Vec::new();
    for (label, images) in per_identity.iter_mut().enumerate() {
        images.shuffle(rng);
        for chunk in images.chunks_exact(k) {
            chunks.push((label, chunk.to_vec()));
        }
    }
    if chunks.len() < p {
        return Err(Error::config(format!(
            "dataset yields {} P×K chunks per epoch, batches need {p}",
            chunks.len()
        )));
    }
    chunks.shuffle(rng);

    // Greedily fill batches, preferring distinct identities.
    let mut batches = Vec::new();
    while chunks.len() >= p {
        let mut batch_labels: Vec<usize> = Vec::with_capacity(p);
        let mut batch = Vec::with_capacity(p * k);
        let mut remaining: Vec<(usize, Vec<usize>)> = Vec::new();
        for (label, chunk) in chunks.drain(..) {
            if batch_labels.len() < p && !batch_labels.contains(&label) {
                batch_labels.push(label);
                batch.extend(chunk);
            } else {
                remaining.push((label, chunk));
            }
        }
        // Backfill with duplicate identities when distinct ones ran out.
        while batch_labels.len() < p {
            let (label, chunk) = remaining.remove(0);
            batch_labels.push(label);
            batch.extend(chunk);
        }
        if batch_labels.iter().collect::<std::collections::BTreeSet<_>>().len() < 2 {
            // A batch without a negative identity mines no triplets; stop
            // packing rather than emit it.
            break;
        }
        chunks = remaining;
        batches.push(batch);
    }
    if batches.is_empty() {
        return Err(Error::config("no viable P×K batch could be formed".to_string()));
    }
    Ok(batches)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub iter: u64,
    pub lr: f64,
    pub loss: f64,
    pub active_frac: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "iter,lr,loss,active_frac")?;
        for r in &self.records {
            writeln!(w, "{},{},{},{}", r.iter, r.lr, r.loss, r.active_frac)?;
        }
        Ok(())
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }
}

/// Train on the dataset's train split: forward the batch, average the
/// triplet hinge over mined triplets, backpropagate, and update with SGD.
/// Fully deterministic given the config seeds.
pub fn train<F: Scalar>(
    dataset: &Dataset<F>,
    model_cfg: &ModelConfig,
    sgd_cfg: &SGDConfig,
) -> Result<(ModelParams<F>, TrainLog)> {
    sgd_cfg.validate()?;
    let mut params = ModelParams::init(model_cfg)?;
    let mut state = TrainState::new(&params, sgd_cfg.seed);
    let mut log = TrainLog::default();

    let train_indices = dataset.indices(Split::Train);
    if train_indices.is_empty() {
        return Err(Error::config("dataset has no train split".to_string()));
    }
    let labels = dataset.labels(&train_indices);
    let loss_cfg = LossConfig {
        margin: F::from_f64(sgd_cfg.margin),
    };

    'outer: loop {
        let batches = make_batches(&train_indices, &labels, sgd_cfg, &mut state.rng)?;
        for batch in batches {
            if state.iteration >= sgd_cfg.max_iters {
                break 'outer;
            }
            let lr = lr_schedule(state.iteration, sgd_cfg);

            let mut features = Vec::with_capacity(batch.len());
            let mut caches = Vec::with_capacity(batch.len());
            for &idx in &batch {
                let (feature, cache) = forward(&dataset.samples[idx], &params)?;
                features.push(feature);
                caches.push(cache);
            }
            let batch_labels: Vec<usize> =
                batch.iter().map(|&i| dataset.samples[i].label).collect();
            let mut triplets = mine_triplets(&batch_labels);
            if triplets.len() > sgd_cfg.triplet_cap {
                triplets = subsample_triplets(triplets, sgd_cfg.triplet_cap, &mut state.rng);
            }
            let batch_out = batch_loss_over(&features, &triplets, &loss_cfg)?;
            let loss = batch_out.loss.as_f64();
            if !loss.is_finite() {
                return Err(non_finite_diagnostic(state.iteration, &params));
            }

            let mut grads = ModelGrads::zeros_like(&params);
            for (i, cache) in caches.iter().enumerate() {
                let sample_grads = backward(&params, cache, &batch_out.d_features[i])?;
                grads.accumulate(&sample_grads)?;
            }
            sgd_step(&mut params, &grads, &mut state, sgd_cfg)?;
            log.records.push(TrainRecord {
                iter: state.iteration - 1,
                lr,
                loss,
                active_frac: batch_out.active_fraction(),
            });
        }
        if state.iteration >= sgd_cfg.max_iters {
            break;
        }
    }
    Ok((params, log))
}

fn non_finite_diagnostic<F: Scalar>(iteration: u64, params: &ModelParams<F>) -> Error {
    for (name, block) in params.blocks() {
        if block.iter().any(|v| !v.is_finite()) {
            return Error::NonFiniteLoss {
                iteration,
                detail: format!("first non-finite parameter block: {name}"),
            };
        }
    }
    Error::NonFiniteLoss {
        iteration,
        detail: "parameters finite; loss overflowed during evaluation".to_string(),
    }
}
