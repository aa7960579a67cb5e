//! Mini-batch gradient descent with global-norm clipping.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{composite_loss_and_grad, LossBreakdown, WeightTriple};
use crate::model::{Gradients, ModelParams, ProbDist};

/// One training example with its loss weighting.
#[derive(Clone, Copy, Debug)]
pub struct TrainItem<'a> {
    pub features: &'a [f64],
    pub label: usize,
    pub teacher: Option<&'a ProbDist>,
    pub weights: WeightTriple,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub max_grad_norm: Option<f64>,
    pub batch_size: usize,
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean per-sample weighted loss of each epoch.
    pub loss_trace: Vec<f64>,
}

/// Independent random streams, one per (role, fold).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    TeacherInit = 1,
    TeacherTrain = 2,
    StudentInit = 3,
    StudentTrain = 4,
    StageTwo = 5,
}

pub fn fold_rng(seed: u64, stream: Stream, fold: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 32) | fold as u64);
    rng
}

/// Loss of one item under `params`.
pub fn sample_loss(params: &ModelParams, item: &TrainItem<'_>, tau: f64) -> Result<LossBreakdown> {
    let logits = params.forward(item.features)?;
    composite_loss_and_grad(&logits, item.label, item.teacher, &item.weights, tau).map(|(l, _)| l)
}

/// Loss of one item and its gradient with respect to every parameter.
pub fn sample_gradient(
    params: &ModelParams,
    item: &TrainItem<'_>,
    tau: f64,
) -> Result<(LossBreakdown, Gradients)> {
    let mut grads = params.zeros_like();
    let loss = accumulate_item(params, item, tau, 1.0, &mut grads)?;
    Ok((loss, grads))
}

fn accumulate_item(
    params: &ModelParams,
    item: &TrainItem<'_>,
    tau: f64,
    scale: f64,
    grads: &mut Gradients,
) -> Result<LossBreakdown> {
    if item.features.len() != params.num_features() {
        return Err(Error::InvalidInput(format!(
            "{} features, model expects {}",
            item.features.len(),
            params.num_features()
        )));
    }
    // With matching, finite inputs the only way to get bad logits is blown-up parameters.
    let logits = params.forward(item.features).map_err(|e| match e {
        Error::InvalidInput(msg) => Error::Divergence(format!("forward pass: {msg}")),
        other => other,
    })?;
    let (loss, dz) = composite_loss_and_grad(&logits, item.label, item.teacher, &item.weights, tau)?;
    params.accumulate_backward(item.features, &dz, scale, grads)?;
    Ok(loss)
}

/// Mean weighted loss and mean gradient over a batch.
pub fn batch_gradient(
    params: &ModelParams,
    batch: &[&TrainItem<'_>],
    tau: f64,
) -> Result<(f64, Gradients)> {
    let mut grads = params.zeros_like();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for item in batch {
        total += accumulate_item(params, item, tau, scale, &mut grads)?.total;
    }
    Ok((total * scale, grads))
}

fn validate_options(opts: &TrainOptions) -> Result<()> {
    if opts.batch_size == 0 {
        return Err(Error::InvalidParameter("batch size must be positive".into()));
    }
    if !(opts.lr > 0.0 && opts.lr.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "learning rate must be positive, got {}",
            opts.lr
        )));
    }
    if !(opts.tau > 0.0 && opts.tau.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive, got {}",
            opts.tau
        )));
    }
    Ok(())
}

/// `epochs` passes over `items` in freshly shuffled mini-batches.
pub fn train_single<R: Rng + ?Sized>(
    mut params: ModelParams,
    items: &[TrainItem<'_>],
    opts: &TrainOptions,
    rng: &mut R,
) -> Result<TrainOutcome> {
    if items.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    validate_options(opts)?;
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut loss_trace = Vec::with_capacity(opts.epochs);
    let mut step = 0usize;
    for epoch in 0..opts.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<&TrainItem<'_>> = chunk.iter().map(|&i| &items[i]).collect();
            let (loss, grads) = batch_gradient(&params, &batch, opts.tau)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "epoch {epoch}, step {step}: loss is {loss}"
                )));
            }
            params
                .apply_update_in_place(&grads, opts.lr, opts.max_grad_norm)
                .map_err(|e| match e {
                    Error::Divergence(msg) => {
                        Error::Divergence(format!("epoch {epoch}, step {step}: {msg}"))
                    }
                    other => other,
                })?;
            epoch_loss += loss * chunk.len() as f64;
            step += 1;
        }
        loss_trace.push(epoch_loss / items.len() as f64);
    }
    Ok(TrainOutcome { params, loss_trace })
}
