//! Selective backpropagation training.
//!
//! Every decoder learns from its own reconstruction loss; the shared encoder
//! only receives the gradient flowing back through the decoder with the
//! smallest loss on the current batch. One optimizer step then updates all
//! parameters together.

mod checkpoint;

use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;

use crate::data::{batch_order, SliceSet};
use crate::error::{contract_err, Error, Result};
use crate::graph::{DecoderGrads, Mode, ParamRegistry};
use crate::metrics::{float_str, psnr};
use crate::model::MergedAutoencoder;
use crate::tensor::{mse, Scalar, Tensor4};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            decay_factor: 0.9,
            decay_every: 20,
            epochs: 500,
            batch_size: 8,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return contract_err(format!("lr0 {} must be positive", self.lr0));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return contract_err(format!(
                "decay factor {} must lie in (0, 1]",
                self.decay_factor
            ));
        }
        if self.decay_every == 0 {
            return contract_err("decay_every must be at least 1");
        }
        if self.batch_size == 0 {
            return contract_err("batch size must be at least 1");
        }
        Ok(())
    }
}

/// `lr0 * decay_factor ^ floor(epoch / decay_every)`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr0 * cfg.decay_factor.powi((epoch / cfg.decay_every) as i32)
}

/// Index of the smallest loss, lowest index on ties. A non-finite loss is
/// an error naming the first offending decoder.
pub fn select_decoder(losses: &[f64]) -> Result<usize> {
    if losses.is_empty() {
        return contract_err("no decoder losses to select from");
    }
    if let Some((i, &v)) = losses.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFiniteLoss {
            decoder: i,
            value: v,
            epoch: 0,
            batch: 0,
        });
    }
    let mut best = 0;
    for (i, &v) in losses.iter().enumerate().skip(1) {
        if v < losses[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Adam with one step counter shared by all parameters.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(reg: &ParamRegistry<T>) -> Self {
        let zeros = || {
            reg.iter()
                .map(|(_, p)| vec![T::zero(); p.value.len()])
                .collect::<Vec<_>>()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, reg: &mut ParamRegistry<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let bc1 = T::from_f64_lossy(1.0 - self.beta1.powi(t));
        let bc2 = T::from_f64_lossy(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::from_f64_lossy(lr), T::from_f64_lossy(self.eps));
        for ((p, m), v) in reg.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let g = p.grad.data();
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + c1 * g;
                *v = b2 * *v + c2 * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Per-decoder losses of one batch and the decoder that drove the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub losses: Vec<f64>,
    pub selected: usize,
}

/// Forward, loss, routing and backward for one batch, leaving fresh
/// gradients in the registry. Batch-norm running statistics are updated.
pub fn compute_gradients<T: Scalar>(
    model: &mut MergedAutoencoder<T>,
    lf: &Tensor4<T>,
    hf: &Tensor4<T>,
) -> Result<StepOutcome> {
    let out = model.forward_all(lf, Mode::Train)?;
    let mut losses = Vec::with_capacity(out.outputs.len());
    let mut loss_caches = Vec::with_capacity(out.outputs.len());
    for y in &out.outputs {
        let (l, c) = mse(y, hf)?;
        losses.push(l);
        loss_caches.push(c);
    }
    let selected = select_decoder(&losses)?;
    model.absorb_batch_stats(&out.cache);
    model.registry_mut().zero_grads();
    let mut routed: Option<DecoderGrads<T>> = None;
    for (i, (dc, lc)) in out.cache.decoders.into_iter().zip(loss_caches).enumerate() {
        let g = lc.backward(1.0)?;
        let grads = model.backward_decoder(i, dc, &g)?;
        if i == selected {
            routed = Some(grads);
        }
    }
    model.backward_encoder(
        out.cache.encoder,
        routed.expect("selected index is in range"),
    )?;
    Ok(StepOutcome { losses, selected })
}

pub fn train_batch<T: Scalar>(
    model: &mut MergedAutoencoder<T>,
    opt: &mut Adam<T>,
    lf: &Tensor4<T>,
    hf: &Tensor4<T>,
    lr: f64,
) -> Result<StepOutcome> {
    let outcome = compute_gradients(model, lf, hf)?;
    opt.step(model.registry_mut(), lr);
    Ok(outcome)
}

/// Averaged-decoder predictions for every slice, cropped to the original
/// slice dims.
pub fn predict_slices(
    model: &MergedAutoencoder<f32>,
    set: &SliceSet,
    chunk: usize,
) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(set.len());
    for ix in batch_order(set.len(), chunk.max(1), None)? {
        let b = set.batch(&ix)?;
        let y = model.predict_average(&b.lf)?;
        for n in 0..ix.len() {
            out.push(set.crop(y.sample(n)));
        }
    }
    Ok(out)
}

/// Per-slice PSNR (data range 1) of the averaged prediction against HF.
pub fn slice_psnrs(model: &MergedAutoencoder<f32>, set: &SliceSet) -> Result<Vec<f64>> {
    if set.is_empty() {
        return contract_err("validation set is empty");
    }
    predict_slices(model, set, 16)?
        .iter()
        .zip(&set.hf)
        .map(|(p, t)| psnr(p, &set.crop(t), 1.0))
        .collect()
}

/// Mean per-slice PSNR of the averaged prediction.
pub fn validate(model: &MergedAutoencoder<f32>, set: &SliceSet) -> Result<f64> {
    let v = slice_psnrs(model, set)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Slice-weighted mean loss of each decoder over the epoch.
    pub losses: Vec<f64>,
    /// Batches on which each decoder had the minimum loss.
    pub selections: Vec<usize>,
    #[serde(with = "float_str")]
    pub val_psnr: f64,
}

#[derive(Debug)]
pub struct FitOutcome {
    /// Highest-validation-PSNR snapshot; `None` only if the first epoch
    /// aborted.
    pub best: Option<Checkpoint>,
    pub history: Vec<EpochRecord>,
    /// Set when training stopped on a non-finite loss.
    pub abort: Option<Error>,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains for `cfg.epochs`, validating after every epoch and keeping the
/// best model. `on_epoch` sees each record and, when it improved, the new
/// best checkpoint.
pub fn fit(
    model: &mut MergedAutoencoder<f32>,
    train: &SliceSet,
    val: &SliceSet,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord, Option<&Checkpoint>) -> Result<()>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return contract_err("training and validation sets must be non-empty");
    }
    let d = model.num_decoders();
    let mut opt = Adam::new(model.registry());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<Checkpoint> = None;
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch);
        let seed = cfg.shuffle.then(|| epoch_seed(cfg.seed, epoch));
        let mut sums = vec![0.0; d];
        let mut selections = vec![0usize; d];
        for (bi, ix) in batch_order(train.len(), cfg.batch_size, seed)?
            .iter()
            .enumerate()
        {
            let b = train.batch(ix)?;
            match train_batch(model, &mut opt, &b.lf, &b.hf, lr) {
                Ok(o) => {
                    for (s, l) in sums.iter_mut().zip(&o.losses) {
                        *s += l * ix.len() as f64;
                    }
                    selections[o.selected] += 1;
                }
                Err(Error::NonFiniteLoss { decoder, value, .. }) => {
                    let err = Error::NonFiniteLoss {
                        decoder,
                        value,
                        epoch,
                        batch: bi,
                    };
                    log::error!("{err}; keeping the best checkpoint so far");
                    return Ok(FitOutcome {
                        best,
                        history,
                        abort: Some(err),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        let val_psnr = validate(model, val)?;
        let rec = EpochRecord {
            epoch,
            lr,
            losses: sums.iter().map(|s| s / train.len() as f64).collect(),
            selections,
            val_psnr,
        };
        log::info!(
            "epoch {epoch} lr {lr:.3e} losses {:?} selections {:?} val PSNR {val_psnr:.3}",
            rec.losses,
            rec.selections
        );
        let improved = best.as_ref().is_none_or(|b| val_psnr > b.val_psnr);
        if improved {
            best = Some(Checkpoint {
                model: model.clone(),
                epoch,
                val_psnr,
            });
        }
        on_epoch(&rec, if improved { best.as_ref() } else { None })?;
        history.push(rec);
    }
    Ok(FitOutcome {
        best,
        history,
        abort: None,
    })
}

/// `epoch,lr,loss_d0..,sel_d0..,val_psnr`, one row per epoch.
pub fn history_csv(history: &[EpochRecord], decoders: usize) -> String {
    let mut out = String::from("epoch,lr");
    for i in 0..decoders {
        out.push_str(&format!(",loss_d{i}"));
    }
    for i in 0..decoders {
        out.push_str(&format!(",sel_d{i}"));
    }
    out.push_str(",val_psnr\n");
    for r in history {
        out.push_str(&format!("{},{}", r.epoch, r.lr));
        for l in &r.losses {
            out.push_str(&format!(",{l}"));
        }
        for s in &r.selections {
            out.push_str(&format!(",{s}"));
        }
        out.push_str(&format!(",{}\n", float_str::display(r.val_psnr)));
    }
    out
}
