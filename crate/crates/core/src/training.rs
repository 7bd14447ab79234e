//! Composite segmentation/classification loss, AdamW, cosine annealing and
//! the epoch loop with best-validation checkpoint selection.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use log::{debug, info};
use rand::seq::SliceRandom;

use crate::autodiff::{sigmoid, CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::model::EdgeDoc;
use crate::nn::ParamBundle;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_mask: f32,
    pub dice_epsilon: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_mask: 3.0,
            dice_epsilon: 1.0,
        }
    }
}

impl LossConfig {
    /// `lambda_mask = 0` is accepted: it switches the mask term off.
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_mask >= 0.0 && self.lambda_mask.is_finite()) {
            return Err(Error::Config(format!("lambda_mask must be >= 0, got {}", self.lambda_mask)));
        }
        if !(self.dice_epsilon > 0.0 && self.dice_epsilon.is_finite()) {
            return Err(Error::Config(format!("dice_epsilon must be > 0, got {}", self.dice_epsilon)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr0: f64,
    pub weight_decay: f32,
    pub betas: (f32, f32),
    pub eps: f32,
    pub epochs: u32,
    pub batch_size: usize,
    pub eta_min: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr0: 3e-4,
            weight_decay: 5e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            epochs: 20,
            batch_size: 1,
            eta_min: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be > 0, got {}", self.lr0));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be > 0, got {}", self.eps));
        }
        if !(self.eta_min >= 0.0 && self.eta_min <= self.lr0) {
            return bad(format!("eta_min must lie in [0, lr0], got {}", self.eta_min));
        }
        Ok(())
    }
}

/// Numerically stable binary cross-entropy on logits, averaged over all
/// elements: `max(z, 0) - z·y + ln(1 + e^-|z|)`.
#[derive(Debug)]
struct BceWithLogits;

impl CustomOp for BceWithLogits {
    fn name(&self) -> &'static str {
        "bce_logits"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (z, y) = (inputs[0], inputs[1]);
        let sum: f64 = z
            .data()
            .iter()
            .zip(y.data())
            .map(|(&z, &y)| {
                let (z, y) = (z as f64, y as f64);
                z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
            })
            .sum();
        Ok(Tensor::scalar((sum / z.numel() as f64) as f32))
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, gy: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let (z, y) = (inputs[0], inputs[1]);
        let scale = gy[0] / z.numel() as f32;
        vec![
            needs[0].then(|| {
                z.data()
                    .iter()
                    .zip(y.data())
                    .map(|(&z, &y)| (sigmoid(z) - y) * scale)
                    .collect()
            }),
            needs[1].then(|| z.data().iter().map(|&z| -z * scale).collect()),
        ]
    }
}

/// Soft Dice on logits: per batch item `1 - (2Σpy + ε) / (Σp + Σy + ε)` with
/// `p = σ(z)`, averaged over the batch.
#[derive(Debug)]
struct SoftDice {
    epsilon: f64,
}

struct DiceSums {
    inter: f64,
    denom: f64,
}

impl SoftDice {
    fn sums(&self, z: &[f32], y: &[f32]) -> DiceSums {
        let (mut inter, mut ps, mut ys) = (0.0f64, 0.0f64, 0.0f64);
        for (&z, &y) in z.iter().zip(y) {
            let p = sigmoid(z) as f64;
            inter += p * y as f64;
            ps += p;
            ys += y as f64;
        }
        DiceSums {
            inter,
            denom: ps + ys + self.epsilon,
        }
    }
}

impl CustomOp for SoftDice {
    fn name(&self) -> &'static str {
        "dice_loss"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (z, y) = (inputs[0], inputs[1]);
        let batch = z.shape()[0];
        let per = z.numel() / batch;
        let total: f64 = z
            .data()
            .chunks_exact(per)
            .zip(y.data().chunks_exact(per))
            .map(|(zb, yb)| {
                let s = self.sums(zb, yb);
                1.0 - (2.0 * s.inter + self.epsilon) / s.denom
            })
            .sum();
        Ok(Tensor::scalar((total / batch as f64) as f32))
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, gy: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let (z, y) = (inputs[0], inputs[1]);
        let batch = z.shape()[0];
        let per = z.numel() / batch;
        let scale = gy[0] as f64 / batch as f64;
        let mut dz = needs[0].then(|| vec![0.0f32; z.numel()]);
        let mut dy = needs[1].then(|| vec![0.0f32; y.numel()]);
        for b in 0..batch {
            let zb = &z.data()[b * per..(b + 1) * per];
            let yb = &y.data()[b * per..(b + 1) * per];
            let s = self.sums(zb, yb);
            let num = 2.0 * s.inter + self.epsilon;
            let d2 = s.denom * s.denom;
            if let Some(dz) = dz.as_mut() {
                for i in 0..per {
                    let p = sigmoid(zb[i]) as f64;
                    let dp = -(2.0 * yb[i] as f64 * s.denom - num) / d2;
                    dz[b * per + i] = (dp * p * (1.0 - p) * scale) as f32;
                }
            }
            if let Some(dy) = dy.as_mut() {
                for i in 0..per {
                    let p = sigmoid(zb[i]) as f64;
                    dy[b * per + i] = (-(2.0 * p * s.denom - num) / d2 * scale) as f32;
                }
            }
        }
        vec![dz, dy]
    }
}

fn check_pair(g: &Graph, op: &'static str, z: Var, y: Var) -> Result<()> {
    if g.shape(z) != g.shape(y) {
        return Err(Error::shape(op, g.shape(z), g.shape(y)));
    }
    Ok(())
}

pub fn bce_logits(g: &mut Graph, z: Var, y: Var) -> Result<Var> {
    check_pair(g, "bce_logits", z, y)?;
    g.custom(Box::new(BceWithLogits), &[z, y])
}

/// Sums run over every pixel of a batch item (dim 0 is the batch).
pub fn dice_loss(g: &mut Graph, z: Var, y: Var, epsilon: f32) -> Result<Var> {
    check_pair(g, "dice_loss", z, y)?;
    if epsilon <= 0.0 {
        return Err(Error::Config(format!("dice epsilon must be > 0, got {epsilon}")));
    }
    g.custom(Box::new(SoftDice { epsilon: epsilon as f64 }), &[z, y])
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub cls: Var,
    pub mask: Var,
}

/// `total = BCE(cls) + λ · (BCE(mask) + Dice(mask))`.
pub fn total_loss(
    g: &mut Graph,
    cls_logit: Var,
    mask_logit: Var,
    y_cls: Var,
    y_mask: Var,
    cfg: &LossConfig,
) -> Result<LossParts> {
    let cls = bce_logits(g, cls_logit, y_cls)?;
    let mask_bce = bce_logits(g, mask_logit, y_mask)?;
    let dice = dice_loss(g, mask_logit, y_mask, cfg.dice_epsilon)?;
    let mask = g.add(mask_bce, dice)?;
    let weighted = g.scale(mask, cfg.lambda_mask)?;
    let total = g.add(cls, weighted)?;
    Ok(LossParts { total, cls, mask })
}

/// The scalar form of [`total_loss`]'s combination step, with the same f32
/// rounding.
pub fn combine_loss(cls: f32, mask: f32, lambda_mask: f32) -> f32 {
    cls + lambda_mask * mask
}

/// Learning rate at the start of `epoch`:
/// `eta_min + ½(lr0 - eta_min)(1 + cos(π·epoch/epochs))`.
pub fn cosine_lr(epoch: u32, cfg: &OptimConfig) -> Result<f64> {
    if epoch > cfg.epochs {
        return Err(Error::Contract(format!("epoch {epoch} beyond schedule length {}", cfg.epochs)));
    }
    let t = epoch as f64 / cfg.epochs as f64;
    Ok(cfg.eta_min + 0.5 * (cfg.lr0 - cfg.eta_min) * (1.0 + (PI * t).cos()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub first: Vec<f32>,
    pub second: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u32,
    pub moments: BTreeMap<String, Moments>,
    pub best_val_loss: f32,
    pub rng_seed: u64,
}

impl TrainState {
    pub fn new(params: &ParamBundle, rng_seed: u64) -> Self {
        let moments = params
            .iter()
            .map(|(name, t)| {
                (
                    name.clone(),
                    Moments {
                        first: vec![0.0; t.numel()],
                        second: vec![0.0; t.numel()],
                    },
                )
            })
            .collect();
        TrainState {
            step: 0,
            epoch: 0,
            moments,
            best_val_loss: f32::INFINITY,
            rng_seed,
        }
    }
}

/// One decoupled-weight-decay Adam update using the gradients stored on the
/// bundle's tensors. Increments `state.step` first, so the first call uses
/// bias correction for step 1.
pub fn adamw_step(params: &mut ParamBundle, state: &mut TrainState, lr: f32, cfg: &OptimConfig) -> Result<()> {
    state.step += 1;
    let (b1, b2) = cfg.betas;
    let bc1 = (1.0 - (b1 as f64).powi(state.step as i32)) as f32;
    let bc2 = (1.0 - (b2 as f64).powi(state.step as i32)) as f32;
    for (name, t) in params.iter_mut() {
        let grad = t
            .grad()
            .ok_or_else(|| Error::Contract(format!("adamw_step: parameter {name} has no gradient")))?
            .to_vec();
        let mom = state
            .moments
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("adamw_step: no optimizer state for {name}")))?;
        if mom.first.len() != grad.len() {
            return Err(Error::shape("adamw_step", &[mom.first.len()], &[grad.len()]));
        }
        let theta = t.data_mut();
        for i in 0..theta.len() {
            let g = grad[i];
            let m = b1 * mom.first[i] + (1.0 - b1) * g;
            let v = b2 * mom.second[i] + (1.0 - b2) * g * g;
            mom.first[i] = m;
            mom.second[i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            theta[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * theta[i]);
        }
    }
    Ok(())
}

/// A fully assembled training example.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub id: String,
    /// 1×2×H×W network input.
    pub input: Tensor,
    /// 1×1×H×W binary mask target.
    pub mask: Tensor,
    /// 0 for bonafide, 1 for attack.
    pub label: f32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub train_cls: f64,
    pub train_mask: f64,
    pub val_cls: f64,
    pub val_mask: f64,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,lr,train_cls,train_mask,val_cls,val_mask";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.val_loss,
            self.lr,
            self.train_cls,
            self.train_mask,
            self.val_cls,
            self.val_mask
        )
    }
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub cls: f64,
    pub mask: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub best: EdgeDoc,
    pub best_epoch: u32,
    pub best_val_loss: f64,
    pub history: Vec<EpochRecord>,
    pub state: TrainState,
}

fn sample_loss(
    model: &EdgeDoc,
    params: &ParamBundle,
    sample: &TrainSample,
    cfg: &LossConfig,
    record: bool,
) -> Result<(LossValues, Option<(Graph, crate::nn::Bound)>)> {
    let mut g = Graph::new();
    let bound = if record { params.bind(&mut g) } else { params.bind_frozen(&mut g) };
    let x = g.constant(sample.input.clone());
    let out = model.forward(&mut g, &bound, x)?;
    let y_cls = g.constant(Tensor::new([1, 1], vec![sample.label])?);
    let y_mask = g.constant(sample.mask.clone());
    let parts = total_loss(&mut g, out.cls_logit, out.mask_logit, y_cls, y_mask, cfg)?;
    let values = LossValues {
        total: g.value(parts.total).item() as f64,
        cls: g.value(parts.cls).item() as f64,
        mask: g.value(parts.mask).item() as f64,
    };
    if record {
        g.backward(parts.total)?;
        Ok((values, Some((g, bound))))
    } else {
        Ok((values, None))
    }
}

/// Mean loss over `samples` in their given order, with no gradients.
pub fn evaluate_loss(model: &EdgeDoc, samples: &[TrainSample], cfg: &LossConfig) -> Result<LossValues> {
    if samples.is_empty() {
        return Err(Error::Contract("evaluate_loss on an empty split".into()));
    }
    let mut acc = LossValues { total: 0.0, cls: 0.0, mask: 0.0 };
    for s in samples {
        let (v, _) = sample_loss(model, model.params(), s, cfg, false)?;
        acc.total += v.total;
        acc.cls += v.cls;
        acc.mask += v.mask;
    }
    let n = samples.len() as f64;
    Ok(LossValues {
        total: acc.total / n,
        cls: acc.cls / n,
        mask: acc.mask / n,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.optim.validate()
    }
}

/// Runs the full schedule. After each epoch the validation loss is computed
/// and, whenever it strictly improves, the current weights become the best
/// model and `on_improve` is called with them (e.g. to write a checkpoint).
pub fn train<F>(
    model: EdgeDoc,
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    cfg: &TrainConfig,
    mut on_improve: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EdgeDoc, &EpochRecord) -> Result<()>,
{
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Contract("training and validation splits must be non-empty".into()));
    }
    let mut model = model;
    model.params_mut().set_requires_grad(true);
    let mut state = TrainState::new(model.params(), cfg.seed);
    let mut history = Vec::with_capacity(cfg.optim.epochs as usize);
    let mut best: Option<(EdgeDoc, u32, f64)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.optim.epochs {
        state.epoch = epoch;
        let lr = cosine_lr(epoch, &cfg.optim)?;
        let mut rng = SplitMix64::derive(cfg.seed, 0x5487_0000 + epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut sums = LossValues { total: 0.0, cls: 0.0, mask: 0.0 };
        for batch in order.chunks(cfg.optim.batch_size) {
            model.params_mut().zero_grad();
            for &i in batch {
                let sample = &train_set[i];
                let (v, rec) = sample_loss(&model, model.params(), sample, &cfg.loss, true)?;
                if !v.total.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step: state.step + 1,
                        detail: format!("sample {}: loss {}", sample.id, v.total),
                    });
                }
                let (g, bound) = rec.expect("recorded graph");
                model.params_mut().accumulate_grads(&g, &bound);
                sums.total += v.total;
                sums.cls += v.cls;
                sums.mask += v.mask;
            }
            if batch.len() > 1 {
                let inv = 1.0 / batch.len() as f32;
                for (_, t) in model.params_mut().iter_mut() {
                    if let Some(g) = t.grad().map(|g| g.iter().map(|v| v * inv).collect::<Vec<_>>()) {
                        t.zero_grad();
                        t.accumulate_grad(&g);
                    }
                }
            }
            adamw_step(model.params_mut(), &mut state, lr as f32, &cfg.optim)?;
            debug!("epoch {epoch} step {} loss {:.5}", state.step, sums.total);
        }
        let n = train_set.len() as f64;
        let val = evaluate_loss(&model, val_set, &cfg.loss)?;
        if !val.total.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step: state.step,
                detail: format!("validation loss {}", val.total),
            });
        }
        let rec = EpochRecord {
            epoch,
            train_loss: sums.total / n,
            val_loss: val.total,
            lr,
            train_cls: sums.cls / n,
            train_mask: sums.mask / n,
            val_cls: val.cls,
            val_mask: val.mask,
        };
        info!(
            "epoch {:>2} lr {:.3e} train {:.5} val {:.5}",
            epoch, lr, rec.train_loss, rec.val_loss
        );
        history.push(rec);
        if best.as_ref().is_none_or(|(_, _, b)| val.total < *b) {
            let mut snapshot = model.clone();
            snapshot.params_mut().set_requires_grad(false);
            on_improve(&snapshot, &rec)?;
            state.best_val_loss = val.total as f32;
            best = Some((snapshot, epoch, val.total));
        }
    }
    let (best, best_epoch, best_val_loss) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_loss,
        history,
        state,
    })
}
