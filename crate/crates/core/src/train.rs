//! MAE training with RMSprop and a stepped learning rate.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::config::TrainConfig;
use crate::data::{WindowedDataset, ZScoreStats};
use crate::error::{Error, Result};
use crate::model::{bind_params, ModelParams, Sttn};

/// Mean absolute error between two equally shaped variables.
pub fn mae_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let a = g.abs(d)?;
    g.mean(a)
}

/// Error summary in original speed units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub mae: f64,
    /// Percent; `None` when every ground-truth value is (near) zero.
    pub mape: Option<f64>,
    pub rmse: f64,
}

/// Ground-truth magnitudes at or below this are left out of MAPE.
pub const MAPE_FLOOR: f64 = 1e-6;

pub fn metrics(pred: &[f64], gt: &[f64]) -> Result<Metrics> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape("metrics", &[pred.len()], &[gt.len()]));
    }
    let n = pred.len() as f64;
    let (mut abs, mut sq, mut pct, mut counted) = (0.0, 0.0, 0.0, 0usize);
    for (&p, &y) in pred.iter().zip(gt) {
        let e = p - y;
        abs += e.abs();
        sq += e * e;
        if y.abs() > MAPE_FLOOR {
            pct += (e / y).abs();
            counted += 1;
        }
    }
    Ok(Metrics {
        mae: abs / n,
        mape: (counted > 0).then(|| 100.0 * pct / counted as f64),
        rmse: (sq / n).sqrt(),
    })
}

/// Running mean of squared gradients, one accumulator per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct RmspropState {
    pub second_moment: ModelParams,
}

impl RmspropState {
    pub fn new(params: &ModelParams) -> Self {
        RmspropState {
            second_moment: params.map(|_, t| Tensor::zeros(t.shape())),
        }
    }
}

/// `v <- rho v + (1 - rho) g^2`, `theta <- theta - lr g / (sqrt(v) + eps)`.
///
/// Gradients are checked before anything is modified, so a NaN leaves both
/// `params` and `state` untouched.
pub fn rmsprop_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut RmspropState,
    lr: f64,
    rho: f64,
    eps: f64,
) -> Result<()> {
    let grads = grads.named_owned();
    for (name, g) in &grads {
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Training(format!("non-finite gradient in {name} at entry {i}")));
        }
    }
    let mut moments: Vec<Tensor> = state
        .second_moment
        .named_owned()
        .into_iter()
        .map(|(_, t)| t)
        .collect();
    if moments.len() != grads.len() {
        return Err(Error::Contract("optimizer state does not match the gradients".into()));
    }
    let mut i = 0;
    let mut mismatch = None;
    params.for_each_mut("", &mut |name, p| {
        let (g, v) = (&grads[i].1, &mut moments[i]);
        i += 1;
        if p.shape() != g.shape() || v.shape() != g.shape() {
            mismatch.get_or_insert_with(|| name.to_string());
            return;
        }
        for ((pi, vi), &gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = rho * *vi + (1.0 - rho) * gi * gi;
            *pi -= lr * gi / (vi.sqrt() + eps);
        }
    });
    if let Some(name) = mismatch {
        return Err(Error::Contract(format!("gradient shape mismatch for {name}")));
    }
    state.second_moment = state.second_moment.with_leaves(&moments)?;
    Ok(())
}

/// Loss and gradients for one window, loss measured in original units.
pub fn sample_gradient(
    sttn: &Sttn,
    params: &ModelParams,
    input: &Tensor,
    target: &Tensor,
    stats: ZScoreStats,
) -> Result<(f64, ModelParams)> {
    let mut g = Graph::new();
    let p = bind_params(&mut g, params, true);
    let w = g.constant(input.clone());
    let y = sttn.forward(&mut g, w, &p, None)?;
    let y = g.affine(y, stats.std, stats.mean)?;
    // targets are stored [T, N], forecasts [N, T]
    let t = g.constant(target.transpose());
    let loss = mae_loss(&mut g, y, t)?;
    g.backward(loss)?;
    let value = g.value(loss).item()?;
    let grads = p.map(|_, &v| g.grad(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))));
    Ok((value, grads))
}

/// De-normalised `[N, T]` forecast for one window.
pub fn forecast(sttn: &Sttn, params: &ModelParams, input: &Tensor, stats: ZScoreStats) -> Result<Tensor> {
    Ok(stats.denormalize_tensor(&sttn.predict(params, input)?))
}

/// MAE over every window, node and horizon step.
pub fn dataset_mae(sttn: &Sttn, params: &ModelParams, data: &WindowedDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data(format!("{} split has no windows", data.split)));
    }
    let mut total = 0.0;
    for (input, target) in data.inputs.iter().zip(&data.targets) {
        let y = forecast(sttn, params, input, data.stats)?;
        let t = target.transpose();
        total += y.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs()).sum::<f64>()
            / y.len() as f64;
    }
    Ok(total / data.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-window training loss over the epoch's updates.
    pub train_mae: f64,
    pub val_mae: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters after the epoch with the lowest validation MAE.
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// `epoch,lr,train_mae,val_mae` with one row per epoch.
pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,lr,train_mae,val_mae\n");
    for e in log {
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.epoch,
            crate::data::format_f64(e.lr),
            crate::data::format_f64(e.train_mae),
            crate::data::format_f64(e.val_mae)
        ));
    }
    out
}

fn add_into(acc: &mut ModelParams, g: &ModelParams) {
    let leaves = g.named_owned();
    let mut i = 0;
    acc.for_each_mut("", &mut |_, t| {
        for (a, b) in t.data_mut().iter_mut().zip(leaves[i].1.data()) {
            *a += b;
        }
        i += 1;
    });
}

fn scale_in_place(p: &mut ModelParams, s: f64) {
    p.for_each_mut("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v *= s));
}

fn global_norm(p: &ModelParams) -> f64 {
    let mut sq = 0.0;
    p.for_each("", &mut |_, t| sq += t.data().iter().map(|v| v * v).sum::<f64>());
    sq.sqrt()
}

/// Batch-mean loss and gradient, summed in sample order.
fn batch_gradient(
    sttn: &Sttn,
    params: &ModelParams,
    data: &WindowedDataset,
    batch: &[usize],
) -> Result<(f64, ModelParams)> {
    let mut total = 0.0;
    let mut acc = params.map(|_, t| Tensor::zeros(t.shape()));
    for &i in batch {
        let (loss, grads) = sample_gradient(sttn, params, &data.inputs[i], &data.targets[i], data.stats)?;
        total += loss;
        add_into(&mut acc, &grads);
    }
    let inv = 1.0 / batch.len() as f64;
    scale_in_place(&mut acc, inv);
    Ok((total * inv, acc))
}

/// Trains from a seeded initialisation and returns the best-validation
/// parameters. Bitwise reproducible for a fixed configuration.
pub fn train(
    sttn: &Sttn,
    train: &WindowedDataset,
    val: &WindowedDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if sttn.config() != &cfg.model {
        return Err(Error::Config("model and training configurations disagree".into()));
    }
    if train.is_empty() {
        return Err(Error::Data("training split has no windows".into()));
    }
    let mut params = sttn.init_params(cfg.seed)?;
    let mut state = RmspropState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let context = |e: Error| match e {
                Error::Training(m) => Error::Training(format!("epoch {epoch}, batch {b}: {m}")),
                Error::NonFinite { op } => {
                    Error::Training(format!("epoch {epoch}, batch {b}: non-finite value in {op}"))
                }
                other => other,
            };
            let (loss, mut grads) = batch_gradient(sttn, &params, train, batch).map_err(context)?;
            if !loss.is_finite() {
                return Err(context(Error::Training(format!("loss is {loss}"))));
            }
            if let Some(clip) = cfg.grad_clip {
                let norm = global_norm(&grads);
                if norm > clip {
                    scale_in_place(&mut grads, clip / norm);
                }
            }
            rmsprop_step(&mut params, &grads, &mut state, lr, cfg.rho, cfg.eps).map_err(context)?;
            loss_sum += loss * batch.len() as f64;
            debug!("epoch {epoch} batch {b} loss {loss:.6}");
        }
        let train_mae = loss_sum / train.len() as f64;
        let val_mae = if val.is_empty() {
            train_mae
        } else {
            dataset_mae(sttn, &params, val)?
        };
        info!("epoch {epoch}: lr {lr:.3e} train MAE {train_mae:.4} val MAE {val_mae:.4}");
        log.push(EpochLog {
            epoch,
            lr,
            train_mae,
            val_mae,
        });
        if best.as_ref().is_none_or(|(v, _, _)| val_mae < *v) {
            best = Some((val_mae, epoch, params.clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        params,
        log,
        best_epoch,
    })
}
