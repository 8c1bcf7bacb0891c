//! Per-horizon evaluation in multi-step and autoregressive modes, and the
//! historical-average baseline.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::Tensor;
use crate::data::{format_f64, WindowedDataset};
use crate::error::{Error, Result};
use crate::model::{ModelParams, Sttn};
use crate::train::{metrics, Metrics};

pub const MINUTES_PER_STEP: usize = 5;
/// 15, 30 and 45 minutes ahead.
pub const DEFAULT_HORIZONS: [usize; 3] = [3, 6, 9];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InferenceMode {
    /// Every horizon read directly from one forecast.
    MultiStep,
    /// One-step forecasts fed back into the window.
    Autoregressive,
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InferenceMode::MultiStep => "MS",
            InferenceMode::Autoregressive => "AR",
        })
    }
}

impl FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ms" => Ok(InferenceMode::MultiStep),
            "ar" => Ok(InferenceMode::Autoregressive),
            _ => Err(Error::Value(format!("unknown inference mode {s:?} (expected ms or ar)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HorizonMetrics {
    /// Steps ahead, 1-based.
    pub steps: usize,
    pub metrics: Metrics,
}

impl HorizonMetrics {
    pub fn minutes(&self) -> usize {
        self.steps * MINUTES_PER_STEP
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub model: String,
    /// `MS`, `AR`, or `HA` for the baseline.
    pub mode: String,
    pub rows: Vec<HorizonMetrics>,
}

impl EvalReport {
    pub fn at(&self, steps: usize) -> Option<&Metrics> {
        self.rows.iter().find(|r| r.steps == steps).map(|r| &r.metrics)
    }

    /// `horizon_min,mae,mape_pct,rmse,mode`; an undefined MAPE is written `NA`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("horizon_min,mae,mape_pct,rmse,mode\n");
        for r in &self.rows {
            let m = &r.metrics;
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.minutes(),
                format_f64(m.mae),
                m.mape.map_or_else(|| "NA".to_string(), format_f64),
                format_f64(m.rmse),
                self.mode
            ));
        }
        out
    }
}

fn check_horizons(horizons: &[usize], max: usize) -> Result<()> {
    if horizons.is_empty() {
        return Err(Error::Value("no horizons requested".into()));
    }
    if let Some(&h) = horizons.iter().find(|&&h| h == 0 || h > max) {
        return Err(Error::Value(format!("horizon {h} outside 1..={max}")));
    }
    Ok(())
}

/// Metrics per horizon from `[N, T']` forecasts (original units) against
/// `[T, N]` targets. Horizon `h` reads forecast column `h - 1` only.
pub fn horizon_metrics(
    forecasts: &[Tensor],
    targets: &[Tensor],
    horizons: &[usize],
) -> Result<Vec<HorizonMetrics>> {
    let cols = forecasts.first().map_or(0, |f| f.shape()[1]);
    let t_len = targets.first().map_or(0, |t| t.shape()[0]);
    check_horizons(horizons, cols.min(t_len))?;
    if forecasts.len() != targets.len() {
        return Err(Error::shape("horizon_metrics", &[forecasts.len()], &[targets.len()]));
    }
    horizons
        .iter()
        .map(|&h| {
            let mut pred = Vec::new();
            let mut gt = Vec::new();
            for (f, t) in forecasts.iter().zip(targets) {
                let n = f.shape()[0];
                for v in 0..n {
                    pred.push(f.get(&[v, h - 1]));
                    gt.push(t.get(&[h - 1, v]));
                }
            }
            Ok(HorizonMetrics {
                steps: h,
                metrics: metrics(&pred, &gt)?,
            })
        })
        .collect()
}

/// Autoregressive roll-out: `[N, steps]` de-normalised forecast built from
/// the first output column of repeated one-window predictions.
pub fn autoregressive_forecast(
    sttn: &Sttn,
    params: &ModelParams,
    input: &Tensor,
    stats: crate::data::ZScoreStats,
    steps: usize,
) -> Result<Tensor> {
    let (m, n) = (input.shape()[0], input.shape()[1]);
    let mut window = input.clone();
    let mut out = Tensor::zeros(&[n, steps]);
    for s in 0..steps {
        let y = sttn.predict(params, &window)?;
        let mut next = window.data()[n..].to_vec();
        for v in 0..n {
            let speed = stats.denormalize(y.get(&[v, 0]));
            out.set(&[v, s], speed);
            next.push(stats.normalize(speed));
        }
        window = Tensor::new(&[m, n], next)?;
    }
    Ok(out)
}

pub fn evaluate(
    sttn: &Sttn,
    params: &ModelParams,
    data: &WindowedDataset,
    horizons: &[usize],
    mode: InferenceMode,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Data(format!("{} split has no windows", data.split)));
    }
    let max = *horizons.iter().max().unwrap_or(&0);
    let limit = match mode {
        InferenceMode::MultiStep => sttn.config().horizon.min(data.horizon()),
        InferenceMode::Autoregressive => data.horizon(),
    };
    check_horizons(horizons, limit)?;
    let forecasts = data
        .inputs
        .iter()
        .map(|input| match mode {
            InferenceMode::MultiStep => {
                Ok(data.stats.denormalize_tensor(&sttn.predict(params, input)?))
            }
            InferenceMode::Autoregressive => {
                autoregressive_forecast(sttn, params, input, data.stats, max)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        model: "STTN".into(),
        mode: mode.to_string(),
        rows: horizon_metrics(&forecasts, &data.targets, horizons)?,
    })
}

/// Predicts every horizon with the per-node mean of the input window.
pub fn historical_average(data: &WindowedDataset, horizons: &[usize]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Data(format!("{} split has no windows", data.split)));
    }
    let steps = *horizons.iter().max().unwrap_or(&0);
    check_horizons(horizons, data.horizon())?;
    let forecasts = data
        .inputs
        .iter()
        .map(|input| {
            let (m, n) = (input.shape()[0], input.shape()[1]);
            let mut f = Tensor::zeros(&[n, steps]);
            for v in 0..n {
                let mean = (0..m).map(|t| input.get(&[t, v])).sum::<f64>() / m as f64;
                let speed = data.stats.denormalize(mean);
                for s in 0..steps {
                    f.set(&[v, s], speed);
                }
            }
            f
        })
        .collect::<Vec<_>>();
    Ok(EvalReport {
        model: "HA".into(),
        mode: "HA".into(),
        rows: horizon_metrics(&forecasts, &data.targets, horizons)?,
    })
}
