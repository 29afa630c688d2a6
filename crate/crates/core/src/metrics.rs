//! Accuracy under fault campaigns, fault-rate sweeps and the resilience AUC.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledSample;
use crate::error::{Error, Result};
use crate::fault::{draw_mask, FaultMask, FaultScope, FaultSpec};
use crate::model::{Model, Network};
use crate::ops::classify;
use crate::tensor::Tensor;

/// Default sweep grid.
pub const DEFAULT_FAULT_RATES: [f64; 8] = [0.0, 1e-8, 5e-8, 1e-7, 5e-7, 1e-6, 5e-6, 1e-5];

/// Clean activations cached per evaluation set are capped at this many
/// floats (1 GiB).
const CACHE_BUDGET: usize = 1 << 28;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Evaluation {
    pub correct: usize,
    pub total: usize,
    /// Samples whose logits were all NaN.
    pub degenerate: usize,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

/// Evaluates one model on one sample set under many fault masks.
///
/// Clean inputs to the conv/fc layers are cached, so a faulty pass restarts
/// at the first layer the mask touches instead of at the image.
pub struct Evaluator<'a> {
    model: Model,
    base: Network,
    samples: &'a [LabeledSample],
    /// `(layer, input to that layer for every sample)`, ascending by layer.
    cache: Vec<(usize, Vec<Tensor>)>,
    clean: Evaluation,
}

impl<'a> Evaluator<'a> {
    pub fn new(model: &Model, samples: &'a [LabeledSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        let base = model.decode();
        let params = model.param_layers();
        let traces: Vec<Vec<Tensor>> = samples
            .par_iter()
            .map(|s| {
                let mut x = base.preprocess(&s.image)?;
                let mut points = Vec::with_capacity(params.len());
                for i in 0..base.layers().len() {
                    if params.contains(&i) {
                        points.push(x.clone());
                    }
                    x = base.apply_layer(i, &x)?;
                }
                Ok(points)
            })
            .collect::<Result<_>>()?;

        let mut cache: Vec<(usize, Vec<Tensor>)> = params.iter().map(|&p| (p, Vec::with_capacity(samples.len()))).collect();
        for t in traces {
            for (slot, x) in cache.iter_mut().zip(t) {
                slot.1.push(x);
            }
        }
        let mut used = 0usize;
        cache.retain(|(_, xs)| {
            let size = xs.iter().map(Tensor::len).sum::<usize>();
            used += size;
            used <= CACHE_BUDGET
        });

        let mut ev = Self {
            model: model.clone(),
            base,
            samples,
            cache,
            clean: Evaluation::default(),
        };
        ev.clean = ev.run(&ev.base, usize::MAX)?;
        Ok(ev)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn samples(&self) -> &[LabeledSample] {
        self.samples
    }

    pub fn clean(&self) -> Evaluation {
        self.clean
    }

    pub fn evaluate(&self, mask: &FaultMask) -> Result<Evaluation> {
        let Some(first) = mask.first_layer() else {
            return Ok(self.clean);
        };
        let net = mask.patch(&self.model, &self.base)?;
        self.run(&net, first)
    }

    /// Like [`Evaluator::evaluate`] with activation `layer` clipped at
    /// `threshold` instead of its stored setting.
    pub fn evaluate_with_threshold(&self, mask: &FaultMask, layer: usize, threshold: f32) -> Result<Evaluation> {
        let mut net = mask.patch(&self.model, &self.base)?;
        net.set_threshold(layer, threshold)?;
        self.run(&net, mask.first_layer().unwrap_or(usize::MAX).min(layer))
    }

    /// Forward pass over every sample, reusing the latest cached clean input
    /// at or before `first_changed`.
    fn run(&self, net: &Network, first_changed: usize) -> Result<Evaluation> {
        let start = self.cache.iter().rev().find(|(p, _)| *p <= first_changed);
        let counts = (0..self.samples.len())
            .into_par_iter()
            .map(|i| {
                let logits = match start {
                    Some((p, xs)) => net.forward_from(*p, xs[i].clone())?,
                    None => net.forward(&self.samples[i].image)?,
                };
                let pred = classify(&logits)?;
                Ok::<_, Error>(((pred.class == self.samples[i].label) as usize, pred.degenerate as usize))
            })
            .try_reduce(|| (0, 0), |a, b| Ok((a.0 + b.0, a.1 + b.1)))?;
        Ok(Evaluation {
            correct: counts.0,
            total: self.samples.len(),
            degenerate: counts.1,
        })
    }
}

/// Fraction of `eval_set` classified correctly, with an optional fault mask.
pub fn evaluate_accuracy(model: &Model, mask: Option<&FaultMask>, eval_set: &[LabeledSample]) -> Result<f64> {
    if eval_set.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let base = model.decode();
    let net = match mask {
        Some(m) => m.patch(model, &base)?,
        None => base,
    };
    let correct = eval_set
        .par_iter()
        .map(|s| Ok::<_, Error>((classify(&net.forward(&s.image)?)?.class == s.label) as usize))
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(correct as f64 / eval_set.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Strictly ascending, starting at 0.
    pub fault_rates: Vec<f64>,
    pub trials_per_rate: usize,
    pub scope: FaultScope,
    pub base_seed: u64,
    pub include_biases: bool,
}

impl SweepConfig {
    pub fn new(fault_rates: Vec<f64>, trials_per_rate: usize, scope: FaultScope, base_seed: u64) -> Result<Self> {
        let cfg = Self {
            fault_rates,
            trials_per_rate,
            scope,
            base_seed,
            include_biases: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.fault_rates;
        if r.first() != Some(&0.0) {
            return Err(Error::Config("fault-rate grid must start at 0".into()));
        }
        if r.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config(format!("fault-rate grid must be strictly ascending: {r:?}")));
        }
        if r.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::Config(format!("fault rates must lie in [0, 1]: {r:?}")));
        }
        if self.trials_per_rate == 0 {
            return Err(Error::Config("trials_per_rate must be >= 1".into()));
        }
        Ok(())
    }

    pub fn fault_spec(&self, rate: f64, trial: usize) -> FaultSpec {
        FaultSpec {
            rate,
            scope: self.scope,
            seed: self.base_seed,
            trial_id: trial as u64,
            include_biases: self.include_biases,
        }
    }

    /// All masks of the sweep, rate-major.
    pub fn draw_masks(&self, model: &Model) -> Result<Vec<FaultMask>> {
        self.validate()?;
        let jobs: Vec<(f64, usize)> = self
            .fault_rates
            .iter()
            .flat_map(|&r| (0..self.trials_per_rate).map(move |t| (r, t)))
            .collect();
        jobs.par_iter()
            .map(|&(r, t)| draw_mask(model, &self.fault_spec(r, t)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateSummary {
    pub rate: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub rates: Vec<f64>,
    /// `accuracies[i][t]`: trial `t` at `rates[i]`.
    pub accuracies: Vec<Vec<f64>>,
}

impl SweepResult {
    pub fn mean_curve(&self) -> Vec<f64> {
        self.accuracies.iter().map(|a| a.iter().sum::<f64>() / a.len() as f64).collect()
    }

    pub fn summary(&self) -> Vec<RateSummary> {
        self.rates
            .iter()
            .zip(&self.accuracies)
            .map(|(&rate, acc)| {
                let mut s = acc.clone();
                s.sort_by(f64::total_cmp);
                RateSummary {
                    rate,
                    mean: acc.iter().sum::<f64>() / acc.len() as f64,
                    min: s[0],
                    max: s[s.len() - 1],
                    q1: quantile_sorted(&s, 0.25),
                    median: quantile_sorted(&s, 0.5),
                    q3: quantile_sorted(&s, 0.75),
                }
            })
            .collect()
    }

    /// `(rate, trial, accuracy)` rows, rate-major.
    pub fn rows(&self) -> impl Iterator<Item = (f64, usize, f64)> + '_ {
        self.rates
            .iter()
            .zip(&self.accuracies)
            .flat_map(|(&r, acc)| acc.iter().enumerate().map(move |(t, &a)| (r, t, a)))
    }

    pub fn auc(&self, scale: XScale) -> Result<AucResult> {
        compute_auc(&self.rates, &self.mean_curve(), scale)
    }
}

/// Linear-interpolated quantile of sorted data.
fn quantile_sorted(s: &[f64], q: f64) -> f64 {
    let pos = q * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

/// Accuracy for every `(rate, trial)` of `cfg`. Trials at rate 0 reuse the
/// clean evaluation.
pub fn run_sweep(model: &Model, cfg: &SweepConfig, eval_set: &[LabeledSample]) -> Result<SweepResult> {
    let ev = Evaluator::new(model, eval_set)?;
    let masks = cfg.draw_masks(model)?;
    sweep_with(&ev, cfg, &masks, None)
}

/// Sweep on a prepared evaluator with pre-drawn masks (rate-major, as
/// returned by [`SweepConfig::draw_masks`]), optionally overriding one
/// activation layer's threshold.
pub fn sweep_with(
    ev: &Evaluator<'_>,
    cfg: &SweepConfig,
    masks: &[FaultMask],
    threshold: Option<(usize, f32)>,
) -> Result<SweepResult> {
    let n = cfg.trials_per_rate;
    if masks.len() != cfg.fault_rates.len() * n {
        return Err(Error::Config(format!(
            "expected {} masks, got {}",
            cfg.fault_rates.len() * n,
            masks.len()
        )));
    }
    let flat: Vec<f64> = masks
        .par_iter()
        .map(|m| {
            let e = match threshold {
                Some((layer, t)) => ev.evaluate_with_threshold(m, layer, t)?,
                None => ev.evaluate(m)?,
            };
            Ok(e.accuracy())
        })
        .collect::<Result<_>>()?;
    Ok(SweepResult {
        rates: cfg.fault_rates.clone(),
        accuracies: flat.chunks(n).map(<[f64]>::to_vec).collect(),
    })
}

/// Mapping of fault rates onto the AUC x-axis.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XScale {
    /// `x_i = r_i / r_max`.
    #[default]
    Linear,
    /// `x_i = i / (n − 1)`, equispaced grid points.
    Index,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AucResult {
    pub auc: f64,
    /// Normalised `(x, y)` points.
    pub grid: Vec<(f64, f64)>,
}

/// Trapezoidal area under accuracy vs. normalised fault rate. Perfect
/// accuracy at every rate scores 1.
pub fn compute_auc(rates: &[f64], accuracies: &[f64], scale: XScale) -> Result<AucResult> {
    if rates.len() != accuracies.len() {
        return Err(Error::Config(format!(
            "{} rates but {} accuracies",
            rates.len(),
            accuracies.len()
        )));
    }
    if rates.len() < 2 {
        return Err(Error::Config("AUC needs at least 2 grid points".into()));
    }
    if rates.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config("AUC grid must be strictly ascending".into()));
    }
    let n = rates.len();
    let xs: Vec<f64> = match scale {
        XScale::Linear => {
            let r_max = rates[n - 1];
            if !(r_max > 0.0) {
                return Err(Error::Config("AUC needs a positive maximum fault rate".into()));
            }
            rates.iter().map(|r| r / r_max).collect()
        }
        XScale::Index => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    };
    let grid: Vec<(f64, f64)> = xs.into_iter().zip(accuracies.iter().copied()).collect();
    let auc = grid.windows(2).map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0)).sum();
    Ok(AucResult { auc, grid })
}
