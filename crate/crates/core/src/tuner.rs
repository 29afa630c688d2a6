//! Per-layer clip-threshold tuning by interval search on the AUC.
//!
//! The search interval `S` starts at `[0, ACT_max]` and is cut into thirds
//! by four boundaries `T1..T4`. Each iteration evaluates the AUC at the four
//! boundaries, keeps the neighbourhood of the best one and repeats. The loop
//! stops after `N` iterations, or earlier once adjacent AUCs differ by at
//! most `δ` and at least `M` iterations have been counted.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledSample;
use crate::error::{Error, Result};
use crate::fault::{FaultMask, FaultScope};
use crate::metrics::{sweep_with, Evaluator, SweepConfig, XScale};
use crate::model::Model;
use crate::profiler::ActivationProfile;

/// Where faults are injected while a layer is being tuned.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneScope {
    /// The conv/fc layer feeding the activation being tuned.
    #[default]
    Layer,
    /// Every conv/fc layer.
    Network,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    /// `N`.
    pub max_iters: usize,
    /// `M`, must be below `N`.
    pub min_iters: usize,
    /// `δ`, in AUC units.
    pub delta: f64,
    pub sweep: SweepConfig,
    pub x_scale: XScale,
    pub scope: TuneScope,
    /// Activation layers in tuning order; input to output when unset.
    pub layer_order: Option<Vec<usize>>,
}

impl TuneConfig {
    pub fn new(sweep: SweepConfig) -> Self {
        Self {
            max_iters: 10,
            min_iters: 3,
            delta: 0.01,
            sweep,
            x_scale: XScale::Linear,
            scope: TuneScope::Layer,
            layer_order: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.search().validate()?;
        self.sweep.validate()
    }

    fn search(&self) -> SearchParams {
        SearchParams {
            max_iters: self.max_iters,
            min_iters: self.min_iters,
            delta: self.delta,
        }
    }
}

/// Loop constants of the interval search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchParams {
    pub max_iters: usize,
    pub min_iters: usize,
    pub delta: f64,
}

impl SearchParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters (N) must be >= 1".into()));
        }
        if self.min_iters >= self.max_iters {
            return Err(Error::Config(format!(
                "min_iters (M = {}) must be below max_iters (N = {})",
                self.min_iters, self.max_iters
            )));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::Config(format!("delta must be >= 0, got {}", self.delta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchInterval {
    pub lo: f64,
    pub hi: f64,
}

impl SearchInterval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo <= hi) {
            return Err(Error::Config(format!("search interval [{lo}, {hi}] is empty")));
        }
        Ok(Self { lo, hi })
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    /// `T1..T4`: the ends and the two third points.
    pub fn boundaries(&self) -> [f64; 4] {
        let step = self.width() / 3.0;
        let t2 = self.lo + step;
        let t3 = (t2 + step).min(self.hi);
        [self.lo, t2, t3, self.hi]
    }

    pub fn contains(&self, other: &SearchInterval) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }
}

/// Index of the highest AUC (lowest index on ties), the interval around it
/// and its threshold.
pub fn interval_search_step(t: [f64; 4], auc: [f64; 4]) -> (SearchInterval, f64, usize) {
    let mut index = 0;
    for i in 1..4 {
        if auc[i] > auc[index] {
            index = i;
        }
    }
    let (lo, hi) = match index {
        3 => (t[2], t[3]),
        0 => (t[0], t[1]),
        i => (t[i - 1], t[i + 1]),
    };
    (SearchInterval { lo, hi }, t[index], index)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitReason {
    MaxIters,
    Plateau,
    /// `ACT_max` was not positive; nothing was searched.
    Inactive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    /// Value of the loop counter when the iteration started.
    pub counter: usize,
    pub interval: SearchInterval,
    pub thresholds: [f64; 4],
    pub aucs: [f64; 4],
    pub deltas: [f64; 3],
    /// Threshold picked by the interval search that opened this iteration.
    pub chosen: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub threshold: f64,
    pub iterations: Vec<IterationTrace>,
    pub exit_reason: ExitReason,
}

/// The interval search against an arbitrary objective, which maps four
/// thresholds to their AUCs.
pub fn tune_layer_with<F>(act_max: f64, params: &SearchParams, mut objective: F) -> Result<SearchOutcome>
where
    F: FnMut(&[f64; 4]) -> Result<[f64; 4]>,
{
    params.validate()?;
    if !(act_max > 0.0) {
        log::warn!("layer inactive: ACT_max = {act_max}, keeping it as the threshold");
        return Ok(SearchOutcome {
            threshold: act_max.max(0.0),
            iterations: Vec::new(),
            exit_reason: ExitReason::Inactive,
        });
    }
    let mut s = SearchInterval::new(0.0, act_max)?;
    let mut t: Option<f64> = None;
    let mut ts = s.boundaries();
    let mut aucs = objective(&ts)?;
    let mut iterations = Vec::new();
    let mut counter = 1;
    while counter <= params.max_iters {
        let started = counter;
        let mut chosen = None;
        if counter > 1 {
            let (next, best, _) = interval_search_step(ts, aucs);
            s = next;
            t = Some(best);
            chosen = Some(best);
            ts = s.boundaries();
            aucs = objective(&ts)?;
        }
        counter += 1;
        let deltas = [
            (aucs[1] - aucs[0]).abs(),
            (aucs[2] - aucs[1]).abs(),
            (aucs[3] - aucs[2]).abs(),
        ];
        iterations.push(IterationTrace {
            counter: started,
            interval: s,
            thresholds: ts,
            aucs,
            deltas,
            chosen,
        });
        let max_delta = deltas.iter().copied().fold(0.0, f64::max);
        if max_delta <= params.delta && counter >= params.min_iters {
            return Ok(SearchOutcome {
                threshold: t.unwrap_or_else(|| interval_search_step(ts, aucs).1),
                iterations,
                exit_reason: ExitReason::Plateau,
            });
        }
    }
    // A single iteration never runs the interval search, so fall back to the
    // best boundary of the first quadruple.
    Ok(SearchOutcome {
        threshold: t.unwrap_or_else(|| interval_search_step(ts, aucs).1),
        iterations,
        exit_reason: ExitReason::MaxIters,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneTrace {
    pub layer: usize,
    pub name: String,
    pub act_max: f32,
    /// Conv/fc layer faulted during the search; `None` for network scope.
    pub fault_layer: Option<usize>,
    pub threshold: f32,
    pub exit_reason: ExitReason,
    pub iterations: Vec<IterationTrace>,
}

/// Fault masks and evaluator used for all AUC evaluations of one layer.
struct LayerObjective<'e, 's> {
    ev: &'e Evaluator<'s>,
    sweep: SweepConfig,
    masks: Vec<FaultMask>,
    layer: usize,
    x_scale: XScale,
    memo: HashMap<u32, f64>,
}

impl LayerObjective<'_, '_> {
    fn auc(&self, threshold: f32) -> Result<f64> {
        let r = sweep_with(self.ev, &self.sweep, &self.masks, Some((self.layer, threshold)))?;
        Ok(r.auc(self.x_scale)?.auc)
    }

    fn quad(&mut self, ts: &[f64; 4]) -> Result<[f64; 4]> {
        let mut todo: Vec<f32> = ts.iter().map(|&t| t as f32).filter(|t| !self.memo.contains_key(&t.to_bits())).collect();
        todo.sort_by(f32::total_cmp);
        todo.dedup();
        let fresh: Vec<(f32, f64)> = todo
            .par_iter()
            .map(|&t| Ok((t, self.auc(t)?)))
            .collect::<Result<_>>()?;
        self.memo.extend(fresh.into_iter().map(|(t, a)| (t.to_bits(), a)));
        Ok(ts.map(|t| self.memo[&(t as f32).to_bits()]))
    }
}

/// AUC at the four boundaries of `interval` for activation `layer`, other
/// layers keeping their current thresholds.
pub fn auc_calculation(
    model: &Model,
    layer: usize,
    interval: &SearchInterval,
    sweep: &SweepConfig,
    x_scale: XScale,
    calibration: &[LabeledSample],
) -> Result<[f64; 4]> {
    let ev = Evaluator::new(model, calibration)?;
    let mut obj = LayerObjective {
        ev: &ev,
        sweep: sweep.clone(),
        masks: sweep.draw_masks(model)?,
        layer,
        x_scale,
        memo: HashMap::new(),
    };
    obj.quad(&interval.boundaries())
}

/// Sweep used while tuning `layer`: the configured one, narrowed to the
/// feeding conv/fc layer under [`TuneScope::Layer`].
pub fn layer_sweep(model: &Model, layer: usize, cfg: &TuneConfig) -> Result<SweepConfig> {
    let mut sweep = cfg.sweep.clone();
    sweep.scope = match cfg.scope {
        TuneScope::Network => FaultScope::Network,
        TuneScope::Layer => FaultScope::Layer(model.producing_param_layer(layer).ok_or_else(|| {
            Error::Config(format!("activation layer {layer} has no conv/fc layer before it"))
        })?),
    };
    Ok(sweep)
}

/// Tunes the clip threshold of activation `layer` on `calibration`.
pub fn tune_layer(
    model: &Model,
    layer: usize,
    act_max: f32,
    cfg: &TuneConfig,
    calibration: &[LabeledSample],
) -> Result<(f32, TuneTrace)> {
    cfg.validate()?;
    if !model.layers().get(layer).is_some_and(|l| l.kind.is_activation()) {
        return Err(Error::Config(format!("layer {layer} is not an activation layer")));
    }
    let sweep = layer_sweep(model, layer, cfg)?;
    let ev = Evaluator::new(model, calibration)?;
    let mut obj = LayerObjective {
        ev: &ev,
        masks: sweep.draw_masks(model)?,
        sweep: sweep.clone(),
        layer,
        x_scale: cfg.x_scale,
        memo: HashMap::new(),
    };
    let out = tune_layer_with(act_max as f64, &cfg.search(), |ts| obj.quad(ts))?;
    let threshold = out.threshold as f32;
    let trace = TuneTrace {
        layer,
        name: model.layers()[layer].name.clone(),
        act_max,
        fault_layer: match sweep.scope {
            FaultScope::Layer(l) => Some(l),
            FaultScope::Network => None,
        },
        threshold,
        exit_reason: out.exit_reason,
        iterations: out.iterations,
    };
    Ok((threshold, trace))
}

/// Clips every activation at its `ACT_max`, then tunes the layers one at a
/// time, committing each threshold before moving on.
pub fn tune_network(
    model: &Model,
    profile: &ActivationProfile,
    cfg: &TuneConfig,
    calibration: &[LabeledSample],
) -> Result<(Model, Vec<TuneTrace>)> {
    cfg.validate()?;
    let acts = model.activation_layers();
    let act_max: Vec<f32> = acts
        .iter()
        .map(|&l| {
            profile
                .get(l)
                .map(|p| p.act_max)
                .ok_or_else(|| Error::Config(format!("profile has no entry for activation layer {l}")))
        })
        .collect::<Result<_>>()?;
    let order = match &cfg.layer_order {
        Some(order) => {
            let mut sorted = order.clone();
            sorted.sort_unstable();
            if sorted != acts {
                return Err(Error::Config(format!(
                    "layer_order {order:?} is not a permutation of the activation layers {acts:?}"
                )));
            }
            order.clone()
        }
        None => acts.clone(),
    };
    let mut current = model.set_thresholds(&act_max)?;
    let mut traces = Vec::with_capacity(order.len());
    for layer in order {
        let max = act_max[acts.iter().position(|&a| a == layer).expect("checked")];
        let (t, trace) = tune_layer(&current, layer, max, cfg, calibration)?;
        log::info!("layer {} ({}): T = {t} (ACT_max {max})", layer, trace.name);
        current = current.set_layer_threshold(layer, t)?;
        traces.push(trace);
    }
    Ok((current, traces))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(n: usize, m: usize, delta: f64) -> SearchParams {
        SearchParams {
            max_iters: n,
            min_iters: m,
            delta,
        }
    }

    fn quad_of(f: impl Fn(f64) -> f64) -> impl FnMut(&[f64; 4]) -> Result<[f64; 4]> {
        move |ts| Ok(ts.map(&f))
    }

    #[test]
    fn interval_search_branches() {
        let t = [0.0, 1.0, 2.0, 3.0];
        let (s, best, i) = interval_search_step(t, [0.1, 0.9, 0.3, 0.2]);
        assert_eq!((s.lo, s.hi, best, i), (0.0, 2.0, 1.0, 1));
        let (s, best, _) = interval_search_step(t, [0.9, 0.3, 0.2, 0.1]);
        assert_eq!((s.lo, s.hi, best), (0.0, 1.0, 0.0));
        let (s, best, _) = interval_search_step(t, [0.1, 0.2, 0.3, 0.9]);
        assert_eq!((s.lo, s.hi, best), (2.0, 3.0, 3.0));
        let (_, best, i) = interval_search_step(t, [0.5, 0.5, 0.5, 0.5]);
        assert_eq!((best, i), (0.0, 0));
    }

    #[test]
    fn boundaries_are_equally_spaced() {
        let b = SearchInterval::new(0.0, 9.0).unwrap().boundaries();
        assert_eq!(b, [0.0, 3.0, 6.0, 9.0]);
        let d = SearchInterval::new(2.5, 2.5).unwrap().boundaries();
        assert_eq!(d, [2.5; 4]);
        assert!(SearchInterval::new(1.0, 0.0).is_err());
    }

    #[test]
    fn config_checks() {
        assert!(params(3, 3, 0.0).validate().is_err());
        assert!(params(0, 0, 0.0).validate().is_err());
        assert!(params(3, 1, -1.0).validate().is_err());
        assert!(params(1, 0, 0.0).validate().is_ok());
    }

    #[test]
    fn quadratic_stub_converges() {
        let f = |t: f64| 1.0 - ((t - 3.0) / 10.0).powi(2);
        for n in 2..=8 {
            let out = tune_layer_with(9.0, &params(n, 1, 0.0), quad_of(f)).unwrap();
            assert_eq!(out.exit_reason, ExitReason::MaxIters);
            assert_eq!(out.iterations.len(), n);
            let last = out.iterations.last().unwrap().interval;
            assert!((out.threshold - 3.0).abs() <= last.width() + 1e-12);
            assert!((out.threshold - 3.0).abs() <= 9.0 * (2.0f64 / 3.0).powi(n as i32 - 1) + 1e-12);
        }
    }

    #[test]
    fn constant_objective_plateaus_at_m() {
        let out = tune_layer_with(4.0, &params(10, 3, 0.01), quad_of(|_| 0.5)).unwrap();
        assert_eq!(out.exit_reason, ExitReason::Plateau);
        // The counter is incremented before the exit test, so it first
        // reaches M = 3 at the end of the second iteration.
        assert_eq!(out.iterations.len(), 2);
        assert!(out.iterations.iter().all(|it| it.deltas == [0.0; 3]));
        assert_eq!(out.threshold, 0.0);
    }

    #[test]
    fn single_iteration_returns_first_argmax() {
        let out = tune_layer_with(9.0, &params(1, 0, 0.0), quad_of(|t| -(t - 5.0).abs())).unwrap();
        assert_eq!(out.iterations.len(), 1);
        assert_eq!(out.exit_reason, ExitReason::MaxIters);
        assert_eq!(out.threshold, 6.0);
    }

    #[test]
    fn inactive_layer() {
        let out = tune_layer_with(0.0, &params(3, 1, 0.0), |_| unreachable!()).unwrap();
        assert_eq!(out.exit_reason, ExitReason::Inactive);
        assert_eq!(out.threshold, 0.0);
    }

    #[test]
    fn never_leaves_initial_interval_and_nests() {
        let mut seen = Vec::new();
        let f = |t: f64| (-(t - 7.7).powi(2)).exp();
        let out = tune_layer_with(8.0, &params(12, 1, 0.0), |ts| {
            seen.extend_from_slice(ts);
            Ok(ts.map(f))
        })
        .unwrap();
        assert!(seen.iter().all(|&t| (0.0..=8.0).contains(&t)));
        for w in out.iterations.windows(2) {
            let (a, b) = (w[0].interval, w[1].interval);
            assert!(a.contains(&b));
            let r = b.width() / a.width();
            assert!((r - 1.0 / 3.0).abs() < 1e-9 || (r - 2.0 / 3.0).abs() < 1e-9, "{r}");
        }
    }
}
