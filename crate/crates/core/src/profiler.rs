//! Activation statistics of the fault-free model on calibration data.

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::LabeledSample;
use crate::error::{Error, Result};
use crate::fault::FaultMask;
use crate::model::Model;
use crate::tensor::Tensor;

pub const DEFAULT_BINS: usize = 100;

/// Linear bins over `[0, hi]`. Values above `hi`, `+Inf` and NaN go to
/// `overflow`; values below zero go to `underflow`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub hi: f32,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
}

impl Histogram {
    pub fn new(hi: f32, bins: usize) -> Self {
        assert!(bins > 0, "histogram needs at least one bin");
        Self {
            hi,
            counts: vec![0; bins],
            underflow: 0,
            overflow: 0,
        }
    }

    pub fn add(&mut self, v: f32) {
        if v < 0.0 {
            self.underflow += 1;
        } else if !(v <= self.hi) {
            self.overflow += 1;
        } else {
            let bins = self.counts.len();
            let i = if self.hi > 0.0 {
                ((v as f64 / self.hi as f64 * bins as f64) as usize).min(bins - 1)
            } else {
                0
            };
            self.counts[i] += 1;
        }
    }

    pub fn add_all(&mut self, values: &[f32]) {
        for &v in values {
            self.add(v);
        }
    }

    pub fn merge(&mut self, other: &Histogram) {
        debug_assert_eq!(self.counts.len(), other.counts.len());
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.underflow += other.underflow;
        self.overflow += other.overflow;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.underflow + self.overflow
    }

    /// `bins + 1` edges from 0 to `hi`.
    pub fn bin_edges(&self) -> Vec<f64> {
        let n = self.counts.len();
        (0..=n).map(|i| self.hi as f64 * i as f64 / n as f64).collect()
    }

    /// Upper edge of the bin holding the `q`-quantile. Returns `hi` when the
    /// quantile falls in the overflow bin.
    pub fn quantile(&self, q: f64) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let target = (q * total as f64).ceil().max(1.0) as u64;
        let mut seen = self.underflow;
        if seen >= target {
            return 0.0;
        }
        let edges = self.bin_edges();
        for (i, &c) in self.counts.iter().enumerate() {
            seen += c;
            if seen >= target {
                return edges[i + 1];
            }
        }
        self.hi as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerProfile {
    pub layer: usize,
    pub name: String,
    pub act_max: f32,
    /// Histogram estimate of the 99.9th percentile. Recorded, not used by
    /// the tuner.
    pub p999: f64,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActivationProfile {
    pub sample_count: usize,
    pub layers: Vec<LayerProfile>,
}

impl ActivationProfile {
    pub fn act_max(&self) -> Vec<f32> {
        self.layers.iter().map(|l| l.act_max).collect()
    }

    pub fn get(&self, layer: usize) -> Option<&LayerProfile> {
        self.layers.iter().find(|l| l.layer == layer)
    }
}

/// Outputs of the given layers for one sample.
fn layer_outputs(net: &crate::model::Network, image: &Tensor, layers: &[usize]) -> Result<Vec<Tensor>> {
    let last = layers.iter().copied().max().unwrap_or(0);
    let mut x = net.preprocess(image)?;
    let mut out = Vec::with_capacity(layers.len());
    for i in 0..=last {
        x = net.apply_layer(i, &x)?;
        if layers.contains(&i) {
            out.push(x.clone());
        }
    }
    Ok(out)
}

/// Per-activation-layer maxima and histograms over `calibration`.
pub fn profile(model: &Model, calibration: &[LabeledSample]) -> Result<ActivationProfile> {
    profile_with_bins(model, calibration, DEFAULT_BINS)
}

pub fn profile_with_bins(model: &Model, calibration: &[LabeledSample], bins: usize) -> Result<ActivationProfile> {
    if calibration.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let acts = model.activation_layers();
    let net = model.decode();

    // Max is exact under any merge order.
    let maxima = calibration
        .par_iter()
        .map(|s| {
            layer_outputs(&net, &s.image, &acts).map(|outs| outs.iter().map(Tensor::max_value).collect::<Vec<_>>())
        })
        .try_reduce(
            || vec![f32::NEG_INFINITY; acts.len()],
            |a, b| Ok(a.iter().zip(&b).map(|(x, y)| x.max(*y)).collect()),
        )?;

    let ranges: Vec<f32> = maxima.iter().map(|&m| finite_or_max(m)).collect();
    let empty = || ranges.iter().map(|&hi| Histogram::new(hi, bins)).collect::<Vec<_>>();
    let hists = calibration
        .par_iter()
        .map(|s| {
            let outs = layer_outputs(&net, &s.image, &acts)?;
            let mut h = empty();
            for (h, t) in h.iter_mut().zip(&outs) {
                h.add_all(t.data());
            }
            Ok::<_, Error>(h)
        })
        .try_reduce(empty, |mut a, b| {
            for (x, y) in a.iter_mut().zip(&b) {
                x.merge(y);
            }
            Ok(a)
        })?;

    let layers = acts
        .iter()
        .zip(maxima)
        .zip(hists)
        .map(|((&layer, act_max), histogram)| LayerProfile {
            layer,
            name: model.layers()[layer].name.clone(),
            act_max: act_max.max(0.0),
            p999: histogram.quantile(0.999),
            histogram,
        })
        .collect();
    Ok(ActivationProfile {
        sample_count: calibration.len(),
        layers,
    })
}

/// Histogram range for an observed maximum: non-finite maxima fall back to
/// the largest finite value.
fn finite_or_max(m: f32) -> f32 {
    if m.is_finite() {
        m.max(0.0)
    } else {
        f32::MAX
    }
}

/// Histogram of one layer's outputs over `inputs`, optionally with a fault
/// mask applied to the parameters. Bins span `[0, hi]`; pass the clean
/// `act_max` to see faulty values land in the overflow bin.
pub fn activation_histogram(
    model: &Model,
    inputs: &[LabeledSample],
    mask: Option<&FaultMask>,
    layer: usize,
    hi: f32,
    bins: usize,
) -> Result<Histogram> {
    if layer >= model.layers().len() {
        return Err(Error::Config(format!(
            "layer {layer} out of range ({} layers)",
            model.layers().len()
        )));
    }
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let base = model.decode();
    let net = match mask {
        Some(m) => m.patch(model, &base)?,
        None => base,
    };
    let empty = || Histogram::new(hi, bins);
    inputs
        .par_iter()
        .map(|s| {
            let out = layer_outputs(&net, &s.image, &[layer])?;
            let mut h = empty();
            h.add_all(out[0].data());
            Ok::<_, Error>(h)
        })
        .try_reduce(empty, |mut a, b| {
            a.merge(&b);
            Ok(a)
        })
}
