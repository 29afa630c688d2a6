//! Straight-line f64 reference forward pass, written against the stored
//! words and layer list only.

#![allow(dead_code)]

use faultclip_core::{LayerKind, Model, NumericFormat};

pub const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/lenet-fixture.ftc");

/// Two's-complement fixed point, or IEEE single read through `from_bits`.
pub fn oracle_decode(word: u32, fmt: NumericFormat) -> f64 {
    match fmt {
        NumericFormat::Float32 => f32::from_bits(word) as f64,
        NumericFormat::Fixed32 { frac_bits, .. } => word as i32 as f64 / 2f64.powi(frac_bits as i32),
    }
}

/// Activation volume as (channels, height, width) plus flat data.
#[derive(Clone, Debug)]
pub struct Vol {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

/// Output of every layer for one image.
pub fn oracle_trace(model: &Model, image: &[f32]) -> Vec<Vol> {
    assert!(model.normalization.is_none(), "oracle has no input normalisation");
    let s = &model.input_shape;
    let mut x = Vol {
        c: s[0],
        h: s[1],
        w: s[2],
        data: image.iter().map(|&v| v as f64).collect(),
    };
    let mut out = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        let words = model.params()[i].as_ref();
        x = match layer.kind {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let p = words.unwrap();
                let wt: Vec<f64> = p.weight.words.iter().map(|&w| oracle_decode(w, model.format)).collect();
                let b: Vec<f64> = p.bias.words.iter().map(|&w| oracle_decode(w, model.format)).collect();
                assert_eq!(in_channels, x.c);
                let oh = (x.h + 2 * padding[0] - kernel[0]) / stride[0] + 1;
                let ow = (x.w + 2 * padding[1] - kernel[1]) / stride[1] + 1;
                let mut data = vec![0.0; out_channels * oh * ow];
                for o in 0..out_channels {
                    for r in 0..oh {
                        for q in 0..ow {
                            let mut acc = b[o];
                            for ci in 0..in_channels {
                                for u in 0..kernel[0] {
                                    for v in 0..kernel[1] {
                                        let yy = (r * stride[0] + u) as isize - padding[0] as isize;
                                        let xx = (q * stride[1] + v) as isize - padding[1] as isize;
                                        if yy < 0 || xx < 0 || yy >= x.h as isize || xx >= x.w as isize {
                                            continue;
                                        }
                                        let xi = (ci * x.h + yy as usize) * x.w + xx as usize;
                                        let wi = ((o * in_channels + ci) * kernel[0] + u) * kernel[1] + v;
                                        acc += wt[wi] * x.data[xi];
                                    }
                                }
                            }
                            data[(o * oh + r) * ow + q] = acc;
                        }
                    }
                }
                Vol {
                    c: out_channels,
                    h: oh,
                    w: ow,
                    data,
                }
            }
            LayerKind::FullyConnected {
                in_features,
                out_features,
            } => {
                let p = words.unwrap();
                assert_eq!(x.data.len(), in_features);
                let data = (0..out_features)
                    .map(|o| {
                        let mut acc = oracle_decode(p.bias.words[o], model.format);
                        for k in 0..in_features {
                            acc += oracle_decode(p.weight.words[o * in_features + k], model.format) * x.data[k];
                        }
                        acc
                    })
                    .collect();
                Vol {
                    c: out_features,
                    h: 1,
                    w: 1,
                    data,
                }
            }
            LayerKind::Maxpool2d { pool, stride } => {
                let oh = (x.h - pool[0]) / stride[0] + 1;
                let ow = (x.w - pool[1]) / stride[1] + 1;
                let mut data = Vec::with_capacity(x.c * oh * ow);
                for ch in 0..x.c {
                    for r in 0..oh {
                        for q in 0..ow {
                            let mut m = f64::NEG_INFINITY;
                            for u in 0..pool[0] {
                                for v in 0..pool[1] {
                                    m = m.max(x.data[(ch * x.h + r * stride[0] + u) * x.w + q * stride[1] + v]);
                                }
                            }
                            data.push(m);
                        }
                    }
                }
                Vol {
                    c: x.c,
                    h: oh,
                    w: ow,
                    data,
                }
            }
            LayerKind::Relu => Vol {
                data: x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
                ..x
            },
            LayerKind::ClippedRelu { threshold } => Vol {
                data: x
                    .data
                    .iter()
                    .map(|&v| if 0.0 <= v && v <= threshold as f64 { v } else { 0.0 })
                    .collect(),
                ..x
            },
            LayerKind::Flatten => Vol {
                c: x.data.len(),
                h: 1,
                w: 1,
                data: x.data,
            },
            LayerKind::SoftmaxArgmax => x,
        };
        out.push(x.clone());
    }
    out
}

/// First index of the largest logit.
pub fn oracle_class(model: &Model, image: &[f32]) -> usize {
    let logits = oracle_trace(model, image).pop().unwrap().data;
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Trapezoid over `x = r / r_max`.
pub fn hand_auc(rates: &[f64], acc: &[f64]) -> f64 {
    let top = rates[rates.len() - 1];
    let mut area = 0.0;
    for i in 1..rates.len() {
        area += 0.5 * (acc[i] + acc[i - 1]) * (rates[i] - rates[i - 1]) / top;
    }
    area
}
