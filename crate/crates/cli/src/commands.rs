//! The four subcommands. Each writes its artifacts into the output directory
//! and a short summary to stdout.

use std::path::{Path, PathBuf};

use faultclip_core::dataset::{load_cifar10_batch, make_synthetic_set};
use faultclip_core::metrics::{AucResult, RateSummary, SweepConfig};
use faultclip_core::profiler::{profile_with_bins, ActivationProfile, DEFAULT_BINS};
use faultclip_core::tuner::{TuneConfig, TuneTrace};
use faultclip_core::{
    draw_mask, load_model, run_sweep, save_model, tune_network, Evaluator, FaultMask, FaultScope, FaultSpec,
    LabeledSample, Model, SplitSpec,
};
use serde::Serialize;

use crate::config::{DatasetConfig, RunConfig};
use crate::error::{CliError, Context};
use crate::output::{ensure_dir, log_run, sweep_csv, sweep_svg, write_json, write_text, Provenance};
use crate::ClipMode;

pub const PROFILE_SCHEMA: &str = "faultclip.profile/1";
pub const SWEEP_SCHEMA: &str = "faultclip.sweep/1";
pub const TRACES_SCHEMA: &str = "faultclip.traces/1";
pub const INJECT_SCHEMA: &str = "faultclip.inject/1";

/// Model, as stored, plus the calibration and evaluation splits.
pub struct Inputs {
    pub model: Model,
    pub calibration: Vec<LabeledSample>,
    pub evaluation: Vec<LabeledSample>,
}

pub fn load_inputs(cfg: &RunConfig) -> Result<Inputs, CliError> {
    let path = cfg.model_path()?;
    let model = load_model(&path).context(&format!("loading {}", path.display()))?;
    let samples = load_dataset(cfg, &model)?;
    let split = SplitSpec::seeded(samples.len(), cfg.split.calibration_fraction, cfg.seed).context("split")?;
    split.assert_disjoint().context("split")?;
    let (calibration, evaluation) = split.select(&samples).context("split")?;
    log::info!(
        "{} samples: {} calibration, {} evaluation",
        samples.len(),
        calibration.len(),
        evaluation.len()
    );
    Ok(Inputs {
        model,
        calibration,
        evaluation,
    })
}

fn load_dataset(cfg: &RunConfig, model: &Model) -> Result<Vec<LabeledSample>, CliError> {
    match &cfg.dataset {
        DatasetConfig::Synthetic { samples } => {
            let shape: [usize; 3] = model.input_shape.as_slice().try_into().map_err(|_| {
                CliError::Data(format!("model input shape {:?} is not [C, H, W]", model.input_shape))
            })?;
            make_synthetic_set(cfg.seed, *samples, shape, model.num_classes).context("synthetic dataset")
        }
        DatasetConfig::Cifar10 { dir, files } => {
            if files.is_empty() {
                return Err(CliError::Config("cifar10 dataset lists no files".into()));
            }
            let dir = cfg.resolve(dir);
            let mut all = Vec::new();
            for f in files {
                let p = dir.join(f);
                if !p.is_file() {
                    return Err(CliError::Config(format!("dataset file not found: {}", p.display())));
                }
                all.extend(load_cifar10_batch(&p).context(&format!("reading {}", p.display()))?);
            }
            Ok(all)
        }
    }
}

fn require_calibration(inputs: &Inputs) -> Result<(), CliError> {
    if inputs.calibration.is_empty() {
        return Err(CliError::Data("calibration split is empty".into()));
    }
    Ok(())
}

/// `"network"` or a conv/fc layer name or index.
pub fn parse_scope(model: &Model, key: &str) -> Result<FaultScope, CliError> {
    if key == "network" {
        return Ok(FaultScope::Network);
    }
    let l = model
        .layer_index(key)
        .ok_or_else(|| CliError::Config(format!("unknown layer {key:?}")))?;
    if model.params()[l].is_none() {
        return Err(CliError::Config(format!(
            "layer {key:?} ({}) has no parameters to fault",
            model.layers()[l].name
        )));
    }
    Ok(FaultScope::Layer(l))
}

fn sweep_config(cfg: &RunConfig, model: &Model) -> Result<SweepConfig, CliError> {
    let s = SweepConfig {
        fault_rates: cfg.sweep.fault_rates.clone(),
        trials_per_rate: cfg.sweep.trials,
        scope: parse_scope(model, &cfg.sweep.scope)?,
        base_seed: cfg.seed,
        include_biases: cfg.sweep.include_biases,
    };
    s.validate().context("sweep")?;
    Ok(s)
}

fn tune_config(cfg: &RunConfig, model: &Model) -> Result<TuneConfig, CliError> {
    let t = &cfg.tune;
    let layer_order = match &t.layer_order {
        Some(keys) => Some(
            keys.iter()
                .map(|k| {
                    model
                        .layer_index(k)
                        .ok_or_else(|| CliError::Config(format!("unknown layer {k:?} in tune.layer_order")))
                })
                .collect::<Result<Vec<_>, _>>()?,
        ),
        None => None,
    };
    let tc = TuneConfig {
        max_iters: t.max_iters,
        min_iters: t.min_iters,
        delta: t.delta,
        sweep: SweepConfig {
            fault_rates: t.fault_rates.clone().unwrap_or_else(|| cfg.sweep.fault_rates.clone()),
            trials_per_rate: t.trials,
            scope: FaultScope::Network,
            base_seed: cfg.seed,
            include_biases: cfg.sweep.include_biases,
        },
        x_scale: cfg.sweep.x_scale,
        scope: t.scope,
        layer_order,
    };
    tc.validate().context("tune")?;
    Ok(tc)
}

#[derive(Serialize)]
struct ProfileDoc<'a> {
    schema: &'static str,
    provenance: &'a Provenance,
    model: &'a str,
    sample_count: usize,
    layers: Vec<ProfileLayer<'a>>,
}

#[derive(Serialize)]
struct ProfileLayer<'a> {
    layer: usize,
    name: &'a str,
    act_max: f32,
    p999: f64,
    bin_edges: Vec<f64>,
    counts: &'a [u64],
    underflow: u64,
    overflow: u64,
}

fn profile_doc<'a>(prov: &'a Provenance, model: &'a Model, p: &'a ActivationProfile) -> ProfileDoc<'a> {
    ProfileDoc {
        schema: PROFILE_SCHEMA,
        provenance: prov,
        model: &model.name,
        sample_count: p.sample_count,
        layers: p
            .layers
            .iter()
            .map(|l| ProfileLayer {
                layer: l.layer,
                name: &l.name,
                act_max: l.act_max,
                p999: l.p999,
                bin_edges: l.histogram.bin_edges(),
                counts: &l.histogram.counts,
                underflow: l.histogram.underflow,
                overflow: l.histogram.overflow,
            })
            .collect(),
    }
}

pub fn profile(cfg: &RunConfig, bins: usize) -> Result<(), CliError> {
    let inputs = load_inputs(cfg)?;
    require_calibration(&inputs)?;
    let prov = Provenance::new(cfg, "profile");
    let base = inputs.model.without_clipping();
    let p = profile_with_bins(&base, &inputs.calibration, bins).context("profile")?;
    let out_dir = cfg.resolve(&cfg.out_dir);
    ensure_dir(&out_dir)?;
    write_json(&out_dir.join("profile.json"), &profile_doc(&prov, &base, &p))?;
    for l in &p.layers {
        println!("{:>4} {:<12} act_max {:<12} p99.9 {:.6}", l.layer, l.name, l.act_max, l.p999);
    }
    log_run(&out_dir, &prov, &format!("layers={}", p.layers.len()));
    Ok(())
}

#[derive(Serialize)]
struct SweepDoc<'a> {
    schema: &'static str,
    provenance: &'a Provenance,
    clip: &'static str,
    thresholds: Option<Vec<f32>>,
    scope: FaultScope,
    trials_per_rate: usize,
    include_biases: bool,
    summary: Vec<RateSummary>,
    auc: Option<f64>,
    x_scale: faultclip_core::XScale,
    auc_grid: &'a [(f64, f64)],
}

fn clip_name(c: ClipMode) -> &'static str {
    match c {
        ClipMode::None => "none",
        ClipMode::Actmax => "actmax",
        ClipMode::Tuned => "tuned",
    }
}

/// The model variant evaluated by `sweep --clip`.
pub fn clip_variant(
    cfg: &RunConfig,
    inputs: &Inputs,
    clip: ClipMode,
    tuned_model: Option<&Path>,
) -> Result<Model, CliError> {
    let base = inputs.model.without_clipping();
    match clip {
        ClipMode::None => Ok(base),
        ClipMode::Actmax => {
            require_calibration(inputs)?;
            let p = profile_with_bins(&base, &inputs.calibration, DEFAULT_BINS).context("profile")?;
            base.set_thresholds(&p.act_max()).context("actmax thresholds")
        }
        ClipMode::Tuned => match tuned_model {
            Some(path) => {
                if !path.is_file() {
                    return Err(CliError::Config(format!("tuned model not found: {}", path.display())));
                }
                let tuned = load_model(path).context(&format!("loading {}", path.display()))?;
                if tuned.param_checksum() != base.param_checksum() || tuned.layers().len() != base.layers().len() {
                    return Err(CliError::Config(format!(
                        "{} is not a tuned copy of {}",
                        path.display(),
                        cfg.model_path()?.display()
                    )));
                }
                Ok(tuned)
            }
            None => Ok(tune_model(cfg, inputs)?.model),
        },
    }
}

pub fn sweep(cfg: &RunConfig, clip: ClipMode, tuned_model: Option<&Path>, svg: bool) -> Result<(), CliError> {
    let inputs = load_inputs(cfg)?;
    let prov = Provenance::new(cfg, "sweep");
    let model = clip_variant(cfg, &inputs, clip, tuned_model)?;
    let scfg = sweep_config(cfg, &model)?;
    let result = run_sweep(&model, &scfg, &inputs.evaluation).context("sweep")?;
    // A single-rate grid has no area.
    let (auc, grid) = if result.rates.len() >= 2 {
        let AucResult { auc, grid } = result.auc(cfg.sweep.x_scale).context("auc")?;
        (Some(auc), grid)
    } else {
        log::warn!("one fault rate only: no AUC");
        (None, Vec::new())
    };
    let out_dir = cfg.resolve(&cfg.out_dir);
    ensure_dir(&out_dir)?;
    write_text(&out_dir.join("sweep.csv"), &sweep_csv(&result, &prov)?)?;
    let summary = result.summary();
    write_json(
        &out_dir.join("sweep.json"),
        &SweepDoc {
            schema: SWEEP_SCHEMA,
            provenance: &prov,
            clip: clip_name(clip),
            thresholds: model.thresholds(),
            scope: scfg.scope,
            trials_per_rate: scfg.trials_per_rate,
            include_biases: scfg.include_biases,
            summary: summary.clone(),
            auc,
            x_scale: cfg.sweep.x_scale,
            auc_grid: &grid,
        },
    )?;
    if svg {
        let title = match auc {
            Some(a) => format!("{} (clip: {}), AUC {a:.4}", model.name, clip_name(clip)),
            None => format!("{} (clip: {})", model.name, clip_name(clip)),
        };
        write_text(&out_dir.join("sweep.svg"), &sweep_svg(&summary, &title))?;
    }
    for s in &summary {
        println!("rate {:<10e} mean {:.6} [{:.6}, {:.6}]", s.rate, s.mean, s.min, s.max);
    }
    if let Some(a) = auc {
        println!("auc {a:.6}");
    }
    log_run(&out_dir, &prov, &format!("clip={} auc={auc:?}", clip_name(clip)));
    Ok(())
}

pub struct Tuned {
    pub model: Model,
    pub act_max: Vec<f32>,
    pub traces: Vec<TuneTrace>,
}

/// Profile, ACT_max clipping and per-layer tuning on the calibration split.
pub fn tune_model(cfg: &RunConfig, inputs: &Inputs) -> Result<Tuned, CliError> {
    let base = inputs.model.without_clipping();
    if base.activation_layers().is_empty() {
        log::warn!("nothing to tune: {} has no activation layers", base.name);
        return Ok(Tuned {
            model: base,
            act_max: Vec::new(),
            traces: Vec::new(),
        });
    }
    require_calibration(inputs)?;
    let tcfg = tune_config(cfg, &base)?;
    let p = profile_with_bins(&base, &inputs.calibration, DEFAULT_BINS).context("profile")?;
    let (model, traces) = tune_network(&base, &p, &tcfg, &inputs.calibration).context("tune")?;
    if model.param_checksum() != base.param_checksum() {
        return Err(CliError::Internal("tuning changed the parameter words".into()));
    }
    Ok(Tuned {
        model,
        act_max: p.act_max(),
        traces,
    })
}

#[derive(Serialize)]
struct TracesDoc<'a> {
    schema: &'static str,
    provenance: &'a Provenance,
    act_max: &'a [f32],
    thresholds: Vec<f32>,
    layers: &'a [TuneTrace],
}

pub fn tune(cfg: &RunConfig) -> Result<(), CliError> {
    let inputs = load_inputs(cfg)?;
    let prov = Provenance::new(cfg, "tune");
    let mut tuned = tune_model(cfg, &inputs)?;
    let source = cfg.model_path()?;
    let meta = &mut tuned.model.metadata;
    meta.insert("config_hash".into(), prov.config_hash.clone());
    meta.insert("seed".into(), prov.seed.to_string());
    meta.insert("tool_version".into(), prov.tool_version.clone());
    meta.insert(
        "tuned_from".into(),
        source.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
    );
    let out_dir = cfg.resolve(&cfg.out_dir);
    ensure_dir(&out_dir)?;
    let path = out_dir.join("tuned.ftc");
    save_model(&tuned.model, &path).context(&format!("writing {}", path.display()))?;
    let thresholds = tuned.traces.iter().map(|t| t.threshold).collect();
    write_json(
        &out_dir.join("traces.json"),
        &TracesDoc {
            schema: TRACES_SCHEMA,
            provenance: &prov,
            act_max: &tuned.act_max,
            thresholds,
            layers: &tuned.traces,
        },
    )?;
    for t in &tuned.traces {
        println!(
            "{:>4} {:<12} act_max {:<12} T {:<12} {} iterations, {:?}",
            t.layer,
            t.name,
            t.act_max,
            t.threshold,
            t.iterations.len(),
            t.exit_reason
        );
    }
    log_run(&out_dir, &prov, &format!("layers={}", tuned.traces.len()));
    Ok(())
}

pub struct InjectArgs {
    pub rate: Option<f64>,
    pub network: bool,
    pub layer: Option<String>,
    pub trial: u64,
    pub emit_mask: bool,
    pub mask_file: Option<PathBuf>,
}

#[derive(Serialize)]
struct InjectDoc<'a> {
    schema: &'static str,
    provenance: &'a Provenance,
    /// `None` when the mask was replayed from a file.
    rate: Option<f64>,
    scope: Option<FaultScope>,
    trial: u64,
    mask_source: &'static str,
    flips: usize,
    baseline_accuracy: f64,
    accuracy: f64,
    correct: usize,
    total: usize,
    degenerate: usize,
}

#[derive(Serialize)]
struct MaskHeader<'a> {
    header: MaskHeaderBody<'a>,
}

#[derive(Serialize)]
struct MaskHeaderBody<'a> {
    provenance: &'a Provenance,
    spec: &'a FaultSpec,
    model: &'a str,
}

pub fn inject(cfg: &RunConfig, args: &InjectArgs) -> Result<(), CliError> {
    let inputs = load_inputs(cfg)?;
    let prov = Provenance::new(cfg, "inject");
    let model = &inputs.model;
    let (mask, spec) = match &args.mask_file {
        Some(path) => {
            if !path.is_file() {
                return Err(CliError::Config(format!("mask file not found: {}", path.display())));
            }
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
            let mask = FaultMask::from_jsonl(&text).context(&format!("parsing {}", path.display()))?;
            (mask, None)
        }
        None => {
            let scope = match (&args.layer, args.network) {
                (Some(l), _) => parse_scope(model, l)?,
                (None, true) => FaultScope::Network,
                (None, false) => return Err(CliError::Config("pass --layer or --network".into())),
            };
            let spec = FaultSpec {
                rate: args.rate.ok_or_else(|| CliError::Config("--rate is required".into()))?,
                scope,
                seed: cfg.seed,
                trial_id: args.trial,
                include_biases: cfg.sweep.include_biases,
            };
            (draw_mask(model, &spec).context("drawing mask")?, Some(spec))
        }
    };
    let ev = Evaluator::new(model, &inputs.evaluation).context("evaluation")?;
    let clean = ev.clean();
    let faulty = ev.evaluate(&mask).context("evaluation")?;
    let out_dir = cfg.resolve(&cfg.out_dir);
    ensure_dir(&out_dir)?;
    write_json(
        &out_dir.join("inject.json"),
        &InjectDoc {
            schema: INJECT_SCHEMA,
            provenance: &prov,
            rate: spec.map(|s| s.rate),
            scope: spec.map(|s| s.scope),
            trial: args.trial,
            mask_source: if spec.is_some() { "drawn" } else { "file" },
            flips: mask.len(),
            baseline_accuracy: clean.accuracy(),
            accuracy: faulty.accuracy(),
            correct: faulty.correct,
            total: faulty.total,
            degenerate: faulty.degenerate,
        },
    )?;
    if args.emit_mask {
        let spec = spec.ok_or_else(|| CliError::Config("--emit-mask needs a drawn mask, not --mask-file".into()))?;
        let header = MaskHeader {
            header: MaskHeaderBody {
                provenance: &prov,
                spec: &spec,
                model: &model.name,
            },
        };
        let mut text = serde_json::to_string(&header).map_err(|e| CliError::Internal(e.to_string()))?;
        text.push('\n');
        text.push_str(&mask.to_jsonl());
        write_text(&out_dir.join("mask.jsonl"), &text)?;
    }
    println!("flips {}", mask.len());
    println!("baseline {:.6}", clean.accuracy());
    println!("accuracy {:.6}", faulty.accuracy());
    log_run(&out_dir, &prov, &format!("flips={} accuracy={}", mask.len(), faulty.accuracy()));
    Ok(())
}
