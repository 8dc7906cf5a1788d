use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{
    crop_labels, generate_dataset, kfold_split, load_manifest, pad_to_multiple, zscore_normalize,
    Fold, VolumeSample,
};
use crate::error::{Error, Result};
use crate::metrics::{argmax_labels, combined_loss, evaluate_regions, Region};
use crate::model::{
    count_parameters, estimate_flops, model_forward, predict, read_checkpoint, write_checkpoint,
    FusionMode, ModelConfig, ModelParams,
};
use crate::seed::{derive_seed, digest_hex};
use crate::tensor::{Graph, Tensor};

use super::adam::{adam_step, AdamSettings, AdamState};
use super::config::RunConfig;
use super::report::{csv_field, MetricsReport, ReportRow};

pub const CHECKPOINT_FILE: &str = "checkpoint.hftc";
pub const LOSS_FILE: &str = "loss.csv";

/// A sample ready for the network: normalized and padded to a multiple of 16.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    pub sample: VolumeSample,
    /// Extents before padding; metrics are computed on this region.
    pub original: [usize; 3],
}

pub fn prepare_dataset(run: &RunConfig) -> Result<Vec<Prepared>> {
    let raw: Vec<(String, VolumeSample)> = match &run.manifest {
        Some(path) => load_manifest(path)?,
        None => generate_dataset(&run.phantom_config(), run.samples)?
            .into_iter()
            .enumerate()
            .map(|(i, s)| (format!("phantom{i:03}"), s))
            .collect(),
    };
    if raw.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    raw.into_iter()
        .map(|(id, s)| {
            let s = if run.normalize {
                zscore_normalize(&s)?
            } else {
                s
            };
            let (sample, original) = pad_to_multiple(&s, 16)?;
            if sample.num_modalities() != run.model.modalities
                || sample.extents() != run.model.extents
            {
                return Err(Error::Config(format!(
                    "sample `{id}` is {} × {:?} after padding, model expects {} × {:?}",
                    sample.num_modalities(),
                    sample.extents(),
                    run.model.modalities,
                    run.model.extents
                )));
            }
            Ok(Prepared {
                id,
                sample,
                original,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamSettings,
}

impl TrainSettings {
    pub fn from_run(run: &RunConfig) -> Self {
        Self {
            steps: run.steps,
            batch_size: run.batch_size,
            adam: run.adam,
        }
    }

    /// Stable text form; two runs with equal descriptors follow the same
    /// schedule over the same sample order.
    pub fn descriptor(&self, train: &[usize]) -> String {
        format!(
            "steps={} batch={} lr={:e} beta1={:e} beta2={:e} eps={:e} wd={:e} order=cyclic train={train:?}",
            self.steps,
            self.batch_size,
            self.adam.learning_rate,
            self.adam.beta1,
            self.adam.beta2,
            self.adam.eps,
            self.adam.weight_decay
        )
    }
}

/// Combined loss and parameter gradients for one sample.
pub fn sample_loss_and_grads(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    sample: &VolumeSample,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let x = g.constant(sample.modalities.clone());
    let out = model_forward(&mut g, x, cfg, &p)?;
    let loss = combined_loss(&mut g, out.probs, &sample.labels)?;
    let value = g.value(loss).item() as f64;
    let grads = g.backward(loss)?;
    Ok((value, p.iter().map(|(_, &v)| grads.get(v)).collect()))
}

/// Adam on the mean combined loss of `batch_size` samples per step, visiting
/// `data` cyclically. `on_step` sees each step's loss before the update.
pub fn train_model(
    cfg: &ModelConfig,
    data: &[&VolumeSample],
    settings: &TrainSettings,
    mut on_step: impl FnMut(usize, f64),
) -> Result<(ModelParams<f32>, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let mut params = ModelParams::<f32>::init(cfg)?;
    let mut state = AdamState::new(&params);
    let mut losses = Vec::with_capacity(settings.steps);
    let scale = 1.0 / settings.batch_size as f32;
    for step in 0..settings.steps {
        let mut total = 0.0;
        let mut acc: Vec<Tensor<f32>> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        for b in 0..settings.batch_size {
            let sample = data[(step * settings.batch_size + b) % data.len()];
            let (loss, grads) = match sample_loss_and_grads(&params, cfg, sample) {
                Err(Error::NonFinite { .. }) => return Err(Error::Divergence { step }),
                other => other?,
            };
            total += loss;
            for (a, g) in acc.iter_mut().zip(&grads) {
                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += scale * y;
                }
            }
        }
        let loss = total / settings.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { step });
        }
        on_step(step, loss);
        losses.push(loss);
        adam_step(&mut params, &acc, &mut state, &settings.adam)?;
    }
    Ok((params, losses))
}

pub fn loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(out, "{i},{l:.6}");
    }
    out
}

/// Model settings of a plain training run: the configured architecture seeded
/// by the run seed.
pub fn run_model_config(run: &RunConfig) -> ModelConfig {
    ModelConfig {
        seed: run.seed,
        ..run.model.clone()
    }
}

pub struct TrainOutput {
    pub params: ModelParams<f32>,
    pub losses: Vec<f64>,
    pub checkpoint: PathBuf,
}

/// Trains on every sample of the dataset and writes the checkpoint and loss
/// log into `out_dir`.
pub fn train(run: &RunConfig, mut on_step: impl FnMut(usize, f64)) -> Result<TrainOutput> {
    let data = prepare_dataset(run)?;
    let cfg = run_model_config(run);
    let samples: Vec<&VolumeSample> = data.iter().map(|p| &p.sample).collect();
    let (params, losses) =
        train_model(&cfg, &samples, &TrainSettings::from_run(run), &mut on_step)?;
    std::fs::create_dir_all(&run.out_dir)?;
    let checkpoint = run.out_dir.join(CHECKPOINT_FILE);
    write_checkpoint(&checkpoint, &cfg, &params)?;
    std::fs::write(run.out_dir.join(LOSS_FILE), loss_csv(&losses))?;
    Ok(TrainOutput {
        params,
        losses,
        checkpoint,
    })
}

/// Metrics rows for every sample in `data`, every region.
pub fn evaluate(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    data: &[&Prepared],
    regions: &[Region],
    fold: usize,
) -> Result<MetricsReport> {
    let mut rows = Vec::new();
    for p in data {
        let probs = predict(params, cfg, &p.sample.modalities)?;
        let pred = crop_labels(&argmax_labels(&probs, p.sample.spacing())?, p.original)?;
        let gt = crop_labels(&p.sample.labels, p.original)?;
        for m in evaluate_regions(&pred, &gt, regions, cfg.num_classes)? {
            rows.push(ReportRow {
                fold,
                mode: cfg.fusion.name(),
                sample: p.id.clone(),
                metrics: m,
            });
        }
    }
    Ok(MetricsReport { rows })
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_ROWS_FILE: &str = "metrics_per_sample.csv";

/// Evaluates a checkpoint on the run's dataset and writes the per-sample rows
/// and the region means into `out_dir`.
pub fn evaluate_checkpoint(run: &RunConfig, checkpoint: &Path) -> Result<MetricsReport> {
    let (cfg, params) = read_checkpoint(checkpoint)?;
    if cfg.modalities != run.model.modalities
        || cfg.extents != run.model.extents
        || cfg.num_classes != run.model.num_classes
    {
        return Err(Error::Config(format!(
            "checkpoint expects {} modalities, {} classes at {:?}; run config has {}, {} at {:?}",
            cfg.modalities,
            cfg.num_classes,
            cfg.extents,
            run.model.modalities,
            run.model.num_classes,
            run.model.extents
        )));
    }
    let data = prepare_dataset(run)?;
    let refs: Vec<&Prepared> = data.iter().collect();
    let report = evaluate(&params, &cfg, &refs, &run.regions, 0)?;
    std::fs::create_dir_all(&run.out_dir)?;
    std::fs::write(run.out_dir.join(METRICS_ROWS_FILE), report.rows_csv())?;
    std::fs::write(run.out_dir.join(METRICS_FILE), report.summary_csv())?;
    Ok(report)
}

/// Train/validation splits of a run; a single fold trains and validates on
/// every sample.
pub fn run_folds(run: &RunConfig, n: usize) -> Result<Vec<Fold>> {
    if run.folds == 1 {
        let all: Vec<usize> = (0..n).collect();
        return Ok(vec![Fold {
            train: all.clone(),
            validation: all,
        }]);
    }
    kfold_split(n, run.folds, derive_seed(run.seed, "split"))
}

/// Dice of the hybrid, early and middle fusion encoders on the four-modality
/// brain tumour benchmark, for side-by-side reporting.
pub fn reference_dice(mode: &FusionMode) -> Option<f64> {
    match mode {
        FusionMode::Hybrid => Some(83.52),
        FusionMode::Early => Some(83.06),
        FusionMode::Middle => Some(82.40),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationArm {
    pub mode: FusionMode,
    pub encoders: usize,
    pub parameters: usize,
    pub flops: u64,
    pub dice: f64,
    pub hd95_mm: f64,
    pub volume_similarity: f64,
    pub split_hash: String,
    pub schedule_hash: String,
}

pub struct AblationOutput {
    pub arms: Vec<AblationArm>,
    pub report: MetricsReport,
}

pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_ROWS_FILE: &str = "ablation_per_sample.csv";
pub const ABLATION_FOLDS_FILE: &str = "ablation_folds.csv";
pub const ABLATION_HEADER: &str =
    "mode,encoders,parameters,flops,dice,hd95_mm,volume_similarity,reference_dice,split_hash,schedule_hash";

pub fn ablation_csv(arms: &[AblationArm]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for a in arms {
        let reference = reference_dice(&a.mode)
            .map(|d| format!("{d:.2}"))
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.6},{},{},{}",
            csv_field(&a.mode.name()),
            a.encoders,
            a.parameters,
            a.flops,
            a.dice,
            a.hd95_mm,
            a.volume_similarity,
            reference,
            a.split_hash,
            a.schedule_hash
        );
    }
    out
}

/// Trains and evaluates every fusion mode on the same data, splits and
/// schedule. Each arm initializes from `hash(seed, mode)`.
pub fn run_ablation(run: &RunConfig, mut progress: impl FnMut(&str)) -> Result<AblationOutput> {
    let data = prepare_dataset(run)?;
    let settings = TrainSettings::from_run(run);
    let mut arms = Vec::new();
    let mut report = MetricsReport::default();
    for mode in &run.modes {
        let cfg = ModelConfig {
            fusion: mode.clone(),
            seed: derive_seed(run.seed, &mode.name()),
            ..run.model.clone()
        };
        cfg.validate()?;
        let folds = run_folds(run, data.len())?;
        let mut split_desc = String::new();
        let mut schedule_desc = String::new();
        let mut arm_rows = MetricsReport::default();
        for (f, fold) in folds.iter().enumerate() {
            let _ = writeln!(
                split_desc,
                "{f}: train={:?} val={:?}",
                fold.train, fold.validation
            );
            let _ = writeln!(schedule_desc, "{f}: {}", settings.descriptor(&fold.train));
            progress(&format!(
                "{} fold {f}: training on {} samples",
                mode.name(),
                fold.train.len()
            ));
            let train: Vec<&VolumeSample> = fold.train.iter().map(|&i| &data[i].sample).collect();
            let (params, _) = train_model(&cfg, &train, &settings, |_, _| {})?;
            let val: Vec<&Prepared> = fold.validation.iter().map(|&i| &data[i]).collect();
            arm_rows
                .rows
                .extend(evaluate(&params, &cfg, &val, &run.regions, f)?.rows);
        }
        let n = arm_rows.rows.len().max(1) as f64;
        let mean = |get: fn(&ReportRow) -> f64| arm_rows.rows.iter().map(get).sum::<f64>() / n;
        arms.push(AblationArm {
            mode: mode.clone(),
            encoders: cfg.fusion_spec()?.num_encoders(),
            parameters: count_parameters(&ModelParams::<f32>::init(&cfg)?),
            flops: estimate_flops(&cfg)?,
            dice: mean(|r| r.metrics.dice),
            hd95_mm: mean(|r| r.metrics.hd95_mm),
            volume_similarity: mean(|r| r.metrics.volume_similarity),
            split_hash: digest_hex(&split_desc),
            schedule_hash: digest_hex(&schedule_desc),
        });
        report.rows.extend(arm_rows.rows);
    }
    std::fs::create_dir_all(&run.out_dir)?;
    std::fs::write(run.out_dir.join(ABLATION_FILE), ablation_csv(&arms))?;
    std::fs::write(run.out_dir.join(ABLATION_ROWS_FILE), report.rows_csv())?;
    std::fs::write(run.out_dir.join(ABLATION_FOLDS_FILE), report.folds_csv())?;
    Ok(AblationOutput { arms, report })
}
