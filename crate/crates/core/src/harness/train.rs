//! Training loop, cross-validated runs, checkpoint evaluation and the
//! ablation sweep.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::classifier_head::predict_probability;
use crate::encoders::ModelDims;
use crate::error::{Error, Result};
use crate::harness::checkpoint::{archive_params, restore_params, Checkpoint, RngState, CHECKPOINT_FORMAT};
use crate::harness::config::{Mode, Precision, RunConfig};
use crate::harness::folds::{all_cases_split, make_folds, FoldSplit};
use crate::harness::model::{prompt_seed, Model};
use crate::harness::report::{render_table, table_row, AblationTable};
use crate::losses::{class_weights, LossBreakdown};
use crate::metrics::{self, ClaScores, SegAggregate, SegScores};
use crate::nn::{Ctx, ParamStore};
use crate::optim::{clip_global_norm, AdamW};
use crate::raster::BinaryMask;
use crate::synth_data::{load_dataset, write_json, CaseRecord, DatasetManifest};

/// One optimizer step's batch-mean loss terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub fold: usize,
    pub epoch: usize,
    pub step: u64,
    pub batch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: String,
    pub label: u8,
    pub p_poor: Option<f64>,
    pub seg: Option<SegScores>,
    /// DSC of the finest valid mask against the ground truth at the decoder grid.
    pub vm0_dsc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold_index: usize,
    pub n_train: usize,
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub seg: Option<SegAggregate>,
    pub cla: Option<ClaScores>,
    pub vm0_dsc: f64,
    pub cases: Vec<CaseResult>,
}

/// Arithmetic means over folds of each fold-level metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanScores {
    pub dsc: Option<f64>,
    pub jaccard: Option<f64>,
    pub hd95: Option<f64>,
    pub pro: Option<f64>,
    pub pooled_dsc: Option<f64>,
    pub pooled_jaccard: Option<f64>,
    pub acc: Option<f64>,
    pub rec: Option<f64>,
    pub pre: Option<f64>,
    pub auc: Option<f64>,
    pub vm0_dsc: f64,
}

/// Scores over the union of every validation case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledScores {
    pub seg: Option<SegAggregate>,
    pub cla: Option<ClaScores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub positive_class: String,
    pub primary_aggregate: String,
    pub definitions: std::collections::BTreeMap<String, String>,
}

impl Default for ReportMetadata {
    fn default() -> Self {
        Self {
            positive_class: "poor prognosis (label 1)".into(),
            primary_aggregate: "mean over folds of per-fold macro scores; pooled scores over all validation cases also given".into(),
            definitions: metrics::definitions()
                .into_iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub config: RunConfig,
    pub metadata: ReportMetadata,
    pub folds: Vec<FoldReport>,
    pub mean: MeanScores,
    pub pooled: PooledScores,
    pub steps_log: String,
    pub wall_time_s: f64,
}

fn mean_of(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn mean_scores(folds: &[FoldReport]) -> MeanScores {
    let seg = |f: fn(&SegAggregate) -> Option<f64>| mean_of(folds.iter().map(|r| r.seg.as_ref().and_then(f)));
    let cla = |f: fn(&ClaScores) -> Option<f64>| mean_of(folds.iter().map(|r| r.cla.as_ref().and_then(f)));
    MeanScores {
        dsc: seg(|s| Some(s.dsc)),
        jaccard: seg(|s| Some(s.jaccard)),
        hd95: seg(|s| s.hd95),
        pro: seg(|s| s.pro),
        pooled_dsc: seg(|s| Some(s.pooled_dsc)),
        pooled_jaccard: seg(|s| Some(s.pooled_jaccard)),
        acc: cla(|c| Some(c.acc)),
        rec: cla(|c| Some(c.rec)),
        pre: cla(|c| Some(c.pre)),
        auc: cla(|c| c.auc),
        vm0_dsc: mean_of(folds.iter().map(|r| Some(r.vm0_dsc))).unwrap_or(0.0),
    }
}

fn pooled_scores(folds: &[FoldReport]) -> Result<PooledScores> {
    let cases: Vec<&CaseResult> = folds.iter().flat_map(|f| &f.cases).collect();
    let segs: Vec<SegScores> = cases.iter().filter_map(|c| c.seg.clone()).collect();
    let probs: Vec<f64> = cases.iter().filter_map(|c| c.p_poor).collect();
    let labels: Vec<u8> = cases.iter().filter(|c| c.p_poor.is_some()).map(|c| c.label).collect();
    Ok(PooledScores {
        seg: if segs.is_empty() { None } else { Some(metrics::aggregate_seg(&segs)?) },
        cla: if probs.is_empty() {
            None
        } else {
            Some(metrics::classification_scores(&probs, &labels)?)
        },
    })
}

/// Inference over `cases` with the model's current parameters.
pub fn evaluate_cases<T: Scalar>(model: &Model<T>, cases: &[&CaseRecord], seed: u64) -> Result<Vec<CaseResult>> {
    let wiring = model.mode.wiring();
    let no_grad = vec![false; model.store.len()];
    let (h, w) = (model.dims.image_height, model.dims.image_width);
    let (rh, rw) = model.dims.decoder_size();
    cases
        .iter()
        .map(|case| {
            let mut cx = Ctx::new(&model.store, &no_grad);
            let out = model.forward(&mut cx, case, prompt_seed(seed, &case.case_id))?;
            let seg = if wiring.seg {
                let s = cx.g.value(out.stages.s).to_f64();
                let pred = BinaryMask::from_probabilities(w, h, &s, 0.5);
                Some(metrics::seg_scores(&pred, &case.gt_mask)?)
            } else {
                None
            };
            let p_poor = match out.logits {
                Some(l) => {
                    let v = cx.g.value(l).to_f64();
                    Some(
                        predict_probability([v[0], v[1]])
                            .map_err(|e| Error::Numeric(format!("case {}: {e}", case.case_id)))?
                            .1,
                    )
                }
                None => None,
            };
            let vm = cx.g.value(out.vms[0]).to_f64();
            let vm0 = BinaryMask::from_probabilities(rw, rh, &vm, 0.5);
            let vm0_dsc = metrics::dsc(&vm0, &case.gt_mask.downsample_area(rw, rh))? / 100.0;
            Ok(CaseResult {
                case_id: case.case_id.clone(),
                label: case.label,
                p_poor,
                seg,
                vm0_dsc,
            })
        })
        .collect()
}

fn summarize(fold_index: usize, n_train: usize, steps: u64, final_loss: Option<f64>, cases: Vec<CaseResult>) -> Result<FoldReport> {
    let segs: Vec<SegScores> = cases.iter().filter_map(|c| c.seg.clone()).collect();
    let probs: Vec<f64> = cases.iter().filter_map(|c| c.p_poor).collect();
    let labels: Vec<u8> = cases.iter().map(|c| c.label).collect();
    Ok(FoldReport {
        fold_index,
        n_train,
        steps,
        final_loss,
        seg: if segs.is_empty() { None } else { Some(metrics::aggregate_seg(&segs)?) },
        cla: if probs.is_empty() {
            None
        } else {
            Some(metrics::classification_scores(&probs, &labels)?)
        },
        vm0_dsc: cases.iter().map(|c| c.vm0_dsc).sum::<f64>() / cases.len().max(1) as f64,
        cases,
    })
}

/// Everything a finished fold leaves behind.
pub struct FoldRun<T: Scalar> {
    pub model: Model<T>,
    pub initial: ParamStore<T>,
    pub optimizer: AdamW<T>,
    pub report: FoldReport,
    pub rng: RngState,
    pub losses: Vec<f64>,
}

fn lookup<'a>(index: &HashMap<&str, &'a CaseRecord>, ids: &[String]) -> Result<Vec<&'a CaseRecord>> {
    ids.iter()
        .map(|id| {
            index
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::data(id, "case not found in dataset"))
        })
        .collect()
}

/// Trains one fold from a fresh initialisation and evaluates it on the
/// validation ids. `log` sees every step record before any abort.
pub fn train_fold<T: Scalar>(
    cfg: &RunConfig,
    data: &DatasetManifest,
    split: &FoldSplit,
    log: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<FoldRun<T>> {
    cfg.validate()?;
    let dims = ModelDims::for_image(data.image_height, data.image_width);
    let mut model = Model::<T>::new(cfg, dims)?;
    let initial = model.store.clone();
    let index: HashMap<&str, &CaseRecord> = data.cases.iter().map(|c| (c.case_id.as_str(), c)).collect();
    let train = lookup(&index, &split.train_ids)?;
    let val = lookup(&index, &split.val_ids)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data {
            case_id: None,
            message: format!("fold {} has an empty split", split.fold_index),
        });
    }
    let mut weights = cfg.loss_weights();
    if cfg.mode.wiring().cla {
        let labels: Vec<u8> = train.iter().map(|c| c.label).collect();
        weights.xi = class_weights(&labels)?;
    }
    let mut opt = AdamW::<T>::new(cfg.optimizer(), model.store.len());
    let mut step = 0u64;
    let mut losses = Vec::new();
    let mut next_epoch = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(((split.fold_index as u64) << 32) | epoch as u64);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let mut sum: Vec<Option<Vec<T>>> = vec![None; model.store.len()];
            let mut parts = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let case = train[i];
                let mut cx = Ctx::new(&model.store, &model.trainable);
                let out = model.forward(&mut cx, case, prompt_seed(cfg.seed, &case.case_id))?;
                let (total, b) = match model.case_loss(&mut cx, &out, case, &weights, cfg.mta_variant) {
                    Ok(v) => v,
                    Err(e @ Error::Numeric(_)) => {
                        log(&StepRecord {
                            fold: split.fold_index,
                            epoch,
                            step,
                            batch: chunk.len(),
                            loss: LossBreakdown::default(),
                            grad_norm: f64::NAN,
                            error: Some(e.to_string()),
                        })?;
                        return Err(Error::Numeric(format!("fold {} step {step}: {e}", split.fold_index)));
                    }
                    Err(e) => return Err(e),
                };
                for (acc, g) in sum.iter_mut().zip(cx.param_grads(total)) {
                    if let Some(g) = g {
                        match acc {
                            Some(a) => a.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                            None => *acc = Some(g),
                        }
                    }
                }
                parts.push(b);
            }
            let inv = T::of(1.0 / chunk.len() as f64);
            for g in sum.iter_mut().flatten() {
                g.iter_mut().for_each(|v| *v = *v * inv);
            }
            let loss = batch_mean(&parts, &weights)?;
            let grad_norm = clip_global_norm(&mut sum, cfg.grad_clip);
            let record = StepRecord {
                fold: split.fold_index,
                epoch,
                step,
                batch: chunk.len(),
                loss,
                grad_norm,
                error: None,
            };
            if !grad_norm.is_finite() {
                let record = StepRecord {
                    error: Some(format!("gradient norm {grad_norm}")),
                    ..record
                };
                log(&record)?;
                return Err(Error::Numeric(format!(
                    "fold {} step {step}: non-finite gradient",
                    split.fold_index
                )));
            }
            log(&record)?;
            losses.push(record.loss.total);
            opt.step(&mut model.store, &sum, &model.trainable);
            step += 1;
        }
        next_epoch = epoch + 1;
    }
    let results = evaluate_cases(&model, &val, cfg.seed)?;
    let report = summarize(split.fold_index, train.len(), step, losses.last().copied(), results)?;
    Ok(FoldRun {
        model,
        initial,
        optimizer: opt,
        report,
        rng: RngState {
            seed: cfg.seed,
            fold: split.fold_index,
            next_epoch,
            steps_taken: step,
        },
        losses,
    })
}

fn batch_mean(parts: &[LossBreakdown], w: &crate::losses::LossWeights) -> Result<LossBreakdown> {
    let n = parts.len() as f64;
    let avg = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
    let scales = parts.first().map_or(0, |p| p.seg_per_scale.len());
    let per_scale = (0..scales)
        .map(|i| {
            (
                parts.iter().map(|p| p.seg_per_scale[i].0).sum::<f64>() / n,
                parts.iter().map(|p| p.seg_per_scale[i].1).sum::<f64>() / n,
            )
        })
        .collect();
    crate::losses::total_loss(per_scale, avg(|p| p.seg_total), avg(|p| p.cla), avg(|p| p.mta), w)
}

pub fn splits_for(cfg: &RunConfig, data: &DatasetManifest) -> Result<Vec<FoldSplit>> {
    let ids: Vec<String> = data.cases.iter().map(|c| c.case_id.clone()).collect();
    if cfg.train_on_all {
        return Ok(vec![all_cases_split(&ids)]);
    }
    make_folds(&ids, &data.labels(), cfg.folds, cfg.seed)
}

fn checkpoint_of<T: Scalar>(cfg: &RunConfig, data: &DatasetManifest, split: &FoldSplit, run: &FoldRun<T>) -> Checkpoint {
    Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        config: cfg.clone(),
        fold: split.fold_index,
        image_height: data.image_height,
        image_width: data.image_width,
        train_ids: split.train_ids.clone(),
        val_ids: split.val_ids.clone(),
        params: archive_params(&run.model.store),
        optimizer: run.optimizer.state(),
        rng: run.rng,
    }
}

fn run_folds<T: Scalar>(
    cfg: &RunConfig,
    data: &DatasetManifest,
    splits: &[FoldSplit],
    log: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<Vec<FoldReport>> {
    let mut out = Vec::new();
    for split in splits {
        let run = train_fold::<T>(cfg, data, split, log)?;
        if cfg.save_checkpoints {
            let dir = cfg.run_dir.join("checkpoints");
            checkpoint_of(cfg, data, split, &run).save(&dir.join(format!("fold{}.ckpt", split.fold_index)))?;
        }
        out.push(run.report);
    }
    Ok(out)
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Cross-validated training run writing the full run directory.
pub fn train(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let started = Instant::now();
    let data = load_dataset(&cfg.dataset_dir)?;
    let splits = splits_for(cfg, &data)?;
    let dir = &cfg.run_dir;
    create_dir(dir)?;
    if cfg.save_checkpoints {
        create_dir(&dir.join("checkpoints"))?;
    }
    write_json(&dir.join("config.json"), cfg)?;
    write_json(&dir.join("folds.json"), &splits)?;
    crate::encoders::Vocab::standard().save(&dir.join("vocab.json"))?;
    let steps_path = dir.join("steps.jsonl");
    let file = File::create(&steps_path).map_err(|e| Error::io(&steps_path, e))?;
    let mut sink = BufWriter::new(file);
    let mut log = |r: &StepRecord| -> Result<()> {
        let line = serde_json::to_string(r).map_err(|e| Error::json(&steps_path, e))?;
        writeln!(sink, "{line}").map_err(|e| Error::io(&steps_path, e))
    };
    let result = match cfg.precision {
        Precision::Single => run_folds::<f32>(cfg, &data, &splits, &mut log),
        Precision::Double => run_folds::<f64>(cfg, &data, &splits, &mut log),
    };
    sink.flush().map_err(|e| Error::io(&steps_path, e))?;
    let folds = result?;
    let report = RunReport {
        mode: cfg.mode,
        config: cfg.clone(),
        metadata: ReportMetadata::default(),
        mean: mean_scores(&folds),
        pooled: pooled_scores(&folds)?,
        folds,
        steps_log: "steps.jsonl".into(),
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    write_report(dir, &report)?;
    Ok(report)
}

pub fn write_report(dir: &Path, report: &RunReport) -> Result<()> {
    write_json(&dir.join("report.json"), report)?;
    let path = dir.join("report.csv");
    fs::write(&path, per_case_csv(report)).map_err(|e| Error::io(&path, e))
}

/// One row per validation case.
pub fn per_case_csv(report: &RunReport) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    let mut s = String::from("mode,fold,case_id,label,p_poor,dsc,jaccard,hd95,hd95_sentinel,pro,vm0_dsc\n");
    for f in &report.folds {
        for c in &f.cases {
            let seg = c.seg.as_ref();
            s += &format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                report.mode,
                f.fold_index,
                c.case_id,
                c.label,
                opt(c.p_poor),
                opt(seg.map(|s| s.dsc)),
                opt(seg.map(|s| s.jaccard)),
                opt(seg.map(|s| s.hd95)),
                seg.map(|s| s.hd95_sentinel.to_string()).unwrap_or_default(),
                opt(seg.and_then(|s| s.pro)),
                c.vm0_dsc
            );
        }
    }
    s
}

/// Inference-only pass of a saved fold model. With `val_only`, restricts
/// to the checkpoint's validation ids; otherwise scores every case.
pub fn evaluate(checkpoint: &Path, dataset_dir: &Path, val_only: bool) -> Result<RunReport> {
    let started = Instant::now();
    let ck = Checkpoint::load(checkpoint)?;
    let data = load_dataset(dataset_dir)?;
    if (data.image_height, data.image_width) != (ck.image_height, ck.image_width) {
        return Err(Error::Data {
            case_id: None,
            message: format!(
                "dataset images are {}x{}, checkpoint expects {}x{}",
                data.image_width, data.image_height, ck.image_width, ck.image_height
            ),
        });
    }
    let ids: Vec<String> = if val_only {
        ck.val_ids.clone()
    } else {
        data.cases.iter().map(|c| c.case_id.clone()).collect()
    };
    let fold = match ck.config.precision {
        Precision::Single => evaluate_with::<f32>(&ck, &data, &ids)?,
        Precision::Double => evaluate_with::<f64>(&ck, &data, &ids)?,
    };
    let folds = vec![fold];
    Ok(RunReport {
        mode: ck.config.mode,
        config: ck.config.clone(),
        metadata: ReportMetadata::default(),
        mean: mean_scores(&folds),
        pooled: pooled_scores(&folds)?,
        folds,
        steps_log: String::new(),
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

fn evaluate_with<T: Scalar>(ck: &Checkpoint, data: &DatasetManifest, ids: &[String]) -> Result<FoldReport> {
    let dims = ModelDims::for_image(ck.image_height, ck.image_width);
    let mut model = Model::<T>::new(&ck.config, dims)?;
    restore_params(&mut model.store, &ck.params)?;
    let index: HashMap<&str, &CaseRecord> = data.cases.iter().map(|c| (c.case_id.as_str(), c)).collect();
    let cases = lookup(&index, ids)?;
    let results = evaluate_cases(&model, &cases, ck.config.seed)?;
    summarize(ck.fold, ck.train_ids.len(), ck.rng.steps_taken, None, results)
}

/// Runs every mode with the base config's seed and folds, each into
/// `run_dir/<mode>`, and writes the comparison table to `run_dir`.
pub fn ablate(base: &RunConfig) -> Result<AblationTable> {
    base.validate()?;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for mode in Mode::ALL {
        let cfg = RunConfig {
            mode,
            run_dir: base.run_dir.join(mode.name()),
            ..base.clone()
        };
        let report = train(&cfg)?;
        rows.push(table_row(&report));
        reports.push(PathBuf::from(mode.name()).join("report.json"));
    }
    let table = AblationTable { rows, reports };
    write_json(&base.run_dir.join("ablation.json"), &table)?;
    let csv = base.run_dir.join("ablation.csv");
    fs::write(&csv, table.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let txt = base.run_dir.join("ablation.txt");
    fs::write(&txt, render_table(&table.rows)).map_err(|e| Error::io(&txt, e))?;
    Ok(table)
}
