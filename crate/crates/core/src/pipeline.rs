//! The trained decoder as one artifact: encoder, boosted stumps and the
//! preprocessing settings they were fitted under, persisted in an SCBM file.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boost::{
    evaluate_seeded, loso_folds, project_latents_2d, select_rounds, silhouette, train_adaboost, train_lda,
    train_tree, BaselineScore, BoostError, Confusion, EvalReport, FoldReport, Level,
    QuantizedScore, Separation, Stump, StumpEnsemble, TrialSummary, ROUND_GRID,
};
use crate::cae::{
    self, encode, forward_quantized, load_model, quantize, save_model, write_model, ArchDescriptor, CaeError,
    CaeParams, EpochRecord, ModelFile, QuantMode, QuantizedParams, Tensor, TensorData, TrainConfig,
};
use crate::dataio::{PrepConfig, WindowSet};
use crate::dsp::Label;

const META: &str = "meta.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Cae(#[from] CaeError),
    #[error(transparent)]
    Boost(#[from] BoostError),
    #[error("model file: {0}")]
    Format(String),
    #[error("{0}")]
    Invalid(String),
}

/// Settings stored with the model so the runtime can reproduce the
/// preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineMeta {
    pub prep: PrepConfig,
    pub train: TrainConfig,
    pub rounds: usize,
    pub n_train_windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub prep: PrepConfig,
    pub train: TrainConfig,
    pub arch: ArchDescriptor,
    /// Share of each class held out for early stopping.
    pub val_fraction: f64,
    /// Fixed round count; `None` selects from the grid by cross-validation.
    pub rounds: Option<usize>,
    pub cv_folds: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            prep: PrepConfig::default(),
            train: TrainConfig::default(),
            arch: ArchDescriptor::default(),
            val_fraction: 0.2,
            rounds: None,
            cv_folds: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    pub cae: CaeParams,
    /// Reduced-precision encoder used in place of `cae` when present.
    pub quant: Option<QuantizedParams>,
    pub ensemble: StumpEnsemble,
    pub meta: PipelineMeta,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub history: Vec<EpochRecord>,
    pub rounds: usize,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
}

fn round_f32(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = *x as f32 as f64);
}

/// Per-class shuffled split; every class keeps at least one window on
/// each side when it has two or more.
pub fn stratified_split(labels: &[Label], val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for class in [Label::Rest, Label::Move] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let mut k = (idx.len() as f64 * val_fraction).round() as usize;
        if idx.len() >= 2 {
            k = k.clamp(1, idx.len() - 1);
        }
        val.extend_from_slice(&idx[..k.min(idx.len())]);
        train.extend_from_slice(&idx[k.min(idx.len())..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Trains encoder and ensemble on `set`. Weights, thresholds and votes are
/// rounded to their stored precision before use, so the returned pipeline
/// behaves exactly like one reloaded from disk.
pub fn train_pipeline(
    set: &WindowSet,
    cfg: &PipelineConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Pipeline, TrainSummary), PipelineError> {
    if set.is_empty() {
        return Err(PipelineError::Invalid("no training windows".into()));
    }
    let (train_idx, val_idx) = stratified_split(&set.labels, cfg.val_fraction, cfg.seed);
    let mut tcfg = cfg.train.clone();
    tcfg.seed = cfg.seed;
    let (mut params, history) =
        cae::train_with(&cfg.arch, &set.windows, &set.labels, (&train_idx, &val_idx), &tcfg, on_epoch)?;
    for t in params.tensors_mut() {
        round_f32(t);
    }
    let mut pipe = Pipeline {
        cae: params,
        quant: None,
        ensemble: StumpEnsemble::default(),
        meta: PipelineMeta { prep: cfg.prep.clone(), train: tcfg, rounds: 0, n_train_windows: set.len() },
    };
    let train_windows: Vec<_> = train_idx.iter().map(|&i| set.windows[i].view()).collect();
    let x = pipe.latents(&train_windows)?;
    let y: Vec<Label> = train_idx.iter().map(|&i| set.labels[i]).collect();
    let rounds = match cfg.rounds {
        Some(r) => r,
        None => select_rounds(x.view(), &y, &ROUND_GRID, cfg.cv_folds, cfg.seed)?,
    };
    let mut ens = train_adaboost(x.view(), &y, rounds)?;
    round_f32(&mut ens.alphas);
    ens.stumps.iter_mut().for_each(|s| s.threshold = s.threshold as f32 as f64);
    round_f32(&mut ens.error_curve);
    pipe.ensemble = ens;
    pipe.meta.rounds = rounds;
    Ok((pipe, TrainSummary { history, rounds, train_idx, val_idx }))
}

impl Pipeline {
    /// Latent vector of one z-scored window.
    pub fn encode(&self, window: ArrayView2<f64>) -> Result<Array1<f64>, PipelineError> {
        Ok(match &self.quant {
            Some(q) => forward_quantized(q, window)?,
            None => encode(&self.cae, window)?,
        })
    }

    /// Label and normalized vote margin in `[-1, 1]`.
    pub fn predict(&self, window: ArrayView2<f64>) -> Result<(Label, f64), PipelineError> {
        let z = self.encode(window)?;
        Ok(self.ensemble.predict(z.view()))
    }

    pub fn latents(&self, windows: &[ArrayView2<f64>]) -> Result<Array2<f64>, PipelineError> {
        let mut out = Array2::zeros((windows.len(), self.cae.arch.latent_dim));
        for (mut row, w) in out.rows_mut().into_iter().zip(windows) {
            row.assign(&self.encode(*w)?);
        }
        Ok(out)
    }

    /// Copy whose encoder runs at reduced precision.
    pub fn quantized(&self, calibration: &[ArrayView2<f64>], mode: QuantMode) -> Result<Self, PipelineError> {
        let mut q = self.clone();
        q.quant = Some(quantize(&self.cae, calibration, mode)?);
        Ok(q)
    }

    pub fn to_model_file(&self) -> Result<ModelFile, PipelineError> {
        let mut m = ModelFile::new(self.cae.arch.clone(), self.cae.seed);
        m.put_params(&self.cae, false);
        match &self.quant {
            Some(QuantizedParams { fp16: Some(half), .. }) => {
                for (slot, values) in half.slots().into_iter().zip(half.tensors()) {
                    m.put(Tensor::f16(format!("fp16.{}", slot.name), slot.shape, values));
                }
            }
            Some(q) => m.put_quantized(q),
            None => {}
        }
        let e = &self.ensemble;
        let t = e.stumps.len();
        let col = |f: &dyn Fn(&Stump) -> f64| e.stumps.iter().map(f).collect::<Vec<f64>>();
        m.put(Tensor::f32("boost.feature", vec![t], &col(&|s| s.feature as f64)));
        m.put(Tensor::f32("boost.threshold", vec![t], &col(&|s| s.threshold)));
        m.put(Tensor::f32("boost.polarity", vec![t], &col(&|s| s.polarity as f64)));
        m.put(Tensor::f32("boost.alpha", vec![t], &e.alphas));
        m.put(Tensor::f32("boost.error", vec![t], &e.error_curve));
        let meta = serde_json::to_vec(&self.meta).map_err(|e| PipelineError::Format(e.to_string()))?;
        m.put(Tensor::i8(META, vec![meta.len()], meta.into_iter().map(|b| b as i8).collect(), 1.0, 0));
        Ok(m)
    }

    pub fn from_model_file(m: &ModelFile) -> Result<Self, PipelineError> {
        let fmt = |s: &str| PipelineError::Format(s.to_string());
        let meta = match &m.require(META)?.data {
            TensorData::I8(bytes) => bytes.iter().map(|&b| b as u8).collect::<Vec<u8>>(),
            _ => return Err(fmt("meta.json must be a byte tensor")),
        };
        let meta: PipelineMeta = serde_json::from_slice(&meta).map_err(|e| PipelineError::Format(e.to_string()))?;
        let get = |name: &str| -> Result<Vec<f64>, PipelineError> { Ok(m.require(name)?.to_f64()) };
        let (feat, thr, pol, alpha, err) = (
            get("boost.feature")?,
            get("boost.threshold")?,
            get("boost.polarity")?,
            get("boost.alpha")?,
            get("boost.error")?,
        );
        let t = feat.len();
        if [thr.len(), pol.len(), alpha.len(), err.len()].iter().any(|&l| l != t) {
            return Err(fmt("ensemble tensors differ in length"));
        }
        let mut stumps = Vec::with_capacity(t);
        for i in 0..t {
            let feature = feat[i] as usize;
            if feat[i] < 0.0 || feature >= m.arch.latent_dim || !(pol[i] == 1.0 || pol[i] == -1.0) {
                return Err(fmt("stump out of range"));
            }
            stumps.push(Stump { feature, threshold: thr[i], polarity: pol[i] as i8 });
        }
        let ensemble = StumpEnsemble { stumps, alphas: alpha, n_rounds: t, seed: m.seed, error_curve: err };
        if m.is_half() {
            return Err(fmt("float encoder tensors must be f32"));
        }
        let cae = m.params()?;
        let quant = match m.get("q8.latent.weight") {
            Some(_) => m.quantized()?,
            None => m
                .get("fp16.latent.weight")
                .map(|_| -> Result<QuantizedParams, PipelineError> {
                    let mut half = ModelFile::new(m.arch.clone(), m.seed);
                    for t in m.tensors.iter().filter(|t| t.name.starts_with("fp16.")) {
                        let mut t = t.clone();
                        t.name = t.name.trim_start_matches("fp16.").to_string();
                        half.put(t);
                    }
                    Ok(QuantizedParams { mode: QuantMode::Fp16, arch: m.arch.clone(), int8: None, fp16: Some(half.params()?) })
                })
                .transpose()?,
        };
        Ok(Self { cae, quant, ensemble, meta })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, PipelineError> {
        let mut buf = Vec::new();
        write_model(&mut buf, &self.to_model_file()?)?;
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        save_model(path, &self.to_model_file()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::from_model_file(&load_model(path)?)
    }
}

fn trial_summary(preds: &[Label], labels: &[Label], trials: &[usize]) -> Result<TrialSummary, PipelineError> {
    let r = evaluate_seeded(preds, labels, Level::Trial, Some(trials), 0)?;
    let (tp_rate, fp_rate) = r.confusion.rates();
    Ok(TrialSummary { n: r.n, accuracy: r.accuracy, ci95: r.ci95, tp_rate, fp_rate })
}

/// Window-level report of a fixed pipeline on `set`, with trial votes and
/// latent separation.
pub fn evaluate_pipeline(pipe: &Pipeline, set: &WindowSet, seed: u64) -> Result<EvalReport, PipelineError> {
    let views: Vec<_> = set.windows.iter().map(|w| w.view()).collect();
    let z = pipe.latents(&views)?;
    let preds: Vec<Label> = z.rows().into_iter().map(|r| pipe.ensemble.predict(r).0).collect();
    let mut report = evaluate_seeded(&preds, &set.labels, Level::Window, None, seed)?;
    report.trial_level = Some(trial_summary(&preds, &set.labels, &set.trials)?);
    report.separation = Some(separation(&z, set)?);
    Ok(report)
}

/// Silhouettes of the latents, of their principal plane and of the raw
/// flattened windows.
pub fn separation(latents: &Array2<f64>, set: &WindowSet) -> Result<Separation, PipelineError> {
    let proj = project_latents_2d(latents.view(), &set.labels)?;
    Ok(Separation {
        latent_silhouette: silhouette(latents.view(), &set.labels),
        raw_silhouette: silhouette(set.flattened().view(), &set.labels),
        latent_pca2_silhouette: proj.silhouette,
    })
}

/// Per-fold outcome of leave-one-subject-out evaluation.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub held_out: usize,
    pub test_idx: Vec<usize>,
    pub preds: Vec<Label>,
    pub quant_preds: Option<Vec<Label>>,
    pub baselines: Vec<(String, Vec<Label>)>,
    pub history: Vec<EpochRecord>,
    /// Separation of the held-out windows under the fold model.
    pub separation: Separation,
}

/// Retrains the whole pipeline once per held-out subject. With `quant` set,
/// each fold model is also quantized (calibrated on its own training
/// windows) and scored on the same held-out windows.
pub fn loso_evaluate(
    set: &WindowSet,
    names: &[String],
    cfg: &PipelineConfig,
    quant: Option<QuantMode>,
    mut on_fold: impl FnMut(&FoldOutcome),
) -> Result<EvalReport, PipelineError> {
    let folds = loso_folds(&set.subjects)?;
    let mut outcomes = Vec::with_capacity(folds.len());
    for fold in &folds {
        let train = set.subset(&fold.train);
        let (pipe, summary) = train_pipeline(&train, cfg, |_| {})?;
        let test_views: Vec<_> = fold.test.iter().map(|&i| set.windows[i].view()).collect();
        let zt = pipe.latents(&test_views)?;
        let sep = separation(&zt, &set.subset(&fold.test))?;
        let preds: Vec<Label> = zt.rows().into_iter().map(|r| pipe.ensemble.predict(r).0).collect();

        let train_views: Vec<_> = train.windows.iter().map(|w| w.view()).collect();
        let quant_preds = match quant {
            Some(mode) => {
                let q = pipe.quantized(&train_views, mode)?;
                Some(test_views.iter().map(|w| q.predict(*w).map(|p| p.0)).collect::<Result<Vec<_>, _>>()?)
            }
            None => None,
        };
        let fit_idx = &summary.train_idx;
        let zfit = pipe.latents(&fit_idx.iter().map(|&i| train_views[i]).collect::<Vec<_>>())?;
        let yfit: Vec<Label> = fit_idx.iter().map(|&i| train.labels[i]).collect();
        let mut baselines = Vec::new();
        if let Ok(lda) = train_lda(zfit.view(), &yfit, 0.1) {
            baselines.push(("lda".to_string(), zt.rows().into_iter().map(|r| lda.predict(r)).collect()));
        }
        let tree = train_tree(zfit.view(), &yfit, 5, 5)?;
        baselines.push(("tree".to_string(), zt.rows().into_iter().map(|r| tree.predict(r)).collect()));

        let out = FoldOutcome {
            held_out: fold.held_out,
            test_idx: fold.test.clone(),
            preds,
            quant_preds,
            baselines,
            history: summary.history,
            separation: sep,
        };
        on_fold(&out);
        outcomes.push(out);
    }

    let mut all_preds = vec![Label::Rest; set.len()];
    let mut fold_reports = Vec::new();
    for (k, o) in outcomes.iter().enumerate() {
        let labels: Vec<Label> = o.test_idx.iter().map(|&i| set.labels[i]).collect();
        let c = Confusion::from_pairs(&o.preds, &labels);
        fold_reports.push(FoldReport {
            fold: k,
            held_out: names.get(o.held_out).cloned().unwrap_or_else(|| o.held_out.to_string()),
            n: c.n(),
            accuracy: c.accuracy(),
            f1: c.f1(),
            macro_f1: c.macro_f1(),
        });
        for (&i, &p) in o.test_idx.iter().zip(&o.preds) {
            all_preds[i] = p;
        }
    }
    let mut report = evaluate_seeded(&all_preds, &set.labels, Level::Window, None, cfg.seed)?;
    report.mean_fold_accuracy =
        Some(fold_reports.iter().map(|f| f.accuracy).sum::<f64>() / fold_reports.len() as f64);
    report.folds = fold_reports;
    report.trial_level = Some(trial_summary(&all_preds, &set.labels, &set.trials)?);
    let mean = |f: &dyn Fn(&Separation) -> f64| outcomes.iter().map(|o| f(&o.separation)).sum::<f64>() / outcomes.len() as f64;
    report.separation = Some(Separation {
        latent_silhouette: mean(&|s| s.latent_silhouette),
        raw_silhouette: mean(&|s| s.raw_silhouette),
        latent_pca2_silhouette: mean(&|s| s.latent_pca2_silhouette),
    });

    let pooled = |pick: &dyn Fn(&FoldOutcome) -> Option<&Vec<Label>>| -> Option<f64> {
        let mut correct = 0;
        let mut n = 0;
        for o in &outcomes {
            let p = pick(o)?;
            correct += o.test_idx.iter().zip(p).filter(|(&i, &l)| set.labels[i] == l).count();
            n += p.len();
        }
        (n > 0).then(|| correct as f64 / n as f64)
    };
    if let Some(mode) = quant {
        if let Some(acc) = pooled(&|o| o.quant_preds.as_ref()) {
            report.quantized = Some(QuantizedScore {
                mode: mode.as_str().to_string(),
                accuracy: acc,
                accuracy_drop: report.accuracy - acc,
            });
        }
    }
    for name in ["lda", "tree"] {
        let acc = pooled(&|o| o.baselines.iter().find(|(n, _)| n == name).map(|(_, p)| p));
        if let Some(accuracy) = acc {
            report.baselines.push(BaselineScore { name: name.to_string(), accuracy });
        }
    }
    Ok(report)
}
