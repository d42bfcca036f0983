//! Adam optimisation with per-epoch validation and best-epoch selection.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{
    extract_patch, filter_annotated_samples, load_dataset, DatasetManifest, Grid, ManifestEntry, PatchPair,
    PatchSampler, Sample, Split, VendorFilter, PATCH_COLS, PATCH_ROWS,
};
use crate::error::{Error, Result};
use crate::eval::{confusion, pr_curve, ConfusionCounts, DEFAULT_THRESHOLD};
use crate::graph::Graph;
use crate::losses::{objective_node, DiceReduction, Objective, DEFAULT_DICE_EPSILON};
use crate::models::{build_model, ArchConfig, Architecture, ForwardOptions, Model, OutputMode};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes
            .into_iter()
            .map(|n| (vec![T::zero(); n], vec![T::zero(); n]))
            .unzip();
        Self { m, v, step: 0 }
    }

    pub fn for_model(model: &Model<T>) -> Self {
        Self::new(model.parameters().iter().map(|p| p.tensor.numel()))
    }
}

/// One bias-corrected Adam update. Any non-finite gradient aborts before a
/// single parameter is touched.
pub fn adam_step<'p, T: Real + 'p>(
    params: impl IntoIterator<Item = &'p mut [T]>,
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if let Some((i, j)) = grads
        .iter()
        .enumerate()
        .find_map(|(i, g)| g.iter().position(|v| !v.is_finite()).map(|j| (i, j)))
    {
        return Err(Error::Divergence(format!(
            "non-finite gradient {:?} at element {j} of parameter #{i}",
            grads[i][j]
        )));
    }
    let params: Vec<&mut [T]> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::Shape(format!(
                "adam: parameter #{i} has {} values, gradient {}, moments {}",
                p.len(),
                g.len(),
                state.m[i].len()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let c1 = T::from_f64(1.0 - cfg.beta1.powi(t));
    let c2 = T::from_f64(1.0 - cfg.beta2.powi(t));
    let lr = T::from_f64(cfg.learning_rate);
    let eps = T::from_f64(cfg.eps);
    let one = T::one();
    for ((p, g), (m, v)) in params
        .into_iter()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for k in 0..p.len() {
            let gk = g[k];
            m[k] = b1 * m[k] + (one - b1) * gk;
            v[k] = b2 * v[k] + (one - b2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// How validation is scored each epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ValidationMode {
    /// Full-resolution inference on every validation image.
    #[default]
    FullImages,
    /// A fixed set of windows drawn once per validation image. Half of them
    /// are centred on annotated pixels so AP stays defined.
    Patches { per_image: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: Architecture,
    pub out_mode: OutputMode,
    pub loss: Objective,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Patches drawn from each training image per epoch.
    pub patches_per_image: usize,
    /// Fixed per-epoch patch budget overriding `patches_per_image`; each
    /// patch then comes from a uniformly chosen training image.
    pub patches_per_epoch: Option<usize>,
    pub vendors: VendorFilter,
    pub seed: u64,
    pub dice_epsilon: f64,
    pub dice_reduction: DiceReduction,
    /// Probability of centring a training patch on an annotated pixel.
    pub foreground_bias: f64,
    pub validation: ValidationMode,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            arch: Architecture::ResUNet,
            out_mode: OutputMode::default(),
            loss: Objective::CrossEntropy,
            epochs: 200,
            batch_size: 32,
            learning_rate: adam.learning_rate,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            patches_per_image: 50,
            patches_per_epoch: None,
            vendors: VendorFilter::Both,
            seed: 0,
            dice_epsilon: DEFAULT_DICE_EPSILON,
            dice_reduction: DiceReduction::Batch,
            foreground_bias: 0.0,
            validation: ValidationMode::FullImages,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn arch_config(&self) -> ArchConfig {
        ArchConfig::new(self.arch).with_out_mode(self.out_mode)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must lie in (0,1), got {b}"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if !(self.dice_epsilon > 0.0) {
            return bad(format!("dice_epsilon must be positive, got {}", self.dice_epsilon));
        }
        if !(0.0..=1.0).contains(&self.foreground_bias) {
            return bad(format!(
                "foreground_bias must lie in [0,1], got {}",
                self.foreground_bias
            ));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold must lie in (0,1), got {}", self.threshold));
        }
        if self.patches_per_epoch == Some(0) || (self.patches_per_epoch.is_none() && self.patches_per_image == 0) {
            return bad("the per-epoch patch budget must be positive".into());
        }
        if let ValidationMode::Patches { per_image: 0 } = self.validation {
            return bad("validation patches per image must be positive".into());
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("train config serialises")
    }
}

/// Where training patches come from.
#[derive(Clone, Copy, Debug)]
pub enum TrainingData<'a> {
    /// Fresh random windows every epoch.
    Images(&'a [Sample]),
    /// A fixed patch list, reshuffled every epoch.
    Patches(&'a [PatchPair]),
}

#[derive(Clone, Copy, Debug)]
pub enum ValidationData<'a> {
    Images(&'a [Sample]),
    Patches(&'a [PatchPair]),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dsc: f64,
    pub val_ap: f64,
    pub checkpoint_flag: bool,
}

/// Stacks single-channel windows into an `[N, 1, H, W]` tensor.
pub fn batch_tensor<'g, T: Real>(grids: impl IntoIterator<Item = &'g Grid<f32>>) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    let mut dims = None;
    let mut n = 0;
    for g in grids {
        match dims {
            None => dims = Some(g.dims()),
            Some(d) if d != g.dims() => {
                return Err(Error::Shape(format!("batch mixes {:?} and {:?} images", d, g.dims())))
            }
            _ => {}
        }
        data.extend(g.data().iter().map(|&v| T::from_f64(v as f64)));
        n += 1;
    }
    let (h, w) = dims.ok_or_else(|| Error::Shape("empty batch".into()))?;
    Tensor::new(vec![n, 1, h, w], data)
}

fn mask_tensor<T: Real>(patches: &[&PatchPair]) -> Result<Tensor<T>> {
    let data = patches
        .iter()
        .flat_map(|p| {
            p.y.pixels()
                .data()
                .iter()
                .map(|&v| if v == 1 { T::one() } else { T::zero() })
        })
        .collect();
    Tensor::new(vec![patches.len(), 1, PATCH_ROWS, PATCH_COLS], data)
}

/// Foreground probability map of one image.
pub fn predict<T: Real>(model: &Model<T>, image: &Grid<f32>) -> Result<Grid<f32>> {
    let _ftz = FlushDenormals::enable();
    let x = batch_tensor::<T>(std::iter::once(image))?;
    let p = model.predict_proba(&x)?;
    Grid::new(
        image.rows(),
        image.cols(),
        p.data().iter().map(|&v| Real::to_f64(v) as f32).collect(),
    )
}

/// Loads a checkpoint and predicts one image. If `expected` is given the
/// checkpoint's architecture must match it.
pub fn predict_from_checkpoint(path: &Path, expected: Option<Architecture>, image: &Grid<f32>) -> Result<Grid<f32>> {
    let model = load_checkpoint(path)?;
    if let Some(arch) = expected {
        if model.config().arch != arch {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds a {} model but {} was requested",
                model.config().arch,
                arch
            )));
        }
    }
    predict(&model, image)
}

/// Treats subnormal `f32`/`f64` values as zero on the current thread until
/// dropped. Saturated sigmoids otherwise push gradients into the subnormal
/// range, where x86 arithmetic is two orders of magnitude slower.
struct FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

impl FlushDenormals {
    #[allow(deprecated)]
    fn enable() -> Self {
        #[cfg(target_arch = "x86_64")]
        {
            use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
            const FTZ_DAZ: u32 = 0x8040;
            // SAFETY: only the FTZ and DAZ bits of the SSE control register change.
            let saved = unsafe { _mm_getcsr() };
            unsafe { _mm_setcsr(saved | FTZ_DAZ) };
            Self { saved }
        }
        #[cfg(not(target_arch = "x86_64"))]
        Self {}
    }
}

impl Drop for FlushDenormals {
    #[allow(deprecated)]
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        // SAFETY: restores the value read in `enable`.
        unsafe {
            std::arch::x86_64::_mm_setcsr(self.saved)
        };
    }
}

type Observer<'a> = Box<dyn FnMut(&ManifestEntry) + 'a>;

/// Epoch-at-a-time training driver over `f32` parameters.
pub struct Trainer<'a> {
    config: TrainConfig,
    model: Model<f32>,
    adam: AdamState<f32>,
    train: TrainingData<'a>,
    val_patches: Vec<PatchPair>,
    val_images: Option<&'a [Sample]>,
    sampler: PatchSampler,
    epoch: usize,
    best: Option<(f64, usize, Model<f32>)>,
    log: Vec<EpochRecord>,
    observer: Option<Observer<'a>>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, train: TrainingData<'a>, val: ValidationData<'a>) -> Result<Self> {
        config.validate()?;
        match train {
            TrainingData::Images([]) => return Err(Error::Data("training split is empty".into())),
            TrainingData::Patches([]) => return Err(Error::Data("training patch set is empty".into())),
            _ => {}
        }
        let (val_patches, val_images) = match (val, config.validation) {
            (ValidationData::Images([]), _) => return Err(Error::Data("validation split is empty".into())),
            (ValidationData::Patches([]), _) => return Err(Error::Data("validation patch set is empty".into())),
            (ValidationData::Patches(p), _) => (p.to_vec(), None),
            (ValidationData::Images(s), ValidationMode::FullImages) => (Vec::new(), Some(s)),
            (ValidationData::Images(s), ValidationMode::Patches { per_image }) => {
                let mut sampler = PatchSampler::new(config.seed ^ 0x5641_4c5f_5041_5443).with_foreground_bias(0.5)?;
                let mut out = Vec::with_capacity(s.len() * per_image);
                for (i, sample) in s.iter().enumerate() {
                    for _ in 0..per_image {
                        out.push(sampler.sample(&sample.scan.pixels, &sample.mask, i)?);
                    }
                }
                (out, None)
            }
        };
        let has_positive = match val_images {
            Some(s) => s.iter().any(|x| x.mask.positives() > 0),
            None => val_patches.iter().any(|p| p.y.positives() > 0),
        };
        if !has_positive {
            return Err(Error::Data(
                "validation data contains no annotated pixel, so validation AP is undefined".into(),
            ));
        }
        let model = build_model::<f32>(&config.arch_config(), config.seed)?;
        let adam = AdamState::for_model(&model);
        let sampler = PatchSampler::new(config.seed).with_foreground_bias(config.foreground_bias)?;
        Ok(Self {
            config,
            model,
            adam,
            train,
            val_patches,
            val_images,
            sampler,
            epoch: 0,
            best: None,
            log: Vec::new(),
            observer: None,
        })
    }

    /// Called with the manifest entry of every image a training patch is
    /// drawn from.
    pub fn set_observer(&mut self, f: impl FnMut(&ManifestEntry) + 'a) {
        self.observer = Some(Box::new(f));
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    /// Parameters of the epoch with the highest validation AP so far.
    pub fn best_model(&self) -> Option<&Model<f32>> {
        self.best.as_ref().map(|b| &b.2)
    }

    pub fn best_epoch(&self) -> Option<(usize, f64)> {
        self.best.as_ref().map(|b| (b.1, b.0))
    }

    pub fn log(&self) -> &[EpochRecord] {
        &self.log
    }

    pub fn into_parts(self) -> (Model<f32>, Option<Model<f32>>, Vec<EpochRecord>) {
        (self.model, self.best.map(|b| b.2), self.log)
    }

    fn epoch_patches(&mut self) -> Result<Vec<PatchPair>> {
        match self.train {
            TrainingData::Patches(p) => {
                let mut order: Vec<usize> = (0..p.len()).collect();
                order.shuffle(self.sampler.rng());
                Ok(order.into_iter().map(|i| p[i].clone()).collect())
            }
            TrainingData::Images(samples) => {
                let sources: Vec<usize> = match self.config.patches_per_epoch {
                    Some(k) => (0..k)
                        .map(|_| self.sampler.rng().random_range(0..samples.len()))
                        .collect(),
                    None => {
                        let mut s: Vec<usize> = (0..samples.len())
                            .flat_map(|i| std::iter::repeat_n(i, self.config.patches_per_image))
                            .collect();
                        s.shuffle(self.sampler.rng());
                        s
                    }
                };
                let mut out = Vec::with_capacity(sources.len());
                for i in sources {
                    let s = &samples[i];
                    if let Some(obs) = self.observer.as_mut() {
                        obs(&s.entry);
                    }
                    out.push(self.sampler.sample(&s.scan.pixels, &s.mask, i)?);
                }
                Ok(out)
            }
        }
    }

    /// Loss and parameter gradients of one batch, without updating.
    pub fn batch_gradients(&self, batch: &[&PatchPair]) -> Result<(f64, Vec<Vec<f32>>)> {
        let x = batch_tensor::<f32>(batch.iter().map(|p| &p.x))?;
        let y = mask_tensor::<f32>(batch)?;
        let mut g = Graph::new();
        let params = self.model.bind(&mut g);
        let xv = g.frozen(&x);
        let logits = self
            .model
            .forward_graph(&mut g, &params, xv, ForwardOptions::default())?;
        let loss = objective_node(
            &mut g,
            logits,
            &y,
            self.config.loss,
            self.config.out_mode,
            self.config.dice_epsilon as f32,
            self.config.dice_reduction,
        )?;
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Divergence(format!(
                "loss became {value} at epoch {}",
                self.epoch + 1
            )));
        }
        let mut grads = g.backward(loss)?;
        let grads = params
            .iter()
            .zip(self.model.parameters())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| vec![0.0; p.tensor.numel()]))
            .collect();
        Ok((value, grads))
    }

    /// One pass over this epoch's patches followed by validation.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let _ftz = FlushDenormals::enable();
        let patches = self.epoch_patches()?;
        let adam = self.config.adam();
        let mut loss_sum = 0.0;
        for chunk in patches.chunks(self.config.batch_size) {
            let refs: Vec<&PatchPair> = chunk.iter().collect();
            let (loss, grads) = self.batch_gradients(&refs)?;
            loss_sum += loss * chunk.len() as f64;
            let params = self.model.parameters_mut().iter_mut().map(|p| p.tensor.data_mut());
            adam_step(params, &grads, &mut self.adam, &adam).map_err(|e| match e {
                Error::Divergence(m) => Error::Divergence(format!("epoch {}: {m}", self.epoch + 1)),
                other => other,
            })?;
        }
        self.epoch += 1;
        let train_loss = loss_sum / patches.len() as f64;
        let (val_dsc, val_ap) = self.validate()?;
        let improved = self.best.as_ref().is_none_or(|b| val_ap > b.0);
        if improved {
            self.best = Some((val_ap, self.epoch, self.model.clone()));
        }
        let record = EpochRecord {
            epoch: self.epoch,
            train_loss,
            val_dsc,
            val_ap,
            checkpoint_flag: improved,
        };
        debug!(
            "epoch {} loss {:.6} val_dsc {:.4} val_ap {:.4}{}",
            record.epoch,
            train_loss,
            val_dsc,
            val_ap,
            if improved { " *" } else { "" }
        );
        self.log.push(record);
        Ok(record)
    }

    /// Pooled validation DSC (at the configured threshold) and AP.
    pub fn validate(&self) -> Result<(f64, f64)> {
        let mut scores: Vec<f32> = Vec::new();
        let mut labels: Vec<u8> = Vec::new();
        match self.val_images {
            Some(samples) => {
                for s in samples {
                    scores.extend(predict(&self.model, &s.scan.pixels)?.into_data());
                    labels.extend_from_slice(s.mask.pixels().data());
                }
            }
            None => {
                for chunk in self.val_patches.chunks(self.config.batch_size.max(1)) {
                    let x = batch_tensor::<f32>(chunk.iter().map(|p| &p.x))?;
                    scores.extend_from_slice(self.model.predict_proba(&x)?.data());
                    for p in chunk {
                        labels.extend_from_slice(p.y.pixels().data());
                    }
                }
            }
        }
        if let Some(bad) = scores.iter().find(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!("validation probability became {bad}")));
        }
        let counts: ConfusionCounts = confusion(&scores, &labels, self.config.threshold)?;
        let ap = pr_curve(&scores, &labels)?.ap;
        Ok((counts.dsc(), ap))
    }
}

pub const LOG_HEADER: &str = "epoch,train_loss,val_dsc,val_ap,checkpoint_flag";

pub fn write_log_csv(log: &[EpochRecord], path: &Path) -> Result<()> {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in log {
        writeln!(
            s,
            "{},{},{},{},{}",
            r.epoch,
            r.train_loss,
            r.val_dsc,
            r.val_ap,
            u8::from(r.checkpoint_flag)
        )
        .expect("writing to a String cannot fail");
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_log_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().collect::<Vec<_>>().join(",") != LOG_HEADER {
        return Err(Error::Data(format!("{} is not a training log", path.display())));
    }
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let f = |i: usize| -> Result<f64> {
            row.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Data(format!("bad field {i} in {}", path.display())))
        };
        out.push(EpochRecord {
            epoch: f(0)? as usize,
            train_loss: f(1)?,
            val_dsc: f(2)?,
            val_ap: f(3)?,
            checkpoint_flag: f(4)? != 0.0,
        });
    }
    Ok(out)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub best_model: Model<f32>,
    pub best_epoch: usize,
    pub best_val_ap: f64,
    pub log: Vec<EpochRecord>,
    pub checkpoint_path: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const LOG_FILE: &str = "train_log.csv";

/// Loads the annotated training and validation images of `manifest`
/// (restricted to `config.vendors`) and trains for `config.epochs` epochs.
///
/// With `out_dir`, the best checkpoint is rewritten whenever validation AP
/// improves and the log is rewritten after every epoch.
pub fn train(config: &TrainConfig, manifest: &DatasetManifest, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let train_set = filter_annotated_samples(load_dataset(manifest, config.vendors, &[Split::Train])?);
    let val_set = filter_annotated_samples(load_dataset(manifest, config.vendors, &[Split::Val])?);
    info!(
        "training {} / {} on {} train and {} val images ({} vendors)",
        config.arch,
        config.loss,
        train_set.len(),
        val_set.len(),
        config.vendors
    );
    train_on(
        config,
        TrainingData::Images(&train_set),
        ValidationData::Images(&val_set),
        out_dir,
    )
}

pub fn train_on(
    config: &TrainConfig,
    train: TrainingData<'_>,
    val: ValidationData<'_>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), train, val)?;
    let (ckpt, log_path) = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            (Some(d.join(CHECKPOINT_FILE)), Some(d.join(LOG_FILE)))
        }
        None => (None, None),
    };
    for _ in 0..config.epochs {
        let rec = trainer.run_epoch()?;
        if rec.checkpoint_flag {
            if let Some(p) = &ckpt {
                save_checkpoint(trainer.best_model().expect("best model after improvement"), p)?;
            }
        }
        if let Some(p) = &log_path {
            write_log_csv(trainer.log(), p)?;
        }
        info!(
            "epoch {}/{}: loss {:.5}, val DSC {:.4}, val AP {:.4}",
            rec.epoch, config.epochs, rec.train_loss, rec.val_dsc, rec.val_ap
        );
    }
    let (best_epoch, best_val_ap) = trainer.best_epoch().expect("at least one epoch ran");
    let (_, best, log) = trainer.into_parts();
    Ok(TrainOutcome {
        best_model: best.expect("at least one epoch ran"),
        best_epoch,
        best_val_ap,
        log,
        checkpoint_path: ckpt,
        log_path,
    })
}

/// Windows of `samples` that contain at least one annotated pixel, for
/// small fixed-patch experiments.
pub fn annotated_patches(samples: &[Sample], count: usize, seed: u64) -> Result<Vec<PatchPair>> {
    let mut sampler = PatchSampler::new(seed).with_foreground_bias(1.0)?;
    let annotated: Vec<usize> = (0..samples.len())
        .filter(|&i| samples[i].mask.positives() > 0)
        .collect();
    if annotated.is_empty() {
        return Err(Error::Data("no annotated image to draw patches from".into()));
    }
    (0..count)
        .map(|k| {
            let i = annotated[k % annotated.len()];
            sampler.sample(&samples[i].scan.pixels, &samples[i].mask, i)
        })
        .collect()
}

/// Re-extracts a patch from its recorded source and offset.
pub fn reextract(samples: &[Sample], p: &PatchPair) -> Result<PatchPair> {
    let s = samples
        .get(p.source)
        .ok_or_else(|| Error::InvalidArgument(format!("patch source {} out of range", p.source)))?;
    extract_patch(&s.scan.pixels, &s.mask, p.source, p.row, p.col)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(params: &mut [f64], grads: &[f64], state: &mut AdamState<f64>, cfg: &AdamConfig) -> Result<()> {
        adam_step(std::iter::once(params), &[grads.to_vec()], state, cfg)
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut w = vec![1.5, -2.0];
        let mut s = AdamState::<f64>::new([2]);
        run(&mut w, &[0.0, 0.0], &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(w, vec![1.5, -2.0]);
        assert_eq!(s.m[0], vec![0.0, 0.0]);
        assert_eq!(s.v[0], vec![0.0, 0.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn constant_gradient_steps_by_lr() {
        let cfg = AdamConfig {
            learning_rate: 0.01,
            ..AdamConfig::default()
        };
        let mut w = vec![0.0];
        let mut s = AdamState::<f64>::new([1]);
        let mut last = 0.0;
        for _ in 0..1000 {
            let before = w[0];
            run(&mut w, &[0.37], &mut s, &cfg).unwrap();
            last = before - w[0];
        }
        assert!((last / cfg.learning_rate - 1.0).abs() < 1e-3, "{last}");
    }

    #[test]
    fn quadratic_converges() {
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let mut w = vec![1.0];
        let mut s = AdamState::<f64>::new([1]);
        let mut reached = None;
        // Momentum makes w overshoot zero, so |w| is tracked per half-cycle
        // between sign changes.
        let mut peaks = vec![0.0f64];
        let mut sign = 1.0;
        for step in 1..=500 {
            let g = 2.0 * w[0];
            run(&mut w, &[g], &mut s, &cfg).unwrap();
            if w[0].signum() != sign {
                sign = w[0].signum();
                peaks.push(0.0);
            }
            let last = peaks.last_mut().unwrap();
            *last = last.max(w[0].abs());
            if w[0].abs() < 1e-3 {
                reached = Some(step);
                break;
            }
        }
        assert!(reached.is_some(), "|w| = {}", w[0].abs());
        assert!(peaks.len() >= 3);
        assert!(peaks.windows(2).all(|p| p[1] < p[0]), "{peaks:?}");
    }

    #[test]
    fn nan_gradient_aborts_untouched() {
        let mut w = vec![1.0, 2.0];
        let mut s = AdamState::<f64>::new([2]);
        let err = run(&mut w, &[0.1, f64::NAN], &mut s, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Divergence(_)));
        assert_eq!(w, vec![1.0, 2.0]);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn config_validation_and_toml() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.learning_rate), (200, 32, 1e-4));
        let back = TrainConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        let partial = TrainConfig::from_toml_str("arch = \"resunet_plus\"\nloss = \"dice\"\nepochs = 3\n").unwrap();
        assert_eq!(partial.arch, Architecture::ResUNetPlus);
        assert_eq!(partial.loss, Objective::Dice);
        assert_eq!(partial.batch_size, 32);
        assert!(TrainConfig::from_toml_str("epochs = 0").is_err());
        assert!(TrainConfig::from_toml_str("adam_beta1 = 1.0").is_err());
        assert!(TrainConfig::from_toml_str("bogus = 1").is_err());
        let v = TrainConfig::from_toml_str("[validation]\nmode = \"patches\"\nper_image = 4\n").unwrap();
        assert_eq!(v.validation, ValidationMode::Patches { per_image: 4 });
    }

    #[test]
    fn log_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let log = vec![
            EpochRecord {
                epoch: 1,
                train_loss: 0.693,
                val_dsc: 0.1,
                val_ap: 0.2,
                checkpoint_flag: true,
            },
            EpochRecord {
                epoch: 2,
                train_loss: 0.5,
                val_dsc: 0.3,
                val_ap: 0.15,
                checkpoint_flag: false,
            },
        ];
        let p = dir.path().join("log.csv");
        write_log_csv(&log, &p).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with(LOG_HEADER));
        assert_eq!(read_log_csv(&p).unwrap(), log);
    }
}
