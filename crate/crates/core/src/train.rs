//! Training loop with validation-based checkpoint selection.
//!
//! Configuration is a `key = value` text file (`#` starts a comment) whose
//! entries can be overridden one by one, e.g. from command-line flags.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::autodiff::Tape;
use crate::data::io::load_dataset;
use crate::data::loader::{LoaderConfig, PrefetchLoader};
use crate::data::{normalize, AnnotatedImage, Sample};
use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::loss::{dm_count_loss, DmCountWeights, OtSettings};
use crate::model::{Ablation, Model, ModelConfig};
use crate::ops::Mode;
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::{Scalar, Tensor};

/// Lower bound applied to predicted cells before the loss so a prediction
/// with no mass can still be normalized.
pub const PREDICTION_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "32" => Ok(Precision::F32),
            "64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("precision must be 32 or 64, got {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub crop: usize,
    pub learning_rate: f64,
    /// Learning-rate factor per epoch.
    pub decay: f64,
    pub weight_decay: f64,
    pub lambda_ot: f64,
    pub lambda_tv: f64,
    /// `None` picks 1% of the mean transport cost.
    pub epsilon: Option<f64>,
    pub sinkhorn_iters: usize,
    pub sinkhorn_tolerance: f64,
    pub seed: u64,
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub ablation: Option<Ablation>,
    pub width: f64,
    pub checkpoint: PathBuf,
    pub log: Option<PathBuf>,
    /// Stop after this many epochs without a better validation MAE.
    pub patience: Option<usize>,
    pub precision: Precision,
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let ot = OtSettings::default();
        let w = DmCountWeights::default();
        TrainConfig {
            epochs: 100,
            batch_size: 8,
            crop: crate::data::DEFAULT_CROP,
            learning_rate: 1e-4,
            decay: 0.995,
            weight_decay: AdamWConfig::default().weight_decay,
            lambda_ot: w.lambda_ot,
            lambda_tv: w.lambda_tv,
            epsilon: ot.epsilon,
            sinkhorn_iters: ot.max_iters,
            sinkhorn_tolerance: ot.tolerance,
            seed: 0,
            train_dir: None,
            val_dir: None,
            ablation: None,
            width: 1.0,
            checkpoint: PathBuf::from("icc.ckpt"),
            log: None,
            patience: None,
            precision: Precision::F32,
            prefetch: 2,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl TrainConfig {
    /// Sets one entry by its file key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "crop" => self.crop = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "decay" => self.decay = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "lambda_ot" => self.lambda_ot = parse(key, value)?,
            "lambda_tv" => self.lambda_tv = parse(key, value)?,
            "epsilon" => self.epsilon = if value == "auto" { None } else { Some(parse(key, value)?) },
            "sinkhorn_iters" => self.sinkhorn_iters = parse(key, value)?,
            "sinkhorn_tolerance" => self.sinkhorn_tolerance = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "train_dir" => self.train_dir = Some(PathBuf::from(value)),
            "val_dir" => self.val_dir = Some(PathBuf::from(value)),
            "ablation" => self.ablation = if value == "none" { None } else { Some(value.parse()?) },
            "width" => self.width = parse(key, value)?,
            "checkpoint" => self.checkpoint = PathBuf::from(value),
            "log" => self.log = Some(PathBuf::from(value)),
            "patience" => self.patience = if value == "none" { None } else { Some(parse(key, value)?) },
            "precision" => self.precision = value.parse()?,
            "prefetch" => self.prefetch = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`; `source` names it in errors.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{source}:{}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("{source}:{}: {}", n + 1, e.to_string().trim_start_matches("configuration error: "))))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = TrainConfig::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay must lie in (0, 1], got {}", self.decay));
        }
        if self.crop == 0 || self.crop % crate::model::network::INPUT_MULTIPLE != 0 {
            return bad(format!("crop must be a positive multiple of 32, got {}", self.crop));
        }
        if self.lambda_ot < 0.0 || self.lambda_tv < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        if self.epsilon.is_some_and(|e| !(e > 0.0)) || self.sinkhorn_iters == 0 {
            return bad("Sinkhorn needs a positive epsilon and at least one iteration".into());
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { width_multiplier: self.width, seed: self.seed, ..ModelConfig::default() }.with_ablation(self.ablation)
    }

    fn weights(&self) -> DmCountWeights {
        DmCountWeights { lambda_ot: self.lambda_ot, lambda_tv: self.lambda_tv }
    }

    fn ot_settings(&self) -> OtSettings {
        OtSettings { epsilon: self.epsilon, max_iters: self.sinkhorn_iters, tolerance: self.sinkhorn_tolerance }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub counting: f64,
    pub ot: f64,
    pub tv: f64,
    pub val_mae: f64,
    pub lr: f64,
    pub improved: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub checkpoint: PathBuf,
}

#[derive(Default)]
struct Totals {
    loss: f64,
    counting: f64,
    ot: f64,
    tv: f64,
    items: usize,
}

/// One optimizer step on `batch`; returns per-batch sums of the loss terms.
fn train_step<T: Scalar>(model: &mut Model<T>, opt: &mut AdamW<T>, batch: &[Sample], cfg: &TrainConfig) -> Result<Totals> {
    let inputs = batch.iter().map(|s| normalize(&s.input.cast::<T>())).collect::<Result<Vec<_>>>()?;
    let mut tape = Tape::new();
    let pass = model.forward_taped(&mut tape, Tensor::stack(&inputs)?, Mode::Train)?;
    let out = tape.value(pass.output);
    out.ensure_finite("training prediction")?;
    let per_item = out.len() / batch.len();
    let mut seed = vec![0.0f64; out.len()];
    let mut totals = Totals::default();
    for (i, sample) in batch.iter().enumerate() {
        let mut yhat = DensityMap::from_tensor(out, i)?;
        yhat.values_mut().iter_mut().for_each(|v| *v = v.max(PREDICTION_FLOOR));
        // A crop without people has no distribution to match; only its count is penalized.
        let weights = if sample.target.count() > 0.0 { cfg.weights() } else { DmCountWeights { lambda_ot: 0.0, lambda_tv: 0.0 } };
        let l = dm_count_loss(&sample.target, &yhat, weights, cfg.ot_settings())?;
        if !l.total.is_finite() {
            return Err(Error::NonFinite(format!("training loss on {} is {}", sample.id, l.total)));
        }
        for (s, g) in seed[i * per_item..(i + 1) * per_item].iter_mut().zip(&l.grad) {
            *s = g / batch.len() as f64;
        }
        totals.loss += l.total;
        totals.counting += l.counting;
        totals.ot += l.ot;
        totals.tv += l.tv;
        totals.items += 1;
    }
    let seed = Tensor::from_f64(out.shape().to_vec(), &seed)?;
    let grads = tape.backward_from(pass.output, seed)?.into_params();
    opt.step(&mut model.params.params, &grads)?;
    model.update_running_stats(&tape, &pass);
    Ok(totals)
}

fn save_atomically<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("partial");
    model.save(&tmp)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Trains on in-memory images, validating on `val` after every epoch.
///
/// The checkpoint at `cfg.checkpoint` is rewritten whenever validation MAE
/// improves, so it always holds the best model seen. A non-finite loss aborts
/// the run and leaves that checkpoint in place.
pub fn train_on<T: Scalar>(
    cfg: &TrainConfig,
    train: Vec<AnnotatedImage>,
    val: &[AnnotatedImage],
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let mut model = Model::<T>::new(cfg.model_config())?;
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut opt = AdamW::new(AdamWConfig {
        learning_rate: cfg.learning_rate,
        decay: cfg.decay.powf(1.0 / steps_per_epoch as f64),
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    })?;
    let mut log = match &cfg.log {
        Some(p) => Some(fs::File::create(p)?),
        None => None,
    };
    let loader = LoaderConfig { batch_size: cfg.batch_size, crop: (cfg.crop, cfg.crop), seed: cfg.seed, shuffle: true };
    let images = Arc::new(train);
    let mut records = Vec::new();
    let (mut best_epoch, mut best_mae) = (0, f64::INFINITY);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let lr = opt.learning_rate();
        let mut sum = Totals::default();
        for batch in PrefetchLoader::new(Arc::clone(&images), loader, epoch as u64, cfg.prefetch)? {
            let t = train_step(&mut model, &mut opt, &batch?, cfg)?;
            sum.loss += t.loss;
            sum.counting += t.counting;
            sum.ot += t.ot;
            sum.tv += t.tv;
            sum.items += t.items;
        }
        let val_mae = evaluate(&model, val)?.mae;
        let improved = val_mae < best_mae;
        if improved {
            best_mae = val_mae;
            best_epoch = epoch;
            save_atomically(&model, &cfg.checkpoint)?;
        }
        let n = sum.items as f64;
        let record = EpochRecord {
            epoch,
            loss: sum.loss / n,
            counting: sum.counting / n,
            ot: sum.ot / n,
            tv: sum.tv / n,
            val_mae,
            lr,
            improved,
            seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&record).expect("serializable"))?;
        }
        progress(&record);
        records.push(record);
        if cfg.patience.is_some_and(|p| epoch - best_epoch >= p) {
            break;
        }
    }
    Ok(TrainReport { epochs: records, best_epoch, best_val_mae: best_mae, checkpoint: cfg.checkpoint.clone() })
}

/// Loads the configured datasets and trains at the configured precision.
pub fn train(cfg: &TrainConfig, progress: impl FnMut(&EpochRecord)) -> Result<TrainReport> {
    let dir = |d: &Option<PathBuf>, what: &str| {
        d.clone().ok_or_else(|| Error::Config(format!("{what} is not set")))
    };
    let train_set = load_dataset(&dir(&cfg.train_dir, "train_dir")?)?;
    let val_set = load_dataset(&dir(&cfg.val_dir, "val_dir")?)?;
    match cfg.precision {
        Precision::F32 => train_on::<f32>(cfg, train_set, &val_set, progress),
        Precision::F64 => train_on::<f64>(cfg, train_set, &val_set, progress),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic, SynthConfig};

    fn tiny_run(dir: &Path) -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 2,
            crop: 64,
            width: 0.125,
            sinkhorn_iters: 20,
            checkpoint: dir.join("best.ckpt"),
            log: Some(dir.join("log.jsonl")),
            ..TrainConfig::default()
        }
    }

    fn images(n: usize, seed: u64) -> Vec<AnnotatedImage> {
        generate_synthetic(&SynthConfig { count_range: (2, 8), height: 64, width: 64, n_images: n, seed }).unwrap()
    }

    #[test]
    fn key_value_file_with_overrides() {
        let mut cfg = TrainConfig::default();
        cfg.apply_text("# comment\nepochs = 3\n\nablation = no-inception  # trailing\nepsilon = 0.5\n", "t.cfg").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.ablation, Some(Ablation::NoInception));
        assert_eq!(cfg.epsilon, Some(0.5));
        cfg.set("epsilon", "auto").unwrap();
        assert_eq!(cfg.epsilon, None);
        let err = cfg.apply_text("epochs = 1\nbogus = 2\n", "t.cfg").unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("t.cfg:2")), "{err}");
        assert!(cfg.apply_text("epochs 4", "t.cfg").is_err());
        assert!(cfg.set("precision", "16").is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for (k, v) in [("learning_rate", "0"), ("epochs", "0"), ("batch_size", "0"), ("crop", "48")] {
            let mut cfg = TrainConfig::default();
            cfg.set(k, v).unwrap();
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{k}={v}");
        }
    }

    #[test]
    fn one_epoch_smoke() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run(dir.path());
        let report = train_on::<f32>(&cfg, images(3, 1), &images(1, 2), |_| {}).unwrap();
        assert_eq!(report.epochs.len(), 1);
        assert_eq!(report.best_epoch, 1);
        assert!(cfg.checkpoint.exists());
        let log = fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 1);
        let rec: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        for key in ["epoch", "loss", "counting", "ot", "tv", "val_mae", "lr"] {
            assert!(rec.get(key).is_some(), "{key}");
        }
        let model = Model::<f32>::load(&cfg.checkpoint).unwrap();
        assert_eq!(model.config, cfg.model_config());
    }

    #[test]
    fn fixed_seed_repeats_first_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run(dir.path());
        let a = train_on::<f64>(&cfg, images(2, 3), &images(1, 4), |_| {}).unwrap();
        let b = train_on::<f64>(&cfg, images(2, 3), &images(1, 4), |_| {}).unwrap();
        assert_eq!(a.epochs[0].loss, b.epochs[0].loss);
        assert_eq!(a.epochs[0].val_mae, b.epochs[0].val_mae);
    }

    #[test]
    fn selected_checkpoint_is_never_worse_than_first_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { epochs: 3, learning_rate: 1e-3, ..tiny_run(dir.path()) };
        let r = train_on::<f32>(&cfg, images(2, 5), &images(1, 6), |_| {}).unwrap();
        assert!(r.best_val_mae <= r.epochs[0].val_mae);
        let reloaded = Model::<f32>::load(&cfg.checkpoint).unwrap();
        let mae = evaluate(&reloaded, &images(1, 6)).unwrap().mae;
        assert!((mae - r.best_val_mae).abs() <= 1e-6 * (1.0 + mae));
    }

    #[test]
    fn non_finite_loss_keeps_last_good_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run(dir.path());
        train_on::<f32>(&cfg, images(2, 7), &images(1, 8), |_| {}).unwrap();
        let before = fs::read(&cfg.checkpoint).unwrap();
        let mut bad = images(2, 7);
        bad[0].image.data_mut()[0] = f32::NAN;
        bad[1].image.data_mut()[0] = f32::NAN;
        let cfg = TrainConfig { batch_size: 2, crop: 64, ..cfg };
        let err = train_on::<f32>(&cfg, bad, &images(1, 8), |_| {}).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
        assert_eq!(err.exit_code(), 4);
        assert_eq!(fs::read(&cfg.checkpoint).unwrap(), before);
    }
}
