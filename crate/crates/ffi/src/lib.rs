//! C ABI for loading datasets, training, prediction and checkpoints.
//!
//! Every function returns a `BotdgtStatus`; on failure the message is
//! available from `botdgt_last_error_message` on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use botdgt::autodiff::Tape;
use botdgt::cli::{load_trained, save_trained, CliError, ModelFile};
use botdgt::dataset::{Dataset, DatasetError, Manifest};
use botdgt::dyngraph::SnapshotConfig;
use botdgt::model::{
    evaluate, forward, init_params, train, Ablation, Metrics, ModelConfig, ModelError,
    ModelParams, Split, TrainingConfig, TrainingData,
};
use botdgt::synth::{generate, SynthConfig};

pub const BOTDGT_SPLIT_TRAIN: c_int = 0;
pub const BOTDGT_SPLIT_VAL: c_int = 1;
pub const BOTDGT_SPLIT_TEST: c_int = 2;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BotdgtStatus {
    Ok = 0,
    /// Null pointer, bad UTF-8, out-of-range value or undersized buffer.
    InvalidArgument = 1,
    Io = 2,
    /// Malformed input files or an inconsistent configuration.
    Validation = 3,
    /// Training loss became non-finite.
    Divergence = 4,
    /// Internal panic; the handle involved should not be reused.
    Panic = 5,
}

/// A loaded or generated dataset.
pub struct BotdgtDataset {
    inner: Dataset,
}

/// Trained parameters plus the configuration needed to rebuild the model.
pub struct BotdgtModel {
    file: ModelFile,
    params: ModelParams,
}

/// Training settings. Flags are 0 or 1.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct BotdgtTrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub hidden_dim: usize,
    pub structural_layers: usize,
    pub structural_heads: usize,
    pub temporal_heads: usize,
    pub classifier_hidden: usize,
    pub num_buckets: usize,
    pub seed: u64,
    pub residual: u8,
    pub no_temporal: u8,
    pub no_snapshot_embedding: u8,
    pub no_lcc_embedding: u8,
    pub no_blr_embedding: u8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct BotdgtMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
}

impl From<Metrics> for BotdgtMetrics {
    fn from(m: Metrics) -> Self {
        Self {
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            true_positives: m.true_positives,
            false_positives: m.false_positives,
            true_negatives: m.true_negatives,
            false_negatives: m.false_negatives,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(BotdgtStatus, String);

type Outcome<T = ()> = Result<T, Failure>;

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(BotdgtStatus::InvalidArgument, msg.into())
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        let status = match e {
            ModelError::Divergence { .. } => BotdgtStatus::Divergence,
            _ => BotdgtStatus::Validation,
        };
        Failure(status, e.to_string())
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } => Failure(BotdgtStatus::Io, e.to_string()),
            DatasetError::Model(m) => m.into(),
            _ => Failure(BotdgtStatus::Validation, e.to_string()),
        }
    }
}

impl From<CliError> for Failure {
    fn from(e: CliError) -> Self {
        match e {
            CliError::Dataset(d) => d.into(),
            CliError::Model(m) => m.into(),
            CliError::Io { .. } => Failure(BotdgtStatus::Io, e.to_string()),
            _ => Failure(BotdgtStatus::Validation, e.to_string()),
        }
    }
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn guard(f: impl FnOnce() -> Outcome) -> BotdgtStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BotdgtStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            BotdgtStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Outcome<PathBuf> {
    if p.is_null() {
        return Err(invalid("path is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| invalid("path is not valid UTF-8"))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Outcome<&'a T> {
    p.as_ref().ok_or_else(|| invalid(format!("{what} is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Outcome<&'a mut T> {
    p.as_mut().ok_or_else(|| invalid(format!("{what} is null")))
}

fn split_arg(split: c_int) -> Outcome<Split> {
    match split {
        BOTDGT_SPLIT_TRAIN => Ok(Split::Train),
        BOTDGT_SPLIT_VAL => Ok(Split::Val),
        BOTDGT_SPLIT_TEST => Ok(Split::Test),
        _ => Err(invalid(format!("unknown split {split}"))),
    }
}

fn flag(v: u8, name: &str) -> Outcome<bool> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(invalid(format!("{name} must be 0 or 1"))),
    }
}

/// Graph and training data rebuilt with the interval the model was trained on.
fn model_data(ds: &Dataset, file: &ModelFile) -> Outcome<TrainingData> {
    let snapshot = SnapshotConfig {
        interval_secs: file.interval_secs,
        ..ds.snapshot.clone()
    };
    let (graph, _, metrics) = ds.graph(Some(&snapshot))?;
    Ok(ds.training_data(&graph, &metrics, &file.model)?)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn botdgt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null after a success.
/// Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn botdgt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads the dataset described by the manifest at `manifest_path`.
///
/// # Safety
/// `manifest_path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn botdgt_dataset_load(manifest_path: *const c_char, out: *mut *mut BotdgtDataset) -> BotdgtStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let manifest = Manifest::load(&path_arg(manifest_path)?)?;
        let (inner, _) = Dataset::load(&manifest)?;
        *out = Box::into_raw(Box::new(BotdgtDataset { inner }));
        Ok(())
    })
}

/// Generates a synthetic dataset with the default community structure.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn botdgt_dataset_synth(
    humans: usize,
    bots: usize,
    snapshots: usize,
    camouflage: u8,
    seed: u64,
    out: *mut *mut BotdgtDataset,
) -> BotdgtStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let cfg = SynthConfig {
            num_humans: humans,
            num_bots: bots,
            camouflage: flag(camouflage, "camouflage")?,
            ..SynthConfig::separable(humans + bots, snapshots, seed)
        };
        let inner = generate(&cfg).map_err(|m| Failure(BotdgtStatus::Validation, m))?;
        *out = Box::into_raw(Box::new(BotdgtDataset { inner }));
        Ok(())
    })
}

/// Number of nodes in the dataset, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn botdgt_dataset_num_nodes(ds: *const BotdgtDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.num_nodes())
}

/// Writes the dataset files and `manifest.txt` into `dir`.
///
/// # Safety
/// `ds` must be a live dataset handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn botdgt_dataset_export(ds: *const BotdgtDataset, dir: *const c_char) -> BotdgtStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        ds.inner.export(&path_arg(dir)?)?;
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn botdgt_dataset_free(ds: *mut BotdgtDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Defaults matching the command-line tool.
#[no_mangle]
pub extern "C" fn botdgt_train_options_default() -> BotdgtTrainOptions {
    let m = ModelConfig::new(1, 1);
    let t = TrainingConfig::default();
    BotdgtTrainOptions {
        epochs: t.epochs,
        learning_rate: t.learning_rate,
        weight_decay: t.weight_decay,
        hidden_dim: m.hidden_dim,
        structural_layers: m.structural_layers,
        structural_heads: m.structural_heads,
        temporal_heads: m.temporal_heads,
        classifier_hidden: m.classifier_hidden,
        num_buckets: m.num_buckets,
        seed: 0,
        residual: 0,
        no_temporal: 0,
        no_snapshot_embedding: 0,
        no_lcc_embedding: 0,
        no_blr_embedding: 0,
    }
}

/// Trains on the dataset's train split, keeping the parameters with the best
/// validation F1.
///
/// # Safety
/// `ds` must be a live dataset handle, `opts` readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn botdgt_model_train(
    ds: *const BotdgtDataset,
    opts: *const BotdgtTrainOptions,
    out: *mut *mut BotdgtModel,
) -> BotdgtStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let ds = &handle(ds, "dataset")?.inner;
        let o = *handle(opts, "options")?;
        let (graph, _, metrics) = ds.graph(None)?;
        let mut model = ModelConfig::new(ds.feature_dim(), graph.num_snapshots());
        model.hidden_dim = o.hidden_dim;
        model.structural_layers = o.structural_layers;
        model.structural_heads = o.structural_heads;
        model.temporal_heads = o.temporal_heads;
        model.classifier_hidden = o.classifier_hidden;
        model.num_buckets = o.num_buckets;
        model.residual = flag(o.residual, "residual")?;
        model.ablation = Ablation {
            no_temporal: flag(o.no_temporal, "no_temporal")?,
            no_snapshot_embedding: flag(o.no_snapshot_embedding, "no_snapshot_embedding")?,
            no_lcc_embedding: flag(o.no_lcc_embedding, "no_lcc_embedding")?,
            no_blr_embedding: flag(o.no_blr_embedding, "no_blr_embedding")?,
        };
        let training = TrainingConfig {
            epochs: o.epochs,
            learning_rate: o.learning_rate,
            weight_decay: o.weight_decay,
            ..TrainingConfig::default()
        };
        let data = ds.training_data(&graph, &metrics, &model)?;
        let init = init_params(&model, o.seed)?;
        let outcome = train(&data, &model, &training, init, |_| {})?;
        let file = ModelFile {
            model,
            training,
            seed: o.seed,
            interval_secs: ds.snapshot.interval_secs,
        };
        *out = Box::into_raw(Box::new(BotdgtModel {
            file,
            params: outcome.params,
        }));
        Ok(())
    })
}

/// Writes the bot probability at the final snapshot for every node into
/// `out_p_bot`, which must hold `len >= num_nodes` values.
///
/// # Safety
/// Handles must be live and `out_p_bot` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn botdgt_model_predict(
    model: *const BotdgtModel,
    ds: *const BotdgtDataset,
    out_p_bot: *mut f64,
    len: usize,
) -> BotdgtStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let ds = &handle(ds, "dataset")?.inner;
        if out_p_bot.is_null() {
            return Err(invalid("output buffer is null"));
        }
        let n = ds.num_nodes();
        if len < n {
            return Err(invalid(format!("output buffer holds {len} values, need {n}")));
        }
        let data = model_data(ds, &model.file)?;
        let mut tape = Tape::new();
        let vars = model.params.map(&mut |t| tape.constant(t.clone()));
        let fwd = forward(&mut tape, &vars, &data.inputs, &model.file.model)?;
        let probs = tape.value(fwd.probs);
        let last = data.inputs.num_snapshots() - 1;
        let out = std::slice::from_raw_parts_mut(out_p_bot, n);
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = probs.get2(data.inputs.row(i, last), 1);
        }
        Ok(())
    })
}

/// Final-snapshot metrics over the labeled nodes of `split`.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn botdgt_model_evaluate(
    model: *const BotdgtModel,
    ds: *const BotdgtDataset,
    split: c_int,
    out: *mut BotdgtMetrics,
) -> BotdgtStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let model = handle(model, "model")?;
        let ds = &handle(ds, "dataset")?.inner;
        let split = split_arg(split)?;
        let data = model_data(ds, &model.file)?;
        *out = evaluate(&model.params, &data, split, &model.file.model)?.into();
        Ok(())
    })
}

/// Writes `checkpoint.bin` and `model.json` into `dir`, the layout the
/// command-line `eval` reads.
///
/// # Safety
/// `model` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn botdgt_model_save(model: *const BotdgtModel, dir: *const c_char) -> BotdgtStatus {
    guard(|| {
        let model = handle(model, "model")?;
        save_trained(&path_arg(dir)?, &model.file, &model.params)?;
        Ok(())
    })
}

/// Loads a model from a training output directory or a checkpoint inside it.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn botdgt_model_load(path: *const c_char, out: *mut *mut BotdgtModel) -> BotdgtStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let (file, params) = load_trained(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(BotdgtModel { file, params }));
        Ok(())
    })
}

/// Number of scalar parameters, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn botdgt_model_num_parameters(model: *const BotdgtModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.num_scalars())
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn botdgt_model_free(model: *mut BotdgtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
