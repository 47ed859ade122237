//! C ABI over the `gcgm` engine.
//!
//! Every fallible call returns a [`GcgmStatus`]; on failure the message is
//! available from [`gcgm_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use gcgm::bdmcmc::{edge_posterior, Chain, ChainConfig, ChainInput, PosteriorAccumulator, RunOutputs};
use gcgm::dataset::{load_proximity, load_survey, load_trait_schema, ProximityData, SurveyDataset, SurveySchema};
use gcgm::diagnostics::{compute_dic, export_summaries, DicReport, GhkConfig};
use gcgm::graph_prior::Variant;
use gcgm::marginals::{Link, MarginalSet};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GcgmStatus {
    Ok = 0,
    /// Null pointer, bad UTF-8 or an index out of range.
    InvalidArgument = 1,
    /// The input files or settings were rejected.
    Validation = 2,
    /// Numerical or I/O failure while running.
    Runtime = 3,
    /// A panic was caught at the boundary.
    Panic = 4,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GcgmVariant {
    Intercepts = 0,
    InterceptsLatent = 1,
    InterceptsProximity = 2,
    Full = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GcgmLink {
    Logit = 0,
    Probit = 1,
}

/// Sampler settings.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct GcgmFitConfig {
    pub variant: GcgmVariant,
    pub link: GcgmLink,
    pub n_iterations: u64,
    pub burn_in: u64,
    pub thin: u64,
    pub seed: u64,
    /// 0 uses every core.
    pub threads: usize,
    pub n_deviance_draws: usize,
    /// Skip the DIC computation when false.
    pub compute_dic: bool,
}

/// A loaded survey with optional proximity data.
pub struct GcgmDataset {
    dataset: SurveyDataset,
    prox: Option<ProximityData>,
}

/// A finished fit.
pub struct GcgmFit {
    dataset: SurveyDataset,
    prox: Option<ProximityData>,
    marginals: MarginalSet,
    acc: PosteriorAccumulator,
    dic: Option<DicReport>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: GcgmStatus, msg: impl Into<String>) -> GcgmStatus {
    set_error(msg);
    status
}

fn from_core(e: gcgm::Error) -> GcgmStatus {
    let status = if e.is_validation() { GcgmStatus::Validation } else { GcgmStatus::Runtime };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> GcgmStatus) -> GcgmStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(GcgmStatus::Panic, format!("panic: {msg}"))
        }
    }
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, GcgmStatus> {
    if p.is_null() {
        return Err(fail(GcgmStatus::InvalidArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(GcgmStatus::InvalidArgument, format!("{name} is not valid UTF-8")))
}

impl From<GcgmVariant> for Variant {
    fn from(v: GcgmVariant) -> Self {
        match v {
            GcgmVariant::Intercepts => Variant::Intercepts,
            GcgmVariant::InterceptsLatent => Variant::InterceptsLatent,
            GcgmVariant::InterceptsProximity => Variant::InterceptsProximity,
            GcgmVariant::Full => Variant::Full,
        }
    }
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn gcgm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gcgm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Desk-scale defaults: 50000 iterations, 10000 burn-in, thinning 10.
#[no_mangle]
pub extern "C" fn gcgm_fit_config_default(variant: GcgmVariant, seed: u64) -> GcgmFitConfig {
    let c = ChainConfig::desk(variant.into(), seed);
    GcgmFitConfig {
        variant,
        link: GcgmLink::Logit,
        n_iterations: c.n_iterations,
        burn_in: c.burn_in,
        thin: c.thin,
        seed,
        threads: c.threads,
        n_deviance_draws: c.n_deviance_draws,
        compute_dic: true,
    }
}

/// Loads a survey CSV and trait schema; `proximity_path` may be null.
///
/// # Safety
/// Path arguments must be null or NUL-terminated strings; `out` must be a
/// valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn gcgm_dataset_load(
    data_path: *const c_char,
    schema_path: *const c_char,
    proximity_path: *const c_char,
    out: *mut *mut GcgmDataset,
) -> GcgmStatus {
    guard(|| {
        if out.is_null() {
            return fail(GcgmStatus::InvalidArgument, "out is null");
        }
        *out = ptr::null_mut();
        let data = match path_arg(data_path, "data_path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let schema = match path_arg(schema_path, "schema_path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let prox_path = if proximity_path.is_null() {
            None
        } else {
            match path_arg(proximity_path, "proximity_path") {
                Ok(p) => Some(p),
                Err(s) => return s,
            }
        };
        let traits = match load_trait_schema(&schema) {
            Ok(t) => t,
            Err(e) => return from_core(e),
        };
        let dataset = match load_survey(&data, &SurveySchema::from_traits(traits)) {
            Ok(l) => l.dataset,
            Err(e) => return from_core(e),
        };
        let prox = match prox_path.map(|p| load_proximity(p, &dataset.group_ids())).transpose() {
            Ok(p) => p,
            Err(e) => return from_core(e),
        };
        *out = Box::into_raw(Box::new(GcgmDataset { dataset, prox }));
        GcgmStatus::Ok
    })
}

/// Number of groups, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle from [`gcgm_dataset_load`].
#[no_mangle]
pub unsafe extern "C" fn gcgm_dataset_n_groups(ds: *const GcgmDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.dataset.n_groups())
}

/// Number of traits, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle from [`gcgm_dataset_load`].
#[no_mangle]
pub unsafe extern "C" fn gcgm_dataset_n_traits(ds: *const GcgmDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.dataset.n_traits())
}

/// # Safety
/// `ds` must be null or a handle from [`gcgm_dataset_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gcgm_dataset_free(ds: *mut GcgmDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Fits marginals, runs the sampler and, if requested, computes the DIC.
/// Nothing is written to disk.
///
/// # Safety
/// `ds` must be a live dataset handle, `config` a valid pointer and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn gcgm_fit(ds: *const GcgmDataset, config: *const GcgmFitConfig, out: *mut *mut GcgmFit) -> GcgmStatus {
    guard(|| {
        if out.is_null() {
            return fail(GcgmStatus::InvalidArgument, "out is null");
        }
        *out = ptr::null_mut();
        let (Some(ds), Some(cfg)) = (ds.as_ref(), config.as_ref()) else {
            return fail(GcgmStatus::InvalidArgument, "dataset or config is null");
        };
        let link = match cfg.link {
            GcgmLink::Logit => Link::Logit,
            GcgmLink::Probit => Link::Probit,
        };
        let chain_cfg = ChainConfig {
            n_iterations: cfg.n_iterations,
            burn_in: cfg.burn_in,
            thin: cfg.thin,
            threads: cfg.threads,
            n_deviance_draws: cfg.n_deviance_draws,
            ..ChainConfig::desk(cfg.variant.into(), cfg.seed)
        };
        let run = || -> gcgm::Result<GcgmFit> {
            let marginals = MarginalSet::fit(&ds.dataset, link)?;
            let input = ChainInput {
                dataset: &ds.dataset,
                marginals: &marginals,
                prox: ds.prox.as_ref(),
            };
            let mut chain = Chain::new(input, chain_cfg)?;
            chain.run(&RunOutputs::default())?;
            let dic = if cfg.compute_dic { Some(compute_dic(&chain.acc, input, GhkConfig::default())?) } else { None };
            let acc = chain.acc;
            Ok(GcgmFit {
                dataset: ds.dataset.clone(),
                prox: ds.prox.clone(),
                marginals,
                acc,
                dic,
            })
        };
        match run() {
            Ok(fit) => {
                *out = Box::into_raw(Box::new(fit));
                GcgmStatus::Ok
            }
            Err(e) => from_core(e),
        }
    })
}

/// Copies the posterior edge-probability matrix of `group` (row-major,
/// `n_traits * n_traits` values) into `buf`.
///
/// # Safety
/// `fit` must be a live handle and `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn gcgm_fit_edge_probabilities(fit: *const GcgmFit, group: usize, buf: *mut f64, len: usize) -> GcgmStatus {
    guard(|| {
        let Some(fit) = fit.as_ref() else {
            return fail(GcgmStatus::InvalidArgument, "fit is null");
        };
        if buf.is_null() {
            return fail(GcgmStatus::InvalidArgument, "buf is null");
        }
        let p = fit.acc.p;
        if group >= fit.acc.n_groups() {
            return fail(GcgmStatus::InvalidArgument, format!("group {group} out of range"));
        }
        if len < p * p {
            return fail(GcgmStatus::InvalidArgument, format!("buffer holds {len} values, need {}", p * p));
        }
        let probs = match edge_posterior(&fit.acc) {
            Ok(p) => p,
            Err(e) => return from_core(e),
        };
        let out = std::slice::from_raw_parts_mut(buf, p * p);
        for i in 0..p {
            for j in 0..p {
                out[i * p + j] = probs[group][(i, j)];
            }
        }
        GcgmStatus::Ok
    })
}

/// Writes the DIC of a fit run with `compute_dic`.
///
/// # Safety
/// `fit` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gcgm_fit_dic(fit: *const GcgmFit, out: *mut f64) -> GcgmStatus {
    guard(|| {
        let (Some(fit), false) = (fit.as_ref(), out.is_null()) else {
            return fail(GcgmStatus::InvalidArgument, "fit or out is null");
        };
        match &fit.dic {
            Some(r) => {
                *out = r.dic;
                GcgmStatus::Ok
            }
            None => fail(GcgmStatus::Validation, "fit was run without DIC"),
        }
    })
}

/// Writes the summary bundle into `dir`, creating it if needed.
///
/// # Safety
/// `fit` must be a live handle; `dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn gcgm_fit_write_summary(fit: *const GcgmFit, dir: *const c_char) -> GcgmStatus {
    guard(|| {
        let Some(fit) = fit.as_ref() else {
            return fail(GcgmStatus::InvalidArgument, "fit is null");
        };
        let dir = match path_arg(dir, "dir") {
            Ok(d) => d,
            Err(s) => return s,
        };
        let prox = if fit.acc.variant.uses_proximity() { fit.prox.as_ref() } else { None };
        match export_summaries(&dir, &fit.acc, &fit.dataset, &fit.marginals, prox, fit.dic.as_ref()) {
            Ok(_) => GcgmStatus::Ok,
            Err(e) => from_core(e),
        }
    })
}

/// # Safety
/// `fit` must be null or a handle from [`gcgm_fit`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gcgm_fit_free(fit: *mut GcgmFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}
