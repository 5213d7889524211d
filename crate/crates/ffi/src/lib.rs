//! C ABI over `hindsight_prior`.
//!
//! Objects cross the boundary as opaque handles created by `hp_*_new` /
//! `hp_*_load` and released by the matching `hp_*_free`. Every fallible
//! call returns an [`HpStatus`]; the message of the last failure on the
//! calling thread is available from [`hp_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use hindsight_prior::data::Label;
use hindsight_prior::envs::{Action, EnvConfig, Environment};
use hindsight_prior::oracle::{HumanBridge, SubmitError};
use hindsight_prior::reward::{bradley_terry, RewardEnsemble};
use hindsight_prior::runner::{paired_ttest, train, RunConfig, RunOptions, RunRecord};
use hindsight_prior::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeError = 3,
    NumericalError = 4,
    ActionError = 5,
    EpisodeError = 6,
    DataError = 7,
    ConfigError = 8,
    MetricError = 9,
    IoError = 10,
    NotFound = 11,
    Conflict = 12,
    BufferTooSmall = 13,
    Panic = 99,
}

/// Environment instance.
pub struct HpEnv {
    env: Box<dyn Environment>,
    rng: ChaCha8Rng,
}

/// Reward ensemble loaded from a checkpoint.
pub struct HpReward {
    ensemble: RewardEnsemble,
}

/// Completed training run.
pub struct HpRun {
    record: RunRecord,
}

/// Query/label exchange for a human oracle.
pub struct HpBridge {
    bridge: HumanBridge,
}

/// One evaluation episode.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct HpMetric {
    pub step: usize,
    pub episode: usize,
    pub eval_return: f64,
    pub eval_success: u8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn status_of(e: &Error) -> HpStatus {
    match e {
        Error::Shape(_) => HpStatus::ShapeError,
        Error::Numerical { .. } => HpStatus::NumericalError,
        Error::Action(_) => HpStatus::ActionError,
        Error::Episode(_) => HpStatus::EpisodeError,
        Error::Data(_) => HpStatus::DataError,
        Error::Config(_) | Error::Json(_) => HpStatus::ConfigError,
        Error::Metric(_) => HpStatus::MetricError,
        Error::Io(_) | Error::Csv(_) => HpStatus::IoError,
    }
}

fn fail(status: HpStatus, msg: impl Into<String>) -> HpStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> Result<(), HpStatus>) -> HpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            HpStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(HpStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: hindsight_prior::Result<T>) -> Result<T, HpStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, HpStatus> {
    if p.is_null() {
        return Err(fail(HpStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(HpStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, HpStatus> {
    p.as_mut().ok_or_else(|| fail(HpStatus::NullPointer, format!("{what} is null")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, HpStatus> {
    p.as_ref().ok_or_else(|| fail(HpStatus::NullPointer, format!("{what} is null")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], HpStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(HpStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn into_c_string(s: String) -> Result<*mut c_char, HpStatus> {
    CString::new(s).map(CString::into_raw).map_err(|_| fail(HpStatus::InvalidArgument, "string contains NUL"))
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn hp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Frees a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn hp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Bradley-Terry probability that a segment with return `ga` is preferred.
#[no_mangle]
pub extern "C" fn hp_bradley_terry(ga: f64, gb: f64) -> f64 {
    bradley_terry(ga, gb)
}

/// Two-tailed paired t-test on `a - b`.
///
/// # Safety
/// `a` and `b` must point to `n` doubles; outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn hp_paired_ttest(a: *const f64, b: *const f64, n: usize, t: *mut f64, p: *mut f64, df: *mut usize) -> HpStatus {
    guard(|| {
        let r = lift(paired_ttest(slice(a, n, "a")?, slice(b, n, "b")?))?;
        *out_ptr(t, "t")? = r.t;
        *out_ptr(p, "p")? = r.p;
        *out_ptr(df, "df")? = r.df;
        Ok(())
    })
}

/// Creates a built-in environment (`keydoor` or `pointmass`) whose resets
/// draw from `seed`.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hp_env_new(name: *const c_char, seed: u64, out: *mut *mut HpEnv) -> HpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let env = lift(EnvConfig::by_name(str_arg(name, "name")?).and_then(|c| c.build()))?;
        *out = Box::into_raw(Box::new(HpEnv { env, rng: ChaCha8Rng::seed_from_u64(seed) }));
        Ok(())
    })
}

/// # Safety
/// `env` must come from [`hp_env_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hp_env_free(env: *mut HpEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Observation length, or 0 for a null handle.
///
/// # Safety
/// `env` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hp_env_obs_dim(env: *const HpEnv) -> usize {
    env.as_ref().map_or(0, |e| e.env.spec().obs_dim)
}

/// Number of discrete actions, or 0 for continuous spaces and null handles.
///
/// # Safety
/// `env` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hp_env_num_actions(env: *const HpEnv) -> usize {
    env.as_ref().and_then(|e| e.env.spec().action_space.num_discrete()).unwrap_or(0)
}

unsafe fn write_obs(obs: &[f32], out: *mut f32, len: usize) -> Result<(), HpStatus> {
    if len < obs.len() {
        return Err(fail(HpStatus::BufferTooSmall, format!("observation needs {} floats, got {len}", obs.len())));
    }
    if out.is_null() {
        return Err(fail(HpStatus::NullPointer, "obs is null"));
    }
    std::slice::from_raw_parts_mut(out, obs.len()).copy_from_slice(obs);
    Ok(())
}

/// Starts an episode and writes the first observation.
///
/// # Safety
/// `env` must be live; `obs` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn hp_env_reset(env: *mut HpEnv, obs: *mut f32, len: usize) -> HpStatus {
    guard(|| {
        let e = out_ptr(env, "env")?;
        let s = e.env.reset(&mut e.rng);
        write_obs(&s.observation, obs, len)
    })
}

/// Takes a discrete action; writes the next observation, the target
/// reward and whether the episode ended.
///
/// # Safety
/// `env` must be live; `obs` must hold `len` floats; `reward` and `done`
/// must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn hp_env_step(env: *mut HpEnv, action: usize, obs: *mut f32, len: usize, reward: *mut f32, done: *mut bool) -> HpStatus {
    guard(|| {
        let e = out_ptr(env, "env")?;
        let out = lift(e.env.step(&Action::Discrete(action)))?;
        write_obs(&out.state.observation, obs, len)?;
        *out_ptr(reward, "reward")? = out.target_reward;
        *out_ptr(done, "done")? = out.state.done;
        Ok(())
    })
}

/// Loads a reward checkpoint (`checkpoints/reward_session_NNN.json`).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hp_reward_load(path: *const c_char, out: *mut *mut HpReward) -> HpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let text = lift(std::fs::read_to_string(str_arg(path, "path")?).map_err(Error::from))?;
        let ensemble: RewardEnsemble = lift(serde_json::from_str(&text).map_err(Error::from))?;
        *out = Box::into_raw(Box::new(HpReward { ensemble }));
        Ok(())
    })
}

/// # Safety
/// `reward` must come from [`hp_reward_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hp_reward_free(reward: *mut HpReward) {
    if !reward.is_null() {
        drop(Box::from_raw(reward));
    }
}

/// Ensemble-mean reward of one `(observation, action encoding)` pair.
///
/// # Safety
/// `reward` must be live; `obs`/`action` must hold the given lengths; `out`
/// must be valid.
#[no_mangle]
pub unsafe extern "C" fn hp_reward_evaluate(
    reward: *const HpReward,
    obs: *const f32,
    obs_len: usize,
    action: *const f32,
    action_len: usize,
    out: *mut f32,
) -> HpStatus {
    guard(|| {
        let r = handle(reward, "reward")?;
        let v = lift(r.ensemble.ensemble_reward(slice(obs, obs_len, "obs")?, slice(action, action_len, "action")?))?;
        *out_ptr(out, "out")? = v;
        Ok(())
    })
}

/// Trains one run from a JSON configuration (NULL for defaults). Writes the
/// run directory when `out_dir` is not NULL. A human-oracle run exchanges
/// queries through `bridge`, which may be labeled from another thread.
///
/// # Safety
/// String arguments must be NULL or NUL-terminated; `bridge` NULL or live;
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hp_train(
    config_json: *const c_char,
    out_dir: *const c_char,
    bridge: *const HpBridge,
    out: *mut *mut HpRun,
) -> HpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let cfg: RunConfig = if config_json.is_null() {
            RunConfig::default()
        } else {
            serde_json::from_str(str_arg(config_json, "config_json")?).map_err(|e| fail(HpStatus::ConfigError, e.to_string()))?
        };
        let dir = if out_dir.is_null() { None } else { Some(PathBuf::from(str_arg(out_dir, "out_dir")?)) };
        let bridge = bridge.as_ref().map(|b| b.bridge.clone());
        let record = lift(train(&cfg, RunOptions { out_dir: dir, bridge }))?;
        *out = Box::into_raw(Box::new(HpRun { record }));
        Ok(())
    })
}

/// # Safety
/// `run` must come from [`hp_train`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hp_run_free(run: *mut HpRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Number of evaluation episodes recorded, or 0 for a null handle.
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hp_run_metric_count(run: *const HpRun) -> usize {
    run.as_ref().map_or(0, |r| r.record.metrics.len())
}

/// # Safety
/// `run` must be live; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hp_run_metric(run: *const HpRun, index: usize, out: *mut HpMetric) -> HpStatus {
    guard(|| {
        let r = handle(run, "run")?;
        let m = r
            .record
            .metrics
            .get(index)
            .ok_or_else(|| fail(HpStatus::InvalidArgument, format!("metric {index} out of range")))?;
        *out_ptr(out, "out")? = HpMetric { step: m.step, episode: m.episode, eval_return: m.eval_return, eval_success: m.eval_success };
        Ok(())
    })
}

/// Full run record as JSON; free with [`hp_string_free`].
///
/// # Safety
/// `run` must be live; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hp_run_record_json(run: *const HpRun, out: *mut *mut c_char) -> HpStatus {
    guard(|| {
        let r = handle(run, "run")?;
        let json = lift(serde_json::to_string(&r.record).map_err(Error::from))?;
        *out_ptr(out, "out")? = into_c_string(json)?;
        Ok(())
    })
}

/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hp_bridge_new(out: *mut *mut HpBridge) -> HpStatus {
    guard(|| {
        *out_ptr(out, "out")? = Box::into_raw(Box::new(HpBridge { bridge: HumanBridge::new() }));
        Ok(())
    })
}

/// # Safety
/// `bridge` must come from [`hp_bridge_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hp_bridge_free(bridge: *mut HpBridge) {
    if !bridge.is_null() {
        drop(Box::from_raw(bridge));
    }
}

/// Pending queries as a JSON array; free with [`hp_string_free`].
///
/// # Safety
/// `bridge` must be live; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hp_bridge_pending_json(bridge: *const HpBridge, out: *mut *mut c_char) -> HpStatus {
    guard(|| {
        let b = handle(bridge, "bridge")?;
        let json = lift(serde_json::to_string(&b.bridge.pending()).map_err(Error::from))?;
        *out_ptr(out, "out")? = into_c_string(json)?;
        Ok(())
    })
}

/// Labels a pending query with `"a"`, `"b"` or `"equal"`.
///
/// # Safety
/// `bridge` must be live; `choice` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn hp_bridge_submit(bridge: *const HpBridge, query_id: u64, choice: *const c_char) -> HpStatus {
    guard(|| {
        let b = handle(bridge, "bridge")?;
        let label = Label::from_choice(str_arg(choice, "choice")?).map_err(|e| fail(HpStatus::InvalidArgument, e.to_string()))?;
        b.bridge.submit(query_id, label).map_err(|e| match e {
            SubmitError::NotFound => fail(HpStatus::NotFound, format!("query {query_id} is not pending")),
            SubmitError::Conflict => fail(HpStatus::Conflict, format!("query {query_id} is already labeled")),
        })
    })
}
