//! C bindings for the d2oc coverage library.
//!
//! Fallible entry points return a [`D2ocStatus`] and write results through
//! out pointers. Any nonzero status leaves a thread-local description that
//! [`d2oc_last_error_message`] exposes. Handles returned by constructors
//! stay valid until passed to the matching free function.
//!
//! The committed header `include/d2oc.h` mirrors this interface; the
//! `header_lists_exactly_the_exported_functions` test keeps the two in sync.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use nalgebra::DVector;

use d2oc::lti::{relative_degree, AgentModel};
use d2oc::{connectivity, sim, transport, Error};

/// Result code shared by every fallible binding.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum D2ocStatus {
    Ok = 0,
    NullPointer = -1,
    InvalidUtf8 = -2,
    ParseError = -3,
    DimensionError = -4,
    NumericError = -5,
    IoError = -6,
    RuntimeError = -7,
}

/// Opaque handle around an agent model.
pub struct D2ocModel(AgentModel);

/// Structural facts about a model, filled by [`d2oc_model_check`].
#[repr(C)]
pub struct D2ocModelReport {
    pub states: u64,
    pub inputs: u64,
    pub outputs: u64,
    /// Steps until an input first reaches the output, or -1 when no power
    /// of the state matrix connects them.
    pub relative_degree: i64,
    pub controllable: u8,
    pub spectral_radius: f64,
}

/// Headline numbers of a finished simulation, filled by
/// [`d2oc_run_config_json`].
#[repr(C)]
pub struct D2ocSimResult {
    pub steps: u64,
    pub completed: u8,
    pub final_swd: f64,
    pub residual_mass: f64,
    pub max_designated_distance: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let clean = message.replace('\0', "?");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(clean).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> D2ocStatus {
    match err {
        Error::Json(_) | Error::Csv(_) | Error::Config(_) => D2ocStatus::ParseError,
        Error::DimensionMismatch(_) | Error::LengthMismatch { .. } => D2ocStatus::DimensionError,
        Error::NoRelativeDegree { .. }
        | Error::EmptyMap
        | Error::DegenerateWeights { .. }
        | Error::NotSpd(_)
        | Error::MaxIterations(_)
        | Error::InfeasibleMarginals { .. }
        | Error::ProblemTooLarge { .. } => D2ocStatus::NumericError,
        Error::Io(_) => D2ocStatus::IoError,
        Error::StaleBeyondHorizon { .. } => D2ocStatus::RuntimeError,
    }
}

fn fail(err: Error) -> D2ocStatus {
    set_error(&err.to_string());
    status_of(&err)
}

fn null_arg(name: &str) -> D2ocStatus {
    set_error(&format!("{name} must not be null"));
    D2ocStatus::NullPointer
}

/// Runs an entry-point body and converts a panic into a status code so it
/// cannot unwind across the C boundary.
fn guarded(body: impl FnOnce() -> D2ocStatus) -> D2ocStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            D2ocStatus::RuntimeError
        }
    }
}

unsafe fn read_str<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, D2ocStatus> {
    if ptr.is_null() {
        return Err(null_arg(name));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(&format!("{name} is not valid UTF-8"));
        D2ocStatus::InvalidUtf8
    })
}

/// Parse an agent model from its JSON description.
///
/// # Safety
/// `json` must point to a NUL-terminated string and `out` to storage for
/// one pointer. On `Ok` the caller owns `*out` and must release it with
/// [`d2oc_model_free`]; on any other status `*out` is untouched.
#[no_mangle]
pub unsafe extern "C" fn d2oc_model_from_json(
    json: *const c_char,
    out: *mut *mut D2ocModel,
) -> D2ocStatus {
    guarded(|| {
        if out.is_null() {
            return null_arg("out");
        }
        let text = match read_str(json, "json") {
            Ok(text) => text,
            Err(status) => return status,
        };
        match AgentModel::from_json_str(text) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(D2ocModel(model)));
                D2ocStatus::Ok
            }
            Err(err) => fail(err),
        }
    })
}

/// Build the twelve-state quadrotor model used by the simulator.
///
/// # Safety
/// `out` must point to storage for one pointer. Ownership follows
/// [`d2oc_model_from_json`].
#[no_mangle]
pub unsafe extern "C" fn d2oc_quadrotor_model(
    dt: f64,
    input_bound: f64,
    out: *mut *mut D2ocModel,
) -> D2ocStatus {
    guarded(|| {
        if out.is_null() {
            return null_arg("out");
        }
        match sim::quadrotor_model(dt, input_bound) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(D2ocModel(model)));
                D2ocStatus::Ok
            }
            Err(err) => fail(err),
        }
    })
}

/// Release a model handle. Passing null is a no-op.
///
/// # Safety
/// `model` must be null or a pointer obtained from a constructor in this
/// library that has not been freed before.
#[no_mangle]
pub unsafe extern "C" fn d2oc_model_free(model: *mut D2ocModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Fill `out` with dimensions, relative degree, controllability, and the
/// spectral radius of the state matrix.
///
/// # Safety
/// `model` must be a live handle from this library and `out` must point to
/// writable storage for one report.
#[no_mangle]
pub unsafe extern "C" fn d2oc_model_check(
    model: *const D2ocModel,
    out: *mut D2ocModelReport,
) -> D2ocStatus {
    guarded(|| {
        if model.is_null() {
            return null_arg("model");
        }
        if out.is_null() {
            return null_arg("out");
        }
        let model = &(*model).0;
        let r = match relative_degree(model, model.state_dim()) {
            Ok(r) => r as i64,
            Err(_) => -1,
        };
        *out = D2ocModelReport {
            states: model.state_dim() as u64,
            inputs: model.input_dim() as u64,
            outputs: model.output_dim() as u64,
            relative_degree: r,
            controllable: model.is_controllable() as u8,
            spectral_radius: model.spectral_radius(),
        };
        D2ocStatus::Ok
    })
}

/// Softplus penalty `(kappa / eta) * ln(1 + exp(eta * z))`.
#[no_mangle]
pub extern "C" fn d2oc_penalty(z: f64, kappa: f64, eta: f64) -> f64 {
    connectivity::penalty(z, kappa, eta)
}

/// Derivative of [`d2oc_penalty`] with respect to `z`.
#[no_mangle]
pub extern "C" fn d2oc_penalty_derivative(z: f64, kappa: f64, eta: f64) -> f64 {
    connectivity::penalty_derivative(z, kappa, eta)
}

/// Sliced Wasserstein distance between two point sets with uniform weights.
///
/// `xs` holds `n_x` points of `dim` coordinates in row-major order and `ys`
/// holds `n_y` points of the same width. The squared distance estimate is
/// written to `out`.
///
/// # Safety
/// `xs` must reference `n_x * dim` doubles, `ys` must reference
/// `n_y * dim` doubles, and `out` must point to one writable double.
#[no_mangle]
pub unsafe extern "C" fn d2oc_sliced_wasserstein(
    xs: *const f64,
    n_x: usize,
    ys: *const f64,
    n_y: usize,
    dim: usize,
    n_projections: usize,
    seed: u64,
    out: *mut f64,
) -> D2ocStatus {
    guarded(|| {
        if xs.is_null() {
            return null_arg("xs");
        }
        if ys.is_null() {
            return null_arg("ys");
        }
        if out.is_null() {
            return null_arg("out");
        }
        if dim == 0 {
            set_error("dim must be positive");
            return D2ocStatus::DimensionError;
        }
        let take = |flat: *const f64, count: usize| -> Vec<DVector<f64>> {
            let slice = std::slice::from_raw_parts(flat, count * dim);
            (0..count)
                .map(|i| DVector::from_column_slice(&slice[i * dim..(i + 1) * dim]))
                .collect()
        };
        let xs = take(xs, n_x);
        let ys = take(ys, n_y);
        match transport::sliced_wasserstein(&xs, &ys, n_projections, seed) {
            Ok(value) => {
                *out = value;
                D2ocStatus::Ok
            }
            Err(err) => fail(err),
        }
    })
}

/// Run a full simulation from a JSON configuration document and report the
/// headline numbers.
///
/// # Safety
/// `json` must point to a NUL-terminated string and `out` to writable
/// storage for one result record.
#[no_mangle]
pub unsafe extern "C" fn d2oc_run_config_json(
    json: *const c_char,
    out: *mut D2ocSimResult,
) -> D2ocStatus {
    guarded(|| {
        if out.is_null() {
            return null_arg("out");
        }
        let text = match read_str(json, "json") {
            Ok(text) => text,
            Err(status) => return status,
        };
        let config = match sim::SimConfig::from_json_str(text) {
            Ok(config) => config,
            Err(err) => return fail(err),
        };
        match sim::run_sim(config) {
            Ok((record, _)) => {
                *out = D2ocSimResult {
                    steps: record.steps as u64,
                    completed: record.completed as u8,
                    final_swd: record.final_swd,
                    residual_mass: record.residual_mass.last().copied().unwrap_or(0.0),
                    max_designated_distance: record.max_designated_distance_overall(),
                };
                D2ocStatus::Ok
            }
            Err(err) => fail(err),
        }
    })
}

/// Description of the most recent failure on this thread.
///
/// The pointer stays valid until the next fallible call from the same
/// thread. The string is empty when nothing has failed yet.
#[no_mangle]
pub extern "C" fn d2oc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;
    use std::ptr;

    fn cstring(text: &str) -> CString {
        CString::new(text).unwrap()
    }

    fn last_error() -> String {
        unsafe {
            CStr::from_ptr(d2oc_last_error_message())
                .to_string_lossy()
                .into_owned()
        }
    }

    #[test]
    fn model_json_round_trips_through_the_c_interface() {
        let model = d2oc::lti::double_integrator(2, 0.1, 3.0);
        let json = cstring(&model.to_json_string().unwrap());
        let mut handle: *mut D2ocModel = ptr::null_mut();
        unsafe {
            assert_eq!(
                d2oc_model_from_json(json.as_ptr(), &mut handle),
                D2ocStatus::Ok
            );
            let mut report = std::mem::zeroed::<D2ocModelReport>();
            assert_eq!(d2oc_model_check(handle, &mut report), D2ocStatus::Ok);
            assert_eq!(report.states, 4);
            assert_eq!(report.inputs, 2);
            assert_eq!(report.outputs, 2);
            assert_eq!(report.relative_degree, 2);
            assert_eq!(report.controllable, 1);
            assert_eq!(report.spectral_radius, 1.0);
            d2oc_model_free(handle);
        }
    }

    #[test]
    fn quadrotor_reports_its_structure() {
        let mut handle: *mut D2ocModel = ptr::null_mut();
        unsafe {
            assert_eq!(
                d2oc_quadrotor_model(0.1, 10.0, &mut handle),
                D2ocStatus::Ok
            );
            let mut report = std::mem::zeroed::<D2ocModelReport>();
            assert_eq!(d2oc_model_check(handle, &mut report), D2ocStatus::Ok);
            assert_eq!(report.states, 12);
            assert_eq!(report.inputs, 3);
            assert_eq!(report.outputs, 3);
            assert_eq!(report.relative_degree, 4);
            assert_eq!(report.controllable, 1);
            assert!((report.spectral_radius - 1.0).abs() < 1e-9);
            d2oc_model_free(handle);
        }
    }

    #[test]
    fn null_pointers_are_rejected_with_a_message() {
        let mut handle: *mut D2ocModel = ptr::null_mut();
        unsafe {
            assert_eq!(
                d2oc_model_from_json(ptr::null(), &mut handle),
                D2ocStatus::NullPointer
            );
            assert!(last_error().contains("json"));
            let json = cstring("{}");
            assert_eq!(
                d2oc_model_from_json(json.as_ptr(), ptr::null_mut()),
                D2ocStatus::NullPointer
            );
            assert_eq!(
                d2oc_model_check(ptr::null(), ptr::null_mut()),
                D2ocStatus::NullPointer
            );
            d2oc_model_free(ptr::null_mut());
        }
    }

    #[test]
    fn invalid_utf8_is_rejected() {
        let bytes: [c_char; 3] = [-1i8 as c_char, -2i8 as c_char, 0];
        let mut handle: *mut D2ocModel = ptr::null_mut();
        unsafe {
            assert_eq!(
                d2oc_model_from_json(bytes.as_ptr(), &mut handle),
                D2ocStatus::InvalidUtf8
            );
        }
        assert!(last_error().contains("UTF-8"));
    }

    #[test]
    fn bad_json_reports_parse_error() {
        let json = cstring("{ not json");
        let mut handle: *mut D2ocModel = ptr::null_mut();
        unsafe {
            assert_eq!(
                d2oc_model_from_json(json.as_ptr(), &mut handle),
                D2ocStatus::ParseError
            );
        }
        assert!(!last_error().is_empty());
    }

    #[test]
    fn penalty_matches_the_library() {
        for &z in &[-3.0, 0.0, 1.5, 40.0] {
            assert_eq!(
                d2oc_penalty(z, 750.0, 0.25),
                connectivity::penalty(z, 750.0, 0.25)
            );
            assert_eq!(
                d2oc_penalty_derivative(z, 750.0, 0.25),
                connectivity::penalty_derivative(z, 750.0, 0.25)
            );
        }
    }

    #[test]
    fn sliced_wasserstein_matches_the_library() {
        let xs = [0.0, 0.0, 1.0, 0.5, -2.0, 3.0];
        let ys = [0.5, 0.5, 2.0, -1.0];
        let to_points = |flat: &[f64]| -> Vec<DVector<f64>> {
            flat.chunks(2).map(DVector::from_column_slice).collect()
        };
        let expected =
            transport::sliced_wasserstein(&to_points(&xs), &to_points(&ys), 32, 7).unwrap();
        let mut got = 0.0;
        unsafe {
            assert_eq!(
                d2oc_sliced_wasserstein(xs.as_ptr(), 3, ys.as_ptr(), 2, 2, 32, 7, &mut got),
                D2ocStatus::Ok
            );
        }
        assert_eq!(got, expected);
    }

    #[test]
    fn run_config_json_matches_the_library_run() {
        let text = r#"{
            "n_agents": 2,
            "model": "single_integrator",
            "map": { "type": "gaussian_mixture", "n_samples": 20, "components": 1, "spread": 1.0 },
            "scene_half": 3.0,
            "max_steps": 8,
            "completion_threshold": 0.0,
            "connectivity_enabled": false,
            "swd_projections": 16
        }"#;
        let config = sim::SimConfig::from_json_str(text).unwrap();
        let (record, _) = sim::run_sim(config).unwrap();

        let json = cstring(text);
        let mut result = unsafe { std::mem::zeroed::<D2ocSimResult>() };
        unsafe {
            assert_eq!(
                d2oc_run_config_json(json.as_ptr(), &mut result),
                D2ocStatus::Ok
            );
        }
        assert_eq!(result.steps, record.steps as u64);
        assert_eq!(result.completed, record.completed as u8);
        assert_eq!(result.final_swd, record.final_swd);
        assert_eq!(
            result.max_designated_distance,
            record.max_designated_distance_overall()
        );
    }

    fn exported_functions(source: &str) -> BTreeSet<String> {
        let marker = "extern \"C\" fn ";
        source
            .match_indices(marker)
            .map(|(index, _)| {
                source[index + marker.len()..]
                    .chars()
                    .take_while(|c| c.is_ascii_alphanumeric() || *c == '_')
                    .collect()
            })
            .collect()
    }

    fn declared_functions(header: &str) -> BTreeSet<String> {
        let mut names = BTreeSet::new();
        for line in header.lines() {
            let line = line.trim();
            if line.starts_with('*') || line.starts_with("/*") || line.starts_with("//") {
                continue;
            }
            for (index, _) in line.match_indices("d2oc_") {
                let name: String = line[index..]
                    .chars()
                    .take_while(|c| c.is_ascii_alphanumeric() || *c == '_')
                    .collect();
                names.insert(name);
            }
        }
        names
    }

    #[test]
    fn header_lists_exactly_the_exported_functions() {
        let exported = exported_functions(include_str!("lib.rs"));
        let declared = declared_functions(include_str!("../include/d2oc.h"));
        assert!(!exported.is_empty());
        assert_eq!(exported, declared);
    }
}
