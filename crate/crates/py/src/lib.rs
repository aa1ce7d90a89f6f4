//! Python bindings for the core pipeline: signal generation, the synthetic
//! channel, echo-profile extraction, instance selection, metrics, and
//! checkpoint-based authentication.

use echoid_core::echo::{self, BandPassSpec};
use echoid_core::error::Error;
use echoid_core::eval;
use echoid_core::instances::{self, Instance, InstanceMeta, SelectionPolicy};
use echoid_core::model;
use echoid_core::signal::{self, SweepConfig};
use echoid_core::simchan::{self, FaceProfile, FaceTemplate, MountJitter, Recording, SessionMeta};
use echoid_core::store;
use ndarray::Array3;
use numpy::{IntoPyArray, PyArray1, PyArray2, PyArray3, PyReadonlyArray1, PyReadonlyArray3};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py_err(err: Error) -> PyErr {
    match err {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn band_config(band: &str) -> PyResult<SweepConfig> {
    match band {
        "right" => Ok(SweepConfig::right_band()),
        "left" => Ok(SweepConfig::left_band()),
        other => Err(PyValueError::new_err(format!(
            "unknown band '{other}' (expected 'right' or 'left')"
        ))),
    }
}

/// One synthetic identity: reflector geometry plus the direct-path gain.
#[pyclass(name = "Face")]
#[derive(Clone)]
struct PyFace {
    inner: FaceProfile,
}

#[pymethods]
impl PyFace {
    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn direct_path_gain(&self) -> f64 {
        self.inner.direct_path_gain
    }

    /// Reflectors as (delay_samples, gain, tilt_right, tilt_left) tuples.
    #[getter]
    fn reflectors(&self) -> Vec<(f64, f64, f64, f64)> {
        self.inner
            .reflectors
            .iter()
            .map(|r| (r.delay_samples, r.gain, r.band_tilt[0], r.band_tilt[1]))
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Face(id='{}', reflectors={}, direct_path_gain={:.3})",
            self.inner.id,
            self.inner.reflectors.len(),
            self.inner.direct_path_gain
        )
    }
}

/// Generate one linear FMCW sweep frame for the given band ('right' or
/// 'left'); 600 samples at 50 kHz.
#[pyfunction]
fn generate_chirp<'py>(py: Python<'py>, band: &str) -> PyResult<Bound<'py, PyArray1<f64>>> {
    let frame = signal::generate_chirp(&band_config(band)?).map_err(to_py_err)?;
    Ok(frame.samples.into_pyarray(py))
}

/// Concatenate `frames` identical sweeps into a transmit stream.
#[pyfunction]
fn tx_stream<'py>(
    py: Python<'py>,
    band: &str,
    frames: usize,
) -> PyResult<Bound<'py, PyArray1<f64>>> {
    let stream = signal::tx_stream(&band_config(band)?, frames).map_err(to_py_err)?;
    Ok(stream.into_pyarray(py))
}

/// Draw a deterministic synthetic face ('default' or 'long_hair_variant').
#[pyfunction]
#[pyo3(signature = (seed, template = "default"))]
fn make_face(seed: u64, template: &str) -> PyResult<PyFace> {
    let template: FaceTemplate = template.parse().map_err(to_py_err)?;
    Ok(PyFace {
        inner: simchan::make_face(seed, template),
    })
}

/// Apply remount jitter to a face.
#[pyfunction]
#[pyo3(signature = (face, seed, delay_shift = 1.5, gain_scale = 0.06, per_reflector_sigma = 0.15))]
fn remount(
    face: &PyFace,
    seed: u64,
    delay_shift: f64,
    gain_scale: f64,
    per_reflector_sigma: f64,
) -> PyResult<PyFace> {
    let jitter = MountJitter {
        delay_shift,
        gain_scale,
        per_reflector_sigma,
    };
    jitter.validate().map_err(to_py_err)?;
    Ok(PyFace {
        inner: simchan::remount(&face.inner, &jitter, seed),
    })
}

/// Apply persistent day-to-day drift to a face.
#[pyfunction]
fn day_drift(face: &PyFace, magnitude: f64, seed: u64) -> PyResult<PyFace> {
    if magnitude < 0.0 {
        return Err(PyValueError::new_err("magnitude must be non-negative"));
    }
    Ok(PyFace {
        inner: simchan::day_drift(&face.inner, magnitude, seed),
    })
}

/// Simulate one scanning session; returns the (left, right) microphone
/// channels as float32 arrays. `snr_db=None` disables noise.
#[pyfunction]
#[pyo3(signature = (face, secs = 1.0, snr_db = Some(30.0), seed = 0))]
fn simulate_session<'py>(
    py: Python<'py>,
    face: &PyFace,
    secs: f64,
    snr_db: Option<f64>,
    seed: u64,
) -> PyResult<(Bound<'py, PyArray1<f32>>, Bound<'py, PyArray1<f32>>)> {
    let frames =
        ((secs * signal::SAMPLE_RATE) / signal::SAMPLES_PER_SWEEP as f64).floor() as usize;
    if frames == 0 {
        return Err(PyValueError::new_err("session too short for one sweep"));
    }
    let tx_l = signal::tx_stream(&SweepConfig::left_band(), frames).map_err(to_py_err)?;
    let tx_r = signal::tx_stream(&SweepConfig::right_band(), frames).map_err(to_py_err)?;
    let rec = simchan::simulate_rx(
        &tx_l,
        &tx_r,
        &face.inner,
        snr_db,
        seed,
        SessionMeta::new("py", 1, 0),
    )
    .map_err(to_py_err)?;
    Ok((rec.left.into_pyarray(py), rec.right.into_pyarray(py)))
}

/// Build the 4×frames×110 echo profile from raw microphone channels.
#[pyfunction]
fn build_echo_profile<'py>(
    py: Python<'py>,
    left: PyReadonlyArray1<'py, f32>,
    right: PyReadonlyArray1<'py, f32>,
) -> PyResult<Bound<'py, PyArray3<f32>>> {
    let rec = Recording {
        left: left.as_slice()?.to_vec(),
        right: right.as_slice()?.to_vec(),
        sample_rate: signal::SAMPLE_RATE,
        meta: SessionMeta::new("py", 1, 0),
    };
    let specs = [BandPassSpec::right_band(), BandPassSpec::left_band()];
    let txs = [
        signal::generate_chirp(&SweepConfig::right_band()).map_err(to_py_err)?,
        signal::generate_chirp(&SweepConfig::left_band()).map_err(to_py_err)?,
    ];
    let profile = echo::build_echo_profile(&rec, &specs, &txs).map_err(to_py_err)?;
    Ok(profile.values.into_pyarray(py))
}

/// Select the k most static instances from an echo profile tensor.
/// Returns an array of shape (k, 4, frames_per_instance, 110).
#[pyfunction]
#[pyo3(signature = (profile, k = 10, frames_per_instance = 5))]
fn select_static_instances<'py>(
    py: Python<'py>,
    profile: PyReadonlyArray3<'py, f32>,
    k: usize,
    frames_per_instance: usize,
) -> PyResult<Bound<'py, numpy::PyArray4<f32>>> {
    let values = profile.as_array().to_owned();
    let echo_profile = echo::EchoProfile {
        values,
        row_offset: echo::WIDE_CROP_LO,
        meta: SessionMeta::new("py", 1, 0),
    };
    let policy = SelectionPolicy {
        instance_frames: frames_per_instance,
        instances_per_session: k,
    };
    let picked = eval::static_from_profile(&echo_profile, &policy, None).map_err(to_py_err)?;
    let (c, f, r) = picked[0].values.dim();
    let mut out = ndarray::Array4::<f32>::zeros((picked.len(), c, f, r));
    for (i, inst) in picked.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i).assign(&inst.values);
    }
    Ok(out.into_pyarray(py))
}

/// TPR, FPR, and balanced accuracy from confusion counts.
#[pyfunction]
fn metrics(tp: u64, fp: u64, tn: u64, fn_: u64) -> PyResult<(f64, f64, f64)> {
    let m = eval::metrics(&eval::ConfusionCounts::new(tp, fp, tn, fn_)).map_err(to_py_err)?;
    Ok((m.tpr, m.fpr, m.bac))
}

/// One-way range in meters for a round-trip delay in samples.
#[pyfunction]
fn row_to_range_m(row: f64) -> f64 {
    echo::row_to_range_m(row, signal::SAMPLE_RATE)
}

/// Authenticate one stored instance (shape (4, frames, 110)) against an
/// enrolled checkpoint; returns (score, accepted).
#[pyfunction]
fn authenticate(checkpoint: &str, instance: PyReadonlyArray3<'_, f32>) -> PyResult<(f64, bool)> {
    let ckpt = store::read_checkpoint(std::path::Path::new(checkpoint)).map_err(to_py_err)?;
    let values: Array3<f32> = instance.as_array().to_owned();
    let inst = Instance {
        values,
        label: None,
        meta: InstanceMeta {
            session: SessionMeta::new("py", 1, 0),
            position: 0,
        },
    };
    model::authenticate(&ckpt.model, &ckpt.params, &inst).map_err(to_py_err)
}

/// Positive-class scores for a batch of stored instances against a
/// checkpoint; returns an (n, 1) array.
#[pyfunction]
fn authenticate_batch<'py>(
    py: Python<'py>,
    checkpoint: &str,
    instances: numpy::PyReadonlyArray4<'py, f32>,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let ckpt = store::read_checkpoint(std::path::Path::new(checkpoint)).map_err(to_py_err)?;
    let batch = instances.as_array();
    let n = batch.shape()[0];
    let owned: Vec<Instance> = (0..n)
        .map(|i| Instance {
            values: batch.index_axis(ndarray::Axis(0), i).to_owned(),
            label: None,
            meta: InstanceMeta {
                session: SessionMeta::new("py", 1, 0),
                position: i,
            },
        })
        .collect();
    let refs: Vec<&Instance> = owned.iter().collect();
    let scores = model::authenticate_batch(&ckpt.model, &ckpt.params, &refs).map_err(to_py_err)?;
    let mut out = ndarray::Array2::<f64>::zeros((n, 1));
    for (i, (score, _)) in scores.iter().enumerate() {
        out[(i, 0)] = *score;
    }
    Ok(out.into_pyarray(py))
}

/// The evaluation window (rows −15…54) of a stored instance, z-scored: the
/// exact tensor the classifier consumes.
#[pyfunction]
fn evaluation_input<'py>(
    py: Python<'py>,
    instance: PyReadonlyArray3<'py, f32>,
) -> PyResult<Bound<'py, PyArray3<f32>>> {
    let values = instance.as_array().to_owned();
    Ok(instances::evaluation_input(&values.view()).into_pyarray(py))
}

#[pymodule]
fn echoid_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFace>()?;
    m.add_function(wrap_pyfunction!(generate_chirp, m)?)?;
    m.add_function(wrap_pyfunction!(tx_stream, m)?)?;
    m.add_function(wrap_pyfunction!(make_face, m)?)?;
    m.add_function(wrap_pyfunction!(remount, m)?)?;
    m.add_function(wrap_pyfunction!(day_drift, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_session, m)?)?;
    m.add_function(wrap_pyfunction!(build_echo_profile, m)?)?;
    m.add_function(wrap_pyfunction!(select_static_instances, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(row_to_range_m, m)?)?;
    m.add_function(wrap_pyfunction!(authenticate, m)?)?;
    m.add_function(wrap_pyfunction!(authenticate_batch, m)?)?;
    m.add_function(wrap_pyfunction!(evaluation_input, m)?)?;
    m.add("SAMPLE_RATE", signal::SAMPLE_RATE)?;
    m.add("SAMPLES_PER_SWEEP", signal::SAMPLES_PER_SWEEP)?;
    m.add("EVAL_ROWS", echo::EVAL_ROWS)?;
    m.add("WIDE_ROWS", echo::WIDE_ROWS)?;
    Ok(())
}
