//! Python bindings for the orientation-estimation library: a feature-map
//! wrapper plus the estimation entry points, enough to drive the core
//! pipeline from Python without shelling out to the CLI.
//!
//! Build with `cargo build -p cvorient-py`; the resulting
//! `libcvorient_py.so` imports as `cvorient_py` once it is on the Python
//! path under the name `cvorient_py.so` (see `python/smoke_test.py`).

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py_err(err: cvorient::CvoError) -> PyErr {
    PyValueError::new_err(err.to_string())
}

/// A dense row-major feature map over (height, width, channel).
#[pyclass(name = "FeatureMap", module = "cvorient_py")]
struct PyFeatureMap {
    inner: cvorient::FeatureMap,
}

#[pymethods]
impl PyFeatureMap {
    #[new]
    fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: cvorient::FeatureMap::new(height, width, channels, values)
                .map_err(to_py_err)?,
        })
    }

    /// Extracts features from a PNG image (panorama or overhead strip).
    #[staticmethod]
    fn from_png(path: &str) -> PyResult<Self> {
        let image = cvorient::RasterImage::load_png(path).map_err(to_py_err)?;
        Ok(Self {
            inner: cvorient::extract_features(&image).map_err(to_py_err)?,
        })
    }

    /// Reads an FMAP1 file.
    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: cvorient::read_fmap(path).map_err(to_py_err)?,
        })
    }

    /// Writes the map as an FMAP1 file. Samples are stored as f32, so a
    /// round trip quantizes them.
    fn write(&self, path: &str) -> PyResult<()> {
        cvorient::write_fmap(&self.inner, path).map_err(to_py_err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        self.inner.shape()
    }

    /// The sample values in row-major (height, width, channel) order.
    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    fn __repr__(&self) -> String {
        let (height, width, channels) = self.inner.shape();
        format!("FeatureMap({height}x{width}x{channels})")
    }
}

/// Estimates the orientation shift of `satellite` relative to `ground`,
/// returning a dict with `w_est`, `theta_est`, `peak_score`, `method`, and
/// `scale`.
#[pyfunction]
#[pyo3(signature = (ground, satellite, method = "fi", scale = 10))]
fn estimate<'py>(
    py: Python<'py>,
    ground: PyRef<'_, PyFeatureMap>,
    satellite: PyRef<'_, PyFeatureMap>,
    method: &str,
    scale: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let est = match method {
        "fi" => cvorient::estimate_fi(&ground.inner, &satellite.inner, scale),
        "cs" => cvorient::estimate_cs(&ground.inner, &satellite.inner, scale),
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown method {other:?}, expected \"fi\" or \"cs\""
            )))
        }
    }
    .map_err(to_py_err)?;
    let dict = PyDict::new(py);
    dict.set_item("w_est", est.w_est)?;
    dict.set_item("theta_est", est.theta_est.degrees())?;
    dict.set_item("peak_score", est.peak_score)?;
    dict.set_item("method", est.method.to_string())?;
    dict.set_item("scale", est.scale)?;
    Ok(dict)
}

/// The angular difference between two headings, in [0, 180] degrees.
#[pyfunction]
fn angle_diff(theta1: f64, theta2: f64) -> PyResult<f64> {
    if !theta1.is_finite() || !theta2.is_finite() {
        return Err(PyValueError::new_err(format!(
            "angles must be finite, got {theta1} and {theta2}"
        )));
    }
    Ok(cvorient::angle_diff(
        cvorient::SouthAlignedAngle::new(theta1),
        cvorient::SouthAlignedAngle::new(theta2),
    )
    .degrees())
}

/// Converts a shift in feature bins to degrees over the given feature width.
#[pyfunction]
fn bins_to_degrees(w: f64, width: usize) -> PyResult<f64> {
    Ok(cvorient::bins_to_degrees(w, width)
        .map_err(to_py_err)?
        .degrees())
}

#[pymodule]
fn cvorient_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFeatureMap>()?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(angle_diff, m)?)?;
    m.add_function(wrap_pyfunction!(bins_to_degrees, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
