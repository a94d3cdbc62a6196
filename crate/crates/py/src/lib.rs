//! Python bindings. Images cross the boundary as a flat channel-major list
//! of floats in [0, 1] plus a `(channels, height, width)` shape.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyFileNotFoundError, PyIOError, PyValueError};
use pyo3::prelude::*;

use neat_core::evalkit;
use neat_core::imgproc::{self, PriorConfig};
use neat_core::infer::{self, OutputSize, StylizeOptions};
use neat_core::nets::{self, NetConfig, Precision};
use neat_core::{ImageTensor, NeatError};

pub type Shape = (usize, usize, usize);

fn to_py(e: NeatError) -> PyErr {
    match e {
        NeatError::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => PyFileNotFoundError::new_err(e.to_string()),
        NeatError::Data { .. } | NeatError::Io(_) | NeatError::Image(_) | NeatError::Checkpoint(_) => {
            PyIOError::new_err(e.to_string())
        }
        NeatError::NonFinite(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn image(data: Vec<f64>, shape: Shape) -> PyResult<ImageTensor> {
    let (c, h, w) = shape;
    ImageTensor::new(c, h, w, data).map_err(to_py)
}

fn pack(img: ImageTensor) -> (Vec<f64>, Shape) {
    let shape = (img.channels(), img.height(), img.width());
    (img.data().to_vec(), shape)
}

fn prior_config(blur: bool, blur_kernel: usize, bilateral_d: usize, bilateral_sigma: f64) -> PriorConfig {
    PriorConfig {
        blur_enabled: blur,
        bilateral_diameter: bilateral_d,
        bilateral_sigma,
        ..PriorConfig::default().with_blur_kernel(blur_kernel)
    }
}

/// A style-transfer network.
#[pyclass(module = "neat_style", frozen)]
pub struct Model {
    inner: nets::Model,
}

#[pymethods]
impl Model {
    /// Freshly initialized weights; the decoder starts at zero, so outputs
    /// equal the content prior until trained.
    #[new]
    #[pyo3(signature = (seed = 0, base_width = 16, precision = "f32"))]
    fn new(seed: u64, base_width: usize, precision: &str) -> PyResult<Self> {
        let cfg = NetConfig {
            seed,
            base_width,
            ..NetConfig::default()
        };
        let precision = Precision::parse(precision).map_err(to_py)?;
        let inner = nets::Model::new(cfg, precision).map_err(to_py)?;
        Ok(Model { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model {
            inner: nets::Model::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    /// Stylizes `content` with `style`. Returns `(data, shape)`.
    #[pyo3(signature = (
        content, content_shape, style, style_shape, alpha = 1.0, blur = true,
        blur_kernel = 7, bilateral_d = 25, bilateral_sigma = 100.0, size = None
    ))]
    #[allow(clippy::too_many_arguments)]
    fn stylize(
        &self,
        py: Python<'_>,
        content: Vec<f64>,
        content_shape: Shape,
        style: Vec<f64>,
        style_shape: Shape,
        alpha: f64,
        blur: bool,
        blur_kernel: usize,
        bilateral_d: usize,
        bilateral_sigma: f64,
        size: Option<usize>,
    ) -> PyResult<(Vec<f64>, Shape)> {
        let (c, s) = (image(content, content_shape)?, image(style, style_shape)?);
        let opts = StylizeOptions {
            alpha,
            prior: prior_config(blur, blur_kernel, bilateral_d, bilateral_sigma),
            size: size.map_or(OutputSize::Native, OutputSize::LongSide),
        };
        let out = py.detach(|| infer::stylize(&self.inner, &c, &s, &opts)).map_err(to_py)?;
        Ok(pack(out))
    }

    /// Single-image Fréchet distance in this model's feature space.
    fn sifid(&self, py: Python<'_>, a: Vec<f64>, a_shape: Shape, b: Vec<f64>, b_shape: Shape) -> PyResult<f64> {
        let (a, b) = (image(a, a_shape)?, image(b, b_shape)?);
        py.detach(|| evalkit::sifid(&self.inner, &a, &b)).map_err(to_py)
    }

    /// Feature-space content distance; zero for identical images.
    fn content_proxy(
        &self,
        py: Python<'_>,
        content: Vec<f64>,
        content_shape: Shape,
        stylized: Vec<f64>,
        stylized_shape: Shape,
    ) -> PyResult<f64> {
        let (a, b) = (image(content, content_shape)?, image(stylized, stylized_shape)?);
        py.detach(|| evalkit::content_proxy(&self.inner, &a, &b)).map_err(to_py)
    }
}

/// Decodes a PNG or JPEG into `(data, shape)`.
#[pyfunction]
fn load_image(path: PathBuf) -> PyResult<(Vec<f64>, Shape)> {
    Ok(pack(imgproc::load_image(&path).map_err(to_py)?))
}

/// Encodes an RGB or gray image as 8 bits; format from the extension.
#[pyfunction]
fn save_image(data: Vec<f64>, shape: Shape, path: PathBuf) -> PyResult<()> {
    imgproc::save_image(&image(data, shape)?, &path).map_err(to_py)
}

/// Content prior: optional blur, bilateral filter, recolour to the style,
/// then scale by 0.5.
#[pyfunction]
#[pyo3(signature = (
    content, content_shape, style, style_shape, blur = true, blur_kernel = 7,
    bilateral_d = 25, bilateral_sigma = 100.0
))]
#[allow(clippy::too_many_arguments)]
fn build_prior(
    py: Python<'_>,
    content: Vec<f64>,
    content_shape: Shape,
    style: Vec<f64>,
    style_shape: Shape,
    blur: bool,
    blur_kernel: usize,
    bilateral_d: usize,
    bilateral_sigma: f64,
) -> PyResult<(Vec<f64>, Shape)> {
    let (c, s) = (image(content, content_shape)?, image(style, style_shape)?);
    let cfg = prior_config(blur, blur_kernel, bilateral_d, bilateral_sigma);
    let out = py.detach(|| imgproc::build_prior(&c, &s, &cfg)).map_err(to_py)?;
    Ok(pack(out))
}

/// Symmetric squared colour Chamfer distance in 0-255 units.
#[pyfunction]
#[pyo3(signature = (a, a_shape, b, b_shape, sample = None, seed = 0))]
fn chamfer_color(
    py: Python<'_>,
    a: Vec<f64>,
    a_shape: Shape,
    b: Vec<f64>,
    b_shape: Shape,
    sample: Option<usize>,
    seed: u64,
) -> PyResult<f64> {
    let (a, b) = (image(a, a_shape)?, image(b, b_shape)?);
    py.detach(|| evalkit::chamfer_color(&a, &b, sample, seed)).map_err(to_py)
}

#[pymodule]
pub fn neat_style(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(load_image, m)?)?;
    m.add_function(wrap_pyfunction!(save_image, m)?)?;
    m.add_function(wrap_pyfunction!(build_prior, m)?)?;
    m.add_function(wrap_pyfunction!(chamfer_color, m)?)?;
    Ok(())
}
