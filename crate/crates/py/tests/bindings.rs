use std::ffi::CString;

use pyo3::prelude::*;
use pyo3::types::PyDict;

/// Runs `code` with the module bound to `ns` and a scratch directory path in `tmp`.
fn run(code: &str) {
    let dir = tempfile::tempdir().unwrap();
    Python::initialize();
    Python::attach(|py| {
        let m = pyo3::wrap_pymodule!(neat_style::neat_style)(py);
        let globals = PyDict::new(py);
        globals.set_item("ns", m).unwrap();
        globals.set_item("tmp", dir.path().to_str().unwrap()).unwrap();
        let code = CString::new(code).unwrap();
        if let Err(e) = py.run(&code, Some(&globals), None) {
            e.print(py);
            panic!("python snippet failed");
        }
    });
}

const IMAGES: &str = r#"
import random
rng = random.Random(0)
shape = (3, 16, 16)
content = [rng.random() for _ in range(3 * 16 * 16)]
style = [rng.random() for _ in range(3 * 16 * 16)]
"#;

#[test]
fn zero_initialized_model_returns_the_prior() {
    run(&format!(
        "{IMAGES}
m = ns.Model(seed=1, base_width=2)
out, out_shape = m.stylize(content, shape, style, shape, bilateral_d=5)
prior, prior_shape = ns.build_prior(content, shape, style, shape, bilateral_d=5)
assert out_shape == shape == prior_shape
assert out == prior
"
    ));
}

#[test]
fn checkpoint_and_image_round_trips() {
    run(&format!(
        "{IMAGES}
import os
m = ns.Model(base_width=2)
p = os.path.join(tmp, 'm.neat')
m.save(p)
m2 = ns.Model.load(p)
a = m.stylize(content, shape, style, shape, alpha=1.5, bilateral_d=5)
b = m2.stylize(content, shape, style, shape, alpha=1.5, bilateral_d=5)
assert a == b
q = os.path.join(tmp, 'x.png')
ns.save_image(content, shape, q)
data, s = ns.load_image(q)
assert s == shape
assert max(abs(x - y) for x, y in zip(data, content)) <= 0.5 / 255 + 1e-9
"
    ));
}

#[test]
fn metrics_and_errors() {
    run(&format!(
        "{IMAGES}
assert ns.chamfer_color(content, shape, content, shape) == 0.0
assert ns.chamfer_color([1.0, 0.0, 0.0], (3, 1, 1), [0.0, 0.0, 1.0], (3, 1, 1)) == 260100.0
m = ns.Model(base_width=2)
assert abs(m.sifid(content, shape, content, shape)) < 1e-6
assert m.content_proxy(content, shape, content, shape) == 0.0
try:
    m.stylize(content, (3, 16, 15), style, shape)
    raise AssertionError('shape mismatch accepted')
except ValueError:
    pass
try:
    m.stylize(content, shape, style, shape, alpha=-1.0)
    raise AssertionError('negative alpha accepted')
except ValueError:
    pass
try:
    ns.load_image('/definitely/not/here.png')
    raise AssertionError('missing file accepted')
except OSError:
    pass
"
    ));
}
