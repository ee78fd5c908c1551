use pyo3::prelude::*;
use pyo3::types::PyDict;
use pyo3::wrap_pymodule;

fn with_module(code: &str) -> PyResult<()> {
    Python::attach(|py| {
        let m = wrap_pymodule!(bayesprompt_py::bayesprompt_py)(py);
        let locals = PyDict::new(py);
        locals.set_item("bp", m)?;
        let code = std::ffi::CString::new(code).unwrap();
        py.run(&code, None, Some(&locals))
    })
}

#[test]
fn round_trip_through_python() {
    with_module(
        r#"
s = bp.generate_synthetic_set(n_classes=3, per_class=10, dim=4, seed=1)
assert len(s) == 30
fit = bp.fit_gmm(s, 3)
p, trace = bp.svgd_run(fit.params.sample(8, 1), fit.params, n_iters=5)
assert len(p) == 8 and len(trace) == 5
pack = bp.synthesize_prompts(s, p)
m = bp.train(s, s, pack, epochs=2)
assert 0.0 <= bp.evaluate_f1(m, s)["micro_f1"] <= 1.0
"#,
    )
    .unwrap();
}

#[test]
fn errors_map_to_python_exceptions() {
    with_module(
        r#"
try:
    bp.rbf_kernel([0.0], [1.0], 0.0)
    raise AssertionError("no error")
except ValueError:
    pass
try:
    bp.PromptPack.load("/nonexistent/pack.bpem")
    raise AssertionError("no error")
except OSError:
    pass
try:
    bp.EmbeddingSet([[1.0, 2.0], [1.0]], [0, 0], ["a"])
    raise AssertionError("no error")
except ValueError:
    pass
"#,
    )
    .unwrap();
}
