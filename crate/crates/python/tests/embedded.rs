use physeg_py::physeg_module;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module(code: &str) -> PyResult<()> {
    pyo3::append_to_inittab!(physeg_module);
    Python::initialize();
    Python::attach(|py| {
        let globals = PyDict::new(py);
        globals.set_item("physeg", py.import("physeg")?)?;
        py.run(&std::ffi::CString::new(code).unwrap(), Some(&globals), None)
    })
}

#[test]
fn bindings_match_core() {
    with_module(
        r#"
import math
mpm = physeg.MultiParametricMap.phantom((12, 10, 8), "t")
s = physeg.AugmentationSession(mpm)
b = s.batch("spgr-ood", 2, (4, 4, 4), origin=(1, 2, 3), seed=9)
assert b["origin"] == (1, 2, 3)
assert len(b["intensity"]) == 128
assert b["target_shape"] == [4, 4, 4, 4]
total, _ = physeg.attenuated_ce_loss([0.0] * 8, [0.0] * 8, bytes([0, 1, 2, 3, 0, 1, 2, 3][:2]), (2, 1, 1), 4, 3)
assert abs(total - 2 * math.log(4)) < 1e-12
try:
    physeg.SequenceParams.mprage(-5.0, 0.0, 1000.0)
    raise AssertionError("no error")
except physeg.PhysegError:
    pass
"#,
    )
    .unwrap();
}
