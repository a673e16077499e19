use pyo3::prelude::*;
use pyo3::types::PyDict;

fn run(code: &str) {
    Python::attach(|py| {
        let m = pyo3::wrap_pymodule!(rftwin::rftwin)(py);
        py.import("sys")
            .and_then(|sys| sys.getattr("modules"))
            .and_then(|mods| mods.set_item("rftwin", m))
            .unwrap();
        let globals = PyDict::new(py);
        let code = std::ffi::CString::new(code).unwrap();
        py.run(&code, Some(&globals), None).unwrap_or_else(|e| {
            e.print(py);
            panic!("python code failed");
        });
    });
}

#[test]
fn module_round_trip() {
    run(r#"
import rftwin
s = rftwin.Scenario(3, duration_ms=2)
s.set_taps(2, 0, 1, [(5, 0.25 + 0.5j)])
t = rftwin.Scenario.from_bytes(s.to_bytes())
assert t.taps(2, 0, 1) == [(5, 0.25 + 0.5j)]
assert t.taps(2, 0, 0) == []
assert len(t.links()) == 6
assert rftwin.validate_link(t, 2, 0, time_ms=1)["pass"]
try:
    s.set_taps(0, 1, 0, [(600, 1 + 0j)])
    raise AssertionError("bin beyond grid accepted")
except ValueError:
    pass
per_link, total = rftwin.bench(links=1, ms=5)
assert len(per_link) == 1 and total > 0
"#);
}
