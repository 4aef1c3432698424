use pyo3::prelude::*;

#[pymodule]
fn clbench_py(_m: &Bound<'_, PyModule>) -> PyResult<()> { Ok(()) }
