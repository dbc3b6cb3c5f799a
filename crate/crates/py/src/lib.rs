use pyo3::prelude::*;

#[pymodule]
fn mmt_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
