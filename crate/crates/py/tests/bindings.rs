use pyo3::prelude::*;

use had_py::had_py;

#[test]
fn module_is_usable_from_an_embedded_interpreter() {
    pyo3::append_to_inittab!(had_py);
    Python::initialize();
    Python::attach(|py| {
        py.run(
            cr#"
import had_py
assert had_py.reverse_complement("ACCGTN") == "NACGGT"
plan = had_py.build_mask_plan(60, 6, 0.5, 1)
assert len(plan["masked_kmer"]) == 5
clf = had_py.Classifier(3, '{"n_blocks": 1, "d_model": 8, "d_k": 8, "d_v": 8, "n_heads": 2, "d_t": 8, "max_len": 36, "mlp_hidden": 16, "chunk": 4}')
assert clf.n_classes == 3
x = "ACGTTGCAAGGC"
assert clf.conjoined_predict(x) == clf.conjoined_predict(had_py.reverse_complement(x))
try:
    had_py.Student('{"n_heads": 3}')
    raise AssertionError("accepted")
except ValueError:
    pass
"#,
            None,
            None,
        )
        .unwrap_or_else(|e| panic!("{e}"));
    });
}
