//! Drives the bindings through an embedded interpreter: registers the
//! module on the init table, imports it the way `import benchaudit` would,
//! and calls every exposed function. One test function, because the init
//! table must be extended exactly once and before interpreter startup.

use std::path::Path;

use benchaudit::benchaudit as bindings;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

fn fixture(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

fn repo_path(rel: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(rel)
        .display()
        .to_string()
}

#[test]
fn module_imports_and_every_function_answers() {
    pyo3::append_to_inittab!(bindings);
    Python::initialize();
    Python::attach(|py| {
        let m = py.import("benchaudit").expect("import benchaudit");

        // sampling: pinned golden prefix for (len 500, n 100, seed 42)
        let indices: Vec<usize> = m
            .getattr("sample_indices")
            .unwrap()
            .call1((500, 100, 42))
            .unwrap()
            .extract()
            .unwrap();
        assert_eq!(indices.len(), 100);
        assert_eq!(&indices[..12], &[1, 2, 4, 9, 13, 17, 18, 21, 23, 33, 35, 42]);
        let oversample = m.getattr("sample_indices").unwrap().call1((5, 6, 0));
        assert!(oversample.is_err(), "n > len must raise");

        // corpus loading and id-level sampling agree with each other
        let corpus_path = repo_path("fixtures/smoke_corpus.csv");
        let questions: Vec<Bound<'_, PyDict>> = m
            .getattr("load_corpus")
            .unwrap()
            .call1((corpus_path.as_str(),))
            .unwrap()
            .extract()
            .unwrap();
        assert_eq!(questions.len(), 12);
        let first = &questions[0];
        let opts: Bound<'_, PyList> = first.get_item("options").unwrap().unwrap().extract().unwrap();
        assert_eq!(opts.len(), 4);
        let key: String = first.get_item("answer_key").unwrap().unwrap().extract().unwrap();
        assert_eq!(key.len(), 1);
        let sampled: Vec<String> = m
            .getattr("sample_ids")
            .unwrap()
            .call1((corpus_path.as_str(), 10, 42))
            .unwrap()
            .extract()
            .unwrap();
        assert_eq!(sampled.len(), 10);
        let all_ids: Vec<String> = questions
            .iter()
            .map(|q| q.get_item("id").unwrap().unwrap().extract().unwrap())
            .collect();
        for id in &sampled {
            assert!(all_ids.contains(id), "sampled id {id} not in corpus");
        }

        // answer extraction behaves like the harness scorer
        let extract = m.getattr("extract_answer").unwrap();
        let got: Option<String> = extract.call1(("The answer is (B).", 4)).unwrap().extract().unwrap();
        assert_eq!(got.as_deref(), Some("B"));
        let none: Option<String> = extract.call1(("no idea", 4)).unwrap().extract().unwrap();
        assert_eq!(none, None);
        assert!(extract.call1(("x", 0)).is_err());

        // summary tables off the shipped detail grid reproduce the published
        // per-router table byte-for-byte
        let (model_csv, router_csv): (String, String) = m
            .getattr("summarize_detail_csv")
            .unwrap()
            .call1((fixture("table2.csv"),))
            .unwrap()
            .extract()
            .unwrap();
        assert_eq!(router_csv, fixture("golden/table3_published.csv"));
        assert!(model_csv.starts_with("model,violations,"));
        assert_eq!(model_csv.lines().count(), 13);

        // confidence discount
        let conf = m.getattr("score_confidence").unwrap();
        let one: f64 = conf.call1((0.0, 6.0)).unwrap().extract().unwrap();
        assert_eq!(one, 1.0);
        let lower: f64 = conf.call1((0.1, 6.0)).unwrap().extract().unwrap();
        let lowest: f64 = conf.call1((0.2, 6.0)).unwrap().extract().unwrap();
        assert!(one > lower && lower > lowest);
        assert!(conf.call1((-0.1, 6.0)).is_err());

        // sensitivity slope off a two-point curve
        let cs: f64 = m
            .getattr("contamination_sensitivity")
            .unwrap()
            .call1((vec![(0.0f64, 0.45f64), (0.5f64, 0.60f64)],))
            .unwrap()
            .extract()
            .unwrap();
        assert!((cs - 0.3).abs() < 1e-12);

        // synthetic sweep returns the documented csv shape
        let sweep: String = m
            .getattr("simulate_sweep")
            .unwrap()
            .call1((repo_path("worlds/h1_contaminated.toml"), vec![0.0f64, 0.6f64], 10, 3, 8))
            .unwrap()
            .extract()
            .unwrap();
        let mut lines = sweep.lines();
        assert_eq!(lines.next(), Some("lambda,m,mean_gain,se,improve,degrade"));
        assert_eq!(lines.count(), 6, "two strengths x three router counts");
    });
}
