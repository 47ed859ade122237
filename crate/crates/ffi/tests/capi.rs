use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use gcgm::dataset::{write_proximity, write_survey, write_trait_schema};
use gcgm::graph_prior::Variant;
use gcgm::synthesis::{generate_scenario, ScenarioConfig};
use gcgm_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = gcgm_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn write_inputs(dir: &Path) {
    let cfg = ScenarioConfig {
        k: 3,
        p: 3,
        n_k: 80,
        variant: Variant::InterceptsProximity,
        alpha: vec![-0.3],
        beta: vec![0.5],
        c: None,
        latent_radius: 0.35,
        n_clusters: 2,
        n_covariates: 0,
        n_categories: 3,
        missing_rate: 0.0,
        edge_strength: 0.5,
        shared_edges: vec![(0, 1)],
        n_sweeps: 20,
        seed: 4,
    };
    let (truth, ds) = generate_scenario(&cfg).unwrap();
    write_survey(&ds, dir.join("survey.csv")).unwrap();
    write_trait_schema(&ds.traits, dir.join("schema.json")).unwrap();
    write_proximity(truth.proximity.as_ref().unwrap(), dir.join("proximity.csv")).unwrap();
}

#[test]
fn load_fit_query_and_free() {
    let dir = tempfile::tempdir().unwrap();
    write_inputs(dir.path());
    let (data, schema, prox) = (
        cstr(&dir.path().join("survey.csv")),
        cstr(&dir.path().join("schema.json")),
        cstr(&dir.path().join("proximity.csv")),
    );
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(gcgm_dataset_load(data.as_ptr(), schema.as_ptr(), prox.as_ptr(), &mut ds), GcgmStatus::Ok);
        assert_eq!(gcgm_dataset_n_groups(ds), 3);
        assert_eq!(gcgm_dataset_n_traits(ds), 3);

        let mut cfg = gcgm_fit_config_default(GcgmVariant::InterceptsProximity, 11);
        cfg.n_iterations = 300;
        cfg.burn_in = 100;
        cfg.threads = 1;
        cfg.n_deviance_draws = 5;
        let mut fit = ptr::null_mut();
        assert_eq!(gcgm_fit(ds, &cfg, &mut fit), GcgmStatus::Ok, "{}", last_error());

        let mut probs = vec![0.0; 9];
        assert_eq!(gcgm_fit_edge_probabilities(fit, 2, probs.as_mut_ptr(), probs.len()), GcgmStatus::Ok);
        for i in 0..3 {
            assert_eq!(probs[i * 3 + i], 0.0);
            for j in 0..3 {
                assert!((0.0..=1.0).contains(&probs[i * 3 + j]));
                assert_eq!(probs[i * 3 + j], probs[j * 3 + i]);
            }
        }
        assert_eq!(gcgm_fit_edge_probabilities(fit, 3, probs.as_mut_ptr(), probs.len()), GcgmStatus::InvalidArgument);
        assert!(last_error().contains("out of range"));
        assert_eq!(gcgm_fit_edge_probabilities(fit, 0, probs.as_mut_ptr(), 4), GcgmStatus::InvalidArgument);

        let mut dic = f64::NAN;
        assert_eq!(gcgm_fit_dic(fit, &mut dic), GcgmStatus::Ok);
        assert!(dic.is_finite());

        let out = dir.path().join("bundle");
        let out_c = cstr(&out);
        assert_eq!(gcgm_fit_write_summary(fit, out_c.as_ptr()), GcgmStatus::Ok, "{}", last_error());
        for f in ["edges.csv", "coef_standardized.csv", "latent_positions.csv", "beta_draws.csv", "dic.json"] {
            assert!(out.join(f).exists(), "{f}");
        }
        assert!(gcgm_last_error().is_null());

        gcgm_fit_free(fit);
        gcgm_dataset_free(ds);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    write_inputs(dir.path());
    let data = cstr(&dir.path().join("survey.csv"));
    let schema = cstr(&dir.path().join("schema.json"));
    let missing = cstr(&dir.path().join("nope.json"));
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(gcgm_dataset_load(ptr::null(), schema.as_ptr(), ptr::null(), &mut ds), GcgmStatus::InvalidArgument);
        assert!(ds.is_null());
        assert_eq!(gcgm_dataset_load(data.as_ptr(), missing.as_ptr(), ptr::null(), &mut ds), GcgmStatus::Runtime);
        assert!(last_error().contains("nope.json"));

        assert_eq!(gcgm_dataset_load(data.as_ptr(), schema.as_ptr(), ptr::null(), &mut ds), GcgmStatus::Ok);
        let mut cfg = gcgm_fit_config_default(GcgmVariant::InterceptsProximity, 1);
        cfg.n_iterations = 10;
        cfg.burn_in = 5;
        let mut fit = ptr::null_mut();
        assert_eq!(gcgm_fit(ds, &cfg, &mut fit), GcgmStatus::Validation);
        assert!(fit.is_null());
        assert!(last_error().contains("--proximity"));

        cfg.burn_in = 20;
        cfg.variant = GcgmVariant::Intercepts;
        assert_eq!(gcgm_fit(ds, &cfg, &mut fit), GcgmStatus::Validation);

        assert_eq!(gcgm_fit(ds, ptr::null(), &mut fit), GcgmStatus::InvalidArgument);
        assert_eq!(gcgm_fit_dic(ptr::null(), ptr::null_mut()), GcgmStatus::InvalidArgument);
        gcgm_dataset_free(ds);
        gcgm_dataset_free(ptr::null_mut());
        gcgm_fit_free(ptr::null_mut());
    }
    let version = unsafe { CStr::from_ptr(gcgm_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/gcgm.h")).unwrap();
    for name in [
        "gcgm_dataset_load",
        "gcgm_dataset_free",
        "gcgm_fit",
        "gcgm_fit_edge_probabilities",
        "gcgm_fit_dic",
        "gcgm_fit_write_summary",
        "gcgm_fit_free",
        "gcgm_last_error",
        "typedef struct GcgmFit GcgmFit",
        "GCGM_STATUS_VALIDATION = 2",
    ] {
        assert!(header.contains(name), "{name}");
    }
}
