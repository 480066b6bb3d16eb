mod common;

use sqlab_core::data::load_split;
use sqlab_core::harness::{cmd_budget, cmd_matrix, cmd_noise, cmd_tails, ExperimentSpec, Precision};
use sqlab_core::model::{nll_eval, Checkpoint};

#[test]
fn matrix_is_reproducible_and_anchored_to_fp() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = common::trained(&common::short_smoke(40, 4));
    let spec_path = common::write_experiment(dir.path(), &[("m", &ckpt)], 12, "[awq]\nfractions = [0.05]\nfactors = [2.0]\n");
    let spec = ExperimentSpec::load(&spec_path).unwrap();
    let (_, first) = cmd_matrix(&spec).unwrap();
    let csv1 = std::fs::read(dir.path().join("out/matrix.csv")).unwrap();
    let (_, second) = cmd_matrix(&spec).unwrap();
    let csv2 = std::fs::read(dir.path().join("out/matrix.csv")).unwrap();
    assert_eq!(csv1, csv2);
    assert_eq!(first, second);
    assert_eq!(first.rows.len(), 12);
    assert_eq!(first.rows.iter().filter(|r| r.precision == Precision::W4A4).count(), 5);

    let eval = load_split(&dir.path().join("eval.txt"), 64, None).unwrap();
    let loaded = Checkpoint::load(&dir.path().join("m.sqlab")).unwrap();
    assert_eq!(first.rows[0].method, "FP16");
    assert_eq!(first.rows[0].nll, nll_eval(&eval, &loaded, None).unwrap());
    assert!(dir.path().join("out/matrix.manifest.json").exists());
}

#[test]
fn budget_tails_and_noise_reports() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = common::trained(&common::short_smoke(30, 4));
    let n_layers = ckpt.config.n_layers;
    let spec_path = common::write_experiment(
        dir.path(),
        &[("m", &ckpt)],
        8,
        "[noise]\nsigmas = [0.0, 0.5, 2.0]\nseeds = [1, 2]\n[tails]\nreservoir_cap = 256\n",
    );
    let spec = ExperimentSpec::load(&spec_path).unwrap();

    cmd_budget(&spec).unwrap();
    let budget = std::fs::read_to_string(dir.path().join("out/m/budget.csv")).unwrap();
    // Header, the FP row and one row per skip set.
    assert_eq!(budget.lines().count(), 2 + spec.budget.grid.len());
    assert!(budget.lines().nth(1).unwrap().starts_with("fp,"));

    cmd_tails(&spec).unwrap();
    let tails = std::fs::read_to_string(dir.path().join("out/m/tails.csv")).unwrap();
    assert_eq!(tails.lines().count(), 1 + 5 * n_layers);

    cmd_noise(&spec).unwrap();
    let noise = std::fs::read_to_string(dir.path().join("out/m/noise.csv")).unwrap();
    assert_eq!(noise.lines().count(), 1 + 2 * 3 * 2);
    for line in noise.lines().skip(1).filter(|l| l.contains(",0,") || l.contains(",0.0,")) {
        assert_eq!(line.split(',').nth(2).unwrap().parse::<f64>().unwrap(), 0.0, "{line}");
    }
    for cmd in ["budget", "tails", "noise"] {
        assert!(dir.path().join(format!("out/{cmd}.manifest.json")).exists());
    }
}

#[test]
fn overlapping_splits_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = common::trained(&common::short_smoke(5, 0));
    let spec_path = common::write_experiment(dir.path(), &[("m", &ckpt)], 4, "");
    std::fs::copy(dir.path().join("eval.txt"), dir.path().join("calib.txt")).unwrap();
    let spec = ExperimentSpec::load(&spec_path).unwrap();
    assert_eq!(cmd_matrix(&spec).unwrap_err().exit_code(), 2);
}
