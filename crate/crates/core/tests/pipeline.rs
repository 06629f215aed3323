use std::path::Path;

use ccl_core::autodiff::Tensor;
use ccl_core::classifier::Classifier;
use ccl_core::data::{generate_synthetic, LabeledDataset, SyntheticSpec};
use ccl_core::head::{CclConfig, ClassDictionary, EmbeddingNet};
use ccl_core::run::{self, params_to_text, RunConfig, SavedModel};
use ccl_core::trainer::{CclHead, Model, TargetMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(text: &str) -> RunConfig {
    RunConfig::from_pairs(&run::parse_key_values(text, "cfg").unwrap()).unwrap()
}

fn model_with_dict(rows: &[Vec<f64>]) -> Model {
    let k = rows.len();
    let ccl = CclConfig {
        n2: rows[0].len(),
        embed_hidden: vec![4],
        ..CclConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Model {
        classifier: Classifier::zeros(&[3, 4], k).unwrap(),
        head: Some(CclHead {
            net: EmbeddingNet::new(4, &ccl, &mut rng).unwrap(),
            dict: ClassDictionary::from_embeddings(Tensor::from_rows(rows).unwrap()).unwrap(),
        }),
    }
}

fn save(model: &Model, dir: &Path) -> std::path::PathBuf {
    let path = dir.join("params.txt");
    std::fs::write(&path, params_to_text(model, &TargetMode::Ccl, &CclConfig::default(), 4)).unwrap();
    path
}

fn summary_value(summary: &str, key: &str) -> f64 {
    summary
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn export_of_orthogonal_dictionary_reports_overfit_epsilon() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<Vec<f64>> = (0..7)
        .map(|k| (0..7).map(|j| if j == k { 3.0 } else { 0.0 }).collect())
        .collect();
    let params = save(&model_with_dict(&rows), dir.path());
    let (m, summary) = run::export_softlabels(&params).unwrap();
    assert_eq!(m.classes(), 7);
    assert_eq!(m.epoch(), 4);
    let eps = summary_value(&summary, "epsilon_uniform");
    assert!((eps - 0.5228).abs() <= 1e-3, "{summary}");
}

#[test]
fn export_of_antipodal_dictionary_is_nearly_hard() {
    let dir = tempfile::tempdir().unwrap();
    let params = save(&model_with_dict(&[vec![1.0, 0.0], vec![-1.0, 0.0]]), dir.path());
    let (_, summary) = run::export_softlabels(&params).unwrap();
    assert!(summary_value(&summary, "epsilon_uniform") < 0.05, "{summary}");
    assert!(summary_value(&summary, "mean_softness") > 0.98, "{summary}");
}

#[test]
fn zero_model_accuracy_is_class_zero_frequency() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        samples_per_class: vec![3, 5, 2],
        ..SyntheticSpec::separable(3, 1, 4)
    };
    let ds = generate_synthetic(&spec).unwrap();
    let data = dir.path().join("d.txt");
    ds.save(&data).unwrap();
    let model = Model {
        classifier: Classifier::zeros(&[ds.dim(), 4], 3).unwrap(),
        head: None,
    };
    let params = dir.path().join("p.txt");
    std::fs::write(&params, params_to_text(&model, &TargetMode::Hard, &CclConfig::default(), 0)).unwrap();
    let (cm, report) = run::eval_run(&params, &data).unwrap();
    assert_eq!(cm.accuracy().unwrap(), 0.3);
    assert!(report.contains("accuracy=0.300000\n"));
}

#[test]
fn apriori_lsr_run_and_saved_model_reload() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = config(&format!(
        "synthetic=isic\ndivisor=40\nmode=lsr-a5\nepochs=3\nout={}\n",
        out.display()
    ));
    let outcome = run::train_run(&cfg, |_, _| {}).unwrap();
    assert!(outcome.soft_labels.is_none());
    assert!(!out.join("softlabels.csv").exists());
    assert_eq!(outcome.log.len(), 3);
    assert!(outcome.log[0].contains("loss_ccl=na softness=na"));

    let saved = SavedModel::load(&out.join("params.txt")).unwrap();
    assert_eq!(saved.mode, TargetMode::LsrApriori { epsilon: 0.5228 });
    assert_eq!(saved.model, outcome.model);
    assert!(saved.soft_labels().is_err());
}

#[test]
fn separate_validation_file_is_used() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec::sibling_pairs(5, 1);
    let train = generate_synthetic(&spec).unwrap();
    let val = generate_synthetic(&SyntheticSpec { seed: 2, ..spec }).unwrap();
    let (tp, vp) = (dir.path().join("t.txt"), dir.path().join("v.txt"));
    train.save(&tp).unwrap();
    val.save(&vp).unwrap();
    let cfg = config(&format!(
        "data={}\nval_data={}\nmode=hard\nepochs=2\nout={}\n",
        tp.display(),
        vp.display(),
        dir.path().join("o").display()
    ));
    let (a, b) = cfg.load_data().unwrap();
    assert_eq!(a, LabeledDataset::load(&tp).unwrap());
    assert_eq!(b.len(), 30);
    let outcome = run::train_run(&cfg, |_, _| {}).unwrap();
    assert_eq!(outcome.confusion.total(), 30);
}

#[test]
fn every_logged_epoch_is_parseable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&format!(
        "synthetic=sibling-pairs\nper_class=8\nepochs=4\nlr_ccl=0.01\nout={}\n",
        dir.path().display()
    ));
    let mut seen = 0;
    run::train_run(&cfg, |report, line| {
        seen += 1;
        let fields: Vec<(&str, &str)> = line.split(' ').map(|f| f.split_once('=').unwrap()).collect();
        let keys: Vec<&str> = fields.iter().map(|f| f.0).collect();
        assert_eq!(
            keys,
            ["epoch", "loss_cls", "loss_ccl", "softness", "lr_backbone", "lr_ccl", "frozen", "val_acc", "val_kappa"]
        );
        assert_eq!(fields[0].1, report.epoch.to_string());
        for (_, v) in &fields[1..6] {
            v.parse::<f64>().unwrap();
        }
    })
    .unwrap();
    assert_eq!(seen, 4);
}

#[test]
fn converged_dictionary_respects_the_margin() {
    use ccl_core::head::class_correlation_loss_value;
    use ccl_core::trainer::{default_drop_epochs, TrainConfig, TrainState};

    let ds = generate_synthetic(&SyntheticSpec::separable(7, 40, 3)).unwrap();
    let epochs = 120;
    let cfg = TrainConfig {
        epochs,
        lr_drop_epochs: default_drop_epochs(epochs),
        patience: None,
        backbone_widths: vec![32, 16],
        seed: 3,
        ..TrainConfig::default()
    };
    let ccl = CclConfig {
        lr_ccl: 0.01,
        ..CclConfig::default()
    };
    let mut state = TrainState::new(cfg, ccl, &ds).unwrap();
    for _ in 0..epochs {
        state.train_epoch(&ds).unwrap();
    }
    let dict = &state.model.head.as_ref().unwrap().dict;
    // The loss is averaged over K² pairs; the bound is on the plain sum.
    let excess = class_correlation_loss_value(dict, 2.0).unwrap() * 49.0;
    assert!(excess <= 1e-2, "sum of margin violations {excess}");
}
