use spoil_core::backbone::{build_backbone, replace_head, Architecture, BackboneSpec, FreezePolicy, WeightInit};
use spoil_core::cnn::{train_fold, Hyperparams, TrainedModel};
use spoil_core::dataset::{Fold, ImageTensor, LabelledImages};
use spoil_core::Error;

fn stripes(size: usize, period: usize, vertical: bool, phase: usize) -> ImageTensor {
    let plane: Vec<f32> = (0..size * size)
        .map(|i| {
            let (y, x) = (i / size, i % size);
            let t = if vertical { x } else { y } + phase;
            if (t / period) % 2 == 0 { 0.9 } else { 0.1 }
        })
        .collect();
    ImageTensor { size, data: [plane.clone(), plane.clone(), plane].concat(), converted_from: None }
}

fn toy_data() -> (LabelledImages, Fold) {
    let mut data = LabelledImages::new(vec!["vertical".into(), "horizontal".into()]);
    let mut ids = Vec::new();
    for i in 0..12 {
        let vertical = i % 2 == 0;
        let id = format!("s{i}");
        data.insert(&id, stripes(64, 4, vertical, i), if vertical { "vertical" } else { "horizontal" }).unwrap();
        ids.push(id);
    }
    let fold = Fold { index: 0, train: ids[..8].to_vec(), validation: ids[8..].to_vec() };
    (data, fold)
}

fn model() -> spoil_core::backbone::ClassifierModel {
    replace_head(build_backbone(&BackboneSpec::new(Architecture::ResNet18, WeightInit::Random, 2)).unwrap(), 2).unwrap()
}

fn hp() -> Hyperparams {
    Hyperparams { learning_rate: 1e-3, batch_size: 4, max_epochs: 4, patience: 3, ..Hyperparams::default() }
}

#[test]
fn training_reduces_loss_and_probabilities_normalise() {
    let (data, fold) = toy_data();
    let trained: TrainedModel = train_fold(model(), &fold, &data, &hp(), 1).unwrap();
    let c = &trained.curves;
    assert_eq!(c.epochs(), c.val_loss.len());
    assert!(c.train_loss.last().unwrap() < &c.train_loss[0], "{:?}", c.train_loss);
    assert!(trained.selected_epoch < c.epochs());
    let best = c.val_loss.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(c.val_loss[trained.selected_epoch], best);

    let (imgs, _) = data.batch(&fold.validation).unwrap();
    for row in trained.predict_proba(&imgs).unwrap() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    let dir = tempfile::tempdir().unwrap();
    trained.save(dir.path()).unwrap();
    let loaded = TrainedModel::load(dir.path(), 0).unwrap();
    assert_eq!(loaded.predict(&imgs).unwrap(), trained.predict(&imgs).unwrap());
    assert_eq!(loaded.curves, trained.curves);
}

#[test]
fn training_is_reproducible_for_a_seed() {
    let (data, fold) = toy_data();
    let hp = Hyperparams { max_epochs: 2, patience: 1, ..hp() };
    let a = train_fold(model(), &fold, &data, &hp, 5).unwrap();
    let b = train_fold(model(), &fold, &data, &hp, 5).unwrap();
    assert_eq!(a.curves, b.curves);
}

#[test]
fn non_finite_input_is_reported_as_divergence() {
    let (mut data, mut fold) = toy_data();
    let mut bad = stripes(64, 4, true, 0);
    bad.data[10] = f32::NAN;
    data.insert("nan", bad, "vertical").unwrap();
    fold.train.push("nan".into());
    let err = train_fold(model(), &fold, &data, &hp(), 1).unwrap_err();
    assert!(matches!(err, Error::DivergenceDetected { epoch: 0 }), "{err}");
}

#[test]
fn empty_folds_and_bad_hyperparameters_are_rejected() {
    let (data, fold) = toy_data();
    let empty = Fold { index: 0, train: vec![], validation: fold.validation.clone() };
    assert!(matches!(train_fold(model(), &empty, &data, &hp(), 1), Err(Error::EmptyFold(_))));
    let no_val = Fold { index: 0, train: fold.train.clone(), validation: vec![] };
    assert!(matches!(train_fold(model(), &no_val, &data, &hp(), 1), Err(Error::EmptyFold(_))));
    let bad = Hyperparams { batch_size: 0, ..hp() };
    assert!(matches!(train_fold(model(), &fold, &data, &bad, 1), Err(Error::InvalidHyperparams(_))));
}

#[test]
fn head_only_training_leaves_base_weights_untouched() {
    let (data, fold) = toy_data();
    let m = model();
    let names = m.learnable_names();
    let before = m.snapshot().unwrap();
    let hp = Hyperparams { freeze: FreezePolicy::HeadOnly, max_epochs: 2, patience: 1, ..hp() };
    let trained = train_fold(m, &fold, &data, &hp, 1).unwrap();
    let after = trained.model.snapshot().unwrap();
    let changed: Vec<&String> = names
        .iter()
        .filter(|n| {
            let diff = (&before[*n] - &after[*n]).unwrap().abs().unwrap().max_all().unwrap();
            diff.to_scalar::<f32>().unwrap() > 0.0
        })
        .collect();
    assert!(!changed.is_empty());
    assert!(changed.iter().all(|n| n.starts_with("fc.")), "{changed:?}");
}
