use cto::checkpoint::{Checkpoint, MAGIC};
use cto::data::{make_batch, synth_dataset};
use cto::eval::evaluate;
use cto::nn::Module;
use cto::train::{checkpoint_path, TrainConfig, Trainer};
use cto::{CtoError, Graph, ModelConfig, Tensor, Variant};

fn trainer(variant: Variant, lr: f64) -> Trainer<f32> {
    let config = TrainConfig {
        lr,
        batch: 2,
        epochs: 1,
        ..TrainConfig::desk()
    };
    Trainer::new(&ModelConfig::tiny(variant), config).unwrap()
}

fn params(t: &Trainer<f32>) -> Vec<u32> {
    let mut out = Vec::new();
    t.model.visit_params(&mut |p| out.extend(p.value().data().iter().map(|v| v.to_bits())));
    out
}

#[test]
fn zero_learning_rate_leaves_weights_alone() {
    let data = synth_dataset(4, 64, 1, 1).unwrap();
    for variant in [Variant::Cnn, Variant::Full] {
        let mut t = trainer(variant, 0.0);
        let before = params(&t);
        t.fit(&data, &mut |_| {}).unwrap();
        assert_eq!(t.step_count(), 2);
        assert_eq!(params(&t), before, "{variant}");
    }
}

#[test]
fn non_finite_loss_names_its_component() {
    let mut data = synth_dataset(2, 64, 2, 1).unwrap();
    data[0].image.data_mut()[0] = f32::NAN;
    let mut t = trainer(Variant::Full, 1e-4);
    let before = params(&t);
    let batch = make_batch::<f32>(&[&data[0], &data[1]], 1).unwrap();
    match t.train_step(&batch) {
        Err(CtoError::NonFinite { component, step }) => {
            assert!(!component.is_empty());
            assert_eq!(step, 1);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(params(&t), before);
}

#[test]
fn rejects_unsupported_inputs() {
    let mut model = cto::CtoModel::<f32>::new(&ModelConfig::tiny(Variant::Cnn), &mut rand::rng()).unwrap();
    let mut g = Graph::new(true);
    for shape in [[1, 3, 48, 64], [1, 1, 64, 64]] {
        let x = g.input(Tensor::zeros(&shape));
        assert!(model.forward(&mut g, x).is_err(), "{shape:?}");
    }
    let bad = TrainConfig {
        image_size: 100,
        ..TrainConfig::desk()
    };
    assert!(matches!(Trainer::<f32>::new(&ModelConfig::tiny(Variant::Cnn), bad), Err(CtoError::Config(_))));
}

#[test]
fn checkpoints_round_trip_and_reject_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_dataset(2, 64, 3, 1).unwrap();
    let mut t = trainer(Variant::Full, 1e-3);
    t.config.checkpoint_dir = Some(dir.path().to_path_buf());
    t.fit(&data, &mut |_| {}).unwrap();
    let path = checkpoint_path(dir.path(), 1);
    let ckpt = Checkpoint::read(&path).unwrap();
    assert_eq!(ckpt.meta.epoch, 1);
    assert_eq!(ckpt.meta.step, 1);
    let restored = Trainer::<f32>::resume(&ckpt).unwrap();
    assert_eq!(params(&restored), params(&t));
    assert!(Trainer::<f64>::resume(&ckpt).is_err());

    let bytes = std::fs::read(&path).unwrap();
    let mut wrong_magic = bytes.clone();
    wrong_magic[0] ^= 0xff;
    let mut wrong_version = bytes.clone();
    wrong_version[MAGIC.len()] = 9;
    for (name, content) in [("magic", wrong_magic), ("version", wrong_version), ("short", bytes[..20].to_vec())] {
        let p = dir.path().join(name);
        std::fs::write(&p, content).unwrap();
        assert!(matches!(Checkpoint::read(&p), Err(CtoError::Checkpoint(_) | CtoError::Io(_))), "{name}");
    }
    assert!(Checkpoint::read(&dir.path().join("absent.ckpt")).is_err());
}

#[test]
fn evaluation_is_repeatable() {
    let data = synth_dataset(3, 64, 4, 1).unwrap();
    let mut t = trainer(Variant::Full, 1e-4);
    let a = evaluate(&mut t.model, &data).unwrap();
    let b = evaluate(&mut t.model, &data).unwrap();
    assert_eq!(a.per_image.len(), 3);
    assert_eq!(format!("{a:?}"), format!("{b:?}"));
    assert!(matches!(evaluate(&mut t.model, &[]), Err(CtoError::EmptyDataset(_))));
    assert!(matches!(t.fit(&[], &mut |_| {}), Err(CtoError::EmptyDataset(_))));
}
