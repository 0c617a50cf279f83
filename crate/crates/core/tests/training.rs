use ovaxai::arch::{build_lenet, LeNetVariant};
use ovaxai::data::{generate_synthetic, load_tensors, split_train_test};
use ovaxai::train::{load_checkpoint, save_checkpoint, train, Checkpoint, TrainConfig};
use ovaxai::ModelParams;

#[test]
fn lenet_learns_synthetic_textures_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic(dir.path(), &[20; 5], 32, 5).unwrap();
    let (tr, te) = split_train_test(&m, 0.8, 1).unwrap();
    let (tr, _) = load_tensors(&tr, 32).unwrap();
    let (te, _) = load_tensors(&te, 32).unwrap();
    let spec = build_lenet(LeNetVariant::A, [32, 32, 3]).unwrap();
    let config = TrainConfig {
        epochs: 15,
        seed: 11,
        ..TrainConfig::default()
    };
    let run = || train(&spec, ModelParams::init(&spec, 11).unwrap(), &tr, Some(&te), &config).unwrap();
    let (p1, h1) = run();
    let (p2, h2) = run();
    assert_eq!(h1, h2);
    assert_eq!(p1, p2);
    let first = &h1.epochs[0];
    let last = h1.last().unwrap();
    assert!(last.train_loss < first.train_loss);
    assert!(last.test_acc.unwrap() >= 0.8, "test accuracy {:?}", last.test_acc);

    let path = dir.path().join("model.ovck");
    save_checkpoint(&Checkpoint::from_params(&spec, &p1, 15, serde_json::Value::Null).unwrap(), &path).unwrap();
    let restored = load_checkpoint(&path).unwrap().into_params(&spec).unwrap();
    assert_eq!(restored, p1);
}
