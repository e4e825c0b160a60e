use tleg_core::harness::data::synthetic_dataset;
use tleg_core::training::{accuracy, finetune, TrainConfig};
use tleg_core::vit::{ModelConfig, Vit};

#[test]
fn two_layer_model_learns_synthetic_data() {
    let data = synthetic_dataset(0, 1000, 10, 16).unwrap();
    let test = synthetic_dataset(77, 1000, 10, 16).unwrap();
    let cfg = ModelConfig::new(32, 2, 2, 64).with_image(16, 4, 3).with_classes(10);
    let mut vit = Vit::<f32>::init(cfg, 1).unwrap();
    let before = accuracy(&vit, &data, 250).unwrap().top1;
    let tc = TrainConfig { epochs: 10, batch_size: 32, lr: 2e-3, ..Default::default() };
    let report = finetune(&mut vit, &data, Some(&data), &tc).unwrap();
    let after = report.epochs.last().unwrap().eval.unwrap().top1;
    eprintln!("train top1 {before:.3} -> {after:.3}, held out {:.3}", accuracy(&vit, &test, 250).unwrap().top1);
    for e in &report.epochs {
        eprintln!("epoch {} loss {:.4} top1 {:.3}", e.epoch, e.train_loss, e.eval.unwrap().top1);
    }
    assert!(after > 0.6, "train accuracy {after}");
    assert!(after > before);
}
