use sdbias_core::dataset::{generate_dataset, GenOptions, TaskMode, VideoDims};
use sdbias_core::nn::model::{ArchitectureDescriptor, Model};
use sdbias_core::nn::train::{evaluate_accuracy, train, TrainConfig, DropoutKind};
use sdbias_core::rng::StreamRng;

#[test]
fn timing_probe() {
    let t0 = std::time::Instant::now();
    let opts = GenOptions { dims: VideoDims { frames: 8, height: 16, width: 16 }, palettes: 4, with_flow: false };
    let train_ds = generate_dataset::<f32>(TaskMode::DynamicOnly, 192, opts, &StreamRng::new(1, "t"));
    let val_ds = generate_dataset::<f32>(TaskMode::DynamicOnly, 128, opts, &StreamRng::new(2, "v"));
    println!("gen: {:?}", t0.elapsed());

    let mut model: Model<f32> = Model::init(ArchitectureDescriptor::single(8), &StreamRng::new(3, "m"));
    let config = TrainConfig {
        epochs: 15, lr: 0.05, momentum: 0.9, batch_size: 32,
        checkpoint_every: 0, dropout: DropoutKind::None, shuffle_frames: false,
    };
    let t1 = std::time::Instant::now();
    let run = train(&mut model, &train_ds, &config, &StreamRng::new(4, "tr")).unwrap();
    println!("train 15 epochs: {:?}  losses: {:.3} -> {:.3}", t1.elapsed(), run.epoch_losses[0], run.epoch_losses.last().unwrap());
    let t2 = std::time::Instant::now();
    let train_acc = evaluate_accuracy(&model, &train_ds).unwrap();
    let val_acc = evaluate_accuracy(&model, &val_ds).unwrap();
    println!("eval: {:?}  train acc {train_acc:.3} val acc {val_acc:.3}", t2.elapsed());
}
