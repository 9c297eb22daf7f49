use pointstack::backbone::BackboneConfig;
use pointstack::commands::{build_dataset, model_config, run_training, TrainOptions};
use pointstack::config::{Config, DataSettings};
use pointstack::data::ShapeKind;
use pointstack::model::PointStackModel;
use pointstack::training::TrainConfig;
use std::time::Instant;

fn run2(name: &str, points: usize, per_class: usize, noise: f64, lr: f64, epochs: usize, rotate_aug: bool) {
    run_inner(name, points, per_class, noise, lr, epochs, false, rotate_aug)
}

fn run(name: &str, points: usize, noise: f64, lr: f64, epochs: usize, translate: bool, rotate_aug: bool) {
    run_inner(name, points, 32, noise, lr, epochs, translate, rotate_aug)
}

fn run_inner(name: &str, points: usize, per_class: usize, noise: f64, lr: f64, epochs: usize, translate: bool, rotate_aug: bool) {
    let mut cfg = Config::desk_classification();
    cfg.model.backbone = BackboneConfig::desk_scale(points);
    cfg.data = DataSettings::Synthetic {
        classes: vec![
            ShapeKind::Sphere,
            ShapeKind::RippledSphere,
            ShapeKind::Cylinder,
            ShapeKind::RippledCylinder,
        ],
        train_per_class: per_class,
        test_per_class: 25,
        points,
        noise,
        rotate: true,
        scale_jitter: 0.1,
    };
    cfg.train = TrainConfig {
        epochs,
        batch_size: 16,
        lr_max: lr,
        lr_min: lr / 100.0,
        translate,
        translate_range: 0.1,
        rotate: rotate_aug,
        seed: 1,
        ..TrainConfig::default()
    };
    let ds = build_dataset(&cfg).unwrap();
    let mc = model_config(&cfg, &ds).unwrap();
    let model = PointStackModel::<f32>::new(mc, 1).unwrap();
    let t0 = Instant::now();
    let run = run_training(&model, &ds, &cfg.train, TrainOptions::default(), |_| {}).unwrap();
    println!(
        "{name}: train_oa={:.3} test_oa={:.3} ({} epochs, {:.1}s)",
        run.final_train_oa,
        run.final_test.overall_accuracy,
        run.epochs_run,
        t0.elapsed().as_secs_f64()
    );
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    match args.get(1).map(|s| s.as_str()) {
        Some("a") => run("64pt-lr02-noaug", 64, 0.01, 0.02, 60, false, false),
        Some("b") => run("64pt-lr02-rot", 64, 0.01, 0.02, 60, false, true),
        Some("c") => run("96pt-lr02-noaug", 96, 0.01, 0.02, 60, false, false),
        Some("d") => run("64pt-lr01-noaug-lownoise", 64, 0.005, 0.01, 60, false, false),
        Some("e") => run2("96pt-64pc-rot", 96, 64, 0.01, 0.02, 50, true),
        Some("f") => run2("64pt-64pc-rot", 64, 64, 0.01, 0.02, 50, true),
        Some("g") => run2("96pt-48pc-rot-e35", 96, 48, 0.01, 0.02, 35, true),
        Some("h") => run2("64pt-48pc-rot-e35", 64, 48, 0.01, 0.02, 35, true),
        _ => println!("pass a..h"),
    }
}
