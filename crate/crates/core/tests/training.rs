use std::path::Path;

use pbmr::ingest::{generate_synthetic, Dataset, SynthSpec};
use pbmr::model::{load_checkpoint, ArchConfig, ArchKind, RegressionNet};
use pbmr::optim::{OptimizerConfig, OptimizerKind};
use pbmr::tensor::Tensor;
use pbmr::trainer::{input_signature, predict, train, write_run, LossKind, TrainConfig, REPORT_FILE};
use pbmr::Error;

fn small_data(samples: usize, noise: f64, seed: u64) -> Dataset {
    let spec = SynthSpec {
        sensors: 4,
        time_steps: 16,
        samples,
        missing_rate: 0.0,
        noise,
    };
    generate_synthetic(&spec, seed).unwrap().dataset
}

fn quick_config(epochs: usize, folds: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        folds,
        batch_size: 16,
        seed: 3,
        optimizer: OptimizerConfig {
            lr: 1e-3,
            ..OptimizerConfig::new(OptimizerKind::Sgd)
        },
        ..TrainConfig::default()
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

fn bits(net: &RegressionNet<f32>) -> Vec<u32> {
    net.params()
        .iter()
        .flat_map(|p| p.tensor.data().iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn record_count_is_epochs_times_folds() {
    let data = small_data(30, 0.05, 1);
    let out = train(&data, &quick_config(4, 3), 1).unwrap();
    assert_eq!(out.report.records.len(), 12);
    assert_eq!(out.nets.len(), 3);
    for fold in 0..3 {
        let epochs: Vec<usize> = out.report.records.iter().filter(|r| r.fold == fold).map(|r| r.epoch).collect();
        assert_eq!(epochs, vec![0, 1, 2, 3]);
    }
}

#[test]
fn runs_are_byte_identical() {
    let data = small_data(40, 0.05, 2);
    let config = quick_config(3, 2);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        let out = train(&data, &config, 1).unwrap();
        write_run(dir.path(), &data, &config, 1, &out).unwrap();
    }
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert_eq!(fa.iter().map(|f| &f.0).collect::<Vec<_>>(), fb.iter().map(|f| &f.0).collect::<Vec<_>>());
    for (x, y) in fa.iter().zip(&fb) {
        assert!(x.1 == y.1, "{} differs", x.0);
    }
}

#[test]
fn parallel_folds_do_not_change_results() {
    let data = small_data(36, 0.05, 3);
    let config = quick_config(3, 3);
    let serial = train(&data, &config, 1).unwrap();
    let parallel = train(&data, &config, 3).unwrap();
    assert_eq!(serial.report, parallel.report);
    for (a, b) in serial.nets.iter().zip(&parallel.nets) {
        assert_eq!(bits(a), bits(b));
    }
}

#[test]
fn two_folds_over_four_samples() {
    let data = small_data(4, 0.0, 4);
    let out = train(&data, &TrainConfig { batch_size: 2, ..quick_config(2, 2) }, 1).unwrap();
    let mut seen = [0; 4];
    for fold in 0..2 {
        let (train_idx, val) = out.plan.split(fold);
        assert!(train_idx.iter().all(|i| !val.contains(i)));
        val.iter().for_each(|&i| seen[i] += 1);
    }
    assert_eq!(seen, [1; 4]);
}

#[test]
fn write_run_emits_every_artifact() {
    let data = small_data(24, 0.05, 5);
    let config = quick_config(2, 3);
    let out = train(&data, &config, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_run(dir.path(), &data, &config, 1, &out).unwrap();
    let names: Vec<String> = files(dir.path()).into_iter().map(|f| f.0).collect();
    for want in [REPORT_FILE, "metrics.csv", "mae.svg", "rmse.svg", "r2.svg"] {
        assert!(names.iter().any(|n| n == want), "missing {want}");
    }
    for i in 0..3 {
        assert!(names.contains(&format!("fold_{i}.ckpt.json")));
        assert!(names.contains(&format!("fold_{i}.ckpt.bin")));
    }
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6);

    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join(REPORT_FILE)).unwrap()).unwrap();
    assert_eq!(report["config"]["optimizer"]["lr"], 1e-3);
    assert_eq!(report["records"].as_array().unwrap().len(), 6);
    assert!(report["summary"]["mae"].as_f64().unwrap() > 0.0);
}

#[test]
fn checkpoint_reproduces_forward_and_predictions() {
    let data = small_data(24, 0.05, 6);
    let config = quick_config(2, 2);
    let out = train(&data, &config, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_run(dir.path(), &data, &config, 1, &out).unwrap();
    let (loaded, sig) = load_checkpoint(&dir.path().join("fold_1")).unwrap();
    assert_eq!(bits(&loaded), bits(&out.nets[1]));
    assert_eq!(sig.as_ref(), Some(&input_signature(&data.manifest, 1)));

    let batch = Tensor::new(vec![2, 1, 4, 16], (0..128).map(|i| (i as f32 * 0.37).sin().abs()).collect()).unwrap();
    let a = out.nets[1].forward(&batch).unwrap();
    let b = loaded.forward(&batch).unwrap();
    assert_eq!(a.data(), b.data());

    let p1 = predict(&out.nets[1], &data.frames, &data.manifest, sig.as_ref()).unwrap();
    let p2 = predict(&loaded, &data.frames, &data.manifest, sig.as_ref()).unwrap();
    assert_eq!(p1, p2);
}

#[test]
fn duplicated_frame_gets_identical_prediction() {
    let data = small_data(12, 0.05, 7);
    let net = RegressionNet::<f32>::build(ArchConfig::preset(ArchKind::Tiny, 1), 1).unwrap();
    let mut twin = data.frames[3].clone();
    twin.sample_id = "copy".into();
    let frames = vec![data.frames[3].clone(), data.frames[5].clone(), twin];
    let p = predict(&net, &frames, &data.manifest, None).unwrap();
    assert_eq!(p[0].1.to_bits(), p[2].1.to_bits());
    assert_eq!(p[2].0, "copy");
}

#[test]
fn sensor_mismatch_with_checkpoint_is_rejected() {
    let trained_on = small_data(8, 0.0, 8);
    let sig = input_signature(&trained_on.manifest, 1);
    let other = generate_synthetic(
        &SynthSpec {
            sensors: 3,
            time_steps: 16,
            samples: 4,
            ..SynthSpec::default()
        },
        1,
    )
    .unwrap()
    .dataset;
    let net = RegressionNet::<f32>::build(ArchConfig::preset(ArchKind::Tiny, 1), 1).unwrap();
    let err = predict(&net, &other.frames, &other.manifest, Some(&sig)).unwrap_err();
    assert!(matches!(err, Error::Shape(_)), "{err}");
}

#[test]
fn constant_target_loss_settles() {
    let mut data = small_data(32, 0.05, 9);
    data.frames.iter_mut().for_each(|f| f.target = Some(40.0));
    let config = TrainConfig {
        loss: LossKind::Mse,
        baselines: false,
        ..quick_config(60, 2)
    };
    let out = train(&data, &config, 1).unwrap();
    for fold in 0..2 {
        let loss: Vec<f64> = out.report.records.iter().filter(|r| r.fold == fold).map(|r| r.train_loss).collect();
        // transient increases of at most 5% are tolerated
        for (e, w) in loss.windows(2).enumerate().skip(10) {
            assert!(w[1] <= 1.05 * w[0], "fold {fold} epoch {}: {} -> {}", e + 1, w[0], w[1]);
        }
        assert!(loss.last().unwrap() < &loss[10]);
        assert!(out.report.records.iter().all(|r| r.val_r2.is_none()));
    }
}

#[test]
fn fits_noise_free_training_samples() {
    // long enough rows that every bump spans several cells
    let data = generate_synthetic(
        &SynthSpec {
            sensors: 4,
            time_steps: 64,
            samples: 800,
            missing_rate: 0.0,
            noise: 0.0,
        },
        10,
    )
    .unwrap()
    .dataset;
    let config = TrainConfig {
        batch_size: 16,
        baselines: false,
        optimizer: OptimizerConfig {
            lr: 3e-3,
            ..OptimizerConfig::new(OptimizerKind::Adam)
        },
        ..quick_config(100, 2)
    };
    let out = train(&data, &config, 1).unwrap();
    let (train_idx, _) = out.plan.split(0);
    let frames: Vec<_> = train_idx.iter().map(|&i| data.frames[i].clone()).collect();
    let pred = predict(&out.nets[0], &frames, &data.manifest, None).unwrap();
    let targets: Vec<f64> = frames.iter().map(|f| f.target.unwrap()).collect();
    for ((id, p), t) in pred.iter().zip(&targets) {
        assert!((p - t).abs() <= 0.05 * t.abs(), "{id}: predicted {p}, target {t}");
    }
    // and better than the constant it started from
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let fit_mae = pred.iter().zip(&targets).map(|((_, p), t)| (p - t).abs()).sum::<f64>();
    let const_mae = targets.iter().map(|t| (t - mean).abs()).sum::<f64>();
    assert!(fit_mae < 0.5 * const_mae, "fit {fit_mae} vs constant {const_mae}");
}

#[test]
fn tiny_accepts_documented_shapes() {
    let net = RegressionNet::<f32>::build(ArchConfig::preset(ArchKind::Tiny, 1), 0).unwrap();
    for shape in [[1, 1, 7, 214], [1, 1, 12, 214], [1, 1, 4, 4]] {
        let n = shape.iter().product();
        let y = net.forward(&Tensor::new(shape.to_vec(), vec![0.5; n]).unwrap()).unwrap();
        assert_eq!(y.shape(), &[1, 1]);
    }
    assert!(net.forward(&Tensor::new(vec![1, 1, 3, 214], vec![0.5; 642]).unwrap()).is_err());
    assert!(net.forward(&Tensor::new(vec![1, 2, 7, 214], vec![0.5; 2996]).unwrap()).is_err());
}

#[test]
fn missing_targets_are_a_config_error() {
    let mut data = small_data(10, 0.0, 11);
    data.frames[2].target = None;
    assert!(matches!(train(&data, &quick_config(1, 2), 1), Err(Error::Config(_))));
}
