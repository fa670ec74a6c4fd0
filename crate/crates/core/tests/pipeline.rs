use mtt_core::data::{load_dataset, synth_samples, write_dataset, Sample, SynthConfig};
use mtt_core::engine::{evaluate, load_checkpoint, save_checkpoint, TrainConfig, Trainer};
use mtt_core::exec::Execution;
use mtt_core::model::ModelConfig;

fn tiny_config(iters: usize) -> TrainConfig {
    let model = ModelConfig {
        input_size: 32,
        stem_channels: [4, 4, 8, 8],
        embed_dim: 16,
        heads: 2,
        layers: 1,
        decode_channels: [8, 8, 4, 4],
        ..ModelConfig::default()
    };
    TrainConfig { total_iters: iters, seed: 7, model, ..TrainConfig::desk() }
}

fn samples(count: usize) -> Vec<Sample> {
    synth_samples(&SynthConfig { count, size: 32, seed: 3, ..Default::default() }, Execution::Sequential).unwrap()
}

#[test]
fn dataset_survives_disk_round_trip() {
    let original = samples(6);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &original).unwrap();
    let manifest = load_dataset(dir.path()).unwrap();
    assert_eq!(manifest.len(), original.len());
    let loaded = manifest.load_samples(Execution::Parallel).unwrap();
    for (a, b) in original.iter().zip(&loaded) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.label, b.label);
        assert_eq!(a.mask, b.mask);
        let worst = a.image.data().iter().zip(b.image.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst <= 0.5 / 255.0 + 1e-12, "pixel drift {worst}");
    }
}

#[test]
fn sequential_and_parallel_training_agree_bitwise() {
    let data = samples(12);
    let run = |exec| {
        let mut trainer = Trainer::new(tiny_config(3), &data, exec).unwrap();
        let mut rows = Vec::new();
        trainer.run(|row, _| {
            rows.push(row.clone());
            Ok(())
        })
        .unwrap();
        let weights: Vec<f64> = trainer.model().params().iter().flat_map(|(_, p)| p.value.data().to_vec()).collect();
        (rows, weights)
    };
    let (seq_rows, seq_weights) = run(Execution::Sequential);
    let (par_rows, par_weights) = run(Execution::Parallel);
    assert_eq!(seq_rows.len(), 3);
    assert_eq!(seq_rows, par_rows);
    assert!(seq_weights.iter().zip(&par_weights).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn checkpoint_preserves_evaluation() {
    let data = samples(8);
    let mut trainer = Trainer::new(tiny_config(2), &data, Execution::Parallel).unwrap();
    trainer.run(|_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.mttu");
    save_checkpoint(&path, trainer.model(), Some(trainer.optimizer()), 7, trainer.step_index()).unwrap();
    let restored = load_checkpoint(&path).unwrap();
    assert_eq!(restored.step, 2);
    assert!(restored.optimizer.is_some());
    let before = evaluate(trainer.model(), &data, false, Execution::Parallel).unwrap();
    let after = evaluate(&restored.model, &data, false, Execution::Parallel).unwrap();
    assert_eq!(before.images, after.images);
    let (a, b) = (before.segmentation.unwrap(), after.segmentation.unwrap());
    assert!((a.ja - b.ja).abs() < 1e-3, "{} vs {}", a.ja, b.ja);
    assert_eq!(before.accuracy, after.accuracy);
}
