use std::fs;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tta::rot90_planes;
use super::*;

fn small(count: usize, seed: u64) -> SynthConfig {
    SynthConfig { count, size: 32, seed, ..SynthConfig::default() }
}

fn centroid(mask: &BinaryMask) -> (f64, f64) {
    let (mut n, mut sy, mut sx) = (0.0, 0.0, 0.0);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) {
                n += 1.0;
                sy += y as f64;
                sx += x as f64;
            }
        }
    }
    (sy / n, sx / n)
}

/// Sample whose image channels all equal the mask.
fn mask_image_sample(mask: BinaryMask) -> Sample {
    let plane: Vec<f64> = mask.data().iter().map(|&v| f64::from(v)).collect();
    let (h, w) = (mask.height(), mask.width());
    let image = Tensor::from_fn(&[3, h, w], |i| plane[i % (h * w)]);
    Sample { id: "m".into(), image, mask: Some(mask), label: 0 }
}

fn off_centre_mask(size: usize) -> BinaryMask {
    BinaryMask::from_fn(size, size, |y, x| (4..12).contains(&y) && (3..16).contains(&x))
}

#[test]
fn unlabeled_fraction_arithmetic() {
    let cfg = SynthConfig { count: 100, size: 16, unlabeled_fraction: 0.4, ..SynthConfig::default() };
    let samples = synth_samples(&cfg, Execution::Sequential).unwrap();
    assert_eq!(samples.iter().filter(|s| s.mask.is_some()).count(), 60);
    assert_eq!(samples.iter().filter(|s| s.mask.is_none()).count(), 40);
}

#[test]
fn generator_rejects_bad_sizes() {
    assert!(synth_samples(&SynthConfig { size: 40, ..small(3, 0) }, Execution::Sequential).is_err());
    assert!(synth_samples(&SynthConfig { count: 0, ..small(3, 0) }, Execution::Sequential).is_err());
}

#[test]
fn generator_area_and_label_signal() {
    let cfg = SynthConfig { count: 400, size: 64, unlabeled_fraction: 0.0, seed: 3, ..SynthConfig::default() };
    let samples = synth_samples(&cfg, Execution::Parallel).unwrap();
    let mut correct = 0;
    for s in &samples {
        let m = s.mask.as_ref().unwrap();
        let f = m.foreground_fraction();
        assert!((0.02..=0.60).contains(&f), "{} covers {f}", s.id);
        let predicted = usize::from(eccentricity(m) > 1.5);
        correct += usize::from(predicted == s.label);
    }
    let acc = correct as f64 / samples.len() as f64;
    assert!(acc >= 0.95, "eccentricity accuracy {acc}");
    let ones = samples.iter().filter(|s| s.label == 1).count();
    assert!((120..=280).contains(&ones), "class balance {ones}");
}

#[test]
fn generator_is_deterministic_and_parallel_safe() {
    let a = synth_samples(&small(12, 7), Execution::Sequential).unwrap();
    let b = synth_samples(&small(12, 7), Execution::Parallel).unwrap();
    assert_eq!(a, b);
    let c = synth_samples(&small(12, 8), Execution::Sequential).unwrap();
    assert_ne!(a, c);
}

#[test]
fn synth_on_disk_is_byte_identical_and_round_trips() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let cfg = small(10, 7);
    let m1 = synth_generate(&cfg, d1.path(), Execution::Sequential).unwrap();
    synth_generate(&cfg, d2.path(), Execution::Parallel).unwrap();
    for e in &m1.entries {
        let name = e.image.file_name().unwrap();
        assert_eq!(fs::read(&e.image).unwrap(), fs::read(d2.path().join("images").join(name)).unwrap());
    }
    assert_eq!(fs::read(d1.path().join("labels.csv")).unwrap(), fs::read(d2.path().join("labels.csv")).unwrap());
    assert_eq!(fs::read(d1.path().join("meta.json")).unwrap(), fs::read(d2.path().join("meta.json")).unwrap());

    let loaded = m1.load_samples(Execution::Parallel).unwrap();
    let direct = synth_samples(&cfg, Execution::Sequential).unwrap();
    assert_eq!(loaded, direct);
    assert_eq!(m1.num_with_masks(), 6);
    assert_eq!(m1.split, Split::Train);
}

fn write_png_dataset(root: &std::path::Path, with_masks: &[bool]) {
    let samples: Vec<Sample> = with_masks
        .iter()
        .enumerate()
        .map(|(i, &m)| Sample {
            id: format!("img{i}"),
            image: Tensor::full(&[3, 8, 8], 0.5),
            mask: m.then(|| off_centre_mask(8)),
            label: i % 2,
        })
        .collect();
    write_dataset(root, &samples).unwrap();
}

#[test]
fn load_counts_roles() {
    let d = tempfile::tempdir().unwrap();
    write_png_dataset(d.path(), &[true, false, true]);
    let m = load_dataset(d.path()).unwrap();
    assert_eq!(m.len(), 3);
    assert_eq!(m.num_with_masks(), 2);
    assert_eq!(m.num_classes(), 2);
    let samples = m.load_samples(Execution::Sequential).unwrap();
    assert_eq!(samples[0].mask.as_ref().unwrap(), &off_centre_mask(8));
    assert!(samples[1].mask.is_none());
}

#[test]
fn mask_threshold_is_binary() {
    let d = tempfile::tempdir().unwrap();
    let path = d.path().join("m.png");
    let raw = vec![0u8, 127, 128, 255];
    image::GrayImage::from_raw(2, 2, raw).unwrap().save(&path).unwrap();
    let m = read_mask(&path).unwrap();
    assert_eq!(m.data(), &[0, 0, 1, 1]);
}

#[test]
fn load_errors() {
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(empty.path()), Err(Error::EmptyDataset(_))));
    assert!(matches!(load_dataset(&empty.path().join("absent")), Err(Error::MissingPath(_))));

    let d = tempfile::tempdir().unwrap();
    write_png_dataset(d.path(), &[true, false]);
    fs::remove_file(d.path().join("labels.csv")).unwrap();
    assert!(matches!(load_dataset(d.path()), Err(Error::Format(_))));

    let d = tempfile::tempdir().unwrap();
    write_png_dataset(d.path(), &[true, false]);
    image::GrayImage::new(4, 4).save(d.path().join("masks").join("img0.png")).unwrap();
    assert!(matches!(load_dataset(d.path()), Err(Error::Format(_))));

    let d = tempfile::tempdir().unwrap();
    write_png_dataset(d.path(), &[true, false]);
    fs::write(d.path().join("labels.csv"), "id,label\nimg0,1\n").unwrap();
    assert!(matches!(load_dataset(d.path()), Err(Error::Format(_))));
}

#[test]
fn identity_augmentation() {
    let s = synth_samples(&small(1, 4), Execution::Sequential).unwrap().remove(0);
    assert_eq!(AugmentChoice::IDENTITY.apply(&s).unwrap(), s);
}

#[test]
fn double_flip_is_identity() {
    let s = mask_image_sample(off_centre_mask(20));
    let flip = AugmentChoice { flip_h: true, flip_v: true, crop_scale: 1.0 };
    assert_eq!(flip.apply(&flip.apply(&s).unwrap()).unwrap(), s);
    let h = AugmentChoice { flip_h: true, ..AugmentChoice::IDENTITY };
    let once = h.apply(&s).unwrap();
    assert_ne!(once, s);
    assert_eq!(h.apply(&once).unwrap(), s);
}

#[test]
fn image_and_mask_move_together() {
    let s = mask_image_sample(off_centre_mask(20));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..30 {
        let choice = AugmentChoice::sample(&mut rng);
        let out = choice.apply(&s).unwrap();
        let mask = out.mask.unwrap();
        let from_image = BinaryMask::from_probabilities(20, 20, &out.image.data()[..400], 0.5).unwrap();
        let (a, b) = (centroid(&mask), centroid(&from_image));
        assert!((a.0 - b.0).abs() < 0.75 && (a.1 - b.1).abs() < 0.75, "{choice:?}: {a:?} vs {b:?}");
    }
}

#[test]
fn crop_zooms_about_the_centre() {
    let s = mask_image_sample(off_centre_mask(20));
    let c = AugmentChoice { crop_scale: 0.8, ..AugmentChoice::IDENTITY };
    let out = c.apply(&s).unwrap();
    let m = out.mask.unwrap();
    // Cropping 16 of 20 pixels scales distances from the centre by 1.25; nearest
    // sampling may shift a boundary row by half a pixel.
    let (y, x) = centroid(&off_centre_mask(20));
    let (ny, nx) = centroid(&m);
    assert!((ny - (9.5 + (y - 9.5) * 1.25)).abs() <= 0.5, "{ny} {y}");
    assert!((nx - (9.5 + (x - 9.5) * 1.25)).abs() <= 0.5);
    assert_eq!(out.image.shape(), &[3, 20, 20]);
}

#[test]
fn sampler_balance_and_cycling() {
    let mut s = TwoStreamSampler::new(100, 50, 8, 3).unwrap();
    assert_eq!(s.batches_per_epoch(), 25);
    let mut seen_u = [0; 50];
    let mut seen_l = vec![0; 100];
    for _ in 0..25 {
        let b = s.next_batch();
        assert_eq!((b.labeled.len(), b.unlabeled.len()), (4, 4));
        b.labeled.iter().for_each(|&i| seen_l[i] += 1);
        b.unlabeled.iter().for_each(|&i| seen_u[i] += 1);
    }
    assert!(seen_l.iter().all(|&c| c == 1));
    assert!(seen_u.iter().all(|&c| c == 2));
}

#[test]
fn sampler_is_seeded() {
    let a: Vec<Batch> = TwoStreamSampler::new(30, 20, 8, 9).unwrap().take(20).collect();
    let b: Vec<Batch> = TwoStreamSampler::new(30, 20, 8, 9).unwrap().take(20).collect();
    let c: Vec<Batch> = TwoStreamSampler::new(30, 20, 8, 10).unwrap().take(20).collect();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn sampler_degenerate_streams() {
    let mut s = TwoStreamSampler::new(10, 0, 8, 0).unwrap();
    assert!(!s.is_two_stream());
    let b = s.next_batch();
    assert_eq!((b.labeled.len(), b.unlabeled.len()), (8, 0));
    let b = TwoStreamSampler::new(0, 5, 4, 0).unwrap().next_batch();
    assert_eq!((b.labeled.len(), b.unlabeled.len()), (0, 4));
    assert!(matches!(TwoStreamSampler::new(10, 10, 7, 0), Err(Error::Contract(_))));
    assert!(TwoStreamSampler::new(0, 0, 8, 0).is_err());
}

#[test]
fn tta_sizes_and_count() {
    assert_eq!(tta_sizes(64), [64, 80, 96]);
    assert_eq!(tta_sizes(224), [224, 256, 288]);
    let image = Tensor::from_fn(&[3, 32, 32], |i| (i % 7) as f64 / 7.0);
    let variants = tta_variants(&image).unwrap();
    assert_eq!(variants.len(), 36);
    let unique: std::collections::HashSet<_> = variants.iter().map(|v| v.1).collect();
    assert_eq!(unique.len(), 36);
    assert!(variants[0].1.is_identity());
    assert_eq!(variants[0].0, image);
    assert!(variants.iter().all(|(t, v)| t.shape() == [3, v.size, v.size]));
}

#[test]
fn tta_inverse_restores_same_size_predictions_exactly() {
    let image = Tensor::from_fn(&[2, 16, 16], |i| (i * 31 % 17) as f64);
    for v in TtaVariant::all(16).into_iter().filter(|v| v.size == 16) {
        assert_eq!(v.invert(&v.apply(&image).unwrap()).unwrap(), image, "{v:?}");
    }
}

#[test]
fn tta_inverse_of_rescaled_smooth_map() {
    let image = Tensor::from_fn(&[1, 32, 32], |i| ((i / 32) as f64 * 0.1).sin() * ((i % 32) as f64 * 0.07).cos());
    for v in TtaVariant::all(32) {
        let back = v.invert(&v.apply(&image).unwrap()).unwrap();
        let err = back.data().iter().zip(image.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 0.05, "{v:?}: {err}");
    }
}

#[test]
fn rot90_planes_matches_mask_rotation() {
    let m = BinaryMask::from_fn(5, 7, |y, x| (y * 7 + x) % 3 == 0);
    let t = m.to_tensor().reshape(&[1, 5, 7]).unwrap();
    let r = rot90_planes(&t);
    assert_eq!(r.shape(), &[1, 7, 5]);
    assert_eq!(r.data(), m.rot90().to_tensor().data());
}

proptest! {
    #[test]
    fn tta_mask_round_trip(bits in proptest::collection::vec(any::<bool>(), 256), idx in 0usize..12) {
        let m = BinaryMask::from_fn(16, 16, |y, x| bits[y * 16 + x]);
        let v = TtaVariant::all(16).into_iter().filter(|v| v.size == 16).nth(idx).unwrap();
        prop_assert_eq!(v.invert_mask(&v.apply_mask(&m)), m.clone());
        // Mask and image transforms agree.
        let t = m.to_tensor().reshape(&[1, 16, 16]).unwrap();
        let moved = v.apply(&t).unwrap();
        let expected = v.apply_mask(&m).to_tensor();
        prop_assert_eq!(moved.data(), expected.data());
    }
}
