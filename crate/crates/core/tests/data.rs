use std::path::Path;

use proptest::prelude::*;
use texvit_autodiff::{RngState, Tensor};
use texvit_core::data::corrupt::{gaussian_kernel_1d, high_frequency_energy};
use texvit_core::data::image_io::{decode_bytes, encode_png, encode_ppm, from_rgb_bytes};
use texvit_core::data::synth::{generate_image, laplacian_energy};
use texvit_core::data::*;
use texvit_core::Error;

fn noise_image(seed: u64, h: usize, w: usize) -> Tensor<f32> {
    RngState::new(seed).uniform_tensor(&[3, h, w], 0.0, 1.0)
}

proptest! {
    #[test]
    fn png_and_ppm_round_trip(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let bytes: Vec<u8> = (0..3 * w * h).map(|_| rng.below(256) as u8).collect();
        let img = from_rgb_bytes(w, h, &bytes);
        prop_assert_eq!(&decode_bytes(&encode_png(&img), Path::new("x.png")).unwrap(), &img);
        prop_assert_eq!(&decode_bytes(&encode_ppm(&img), Path::new("x.ppm")).unwrap(), &img);
    }

    #[test]
    fn mixed_labels_are_distributions(seed in any::<u64>(), alpha in 0.1f64..5.0, a in 0u8..2, b in 0u8..2) {
        let mut rng = RngState::new(seed);
        let s1 = Sample::hard(noise_image(seed, 4, 4), a);
        let s2 = Sample::hard(noise_image(seed ^ 1, 4, 4), b);
        for (s, _) in [mixup(&s1, &s2, alpha, &mut rng).unwrap(), cutmix(&s1, &s2, alpha, &mut rng).unwrap()] {
            prop_assert!(s.label.iter().all(|&p| p >= 0.0));
            prop_assert!((s.label[0] + s.label[1] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn compress_is_idempotent_and_tight_at_factor_one(
        seed in any::<u64>(),
        h in 1usize..20,
        w in 1usize..20,
        binary in any::<bool>(),
        factor in 1.0f64..12.0,
    ) {
        let mut img = noise_image(seed, h, w);
        if binary {
            img = img.map(|v| if v < 0.5 { 0.0 } else { 1.0 });
        }
        prop_assert!(compress(&img, 1.0).max_abs_diff(&img) <= 2.0 / 255.0);
        let once = compress(&img, factor);
        prop_assert!(once.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(compress(&once, factor).max_abs_diff(&once) <= 1.0 / 255.0);
    }

    #[test]
    fn blur_commutes_with_offsets(seed in any::<u64>(), c in -0.5f32..0.5) {
        let img = noise_image(seed, 6, 7);
        let a = gaussian_blur(&img.map(|v| v + c), 7, 25.0);
        let b = gaussian_blur(&img, 7, 25.0).map(|v| v + c);
        prop_assert!(a.max_abs_diff(&b) <= 1e-6);
    }
}

#[test]
fn manifest_write_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("imgs")).unwrap();
    let mut entries = Vec::new();
    for i in 0..5u8 {
        let rel = format!("imgs/{i}.png");
        std::fs::write(dir.path().join(&rel), encode_png(&noise_image(i as u64, 4, 4))).unwrap();
        entries.push(ManifestEntry { path: rel, label: (i * 3) % 2 });
    }
    let m = DatasetManifest::new(dir.path(), Some(Split::Test), entries);
    let path = dir.path().join("test.csv");
    m.write(&path).unwrap();
    let back = load_manifest(&path).unwrap();
    assert_eq!(back, m);
    let (batch, labels) = back.load_batch().unwrap();
    assert_eq!(batch.shape(), &[5, 3, 4, 4]);
    assert_eq!(labels, vec![0, 1, 0, 1, 0]);
}

#[test]
fn manifest_with_unreadable_image_names_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("ok.png"), encode_png(&noise_image(0, 2, 2))).unwrap();
    std::fs::write(dir.path().join("bad.png"), b"not an image").unwrap();
    let path = dir.path().join("m.csv");
    std::fs::write(&path, "ok.png,0\nbad.png,1\n").unwrap();
    match load_manifest(&path) {
        Err(Error::Manifest { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
    assert!(matches!(load_manifest(&dir.path().join("missing.csv")), Err(Error::Io { .. })));
}

#[test]
fn synth_ten_images() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_texture_dataset(10, 16, 1.5, 7, dir.path()).unwrap();
    let files = std::fs::read_dir(dir.path().join("images")).unwrap().count();
    assert_eq!(files, 10);
    assert_eq!((corpus.train.len(), corpus.val.len(), corpus.test.len()), (7, 1, 2));
    let all: Vec<_> = [&corpus.train, &corpus.val, &corpus.test].iter().flat_map(|m| m.entries.clone()).collect();
    assert_eq!(all.iter().filter(|e| e.label == 1).count(), 5);
    for p in &corpus.manifest_paths {
        assert!(load_manifest(p).is_ok());
    }
    let again = tempfile::tempdir().unwrap();
    synth_texture_dataset(10, 16, 1.5, 7, again.path()).unwrap();
    for name in ["train.csv", "images/img_00003.png"] {
        assert_eq!(std::fs::read(dir.path().join(name)).unwrap(), std::fs::read(again.path().join(name)).unwrap());
    }
}

#[test]
fn smoothed_class_has_less_laplacian_energy() {
    for sigma in [1.0, 2.0] {
        let mut energy = [0.0; 2];
        for i in 0..1000u64 {
            let label = (i % 2) as u8;
            let img = generate_image(32, label, sigma, &mut RngState::derive_indexed(3, "energy", i));
            let stored = from_rgb_bytes(32, 32, &texvit_core::data::image_io::to_rgb_bytes(&img));
            energy[label as usize] += laplacian_energy(&stored);
        }
        assert!(energy[1] < energy[0], "sigma {sigma}: {energy:?}");
    }
}

#[test]
fn mixup_endpoints_and_midpoint() {
    let s1 = Sample::hard(noise_image(1, 4, 4), 0);
    let s2 = Sample::hard(noise_image(2, 4, 4), 1);
    assert_eq!(mixup_with_lambda(&s1, &s2, 1.0).unwrap(), s1);
    let mid = mixup_with_lambda(&s1, &s2, 0.5).unwrap();
    assert_eq!(mid.label, [0.5, 0.5]);
    for ((m, a), b) in mid.image.data().iter().zip(s1.image.data()).zip(s2.image.data()) {
        assert!((m - (a + b) / 2.0).abs() < 1e-7);
    }
    let other = Sample::hard(noise_image(3, 5, 4), 1);
    assert!(mixup_with_lambda(&s1, &other, 0.5).is_err());
    assert!(cutmix(&s1, &other, 1.0, &mut RngState::new(0)).is_err());
}

#[test]
fn mixup_lambda_mean_is_one_half() {
    let s = Sample::hard(Tensor::zeros([3, 1, 1]), 0);
    for alpha in [0.2, 1.0, 4.0] {
        let mut rng = RngState::new(17);
        let mean = (0..100_000).map(|_| mixup(&s, &s, alpha, &mut rng).unwrap().1).sum::<f64>() / 1e5;
        assert!((mean - 0.5).abs() <= 0.01, "alpha {alpha}: {mean}");
    }
}

#[test]
fn cutmix_boxes() {
    let s1 = Sample::hard(Tensor::zeros([3, 6, 5]), 0);
    let s2 = Sample::hard(Tensor::ones([3, 6, 5]), 1);
    let (same, l) = cutmix_with_box(&s1, &s2, Rect { y: 2, x: 2, h: 0, w: 3 }).unwrap();
    assert_eq!((same, l), (s1.clone(), 1.0));
    let (full, l) = cutmix_with_box(&s1, &s2, Rect { y: 0, x: 0, h: 6, w: 5 }).unwrap();
    assert_eq!(full.image, s2.image);
    assert_eq!((full.label, l), (s2.label, 0.0));

    let mut rng = RngState::new(4);
    for _ in 0..200 {
        let (s, lambda) = cutmix(&s1, &s2, 1.0, &mut rng).unwrap();
        let pasted = s.image.data().iter().filter(|&&v| v == 1.0).count();
        assert_eq!(pasted % 3, 0);
        let area = pasted / 3;
        assert_eq!(lambda, 1.0 - area as f64 / 30.0);
        assert!((s.label[1] as f64 - (1.0 - lambda)).abs() < 1e-6);
    }
}

#[test]
fn rand_augment_identity_seeding_and_range() {
    let img = noise_image(5, 8, 8);
    assert_eq!(rand_augment(&img, 0, 9.0, &mut RngState::new(1)), img);
    assert_eq!(rand_augment(&img, 2, 5.0, &mut RngState::new(3)), rand_augment(&img, 2, 5.0, &mut RngState::new(3)));
    let mut rng = RngState::new(8);
    for i in 0..1000 {
        let n = rng.below(4);
        let m = rng.uniform_range(0.0, 10.0);
        let out = rand_augment(&noise_image(i, 6, 6), n, m, &mut rng);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let names: Vec<_> = rand_augment_ops().iter().map(|o| o.name()).collect();
    assert_eq!(names, ["hflip", "rotate", "translate", "brightness", "contrast", "posterize"]);
}

#[test]
fn random_erase_rectangles() {
    let img = noise_image(6, 16, 12);
    let (same, rect) = random_erase(&img, 0.0, [0.02, 0.25], &mut RngState::new(0));
    assert_eq!((same, rect), (img.clone(), None));

    let mut rng = RngState::new(9);
    for _ in 0..1000 {
        let (out, rect) = random_erase(&img, 1.0, [0.02, 0.25], &mut rng);
        let r = rect.expect("p = 1 always erases");
        let frac = r.area() as f64 / (16 * 12) as f64;
        assert!((0.02..=0.25).contains(&frac), "{frac}");
        let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..12 {
                    let i = (c * 16 + y) * 12 + x;
                    if out.data()[i] != img.data()[i] {
                        assert!(r.contains(y, x));
                        (y0, y1, x0, x1) = (y0.min(y), y1.max(y + 1), x0.min(x), x1.max(x + 1));
                    }
                }
            }
        }
        assert_eq!(Rect { y: y0, x: x0, h: y1 - y0, w: x1 - x0 }, r);
    }
}

#[test]
fn blur_kernel_and_impulse_response() {
    let k = gaussian_kernel_1d(7, 25.0);
    assert!((k.iter().sum::<f64>() - 1.0).abs() <= 1e-9);

    let constant = Tensor::full([3, 9, 9], 0.37f32);
    assert!(gaussian_blur(&constant, 7, 25.0).max_abs_diff(&constant) <= 1e-6);

    let mut imp = Tensor::<f32>::zeros([3, 15, 15]);
    imp.set(&[1, 7, 7], 1.0);
    let out = gaussian_blur(&imp, 7, 25.0);
    let raw: Vec<f64> = (-3i32..=3)
        .flat_map(|dy| (-3i32..=3).map(move |dx| (-((dy * dy + dx * dx) as f64) / 1250.0).exp()))
        .collect();
    let z: f64 = raw.iter().sum();
    for dy in -3i32..=3 {
        for dx in -3i32..=3 {
            let got = out.get(&[1, (7 + dy) as usize, (7 + dx) as usize]) as f64;
            let want = raw[((dy + 3) * 7 + dx + 3) as usize] / z;
            assert!((got - want).abs() < 1e-7);
            assert!((0.0202..=0.0206).contains(&got), "{got}");
        }
    }
    assert_eq!(out.get(&[1, 7, 11]), 0.0);
}

#[test]
fn noise_statistics() {
    let img = noise_image(10, 128, 128);
    assert_eq!(add_noise(&img, 0.0, 0.0, &mut RngState::new(1), false), img);
    let a = add_noise(&img, 0.0, 0.2, &mut RngState::new(2), false);
    assert_eq!(a, add_noise(&img, 0.0, 0.2, &mut RngState::new(2), false));
    let d: Vec<f64> = a.data().iter().zip(img.data()).map(|(o, i)| (o - i) as f64).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean.abs() <= 0.01, "{mean}");
    assert!((std - 0.2).abs() <= 0.01, "{std}");
    let clamped = add_noise(&img, 0.0, 0.2, &mut RngState::new(2), true);
    assert!(clamped.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn compression_bounds() {
    let constant = Tensor::full([3, 16, 16], 0.61f32);
    assert!(compress(&constant, 3.0).max_abs_diff(&constant) <= 1.0 / 255.0);
    // Mid-grey noise. Full-range uniform noise has AC coefficients near half
    // the coarse steps, and round-to-nearest then adds energy instead.
    for seed in 0..20 {
        let img = RngState::new(seed).gaussian_tensor::<f32>(&[3, 32, 32], 0.5, 0.1).map(|v| v.clamp(0.0, 1.0));
        assert!(high_frequency_energy(&compress(&img, 3.0)) < high_frequency_energy(&img));
    }
}

#[test]
fn corruption_registry_and_validation() {
    let kinds: Vec<_> = corruptions().iter().map(|c| c.kind()).collect();
    assert_eq!(kinds, CorruptionKind::ALL);
    for k in CorruptionKind::ALL {
        assert_eq!(k.name().parse::<CorruptionKind>().unwrap(), k);
    }
    assert!("jpeg".parse::<CorruptionKind>().is_err());
    let img = noise_image(1, 8, 8);
    assert_eq!(CorruptionSpec::of(CorruptionKind::None).apply(&img, &mut RngState::new(0)), img);
    for bad in [
        CorruptionSpec { blur_kernel: 6, ..Default::default() },
        CorruptionSpec { blur_sigma: 0.0, ..Default::default() },
        CorruptionSpec { noise_std: -0.1, ..Default::default() },
        CorruptionSpec { compress_factor: 0.5, ..Default::default() },
    ] {
        assert!(bad.validate().is_err());
    }
    let parsed: CorruptionSpec = toml::from_str("kind = \"blur\"\nblur_sigma = 3.0\n").unwrap();
    assert_eq!(parsed.kind, CorruptionKind::Blur);
    assert!(toml::from_str::<CorruptionSpec>("sigma = 3.0\n").is_err());
}

#[test]
fn augment_batch_is_seeded() {
    let samples: Vec<Sample> = (0..6).map(|i| Sample::hard(noise_image(i, 8, 8), (i % 2) as u8)).collect();
    let cfg = AugmentConfig {
        rand_augment: true,
        mixup_alpha: 0.8,
        cutmix_alpha: 1.0,
        erase_prob: 0.25,
        ..Default::default()
    };
    let a = augment_batch(&samples, &cfg, 5).unwrap();
    assert_eq!(a, augment_batch(&samples, &cfg, 5).unwrap());
    assert_ne!(a, augment_batch(&samples, &cfg, 6).unwrap());
    assert_eq!(augment_batch(&samples, &AugmentConfig::default(), 5).unwrap(), samples);
    assert!(AugmentConfig { magnitude: 11.0, ..Default::default() }.validate().is_err());
}
