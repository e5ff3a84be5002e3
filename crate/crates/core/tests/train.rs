use proptest::prelude::*;
use texvit_autodiff::{ParamStore, RngState, Tape, Tensor};
use texvit_core::data::synth::generate_image;
use texvit_core::data::{CorruptionKind, CorruptionSpec, DatasetManifest, ManifestEntry, Sample};
use texvit_core::metrics::compute_metrics;
use texvit_core::train::*;
use texvit_core::{preset, Error, TexViTConfig};

struct Quiet;
impl TrainHooks for Quiet {}

/// Replaces the computed validation accuracy with fixed values.
struct Injected(Vec<f64>);
impl TrainHooks for Injected {
    fn validation_score(&mut self, epoch: usize, _computed: f64) -> f64 {
        self.0[epoch - 1]
    }
}

fn micro() -> TexViTConfig {
    preset("micro").unwrap()
}

fn corpus(seed: u64, tag: &str, n: usize, size: usize, sigma: f64) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let mut rng = RngState::derive_indexed(seed, tag, i as u64);
            Sample::hard(generate_image(size, label, sigma, &mut rng), label)
        })
        .collect()
}

fn scalar_store(v: f64) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    p.insert_param("theta", Tensor::from_f64([1], &[v]).unwrap());
    p
}

fn set_grad(p: &mut ParamStore<f64>, g: f64) {
    p.get_mut("theta").unwrap().grad = Tensor::from_f64([1], &[g]).unwrap();
}

#[test]
fn adam_matches_reference_trace() {
    let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
    let mut params = scalar_store(1.0);
    let mut state = AdamState::new(&params);
    let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for t in 1..=100 {
        let g = 2.0 * theta;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powi(t));
        let vhat = v / (1.0 - b2.powi(t));
        theta -= lr * mhat / (vhat.sqrt() + eps);

        let current = params.value("theta").unwrap().item();
        set_grad(&mut params, 2.0 * current);
        state.step(&mut params, lr, &AdamConfig::default()).unwrap();
        let got = params.value("theta").unwrap().item();
        assert!((got - theta).abs() <= 1e-6, "step {t}: {got} vs {theta}");
    }
    assert_eq!(state.t, 100);
}

#[test]
fn adam_zero_gradient_and_first_step() {
    let mut params = scalar_store(0.3);
    let mut state = AdamState::new(&params);
    set_grad(&mut params, 0.0);
    state.step(&mut params, 0.01, &AdamConfig::default()).unwrap();
    assert_eq!(params.value("theta").unwrap().item(), 0.3);
    assert_eq!(state.t, 1);

    for g in [-3.0, 1e-3, 250.0] {
        let mut params = scalar_store(0.0);
        let mut state = AdamState::new(&params);
        set_grad(&mut params, g);
        state.step(&mut params, 0.01, &AdamConfig::default()).unwrap();
        let moved = params.value("theta").unwrap().item().abs();
        assert!((moved - 0.01 * g.abs() / (g.abs() + 1e-8)).abs() < 1e-12);
    }
}

#[test]
fn adam_rejects_mismatched_state() {
    let mut params = scalar_store(1.0);
    let mut other = ParamStore::<f64>::new();
    other.insert_param("theta", Tensor::<f64>::zeros([2]));
    let mut state = AdamState::new(&other);
    assert!(state.step(&mut params, 0.01, &AdamConfig::default()).is_err());
}

proptest! {
    #[test]
    fn adam_with_zero_lr_is_identity(values in prop::collection::vec(-5.0f64..5.0, 1..6), seed in any::<u64>()) {
        let mut params = ParamStore::<f64>::new();
        params.insert_param("w", Tensor::from_f64([values.len()], &values).unwrap());
        let before = params.clone();
        let mut state = AdamState::new(&params);
        let mut rng = RngState::new(seed);
        for _ in 0..3 {
            params.get_mut("w").unwrap().grad = rng.gaussian_tensor(&[values.len()], 0.0, 10.0);
            state.step(&mut params, 0.0, &AdamConfig::default()).unwrap();
        }
        prop_assert_eq!(params.value("w"), before.value("w"));
    }

    #[test]
    fn cross_entropy_is_linear_in_target(a in -8.0f64..8.0, b in -8.0f64..8.0, lambda in 0.0f64..1.0) {
        let ce = |t: [f64; 2]| {
            let mut tape = Tape::<f64>::new();
            let x = tape.input(Tensor::from_f64([1, 2], &[a, b]).unwrap());
            let l = tape.cross_entropy(x, Tensor::from_f64([1, 2], &t).unwrap()).unwrap();
            tape.value(l).item()
        };
        let mixed = ce([lambda, 1.0 - lambda]);
        prop_assert!((mixed - (lambda * ce([1.0, 0.0]) + (1.0 - lambda) * ce([0.0, 1.0]))).abs() <= 1e-12);
    }
}

#[test]
fn cross_entropy_examples() {
    let ce = |logits: [f64; 2], t: [f64; 2]| {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::from_f64([1, 2], &logits).unwrap());
        let l = tape.cross_entropy(x, Tensor::from_f64([1, 2], &t).unwrap()).unwrap();
        tape.value(l).item()
    };
    assert!(ce([20.0, -20.0], [1.0, 0.0]).abs() <= 1e-6);
    for t in [[1.0, 0.0], [0.3, 0.7], [0.0, 1.0]] {
        assert!((ce([1.7, 1.7], t) - std::f64::consts::LN_2).abs() <= 1e-6);
    }
}

#[test]
fn one_epoch_smoke_writes_loadable_checkpoint() {
    let model = micro();
    let cfg = TrainConfig { epochs: 1, batch_size: 4, ..Default::default() };
    let out = train(&model, &cfg, &corpus(0, "train", 8, 16, 1.5), &corpus(0, "val", 4, 16, 1.5), &mut Quiet).unwrap();
    assert_eq!(out.history.len(), 1);
    assert_eq!(out.checkpoint.best_epoch, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("smoke.ckpt");
    out.checkpoint.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, out.checkpoint);
    assert_eq!(back.adam.as_ref().unwrap().t, 2);
}

#[test]
fn injected_validation_scores_pick_epoch_two() {
    let cfg = TrainConfig { epochs: 3, batch_size: 4, ..Default::default() };
    let mut hooks = Injected(vec![0.5, 0.9, 0.7]);
    let out =
        train(&micro(), &cfg, &corpus(1, "train", 8, 16, 1.5), &corpus(1, "val", 4, 16, 1.5), &mut hooks).unwrap();
    assert_eq!(out.checkpoint.best_epoch, 2);
    assert_eq!(out.checkpoint.best_val_accuracy, 0.9);
    // The saved weights are the epoch-2 weights, not the final ones.
    let rerun = TrainConfig { epochs: 2, ..cfg };
    let mut rising = Injected(vec![0.1, 0.2]);
    let two =
        train(&micro(), &rerun, &corpus(1, "train", 8, 16, 1.5), &corpus(1, "val", 4, 16, 1.5), &mut rising).unwrap();
    assert_eq!(two.checkpoint.best_epoch, 2);
    assert_eq!(two.checkpoint.params, out.checkpoint.params);
}

#[test]
fn training_loss_decreases_over_first_five_epochs() {
    // Micro model on the 16 px corpus, 8 batches per epoch.
    let model = micro();
    let mut decreasing = 0;
    for seed in 0..10u64 {
        let cfg = TrainConfig { epochs: 5, batch_size: 64, learning_rate: 0.001, seed, ..Default::default() };
        let out =
            train(&model, &cfg, &corpus(seed, "train", 512, 16, 1.5), &corpus(seed, "val", 32, 16, 1.5), &mut Quiet)
                .unwrap();
        let losses: Vec<f64> = out.history.iter().map(|r| r.train_loss).collect();
        let ok = losses.windows(2).all(|w| w[1] < w[0]);
        println!("seed {seed}: {losses:.4?} {}", if ok { "decreasing" } else { "not decreasing" });
        decreasing += usize::from(ok);
    }
    assert!(decreasing >= 9, "{decreasing}/10 seeds decreasing");
}

#[test]
fn non_finite_loss_aborts_with_location() {
    let mut train_set = corpus(2, "train", 8, 16, 1.5);
    train_set[5].image.data_mut()[0] = f32::NAN;
    let cfg = TrainConfig { epochs: 2, batch_size: 4, ..Default::default() };
    match train(&micro(), &cfg, &train_set, &corpus(2, "val", 4, 16, 1.5), &mut Quiet) {
        Err(Error::Divergence { epoch, batch, loss }) => {
            assert_eq!(epoch, 1);
            assert!(batch == 1 || batch == 2);
            assert!(!loss.is_finite());
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.history)),
    }
}

#[test]
fn training_input_validation() {
    let cfg = TrainConfig { epochs: 1, ..Default::default() };
    let set = corpus(3, "x", 4, 16, 1.5);
    assert!(matches!(train(&micro(), &cfg, &[], &set, &mut Quiet), Err(Error::Config(_))));
    let wrong = corpus(3, "x", 4, 8, 1.5);
    assert!(matches!(train(&micro(), &cfg, &wrong, &set, &mut Quiet), Err(Error::Config(_))));

    let dir = tempfile::tempdir().unwrap();
    let entries = vec![ManifestEntry { path: "a.png".into(), label: 0 }];
    let a = DatasetManifest::new(dir.path(), None, entries.clone());
    let b = DatasetManifest::new(dir.path(), None, entries);
    assert!(matches!(train_manifests(&micro(), &cfg, &a, &b, &mut Quiet), Err(Error::Protocol(_))));
    let empty = DatasetManifest::new(dir.path(), None, vec![]);
    assert!(matches!(train_manifests(&micro(), &cfg, &a, &empty, &mut Quiet), Err(Error::Config(_))));
}

fn trained_micro() -> Checkpoint {
    let cfg = TrainConfig { epochs: 2, batch_size: 8, ..Default::default() };
    train(&micro(), &cfg, &corpus(4, "train", 16, 16, 1.5), &corpus(4, "val", 8, 16, 1.5), &mut Quiet)
        .unwrap()
        .checkpoint
}

#[test]
fn checkpoint_reload_reproduces_evaluation_bitwise() {
    let ckpt = trained_micro();
    let test = corpus(5, "test", 12, 16, 1.5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    for kind in CorruptionKind::ALL {
        let spec = CorruptionSpec::of(kind);
        let a = evaluate(&ckpt, &test, &spec, 9).unwrap();
        let b = evaluate(&back, &test, &spec, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json(), b.to_json());
    }

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    assert!(matches!(Checkpoint::from_bytes(&bytes, &path), Err(Error::Checkpoint { .. })));
}

#[test]
fn evaluation_decomposes_into_scores_and_metrics() {
    let ckpt = trained_micro();
    let test = corpus(6, "test", 10, 16, 1.5);
    let labels: Vec<u8> = test.iter().map(Sample::class).collect();

    let clean = compute_metrics(&predict_scores(&ckpt.config, &ckpt.params, &test).unwrap(), &labels, "none").unwrap();
    assert_eq!(evaluate(&ckpt, &test, &CorruptionSpec::of(CorruptionKind::None), 0).unwrap(), clean);

    let spec = CorruptionSpec::of(CorruptionKind::Noise);
    let images: Vec<Tensor<f32>> = test
        .iter()
        .enumerate()
        .map(|(i, s)| spec.apply(&s.image, &mut RngState::derive_indexed(3, "corrupt", i as u64)))
        .collect();
    let scores = predict_images(&ckpt.config, &ckpt.params, &images).unwrap();
    assert_eq!(evaluate(&ckpt, &test, &spec, 3).unwrap(), compute_metrics(&scores, &labels, "noise").unwrap());

    let small = corpus(6, "small", 2, 8, 1.5);
    assert!(matches!(evaluate(&ckpt, &small, &spec, 0), Err(Error::Config(_))));
}

#[test]
fn constant_scores_give_majority_accuracy_and_chance_auc() {
    let mut ckpt = trained_micro();
    for id in ["a", "b"] {
        let w = ckpt.params.value(&format!("head_{id}.fc.w")).unwrap().shape().to_vec();
        ckpt.params.set_value(&format!("head_{id}.fc.w"), Tensor::zeros(w)).unwrap();
        ckpt.params.set_value(&format!("head_{id}.fc.b"), Tensor::new([2], vec![0.4, -0.1]).unwrap()).unwrap();
    }
    // Six real, two fake.
    let mut test = corpus(7, "test", 8, 16, 1.5);
    for s in test.iter_mut().take(4) {
        *s = Sample::hard(s.image.clone(), 0);
    }
    let r = evaluate(&ckpt, &test, &CorruptionSpec::default(), 0).unwrap();
    assert_eq!(r.accuracy, 0.75);
    assert_eq!(r.auc, Some(0.5));
    assert_eq!((r.tp, r.fp, r.tn, r.fn_), (0, 0, 6, 2));
}
