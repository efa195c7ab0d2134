use neuroadapt_core::finetune::{finetune_dataset, FinetuneConfig};
use neuroadapt_core::metrics::{balanced_accuracy, confusion_matrix};
use neuroadapt_core::model::{
    head_backward, head_forward, predict_proba, Checkpoint, Encoder, EncoderKind, EncoderSpec, HeadParams, Mode,
    ParamSubset,
};
use neuroadapt_core::numerics::{mean_entropy, Matrix, Rng};
use neuroadapt_core::shiftbench::{generate_suite, Dataset, ShiftKind, SuiteSpec, UnlabeledBatch};
use neuroadapt_core::tta::{run_adaptation, AdapterConfig, Method, ShotConfig, ShotState};

fn identity(channels: usize) -> Encoder {
    Encoder::new(EncoderSpec::new(EncoderKind::Identity, channels, 1)).unwrap()
}

fn everything(ds: &Dataset) -> (UnlabeledBatch, Vec<usize>) {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let b = ds.batch(&idx);
    let labels = b.labels.clone().unwrap();
    (b.strip_labels(), labels)
}

fn bacc(labels: &[usize], probs: &Matrix<f32>) -> f64 {
    balanced_accuracy(&confusion_matrix(labels, &probs.argmax_rows(), probs.cols()).unwrap()).unwrap()
}

fn trained(spec: &SuiteSpec) -> (Checkpoint, Encoder, Dataset, Dataset, f64) {
    let data = generate_suite(spec).unwrap();
    let enc = identity(spec.channels);
    let (ck, log) = finetune_dataset(&FinetuneConfig::default(), &data.source, &enc).unwrap();
    let val = log.val_metric[log.selected_epoch];
    (ck, enc, data.source, data.target, val)
}

#[test]
fn separable_features_train_to_high_val_auc() {
    let spec = SuiteSpec {
        separation: 6.0,
        ..SuiteSpec::null(2, 8, 2000, 200)
    };
    let (_, _, _, _, val_auc) = trained(&spec);
    assert!(val_auc >= 0.99, "val ROC-AUC {val_auc}");
}

#[test]
fn shuffled_labels_train_to_chance() {
    // With labels permuted across records nothing generalizes to held-out
    // (equally permuted) validation labels.
    let spec = SuiteSpec::null(2, 8, 4000, 100);
    let mut data = generate_suite(&spec).unwrap();
    let mut labels: Vec<Option<usize>> = data.source.manifest.records.iter().map(|r| r.label).collect();
    Rng::new(5).shuffle(&mut labels);
    for (r, y) in data.source.manifest.records.iter_mut().zip(labels) {
        r.label = y;
    }
    let (_, log) = finetune_dataset(&FinetuneConfig::default(), &data.source, &identity(8)).unwrap();
    for auc in &log.val_metric {
        assert!((auc - 0.5).abs() < 0.08, "val ROC-AUC {auc} on permuted labels");
    }
}

#[test]
fn null_shift_target_matches_source_validation() {
    let spec = SuiteSpec {
        separation: 1.5,
        ..SuiteSpec::null(2, 16, 20_000, 4000)
    };
    let data = generate_suite(&spec).unwrap();
    let enc = identity(16);
    let (ck, _) = finetune_dataset(&FinetuneConfig::default(), &data.source, &enc).unwrap();
    let val = data.source.subset(neuroadapt_core::shiftbench::Split::Val);
    let (vx, vy) = everything(&val);
    let (tx, ty) = everything(&data.target);
    let source = bacc(&vy, &predict_proba(&ck.head, &enc, &vx).unwrap());
    let target = bacc(&ty, &predict_proba(&ck.head, &enc, &tx).unwrap());
    assert!(
        (source - target).abs() <= 0.03,
        "source val {source} vs target {target}"
    );
}

#[test]
fn target_labels_never_reach_the_adapters() {
    // Canary: scrambling every target label must not move any prediction.
    let spec = SuiteSpec {
        kind: ShiftKind::CovariateShift,
        channel_offset: vec![1.0; 6],
        ..SuiteSpec::null(3, 6, 900, 300)
    };
    let (ck, enc, _, target, _) = trained(&spec);
    let mut scrambled = target.clone();
    for (i, r) in scrambled.manifest.records.iter_mut().enumerate() {
        r.label = Some((r.label.unwrap() + 1 + i % 2) % 3);
    }
    for m in Method::ALL {
        let cfg = AdapterConfig::new(m);
        let a = run_adaptation(&cfg, &ck, &enc, &everything(&target).0, 64, None).unwrap();
        let b = run_adaptation(&cfg, &ck, &enc, &everything(&scrambled).0, 64, None).unwrap();
        assert_eq!(a.probs, b.probs, "{m:?} output depends on target labels");
    }
}

#[test]
fn encoders_are_untouched_by_adaptation() {
    let spec = SuiteSpec::null(2, 4, 400, 100);
    let data = generate_suite(&spec).unwrap();
    for kind in [
        EncoderKind::RandomProjection { out_dim: 5, seed: 1 },
        EncoderKind::TwoLayer {
            hidden: 8,
            out_dim: 6,
            seed: 2,
        },
    ] {
        let enc = Encoder::new(EncoderSpec::new(kind.clone(), 4, 1)).unwrap();
        let before = enc.param_fingerprint();
        let (ck, _) = finetune_dataset(&FinetuneConfig::default(), &data.source, &enc).unwrap();
        for m in Method::ALL {
            run_adaptation(&AdapterConfig::new(m), &ck, &enc, &everything(&data.target).0, 32, None).unwrap();
        }
        assert_eq!(enc.param_fingerprint(), before);
        assert_eq!(
            enc.param_fingerprint(),
            Encoder::new(EncoderSpec::new(kind, 4, 1)).unwrap().param_fingerprint()
        );
    }
}

#[test]
fn tent_step_matches_first_order_decrease() {
    // loss(θ − lr·g) ≈ loss(θ) − lr·‖g‖² for small lr
    for seed in 0..20 {
        let mut rng = Rng::new(seed);
        let head = HeadParams::<f64>::init(6, 3, 10, &mut rng);
        let z = Matrix::from_fn(16, 6, |_, _| rng.normal() * 1.5);
        let (logits, cache) = head_forward(&head, &z, Mode::Eval).unwrap();
        let (loss, dl) = mean_entropy(&logits).unwrap();
        let g = head_backward(&head, &cache, &dl, ParamSubset::NormAffineOnly).unwrap();
        let lr = 1e-6;
        let mut next = head.clone();
        for (p, d) in next.ln_gamma.iter_mut().zip(&g.ln_gamma) {
            *p -= lr * d;
        }
        for (p, d) in next.ln_beta.iter_mut().zip(&g.ln_beta) {
            *p -= lr * d;
        }
        let norm2: f64 = g.ln_gamma.iter().chain(&g.ln_beta).map(|v| v * v).sum();
        let (after, _) = mean_entropy(&head_forward(&next, &z, Mode::Eval).unwrap().0).unwrap();
        let predicted = lr * norm2;
        let actual = loss - after;
        assert!(
            (actual - predicted).abs() <= 0.1 * predicted,
            "seed {seed}: decrease {actual:e}, first-order {predicted:e}"
        );
    }
}

#[test]
fn shot_on_matching_clusters_keeps_predictions() {
    let spec = SuiteSpec {
        separation: 12.0,
        ..SuiteSpec::null(2, 8, 2000, 1000)
    };
    let (ck, enc, _, target, _) = trained(&spec);
    let (x, y) = everything(&target);
    let mut state = ShotState::new(ck.head.clone(), ShotConfig::default()).unwrap();
    state.adapt(&enc, &x, 64, None).unwrap();
    let correct = state.pseudo_labels().iter().zip(&y).filter(|(a, b)| a == b).count();
    assert_eq!(correct, y.len(), "pseudo-labels should recover the clusters exactly");
    let before = predict_proba(&ck.head, &enc, &x).unwrap().argmax_rows();
    let after = predict_proba(state.head(), &enc, &x).unwrap().argmax_rows();
    let same = before.iter().zip(&after).filter(|(a, b)| a == b).count();
    assert!(
        same as f64 >= 0.99 * y.len() as f64,
        "{same}/{} predictions unchanged",
        y.len()
    );
}
