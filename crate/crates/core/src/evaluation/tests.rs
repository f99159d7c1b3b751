use super::*;
use crate::skeleton::generate_synthetic_dataset;
use rand::Rng;
use rand_distr::StandardNormal;

fn tiny_arch() -> Architecture {
    Architecture {
        widths: vec![4, 8],
        strides: vec![1, 2],
        temporal_kernel: 3,
        projector_hidden: 16,
        projector_out: 8,
        ..Architecture::default()
    }
}

fn tiny() -> (ModelParams, Dataset, EvalConfig) {
    let ds = generate_synthetic_dataset(3, 12, 6, 16, 0.02, 4).unwrap();
    let params = scratch_model(&tiny_arch(), &ds, 1).unwrap();
    let cfg = EvalConfig {
        epochs: 5,
        batch_size: 9,
        frames: 12,
        ..EvalConfig::default()
    };
    (params, ds, cfg)
}

fn random_unit(n: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    for row in data.chunks_mut(d) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    }
    Tensor::new(vec![n, d], data).unwrap()
}

#[test]
fn separable_one_hot_features_are_learned_perfectly() {
    let classes = 4;
    let labels: Vec<usize> = (0..40).map(|i| i % classes).collect();
    let mut data = vec![0.0; 40 * classes];
    for (i, &y) in labels.iter().enumerate() {
        data[i * classes + y] = 1.0;
    }
    let x = Tensor::new(vec![40, classes], data).unwrap();
    let clf = train_linear(&x, &labels, classes, &EvalConfig { epochs: 10, batch_size: 8, ..EvalConfig::default() }).unwrap();
    assert_eq!(clf.predict(&x), labels);
}

#[test]
fn zero_epoch_classifier_predicts_first_class() {
    let x = random_unit(6, 3, 2);
    let clf = train_linear(&x, &[0, 1, 2, 0, 1, 2], 3, &EvalConfig { epochs: 0, ..EvalConfig::default() }).unwrap();
    assert_eq!(clf.predict(&x), vec![0; 6]);
}

#[test]
fn cross_entropy_matches_direct_formula() {
    let logits = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.0, 0.3, -0.2]).unwrap();
    let labels = [2, 1];
    let mut g = Graph::new();
    let l = g.param(logits.clone());
    let loss = cross_entropy(&mut g, l, &labels).unwrap();
    let expect: f64 = logits
        .data()
        .chunks(3)
        .zip(labels)
        .map(|(r, y)| r.iter().map(|x| x.exp()).sum::<f64>().ln() - r[y])
        .sum::<f64>()
        / 2.0;
    assert!((g.value(loss).item() - expect).abs() < 1e-12);
    assert!(cross_entropy(&mut g, l, &[0, 3]).is_err());
}

#[test]
fn linear_evaluation_freezes_the_encoder() {
    let (params, ds, cfg) = tiny();
    let before = encoder_hash(&params);
    let snapshot = params.clone();
    let report = linear_evaluate(&params, &ds, &cfg).unwrap();
    assert_eq!(report.encoder_hash, before);
    assert_eq!(params.values, snapshot.values);
    assert!((0.0..=1.0).contains(&report.top1));
    // accuracy recomputed from the confusion matrix
    let total: usize = report.confusion.iter().flatten().sum();
    let trace: usize = (0..3).map(|c| report.confusion[c][c]).sum();
    assert_eq!(total, ds.split(Split::Test).len());
    assert_eq!(report.top1, trace as f64 / total as f64);
    assert_eq!(report.per_class.len(), 3);
    let json = serde_json::to_string(&report).unwrap();
    assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), report);
}

#[test]
fn evaluation_is_deterministic() {
    let (params, ds, cfg) = tiny();
    assert_eq!(linear_evaluate(&params, &ds, &cfg).unwrap(), linear_evaluate(&params, &ds, &cfg).unwrap());
}

#[test]
fn zero_epoch_finetune_is_chance() {
    let (params, ds, cfg) = tiny();
    let (report, tuned) = finetune_evaluate(&params, &ds, &EvalConfig { epochs: 0, ..cfg }).unwrap();
    assert_eq!(tuned.values, params.values);
    // balanced test split, every prediction is class 0
    assert!((report.top1 - 1.0 / 3.0).abs() < 1e-12);
    assert!(report.confusion.iter().all(|row| row[1] == 0 && row[2] == 0));
}

#[test]
fn finetune_updates_encoder_but_not_the_input() {
    let (params, ds, cfg) = tiny();
    let (report, tuned) = finetune_evaluate(&params, &ds, &cfg).unwrap();
    assert_ne!(report.encoder_hash, encoder_hash(&params));
    assert_ne!(tuned.values, params.values);
    assert!((0.0..=1.0).contains(&report.top1));
}

#[test]
fn unlabelled_or_single_class_data_is_rejected() {
    let (params, mut ds, cfg) = tiny();
    ds.sequences[0].label = None;
    assert!(linear_evaluate(&params, &ds, &cfg).is_err());
    for s in &mut ds.sequences {
        s.label = Some(0);
    }
    assert!(linear_evaluate(&params, &ds, &cfg).is_err());
}

#[test]
fn mining_precision_of_perfect_clusters_is_one() {
    let classes = 5;
    let labels: Vec<usize> = (0..100).map(|i| i % classes).collect();
    let mut data = vec![0.0; 100 * classes];
    for (i, &y) in labels.iter().enumerate() {
        data[i * classes + y] = 1.0;
    }
    let x = Tensor::new(vec![100, classes], data).unwrap();
    let p = mining_precision_embeddings(&x, &labels, 4, 50, 20, 3).unwrap();
    assert_eq!(p, 1.0);
}

#[test]
fn mining_precision_of_random_embeddings_is_chance() {
    let n = 10_000;
    let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
    let x = random_unit(n, 16, 11);
    let p = mining_precision_embeddings(&x, &labels, 16, 512, 128, 5).unwrap();
    // Monte-Carlo oracle: independent labels give precision 1/10
    assert!((p - 0.1).abs() < 0.02, "{p}");
}

#[test]
fn mining_precision_rejects_k_above_queue() {
    let x = random_unit(20, 4, 1);
    let labels = vec![0; 20];
    assert!(mining_precision_embeddings(&x, &labels, 11, 10, 5, 0).is_err());
}

#[test]
fn checkpoint_mining_precision_is_in_range() {
    let (params, ds, _) = tiny();
    let p = mining_precision(&params, &ds, 3, 12, 6, 12, 0).unwrap();
    assert!((0.0..=1.0).contains(&p));
}

#[test]
fn embedding_export_round_trips() {
    let (params, ds, cfg) = tiny();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.embd"), dir.path().join("b.embd"));
    assert_eq!(export_embeddings(&params, &ds, cfg.frames, &a).unwrap(), ds.len());
    export_embeddings(&params, &ds, cfg.frames, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let back = embeddings::load_embeddings(&a).unwrap();
    assert_eq!(back.len(), ds.len());
    let seqs: Vec<_> = ds.sequences.iter().collect();
    let feats = extract_features(&params, &cropped(&seqs, cfg.frames).unwrap(), cfg.frames, false).unwrap();
    for (i, r) in back.iter().enumerate() {
        assert_eq!(r.sample_id, ds.sequences[i].sample_id);
        assert_eq!(r.label, ds.sequences[i].label);
        for (x, y) in r.values.iter().zip(feats.row(i)) {
            assert_eq!(*x, *y as f32 as f64);
        }
    }
}

#[test]
fn embedding_format_handles_missing_labels_and_rejects_garbage() {
    let recs = vec![
        EmbeddingRecord { sample_id: "a".into(), label: None, values: vec![1.5, -2.0] },
        EmbeddingRecord { sample_id: "b".into(), label: Some(7), values: vec![] },
    ];
    let mut buf = Vec::new();
    write_embeddings(&mut buf, &recs).unwrap();
    assert_eq!(read_embeddings(&buf[..]).unwrap(), recs);
    assert!(read_embeddings(&buf[..buf.len() - 1]).is_err());
    buf[0] = b'X';
    assert!(read_embeddings(&buf[..]).is_err());
}
