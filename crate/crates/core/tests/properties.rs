//! Property tests for the structural invariants of the core types.

use ndarray::{Array1, Array2};
use pcsl_core::affinity::{build_affinity, soft_label_rows, SoftLabelRow};
use pcsl_core::eval::{evaluate_embeddings, ItemMeta};
use pcsl_core::losses::{intra_triplet_loss, softmax_probs, weighted_cross_entropy, weighted_triplet_loss};
use pcsl_core::trainer::sampler::{pk_sampler, SampleTable};
use pcsl_core::{generate_synthetic, Dataset, OptimizerConfig, PersonBuffer, PersonIndex, SynthSpec};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0..3.0f64, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn small_spec() -> impl Strategy<Value = SynthSpec> {
    (4usize..12, 2usize..5, 2usize..5, 0.3..1.0f64, any::<u64>()).prop_map(|(g, n, ipp, p, seed)| SynthSpec {
        n_identities: g,
        n_test_identities: 4,
        n_cameras: n,
        d_latent: 3,
        d_in: 5,
        images_per_person: ipp,
        camera_appearance_prob: p,
        seed,
        ..SynthSpec::default()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn person_index_is_a_contiguous_bijection(per in prop::collection::vec(0usize..6, 1..6)) {
        let index = PersonIndex::new(per.clone());
        let mut start = 0;
        for (cam, &n) in per.iter().enumerate() {
            prop_assert_eq!(index.block(cam), start..start + n);
            for local in 0..n {
                let class = index.class_of(cam, local).unwrap();
                prop_assert_eq!(index.person_of(class), Some((cam, local)));
            }
            start += n;
        }
        prop_assert_eq!(index.num_classes(), start);
        prop_assert_eq!(index.person_of(start), None);
    }

    #[test]
    fn generated_datasets_are_well_formed(spec in small_spec()) {
        let s = generate_synthetic(&spec).unwrap();
        let ds: &Dataset = &s.train;
        let index = ds.index();
        let mut truth = vec![None; index.num_classes()];
        for (i, sample) in ds.samples().iter().enumerate() {
            prop_assert_eq!(sample.features.len(), ds.d_in());
            let class = index.class_of(sample.camera, sample.local_id);
            prop_assert_eq!(class, Some(ds.class_of_sample(i)));
            let c = class.unwrap();
            // one identity per (camera, local person)
            if let Some(t) = truth[c] {
                prop_assert_eq!(Some(t), sample.truth);
            }
            truth[c] = sample.truth;
        }
        for members in ds.samples_by_class() {
            prop_assert!(members.len() >= spec.images_per_person);
        }
        // every identity is seen by at least one camera
        let mut seen = vec![false; spec.n_identities];
        for t in truth.into_iter().flatten() {
            seen[t] = true;
        }
        prop_assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn datasets_round_trip_through_text(spec in small_spec()) {
        let s = generate_synthetic(&spec).unwrap();
        for ds in [&s.train, &s.query, &s.gallery] {
            let back = Dataset::read_from(ds.to_text().as_bytes()).unwrap();
            prop_assert_eq!(&back, ds);
        }
    }

    #[test]
    fn pk_batches_come_from_one_camera(spec in small_spec(), seed in any::<u64>(), n_k in 1usize..4) {
        let s = generate_synthetic(&spec).unwrap();
        let table = SampleTable::new(&s.train);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for cam in 0..s.train.n_cameras() {
            let persons = table.persons_in(&s.train, cam).len();
            if persons < 2 {
                continue;
            }
            let n_p = persons.min(3);
            let batch = pk_sampler(&s.train, &table, cam, n_p, n_k, &mut rng).unwrap();
            prop_assert_eq!(batch.len(), n_p * n_k);
            for (&i, &c) in batch.samples.iter().zip(&batch.classes) {
                prop_assert_eq!(s.train.samples()[i].camera, cam);
                prop_assert_eq!(s.train.class_of_sample(i), c);
            }
            for chunk in batch.classes.chunks(n_k) {
                prop_assert!(chunk.iter().all(|&c| c == chunk[0]));
            }
            let mut distinct = batch.classes.clone();
            distinct.dedup();
            prop_assert_eq!(distinct.len(), n_p);
        }
    }

    #[test]
    fn affinity_respects_structure(
        per in prop::collection::vec(1usize..5, 2..5),
        k in 1usize..6,
        seed in any::<u64>(),
        masked in any::<bool>(),
    ) {
        let index = PersonIndex::new(per);
        let c = index.num_classes();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats = Array2::from_shape_simple_fn((c, 3), || rand::Rng::random_range(&mut rng, -2.0..2.0));
        let buf = PersonBuffer::from_parts(feats, vec![true; c], 1).unwrap();
        let a = build_affinity(&buf, &index, k, masked).unwrap().matrix;
        for i in 0..c {
            prop_assert!(a.row(i).len() <= k);
            prop_assert_eq!(a.get(i, i), 0.0);
            for &(j, v) in a.row(i) {
                prop_assert!((0.0..=1.0).contains(&v));
                if masked {
                    prop_assert_ne!(index.camera_of(i), index.camera_of(j));
                }
            }
        }
        for row in soft_label_rows(&a) {
            if !row.degenerate {
                let total: f64 = row.weights.iter().map(|w| w.1).sum();
                prop_assert!((total - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn intra_loss_is_nonnegative_and_shaped(emb in matrix(8, 3), margin in 0.0..2.0f64) {
        let persons = [0, 0, 1, 1, 2, 2, 3, 3];
        let v = intra_triplet_loss(emb.view(), &persons, margin).unwrap();
        prop_assert!(v.loss >= 0.0);
        prop_assert_eq!(v.grad.dim(), emb.dim());
        prop_assert!(v.active <= persons.len());
        // translating every embedding changes nothing
        let shifted = &emb + 1.5;
        let w = intra_triplet_loss(shifted.view(), &persons, margin).unwrap();
        prop_assert!((v.loss - w.loss).abs() <= 1e-9);
    }

    #[test]
    fn cross_entropy_gradient_rows_sum_to_zero(
        scores in prop::collection::vec(-5.0..5.0f64, 6),
        raw in prop::collection::vec(0.01..1.0f64, 6),
    ) {
        let total: f64 = raw.iter().sum();
        let row = SoftLabelRow {
            class: 0,
            weights: raw.iter().enumerate().map(|(c, w)| (c, w / total)).collect(),
            degenerate: false,
        };
        let probs = softmax_probs(Array1::from(scores).view());
        prop_assert!((probs.sum() - 1.0).abs() <= 1e-12);
        let ce = weighted_cross_entropy(probs.view(), &row).unwrap();
        prop_assert!(ce.loss >= 0.0);
        prop_assert!(ce.grad_scores.sum().abs() <= 1e-12);
    }

    #[test]
    fn weighted_triplet_is_nonnegative(pts in matrix(4, 3), w in 0.05..0.95f64, margin in 0.0..2.0f64) {
        let pos = [(pts.row(1), w), (pts.row(2), 1.0 - w)];
        let v = weighted_triplet_loss(pts.row(0), &pos, pts.row(3), margin).unwrap();
        prop_assert!(v.loss >= 0.0);
        prop_assert_eq!(v.active, v.loss > 0.0);
        prop_assert_eq!(v.grad_positives.len(), 2);
        prop_assert_eq!(v.grad_anchor.len(), 3);
    }

    #[test]
    fn cmc_is_monotone_and_bounded(
        q in matrix(4, 2),
        g in matrix(12, 2),
        ids in prop::collection::vec(0usize..3, 16),
        cams in prop::collection::vec(0usize..3, 16),
    ) {
        let meta: Vec<ItemMeta> = ids.iter().zip(&cams).map(|(&identity, &camera)| ItemMeta { camera, identity }).collect();
        if let Ok(r) = evaluate_embeddings(q.view(), &meta[..4], g.view(), &meta[4..]) {
            prop_assert!((0.0..=1.0).contains(&r.map));
            for w in r.cmc.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
            prop_assert!(r.cmc.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn learning_rates_decay_exactly_once(decay_epoch in 1usize..50, epoch in 1usize..100) {
        let config = OptimizerConfig { decay_epoch, ..OptimizerConfig::default() };
        let (body, head) = config.learning_rates(epoch);
        let factor = if epoch >= decay_epoch { config.decay_factor } else { 1.0 };
        prop_assert_eq!(body, config.lr_pretrained * factor);
        prop_assert_eq!(head, config.lr_new * factor);
    }
}
