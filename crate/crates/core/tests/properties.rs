mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tvcd_core::autodiff::Graph;
use tvcd_core::change_head::{change_logits, loss_total, ChangeHead, LossWeights};
use tvcd_core::dtco::{dtco_fuse, DtcoParams};
use tvcd_core::encoders::{normalize_rows, DenseFeatures, PatchFeatures, TextEmbeddings};
use tvcd_core::generator::{generate_sample, overlap_statistic, star_pair, GeneratorConfig, BUILDING};
use tvcd_core::harness::RunConfig;
use tvcd_core::losses::{loss_lva, loss_pca, patch_similarity_labels, score_map, ScoreMap};
use tvcd_core::metrics::{aggregate, confusion, metrics};
use tvcd_core::model::{Model, ModelConfig};
use tvcd_core::params::ParamStore;
use tvcd_core::{BinaryMask, ImageTensor, LabelMap, Tensor};

fn tensor(rows: usize, cols: usize, range: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-range..range, rows * cols).prop_map(move |v| Tensor::from_vec(rows, cols, v).unwrap())
}

fn mask(h: usize, w: usize) -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(any::<bool>(), h * w).prop_map(move |v| BinaryMask::new(h, w, v).unwrap())
}

fn labels(h: usize, w: usize, k: u8) -> impl Strategy<Value = LabelMap> {
    prop::collection::vec(0..k, h * w).prop_map(move |v| LabelMap::new(h, w, v, k as usize).unwrap())
}

fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
    a.shape() == b.shape() && a.max_abs_diff(b) <= tol
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_rows_are_unit_idempotent_and_scale_free(x in tensor(6, 8, 5.0), c in 0.01f64..100.0) {
        prop_assume!(x.data().chunks(8).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-6));
        let f = PatchFeatures::new(2, 3, x.clone()).unwrap();
        let n = normalize_rows(&f);
        for r in 0..6 {
            let norm = n.values.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-6);
        }
        prop_assert!(close(&normalize_rows(&n).values, &n.values, 1e-12));
        let scaled = PatchFeatures::new(2, 3, x.map(|v| v * c)).unwrap();
        prop_assert!(close(&normalize_rows(&scaled).values, &n.values, 1e-12));
    }

    #[test]
    fn similarity_grid_is_symmetric(a in labels(8, 8, 4), b in labels(8, 8, 4)) {
        prop_assert_eq!(
            patch_similarity_labels(&a, &b, 2, 2).unwrap(),
            patch_similarity_labels(&b, &a, 2, 2).unwrap()
        );
    }

    #[test]
    fn losses_are_finite_and_nonnegative(
        fa in tensor(4, 6, 3.0),
        fb in tensor(4, 6, 3.0),
        dense in tensor(16, 6, 3.0),
        text in tensor(3, 6, 3.0),
        ya in labels(4, 4, 3),
        yb in labels(4, 4, 3),
        temperature in 0.1f64..4.0,
    ) {
        let pa = normalize_rows(&PatchFeatures::new(2, 2, fa).unwrap());
        let pb = normalize_rows(&PatchFeatures::new(2, 2, fb).unwrap());
        let grid = patch_similarity_labels(&ya, &yb, 2, 2).unwrap();
        let lva = loss_lva(&pa, &pb, &grid, temperature).unwrap();
        prop_assert!(lva.is_finite() && lva >= 0.0);

        let d = normalize_rows(&DenseFeatures::new(4, 4, dense).unwrap());
        let t = normalize_rows(&TextEmbeddings { values: text });
        let s = score_map(&d, &t).unwrap();
        prop_assert!(s.values.data().iter().all(|v| (0.0..=2.0 + 1e-12).contains(v)));
        let pca = loss_pca(&s, &ya).unwrap();
        prop_assert!(pca.is_finite() && pca >= 0.0);
    }

    #[test]
    fn lowering_true_class_distance_lowers_alignment_loss(
        s in prop::collection::vec(0.0f64..2.0, 4),
        class in 0usize..4,
        delta in 0.01f64..0.5,
    ) {
        let at = |v: Vec<f64>| {
            let map = ScoreMap { height: 1, width: 1, values: Tensor::from_vec(1, 4, v).unwrap() };
            loss_pca(&map, &LabelMap::filled(1, 1, class as u8)).unwrap()
        };
        let mut lower = s.clone();
        lower[class] -= delta;
        prop_assert!(at(lower) < at(s));
    }

    #[test]
    fn total_loss_is_linear_in_weights(
        parts in prop::array::uniform5(0.0f64..10.0),
        alpha in 0.0f64..2.0,
        beta in 0.0f64..2.0,
        h in 0.01f64..1.0,
    ) {
        let [seg, cd, lva, pa, pb] = parts;
        let f = |a: f64, b: f64| loss_total(seg, cd, lva, pa, pb, LossWeights { alpha: a, beta: b });
        let base = f(alpha, beta);
        prop_assert!(((f(alpha + h, beta) - base) / h - lva).abs() < 1e-9);
        prop_assert!(((f(alpha, beta + h) - base) / h - (pa + pb)).abs() < 1e-9);
        prop_assert!((f(0.0, 0.0) - (seg + cd)).abs() < 1e-12);
    }

    #[test]
    fn f1_iou_identity_and_swap_symmetry(pred in mask(6, 7), gt in mask(6, 7)) {
        let r = metrics(confusion(&pred, &gt).unwrap()).unwrap();
        let s = metrics(confusion(&gt, &pred).unwrap()).unwrap();
        for v in [r.precision, r.recall, r.f1, r.iou, r.oa] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if r.degenerate.is_empty() {
            prop_assert!((r.f1 - 2.0 * r.iou / (1.0 + r.iou)).abs() < 1e-12);
        }
        prop_assert_eq!(r.f1, s.f1);
        prop_assert_eq!(r.iou, s.iou);
        prop_assert_eq!(r.oa, s.oa);
        prop_assert_eq!(r.precision, s.recall);
        prop_assert_eq!(r.recall, s.precision);
    }

    #[test]
    fn self_comparison_is_perfect(m in mask(5, 5)) {
        prop_assume!(m.count() > 0);
        let r = metrics(confusion(&m, &m).unwrap()).unwrap();
        prop_assert_eq!([r.precision, r.recall, r.f1, r.iou, r.oa], [1.0; 5]);
    }

    #[test]
    fn aggregation_ignores_order(pairs in prop::collection::vec((mask(3, 4), mask(3, 4)), 1..8), rot in 0usize..8) {
        let reports: Vec<_> = pairs
            .iter()
            .map(|(p, g)| metrics(confusion(p, g).unwrap()).unwrap())
            .collect();
        let mut rotated = reports.clone();
        let n = rotated.len();
        rotated.rotate_left(rot % n);
        let (a, b) = (aggregate(&reports).unwrap(), aggregate(&rotated).unwrap());
        prop_assert_eq!(a.counts, b.counts);
        prop_assert_eq!(a.f1, b.f1);
    }

    #[test]
    fn random_pairing_overlap_lies_in_unit_interval(seed in any::<u64>(), density in 0.0f64..1.0) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch: Vec<_> = (0..4)
            .map(|_| {
                let img = ImageTensor::filled(4, 4, [0.5; 3]);
                let bits = (0..16).map(|_| rng.random::<f64>() < density).collect();
                let m = BinaryMask::new(4, 4, bits).unwrap();
                (img, m)
            })
            .collect();
        for pair in star_pair(&batch, &mut rng).unwrap() {
            let v = overlap_statistic(&pair).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fusion_is_equivariant_in_class_order(
        seed in any::<u64>(),
        f in tensor(5, 8, 1.0),
        t in tensor(4, 8, 1.0),
        perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = DtcoParams::new(&mut store, 8, &mut rng);
        common::jitter(&mut store, 0.3, &mut rng);
        let f = PatchFeatures::new(1, 5, f).unwrap();
        let t = TextEmbeddings { values: t };
        let fused = dtco_fuse(&store, &params, &f, &t).unwrap();
        let fused_perm = dtco_fuse(&store, &params, &f, &t.permuted(&perm)).unwrap();
        prop_assert!(close(&fused_perm.values, &fused.permuted(&perm).values, 1e-12));
    }

    #[test]
    fn change_probabilities_stay_in_unit_interval(
        seed in any::<u64>(),
        fa in tensor(9, 4, 50.0),
        fb in tensor(9, 4, 50.0),
        sa in tensor(9, 3, 50.0),
        sb in tensor(9, 3, 50.0),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let head = ChangeHead::new(&mut store, 4, 3, 6, &mut rng);
        let dense = |t: Tensor| DenseFeatures::new(3, 3, t).unwrap();
        let score = |t: Tensor| ScoreMap { height: 3, width: 3, values: t };
        let p = change_logits(&store, &head, &dense(fa), &dense(fb), &score(sa), &score(sb)).unwrap();
        prop_assert!(p.values.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }

    #[test]
    fn generated_pairs_obey_edit_rules(master_seed in any::<u64>(), index in 0usize..1000, k in 3usize..=5) {
        let cfg = GeneratorConfig {
            master_seed,
            num_classes: k,
            height: 32,
            width: 32,
            land_size: (7, 18),
            building_size: (3, 6),
            ..Default::default()
        };
        let s = generate_sample(&cfg, index).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let (a, b) = (s.labels_a.get(y, x), s.labels_b.get(y, x));
                prop_assert!((a as usize) < k && (b as usize) < k);
                prop_assert_eq!(s.change.get(y, x), a != b);
                prop_assert!(a == b || (a != BUILDING && b != BUILDING));
                if !s.edited.get(y, x) {
                    prop_assert_eq!(s.img_a.pixel(y, x), s.img_b.pixel(y, x));
                }
            }
        }
        prop_assert!(s.img_a.data().iter().chain(s.img_b.data()).all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(overlap_statistic(&s).unwrap(), 0.0);
        prop_assert_eq!(&generate_sample(&cfg, index).unwrap(), &s);
    }

    #[test]
    fn run_config_round_trips(
        seed in any::<u64>(),
        size_mult in 1usize..8,
        alpha in 0.0f64..5.0,
        beta in 0.0f64..5.0,
        lr in 1e-6f64..1e-1,
        steps in 1usize..10_000,
        switches in prop::array::uniform3(any::<bool>()),
        threshold in 0.0f64..=1.0,
    ) {
        let mut c = RunConfig::default();
        c.seed = seed;
        c.image_size = size_mult * c.model.patch_size;
        c.loss.alpha = alpha;
        c.loss.beta = beta;
        c.optimizer.lr = lr;
        c.optimizer.steps = steps;
        c.ablation.enable_lva = switches[0];
        c.ablation.enable_pca = switches[1];
        c.ablation.enable_dtco = switches[2];
        c.threshold = threshold;
        let text = c.to_json().unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_json().unwrap(), text);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn encoder_shapes_follow_config(
        patch in prop::sample::select(vec![4usize, 8]),
        grid in 1usize..4,
        factor in prop::sample::select(vec![1usize, 2, 4]),
        k in 2usize..6,
        seed in any::<u64>(),
    ) {
        let config = ModelConfig {
            patch_size: patch,
            embed_dim: 8,
            num_classes: k,
            context_len: 3,
            upsample_factor: factor,
            depth: 1,
            mlp_ratio: 2,
            head_hidden: 4,
        };
        let (model, store) = Model::new(&config, seed).unwrap();
        let side = patch * grid;
        let img = ImageTensor::filled(side, side, [0.3, 0.5, 0.7]);
        let run = || {
            let mut g = Graph::new();
            let p = store.bind_constant(&mut g);
            let fwd = model.forward(&mut g, &p, &img, &img, true).unwrap();
            (fwd.grid, fwd.dense, g.value(fwd.patch_a).clone(), g.value(fwd.dense_a).clone(), g.value(fwd.prob).clone())
        };
        let (g1, d1, patch_a, dense_a, prob) = run();
        prop_assert_eq!(g1, (grid, grid));
        prop_assert_eq!(d1, (factor * grid, factor * grid));
        prop_assert_eq!(patch_a.shape(), (grid * grid, 8));
        prop_assert_eq!(dense_a.rows(), factor * factor * grid * grid);
        prop_assert!(patch_a.is_finite() && dense_a.is_finite() && prob.is_finite());
        let (_, _, patch_b, dense_b, _) = run();
        prop_assert_eq!(patch_a, patch_b);
        prop_assert_eq!(dense_a, dense_b);
    }
}
