use comer_core::checkpoint;
use comer_core::config::MrfpConfig;
use comer_core::count;
use comer_core::oracle;
use comer_core::pyramid::LevelShapes;
use comer_core::{CoMer, CoMerConfig, Tape, Tensor, Toggles};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(dims: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(dims, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn small_config() -> impl Strategy<Value = CoMerConfig> {
    (
        prop::sample::select(vec![(8, 2), (12, 3), (16, 4), (24, 4)]),
        prop::sample::select(vec![(2, 1), (2, 2), (4, 2), (4, 4)]),
        prop::sample::select(vec![vec![3], vec![3, 5], vec![1, 3, 5, 7]]),
        1..=3usize,
        any::<[bool; 3]>(),
    )
        .prop_map(|((dim, heads), (depth, stages), kernels, points, t)| {
            let mut c = CoMerConfig::toy();
            c.vit.dim = dim;
            c.vit.heads = heads;
            c.vit.depth = depth;
            c.stages = stages;
            c.cti.heads = heads;
            c.cti.points = points;
            c.mrfp = MrfpConfig {
                kernels,
                reduce_ratio: 1.0,
            };
            c.toggles = Toggles {
                mrfp: t[0],
                cti_to_vit: t[1],
                cti_to_cnn: t[2],
            };
            c
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn split_then_concat_is_identity(
        rows in 1..6usize,
        sizes in prop::collection::vec(1..4usize, 1..4),
        axis in 0..2usize,
        seed in any::<u64>(),
    ) {
        let total: usize = sizes.iter().sum();
        let dims = if axis == 0 { [total, rows] } else { [rows, total] };
        let x = randn(&dims, seed);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let parts = tape.split(v, axis, &sizes).unwrap();
        let back = tape.concat(&parts, axis).unwrap();
        prop_assert_eq!(tape.value(back), &x);
    }

    #[test]
    fn softmax_rows_are_shift_invariant_distributions(
        rows in 1..4usize,
        cols in 1..7usize,
        shift in -50.0..50.0f64,
        seed in any::<u64>(),
    ) {
        let x = randn(&[rows, cols], seed);
        let shifted = Tensor::new(&[rows, cols], x.data().iter().map(|v| v + shift).collect()).unwrap();
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(x), tape.constant(shifted));
        let (sa, sb) = (tape.softmax(a, 1).unwrap(), tape.softmax(b, 1).unwrap());
        prop_assert!(tape.value(sa).max_abs_diff(tape.value(sb)).unwrap() < 1e-12);
        for row in tape.value(sa).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pyramid_flatten_round_trip(
        gh in 1..5usize,
        gw in 1..5usize,
        channels in 1..5usize,
        seed in any::<u64>(),
    ) {
        let shapes = LevelShapes::for_image(32 * gh, 32 * gw).unwrap();
        let mut tape = Tape::new();
        let maps: Vec<_> = (0..3)
            .map(|l| {
                let (h, w) = shapes.shapes[l];
                tape.constant(randn(&[channels, h, w], seed.wrapping_add(l as u64)))
            })
            .collect();
        let maps = [maps[0], maps[1], maps[2]];
        let flat = tape.flatten_pyramid(&maps).unwrap();
        prop_assert_eq!(tape.dims(flat), &[shapes.total(), channels]);
        prop_assert_eq!(shapes.total(), 21 * gh * gw);
        let back = tape.unflatten_pyramid(flat, &shapes).unwrap();
        for l in 0..3 {
            prop_assert_eq!(tape.value(back[l]), tape.value(maps[l]));
        }
    }

    #[test]
    fn resize_keeps_constants(c in -3.0..3.0f64, oh in 1..12usize, ow in 1..12usize) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_f64(&[2, 3, 4], &[c; 24]).unwrap());
        let y = tape.bilinear_resize(x, oh, ow).unwrap();
        prop_assert!(tape.value(y).data().iter().all(|v| (v - c).abs() < 1e-12));
    }

    #[test]
    fn sample_is_exact_on_nodes(i in 0..4usize, j in 0..5usize, seed in any::<u64>()) {
        let x = randn(&[3, 4, 5], seed);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pts = tape.constant(Tensor::from_f64(&[1, 2], &[j as f64, i as f64]).unwrap());
        let y = tape.bilinear_sample(xv, pts).unwrap();
        for c in 0..3 {
            prop_assert_eq!(tape.value(y).data()[c], x.data()[(c * 4 + i) * 5 + j]);
        }
    }

    #[test]
    fn operators_match_oracles(seed in any::<u64>()) {
        prop_assert!(oracle::check_conv2d(seed).unwrap() < 1e-10);
        prop_assert!(oracle::check_mhsa(seed, 6, 3).unwrap() < 1e-10);
        prop_assert!(oracle::check_deform(seed, 6, 2, 3, (32, 64)).unwrap() < 1e-10);
        let cfg = MrfpConfig { kernels: vec![1, 3, 5], reduce_ratio: 0.5 };
        prop_assert!(oracle::check_mrfp(seed, 12, &cfg, (64, 32)).unwrap() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn config_text_round_trip(cfg in small_config()) {
        prop_assert_eq!(CoMerConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn analytic_count_matches_allocation(cfg in small_config()) {
        let model = CoMer::<f32>::new(&cfg, 0).unwrap();
        prop_assert_eq!(model.breakdown(), count::analytic(&cfg));
        prop_assert_eq!(model.store.numel(), count::analytic(&cfg).total());
    }

    #[test]
    fn checkpoint_round_trip(cfg in small_config(), seed in any::<u64>()) {
        let model = CoMer::<f64>::new(&cfg, seed).unwrap();
        let bytes = checkpoint::encode(&model);
        let back = checkpoint::decode::<f64>(&bytes).unwrap();
        prop_assert_eq!(checkpoint::encode(&back), bytes);
        prop_assert_eq!(back.cfg, cfg);
    }
}
