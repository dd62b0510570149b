use std::collections::BTreeMap;
use std::sync::OnceLock;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use ssgan::dataset::{
    average_test_trials, load_dataset, save_dataset, simulate, Dataset, SyntheticConfig, REQUIRED_ROIS,
};
use ssgan::eval::{pairwise_win_rate, roi_ablation, ssim, RoiAblationConfig};
use ssgan::gan::{train, GanConfig, GanModel, Generator, GeneratorSpec, TrainingPair};
use ssgan::image::Image;
use ssgan::numeric::{conv_out_size, conv_transpose_out_size};
use ssgan::patch::{extract_patch_features, PatchGrid};
use ssgan::semantic::{argmax, train_semantic, SemanticConfig, SemanticNet};
use ssgan::shape::{fit_combiner, CombinerMode, ShapeConfig, ShapeDecoder};

fn small_config(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        image_size: 16,
        patch_size: 4,
        categories: 3,
        train_stimuli: 12,
        test_stimuli: 4,
        train_trials: 1,
        test_trials: 3,
        voxels: REQUIRED_ROIS
            .iter()
            .map(|r| (r.to_string(), 24))
            .collect::<BTreeMap<_, _>>(),
        seed,
        ..SyntheticConfig::default()
    }
}

fn small_dataset(seed: u64) -> Dataset {
    simulate(&small_config(seed)).unwrap().dataset
}

fn image_strategy(size: usize) -> impl Strategy<Value = Image> {
    proptest::collection::vec(0f32..=1.0, size * size).prop_map(move |p| Image::square(size, p).unwrap())
}

fn grid_strategy(side: usize) -> impl Strategy<Value = PatchGrid> {
    proptest::collection::vec(0f32..=1.0, side * side).prop_map(move |v| PatchGrid::new(side, v).unwrap())
}

/// A semantic net shared by the classification properties.
fn trained_net() -> &'static (SemanticNet, Dataset) {
    static NET: OnceLock<(SemanticNet, Dataset)> = OnceLock::new();
    NET.get_or_init(|| {
        let data = small_dataset(99);
        let config = SemanticConfig {
            hidden1: 16,
            hidden2: 8,
            epochs: 5,
            ..SemanticConfig::default()
        };
        (train_semantic(&data, &config).unwrap(), data)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stride_two_conv_and_transpose_restore_size(exp in 2u32..10) {
        let s = 1usize << exp;
        let down = conv_out_size(s, 4, 2, 1).unwrap();
        prop_assert_eq!(down, s / 2);
        prop_assert_eq!(conv_transpose_out_size(down, 4, 2, 1).unwrap(), s);
    }

    #[test]
    fn dataset_round_trips_through_disk(seed in any::<u64>()) {
        let data = small_dataset(seed);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&data, dir.path()).unwrap();
        prop_assert_eq!(load_dataset(dir.path()).unwrap(), data);
    }

    #[test]
    fn averaging_test_trials_is_idempotent(seed in any::<u64>()) {
        let once = average_test_trials(&small_dataset(seed));
        prop_assert_eq!(average_test_trials(&once), once.clone());
    }

    #[test]
    fn patch_averaging_is_a_projection(mask in image_strategy(16), m in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let p = extract_patch_features(&mask, m).unwrap();
        let again = extract_patch_features(&p.upsample(m), m).unwrap();
        for (a, b) in p.values().iter().zip(again.values()) {
            prop_assert!((a - b).abs() <= 1e-6, "{} vs {}", a, b);
        }
    }

    #[test]
    fn ssim_is_symmetric_and_one_on_identity(a in image_strategy(16), b in image_strategy(16)) {
        prop_assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn mean_ssim_falls_as_noise_grows(a in image_strategy(16), s1 in 0.01f32..0.5, ds in 0.01f32..0.5) {
        let s2 = s1 + ds;
        let mean_ssim = |sigma: f32| {
            (0..20u64)
                .map(|seed| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let px = a
                        .pixels()
                        .iter()
                        .map(|&v| {
                            let n: f32 = StandardNormal.sample(&mut rng);
                            v + sigma * n
                        })
                        .collect();
                    ssim(&a, &Image::square(16, px).unwrap()).unwrap()
                })
                .sum::<f64>()
                / 20.0
        };
        prop_assert!(mean_ssim(s2) <= mean_ssim(s1));
    }

    #[test]
    fn ground_truth_wins_every_comparison(images in proptest::collection::vec(image_strategy(16), 2..8), seed in any::<u64>()) {
        let report = pairwise_win_rate(&images, &images, 3, seed).unwrap();
        prop_assert_eq!(report.mean_win_rate, 1.0);
        prop_assert!(report.run_win_rates.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn combiner_never_loses_to_a_single_roi(
        preds in proptest::collection::vec(proptest::collection::vec(grid_strategy(3), 10), 1..4),
        targets in proptest::collection::vec(grid_strategy(3), 10),
        convex in any::<bool>(),
    ) {
        let mode = if convex { CombinerMode::Convex } else { CombinerMode::LeastSquares };
        let combiner = fit_combiner(&preds, &targets, mode).unwrap();
        let combined: Vec<PatchGrid> = (0..targets.len())
            .map(|n| combiner.combine(&preds.iter().map(|p| p[n].clone()).collect::<Vec<_>>()))
            .collect();
        let sse = |outs: &[PatchGrid], px: usize| -> f64 {
            outs.iter()
                .zip(&targets)
                .map(|(o, t)| (o.values()[px] as f64 - t.values()[px] as f64).powi(2))
                .sum()
        };
        for px in 0..9 {
            let best = preds.iter().map(|p| sse(p, px)).fold(f64::INFINITY, f64::min);
            let got = sse(&combined, px);
            prop_assert!(got <= best + 1e-5 * (1.0 + best), "pixel {}: {} > {}", px, got, best);
        }
    }

    #[test]
    fn classification_is_the_argmax_of_scaled_scores(record in 0usize..12, scale in 0.01f32..100.0) {
        let (net, data) = trained_net();
        let voxels = &data.records()[record].voxels;
        let scores = net.scores(voxels).unwrap();
        let class = net.classify(voxels).unwrap();
        prop_assert_eq!(class, argmax(&scores));
        let scaled: Vec<f32> = scores.iter().map(|s| s * scale).collect();
        prop_assert_eq!(argmax(&scaled), class);
        prop_assert_eq!(net.features(voxels).unwrap(), net.features(voxels).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn generator_output_keeps_shape_and_bounds(
        seed in any::<u64>(),
        shape in image_strategy(16),
        semantic in proptest::collection::vec(-1f32..1.0, 4),
        scale in prop::sample::select(vec![1.0f32, 50.0]),
    ) {
        let spec = GeneratorSpec { image_size: 16, base_channels: 4, semantic_dim: 4 };
        let g = Generator::new(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let loud: Vec<f32> = semantic.iter().map(|v| v * scale).collect();
        let out = g.generate(&[&shape], &[&loud]).unwrap();
        prop_assert_eq!(out.len(), 1);
        prop_assert_eq!((out[0].width(), out[0].height()), (16, 16));
        prop_assert!(out[0].pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn shape_decoder_round_trips(seed in any::<u64>()) {
        let data = small_dataset(seed);
        let config = ShapeConfig { patch_size: 4, ..ShapeConfig::default() };
        let decoder = ShapeDecoder::fit(&data, &["V1", "V2", "V3"], &config).unwrap();
        let mut buf = Vec::new();
        decoder.write_to(&mut buf).unwrap();
        prop_assert_eq!(ShapeDecoder::read_from(&mut buf.as_slice()).unwrap(), decoder);
    }

    #[test]
    fn semantic_net_round_trips(seed in any::<u64>()) {
        let data = small_dataset(seed);
        let config = SemanticConfig { hidden1: 8, hidden2: 4, epochs: 2, seed, ..SemanticConfig::default() };
        let net = train_semantic(&data, &config).unwrap();
        let mut buf = Vec::new();
        net.write_to(&mut buf).unwrap();
        prop_assert_eq!(SemanticNet::read_from(&mut buf.as_slice()).unwrap(), net);
    }
}

#[test]
fn gan_model_round_trips() {
    let data = small_dataset(5);
    let pairs: Vec<TrainingPair> = data
        .stimuli()
        .keys()
        .take(4)
        .map(|id| TrainingPair {
            shape: data.shape_mask(id).unwrap(),
            semantic: vec![0.5, -0.5],
            target: data.image(id).unwrap().clone(),
        })
        .collect();
    let config = GanConfig {
        image_size: 16,
        base_channels: 4,
        disc_channels: 4,
        semantic_dim: 2,
        batch: 2,
        epochs: 2,
        decay_start: 1,
        ..GanConfig::default()
    };
    let (model, _) = train(&pairs, &config).unwrap();
    let mut buf = Vec::new();
    model.write_to(&mut buf).unwrap();
    assert_eq!(GanModel::read_from(&mut buf.as_slice()).unwrap(), model);
}

#[test]
fn roi_ablation_is_deterministic() {
    let data = small_dataset(8);
    let config = RoiAblationConfig {
        roi_sets: vec!["LVC".into(), "HVC".into()],
        validation: 4,
        shape: ShapeConfig {
            patch_size: 4,
            ..ShapeConfig::default()
        },
        semantic: SemanticConfig {
            hidden1: 8,
            hidden2: 4,
            epochs: 2,
            ..SemanticConfig::default()
        },
        runs: 2,
        seed: 3,
    };
    assert_eq!(
        roi_ablation(&data, &config).unwrap(),
        roi_ablation(&data, &config).unwrap()
    );
}
