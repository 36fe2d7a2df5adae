//! End-to-end watermark behavior: embedding strength, the permutation attack
//! that destroys extraction without touching the task, and the
//! re-synchronization counter-attack that brings the mark back.

use nwrs_core::attack::{add_gaussian_noise, magnitude_prune, permute_layer, quantize};
use nwrs_core::model::{
    error_rate, init_weights, reference_conv_layers, reference_dataset_spec, reference_input_shape,
    reference_mlp_layers,
};
use nwrs_core::resync::{resync_model, MatchMethod};
use nwrs_core::rng::{streams, CounterRng};
use nwrs_core::tensor::Permutation;
use nwrs_core::trainer::{fine_tune, train, TrainConfig};
use nwrs_core::watermark::{embed, extract, pearson, WatermarkRecord};
use nwrs_core::{Dataset, ModelBundle};

fn reference_setup(seed: u64, conv: bool) -> (ModelBundle, Dataset, TrainConfig) {
    let layers = if conv {
        reference_conv_layers()
    } else {
        reference_mlp_layers()
    };
    let init = init_weights(&layers, &reference_input_shape(conv), seed).unwrap();
    let data = reference_dataset_spec(seed, conv).realize().unwrap();
    (init, data, TrainConfig::reference(seed))
}

/// Derangements only: at a width of 8 channels a fixed point would keep a
/// whole block of the watermark feature aligned.
fn derangement(n: usize, rng: &mut CounterRng) -> Permutation {
    loop {
        let cand = Permutation::random(n, rng);
        if (0..n).all(|i| cand.apply(i) != i) {
            return cand;
        }
    }
}

#[test]
fn zero_lambda_embedding_is_plain_training() {
    let (init, data, cfg) = reference_setup(40, false);
    let record = WatermarkRecord::generate(&init, 2, 64, 1, 2, 0.0).unwrap();
    let plain = train(&init, &data, &cfg).unwrap();
    let marked = embed(&init, &data, &cfg, &record).unwrap();
    for (a, b) in plain.model.weights.iter().zip(&marked.model.weights) {
        assert_eq!(a, b);
    }
}

#[test]
fn mlp_golden_embedding() {
    // a 32-dim feature carries 16 bits comfortably at the default strength
    let (init, data, cfg) = reference_setup(0, false);
    let record = WatermarkRecord::generate(&init, 2, 16, 7, 8, 0.01).unwrap();
    let plain = train(&init, &data, &cfg).unwrap();
    let marked = embed(&init, &data, &cfg, &record).unwrap();
    let extraction = extract(&marked.model, &record).unwrap();
    assert_eq!(extraction.ber, 0.0);
    assert!(extraction.pearson > 0.8, "pearson {}", extraction.pearson);
    let base_err = error_rate(&plain.model, &data).unwrap();
    let marked_err = error_rate(&marked.model, &data).unwrap();
    assert!(
        (marked_err - base_err).abs() <= 1.0,
        "error moved from {base_err} to {marked_err}"
    );
    assert_eq!(marked.model.metadata.watermark.unwrap().bit_count, 16);
}

#[test]
fn conv_golden_embedding_carries_64_bits() {
    let (init, data, cfg) = reference_setup(0, true);
    let record = WatermarkRecord::generate(&init, 2, 64, 1, 2, 0.01).unwrap();
    let marked = embed(&init, &data, &cfg, &record).unwrap();
    let extraction = extract(&marked.model, &record).unwrap();
    assert_eq!(extraction.ber, 0.0);
    assert!(extraction.pearson > 0.8, "pearson {}", extraction.pearson);
}

#[test]
fn different_projection_seeds_are_uncorrelated() {
    let (init, data, cfg) = reference_setup(1, true);
    let record = WatermarkRecord::generate(&init, 2, 64, 1, 2, 0.01).unwrap();
    let marked = embed(&init, &data, &cfg, &record).unwrap();
    let other = WatermarkRecord {
        projection_seed: 999,
        ..record.clone()
    };
    let a = extract(&marked.model, &record).unwrap();
    let b = extract(&marked.model, &other).unwrap();
    let rho = pearson(&a.projection, &b.projection);
    assert!(rho.abs() < 0.3, "projections correlate: {rho}");
    assert!(
        b.pearson.abs() < 0.3,
        "foreign mark reads as present: {}",
        b.pearson
    );
}

#[test]
fn permutation_destroys_and_resync_restores() {
    let (init, data, cfg) = reference_setup(2, true);
    let record = WatermarkRecord::generate(&init, 2, 64, 1, 2, 0.05).unwrap();
    let marked = embed(&init, &data, &cfg, &record).unwrap();
    let embedded = extract(&marked.model, &record).unwrap();
    assert_eq!(embedded.ber, 0.0);

    let mut rng = CounterRng::new(11, streams::PERMUTE);
    let pi = derangement(8, &mut rng);
    let permuted = permute_layer(&marked.model, 1, &pi).unwrap();
    // the attack leaves the task untouched while breaking extraction
    assert_eq!(
        error_rate(&permuted, &data).unwrap(),
        error_rate(&marked.model, &data).unwrap()
    );
    let broken = extract(&permuted, &record).unwrap();
    assert!(broken.pearson.abs() < 0.3, "pearson {}", broken.pearson);

    let (fixed, report) = resync_model(
        &marked.model,
        &permuted,
        MatchMethod::GreedyGlobal,
        &[(1, pi)],
    )
    .unwrap();
    assert_eq!(report.overall_psi, Some(100.0));
    let restored = extract(&fixed, &record).unwrap();
    assert_eq!(restored.ber, 0.0);
    assert_eq!(restored.pearson, embedded.pearson);
}

#[test]
fn watermark_survives_mild_perturbations_after_resync() {
    let (init, data, cfg) = reference_setup(3, true);
    let record = WatermarkRecord::generate(&init, 2, 64, 1, 2, 0.05).unwrap();
    let marked = embed(&init, &data, &cfg, &record).unwrap();
    let mut rng = CounterRng::new(12, streams::PERMUTE);
    let pi = derangement(8, &mut rng);
    let permuted = permute_layer(&marked.model, 1, &pi).unwrap();

    let attacked: Vec<(&str, ModelBundle)> = vec![
        (
            "noise 0.5",
            add_gaussian_noise(&permuted, 1, 0.5, 21).unwrap(),
        ),
        ("quantize 8", quantize(&permuted, 1, 8).unwrap()),
        ("prune 0.5", magnitude_prune(&permuted, 1, 0.5).unwrap()),
        (
            "fine-tune 10%",
            fine_tune(&permuted, &data, 10.0, &cfg).unwrap().model,
        ),
    ];
    for (name, suspect) in attacked {
        let (fixed, report) = resync_model(
            &marked.model,
            &suspect,
            MatchMethod::GreedyGlobal,
            &[(1, pi.clone())],
        )
        .unwrap();
        assert_eq!(report.overall_psi, Some(100.0), "{name}");
        let extraction = extract(&fixed, &record).unwrap();
        assert_eq!(extraction.ber, 0.0, "{name}");
    }
}
