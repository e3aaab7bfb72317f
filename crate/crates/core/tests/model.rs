//! End-to-end score gradients and the zero-patch identities of the four
//! insertion modes.

use patchfed_core::gradcheck::grad_check;
use patchfed_core::model::backbone::{score, score_value};
use patchfed_core::model::{
    init_parameters, partition_parameters, patch_parameter_count, InsertionMode, Model,
    ModelConfig, PatchKind,
};
use patchfed_core::tape::Tape;
use patchfed_core::ParameterSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const VOCAB: usize = 24;

fn combos() -> Vec<ModelConfig> {
    let mut out = vec![ModelConfig::toy(VOCAB)];
    for mode in InsertionMode::PATCHED {
        for kind in [PatchKind::LowRank, PatchKind::Pal] {
            out.push(ModelConfig::toy(VOCAB).with_patches(mode, kind));
        }
    }
    out
}

/// Parameters with every tensor redrawn at a scale where each path through
/// the network carries a visible gradient (the default init zeroes V^D).
fn lively_params(config: &ModelConfig, seed: u64) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = init_parameters(config, &mut rng.clone(), &mut rng.clone());
    let normal = Normal::new(0.0, 0.4).unwrap();
    for id in 0..p.len() {
        let name = p.entry(id).name.clone();
        let t = p.tensor_mut(id);
        for v in t.data_mut() {
            *v = if name.ends_with("norm.gain") {
                1.0 + normal.sample(&mut rng) * 0.25
            } else {
                normal.sample(&mut rng)
            };
        }
    }
    p
}

fn random_tokens(rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(4..VOCAB)).collect()
}

#[test]
fn score_gradient_matches_differences_for_every_combination() {
    for (i, config) in combos().into_iter().enumerate() {
        let params = lively_params(&config, 40 + i as u64);
        let model = Model::new(&config, &params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let q = random_tokens(&mut rng, 3);
        let (a_pos, a_neg) = (random_tokens(&mut rng, 4), random_tokens(&mut rng, 5));
        let err = grad_check(&params, 1e-3, |tape: &mut Tape| {
            let pos = score(tape, &model, &q, &a_pos)?.score;
            let neg = score(tape, &model, &q, &a_neg)?.score;
            let neg = tape.scale(neg, -0.5);
            tape.add(pos, neg)
        })
        .unwrap();
        assert!(
            err < 1e-4,
            "{} / {}: relative error {err}",
            config.insertion_mode.as_str(),
            config.patch_kind.as_str()
        );
    }
}

fn zero_patch_scores(
    config: &ModelConfig,
    seed: u64,
    inputs: &[(Vec<usize>, Vec<usize>)],
) -> Vec<f64> {
    // Backbone draws come from one stream and patch draws from another, so
    // every mode shares the same backbone for the same seed.
    let mut backbone = ChaCha8Rng::seed_from_u64(seed);
    let mut patch = ChaCha8Rng::seed_from_u64(seed + 1);
    let params = init_parameters(config, &mut backbone, &mut patch);
    for name in params.names().filter(|n| n.starts_with("patch.")) {
        if name.ends_with(".up") {
            assert!(params.get(name).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }
    let model = Model::new(config, &params).unwrap();
    inputs
        .iter()
        .map(|(q, a)| score_value(&model, &params, q, a).unwrap().0)
        .collect()
}

#[test]
fn additive_modes_with_zero_up_projection_reproduce_the_backbone() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs: Vec<_> = (0..100)
        .map(|_| {
            let ql = rng.gen_range(1..5);
            let al = rng.gen_range(1..10);
            (random_tokens(&mut rng, ql), random_tokens(&mut rng, al))
        })
        .collect();
    let plain = zero_patch_scores(&ModelConfig::toy(VOCAB), 11, &inputs);
    for kind in [PatchKind::LowRank, PatchKind::Pal] {
        for mode in InsertionMode::PATCHED {
            let config = ModelConfig::toy(VOCAB).with_patches(mode, kind);
            let got = zero_patch_scores(&config, 11, &inputs);
            let identical = got
                .iter()
                .zip(&plain)
                .all(|(a, b)| a.to_bits() == b.to_bits());
            match mode {
                InsertionMode::Outer | InsertionMode::Horizontal => {
                    assert!(identical, "{} / {} differs", mode.as_str(), kind.as_str())
                }
                _ => assert!(
                    !identical,
                    "{} / {} unexpectedly equal",
                    mode.as_str(),
                    kind.as_str()
                ),
            }
        }
    }
}

#[test]
fn partition_splits_patches_and_unshared_layers_off_as_private() {
    for config in combos() {
        for shared in 0..=config.n_layers {
            let mut c = config.clone();
            c.n_shared_layers = shared;
            let (public, private) = partition_parameters(&c);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let params = init_parameters(&c, &mut rng.clone(), &mut rng);
            assert_eq!(public.len() + private.len(), params.len());
            for name in &private {
                let layer = name
                    .strip_prefix("layer.")
                    .and_then(|s| s.split('.').next())
                    .and_then(|i| i.parse::<usize>().ok());
                assert!(
                    name.starts_with("patch.") || layer.is_some_and(|i| i >= shared),
                    "{name} private with {shared} shared layers"
                );
            }
            for name in &public {
                assert!(!name.starts_with("patch."), "{name} is public");
            }
            let private_patch: usize = private
                .iter()
                .filter(|n| n.starts_with("patch."))
                .map(|n| params.get(n).unwrap().len())
                .sum();
            assert_eq!(private_patch, patch_parameter_count(&c));
        }
    }
}
