use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn registry(c: usize) -> ModalityRegistry {
    let names = &crate::registry::CANONICAL_MODALITIES[..c];
    ModalityRegistry::from_ordered(names).unwrap()
}

fn spec(family: Family, c: usize, levels: usize) -> ModelSpec {
    ModelSpec::new(
        family,
        BackboneConfig {
            levels,
            base_width: 2,
            blocks_per_level: 1,
        },
        registry(c),
    )
}

fn random_input(n: usize, c: usize, spatial: [usize; 3], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = Shape::new(n, c, spatial[0], spatial[1], spatial[2]);
    Tensor::from_vec(s, (0..s.len()).map(|_| rng.gen_range(-2.0..2.0)).collect())
}

fn all_present(n: usize, c: usize) -> Vec<Vec<bool>> {
    vec![vec![true; c]; n]
}

fn assert_attention_normalized(maps: &[Tensor<f32>]) {
    for a in maps {
        let s = a.shape();
        for n in 0..s.batch() {
            for i in 0..s.spatial_len() {
                let mut sum = 0f32;
                for c in 0..s.channels() {
                    let v = a.channel(n, c)[i];
                    assert!(v >= 0.0);
                    sum += v;
                }
                assert!((sum - 1.0).abs() <= 1e-5, "attention sums to {sum}");
            }
        }
    }
}

#[test]
fn every_family_preserves_spatial_shape() {
    for family in Family::ALL {
        let model = Model::<f32>::new(spec(family, 3, 3), 1).unwrap();
        for spatial in [[8, 8, 8], [4, 12, 8]] {
            let x = random_input(2, 3, spatial, 2);
            let p = model.predict(&x, &all_present(2, 3)).unwrap();
            assert_eq!(
                p.shape(),
                Shape::new(2, 1, spatial[0], spatial[1], spatial[2]),
                "{family}"
            );
            assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}

#[test]
fn indivisible_or_mismatched_inputs_are_rejected() {
    let model = Model::<f32>::new(spec(Family::MultiUnet, 3, 3), 1).unwrap();
    assert!(matches!(
        model.predict(&random_input(1, 3, [6, 8, 8], 0), &all_present(1, 3)),
        Err(Error::Shape(_))
    ));
    assert!(matches!(
        model.predict(&random_input(1, 2, [8, 8, 8], 0), &all_present(1, 2)),
        Err(Error::Shape(_))
    ));
}

#[test]
fn fusion_attention_is_normalized() {
    for family in [Family::LfUnet, Family::MafUnet] {
        for c in [2, 3, 7] {
            let model = Model::<f32>::new(spec(family, c, 3), c as u64).unwrap();
            let x = random_input(1, c, [4, 4, 4], 3);
            let (_, maps) = model
                .predict_with_attention(&x, &all_present(1, c))
                .unwrap();
            assert_eq!(maps.len(), model.fusion_block_count());
            assert_attention_normalized(&maps);
        }
    }
}

#[test]
fn maf_has_one_fusion_block_per_level() {
    for levels in [2, 3, 4] {
        let model = Model::<f32>::new(spec(Family::MafUnet, 2, levels), 0).unwrap();
        assert_eq!(model.fusion_block_count(), levels);
    }
    let mut unshared = spec(Family::MafUnet, 3, 3);
    unshared.shared_encoder = false;
    let model = Model::<f32>::new(unshared, 0).unwrap();
    let x = random_input(1, 3, [4, 4, 4], 1);
    let (_, maps) = model
        .predict_with_attention(&x, &all_present(1, 3))
        .unwrap();
    assert_attention_normalized(&maps);
    let shared = Model::<f32>::new(spec(Family::MafUnet, 3, 3), 0).unwrap();
    assert!(model.num_parameters() > shared.num_parameters());
}

#[test]
fn single_modality_lf_unet_attends_fully() {
    let model = Model::<f32>::new(spec(Family::LfUnet, 1, 2), 0).unwrap();
    let x = random_input(1, 1, [4, 4, 4], 1);
    let (_, maps) = model
        .predict_with_attention(&x, &all_present(1, 1))
        .unwrap();
    assert!(maps[0].data().iter().all(|&a| a == 1.0));
}

#[test]
fn absent_channel_equals_zeroed_channel() {
    let model = Model::<f32>::new(spec(Family::MultiUnet, 3, 3), 4).unwrap();
    let mut x = random_input(1, 3, [8, 8, 8], 5);
    x.channel_mut(0, 1).fill(0.0);
    let absent = model.predict(&x, &[vec![true, false, true]]).unwrap();
    let zeroed = model.predict(&x, &all_present(1, 3)).unwrap();
    assert_eq!(absent.max_abs_diff(&zeroed), 0.0);
}

#[test]
fn all_zero_input_gives_finite_output() {
    for family in Family::ALL {
        let model = Model::<f32>::new(spec(family, 3, 3), 0).unwrap();
        let x = Tensor::zeros(Shape::new(1, 3, 8, 8, 8));
        assert!(
            model.predict(&x, &all_present(1, 3)).unwrap().all_finite(),
            "{family}"
        );
    }
}

#[test]
fn forward_is_bit_stable() {
    for family in Family::ALL {
        let model = Model::<f32>::new(spec(family, 2, 3), 9).unwrap();
        let x = random_input(2, 2, [8, 8, 8], 1);
        let a = model.predict(&x, &all_present(2, 2)).unwrap();
        let b = model.predict(&x, &all_present(2, 2)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn masking_absent_modalities_changes_only_fusion() {
    let mut s = spec(Family::LfUnet, 2, 2);
    s.mask_absent = true;
    let model = Model::<f32>::new(s, 3).unwrap();
    let mut x = random_input(1, 2, [4, 4, 4], 2);
    x.channel_mut(0, 1).fill(0.0);
    let (_, maps) = model
        .predict_with_attention(&x, &[vec![true, false]])
        .unwrap();
    assert!(maps[0].channel(0, 1).iter().all(|&a| a == 0.0));
    assert!(maps[0].channel(0, 0).iter().all(|&a| a == 1.0));
}

#[test]
fn progressive_taps_every_resampling_layer_and_the_head() {
    for levels in [2, 3, 4] {
        let model = Model::<f32>::new(spec(Family::Progressive, 2, levels), 0).unwrap();
        assert_eq!(model.lateral_count(), 2 * (levels - 1) + 1);
    }
}

#[test]
fn progressive_column_one_is_frozen() {
    let model = Model::<f32>::new(spec(Family::Progressive, 2, 3), 0).unwrap();
    let x = random_input(1, 2, [8, 8, 8], 1);
    let mut g = Graph::new();
    let out = model.forward(&mut g, &x, &all_present(1, 2)).unwrap();
    let label = Tensor::full(g.shape(out.prob), 1.0);
    let loss = g.dice_bce(out.prob, label);
    let grads = g.backward(loss);
    let mut trainable = 0;
    for (id, p) in model.store.iter() {
        if p.name.starts_with("column1.") {
            assert!(!p.trainable);
            assert!(grads.param(id).is_none(), "{} received a gradient", p.name);
        } else {
            assert!(grads.param(id).is_some(), "{} has no gradient", p.name);
            trainable += 1;
        }
    }
    assert!(trainable > 0);
}

#[test]
fn zero_laterals_reduce_to_plain_second_column() {
    let model = Model::<f32>::new(spec(Family::Progressive, 2, 3), 6).unwrap();
    let mut zeroed = model.clone();
    let lateral: Vec<_> = zeroed
        .store
        .iter()
        .filter(|(_, p)| p.name.starts_with("lateral."))
        .map(|(id, _)| id)
        .collect();
    for id in lateral {
        zeroed.store.get_mut(id).value.data_mut().fill(0.0);
    }
    let mut plain_store = ParamStore::<f32>::new();
    let cfg = &model.spec.backbone;
    let plain = MultiUnet::new(
        &mut plain_store,
        &mut ChaCha8Rng::seed_from_u64(0),
        "column2.",
        cfg,
        2,
    );
    let stats = plain_store.load_overlapping(&zeroed.store, |n| Some(n.to_string()));
    assert_eq!(stats.missing, 0);
    assert_eq!(stats.partial, 2 * (cfg.levels - 1) + 1);

    let x = random_input(2, 2, [8, 8, 8], 7);
    let progressive = zeroed.predict(&x, &all_present(2, 2)).unwrap();
    let mut g = Graph::new();
    let out = plain.forward(&mut g, &plain_store, &x);
    assert!(progressive.max_abs_diff(g.value(out.prob)) <= 1e-6);
}

#[test]
fn progressive_column_one_can_take_fewer_channels() {
    let mut s = spec(Family::Progressive, 3, 2);
    s.column1_channels = Some(2);
    let model = Model::<f32>::new(s, 0).unwrap();
    let x = random_input(1, 3, [4, 4, 4], 1);
    assert!(model.predict(&x, &all_present(1, 3)).unwrap().all_finite());
    let mut bad = spec(Family::MultiUnet, 3, 2);
    bad.column1_channels = Some(2);
    assert!(Model::<f32>::new(bad, 0).is_err());
}

#[test]
fn maf_parameters_fewer_than_lf_activations() {
    let maf = Model::<f32>::new(spec(Family::MafUnet, 2, 3), 0).unwrap();
    let lf = Model::<f32>::new(spec(Family::LfUnet, 2, 3), 0).unwrap();
    let footprint = lf.activation_footprint([64, 64, 64]).unwrap();
    assert!(maf.num_parameters() < footprint);
}

#[test]
fn family_names_round_trip() {
    for f in Family::ALL {
        assert_eq!(f.as_str().parse::<Family>().unwrap(), f);
    }
    assert!("unet".parse::<Family>().is_err());
}
