use itermask::data_io::{generate_phantom, PhantomSpec, Slice};
use itermask::reconstruction::{train_init, train_main, ModelKind, ReconstructionModel, TrainConfig};
use itermask::seed::rng_for;
use itermask::spatial_masking::{apply_mask, sample_training_mask, MaskSamplerConfig};
use itermask::{Plane, SpatialMask};

fn phantoms(n: usize, seed0: u64) -> Vec<Slice<f32>> {
    let spec = PhantomSpec {
        height: 32,
        width: 32,
        lesion_radius: (2.0, 4.0),
        ..PhantomSpec::default()
    };
    (0..n)
        .map(|i| generate_phantom::<f32>(&spec.with_seed(seed0 + i as u64)).unwrap().slice)
        .collect()
}

fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        learning_rate: 2e-3,
        base_channels: 4,
        depth: 3,
        radius: 2.0,
        sampler: MaskSamplerConfig {
            patch_side_lengths: vec![2, 4],
            patch_count: 20,
            ..MaskSamplerConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn masked_error(recon: &Plane<f32>, orig: &Plane<f32>, mask: &SpatialMask) -> f64 {
    let (r, o) = (recon.as_slice(), orig.as_slice());
    mask.indices().map(|i| ((r[i] - o[i]) as f64).powi(2)).sum::<f64>() / mask.area().max(1) as f64
}

#[test]
fn main_training_beats_untrained_model() {
    let data = phantoms(200, 0);
    let cfg = small_config(30);
    let (model, log) = train_main(&data, &cfg).unwrap();
    let val = log.losses("validation");
    assert_eq!(val.len(), 31);
    assert!(val.last().unwrap() < &val[0], "validation {val:?}");

    let untrained = ReconstructionModel::<f32>::untrained(ModelKind::Main, &cfg).unwrap();
    let held_out = phantoms(10, 5_000);
    let (mut trained_err, mut untrained_err) = (0.0, 0.0);
    for (i, s) in held_out.iter().enumerate() {
        let mut rng = rng_for(99, &[i as u64]);
        // about 30% of the brain
        let mask = sample_training_mask(&s.brain_mask, &cfg.sampler, &mut rng).unwrap();
        let masked = apply_mask(&s.pixels, &mask, &mut rng).unwrap();
        let guide = model.guide(&s.pixels).unwrap();
        trained_err += masked_error(&model.reconstruct(&masked, &guide).unwrap(), &s.pixels, &mask);
        untrained_err += masked_error(&untrained.reconstruct(&masked, &guide).unwrap(), &s.pixels, &mask);
    }
    assert!(trained_err < untrained_err, "{trained_err} vs {untrained_err}");
}

#[test]
fn init_training_restores_low_frequencies() {
    let data = phantoms(100, 100);
    let (model, log) = train_init(&data, &small_config(6)).unwrap();
    let val = log.losses("validation");
    // moving average of width 2 over the first five epochs
    let avg: Vec<f64> = val[..6].windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
    assert!(avg.windows(2).all(|w| w[1] < w[0]), "validation {val:?}");
    let zero = Plane::<f32>::zeros(32, 32);
    assert!(model.reconstruct_init(&zero).unwrap().is_finite());
}

#[test]
fn single_slice_overfit() {
    let data = phantoms(1, 7);
    let s = &data[0];
    let cfg = TrainConfig {
        epochs: 500,
        batch_size: 1,
        learning_rate: 3e-3,
        base_channels: 4,
        depth: 2,
        radius: 2.0,
        ..TrainConfig::default()
    };
    let untrained = ReconstructionModel::<f32>::untrained(ModelKind::Init, &cfg).unwrap();
    let guide = untrained.guide(&s.pixels).unwrap();
    let before = masked_error(&untrained.reconstruct_init(&guide).unwrap(), &s.pixels, &s.brain_mask);
    let (model, _) = train_init(&data, &cfg).unwrap();
    let after = masked_error(&model.reconstruct_init(&guide).unwrap(), &s.pixels, &s.brain_mask);
    assert!(after < 0.1 * before, "{after} vs {before}");
}

#[test]
fn identical_seeds_give_identical_training() {
    let data = phantoms(24, 200);
    let cfg = small_config(2);
    let (a, la) = train_main(&data, &cfg).unwrap();
    let (b, lb) = train_main(&data, &cfg).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a.params(), b.params());
    let (c, _) = train_main(&data, &TrainConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.params(), c.params());
}

#[test]
fn empty_mask_is_plain_autoencoding() {
    let data = phantoms(1, 300);
    let s = &data[0];
    let model = ReconstructionModel::<f32>::untrained(ModelKind::Main, &small_config(1)).unwrap();
    let empty = SpatialMask::empty(32, 32);
    let masked = apply_mask(&s.pixels, &empty, &mut rng_for(0, &[])).unwrap();
    assert_eq!(masked, s.pixels);
    let guide = model.guide(&s.pixels).unwrap();
    assert_eq!(
        model.reconstruct(&masked, &guide).unwrap(),
        model.reconstruct(&s.pixels, &guide).unwrap()
    );
}
