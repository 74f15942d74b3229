use roadclip::dape::PeStrategy;
use roadclip::harness::{checkpoint, RunConfig, TrainState};
use roadclip::image::Image;
use roadclip::model::RoadClip;
use roadclip::rng::RngStreams;
use roadclip::synthbench::{render_sample, sample_spec_in_class, DamageClass, Sample};
use roadclip::Error;

fn samples(n: usize) -> Vec<Sample> {
    let streams = RngStreams::new(5);
    (0..n)
        .map(|i| {
            let class = DamageClass::ALL[i % DamageClass::ALL.len()];
            let spec = sample_spec_in_class(&mut streams.indexed("spec", &[i as u64]), class, 64);
            render_sample(&spec, 64, i as u64).unwrap()
        })
        .collect()
}

fn model(pe: PeStrategy) -> RoadClip<f64> {
    let cfg = RunConfig::default();
    RoadClip::new(
        roadclip::model::ModelConfig {
            pe,
            ..cfg.model_config()
        },
        cfg.seed,
    )
    .unwrap()
}

/// Swaps 8×8 blocks along a fixed permutation of the 64 grid cells.
fn shuffle_blocks(img: &Image) -> Image {
    let mut out = img.clone();
    for cell in 0..64 {
        let src = (cell * 37 + 11) % 64;
        for y in 0..8 {
            for x in 0..8 {
                let v = img.get((src % 8) * 8 + x, (src / 8) * 8 + y);
                out.set((cell % 8) * 8 + x, (cell / 8) * 8 + y, v);
            }
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn embeddings_are_unit_norm() {
    let m = model(PeStrategy::Dape);
    let s = samples(3);
    let imgs: Vec<&Image> = s.iter().map(|s| &s.image).collect();
    let caps: Vec<&str> = s.iter().map(|s| s.caption.as_str()).collect();
    let zi = m.embed_images(&imgs).unwrap();
    let zt = m.embed_texts(&caps).unwrap();
    for z in [&zi, &zt] {
        assert_eq!(z.shape(), &[3, 64]);
        for r in 0..3 {
            let n: f64 = z.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }
    let (_, patches) = m.encode_image(&s[0].image).unwrap();
    assert_eq!(patches.shape(), &[64, 64]);
}

#[test]
fn without_positions_the_image_encoder_ignores_patch_order() {
    let s = samples(1);
    let shuffled = shuffle_blocks(&s[0].image);
    let none = model(PeStrategy::None);
    let a = none.encode_image(&s[0].image).unwrap().0;
    let b = none.encode_image(&shuffled).unwrap().0;
    assert!(max_diff(&a, &b) < 1e-12);
    for pe in [PeStrategy::SinusoidalAbsolute, PeStrategy::LearnableAbsolute, PeStrategy::Dape] {
        let m = model(pe);
        let a = m.encode_image(&s[0].image).unwrap().0;
        let b = m.encode_image(&shuffled).unwrap().0;
        assert!(max_diff(&a, &b) > 1e-6, "{pe:?} is order-blind");
    }
}

#[test]
fn encoding_is_deterministic_and_batch_independent() {
    let m = model(PeStrategy::Relative);
    let s = samples(4);
    let imgs: Vec<&Image> = s.iter().map(|s| &s.image).collect();
    let batch = m.embed_images(&imgs).unwrap();
    let again = m.embed_images(&imgs).unwrap();
    assert_eq!(batch.data(), again.data());
    let single = m.encode_image(&s[2].image).unwrap().0;
    assert!(max_diff(batch.row(2), &single) < 1e-12);
}

#[test]
fn single_precision_tracks_double() {
    let m = model(PeStrategy::Dape);
    let m32: RoadClip<f32> = m.cast();
    let s = samples(2);
    let a = m.encode_text(&s[1].caption).unwrap();
    let b: Vec<f64> = m32.encode_text(&s[1].caption).unwrap().iter().map(|&x| x as f64).collect();
    assert!(max_diff(&a, &b) < 1e-4);
    let a = m.encode_image(&s[1].image).unwrap().0;
    let b: Vec<f64> = m32.encode_image(&s[1].image).unwrap().0.iter().map(|&x| x as f64).collect();
    assert!(max_diff(&a, &b) < 1e-4);
}

#[test]
fn out_of_vocabulary_caption_still_encodes() {
    let m = model(PeStrategy::Dape);
    let z = m.encode_text("a zebra crossing").unwrap();
    assert_eq!(z.len(), 64);
    assert!(m.encode_text("").is_err());
}

#[test]
fn wrong_image_size_is_rejected() {
    let m = model(PeStrategy::Dape);
    let img = Image::filled(32, 32, 0.5);
    let err = m.encode_image(&img).unwrap_err();
    assert!(matches!(err, Error::Invalid(_)), "{err:?}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn checkpoint_bytes_survive_a_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_toml("", &["pe=\"relative\"".into(), "seed=9".into()]).unwrap();
    let mut state = TrainState::init(cfg).unwrap();
    state.epoch = 3;
    state.adam.step = 17;
    let path = dir.path().join("c.bin");
    checkpoint::save(&state, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(checkpoint::to_bytes(&back), checkpoint::to_bytes(&state));
    assert_eq!(back.config, state.config);
    assert_eq!(back.epoch, 3);
    assert_eq!(back.adam, state.adam);
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let state = TrainState::init(RunConfig::default()).unwrap();
    let bytes = checkpoint::to_bytes(&state);
    let path = dir.path().join("c.bin");
    std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    let err = checkpoint::load(&path).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
}
