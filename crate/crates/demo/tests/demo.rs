use roadclip_demo::{class_names, sample, PATCH, SIZE};

#[test]
fn every_class_renders_with_a_caption_and_mask() {
    for (k, name) in class_names().iter().enumerate() {
        let s = sample(k, 7).unwrap();
        let caption = s.caption();
        let subject = if k == 8 { "mixed damage" } else { name.as_str() };
        assert!(caption.contains(subject), "{caption}");
        let plain = s.rgba(false);
        let tinted = s.rgba(true);
        assert_eq!(plain.len(), SIZE * SIZE * 4);
        assert_ne!(plain, tinted);
    }
}

#[test]
fn unknown_class_is_an_error() {
    assert!(sample(10, 0).is_err());
}

#[test]
fn orientation_field_covers_the_grid() {
    let s = sample(1, 3).unwrap();
    let th = s.orientations();
    assert_eq!(th.len(), (SIZE / PATCH).pow(2));
    assert!(th.iter().all(|t| (0.0..std::f64::consts::PI).contains(t)));
}

#[test]
fn zero_perturbation_preview_matches_the_image() {
    let s = sample(3, 5).unwrap();
    assert_eq!(s.perturbed(0, 0, 0.0), s.rgba(false));
    assert_ne!(s.perturbed(2, -1, 4.0), s.rgba(false));
}

#[test]
fn rendering_is_deterministic() {
    assert_eq!(sample(2, 11).unwrap().rgba(true), sample(2, 11).unwrap().rgba(true));
}
