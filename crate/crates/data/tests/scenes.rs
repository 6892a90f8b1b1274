use aqua_data::pngio::{decode_png, encode_png};
use aqua_data::scene::{generate_scene, SceneSpec, Shape, ShapeKind, MIN_VISIBLE_FRACTION};
use proptest::prelude::*;

#[test]
fn same_seed_same_bytes() {
    let spec = SceneSpec::default();
    for seed in 0..20 {
        let a = generate_scene(&spec, seed).unwrap();
        let b = generate_scene(&spec, seed).unwrap();
        assert_eq!(encode_png(&a.image).unwrap(), encode_png(&b.image).unwrap());
        assert_eq!(a.objects, b.objects);
    }
    assert_ne!(generate_scene(&spec, 1).unwrap().image, generate_scene(&spec, 2).unwrap().image);
}

#[test]
fn zero_objects_gives_empty_annotations() {
    let spec = SceneSpec { min_objects: 0, max_objects: 0, ..SceneSpec::default() };
    let s = generate_scene(&spec, 4).unwrap();
    assert!(s.objects.is_empty());
    assert_eq!(s.image.width(), 64);
}

#[test]
fn disk_box_is_centre_plus_minus_radius() {
    let spec = SceneSpec { occlusion_prob: 0.0, ..SceneSpec::default() };
    let mut seen = 0;
    for seed in 0..200 {
        for o in generate_scene(&spec, seed).unwrap().objects {
            if o.shape.kind != ShapeKind::Disk {
                continue;
            }
            let (c, r) = ((o.shape.cx, o.shape.cy), o.shape.radius());
            let clipped = o.shape.cx - r < 0.0 || o.shape.cy - r < 0.0 || o.shape.cx + r > 64.0 || o.shape.cy + r > 64.0;
            if clipped {
                continue;
            }
            for (got, want) in o.bbox.to_array().iter().zip([c.0 - r, c.1 - r, c.0 + r, c.1 + r]) {
                assert!((got - want).abs() <= 1.0, "{got} vs {want}");
            }
            seen += 1;
        }
    }
    assert!(seen > 20);
}

#[test]
fn invalid_specs_rejected() {
    let d = SceneSpec::default();
    for bad in [
        SceneSpec { width: 2, ..d.clone() },
        SceneSpec { min_objects: 3, max_objects: 1, ..d.clone() },
        SceneSpec { min_size: 30.0, max_size: 20.0, ..d.clone() },
        SceneSpec { occlusion_prob: 1.5, ..d.clone() },
        SceneSpec { contrast: [0.0, 0.5], ..d.clone() },
    ] {
        assert!(generate_scene(&bad, 0).is_err(), "{bad:?}");
    }
}

#[test]
fn png_round_trip_is_exact_after_quantisation() {
    let s = generate_scene(&SceneSpec::default(), 9).unwrap();
    let bytes = encode_png(&s.image).unwrap();
    let back = decode_png(&bytes).unwrap();
    assert_eq!(encode_png(&back).unwrap(), bytes);
    for (a, b) in back.data().iter().zip(s.image.data()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
    }
    assert!(decode_png(&bytes[..bytes.len() / 2]).is_err());
    assert!(decode_png(b"not a png").is_err());
}

fn visible_pixels(s: &aqua_data::scene::Scene, i: usize) -> Vec<(usize, usize)> {
    let later: Vec<&Shape> = s.objects[i + 1..].iter().map(|o| &o.shape).collect();
    let mut px = Vec::new();
    for y in 0..s.image.height() {
        for x in 0..s.image.width() {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            if s.objects[i].shape.contains(fx, fy) && !later.iter().any(|o| o.contains(fx, fy)) {
                px.push((x, y));
            }
        }
    }
    px
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn boxes_are_tight_visible_extents(seed in any::<u64>(), occ in 0.0..=1.0f64) {
        let spec = SceneSpec { occlusion_prob: occ, max_objects: 5, ..SceneSpec::default() };
        let s = generate_scene(&spec, seed).unwrap();
        for (i, o) in s.objects.iter().enumerate() {
            prop_assert_eq!(o.class_id, o.shape.kind.class_id());
            let px = visible_pixels(&s, i);
            prop_assert!(!px.is_empty());
            let x1 = px.iter().map(|p| p.0).min().unwrap() as f64;
            let y1 = px.iter().map(|p| p.1).min().unwrap() as f64;
            let x2 = px.iter().map(|p| p.0).max().unwrap() as f64 + 1.0;
            let y2 = px.iter().map(|p| p.1).max().unwrap() as f64 + 1.0;
            prop_assert_eq!(o.bbox.to_array(), [x1, y1, x2, y2]);
            prop_assert!(o.bbox.x1 >= 0.0 && o.bbox.y1 >= 0.0 && o.bbox.x2 <= 64.0 && o.bbox.y2 <= 64.0);
            prop_assert!(o.visible_fraction >= MIN_VISIBLE_FRACTION - 1e-12);
        }
    }
}
