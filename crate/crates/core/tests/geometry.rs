//! Image and landmark geometry must stay in lockstep under every transform.

use dcr_core::data::{
    augment_dataset, crop_and_resize, mirror_sample, rotate_sample, AugmentConfig, BBox, GrayImage, JitterRanges,
    Sample,
};
use dcr_core::{LandmarkShape, Point};
use proptest::prelude::*;

/// Blank image with a single bright pixel and a landmark on it.
fn marker(w: usize, h: usize, x: usize, y: usize, bbox: BBox) -> Sample {
    let mut image = GrayImage::new(w, h);
    image.set(x, y, 1.0);
    Sample {
        image,
        shape: LandmarkShape::from_pairs(&[(x as f64, y as f64)]),
        bbox,
    }
}

fn brightest(img: &GrayImage) -> Point {
    let (mut best, mut at) = (f64::NEG_INFINITY, Point::new(0.0, 0.0));
    for y in 0..img.height() {
        for x in 0..img.width() {
            if img.get(x, y) > best {
                best = img.get(x, y);
                at = Point::new(x as f64, y as f64);
            }
        }
    }
    at
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn crop_moves_marker_with_landmark(
        w in 20usize..50, h in 20usize..50, fx in 0.3f64..0.7, fy in 0.3f64..0.7,
        side in 12.0f64..20.0, scale in 0.7f64..1.5,
    ) {
        let (x, y) = ((w as f64 * fx) as usize, (h as f64 * fy) as usize);
        let bbox = BBox::new(x as f64 - side / 2.0, y as f64 - side / 2.0, side, side);
        let s = marker(w, h, x, y, bbox);
        let size = ((side * 1.4 * scale) as usize).max(4);
        let c = crop_and_resize(&s, size, 0.2).unwrap();
        prop_assert_eq!((c.sample.image.width(), c.sample.image.height()), (size, size));
        let lm = c.sample.shape.points()[0];
        prop_assert!(brightest(&c.sample.image).distance(&lm) <= 1.0);
    }

    #[test]
    fn rotation_moves_marker_with_landmark(
        x in 8usize..32, y in 8usize..32, angle in -30.0f64..30.0,
    ) {
        let s = marker(40, 40, x, y, BBox::new(10.0, 12.0, 18.0, 16.0));
        let r = rotate_sample(&s, angle).unwrap();
        let lm = r.shape.points()[0];
        prop_assume!(lm.x >= 0.0 && lm.y >= 0.0 && lm.x <= 39.0 && lm.y <= 39.0);
        prop_assert!(brightest(&r.image).distance(&lm) <= 1.0);
    }

    #[test]
    fn mirror_moves_marker_exactly(x in 0usize..30, y in 0usize..20) {
        let s = marker(30, 20, x, y, BBox::new(2.0, 2.0, 10.0, 10.0));
        let m = mirror_sample(&s, &[0]).unwrap();
        prop_assert_eq!(brightest(&m.image), m.shape.points()[0]);
    }

    #[test]
    fn crop_output_is_always_t_by_t(
        w in 1usize..40, h in 1usize..40, left in -10.0f64..30.0, top in -10.0f64..30.0,
        bw in 1.0f64..30.0, bh in 1.0f64..30.0, t in 1usize..48,
    ) {
        let s = Sample { image: GrayImage::new(w, h), shape: LandmarkShape::zeros(2), bbox: BBox::new(left, top, bw, bh) };
        if let Ok(c) = crop_and_resize(&s, t, 0.2) {
            prop_assert_eq!((c.sample.image.width(), c.sample.image.height()), (t, t));
        }
    }

    #[test]
    fn multiplicity_formula(n_angles in 0usize..5, jitters in 1usize..4, mirror: bool, n in 1usize..4) {
        let mut angles: Vec<f64> = (1..=n_angles).map(|k| 7.0 * k as f64).collect();
        angles.insert(n_angles / 2, 0.0);
        let cfg = AugmentConfig {
            angles,
            jitter_count: jitters,
            jitter: JitterRanges::default(),
            mirror,
            mirror_permutation: vec![1, 0],
        };
        let samples: Vec<Sample> = (0..n)
            .map(|i| Sample {
                image: GrayImage::new(6, 5),
                shape: LandmarkShape::from_pairs(&[(1.0, 2.0), (4.0, 2.0 + i as f64)]),
                bbox: BBox::new(1.0, 1.0, 4.0, 3.0),
            })
            .collect();
        let out = augment_dataset(&samples, &cfg, 1).unwrap();
        prop_assert_eq!(out.len(), n * (n_angles + 1) * jitters * if mirror { 2 } else { 1 });
        prop_assert_eq!(out.len(), n * cfg.multiplicity());
    }
}

#[test]
fn jitter_is_reproducible_per_seed() {
    let s = marker(30, 30, 15, 15, BBox::new(5.0, 5.0, 20.0, 20.0));
    let cfg = AugmentConfig {
        mirror_permutation: vec![0],
        ..AugmentConfig::default()
    };
    let a = augment_dataset(&[s.clone()], &cfg, 42).unwrap();
    let b = augment_dataset(&[s.clone()], &cfg, 42).unwrap();
    let c = augment_dataset(&[s], &cfg, 43).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.iter().map(|x| x.bbox).collect::<Vec<_>>(), c.iter().map(|x| x.bbox).collect::<Vec<_>>());
}
