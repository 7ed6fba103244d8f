mod common;

use mmcnn_core::data::augment::{augment, augment_with, rotate, AugmentParams};
use mmcnn_core::data::preprocess::{clahe, gray_to_rgb, median_filter, normalize, ClaheParams};
use mmcnn_core::data::Image;
use mmcnn_core::rng;
use proptest::prelude::*;

/// Plain clipped histogram equalization over the whole image, written
/// directly from the textbook definition.
fn reference_equalize(values: &[f32], clip: f64) -> Vec<f32> {
    let bins = 256usize;
    let bin = |v: f32| ((v.clamp(0.0, 1.0) * 255.0).round() as usize).min(255);
    let mut hist = vec![0usize; bins];
    for &v in values {
        hist[bin(v)] += 1;
    }
    let n = values.len();
    if clip > 0.0 {
        let limit = ((clip * n as f64 / bins as f64) as usize).max(1);
        let excess: usize = hist.iter().map(|&h| h.saturating_sub(limit)).sum();
        for h in hist.iter_mut() {
            *h = (*h).min(limit) + excess / bins;
        }
        let residual = excess % bins;
        let step = bins.checked_div(residual).unwrap_or(1).max(1);
        let mut given = 0;
        let mut i = 0;
        while given < residual && i < bins {
            hist[i] += 1;
            given += 1;
            i += step;
        }
    }
    let mut cdf = vec![0usize; bins];
    let mut acc = 0;
    for i in 0..bins {
        acc += hist[i];
        cdf[i] = acc;
    }
    values
        .iter()
        .map(|&v| ((cdf[bin(v)] as f64 * 255.0 / n as f64).round().min(255.0) / 255.0) as f32)
        .collect()
}

fn two_level() -> Image {
    let data = (0..64 * 64)
        .map(|i| if (i % 64) < 24 { 0.25 } else { 0.75 })
        .collect();
    Image::new(1, 64, 64, data).unwrap()
}

#[test]
fn single_tile_clahe_matches_reference_equalization() {
    let img = two_level();
    for clip in [0.0, 2.0, 40.0] {
        let params = ClaheParams {
            tiles_x: 1,
            tiles_y: 1,
            clip_limit: clip,
        };
        let got = clahe(&img, &params).unwrap();
        let want = reference_equalize(&img.data, clip);
        assert_eq!(got.data, want, "clip {clip}");
    }
}

#[test]
fn clahe_constant_image_stays_constant() {
    let img = Image::filled(3, 32, 32, 0.4);
    let out = clahe(&img, &ClaheParams::default()).unwrap();
    let first = out.data[0];
    assert!(out.data.iter().all(|&v| v == first));
}

#[test]
fn median_hand_neighbourhood() {
    let img = Image::new(1, 3, 3, (1..=9).map(|v| v as f32).collect()).unwrap();
    assert_eq!(median_filter(&img, 3).unwrap().get(0, 1, 1), 5.0);
}

#[test]
fn gray_to_rgb_single_pixel() {
    let img = Image::new(1, 1, 1, vec![0.7]).unwrap();
    let rgb = gray_to_rgb(&img).unwrap();
    assert_eq!(rgb.data, vec![0.7, 0.7, 0.7]);
    assert_eq!(rgb.to_gray().data, img.data);
}

#[test]
fn normalize_endpoints() {
    let img = Image::new(1, 1, 3, vec![0.5, 1.0, 0.0]).unwrap();
    assert_eq!(normalize(&img).unwrap().data, vec![0.0, 1.0, -1.0]);
}

fn blob(size: usize) -> Image {
    let c = (size as f32 - 1.0) / 2.0;
    let s = size as f32 / 6.0;
    let data = (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f32 - c, (i / size) as f32 - c);
            0.1 + 0.8 * (-(x * x + y * y) / (2.0 * s * s)).exp()
        })
        .collect();
    Image::new(1, size, size, data).unwrap()
}

#[test]
fn opposite_rotations_nearly_cancel() {
    let img = blob(64);
    for theta in [5.0, 10.0, 15.0] {
        let back = rotate(&rotate(&img, theta), -theta);
        let mad = img
            .data
            .iter()
            .zip(&back.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f32>()
            / img.data.len() as f32;
        assert!(mad < 0.02, "theta {theta}: mean abs diff {mad}");
    }
}

#[test]
fn augment_is_reproducible_from_its_stream() {
    let img = gray_to_rgb(&blob(32)).unwrap();
    let a = augment(&img, &mut rng::stream(8, "aug", 3));
    let b = augment(&img, &mut rng::stream(8, "aug", 3));
    assert_eq!(a, b);
    assert_eq!(augment_with(&img, &AugmentParams::identity()), img);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn clahe_output_in_range(seed in 0u64..10_000, tiles in 1usize..9, clip in 0.0f64..4.0) {
        let mut r = rng::stream(seed, "p", 0);
        let data = (0..40 * 40).map(|_| rand::Rng::random::<f32>(&mut r)).collect();
        let img = Image::new(1, 40, 40, data).unwrap();
        let out = clahe(&img, &ClaheParams { tiles_x: tiles, tiles_y: tiles, clip_limit: clip }).unwrap();
        prop_assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn gray_to_rgb_channels_equal(v in proptest::collection::vec(0.0f32..=1.0, 12)) {
        let img = Image::new(1, 3, 4, v).unwrap();
        let rgb = gray_to_rgb(&img).unwrap();
        prop_assert_eq!(rgb.plane(0), rgb.plane(1));
        prop_assert_eq!(rgb.plane(1), rgb.plane(2));
    }

    #[test]
    fn augment_stays_in_unit_range(seed in 0u64..10_000) {
        let img = gray_to_rgb(&blob(24)).unwrap();
        let out = augment(&img, &mut rng::stream(seed, "aug", 0));
        prop_assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
