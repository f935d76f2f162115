use super::*;
use crate::annotation::{AuClause, AuLevel};
use crate::synthdata::make_dataset;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_seq(rng: &mut ChaCha8Rng, frames: usize) -> Mat {
    Mat::from_shape_fn((frames, 16), |_| rng.random_range(-1.0..1.0))
}

#[test]
fn zero_frame_gives_base_layout() {
    let lm = project_landmarks(&[0.0; 16]);
    for k in 0..NUM_LANDMARKS {
        assert_eq!([lm[[k, 0]], lm[[k, 1]]], BASE_LAYOUT[k]);
    }
}

proptest! {
    #[test]
    fn projection_is_affine(a in prop::collection::vec(-2.0f64..2.0, 16), b in prop::collection::vec(-2.0f64..2.0, 16)) {
        let zero = project_landmarks(&[0.0; 16]);
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let lhs = project_landmarks(&sum) - &zero;
        let rhs = (project_landmarks(&a) - &zero) + (project_landmarks(&b) - &zero);
        for (x, y) in lhs.iter().zip(rhs.iter()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn face_lmd_is_a_metric_per_frame(
        a in prop::collection::vec(-2.0f64..2.0, 16),
        b in prop::collection::vec(-2.0f64..2.0, 16),
        c in prop::collection::vec(-2.0f64..2.0, 16),
    ) {
        let row = |v: &Vec<f64>| Mat::from_shape_vec((1, 16), v.clone()).unwrap();
        let (a, b, c) = (row(&a), row(&b), row(&c));
        let ab = lmd(&a, &b, &ALL_LANDMARKS).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - lmd(&b, &a, &ALL_LANDMARKS).unwrap()).abs() < 1e-12);
        prop_assert!(ab <= lmd(&a, &c, &ALL_LANDMARKS).unwrap() + lmd(&c, &b, &ALL_LANDMARKS).unwrap() + 1e-9);
        prop_assert_eq!(lmd(&a, &a, &ALL_LANDMARKS).unwrap(), 0.0);
    }
}

#[test]
fn mouth_channels_move_only_mouth_landmarks() {
    let zero = project_landmarks(&[0.0; 16]);
    for ch in 0..4 {
        let mut f = [0.0; 16];
        f[ch] = 1.0;
        let moved = project_landmarks(&f);
        let mut any_mouth = false;
        for k in 0..NUM_LANDMARKS {
            let changed = moved[[k, 0]] != zero[[k, 0]] || moved[[k, 1]] != zero[[k, 1]];
            if MOUTH_LANDMARKS.contains(&k) {
                any_mouth |= changed;
            } else {
                assert!(!changed, "channel {ch} moved landmark {k}");
            }
        }
        assert!(any_mouth);
    }
}

#[test]
fn uniform_translation_gives_pythagorean_distance() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = random_seq(&mut rng, 4);
    let mut b = a.clone();
    b.column_mut(12).mapv_inplace(|x| x + 2.0);
    b.column_mut(13).mapv_inplace(|x| x + 4.0 / 1.5);
    assert!((lmd(&a, &b, &ALL_LANDMARKS).unwrap() - 5.0).abs() < 1e-12);
    assert!((lmd(&a, &b, &MOUTH_LANDMARKS).unwrap() - 5.0).abs() < 1e-12);
    assert!(lmd(&a, &random_seq(&mut rng, 3), &ALL_LANDMARKS).is_err());
}

#[test]
fn lmd_matches_double_loop_oracle() {
    // Landmarks recomputed straight from the displacement table.
    let oracle_landmarks = |frame: &[f64]| {
        let mut lm = BASE_LAYOUT;
        for &(k, axis, ch, w) in DISPLACEMENTS {
            lm[k][axis] += w * frame[ch];
        }
        for k in 0..NUM_LANDMARKS {
            lm[k][0] += 1.5 * frame[12];
            lm[k][1] += 1.5 * frame[13];
        }
        lm
    };
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_seq(&mut rng, 4), random_seq(&mut rng, 4));
        for subset in [&ALL_LANDMARKS[..], &MOUTH_LANDMARKS[..]] {
            let mut total = 0.0;
            for t in 0..4 {
                let la = oracle_landmarks(&a.row(t).to_vec());
                let lb = oracle_landmarks(&b.row(t).to_vec());
                for &k in subset {
                    let dx = la[k][0] - lb[k][0];
                    let dy = la[k][1] - lb[k][1];
                    total += (dx * dx + dy * dy).sqrt();
                }
            }
            let want = total / (4 * subset.len()) as f64;
            assert!((lmd(&a, &b, subset).unwrap() - want).abs() < 1e-9);
        }
    }
}

fn image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> GrayImage {
    GrayImage::new(Mat::from_shape_fn((h, w), |_| rng.random_range(0.0..1.0))).unwrap()
}

#[test]
fn ssim_image_identity_symmetry_and_hand_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (image(&mut rng, 16, 16), image(&mut rng, 16, 16));
    assert!((ssim_image(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(ssim_image(&a, &b).unwrap(), ssim_image(&b, &a).unwrap());
    assert!(ssim_image(&a, &image(&mut rng, 8, 16)).is_err());
    assert!(GrayImage::new(Mat::from_elem((2, 2), 1.5)).is_err());

    // 4x4 inputs: the window covers the whole image, one SSIM term.
    let x = [0.1, 0.5, 0.9, 0.3, 0.2, 0.8, 0.4, 0.6, 0.7, 0.0, 1.0, 0.5, 0.3, 0.3, 0.6, 0.2];
    let y = [0.2, 0.4, 0.8, 0.3, 0.1, 0.9, 0.5, 0.5, 0.6, 0.1, 0.9, 0.4, 0.4, 0.2, 0.7, 0.3];
    let n = 16.0;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let vx = x.iter().map(|v| (v - mx) * (v - mx)).sum::<f64>() / n;
    let vy = y.iter().map(|v| (v - my) * (v - my)).sum::<f64>() / n;
    let cxy = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let want = ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    let gx = GrayImage::new(Mat::from_shape_vec((4, 4), x.to_vec()).unwrap()).unwrap();
    let gy = GrayImage::new(Mat::from_shape_vec((4, 4), y.to_vec()).unwrap()).unwrap();
    assert!((ssim_image(&gx, &gy).unwrap() - want).abs() < 1e-9);
}

#[test]
fn ssim_image_matches_brute_force_on_8x8() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (a, b) = (image(&mut rng, 8, 8), image(&mut rng, 8, 8));
    let (pa, pb) = (a.pixels(), b.pixels());
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for di in 0..7 {
                for dj in 0..7 {
                    xs.push(pa[[i + di, j + dj]]);
                    ys.push(pb[[i + di, j + dj]]);
                }
            }
            let n = 49.0;
            let mx = xs.iter().sum::<f64>() / n;
            let my = ys.iter().sum::<f64>() / n;
            let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
            let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
            let c = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
            total += ((2.0 * mx * my + c1) * (2.0 * c + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    assert!((ssim_image(&a, &b).unwrap() - total / 4.0).abs() < 1e-9);
}

/// Vertical stripes, 16 pixels wide, alternating two gray levels.
fn edge_grid() -> Mat {
    Mat::from_shape_fn((128, 128), |(_, j)| if (j / 16) % 2 == 0 { 0.2 } else { 0.8 })
}

fn gaussian_blur(img: &Mat, sigma: f64) -> Mat {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    let (h, w) = img.dim();
    let pass = |src: &Mat, horizontal: bool| {
        Mat::from_shape_fn((h, w), |(i, j)| {
            (-r..=r)
                .zip(&k)
                .map(|(d, wt)| {
                    let (ii, jj) = if horizontal {
                        (i as isize, (j as isize + d).clamp(0, w as isize - 1))
                    } else {
                        ((i as isize + d).clamp(0, h as isize - 1), j as isize)
                    };
                    wt * src[[ii as usize, jj as usize]]
                })
                .sum::<f64>()
                / s
        })
    };
    pass(&pass(img, true), false)
}

#[test]
fn cpbd_decreases_with_blur() {
    let sharp = cpbd(&GrayImage::new(edge_grid()).unwrap()).unwrap();
    assert!(sharp.edges > 0);
    let mut previous = sharp.value;
    for sigma in [1.0, 2.0, 4.0] {
        let blurred = cpbd(&GrayImage::new(gaussian_blur(&edge_grid(), sigma)).unwrap()).unwrap();
        assert!(sharp.value > blurred.value, "sigma {sigma}: {} vs {}", sharp.value, blurred.value);
        assert!(blurred.value <= previous, "sigma {sigma}: {} after {previous}", blurred.value);
        previous = blurred.value;
    }
}

#[test]
fn cpbd_edge_cases() {
    let flat = cpbd(&GrayImage::new(Mat::from_elem((64, 64), 0.4)).unwrap()).unwrap();
    assert_eq!(flat.value, 0.0);
    assert!(flat.warning.is_some());
    assert!(cpbd(&GrayImage::new(Mat::zeros((32, 64))).unwrap()).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let v = cpbd(&image(&mut rng, 64, 96)).unwrap().value;
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn rendered_frames_are_valid_images() {
    let img = render_frame(&[0.3; 16]);
    assert_eq!(img.pixels().dim(), (RENDER_SIZE, RENDER_SIZE));
    assert!(GrayImage::new(img.pixels().clone()).is_ok());
    assert!(cpbd(&img).unwrap().edges > 0);
    assert_eq!(render_frame(&[0.3; 16]), img);
}

#[test]
fn sync_confidence_bounds_and_errors() {
    let d = SyncDiscriminator::new(Default::default(), &mut ChaCha8Rng::seed_from_u64(4));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let e = random_seq(&mut rng, 20);
    let a = Mat::from_shape_fn((20, 8), |_| rng.random_range(-1.0..1.0));
    let c = sync_confidence(&e, &a, &d).unwrap();
    assert!((0.0..=1.0).contains(&c));
    assert_eq!(c, sync_confidence(&e, &a, &d).unwrap());
    assert!(sync_confidence(&random_seq(&mut rng, 3), &Mat::zeros((3, 8)), &d).is_err());
}

#[test]
fn ground_truth_satisfies_its_own_captions() {
    let corpus = make_dataset(&WorldConfig::default(), 300, 64, 9).unwrap();
    let mut total = FidelityReport::default();
    for s in &corpus.samples {
        let caption = parse_sentence(&s.sentence, &corpus.lookup).unwrap();
        let r = text_fidelity(&caption, &s.expression, &corpus.world, &corpus.lookup).unwrap();
        assert_eq!(r, text_fidelity(&caption, &s.expression, &corpus.world, &corpus.lookup).unwrap());
        total.add(r);
    }
    assert!(total.clauses > 300);
    assert_eq!(total.within_one_rate(), 1.0);

    let empty = Caption::new("A man", Some("calm".into()), vec![]);
    let r = text_fidelity(&empty, &corpus.samples[0].expression, &corpus.world, &corpus.lookup).unwrap();
    assert_eq!(r.clauses, 0);
    assert_eq!(r.within_one_rate(), 1.0);

    let bogus = Caption::new(
        "A man",
        None,
        vec![AuClause { au: "AU99".into(), level: AuLevel::Low, phrase: "x".into() }],
    );
    assert!(text_fidelity(&bogus, &corpus.samples[0].expression, &corpus.world, &corpus.lookup).is_err());
}

#[test]
fn pearson_cases() {
    assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
    assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    assert_eq!(pearson(&[1.0, 1.0], &[1.0, 2.0]), 0.0);
}
