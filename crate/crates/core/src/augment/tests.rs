use super::*;
use ndarray::Array3;
use proptest::prelude::*;

fn ramp(c: usize, h: usize, w: usize) -> Array3<f32> {
    Array3::from_shape_fn((c, h, w), |(a, i, j)| ((a * 31 + i * 7 + j * 3) % 29) as f32 / 28.0)
}

fn batch_of(img: &Array3<f32>, n: usize) -> ImageBatch {
    let mut a = Array4::zeros((n, img.dim().0, img.dim().1, img.dim().2));
    for mut d in a.axis_iter_mut(Axis(0)) {
        d.assign(img);
    }
    ImageBatch::new(a).unwrap()
}

#[test]
fn identity_op_is_identity() {
    let b = batch_of(&ramp(3, 8, 8), 3);
    assert_eq!(apply(&AugmentOp::identity(), &b, &RngState::new(0)), b);
}

#[test]
fn cutout_zeroes_a_clipped_square() {
    let ones = Array3::<f32>::ones((3, 32, 32));
    for cy in 0..32 {
        for cx in [0usize, 5, 16, 31] {
            let out = image::cutout(ones.view(), cy, cx, 16);
            let zeros: Vec<(usize, usize)> = (0..32)
                .flat_map(|i| (0..32).map(move |j| (i, j)))
                .filter(|&(i, j)| out[[0, i, j]] == 0.0)
                .collect();
            let rows = cy.saturating_sub(8)..(cy + 8).min(32);
            let cols = cx.saturating_sub(8)..(cx + 8).min(32);
            assert_eq!(zeros.len(), rows.len() * cols.len());
            assert!(zeros.len() <= 256 && zeros.len() >= 64);
            assert!(zeros.iter().all(|(i, j)| rows.contains(i) && cols.contains(j)));
            assert!((0..3).all(|c| out.index_axis(Axis(0), c) == out.index_axis(Axis(0), 0)));
        }
    }
}

#[test]
fn hflip_is_an_involution() {
    let x = ramp(3, 5, 7);
    assert_eq!(image::hflip(image::hflip(x.view()).view()), x);
    let step = Step::Hflip { flip: true };
    assert_eq!(step.apply(x.view())[[1, 2, 0]], x[[1, 2, 6]]);
}

#[test]
fn crop_pad_zero_offset_shifts_by_pad() {
    let x = ramp(3, 8, 8);
    let out = image::crop_pad(x.view(), 4, 0, 0);
    for c in 0..3 {
        for i in 0..8 {
            for j in 0..8 {
                let expected = if i < 4 || j < 4 { 0.0 } else { x[[c, i - 4, j - 4]] };
                assert_eq!(out[[c, i, j]], expected);
            }
        }
    }
    assert_eq!(image::crop_pad(x.view(), 4, 4, 4), x);
}

#[test]
fn rotate90_cycles() {
    let x = ramp(2, 6, 6);
    let mut y = x.clone();
    for _ in 0..4 {
        y = image::rotate90(y.view(), 1);
    }
    assert_eq!(y, x);
    assert_eq!(image::rotate90(image::rotate90(x.view(), 1).view(), 1), image::rotate90(x.view(), 2));
    let r = image::rotate90(x.view(), 1);
    // counter-clockwise: top-right corner moves to top-left
    assert_eq!(r[[0, 0, 0]], x[[0, 0, 5]]);
}

#[test]
fn photometric_fixed_points() {
    let x = ramp(3, 8, 8).mapv(|v| (v * 255.0).round() / 255.0);
    assert_eq!(image::posterize(x.view(), 8), x);
    assert_eq!(image::solarize(x.view(), 256.0), x);
    assert_eq!(image::invert(image::invert(x.view()).view()).mapv(|v| (v * 1e5).round()), x.mapv(|v| (v * 1e5).round()));
    let flat = Array3::from_elem((3, 4, 4), 0.5f32);
    assert_eq!(image::equalize(flat.view()), flat);
    assert_eq!(image::autocontrast(flat.view()), flat);
    for f in [image::brightness, image::contrast, image::color, image::sharpness] {
        let y = f(x.view(), 1.0);
        assert!(y.iter().zip(x.iter()).all(|(a, b)| (a - b).abs() < 1e-6));
    }
}

#[test]
fn autocontrast_stretches_range() {
    let x = Array3::from_shape_fn((1, 2, 2), |(_, i, j)| (64 + 64 * (i * 2 + j)) as f32 / 255.0);
    let y = image::autocontrast(x.view());
    assert_eq!(y[[0, 0, 0]], 0.0);
    assert_eq!(y[[0, 1, 1]], 1.0);
}

#[test]
fn blur_preserves_constant_images() {
    let flat = Array3::from_elem((1, 5, 5), 0.3f32);
    let y = image::gaussian_blur(flat.view(), 1.3);
    assert!(y.iter().all(|v| (v - 0.3).abs() < 1e-6));
}

#[test]
fn none_policy_samples_identity() {
    for s in 0..20 {
        assert!(sample_transform(&AugmentPolicy::none(), &RngState::new(s)).is_identity());
        let (a, b) = sample_pair(&AugmentPolicy::none(), &RngState::new(s));
        assert!(a.is_identity() && b.is_identity());
    }
}

#[test]
fn autoaugment_ends_with_base_and_cutout() {
    let p = AugmentPolicy::autoaugment();
    assert_eq!(p.sub_policies.as_ref().unwrap().len(), 25);
    for s in 0..500 {
        let t = sample_transform(&p, &RngState::new(s));
        let names: Vec<&str> = t.steps.iter().map(Step::name).collect();
        assert!(names.len() >= 3 && names.len() <= 5);
        assert_eq!(&names[names.len() - 3..], &["crop_pad", "hflip", "cutout"]);
    }
}

#[test]
fn identity_sub_policy_recovers_base_cutout_support() {
    let mut p = AugmentPolicy::autoaugment();
    p.sub_policies = Some(vec![(AugmentOp::identity(), AugmentOp::identity())]);
    for s in 0..50 {
        let t = sample_transform(&p, &RngState::new(s));
        let names: Vec<&str> = t.steps.iter().map(Step::name).filter(|n| *n != "identity").collect();
        assert_eq!(names, ["crop_pad", "hflip", "cutout"]);
    }
}

fn crop_offsets(t: &Transform) -> (usize, usize, bool) {
    let mut r = (usize::MAX, usize::MAX, false);
    for s in &t.steps {
        match *s {
            Step::CropPad { dy, dx, .. } => (r.0, r.1) = (dy, dx),
            Step::Hflip { flip } => r.2 = flip,
            _ => {}
        }
    }
    r
}

#[test]
fn pair_offsets_are_independent() {
    // Chi-square test of independence on the 9x9 table of (dy1, dy2).
    let n = 10_000;
    let mut table = [[0f64; 9]; 9];
    for s in 0..n {
        let (a, b) = sample_pair(&AugmentPolicy::base(), &RngState::new(7).derive("step", s));
        table[crop_offsets(&a).0][crop_offsets(&b).0] += 1.0;
    }
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..9).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let mut chi2 = 0.0;
    for i in 0..9 {
        for j in 0..9 {
            let e = rows[i] * cols[j] / n as f64;
            chi2 += (table[i][j] - e).powi(2) / e;
        }
    }
    // 64 degrees of freedom, upper 0.1% critical value 112.3.
    assert!(chi2 < 112.3, "chi2 = {chi2}");
    // Marginals uniform: 8 dof, upper 0.1% critical value 26.12.
    let e = n as f64 / 9.0;
    let marg: f64 = rows.iter().map(|r| (r - e).powi(2) / e).sum();
    assert!(marg < 26.12, "marginal chi2 = {marg}");
}

#[test]
fn pair_collision_rate_matches_independence() {
    // Base parameters (dy, dx, flip) are uniform over 9 * 9 * 2 outcomes.
    let n = 10_000f64;
    let p = 1.0 / 162.0;
    let hits = (0..n as u64)
        .filter(|&s| {
            let (a, b) = sample_pair(&AugmentPolicy::base(), &RngState::new(11).derive("step", s));
            crop_offsets(&a) == crop_offsets(&b)
        })
        .count() as f64;
    let sigma = (n * p * (1.0 - p)).sqrt();
    assert!((hits - n * p).abs() < 3.0 * sigma, "hits = {hits}");
}

#[test]
fn sampling_is_reproducible() {
    let p = AugmentPolicy::autoaugment();
    let rng = RngState::new(3);
    assert_eq!(sample_pair(&p, &rng), sample_pair(&p, &rng));
    let b = batch_of(&ramp(3, 16, 16), 4);
    let t = sample_batch(&p, &rng, 4);
    assert_eq!(t.apply(&b).unwrap(), sample_batch(&p, &rng, 4).apply(&b).unwrap());
    let (t1, t2) = sample_pair(&p, &rng);
    assert_ne!(t1, t2);
}

#[test]
fn batch_transform_checks_length() {
    let t = sample_batch(&AugmentPolicy::base(), &RngState::new(0), 3);
    assert!(t.apply(&batch_of(&ramp(3, 8, 8), 2)).is_err());
}

#[test]
fn invalid_ops_are_rejected() {
    assert!(AugmentOp::new(OpKind::CropPad, 2.5, 1.0).is_err());
    assert!(AugmentOp::new(OpKind::Cutout, 0.0, 1.0).is_err());
    assert!(AugmentOp::new(OpKind::Hflip, 1.0, 0.5).is_err());
    assert!(AugmentOp::new(OpKind::AutoAug(AutoAugOp::Rotate), 10.0, 0.5).is_err());
    assert!(AugmentOp::new(OpKind::Identity, 0.0, 1.5).is_err());
    assert!(AugmentPolicy::named("mixup").is_err());
}

#[test]
fn custom_policy_parses() {
    let p = AugmentPolicy::parse_custom("crop_pad:1:4, hflip:0.5:0, autoaug.rotate:0.7:2").unwrap();
    assert_eq!(p.ops.len(), 3);
    assert_eq!(p.ops[2].kind, OpKind::AutoAug(AutoAugOp::Rotate));
    assert_eq!(p.ops[0], AugmentOp::crop_pad(4));
    assert!(AugmentPolicy::parse_custom("crop_pad:1").is_err());
    assert!(AugmentPolicy::parse_custom("warp:1:1").is_err());
    for k in ["crop_pad", "gaussian_blur", "autoaug.translate_y"] {
        assert_eq!(k.parse::<OpKind>().unwrap().to_string(), k);
    }
}

fn any_op() -> impl Strategy<Value = AugmentOp> {
    let kinds: Vec<OpKind> = SIMPLE_KINDS
        .iter()
        .map(|(_, k)| *k)
        .chain(AUTOAUG_NAMES.iter().map(|(_, o)| OpKind::AutoAug(*o)))
        .collect();
    (prop::sample::select(kinds), 0.0..=1.0f64, 0.0..=1.0f64).prop_map(|(kind, u, p)| {
        let (lo, hi, int) = kind.magnitude_range();
        let lo = lo.max(0.05).min(hi);
        let m = lo + (hi - lo) * u;
        AugmentOp::new(kind, if int { m.round() } else { m }, p).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn ops_preserve_shape_and_range(op in any_op(), seed in any::<u64>(), h in 3usize..12, w in 3usize..12) {
        let img = Array3::from_shape_fn((3, h, w), |(a, i, j)| ((seed as usize + a * 5 + i * 3 + j) % 11) as f32 / 10.0);
        let b = batch_of(&img, 2);
        let out = apply(&op, &b, &RngState::new(seed));
        prop_assert_eq!(out.data().dim(), b.data().dim());
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn policies_preserve_shape_and_range(idx in 0usize..5, seed in any::<u64>()) {
        let p = AugmentPolicy::named(POLICY_NAMES[idx]).unwrap();
        let b = batch_of(&ramp(3, 10, 10), 3);
        let out = sample_batch(&p, &RngState::new(seed), 3).apply(&b).unwrap();
        prop_assert_eq!(out.data().dim(), b.data().dim());
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
