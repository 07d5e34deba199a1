use proptest::prelude::*;
use tips_core::image_io::Image;
use tips_core::metrics::*;
use tips_core::pose::{Keypoint, KeypointSet, NUM_JOINTS};
use tips_core::render::{adv_loss_g, attention_gate, discriminator_objective};
use tips_tensor::Tensor;

fn plane(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, len)
}

fn pose_strategy() -> impl Strategy<Value = KeypointSet> {
    prop::collection::vec((0.0f64..63.0, 0.0f64..63.0, prop::bool::weighted(0.85)), NUM_JOINTS).prop_map(|js| {
        let joints = js.into_iter().map(|(x, y, v)| if v { Keypoint::visible(x, y) } else { Keypoint::hidden() }).collect();
        KeypointSet::from_vec(joints, 64, 64).unwrap()
    })
}

fn tagged(female: bool) -> Image {
    let mut data = vec![0.8f32; 3 * 16 * 16];
    let rgb = if female { [0.73, -0.69, -0.69] } else { [-0.69, -0.69, 0.73] };
    for y in 0..4 {
        for x in 0..4 {
            for c in 0..3 {
                data[(c * 16 + y) * 16 + x] = rgb[c];
            }
        }
    }
    Image::new(16, 16, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ssim_is_symmetric_and_bounded(a in plane(14 * 13), b in plane(14 * 13)) {
        let p = SsimParams::default();
        let ab = ssim(&a, &b, 14, 13, &p).unwrap();
        let ba = ssim(&b, &a, 14, 13, &p).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1.0..=1.0 + 1e-12).contains(&ab));
        prop_assert!((ssim(&a, &a, 14, 13, &p).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pckh_grows_with_alpha(pred in pose_strategy(), gt in pose_strategy(), a in 0.0f64..2.0, extra in 0.0f64..2.0) {
        match (pckh(&pred, &gt, a), pckh(&pred, &gt, a + extra)) {
            (Ok(lo), Ok(hi)) => {
                prop_assert!(lo <= hi);
                prop_assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "definedness must not depend on alpha"),
        }
    }

    #[test]
    fn pckh_of_ground_truth_is_one(gt in pose_strategy()) {
        if let Ok(v) = pckh(&gt, &gt, PCKH_ALPHA) {
            prop_assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn gcr_ignores_order(genders in prop::collection::vec(any::<bool>(), 1..12), labels in prop::collection::vec(0u8..2, 12), shift in 0usize..12) {
        let n = genders.len();
        let images: Vec<Image> = genders.iter().map(|&f| tagged(f)).collect();
        let labels = &labels[..n];
        let base = gcr(&images, labels, &TagClassifier).unwrap();
        let mut rot_i = images.clone();
        let mut rot_l = labels.to_vec();
        rot_i.rotate_left(shift % n);
        rot_l.rotate_left(shift % n);
        prop_assert_eq!(gcr(&rot_i, &rot_l, &TagClassifier).unwrap(), base);
        let hits = genders.iter().zip(labels).filter(|(&g, &l)| u8::from(g) == l).count();
        prop_assert_eq!(base, hits as f64 / n as f64);
    }

    #[test]
    fn gate_never_amplifies(img in prop::collection::vec(-5.0f32..5.0, 2 * 3 * 3), pose in prop::collection::vec(-30.0f32..30.0, 2 * 3 * 3)) {
        let a = Tensor::from_vec(img, &[1, 2, 3, 3]);
        let b = Tensor::from_vec(pose, &[1, 2, 3, 3]);
        let g = attention_gate(&a, &b).unwrap();
        for (o, x) in g.data().iter().zip(a.data()) {
            prop_assert!(o.abs() <= x.abs());
            prop_assert!(o * x >= 0.0);
        }
    }

    #[test]
    fn adversarial_losses_are_non_negative(real in prop::collection::vec(0.0f64..=1.0, 1..20), fake in prop::collection::vec(0.0f64..=1.0, 1..20)) {
        let g = adv_loss_g(&fake);
        let d = discriminator_objective(&real, &fake);
        prop_assert!(g >= 0.0 && g.is_finite());
        prop_assert!(d >= 0.0 && d.is_finite());
    }
}

#[test]
fn tag_classifier_reads_painted_tags() {
    assert_eq!(TagClassifier.label(&tagged(true)), 1);
    assert_eq!(TagClassifier.label(&tagged(false)), 0);
    let images = vec![tagged(true), tagged(false), tagged(true), tagged(true)];
    assert_eq!(gcr(&images, &[1, 0, 0, 1], &TagClassifier).unwrap(), 0.75);
    assert_eq!(gcr(&images, &[1, 1, 1, 1], &ConstantClassifier(0.9)).unwrap(), 1.0);
}
