use gaze_focus::classifier::mask_image;
use gaze_focus::data_schema::{BinaryMask, CxrImage, Fixation, Heatmap, HeatmapRole};
use gaze_focus::gazeprep::{filter_fixations, render_heatmap, split_dataset, Interval, SplitSpec};
use gaze_focus::losses::{combined_loss, logit_transform, sigmoid, LossWeights, DEFAULT_EPS};
use gaze_focus::metrics::{fw_iou, iou, l1_mean, l2_mean, psnr, ssim, MaskClass};
use ndarray::Array2;
use proptest::prelude::*;

fn mask(n: usize) -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(any::<bool>(), n * n).prop_map(move |bits| BinaryMask::from_fn(n, n, |x, y| bits[y * n + x]))
}

fn field(n: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(0.0f64..=1.0, n * n).prop_map(move |v| Array2::from_shape_vec((n, n), v).unwrap())
}

fn fixations(max: usize, size: f64) -> impl Strategy<Value = Vec<Fixation>> {
    prop::collection::vec((-4.0..size + 4.0, -4.0..size + 4.0, 0.0f64..20.0, 0.01f64..2.0), 0..max).prop_map(|v| {
        v.into_iter()
            .map(|(x, y, t, d)| Fixation {
                x,
                y,
                t_start: t,
                t_end: t + d,
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn iou_is_symmetric_and_bounded(p in mask(6), g in mask(6)) {
        for class in [MaskClass::Foreground, MaskClass::Background] {
            let a = iou(&p, &g, class).unwrap();
            prop_assert_eq!(a, iou(&g, &p, class).unwrap());
            prop_assert!((0.0..=1.0).contains(&a));
        }
        let fw = fw_iou(&p, &g).unwrap();
        prop_assert!((0.0..=1.0).contains(&fw));
        prop_assert_eq!(fw_iou(&g, &g).unwrap(), 1.0);
    }

    #[test]
    fn pixel_metrics_are_symmetric(a in field(12), b in field(12)) {
        prop_assert_eq!(l1_mean(&a, &b).unwrap(), l1_mean(&b, &a).unwrap());
        prop_assert_eq!(l2_mean(&a, &b).unwrap(), l2_mean(&b, &a).unwrap());
        prop_assert!(l2_mean(&a, &b).unwrap() <= l1_mean(&a, &b).unwrap() + 1e-12);
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        let p = psnr(&a, &b).unwrap();
        prop_assert!(p > 0.0 && p <= 100.0);
    }

    #[test]
    fn render_is_order_invariant_and_normalized(mut fx in fixations(8, 40.0), seed in any::<u64>()) {
        let a = render_heatmap(&fx, 40, 36, 9.0).unwrap();
        let n = fx.len();
        if n > 1 {
            fx.rotate_left((seed as usize) % n);
            fx.swap(0, n - 1);
        }
        let b = render_heatmap(&fx, 40, 36, 9.0).unwrap();
        prop_assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let peak = a.values().iter().copied().fold(0.0, f64::max);
        prop_assert!(peak == 0.0 || peak == 1.0);
        prop_assert!(a.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn retained_fixations_respect_interval_and_mask(
        fx in fixations(16, 24.0),
        m in mask(24),
        end in 0.5f64..25.0,
    ) {
        let kept = filter_fixations(&fx, Interval { start: 0.0, end }, &m);
        prop_assert!(kept.len() <= fx.len());
        for f in &kept {
            prop_assert!(m.contains(f.x.round() as i64, f.y.round() as i64));
            prop_assert!(f.t_start < end && f.t_end <= end);
        }
    }

    #[test]
    fn combined_loss_is_linear_in_weights(
        a in field(8),
        logits in prop::collection::vec(-6.0f64..6.0, 64),
        w in (0.0f64..4.0, 0.0f64..4.0, 0.0f64..4.0),
        k in 0.0f64..3.0,
    ) {
        let logits = Array2::from_shape_vec((8, 8), logits).unwrap();
        let total = |w: (f64, f64, f64)| {
            combined_loss(&logits, &a, &LossWeights::new(w.0, w.1, w.2).unwrap(), DEFAULT_EPS).unwrap().total
        };
        let lhs = total((k * w.0, k * w.1, k * w.2));
        prop_assert!((lhs - k * total(w)).abs() <= 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn logit_transform_inverts_sigmoid_inside_the_clamp(a in field(6)) {
        let z = logit_transform(&a, DEFAULT_EPS);
        for (&v, &l) in a.iter().zip(z.iter()) {
            let clamped = v.clamp(DEFAULT_EPS, 1.0 - DEFAULT_EPS);
            prop_assert!((sigmoid(l) - clamped).abs() < 1e-12);
        }
    }

    #[test]
    fn split_is_disjoint_balanced_and_seeded(pos in 0usize..40, neg in 0usize..40, seed in any::<u64>()) {
        prop_assume!(pos.min(neg) >= 4);
        let labels: Vec<bool> = (0..pos + neg).map(|i| i < pos).collect();
        let spec = SplitSpec { seed, ..SplitSpec::default() };
        let part = split_dataset(&labels, &spec).unwrap();
        prop_assert_eq!(&part, &split_dataset(&labels, &spec).unwrap());
        prop_assert_eq!(part.len(), 2 * pos.min(neg));
        let mut all: Vec<usize> = [&part.train, &part.val, &part.test].iter().flat_map(|v| v.iter().copied()).collect();
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), part.len());
        for idx in [&part.train, &part.val, &part.test] {
            let p = idx.iter().filter(|&&i| labels[i]).count();
            prop_assert!(p.abs_diff(idx.len() - p) <= 1);
        }
    }

    #[test]
    fn masked_pixels_ignore_the_image_off_support(h in field(16), a in field(16), b in field(16)) {
        let h = h.mapv(|v| if v < 0.5 { 0.0 } else { v });
        let heat = Heatmap::new(h.clone(), HeatmapRole::Predicted).unwrap();
        let b = Array2::from_shape_fn((16, 16), |ix| if h[ix] > 0.0 { a[ix] } else { b[ix] });
        let ma = mask_image(&CxrImage::new(a).unwrap(), &heat).unwrap();
        let mb = mask_image(&CxrImage::new(b).unwrap(), &heat).unwrap();
        prop_assert!(ma.pixels().iter().zip(mb.pixels()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
