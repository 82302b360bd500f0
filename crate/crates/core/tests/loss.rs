use proptest::prelude::*;
use psych_core::analytics::SigmaTable;
use psych_core::annotation::StratumKey;
use psych_core::geometry::BBox;
use psych_core::loss::{
    central_difference, default_loss, fd_step, density, human_loss, human_loss_grad, human_penalty, relative_error, DefaultLossSpec,
    LossKind, LossSample, PsychLossParams, GRADCHECK_TOLERANCE,
};

fn stratum() -> impl Strategy<Value = StratumKey> {
    (0usize..50).prop_map(|i| StratumKey::all().nth(i).unwrap())
}

fn sample() -> impl Strategy<Value = LossSample> {
    (
        (100.0..900.0, 100.0..900.0, 5.0..200.0, 5.0..200.0),
        (-80.0..80.0, -80.0..80.0, 0.5..1.5, 0.5..1.5),
        stratum(),
        any::<bool>(),
    )
        .prop_map(|((x, y, w, h), (dx, dy, sw, sh), stratum, flagged)| LossSample {
            gt_box: BBox::new(x, y, w, h).unwrap(),
            pred_box: BBox::new(x + dx, y + dy, w * sw, h * sh).unwrap(),
            stratum,
            has_behavioral_data: flagged,
        })
}

fn spec() -> impl Strategy<Value = DefaultLossSpec> {
    (0usize..3, 0.05..2.0).prop_map(|(k, beta)| DefaultLossSpec {
        kind: [LossKind::SmoothL1, LossKind::L1, LossKind::L2][k],
        beta,
    })
}

proptest! {
    #[test]
    fn loss_is_bounded(s in sample(), a in 0.0..1.0, b in 0.01..1.0, sigma in 1.0..100.0, spec in spec()) {
        let params = PsychLossParams::new(a, b, SigmaTable::uniform(sigma), spec).unwrap();
        let l = default_loss(&s.pred_box, &s.gt_box, &spec);
        let h = human_loss(&s, &params).unwrap();
        prop_assert!(h >= 0.0);
        prop_assert!(h <= a + b * l + 1e-12);
    }

    #[test]
    fn penalty_grows_with_offset(sigma in 1.0..100.0, r1 in 0.0..300.0, extra in 0.01..300.0, angle in 0.0..std::f64::consts::TAU) {
        let f1 = density(r1 * angle.cos(), r1 * angle.sin(), sigma).unwrap();
        let r2 = r1 + extra;
        let f2 = density(r2 * angle.cos(), r2 * angle.sin(), sigma).unwrap();
        prop_assert!(f2 <= f1);
        // strict while the density has not underflowed
        if f2 > 1e-300 {
            prop_assert!(f2 < f1);
        }
    }

    #[test]
    fn smaller_sigma_penalises_harder(s in sample(), s1 in 1.0..50.0, gap in 0.5..50.0) {
        let offset = (s.pred_box.center().0 - s.gt_box.center().0).hypot(s.pred_box.center().1 - s.gt_box.center().1);
        prop_assume!(offset > 1.0 && offset < 3.0 * s1);
        let flagged = LossSample { has_behavioral_data: true, ..s };
        let p1 = human_penalty(&flagged, &SigmaTable::uniform(s1)).unwrap();
        let p2 = human_penalty(&flagged, &SigmaTable::uniform(s1 + gap)).unwrap();
        prop_assert!(p1 > p2);
    }

    #[test]
    fn baseline_recovery(s in sample(), sigma in 1.0..100.0, spec in spec()) {
        let params = PsychLossParams::new(0.0, 1.0, SigmaTable::uniform(sigma), spec).unwrap();
        let unflagged = LossSample { has_behavioral_data: false, ..s };
        prop_assert_eq!(human_loss(&unflagged, &params).unwrap(), default_loss(&s.pred_box, &s.gt_box, &spec));
    }

    #[test]
    fn gradient_matches_finite_differences(s in sample(), sigma in 1.0..100.0) {
        let spec = DefaultLossSpec::smooth_l1(1.0);
        let params = PsychLossParams::new(0.05, 0.95, SigmaTable::uniform(sigma), spec).unwrap();
        let analytic = human_loss_grad(&s, &params).unwrap();
        let numeric = central_difference(s.pred_box.params(), |p| {
            let pred = BBox { x_min: p[0], y_min: p[1], width: p[2], height: p[3] };
            human_loss(&LossSample { pred_box: pred, ..s }, &params).unwrap()
        });
        // smooth-L1 kinks at |e| = beta; skip samples whose stencil may cross one
        let diag = s.gt_box.diagonal();
        let g = s.gt_box.params();
        let p = s.pred_box.params();
        // the 8th-order stencil reaches four steps either side
        let near_kink = (0..4).any(|i| (((p[i] - g[i]) / diag).abs() - 1.0).abs() < 2.0 * 4.0 * fd_step(p[i]) / diag);
        prop_assume!(!near_kink);
        for i in 0..4 {
            prop_assert!(relative_error(analytic[i], numeric[i]) <= GRADCHECK_TOLERANCE, "component {}", i);
        }
    }
}
