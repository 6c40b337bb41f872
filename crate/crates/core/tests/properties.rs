use proptest::prelude::*;
use vcvote::concepts::{encode_sparse, vmf_e_step, ConceptBank, Method};
use vcvote::eval::average_precision;
use vcvote::features::FeatureMap;
use vcvote::lattice::{LatticeSpec, Offset, PointL0, PointL4};
use vcvote::likelihood::estimate_histograms;
use vcvote::seed;
use vcvote::spatial::{fit_frequency, support_from_frequency, OffsetWindow};
use vcvote::sphere::{random_unit, VectorSet};
use vcvote::voting::{score_map, Vote};

fn unit_rows(n: usize, d: usize, s: u64) -> Vec<Vec<f32>> {
    let mut rng = seed::rng(s);
    (0..n).map(|_| random_unit(d, &mut rng)).collect()
}

fn bank(n: usize, d: usize, s: u64, eta: f64) -> ConceptBank {
    ConceptBank::new(VectorSet::from_rows(&unit_rows(n, d, s)).unwrap(), eta, Method::Vmf, n, vec![]).unwrap()
}

fn vote() -> impl Strategy<Value = Vote> {
    prop_oneof![Just(Vote::Absent), (-5.0f64..5.0).prop_map(Vote::Value)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn map_down_inverts_map_up(w in 1u32..40, h in 1u32..40, x in 0i32..40, y in 0i32..40) {
        let spec = LatticeSpec::from_l4(w, h, 16, 8).unwrap();
        let p = PointL4::new(x % w as i32, y % h as i32);
        prop_assert_eq!(spec.map_down(spec.map_up(p).unwrap()).unwrap(), p);
    }

    #[test]
    fn map_down_lands_on_the_nearest_cell(w in 1u32..30, h in 1u32..30, qx in 0i32..480, qy in 0i32..480) {
        let spec = LatticeSpec::from_l4(w, h, 16, 8).unwrap();
        let q = PointL0::new(qx.min(w as i32 * 16 - 1), qy.min(h as i32 * 16 - 1));
        let p = spec.map_down(q).unwrap();
        prop_assert!(spec.contains_l4(p));
        let d = q.dist(&spec.map_up(p).unwrap());
        for c in spec.cells() {
            prop_assert!(d <= q.dist(&spec.map_up(c).unwrap()) + 1e-9);
        }
    }

    #[test]
    fn frequencies_sum_to_one(offs in prop::collection::vec((-6i32..=6, -6i32..=6), 1..80), r in 0i32..5) {
        let window = OffsetWindow::new(r).unwrap();
        let offsets: Vec<Offset> = offs.iter().map(|&(dx, dy)| Offset::new(dx, dy)).collect();
        let f = fit_frequency(0, 0, &offsets, window).unwrap();
        prop_assert!((f.fr.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert_eq!(f.fr.len(), window.len());
    }

    #[test]
    fn support_grows_with_mass(raw in prop::collection::vec(0u32..20, 9..50), a in 0.05f64..1.0, b in 0.05f64..1.0) {
        prop_assume!(raw.iter().any(|&x| x > 0));
        let total: u32 = raw.iter().sum();
        let fr: Vec<f64> = raw.iter().map(|&x| f64::from(x) / f64::from(total)).collect();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let s_lo = support_from_frequency(&fr, lo).unwrap();
        let s_hi = support_from_frequency(&fr, hi).unwrap();
        prop_assert!(s_lo.iter().zip(&s_hi).all(|(l, h)| !l || *h));
        let mass: f64 = fr.iter().zip(&s_lo).filter(|p| *p.1).map(|p| p.0).sum();
        prop_assert!(mass >= lo - 1e-9);
        prop_assert!(s_lo.iter().zip(&fr).all(|(s, f)| !s || *f > 0.0));
    }

    #[test]
    fn histograms_are_densities_and_evidence_is_antisymmetric(
        pos in prop::collection::vec(0.0f64..2.0, 1..200),
        neg in prop::collection::vec(0.0f64..2.0, 1..200),
        bins in 1usize..120,
    ) {
        let e = estimate_histograms(0, 0, &pos, &neg, bins, 1e-3).unwrap();
        let w = 2.0 / bins as f64;
        prop_assert!((e.f_plus.iter().sum::<f64>() * w - 1.0).abs() < 1e-9);
        prop_assert!((e.f_minus.iter().sum::<f64>() * w - 1.0).abs() < 1e-9);
        let swapped = estimate_histograms(0, 0, &neg, &pos, bins, 1e-3).unwrap();
        for (a, b) in e.lambda.iter().zip(&swapped.lambda) {
            prop_assert!((a + b).abs() < 1e-12);
        }
        prop_assert!(e.cutoff_bin < bins);
    }

    #[test]
    fn raising_a_vote_never_lowers_the_score(
        votes in prop::collection::vec(prop::collection::vec(vote(), 6), 1..6),
        which in 0usize..36,
        bump in 0.0f64..3.0,
    ) {
        let (before, _) = score_map(&votes);
        let mut raised = votes.clone();
        let (c, t) = (which % raised.len(), which % 6);
        raised[c][t] = match raised[c][t] {
            Vote::Absent => Vote::Value(bump),
            Vote::Value(x) => Vote::Value(x + bump),
        };
        let (after, _) = score_map(&raised);
        for (a, b) in before.iter().zip(&after) {
            prop_assert!(b >= a);
            prop_assert!(*a >= 0.0);
        }
    }

    #[test]
    fn ap_ignores_order_and_monotone_rescaling(
        det in prop::collection::vec((0u32..50, any::<bool>()), 0..25),
        extra_gt in 0usize..5,
        shift in -3.0f64..3.0,
        seed_perm in any::<u64>(),
    ) {
        let scored: Vec<(f64, bool)> = det.iter().map(|&(s, t)| (f64::from(s), t)).collect();
        let n_gt = scored.iter().filter(|s| s.1).count() + extra_gt;
        prop_assume!(n_gt > 0);
        let ap = average_precision(&scored, n_gt).unwrap().ap;
        prop_assert!((0.0..=1.0).contains(&ap));
        let rescaled: Vec<(f64, bool)> = scored.iter().map(|&(s, t)| ((s * 0.5 + shift).exp(), t)).collect();
        prop_assert_eq!(average_precision(&rescaled, n_gt).unwrap().ap, ap);
        let mut permuted = scored.clone();
        let mut rng = seed::rng(seed_perm);
        rand::seq::SliceRandom::shuffle(permuted.as_mut_slice(), &mut rng);
        prop_assert_eq!(average_precision(&permuted, n_gt).unwrap().ap, ap);
        // a false positive scored below everything else cannot change AP
        let mut tail = scored.clone();
        tail.push((-1.0, false));
        prop_assert_eq!(average_precision(&tail, n_gt).unwrap().ap, ap);
    }

    #[test]
    fn soft_assignments_are_distributions(k in 1usize..8, n in 1usize..40, eta in 0.0f64..2000.0, s in any::<u64>()) {
        let b = bank(k, 6, s, eta);
        let pts = VectorSet::from_rows(&unit_rows(n, 6, s ^ 1)).unwrap();
        let q = vmf_e_step(&pts, &b);
        for row in q.rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn sparse_codes_grow_with_threshold(t1 in 0.0f64..2.0, t2 in 0.0f64..2.0, s in any::<u64>()) {
        let b = bank(6, 5, s, 30.0);
        let spec = LatticeSpec::from_l4(5, 4, 16, 8).unwrap();
        let data: Vec<f32> = unit_rows(20, 5, s ^ 7).concat();
        let map = FeatureMap::new(spec, 5, data, 1.0).unwrap();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = encode_sparse(&map, &b, lo).unwrap();
        let c = encode_sparse(&map, &b, hi).unwrap();
        for cell in 0..map.num_cells() {
            prop_assert!(a.code(cell).iter().zip(c.code(cell)).all(|(x, y)| !x || *y));
        }
    }

    #[test]
    fn serialized_artifacts_round_trip(w in 1u32..8, h in 1u32..8, d in 1usize..9, s in any::<u64>(), tag in 0.1f32..4.0) {
        let spec = LatticeSpec::from_l4(w, h, 16, 8).unwrap();
        let data: Vec<f32> = unit_rows(spec.num_cells(), d, s).concat();
        let map = FeatureMap::new(spec, d, data, tag).unwrap();
        prop_assert_eq!(FeatureMap::from_bytes(&map.to_bytes()).unwrap(), map);
        let b = bank(3, d.max(2), s, 12.5);
        prop_assert_eq!(ConceptBank::from_bytes(&b.to_bytes()).unwrap().to_bytes(), b.to_bytes());
    }
}
