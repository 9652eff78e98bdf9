use ebcn_core::eval::*;
use ebcn_core::network::EnergyReport;
use proptest::prelude::*;

fn pair(kind: &str, pos: f64, neg: f64) -> ScoredPair {
    let r = |e: f64| EnergyReport::from_per_position(vec![e], 0.0).unwrap();
    ScoredPair {
        kind: kind.into(),
        valid: true,
        corrupted_positions: vec![0],
        scores: Some(PairScores {
            pos: r(pos),
            neg: r(neg),
        }),
        features: None,
    }
}

fn scores() -> impl Strategy<Value = Vec<f64>> {
    // coarse grid so ties actually occur
    prop::collection::vec((-20i32..20).prop_map(|v| v as f64 * 0.5), 1..20)
}

proptest! {
    #[test]
    fn auc_of_identical_lists_is_half(x in scores()) {
        prop_assert_eq!(auc(&x, &x).unwrap(), 0.5);
    }

    #[test]
    fn ranks_equal_brute_force(pos in scores(), neg in scores()) {
        prop_assert_eq!(auc_twice_u_ranks(&pos, &neg), auc_twice_u_exhaustive(&pos, &neg));
    }

    #[test]
    fn auc_ignores_strictly_increasing_transforms(pos in scores(), neg in scores()) {
        let f = |v: &f64| (v * 0.3).exp() * 7.0 - 2.0;
        let tp: Vec<f64> = pos.iter().map(f).collect();
        let tn: Vec<f64> = neg.iter().map(f).collect();
        prop_assert_eq!(auc(&pos, &neg).unwrap(), auc(&tp, &tn).unwrap());
    }

    #[test]
    fn paired_accuracy_ignores_order(
        raw in prop::collection::vec((0usize..3, -5.0f64..5.0, -5.0f64..5.0), 1..30),
        rot in 0usize..30,
    ) {
        let kinds = ["shuffle", "splice", "noise"];
        let a: Vec<ScoredPair> = raw.iter().map(|&(k, p, n)| pair(kinds[k], p, n)).collect();
        let mut b = a.clone();
        b.reverse();
        let r = rot % b.len();
        b.rotate_left(r);
        let trained = vec!["shuffle".to_string()];
        prop_assert_eq!(paired_accuracy(&a, &trained), paired_accuracy(&b, &trained));
        // splitting into batches and pooling the counts gives the same tally
        let (x, y) = a.split_at(a.len() / 2);
        let (rx, ry) = (paired_accuracy(x, &trained), paired_accuracy(y, &trained));
        let whole = paired_accuracy(&a, &trained);
        prop_assert_eq!(rx.overall.correct + ry.overall.correct, whole.overall.correct);
    }
}

#[test]
fn large_inputs_use_rank_form_with_same_answer() {
    let pos: Vec<f64> = (0..300).map(|i| (i % 17) as f64).collect();
    let neg: Vec<f64> = (0..300).map(|i| (i % 23) as f64 * 0.8).collect();
    assert!(300 * 300 > EXHAUSTIVE_AUC_LIMIT);
    let want = auc_twice_u_exhaustive(&pos, &neg) as f64 / (2.0 * 300.0 * 300.0);
    assert_eq!(auc(&pos, &neg).unwrap(), want);
}

#[test]
fn ties_count_as_errors_and_skips_stay_out() {
    let mut v = vec![
        pair("shuffle", 1.0, 2.0),
        pair("shuffle", 1.0, 1.0),
        pair("shuffle", 3.0, 1.0),
    ];
    v.push(ScoredPair {
        kind: "shuffle".into(),
        valid: false,
        corrupted_positions: vec![],
        scores: None,
        features: None,
    });
    let r = paired_accuracy(&v, &[]);
    let row = &r.kinds[0];
    assert_eq!((row.valid, row.skip, row.correct), (3, 1, 1));
    assert!((row.accuracy.unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert!(r.to_csv().starts_with("kind,accuracy,gap,valid,skip\n"));
}

#[test]
fn kind_without_valid_pairs_reports_na() {
    let v = vec![
        pair("shuffle", 0.0, 1.0),
        ScoredPair {
            kind: "smoothing".into(),
            valid: false,
            corrupted_positions: vec![],
            scores: None,
            features: None,
        },
    ];
    let r = paired_accuracy(&v, &["shuffle".to_string()]);
    assert!(r.to_csv().contains("smoothing,NA,NA,0,1"));
    assert!(r.to_table().contains("no valid pairs"));
    assert_eq!(r.overall.valid, 1);
    assert!(r.unseen.is_none());
}
