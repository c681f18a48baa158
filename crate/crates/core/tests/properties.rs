use proptest::prelude::*;

use dwc::eval::{recall_at_k, RankingResult};
use dwc::losses::{distill_loss, mmc_loss, predict_probs, soft_labels, Kernel};
use dwc::{Tape, Tensor};

fn batch(b: usize, c: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, b * c).prop_map(move |v| Tensor::new(&[b, c], v).unwrap())
}

fn pair() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..7, 1usize..6).prop_flat_map(|(b, c)| (batch(b, c), batch(b, c)))
}

fn kernel() -> impl Strategy<Value = Kernel> {
    prop_oneof![Just(Kernel::Dot), Just(Kernel::Euclidean), Just(Kernel::Sigmoid)]
}

proptest! {
    #[test]
    fn soft_labels_have_unit_diagonal_and_bounded_rows(
        (_, t) in pair(), tau in 0.05f64..5.0, k in kernel()
    ) {
        let y = soft_labels(&t, tau, k).unwrap().values;
        let b = t.shape()[0];
        for i in 0..b {
            let row = y.row(i);
            prop_assert_eq!(row[i], 1.0);
            let off: f64 = row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| v).sum();
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!(off < 1.0 + 1e-12);
        }
    }

    #[test]
    fn probability_rows_sum_to_one((q, t) in pair(), tau in 0.05f64..5.0) {
        let mut tape = Tape::new();
        let (qv, tv) = (tape.constant(q), tape.constant(t));
        let p = predict_probs(&mut tape, qv, tv, tau).unwrap();
        let probs = tape.value(p.probs);
        for i in 0..probs.shape()[0] {
            prop_assert!((probs.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn losses_are_nonnegative((q, t) in pair(), lambda in 0.01f64..=1.0) {
        let mut tape = Tape::new();
        let labels = soft_labels(&t, 1.0, Kernel::Dot).unwrap();
        let (qv, tv) = (tape.constant(q), tape.constant(t.clone()));
        let p = predict_probs(&mut tape, qv, tv, 1.0).unwrap();
        let mmc = mmc_loss(&mut tape, &p, &labels, lambda).unwrap();
        prop_assert!(tape.value(mmc).data()[0] >= 0.0);
        let teacher = tape.value(p.probs).clone();
        let kl = distill_loss(&mut tape, &teacher, &p).unwrap();
        prop_assert!(tape.value(kl).data()[0].abs() < 1e-12);
    }

    #[test]
    fn recall_is_nondecreasing_in_k(ranks in prop::collection::vec(1usize..50, 1..40)) {
        let results: Vec<RankingResult> = ranks
            .iter()
            .enumerate()
            .map(|(q, &r)| RankingResult { query: q, order: Vec::new(), target_rank: r })
            .collect();
        let curve: Vec<f64> = (1..=50).map(|k| recall_at_k(&results, k)).collect();
        prop_assert!(curve.windows(2).all(|w| w[1] >= w[0]));
        prop_assert_eq!(curve[49], 100.0);
    }
}
