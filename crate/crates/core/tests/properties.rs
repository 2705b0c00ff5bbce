use proptest::prelude::*;

use drdfl::autodiff::{log_sum_exp, Tape, Tensor};
use drdfl::class_stats::{loss_cls, ClassGaussianBank, ClassStats};
use drdfl::data::{Dataset, Split};
use drdfl::losses::{loss_adv_uniform, loss_kl};
use drdfl::partition::{largest_remainder, partition, Scheme};
use drdfl::ring::{merge_learngene, message_len, Precision, RingMessage};

fn dataset(labels: Vec<usize>, classes: usize) -> Dataset {
    let n = labels.len();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64]).collect();
    let splits = (0..n).map(|i| if i % 5 == 4 { Split::Test } else { Split::Train }).collect();
    Dataset::new(Tensor::from_rows(&rows).unwrap(), labels, splits, classes).unwrap()
}

fn stats(classes: usize, dim: usize, means: Vec<f64>, logvars: Vec<f64>) -> ClassStats {
    ClassStats { classes, dim, means, logvars }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn partitions_cover_each_index_once(
        k in 2usize..6,
        per_class in 10usize..60,
        clients in 1usize..7,
        beta in 0.05f64..5.0,
        s in 1usize..6,
        dirichlet in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let labels: Vec<usize> = (0..k * per_class).map(|i| i % k).collect();
        let ds = dataset(labels, k);
        let scheme = if dirichlet { Scheme::Dirichlet { beta } } else { Scheme::Shard { s: s.min(k) } };
        let plan = match partition(&ds, clients, scheme, seed) {
            Ok(p) => p,
            // Shards: too few clients to cover every class, or a class too
            // small to slice among its holders. Dirichlet: a single client,
            // or every redraw left some client empty.
            Err(e) => {
                let allowed = matches!(e, drdfl::Error::Partition(_))
                    || if dirichlet { clients < 2 } else { clients * s.min(k) < k };
                prop_assert!(allowed, "{e}");
                return Ok(());
            }
        };
        plan.validate(&ds).unwrap();
        for (split, sets) in [(Split::Train, &plan.client_train), (Split::Test, &plan.client_test)] {
            let mut all: Vec<usize> = sets.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, ds.indices(split));
        }
        let again = partition(&ds, clients, scheme, seed).unwrap();
        prop_assert_eq!(plan.sha256(), again.sha256());
    }

    #[test]
    fn largest_remainder_hits_the_total(total in 0usize..10_000, w in prop::collection::vec(0.0f64..10.0, 1..12)) {
        prop_assume!(w.iter().sum::<f64>() > 0.0);
        let counts = largest_remainder(total, &w);
        prop_assert_eq!(counts.iter().sum::<usize>(), total);
        let sum: f64 = w.iter().sum();
        for (c, wi) in counts.iter().zip(&w) {
            prop_assert!((*c as f64 - total as f64 * wi / sum).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn f64_messages_round_trip_exactly(
        p in 1usize..200,
        k in 2usize..6,
        d in 1usize..5,
        round in any::<u32>(),
        sender in any::<u32>(),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect::<Vec<f64>>();
        let msg = RingMessage { round, sender, learngene: draw(p), stats: stats(k, d, draw(k * d), draw(k * d)) };
        for precision in [Precision::F32, Precision::F64] {
            let bytes = msg.encode(precision).unwrap();
            prop_assert_eq!(bytes.len(), message_len(p, k, d, precision));
            let back = RingMessage::decode(&bytes).unwrap();
            if precision == Precision::F64 {
                prop_assert_eq!(&back, &msg);
            } else {
                for (a, b) in back.learngene.iter().zip(&msg.learngene) {
                    prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-30));
                }
            }
        }
    }

    #[test]
    fn corrupting_any_byte_is_detected(idx in any::<prop::sample::Index>(), flip in 1u8..=255) {
        let msg = RingMessage { round: 3, sender: 1, learngene: vec![0.5; 20], stats: stats(2, 2, vec![1.0; 4], vec![0.0; 4]) };
        let mut bytes = msg.encode(Precision::F32).unwrap();
        let i = idx.index(bytes.len());
        bytes[i] ^= flip;
        prop_assert!(RingMessage::decode(&bytes).is_err());
    }

    #[test]
    fn pairwise_averaging_keeps_the_sum_of_dyadic_values(
        a in prop::collection::vec(-1000i32..1000, 1..50),
        b_shift in -1000i32..1000,
    ) {
        // Multiples of 1/8 are exactly representable, so so are their halves.
        let x: Vec<f64> = a.iter().map(|&v| v as f64 / 8.0).collect();
        let y: Vec<f64> = a.iter().map(|&v| (v + b_shift) as f64 / 8.0).collect();
        let mut l = x.clone();
        let mut r = y.clone();
        merge_learngene(&mut l, &y).unwrap();
        merge_learngene(&mut r, &x).unwrap();
        for i in 0..x.len() {
            prop_assert_eq!(l[i] + r[i], x[i] + y[i]);
            prop_assert_eq!(l[i], r[i]);
        }
    }

    #[test]
    fn ema_merge_contracts_means_by_alpha(
        alpha in 0.01f64..=1.0,
        m in prop::collection::vec(-5.0f64..5.0, 6),
        t in prop::collection::vec(-5.0f64..5.0, 6),
    ) {
        let mut bank = ClassGaussianBank::new(3, 2, alpha).unwrap();
        bank.load(&stats(3, 2, m.clone(), vec![0.0; 6])).unwrap();
        bank.ema_merge(&stats(3, 2, t.clone(), vec![0.0; 6])).unwrap();
        for i in 0..6 {
            let after = bank.means().data()[i];
            prop_assert!(((after - t[i]).abs() - alpha * (m[i] - t[i]).abs()).abs() < 1e-12);
        }
        prop_assert!(bank.logvars().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn posterior_rows_are_distributions(
        means in prop::collection::vec(-4.0f64..4.0, 8),
        logvars in prop::collection::vec(-3.0f64..3.0, 8),
        z in prop::collection::vec(-6.0f64..6.0, 6),
    ) {
        let mut bank = ClassGaussianBank::new(4, 2, 0.9).unwrap();
        bank.load(&stats(4, 2, means, logvars)).unwrap();
        let post = bank.posterior(&Tensor::matrix(3, 2, z).unwrap()).unwrap();
        for r in 0..3 {
            let row = post.row(r);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn loss_terms_respect_their_lower_bounds(
        mu in prop::collection::vec(-3.0f64..3.0, 8),
        lv in prop::collection::vec(-4.0f64..4.0, 8),
        logits in prop::collection::vec(-20.0f64..20.0, 8),
        labels in prop::collection::vec(0usize..4, 2),
    ) {
        let mut tape = Tape::new();
        let m = tape.constant(&Tensor::matrix(2, 4, mu.clone()).unwrap());
        let l = tape.constant(&Tensor::matrix(2, 4, lv).unwrap());
        let kl = loss_kl(&mut tape, m, l).unwrap();
        prop_assert!(tape.scalar(kl) >= -1e-12);

        let g = tape.constant(&Tensor::matrix(2, 4, logits).unwrap());
        let u = loss_adv_uniform(&mut tape, g).unwrap();
        prop_assert!(tape.scalar(u) >= 4f64.ln() - 1e-12);

        let bank = ClassGaussianBank::new(4, 4, 0.9).unwrap();
        let vars = bank.bind(&mut tape);
        let cls = loss_cls(&mut tape, vars, 4, m, &labels).unwrap();
        prop_assert!(tape.scalar(cls) >= 0.0);
    }

    #[test]
    fn log_sum_exp_is_shift_equivariant(v in prop::collection::vec(-50.0f64..50.0, 1..10), c in -1e3f64..1e3) {
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        prop_assert!((log_sum_exp(&shifted) - log_sum_exp(&v) - c).abs() < 1e-9);
        prop_assert!(log_sum_exp(&v) >= v.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
}
