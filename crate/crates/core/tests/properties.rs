mod common;

use dda_core::data::{parse_dataset, split, zscore, Dataset, Format, SplitSpec, Target, Task, TaskSpec, TimeSeriesSample};
use dda_core::diffusion::{NoiseRate, ScheduleSpec};
use dda_core::nn::softmax_rows;
use dda_core::stats::{bayesian_signed_rank, loss_ratio, PairedRuns};
use proptest::prelude::*;

fn dataset_strategy() -> impl Strategy<Value = Dataset> {
    (1usize..4, 2usize..12).prop_flat_map(|(classes, len)| {
        prop::collection::vec((prop::collection::vec(-1e6f64..1e6, len), 0..classes + 1), 2..20).prop_map(
            move |rows| {
                let samples = rows
                    .into_iter()
                    .enumerate()
                    .map(|(i, (values, c))| TimeSeriesSample {
                        id: i.to_string(),
                        values,
                        target: Target::Class(c),
                    })
                    .collect();
                Dataset {
                    samples,
                    task: Task::Classification { n_classes: classes + 1 },
                    class_labels: (0..=classes as i64).collect(),
                }
            },
        )
    })
}

fn reparse(ds: &Dataset, format: Format) -> Dataset {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.txt");
    ds.write(&path, format).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    parse_dataset(&text, format, TaskSpec::Classification { n_classes: None }, "d").unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ucr_round_trip(ds in dataset_strategy()) {
        // labels are 0-based with class 0 present: re-parse maps them identically
        let mut ds = ds;
        ds.samples[0].target = Target::Class(0);
        for format in [Format::UcrTsv, Format::Csv] {
            let back = reparse(&ds, format);
            prop_assert_eq!(back.len(), ds.len());
            for (a, b) in ds.samples.iter().zip(&back.samples) {
                let worst = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                prop_assert!(worst <= 1e-12);
                prop_assert_eq!(a.target.class(), b.target.class());
            }
        }
    }

    #[test]
    fn split_partitions_the_dataset(ds in dataset_strategy(), seed in 0u64..1000, frac in 0.1f64..0.9) {
        // give every class at least two members
        let mut ds = ds;
        let n = ds.len();
        for (i, s) in ds.samples.iter_mut().enumerate() {
            s.target = Target::Class(i % 2);
            s.id = format!("s{i}");
        }
        ds.task = Task::Classification { n_classes: 2 };
        prop_assume!(n >= 4);
        let (tr, va) = split(&ds, SplitSpec { val_fraction: frac, seed }).unwrap();
        let mut ids: Vec<String> = tr.samples.iter().chain(&va.samples).map(|s| s.id.clone()).collect();
        prop_assert_eq!(ids.len(), n);
        ids.sort();
        ids.dedup();
        prop_assert_eq!(ids.len(), n);
    }

    #[test]
    fn validation_cannot_move_the_normalizer(ds in dataset_strategy(), bump in -1e3f64..1e3) {
        let val = ds.clone();
        let mut val2 = ds.clone();
        val2.samples[0].values[0] += bump;
        let (_, _, n1) = zscore(&ds, &[&val]);
        let (_, _, n2) = zscore(&ds, &[&val2]);
        prop_assert_eq!(n1, n2);
    }

    #[test]
    fn loss_ratio_antisymmetric_and_bounded(a in 1e-9f64..1e3, b in 1e-9f64..1e3) {
        prop_assert_eq!(loss_ratio(a, b), -loss_ratio(b, a));
        let r = loss_ratio(a, b);
        prop_assert!(r > -2.0 && r < 2.0);
    }

    #[test]
    fn bridge_is_monotone(r1 in 0.0f64..2.0, r2 in 0.0f64..2.0) {
        let s = ScheduleSpec::default().build().unwrap();
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        prop_assert!(s.timestep_for_noise_rate(NoiseRate::new(lo).unwrap()) <= s.timestep_for_noise_rate(NoiseRate::new(hi).unwrap()));
    }

    #[test]
    fn softmax_rows_are_distributions(logits in prop::collection::vec(-50.0f64..50.0, 12)) {
        let p = softmax_rows(&logits, 4);
        for row in p.chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
        }
    }
}

#[test]
fn schedule_tables_are_monotone() {
    let s = ScheduleSpec::default().build().unwrap();
    let ab = s.alpha_bar_table();
    for w in ab.windows(2) {
        assert!(w[1] < w[0]);
        assert!(1.0 - w[1] > 1.0 - w[0]);
    }
}

fn fixed_pairs() -> PairedRuns {
    let mut r = common::rng(12);
    let pairs = (0..15)
        .map(|_| {
            let a = 1.0 + common::uniform(&mut r, &[1]).data()[0].abs();
            let b = a * (1.0 + 0.1 * common::uniform(&mut r, &[1]).data()[0]);
            (a, b)
        })
        .collect();
    PairedRuns::new(pairs).unwrap()
}

#[test]
fn wider_rope_never_lowers_rope_probability() {
    let p = fixed_pairs();
    let ropes = [0.01, 0.05, 0.1];
    let probs: Vec<f64> = ropes
        .iter()
        .map(|&r| bayesian_signed_rank(&p, r, 20_000, 5).unwrap().p_rope)
        .collect();
    assert!(probs[0] <= probs[1] && probs[1] <= probs[2], "{probs:?}");
}

#[test]
fn probabilities_sum_to_one() {
    let r = bayesian_signed_rank(&fixed_pairs(), 0.05, 10_000, 2).unwrap();
    assert!((r.p_a_better + r.p_rope + r.p_b_better - 1.0).abs() < 1e-9);
    for p in [r.p_a_better, r.p_rope, r.p_b_better] {
        assert!((0.0..=1.0).contains(&p));
    }
    assert_eq!(r.counts.iter().sum::<u64>(), 10_000);
}
