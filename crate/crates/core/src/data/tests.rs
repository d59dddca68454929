use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use proptest::prelude::*;

use super::synth::{drift_statistic, generate, SynthConfig};
use super::*;

fn log_of(rows: &[(&str, &str, i64)]) -> InteractionLog {
    InteractionLog::from_interactions(
        rows.iter().map(|&(u, i, t)| Interaction { user: u.into(), item: i.into(), timestamp: t }),
    )
}

fn parse(text: &str) -> Result<InteractionLog> {
    parse_interactions(text, Path::new("test.tsv"))
}

#[test]
fn load_sorts_and_dedups() {
    let log = parse("u1\ti1\t5\nu2\ti1\t7\nu1\ti2\t3\n").unwrap();
    assert_eq!(log.n_actions(), 3);
    let items: Vec<_> = log.events("u1").unwrap().iter().map(|e| e.item.as_str()).collect();
    assert_eq!(items, ["i2", "i1"]);

    let log = parse("u1\ti1\t5\nu1\ti1\t5\n").unwrap();
    assert_eq!(log.n_actions(), 1);

    let log = parse("u\ta\t100\nu\tb\t50\n").unwrap();
    let ts: Vec<_> = log.events("u").unwrap().iter().map(|e| e.timestamp).collect();
    assert_eq!(ts, [50, 100]);
}

#[test]
fn equal_timestamps_order_by_item() {
    let log = parse("u\tz\t1\nu\ta\t1\n").unwrap();
    let items: Vec<_> = log.events("u").unwrap().iter().map(|e| e.item.as_str()).collect();
    assert_eq!(items, ["a", "z"]);
}

#[test]
fn load_rejects_bad_lines() {
    match parse("u\ti\t1\nu\ti\n") {
        Err(DataError::Malformed { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
    assert!(matches!(parse("u\ti\tabc\n"), Err(DataError::Malformed { line: 1, .. })));
    assert!(matches!(parse("u\ti\t-4\n"), Err(DataError::NegativeTimestamp { line: 1, value: -4, .. })));
}

#[test]
fn items_parse_empty_categories() {
    let items = parse_items("a\t0,2\nb\t\nc\n", Path::new("items.tsv")).unwrap();
    assert_eq!(items[0].categories, BTreeSet::from([0, 2]));
    assert!(items[1].categories.is_empty());
    assert!(items[2].categories.is_empty());
    assert!(parse_items("a\tx\n", Path::new("items.tsv")).is_err());
}

#[test]
fn kcore_example() {
    let log = log_of(&[
        ("u1", "i1", 1),
        ("u1", "i2", 2),
        ("u2", "i1", 1),
        ("u2", "i2", 2),
        ("u2", "i3", 3),
        ("u3", "i3", 1),
    ]);
    let out = kcore_filter(&log, 2);
    let expected = log_of(&[("u1", "i1", 1), ("u1", "i2", 2), ("u2", "i1", 1), ("u2", "i2", 2)]);
    assert_eq!(out, expected);
    assert_eq!(kcore_filter(&out, 2), out);
}

proptest! {
    #[test]
    fn kcore_matches_elementwise_pruning(
        rows in prop::collection::vec((0u8..12, 0u8..10, 0i64..5), 0..200),
        k in 1usize..5,
        picks in prop::collection::vec(any::<usize>(), 64),
    ) {
        let log = InteractionLog::from_interactions(rows.iter().map(|&(u, i, t)| Interaction {
            user: format!("u{u}"), item: format!("i{i}"), timestamp: t,
        }));
        let out = kcore_filter(&log, k);
        let events: Vec<(String, String)> = log.iter().map(|x| (x.user, format!("{}@{}", x.item, x.timestamp))).collect();
        let mut n = 0;
        let mut choose = |len: usize| { n += 1; picks[n % picks.len()] % len };
        let oracle = one_at_a_time_core(&events, k, &mut choose);
        let got: BTreeSet<(String, String)> = out.iter().map(|x| (x.user, format!("{}@{}", x.item, x.timestamp))).collect();
        prop_assert_eq!(got, oracle);
        for (_, evs) in out.users() { prop_assert!(evs.len() >= k); }
        for (_, d) in out.item_degrees() { prop_assert!(d >= k); }
        prop_assert_eq!(kcore_filter(&out, k), out);
    }
}

/// Removes one under-degree user or item at a time, in an order given by
/// `choose`, until none remains. Events are `(user, "item@ts")`.
fn one_at_a_time_core(
    events: &[(String, String)],
    k: usize,
    choose: &mut impl FnMut(usize) -> usize,
) -> BTreeSet<(String, String)> {
    let item_of = |e: &str| e.split('@').next().unwrap().to_string();
    let mut set: BTreeSet<(String, String)> = events.iter().cloned().collect();
    loop {
        let mut ud: BTreeMap<String, usize> = BTreeMap::new();
        let mut id: BTreeMap<String, usize> = BTreeMap::new();
        for (u, e) in &set {
            *ud.entry(u.clone()).or_default() += 1;
            *id.entry(item_of(e)).or_default() += 1;
        }
        let mut weak: Vec<(bool, String)> = ud
            .into_iter()
            .filter(|(_, d)| *d < k)
            .map(|(u, _)| (true, u))
            .chain(id.into_iter().filter(|(_, d)| *d < k).map(|(i, _)| (false, i)))
            .collect();
        if weak.is_empty() {
            return set;
        }
        let (is_user, name) = weak.swap_remove(choose(weak.len()));
        set.retain(|(u, e)| if is_user { *u != name } else { item_of(e) != name });
    }
}

fn seq(user: &str, items: &[usize]) -> UserSequence {
    UserSequence {
        user: user.into(),
        items: items.to_vec(),
        timestamps: (0..items.len() as i64).map(|t| 10 * t).collect(),
    }
}

#[test]
fn leave_one_out_example() {
    let s = split_leave_one_out(&[seq("u", &[1, 2, 3, 4, 5])], SplitOptions { max_len: 50, per_target: true }).unwrap();
    assert_eq!(s.train.iter().map(|e| e.target).collect::<Vec<_>>(), [2, 3]);
    assert_eq!(s.train[1].items, [1, 2]);
    assert_eq!(s.valid[0].target, 4);
    assert_eq!(s.valid[0].items, [1, 2, 3]);
    assert_eq!(s.test[0].target, 5);
    assert_eq!(s.test[0].items, [1, 2, 3, 4]);

    let s = split_leave_one_out(&[seq("u", &[1, 2, 3, 4, 5])], SplitOptions { max_len: 50, per_target: false }).unwrap();
    assert_eq!(s.train.len(), 1);
    assert_eq!(s.train[0].target, 3);
}

#[test]
fn leave_one_out_three_items_has_no_train_target() {
    let s = split_leave_one_out(&[seq("u", &[1, 2, 3])], SplitOptions { max_len: 50, per_target: true }).unwrap();
    assert!(s.train.is_empty());
    assert_eq!((s.valid[0].target, s.test[0].target), (2, 3));
}

#[test]
fn leave_one_out_rejects_short_users() {
    let err = split_leave_one_out(&[seq("short", &[1, 2])], SplitOptions { max_len: 5, per_target: true });
    assert!(matches!(err, Err(DataError::TooFewInteractions { count: 2, .. })));
}

#[test]
fn leave_one_out_truncates_prefixes() {
    let items: Vec<usize> = (1..=80).collect();
    let s = split_leave_one_out(&[seq("u", &items)], SplitOptions { max_len: 50, per_target: true }).unwrap();
    assert_eq!(s.test[0].items.len(), 50);
    assert_eq!(s.test[0].items[0], 30);
    assert_eq!(*s.test[0].items.last().unwrap(), 79);
}

proptest! {
    #[test]
    fn split_respects_chronology(gaps in prop::collection::vec(0i64..100, 3..40), l in 1usize..10) {
        let mut t = 0;
        let timestamps: Vec<i64> = gaps.iter().map(|g| { t += g; t }).collect();
        let items: Vec<usize> = (1..=gaps.len()).collect();
        let s = split_leave_one_out(&[UserSequence { user: "u".into(), items, timestamps }], SplitOptions { max_len: l, per_target: true }).unwrap();
        let valid_t = s.valid[0].target_timestamp;
        let test_t = s.test[0].target_timestamp;
        for e in &s.train {
            prop_assert!(e.target_timestamp <= valid_t);
            prop_assert!(e.items.len() <= l && !e.items.is_empty());
        }
        prop_assert!(valid_t <= test_t);
    }
}

fn example(items: &[usize], times: &[i64], target: usize) -> Example {
    Example { user: 0, items: items.to_vec(), timestamps: times.to_vec(), target, target_timestamp: 0 }
}

#[test]
fn batch_example() {
    let cats = vec![vec![], vec![0], vec![1, 2]];
    let b = make_batches(&[example(&[1, 2], &[10, 25], 1)], &cats, 3, BatchOptions { batch_size: 4, max_len: 4, shuffle_seed: None })
        .unwrap();
    assert_eq!(b.len(), 1);
    let b = &b[0];
    assert_eq!(b.item_indices, [0, 0, 1, 2]);
    assert_eq!(b.intervals, [0, 0, 0, 15]);
    assert_eq!(b.timestamps, [0, 0, 10, 25]);
    assert_eq!(b.valid_lengths, [2]);
    assert_eq!(b.target_categories, [0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 1, 1]);
    assert_eq!(b.pad_mask(), [true, true, false, false]);
}

#[test]
fn batch_truncation_restarts_intervals() {
    let b = make_batches(&[example(&[1, 2, 3], &[5, 9, 20], 1)], &[], 0, BatchOptions { batch_size: 1, max_len: 2, shuffle_seed: None })
        .unwrap();
    assert_eq!(b[0].item_indices, [2, 3]);
    assert_eq!(b[0].intervals, [0, 11]);
}

#[test]
fn batch_sizes_and_shuffle_determinism() {
    let exs: Vec<Example> = (1..=7).map(|i| example(&[i], &[i as i64], i)).collect();
    let opts = BatchOptions { batch_size: 3, max_len: 2, shuffle_seed: Some(11) };
    let a = make_batches(&exs, &[], 0, opts).unwrap();
    assert_eq!(a.iter().map(|b| b.batch_size).collect::<Vec<_>>(), [3, 3, 1]);
    assert_eq!(a, make_batches(&exs, &[], 0, opts).unwrap());
    let mut targets: Vec<usize> = a.iter().flat_map(|b| b.target_index.clone()).collect();
    targets.sort();
    assert_eq!(targets, (1..=7).collect::<Vec<_>>());
    let c = make_batches(&exs, &[], 0, BatchOptions { shuffle_seed: Some(12), ..opts }).unwrap();
    assert_ne!(
        a.iter().flat_map(|b| b.target_index.clone()).collect::<Vec<_>>(),
        c.iter().flat_map(|b| b.target_index.clone()).collect::<Vec<_>>()
    );
}

proptest! {
    #[test]
    fn batch_invariants(lens in prop::collection::vec(1usize..12, 1..10), l in 1usize..8, bs in 1usize..4) {
        let exs: Vec<Example> = lens.iter().map(|&n| {
            let items: Vec<usize> = (1..=n).collect();
            let times: Vec<i64> = (0..n as i64).map(|t| t * t).collect();
            example(&items, &times, n + 1)
        }).collect();
        for b in make_batches(&exs, &[], 0, BatchOptions { batch_size: bs, max_len: l, shuffle_seed: Some(1) }).unwrap() {
            for r in 0..b.batch_size {
                let v = b.valid_lengths[r];
                prop_assert!(v >= 1 && v <= l);
                prop_assert!(b.target_index[r] != 0);
                for k in 0..l {
                    let i = r * l + k;
                    if k < l - v {
                        prop_assert_eq!((b.item_indices[i], b.timestamps[i], b.intervals[i]), (0, 0, 0));
                    } else {
                        prop_assert!(b.item_indices[i] != 0 && b.intervals[i] >= 0);
                    }
                }
                prop_assert_eq!(b.intervals[r * l + l - v], 0);
            }
        }
    }
}

#[test]
fn histogram_bins() {
    // Width 29/3: 0 -> bin 0, 10 -> bin 1, 20 and 29 -> bin 2.
    let log = log_of(&[("u", "a", 0), ("u", "b", 10), ("u", "c", 20), ("u", "d", 29)]);
    assert_eq!(time_histogram(&log, 3), [1, 1, 2]);
    assert_eq!(time_histogram(&log, 1), [4]);
    assert_eq!(bin_counts(&[7, 7, 7], 4), [3, 0, 0, 0]);
}

proptest! {
    #[test]
    fn histogram_matches_float_binning(ts in prop::collection::vec(0i64..1_000_000, 1..100), bins in 1usize..40) {
        let counts = bin_counts(&ts, bins);
        prop_assert_eq!(counts.iter().sum::<usize>(), ts.len());
        let lo = *ts.iter().min().unwrap() as f64;
        let hi = *ts.iter().max().unwrap() as f64;
        let mut oracle = vec![0usize; bins];
        for &t in &ts {
            let b = if hi == lo { 0 } else { (((t as f64 - lo) / ((hi - lo) / bins as f64)).floor() as usize).min(bins - 1) };
            oracle[b] += 1;
        }
        // Float bin edges may round a boundary value either way; totals per
        // bin must still agree to within the number of exact-boundary hits.
        let boundary = ts.iter().filter(|&&t| ((t as f64 - lo) * bins as f64 / (hi - lo).max(1.0)).fract() == 0.0).count();
        let diff: usize = counts.iter().zip(&oracle).map(|(a, b)| a.abs_diff(*b)).sum();
        prop_assert!(diff <= 2 * boundary);
    }
}

#[test]
fn stats_arithmetic() {
    let log = log_of(&[("u1", "a", 1), ("u1", "b", 2), ("u2", "a", 3)]);
    let s = DatasetStats::of(&log, 0);
    assert_eq!((s.n_users, s.n_items, s.n_actions), (2, 2, 3));
    assert!((s.sparsity - 0.25).abs() < 1e-12);
    assert!((s.avg_actions_per_user - 1.5).abs() < 1e-12);
    let empty = DatasetStats::of(&InteractionLog::default(), 0);
    assert!(empty.empty);
    // Reported counts of a public benchmark give 8.63 actions per user.
    let avg: f64 = 167_597.0 / 19_412.0;
    assert!((avg - 8.6337).abs() < 1e-4);
}

#[test]
fn feature_table_round_trip() {
    let t = FeatureTable::new(2, vec![("b".into(), vec![1.0, -2.5]), ("a".into(), vec![0.25, 3.0])]).unwrap();
    let bytes = t.to_bytes();
    assert!(bytes.starts_with(b"HMFT\t1\t2\t2\nb\t0\na\t1\n"));
    assert_eq!(bytes.len(), "HMFT\t1\t2\t2\nb\t0\na\t1\n".len() + 16);
    let back = FeatureTable::from_bytes(&bytes, Path::new("x")).unwrap();
    assert_eq!(back, t);
    assert_eq!(back.get("a").unwrap(), [0.25, 3.0]);

    // Offsets may be listed in any order.
    let mut shuffled = b"HMFT\t1\t2\t1\na\t1\nb\t0\n".to_vec();
    shuffled.extend(5.0f32.to_le_bytes());
    shuffled.extend(7.0f32.to_le_bytes());
    let t = FeatureTable::from_bytes(&shuffled, Path::new("x")).unwrap();
    assert_eq!(t.get("a").unwrap(), [7.0]);
    assert_eq!(t.get("b").unwrap(), [5.0]);
}

#[test]
fn feature_table_rejects_corruption() {
    let t = FeatureTable::new(2, vec![("a".into(), vec![1.0, 2.0])]).unwrap();
    let mut bytes = t.to_bytes();
    bytes.pop();
    assert!(FeatureTable::from_bytes(&bytes, Path::new("x")).is_err());
    let mut dup = b"HMFT\t1\t2\t1\na\t0\nb\t0\n".to_vec();
    dup.extend([0u8; 8]);
    assert!(FeatureTable::from_bytes(&dup, Path::new("x")).is_err());
    assert!(FeatureTable::from_bytes(b"HMFX\t1\t0\t1\n", Path::new("x")).is_err());
}

#[test]
fn dataset_indexes_items_lexicographically() {
    let log = log_of(&[("u", "b", 1), ("u", "a", 2), ("u", "c", 3)]);
    let items = vec![ItemMeta { item: "c".into(), categories: BTreeSet::from([2]) }];
    let ds = Dataset::build(&log, &items, None, None).unwrap();
    assert_eq!(ds.item_tokens, ["a", "b", "c"]);
    assert_eq!(ds.sequences[0].items, [2, 1, 3]);
    assert_eq!(ds.n_categories, 3);
    assert_eq!(ds.item_categories[3], [2]);
    assert_eq!(ds.time_origin, 1);
    assert_eq!(ds.text.rows(), 4);

    let table = FeatureTable::new(1, vec![("a".into(), vec![1.0])]).unwrap();
    assert!(Dataset::build(&log, &items, Some(&table), None).is_err());
}

fn small_synth(seed: u64, drift: bool) -> SynthConfig {
    SynthConfig { n_users: 50, n_items: 30, seed, drift, ..SynthConfig::default() }
}

#[test]
fn synth_is_deterministic_on_disk() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { seed: 7, ..small_synth(7, true) };
    generate(&cfg).unwrap().write(a.path()).unwrap();
    generate(&cfg).unwrap().write(b.path()).unwrap();
    for f in [INTERACTIONS_FILE, ITEMS_FILE, TXT_FEATURES_FILE, IMG_FEATURES_FILE, STATS_FILE] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let ds = Dataset::load(a.path(), LoadOptions::default()).unwrap();
    assert_eq!(ds.n_items(), 30);
    assert_eq!(ds.n_users(), 50);
    assert_eq!(ds.text.dim, 16);
}

#[test]
fn synth_survives_five_core() {
    for seed in 0..5 {
        for drift in [false, true] {
            let cfg = SynthConfig { min_len: 6, ..small_synth(seed, drift) };
            let data = generate(&cfg).unwrap();
            assert_eq!(kcore_filter(&data.log, 5), data.log);
            assert!(data.log.users().all(|(_, e)| e.len() >= 6));
        }
    }
}

#[test]
fn synth_drift_shifts_categories() {
    for seed in 0..3 {
        let on = generate(&small_synth(seed, true)).unwrap();
        let off = generate(&small_synth(seed, false)).unwrap();
        let (a, b) = (drift_statistic(&on.log, &on.items), drift_statistic(&off.log, &off.items));
        assert!(a > b, "seed {seed}: drift {a} vs baseline {b}");
    }
}

#[test]
fn synth_same_category_features_correlate() {
    let data = generate(&small_synth(3, false)).unwrap();
    let cos = |a: &[f32], b: &[f32]| {
        let d: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        d / (a.iter().map(|x| x * x).sum::<f32>().sqrt() * b.iter().map(|x| x * x).sum::<f32>().sqrt())
    };
    let (mut same, mut diff) = (Vec::new(), Vec::new());
    for (i, a) in data.items.iter().enumerate() {
        for b in &data.items[i + 1..] {
            let c = cos(data.text.get(&a.item).unwrap(), data.text.get(&b.item).unwrap());
            if a.categories.is_disjoint(&b.categories) { diff.push(c) } else { same.push(c) }
        }
    }
    let mean = |v: &[f32]| v.iter().sum::<f32>() / v.len() as f32;
    assert!(mean(&same) > mean(&diff) + 0.2, "{} vs {}", mean(&same), mean(&diff));
}

#[test]
fn synth_rejects_tiny_catalogs() {
    assert!(matches!(generate(&SynthConfig { n_items: 1, ..SynthConfig::default() }), Err(DataError::Synth(_))));
}

#[test]
fn prepare_filters_and_writes() {
    let raw = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let data = generate(&small_synth(1, false)).unwrap();
    let mut log_text = data.log.to_tsv();
    log_text.push_str("lonely\ti0001\t1\n");
    std::fs::write(raw.path().join("i.tsv"), log_text).unwrap();
    write_items(&data.items, &raw.path().join("m.tsv")).unwrap();
    data.text.write(&raw.path().join("t.hmft")).unwrap();
    data.image.write(&raw.path().join("v.hmft")).unwrap();
    let stats = prepare(
        &RawInputs {
            interactions: &raw.path().join("i.tsv"),
            items: &raw.path().join("m.tsv"),
            text_features: &raw.path().join("t.hmft"),
            image_features: &raw.path().join("v.hmft"),
        },
        5,
        out.path(),
    )
    .unwrap();
    assert_eq!(stats.n_users, 50);
    let json: DatasetStats = serde_json::from_str(&std::fs::read_to_string(out.path().join(STATS_FILE)).unwrap()).unwrap();
    assert_eq!(json, stats);
    let ds = Dataset::load(out.path(), LoadOptions { text: true, image: false }).unwrap();
    assert_eq!(ds.image.dim, 1);
    assert!(ds.image.data.iter().all(|&x| x == 0.0));
}

#[test]
fn load_skips_disabled_feature_files() {
    let dir = tempfile::tempdir().unwrap();
    generate(&small_synth(2, false)).unwrap().write(dir.path()).unwrap();
    std::fs::remove_file(dir.path().join(IMG_FEATURES_FILE)).unwrap();
    assert!(Dataset::load(dir.path(), LoadOptions::default()).is_err());
    assert!(Dataset::load(dir.path(), LoadOptions { text: true, image: false }).is_ok());
}
