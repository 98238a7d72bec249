use std::fs;

use drp_core::metrics::{heatmap, oracle_buckets, BucketMode, Stage, StagePredictions};
use drp_core::pipeline_io::{infer_spec, load, save, split_stats, time_split, DEFAULT_FRACTIONS};
use drp_core::synthworld::{generate_world, summarize, WorldConfig};

fn small() -> WorldConfig {
    WorldConfig {
        users: 60,
        queries: 50,
        items: 500,
        interactions: 4_000,
        seed: 21,
        ..Default::default()
    }
}

#[test]
fn generated_log_round_trips_byte_identically() {
    let data = generate_world(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    save(&a, &data).unwrap();
    let loaded = load(&a, false).unwrap();
    assert!(loaded.has_oracle());
    assert!(loaded.warnings.is_empty());
    assert_eq!(loaded.examples, data);
    save(&b, &loaded.examples).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let spec = infer_spec(&loaded.examples);
    let world_spec = small().feature_spec();
    assert!(spec.users <= world_spec.users && spec.items <= world_spec.items);
}

#[test]
fn time_split_partitions_sessions_in_order() {
    let data = generate_world(&small()).unwrap();
    let split = time_split(&data, DEFAULT_FRACTIONS).unwrap();
    let total = split.train.len() + split.validation.len() + split.test.len();
    assert_eq!(total, data.len());
    let last = |idx: &[usize]| {
        idx.iter()
            .map(|&i| data[i].example.timestamp)
            .max()
            .unwrap()
    };
    let first = |idx: &[usize]| {
        idx.iter()
            .map(|&i| data[i].example.timestamp)
            .min()
            .unwrap()
    };
    assert!(last(&split.train) < first(&split.validation));
    assert!(last(&split.validation) < first(&split.test));
    let stats = split_stats(&data, &split);
    assert_eq!(
        stats.iter().map(|s| s.impressions).sum::<usize>(),
        data.len()
    );
}

#[test]
fn oracle_heatmap_counts_match_generator_histogram() {
    let data = generate_world(&small()).unwrap();
    let hist = summarize(&data).area_counts;
    let buckets = oracle_buckets(&data).unwrap();
    let constant = vec![0.3; data.len()];
    let preds = StagePredictions {
        fixed: Some(constant.clone()),
        global: None,
        local: None,
    };
    let table = heatmap(BucketMode::Oracle, &buckets, &preds).unwrap();
    for area in 0..6u8 {
        let cell = table
            .cells
            .iter()
            .find(|c| c.stage == Stage::Fixed && c.area == Some(area))
            .unwrap();
        assert_eq!(cell.count, hist[area as usize]);
    }
}
