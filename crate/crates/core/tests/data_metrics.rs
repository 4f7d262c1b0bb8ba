//! Ingestion, sampling and metric checks against small hand-built oracles.

use std::collections::HashMap;

use patchlab::data::{read_descriptors, read_ubc, synth_generate, write_descriptors, write_ubc, DescriptorSet, PatchBatch};
use patchlab::metrics::{evaluate, fpr_at_recall, matching_map, matching_split, Polarity};
use patchlab::seed;
use patchlab::train::sample_batch;
use rand::Rng;
use rand_distr::StandardNormal;

#[test]
fn ubc_round_trip_matches_box_average() {
    let mut rng = seed::rng(11, "ubc");
    let n = 256;
    let levels: Vec<u32> = (0..n * 64 * 64).map(|_| rng.gen_range(0..=255)).collect();
    let patches: Vec<f32> = levels.iter().map(|&k| k as f32 / 255.0).collect();
    let ids: Vec<u32> = (0..n as u32).map(|i| i / 4).collect();
    let dir = tempfile::tempdir().unwrap();
    write_ubc(dir.path(), &PatchBatch::new(64, patches, ids.clone(), "levels").unwrap()).unwrap();
    let back = read_ubc(dir.path()).unwrap();
    assert_eq!(back.size, 32);
    assert_eq!(back.identity, ids);
    for p in 0..n {
        let src = &levels[p * 4096..(p + 1) * 4096];
        let got = back.patch(p);
        for i in 0..32 {
            for j in 0..32 {
                let s = src[2 * i * 64 + 2 * j] + src[2 * i * 64 + 2 * j + 1] + src[(2 * i + 1) * 64 + 2 * j] + src[(2 * i + 1) * 64 + 2 * j + 1];
                assert_eq!(got[i * 32 + j], s as f32 / 1020.0, "patch {p} at ({i}, {j})");
            }
        }
    }
}

#[test]
fn missing_container_files_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(read_ubc(dir.path()).is_err());
    let batch = synth_generate(1, 2, 2, 64).unwrap();
    write_ubc(dir.path(), &batch).unwrap();
    let sheet = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "bmp"))
        .unwrap();
    std::fs::remove_file(&sheet).unwrap();
    let err = read_ubc(dir.path()).unwrap_err().to_string();
    assert!(err.contains("missing bitmap"), "{err}");
}

#[test]
fn descriptor_files_round_trip() {
    let mut rng = seed::rng(12, "desc");
    let dim = 16;
    let mut unit = Vec::new();
    for _ in 0..50 {
        let v: Vec<f32> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        unit.extend(v.iter().map(|x| x / n));
    }
    let set = DescriptorSet::new(dim, unit, (0..50).map(|i| i / 2).collect()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    write_descriptors(&path, &set).unwrap();
    assert_eq!(read_descriptors(&path).unwrap(), set);
}

#[test]
fn sampled_batches_are_uniform_over_identities_and_members() {
    // patch k is filled with the value k so its source can be read back
    let (ids, per, size) = (20usize, 3usize, 4usize);
    let n = ids * per;
    let patches: Vec<f32> = (0..n).flat_map(|k| std::iter::repeat(k as f32).take(size * size)).collect();
    let labels: Vec<u32> = (0..n as u32).map(|k| k / per as u32).collect();
    let data = PatchBatch::new(size, patches, labels.clone(), "counts").unwrap();

    let (rounds, b) = (10_000usize, 5usize);
    let mut rng = seed::rng(13, "sampling");
    let mut id_count = vec![0usize; ids];
    let mut patch_count = vec![0usize; n];
    for _ in 0..rounds {
        let batch = sample_batch(&data, &mut rng, b).unwrap();
        assert_eq!(batch.len(), 2 * b);
        for pair in 0..b {
            let (a, p) = (batch.patch(2 * pair)[0] as usize, batch.patch(2 * pair + 1)[0] as usize);
            assert_ne!(a, p);
            assert_eq!(labels[a], labels[p]);
            assert_eq!(batch.identity[2 * pair], labels[a]);
            id_count[labels[a] as usize] += 1;
            patch_count[a] += 1;
            patch_count[p] += 1;
        }
    }
    let q = b as f64 / ids as f64;
    let (mean, sd) = (rounds as f64 * q, (rounds as f64 * q * (1.0 - q)).sqrt());
    for (i, &c) in id_count.iter().enumerate() {
        assert!((c as f64 - mean).abs() <= 3.0 * sd, "identity {i}: {c} vs {mean}");
    }
    // given its identity, each member lands in a pair with probability 2/3
    let q = q * 2.0 / 3.0;
    let (mean, sd) = (rounds as f64 * q, (rounds as f64 * q * (1.0 - q)).sqrt());
    for (k, &c) in patch_count.iter().enumerate() {
        assert!((c as f64 - mean).abs() <= 3.0 * sd, "patch {k}: {c} vs {mean}");
    }
}

#[test]
fn fpr_of_identical_distributions_is_the_recall() {
    let mut rng = seed::rng(14, "fpr");
    let pos: Vec<f64> = (0..20_000).map(|_| rng.sample(StandardNormal)).collect();
    let neg: Vec<f64> = (0..20_000).map(|_| rng.sample(StandardNormal)).collect();
    let fpr = fpr_at_recall(&pos, &neg, 0.95, Polarity::LargerIsSimilar).unwrap();
    assert!((fpr - 0.95).abs() < 0.01, "{fpr}");
}

#[test]
fn fpr_golden_fixture() {
    let pos = [0.9, 0.85, 0.8, 0.75, 0.7, 0.65, 0.6, 0.55, 0.5, 0.1];
    let neg = [0.0, 0.05, 0.1, 0.2, 0.3, 0.4, 0.02, 0.08, 0.09, 0.95];
    let at = |r| fpr_at_recall(&pos, &neg, r, Polarity::LargerIsSimilar).unwrap();
    // all ten positives: threshold 0.1, the tied negative counts
    assert_eq!(at(0.95), 0.5);
    assert_eq!(at(1.0), 0.5);
    assert_eq!(at(0.8), 0.1);
    assert_eq!(at(0.5), 0.1);
    assert_eq!(at(0.1), 0.1);
    // the same scores as distances
    let flip = |v: &[f64]| v.iter().map(|x| 1.0 - x).collect::<Vec<_>>();
    assert_eq!(fpr_at_recall(&flip(&pos), &flip(&neg), 0.95, Polarity::SmallerIsSimilar).unwrap(), 0.5);
}

fn random_sphere(seed_value: u64, identities: usize, per: usize, dim: usize) -> DescriptorSet {
    let mut rng = seed::rng(seed_value, "sphere");
    let mut unit = Vec::new();
    for _ in 0..identities * per {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        unit.extend(v.iter().map(|x| (x / n) as f32));
    }
    DescriptorSet::new(dim, unit, (0..(identities * per) as u32).map(|i| i / per as u32).collect()).unwrap()
}

#[test]
fn random_descriptors_match_at_chance() {
    // one relevant item in a 100-item gallery: E[AP] = H_100 / 100
    let set = random_sphere(15, 100, 2, 128);
    let (q, g) = matching_split(&set);
    let map = matching_map(&set.subset(&q), &set.subset(&g)).unwrap();
    let expect = (1..=100).map(|r| 1.0 / r as f64).sum::<f64>() / 100.0;
    assert!((map - expect).abs() < 0.035, "{map} vs {expect}");

    let m = evaluate(&random_sphere(16, 200, 2, 128)).unwrap();
    assert!((m.fpr95 - 0.95).abs() < 0.03, "{}", m.fpr95);
}

#[test]
fn separated_clusters_evaluate_perfectly() {
    let set = random_sphere(17, 30, 1, 64);
    let mut unit = Vec::new();
    let mut labels = Vec::new();
    for i in 0..set.len() {
        for _ in 0..3 {
            unit.extend_from_slice(set.row(i));
            labels.push(i as u32);
        }
    }
    let m = evaluate(&DescriptorSet::new(64, unit, labels).unwrap()).unwrap();
    assert_eq!((m.fpr95, m.map_matching, m.map_retrieval), (0.0, 1.0, 1.0));
    assert_eq!(m.queries, 30);
}

#[test]
fn synthetic_data_is_deterministic_and_bounded() {
    let a = synth_generate(3, 10, 3, 32).unwrap();
    assert_eq!(a, synth_generate(3, 10, 3, 32).unwrap());
    assert_ne!(a.patches, synth_generate(4, 10, 3, 32).unwrap().patches);
    assert!(a.patches.iter().all(|v| (0.0..=1.0).contains(v)));
    let mut per: HashMap<u32, usize> = HashMap::new();
    for &id in &a.identity {
        *per.entry(id).or_default() += 1;
    }
    assert_eq!(per.len(), 10);
    assert!(per.values().all(|&c| c == 3));
}

#[test]
fn self_gallery_matching_is_perfect() {
    let set = random_sphere(18, 40, 1, 32);
    assert_eq!(matching_map(&set, &set).unwrap(), 1.0);
}
