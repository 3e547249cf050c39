mod common;

use common::rng;
use modnorm::data::{check_pk_composition, sample_pk_batch, Dataset, PkBatchSpec, PkSampler, SyntheticDatasetSpec};
use modnorm::norm::ModalityTag;
use std::collections::BTreeMap;

fn default_dataset() -> Dataset {
    Dataset::generate(&SyntheticDatasetSpec::default()).unwrap()
}

/// Counts the composition directly rather than through `check_pk_composition`.
fn composition_counts(identities: &[usize], tags: &[ModalityTag]) -> BTreeMap<usize, [usize; 2]> {
    let mut counts = BTreeMap::new();
    for (&id, &tag) in identities.iter().zip(tags) {
        counts.entry(id).or_insert([0, 0])[tag.index()] += 1;
    }
    counts
}

#[test]
fn thousand_batches_have_exact_composition() {
    let ds = default_dataset();
    for (p, k) in [(4, 4), (6, 8), (1, 1), (32, 12)] {
        let spec = PkBatchSpec::new(p, k).unwrap();
        let mut r = rng(p as u64 * 100 + k as u64);
        for _ in 0..1000 {
            let batch = sample_pk_batch(&ds, spec, &mut r).unwrap();
            assert_eq!(batch.len(), 2 * p * k);
            let counts = composition_counts(&batch.identities, &batch.tags);
            assert_eq!(counts.len(), p);
            assert!(counts.values().all(|c| *c == [k, k]));
            assert!(check_pk_composition(&batch, spec));
            for (n, &i) in batch.indices.iter().enumerate() {
                assert_eq!(ds.identity_of(i), batch.identities[n]);
                assert_eq!(ds.modality_of(i), batch.tags[n]);
            }
        }
    }
}

#[test]
fn six_by_eight_gives_96_samples() {
    assert_eq!(PkBatchSpec::new(6, 8).unwrap().batch_size(), 96);
}

#[test]
fn identity_coverage_is_uniform() {
    let ds = default_dataset();
    let spec = PkBatchSpec::new(4, 4).unwrap();
    let draws = 4000;
    let mut hits = vec![0usize; 32];
    let mut r = rng(77);
    for _ in 0..draws {
        let batch = sample_pk_batch(&ds, spec, &mut r).unwrap();
        for id in composition_counts(&batch.identities, &batch.tags).keys() {
            hits[*id] += 1;
        }
    }
    let p = 4.0 / 32.0;
    let mean = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for (id, &h) in hits.iter().enumerate() {
        assert!((h as f64 - mean).abs() <= 5.0 * sigma, "identity {id}: {h} vs {mean}");
    }
}

#[test]
fn sampling_is_deterministic() {
    let ds = default_dataset();
    let sampler = PkSampler::new(PkBatchSpec::default(), (0..24).collect()).unwrap();
    let run = |seed| {
        let mut r = rng(seed);
        (0..20)
            .map(|_| sampler.sample_batch(&ds, &mut r).unwrap().indices)
            .collect::<Vec<_>>()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
    let epochs = |seed| sampler.epoch_batches(&ds, &mut rng(seed)).unwrap();
    assert_eq!(epochs(3), epochs(3));
}

#[test]
fn epoch_batches_are_valid_and_disjoint() {
    let ds = default_dataset();
    let spec = PkBatchSpec::default();
    let sampler = PkSampler::new(spec, (0..24).collect()).unwrap();
    let batches = sampler.epoch_batches(&ds, &mut rng(1)).unwrap();
    let mut seen = std::collections::HashSet::new();
    for b in &batches {
        let batch = ds.batch(b).unwrap();
        assert!(check_pk_composition(&batch, spec));
        assert!(b.iter().all(|i| seen.insert(*i)));
    }
    // 24 identities × 3 chunks per modality, 4 identities per batch.
    assert!(batches.len() >= 16 && batches.len() <= 18, "{}", batches.len());
}
