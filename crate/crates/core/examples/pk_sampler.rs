use modnorm::data::{check_pk_composition, Dataset, PkBatchSpec, PkSampler, SyntheticDatasetSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> modnorm::Result<()> {
    let ds = Dataset::generate(&SyntheticDatasetSpec::default())?;
    println!("{} samples, per-sample dims {:?}", ds.len(), ds.spec().sample_dims());
    let (train, test) = ds.identity_split(0.25)?;
    println!("train identities {train:?}\ntest identities {test:?}");

    let spec = PkBatchSpec::new(6, 8)?;
    println!("P=6 K=8 gives batches of {}", spec.batch_size());

    let sampler = PkSampler::new(PkBatchSpec::default(), train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = sampler.sample_batch(&ds, &mut rng)?;
    println!("one batch: identities {:?}", batch.identities);
    println!("           modalities {}", batch.tags.iter().map(|t| t.to_string()).collect::<String>());
    println!("valid 2PK composition: {}", check_pk_composition(&batch, sampler.spec()));

    let epoch = sampler.epoch_batches(&ds, &mut rng)?;
    println!("one epoch without replacement: {} batches", epoch.len());
    Ok(())
}
