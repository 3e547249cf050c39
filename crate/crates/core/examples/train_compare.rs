//! Short BN vs MBN training run; `cargo run --release --example train_compare -- 6`.

use modnorm::data::{Dataset, SyntheticDatasetSpec};
use modnorm::model::{train, Model, ModelConfig, TrainConfig, TrainSchedule};
use modnorm::norm::NormKind;

fn main() -> modnorm::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let ds = Dataset::generate(&SyntheticDatasetSpec::default())?;
    let (train_ids, test_ids) = ds.identity_split(0.25)?;
    let config = TrainConfig {
        schedule: TrainSchedule {
            total_epochs: epochs,
            warmup_epochs: 1,
            decay: vec![(epochs.saturating_sub(1).max(2), 0.1)],
            ..Default::default()
        },
        ..Default::default()
    };
    for kind in [NormKind::Bn, NormKind::MbnShared, NormKind::MbnSpecific] {
        let model = Model::build(ModelConfig {
            backbone_norm: kind,
            head_norm: kind,
            num_classes: train_ids.len(),
            ..Default::default()
        })?;
        let (_, log) = train(model, &ds, &train_ids, &test_ids, &config)?;
        for m in &log {
            println!("{kind:>13} epoch {:>2}: loss {:.4} rank-1 {:.3} mAP {:.3}", m.epoch, m.loss, m.rank1, m.map);
        }
    }
    Ok(())
}
