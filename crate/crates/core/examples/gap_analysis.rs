use modnorm::data::{sample_pk_batch, Dataset, PkBatchSpec, SyntheticDatasetSpec};
use modnorm::gap::{histogram, intra_batch_gap, per_stage_gap_trace, GapReport, Tap};
use modnorm::model::{Model, ModelConfig};
use modnorm::norm::{modality_indices, ModalityTag, NormConfig, NormKind, NormLayer};
use modnorm::tensor::Tensor4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> modnorm::Result<()> {
    let ds = Dataset::generate(&SyntheticDatasetSpec::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batches: Vec<_> = (0..3)
        .map(|_| sample_pk_batch(&ds, PkBatchSpec::default(), &mut rng))
        .collect::<modnorm::Result<_>>()?;

    let raw = intra_batch_gap(&batches[0].images, &batches[0].tags)?;
    println!("input mean gap per channel {:.3?}", raw.mean_gap);

    for kind in [NormKind::Bn, NormKind::MbnShared] {
        let layer = NormLayer::new(8, NormConfig::new(kind))?;
        let outputs: Vec<Tensor4> = batches
            .iter()
            .map(|b| Ok(layer.normalize_train(&b.images, &b.tags)?.1.normalized))
            .collect::<modnorm::Result<_>>()?;
        let pairs: Vec<_> = outputs.iter().zip(&batches).map(|(o, b)| (o, &b.tags[..])).collect();
        let report = GapReport::from_batches(&pairs)?;
        let inter = report.inter_batch_dispersion.as_ref().expect("three batches");
        println!(
            "{kind}: intra gap median {:.2e}, infrared inter-batch dispersion ch0 {:.2e}",
            report.intra_gap_summary.median,
            inter.mean_dispersion[ModalityTag::Infrared.index()][0]
        );
    }

    let plane0 = |tag| -> Vec<f64> {
        modality_indices(&batches[0].tags, tag)
            .into_iter()
            .flat_map(|n| batches[0].images.plane(n, 0).to_vec())
            .collect()
    };
    for tag in ModalityTag::ALL {
        let h = histogram(&plane0(tag), 10)?;
        println!("{tag} channel 0 histogram {:?}", h.counts);
    }

    for kind in [NormKind::Bn, NormKind::MbnShared] {
        let model = Model::build(ModelConfig { backbone_norm: kind, head_norm: kind, ..Default::default() })?;
        let trace = per_stage_gap_trace(&model, &batches[0], Tap::PreAffine)?;
        let cells: Vec<String> = trace.iter().map(|(s, g)| format!("{s}={g:.1e}")).collect();
        println!("{kind} trace: {}", cells.join(" "));
    }
    Ok(())
}
