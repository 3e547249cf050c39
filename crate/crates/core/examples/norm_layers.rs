//! BN against the two MBN variants on a batch whose infrared half is shifted.

use modnorm::norm::{modality_indices, ModalityTag, NormConfig, NormKind, NormLayer, StatsKey};
use modnorm::tensor::{Dims4, Tensor4};

fn main() -> modnorm::Result<()> {
    let dims = Dims4::new(8, 2, 2, 2);
    let tags: Vec<ModalityTag> = (0..8)
        .map(|n| if n % 2 == 0 { ModalityTag::Visible } else { ModalityTag::Infrared })
        .collect();
    let x = Tensor4::from_fn(dims, |n, c, h, w| {
        let base = ((n * 7 + c * 3 + h * 5 + w) % 11) as f64 / 5.0;
        if tags[n] == ModalityTag::Infrared { 2.0 * base + 3.0 } else { base }
    });

    for kind in NormKind::ALL {
        let mut layer = NormLayer::new(2, NormConfig::new(kind))?;
        let (y, _) = layer.forward_train(&x, &tags)?;
        print!("{kind:>13}:");
        for tag in ModalityTag::ALL {
            let mean = y.channel_mean(&modality_indices(&tags, tag))?;
            print!("  {tag} mean [{:+.3}, {:+.3}]", mean[0], mean[1]);
        }
        println!();
        for (key, stats) in layer.running_entries() {
            println!("{:>15} running mean {:?}", key.as_str(), stats.mean);
        }
    }

    // Evaluation uses the running statistics of each sample's own modality.
    let mut mbn = NormLayer::new(2, NormConfig::new(NormKind::MbnShared).with_momentum(1.0))?;
    mbn.forward_train(&x, &tags)?;
    let eval = mbn.forward_eval(&x, Some(&tags))?;
    println!("eval output, sample 1: {:?}", eval.sample_data(1));
    println!("infrared running var {:?}", mbn.running_stats(StatsKey::Modality(ModalityTag::Infrared)).map(|s| &s.var));
    Ok(())
}
