use modnorm::model::{checkpoint, Model, ModelConfig};
use modnorm::norm::NormKind;

fn main() -> modnorm::Result<()> {
    let model = Model::build(ModelConfig {
        backbone_norm: NormKind::MbnShared,
        head_norm: NormKind::MbnSpecific,
        ..Default::default()
    })?;
    let dir = std::env::temp_dir().join("modnorm-checkpoint-example");
    checkpoint::save(&model, &dir, "model")?;
    let manifest = std::fs::read_to_string(dir.join("model.manifest"))?;
    println!("{}", manifest.lines().take(20).collect::<Vec<_>>().join("\n"));

    let back = checkpoint::load(&dir, "model")?;
    for t in back.named_tensors().iter().filter(|t| t.name.starts_with("head")) {
        println!("{:<28} {:?} trainable={}", t.name, t.shape, t.trainable);
    }
    Ok(())
}
