//! Model checkpoints: `<stem>.bin` holds every tensor as little-endian f32,
//! back to back; `<stem>.manifest` records the model configuration and one
//! section per tensor with its shape, element offset, norm kind and modality.

use std::fs;
use std::path::Path;

use ini::Ini;

use super::loss::LossConfig;
use super::network::{Model, ModelConfig};
use crate::data::{parse, parse_list, write_ini};
use crate::error::{Error, Result};

const FORMAT: &str = "modnorm-checkpoint-v1";

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

pub fn save(model: &Model, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let c = model.config();
    let mut manifest = Ini::new();
    manifest
        .with_general_section()
        .set("format", FORMAT)
        .set("dtype", "f32le");
    manifest
        .with_section(Some("model"))
        .set("in_channels", c.in_channels.to_string())
        .set("input_height", c.input_hw.0.to_string())
        .set("input_width", c.input_hw.1.to_string())
        .set("widths", join(&c.widths))
        .set("embedding_dim", c.embedding_dim.to_string())
        .set("num_classes", c.num_classes.to_string())
        .set("backbone_norm", c.backbone_norm.as_str())
        .set("head_norm", c.head_norm.as_str())
        .set("head_bias", c.head_bias.to_string())
        .set("norm_eps", c.norm_eps.to_string())
        .set("norm_momentum", c.norm_momentum.to_string())
        .set("loss", c.loss.kind.as_str())
        .set("triplet_margin", c.loss.triplet_margin.to_string())
        .set("circle_margin", c.loss.circle_margin.to_string())
        .set("circle_scale", c.loss.circle_scale.to_string())
        .set("init_seed", c.init_seed.to_string());

    let mut blob = Vec::new();
    let mut offset = 0usize;
    for t in model.named_tensors() {
        manifest
            .with_section(Some(format!("tensor.{}", t.name)))
            .set("shape", join(&t.shape))
            .set("offset", offset.to_string())
            .set("norm_kind", t.norm_kind.map_or("none", |k| k.as_str()))
            .set("modality", t.modality.unwrap_or("none"))
            .set("trainable", t.trainable.to_string());
        for &v in t.values {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        offset += t.values.len();
    }
    fs::write(dir.join(format!("{stem}.bin")), blob)?;
    write_ini(&manifest, &dir.join(format!("{stem}.manifest")))
}

/// Rebuilds the model recorded by [`save`]. Values come back at f32 precision.
pub fn load(dir: &Path, stem: &str) -> Result<Model> {
    let manifest = Ini::load_from_file(dir.join(format!("{stem}.manifest")))
        .map_err(|e| Error::format("checkpoint manifest", e.to_string()))?;
    if manifest.general_section().get("format") != Some(FORMAT) {
        return Err(Error::format("checkpoint manifest", "unknown format"));
    }
    let section = manifest
        .section(Some("model"))
        .ok_or_else(|| Error::format("checkpoint manifest", "missing [model]"))?;
    let field = |key: &str| {
        section
            .get(key)
            .ok_or_else(|| Error::format("checkpoint manifest", format!("missing `{key}`")))
    };
    let config = ModelConfig {
        in_channels: parse(field("in_channels")?)?,
        input_hw: (parse(field("input_height")?)?, parse(field("input_width")?)?),
        widths: parse_list(field("widths")?)?,
        embedding_dim: parse(field("embedding_dim")?)?,
        num_classes: parse(field("num_classes")?)?,
        backbone_norm: field("backbone_norm")?.parse()?,
        head_norm: field("head_norm")?.parse()?,
        head_bias: parse(field("head_bias")?)?,
        norm_eps: parse(field("norm_eps")?)?,
        norm_momentum: parse(field("norm_momentum")?)?,
        loss: LossConfig {
            kind: field("loss")?.parse()?,
            triplet_margin: parse(field("triplet_margin")?)?,
            circle_margin: parse(field("circle_margin")?)?,
            circle_scale: parse(field("circle_scale")?)?,
        },
        init_seed: parse(field("init_seed")?)?,
    };
    let mut model = Model::build(config)?;

    let blob = fs::read(dir.join(format!("{stem}.bin")))?;
    let values: Vec<f64> = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let expected: Vec<(String, Vec<usize>)> = model
        .named_tensors()
        .into_iter()
        .map(|t| (t.name, t.shape))
        .collect();
    for (name, shape) in expected {
        let entry = manifest
            .section(Some(format!("tensor.{name}")))
            .ok_or_else(|| Error::format("checkpoint manifest", format!("missing tensor `{name}`")))?;
        let recorded: Vec<usize> = parse_list(entry.get("shape").unwrap_or(""))?;
        if recorded != shape {
            return Err(Error::format(
                "checkpoint manifest",
                format!("tensor `{name}` has shape {recorded:?}, model expects {shape:?}"),
            ));
        }
        let offset: usize = parse(entry.get("offset").unwrap_or(""))?;
        let len: usize = shape.iter().product();
        let src = values
            .get(offset..offset + len)
            .ok_or_else(|| Error::format("checkpoint blob", format!("tensor `{name}` out of range")))?;
        model
            .tensor_mut(&name)
            .expect("names come from the model")
            .copy_from_slice(src);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norm::NormKind;

    #[test]
    fn round_trip_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::build(ModelConfig {
            in_channels: 2,
            input_hw: (4, 4),
            widths: vec![3, 4],
            embedding_dim: 4,
            num_classes: 5,
            backbone_norm: NormKind::MbnSpecific,
            head_norm: NormKind::MbnShared,
            init_seed: 9,
            ..Default::default()
        })
        .unwrap();
        save(&model, dir.path(), "ckpt").unwrap();
        let back = load(dir.path(), "ckpt").unwrap();
        assert_eq!(back.config(), model.config());
        for (a, b) in model.named_tensors().iter().zip(back.named_tensors()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.values.iter().zip(b.values) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        save(&back, dir.path(), "again").unwrap();
        assert_eq!(
            fs::read(dir.path().join("ckpt.bin")).unwrap(),
            fs::read(dir.path().join("again.bin")).unwrap()
        );
    }
}
