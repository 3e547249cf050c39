//! Synthetic two-modality identity data and 2PK batch sampling.
//!
//! Every identity owns a latent code that a fixed random linear map expands
//! into a `(C, H, W)` image. Infrared samples additionally pass through a
//! per-channel affine distortion drawn once per dataset, which gives every
//! mixed mini-batch a measurable modality distribution gap.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ini::Ini;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::norm::{modality_indices, ModalityTag};
use crate::tensor::{Dims4, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDatasetSpec {
    pub num_identities: usize,
    pub images_per_identity_per_modality: usize,
    pub latent_dim: usize,
    /// `(C, H, W)`.
    pub image_dims: (usize, usize, usize),
    pub modality_offset_scale: f64,
    pub intra_class_noise: f64,
    pub rng_seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            num_identities: 32,
            images_per_identity_per_modality: 12,
            latent_dim: 16,
            image_dims: (8, 8, 8),
            modality_offset_scale: 1.5,
            intra_class_noise: 1.0,
            rng_seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.image_dims;
        if [
            self.num_identities,
            self.images_per_identity_per_modality,
            self.latent_dim,
            c,
            h,
            w,
        ]
        .contains(&0)
        {
            return Err(Error::Config("dataset counts and dims must be >= 1".into()));
        }
        if !(self.modality_offset_scale >= 0.0 && self.intra_class_noise >= 0.0) {
            return Err(Error::Config("noise and offset scales must be >= 0".into()));
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.num_identities * 2 * self.images_per_identity_per_modality
    }

    pub fn sample_dims(&self) -> Dims4 {
        let (c, h, w) = self.image_dims;
        Dims4::new(1, c, h, w)
    }
}

/// The per-channel distortion applied to infrared samples: `x ↦ scale·x + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityTransform {
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    /// `(1, C, H, W)`.
    pub image: Tensor4,
    pub identity: usize,
    pub modality: ModalityTag,
}

/// A mini-batch: images, their modality tags and identity labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityBatch {
    pub images: Tensor4,
    pub tags: Vec<ModalityTag>,
    pub identities: Vec<usize>,
    /// Positions of the samples in the source dataset.
    pub indices: Vec<usize>,
}

impl ModalityBatch {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Swaps every V tag for I and vice versa.
    pub fn with_swapped_tags(&self) -> Self {
        Self {
            tags: self.tags.iter().map(|t| t.other()).collect(),
            ..self.clone()
        }
    }
}

/// Samples stored identity-major, then modality (V before I), then image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    spec: SyntheticDatasetSpec,
    images: Tensor4,
    transform: ModalityTransform,
}

impl Dataset {
    /// Deterministically generates the dataset described by `spec`.
    pub fn generate(spec: &SyntheticDatasetSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
        let (c, h, w) = spec.image_dims;
        let pixels = c * h * w;
        let latent = spec.latent_dim;

        let norm_scale = 1.0 / (latent as f64).sqrt();
        let projection: Vec<f64> = (0..pixels * latent)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * norm_scale)
            .collect();
        let offset: Vec<f64> = (0..c)
            .map(|_| spec.modality_offset_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let scale: Vec<f64> = (0..c)
            .map(|_| (0.25 * spec.modality_offset_scale * rng.sample::<f64, _>(StandardNormal)).exp())
            .collect();

        let per_modality = spec.images_per_identity_per_modality;
        let mut data = Vec::with_capacity(spec.total_samples() * pixels);
        for _ in 0..spec.num_identities {
            let z: Vec<f64> = (0..latent).map(|_| rng.sample(StandardNormal)).collect();
            let clean: Vec<f64> = projection
                .chunks_exact(latent)
                .map(|row| row.iter().zip(&z).map(|(a, b)| a * b).sum())
                .collect();
            for tag in ModalityTag::ALL {
                for _ in 0..per_modality {
                    for (p, &v) in clean.iter().enumerate() {
                        let noise: f64 = rng.sample(StandardNormal);
                        let mut value = v + spec.intra_class_noise * noise;
                        if tag == ModalityTag::Infrared {
                            let ch = p / (h * w);
                            value = scale[ch] * value + offset[ch];
                        }
                        data.push(value);
                    }
                }
            }
        }
        let images = Tensor4::from_vec(Dims4::new(spec.total_samples(), c, h, w), data)?;
        Ok(Self {
            spec: spec.clone(),
            images,
            transform: ModalityTransform { scale, offset },
        })
    }

    pub fn spec(&self) -> &SyntheticDatasetSpec {
        &self.spec
    }

    pub fn images(&self) -> &Tensor4 {
        &self.images
    }

    pub fn transform(&self) -> &ModalityTransform {
        &self.transform
    }

    pub fn len(&self) -> usize {
        self.images.dims().n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn identity_of(&self, index: usize) -> usize {
        index / (2 * self.spec.images_per_identity_per_modality)
    }

    pub fn modality_of(&self, index: usize) -> ModalityTag {
        let m = self.spec.images_per_identity_per_modality;
        if index % (2 * m) < m {
            ModalityTag::Visible
        } else {
            ModalityTag::Infrared
        }
    }

    /// Dataset positions of one identity's images in one modality.
    pub fn indices_of(&self, identity: usize, tag: ModalityTag) -> Vec<usize> {
        let m = self.spec.images_per_identity_per_modality;
        let start = identity * 2 * m + tag.index() * m;
        (start..start + m).collect()
    }

    pub fn sample(&self, index: usize) -> Result<LabeledSample> {
        Ok(LabeledSample {
            image: self.images.select(&[index])?,
            identity: self.identity_of(index),
            modality: self.modality_of(index),
        })
    }

    /// Assembles a batch from dataset positions, keeping their order.
    pub fn batch(&self, indices: &[usize]) -> Result<ModalityBatch> {
        Ok(ModalityBatch {
            images: self.images.select(indices)?,
            tags: indices.iter().map(|&i| self.modality_of(i)).collect(),
            identities: indices.iter().map(|&i| self.identity_of(i)).collect(),
            indices: indices.to_vec(),
        })
    }

    /// Every sample of the given identities in one modality, identity-major.
    pub fn modality_set(&self, identities: &[usize], tag: ModalityTag) -> Result<ModalityBatch> {
        let indices: Vec<usize> = identities
            .iter()
            .flat_map(|&id| self.indices_of(id, tag))
            .collect();
        self.batch(&indices)
    }

    /// Disjoint identity split: the last `test_fraction` of identities (at
    /// least one) are held out for retrieval evaluation.
    pub fn identity_split(&self, test_fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
        let total = self.spec.num_identities;
        let test = ((total as f64 * test_fraction).round() as usize).max(1);
        if test >= total {
            return Err(Error::Config(format!(
                "test fraction {test_fraction} leaves no training identities out of {total}"
            )));
        }
        Ok(((0..total - test).collect(), (total - test..total).collect()))
    }

    /// Writes `<stem>.bin` (little-endian f32 samples) and `<stem>.manifest`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut blob = Vec::with_capacity(self.images.data().len() * 4);
        for &v in self.images.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::File::create(dir.join(format!("{stem}.bin")))?.write_all(&blob)?;

        let mut manifest = Ini::new();
        let s = &self.spec;
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        manifest
            .with_general_section()
            .set("format", "modnorm-dataset-v1")
            .set("num_identities", s.num_identities.to_string())
            .set(
                "images_per_identity_per_modality",
                s.images_per_identity_per_modality.to_string(),
            )
            .set("latent_dim", s.latent_dim.to_string())
            .set("channels", s.image_dims.0.to_string())
            .set("height", s.image_dims.1.to_string())
            .set("width", s.image_dims.2.to_string())
            .set("modality_offset_scale", s.modality_offset_scale.to_string())
            .set("intra_class_noise", s.intra_class_noise.to_string())
            .set("rng_seed", s.rng_seed.to_string())
            .set("modality_offset", join(&self.transform.offset))
            .set("modality_scale", join(&self.transform.scale))
            .set("sample_order", "identity,modality(V;I),image")
            .set("dtype", "f32le");
        write_ini(&manifest, &dir.join(format!("{stem}.manifest")))
    }

    /// Reads a dataset written by [`save`](Self::save). Sample values come
    /// back at f32 precision.
    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let manifest = Ini::load_from_file(dir.join(format!("{stem}.manifest")))
            .map_err(|e| Error::format("dataset manifest", e.to_string()))?;
        let section = manifest.general_section();
        let field = |key: &str| {
            section
                .get(key)
                .ok_or_else(|| Error::format("dataset manifest", format!("missing `{key}`")))
        };
        if field("format")? != "modnorm-dataset-v1" {
            return Err(Error::format("dataset manifest", "unknown format"));
        }
        let spec = SyntheticDatasetSpec {
            num_identities: parse(field("num_identities")?)?,
            images_per_identity_per_modality: parse(field("images_per_identity_per_modality")?)?,
            latent_dim: parse(field("latent_dim")?)?,
            image_dims: (
                parse(field("channels")?)?,
                parse(field("height")?)?,
                parse(field("width")?)?,
            ),
            modality_offset_scale: parse(field("modality_offset_scale")?)?,
            intra_class_noise: parse(field("intra_class_noise")?)?,
            rng_seed: parse(field("rng_seed")?)?,
        };
        spec.validate()?;
        let transform = ModalityTransform {
            offset: parse_list(field("modality_offset")?)?,
            scale: parse_list(field("modality_scale")?)?,
        };
        if transform.offset.len() != spec.image_dims.0 || transform.scale.len() != spec.image_dims.0 {
            return Err(Error::format("dataset manifest", "transform length differs from channels"));
        }

        let mut blob = Vec::new();
        fs::File::open(dir.join(format!("{stem}.bin")))?.read_to_end(&mut blob)?;
        let (c, h, w) = spec.image_dims;
        let dims = Dims4::new(spec.total_samples(), c, h, w);
        if blob.len() != dims.len() * 4 {
            return Err(Error::format(
                "dataset blob",
                format!("{} bytes, expected {}", blob.len(), dims.len() * 4),
            ));
        }
        let data = blob
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Ok(Self {
            spec,
            images: Tensor4::from_vec(dims, data)?,
            transform,
        })
    }
}

pub(crate) fn write_ini(ini: &Ini, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    ini.write_to(&mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub(crate) fn parse<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::format("value", format!("cannot parse `{s}`")))
}

pub(crate) fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(parse).collect()
}

/// K visible and K infrared sample indices of one identity.
type ChunkPair = (Vec<usize>, Vec<usize>);

/// `P` persons per batch, `K` images per modality per person.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PkBatchSpec {
    pub p: usize,
    pub k: usize,
}

impl Default for PkBatchSpec {
    fn default() -> Self {
        Self { p: 4, k: 4 }
    }
}

impl PkBatchSpec {
    pub fn new(p: usize, k: usize) -> Result<Self> {
        let spec = Self { p, k };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.k == 0 {
            return Err(Error::Config(format!(
                "P and K must be >= 1, got P={} K={}",
                self.p, self.k
            )));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        2 * self.p * self.k
    }
}

/// 2PK sampler over a pool of identities.
#[derive(Debug, Clone)]
pub struct PkSampler {
    spec: PkBatchSpec,
    identities: Vec<usize>,
    with_replacement: bool,
}

impl PkSampler {
    pub fn new(spec: PkBatchSpec, identities: Vec<usize>) -> Result<Self> {
        spec.validate()?;
        if identities.len() < spec.p {
            return Err(Error::Sampler(format!(
                "P={} exceeds the {} available identities",
                spec.p,
                identities.len()
            )));
        }
        Ok(Self {
            spec,
            identities,
            with_replacement: false,
        })
    }

    /// Lets identities with fewer than K images in a modality be drawn with
    /// replacement instead of failing.
    pub fn with_replacement(mut self, enabled: bool) -> Self {
        self.with_replacement = enabled;
        self
    }

    pub fn spec(&self) -> PkBatchSpec {
        self.spec
    }

    pub fn identities(&self) -> &[usize] {
        &self.identities
    }

    /// One batch: P distinct identities drawn uniformly, then K visible and K
    /// infrared images of each. Layout is identity-major, V block before I block.
    pub fn sample_batch<R: Rng + ?Sized>(&self, dataset: &Dataset, rng: &mut R) -> Result<ModalityBatch> {
        let chosen = index::sample(rng, self.identities.len(), self.spec.p);
        let mut indices = Vec::with_capacity(self.spec.batch_size());
        for slot in chosen.iter() {
            let id = self.identities[slot];
            for tag in ModalityTag::ALL {
                let pool = dataset.indices_of(id, tag);
                if pool.len() >= self.spec.k {
                    indices.extend(index::sample(rng, pool.len(), self.spec.k).iter().map(|i| pool[i]));
                } else if self.with_replacement {
                    indices.extend((0..self.spec.k).map(|_| pool[rng.random_range(0..pool.len())]));
                } else {
                    return Err(Error::Sampler(format!(
                        "identity {id} has {} {tag} images, K={}",
                        pool.len(),
                        self.spec.k
                    )));
                }
            }
        }
        dataset.batch(&indices)
    }

    /// Partitions one epoch into 2PK batches without replacement: every
    /// identity's images are reshuffled and cut into K-sized chunks per
    /// modality, and batches draw P distinct identities that still have a
    /// chunk left. Leftover chunks that cannot fill a batch are dropped.
    pub fn epoch_batches<R: Rng + ?Sized>(&self, dataset: &Dataset, rng: &mut R) -> Result<Vec<Vec<usize>>> {
        let k = self.spec.k;
        let mut chunks: Vec<(usize, Vec<ChunkPair>)> = Vec::new();
        for &id in &self.identities {
            let mut v = dataset.indices_of(id, ModalityTag::Visible);
            let mut i = dataset.indices_of(id, ModalityTag::Infrared);
            v.shuffle(rng);
            i.shuffle(rng);
            let pairs: Vec<_> = v
                .chunks_exact(k)
                .zip(i.chunks_exact(k))
                .map(|(a, b)| (a.to_vec(), b.to_vec()))
                .collect();
            if !pairs.is_empty() {
                chunks.push((id, pairs));
            }
        }
        if chunks.len() < self.spec.p {
            return Err(Error::Sampler(format!(
                "only {} identities hold K={k} images per modality, P={}",
                chunks.len(),
                self.spec.p
            )));
        }

        let mut batches = Vec::new();
        while chunks.len() >= self.spec.p {
            let mut picked: Vec<usize> = index::sample(rng, chunks.len(), self.spec.p).into_vec();
            let mut batch = Vec::with_capacity(self.spec.batch_size());
            for &slot in &picked {
                let (v, i) = chunks[slot].1.pop().expect("non-empty chunk list");
                batch.extend(v);
                batch.extend(i);
            }
            picked.sort_unstable_by(|a, b| b.cmp(a));
            for slot in picked {
                if chunks[slot].1.is_empty() {
                    chunks.remove(slot);
                }
            }
            batches.push(batch);
        }
        Ok(batches)
    }
}

/// Draws one 2PK batch over all identities of `dataset`.
pub fn sample_pk_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    spec: PkBatchSpec,
    rng: &mut R,
) -> Result<ModalityBatch> {
    PkSampler::new(spec, (0..dataset.spec().num_identities).collect())?.sample_batch(dataset, rng)
}

/// Checks the 2PK composition of a batch: P distinct identities, each with
/// exactly K visible and K infrared samples.
pub fn check_pk_composition(batch: &ModalityBatch, spec: PkBatchSpec) -> bool {
    if batch.len() != spec.batch_size() || batch.identities.len() != batch.len() {
        return false;
    }
    let mut ids: Vec<usize> = batch.identities.clone();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != spec.p {
        return false;
    }
    ids.iter().all(|&id| {
        ModalityTag::ALL.iter().all(|&tag| {
            modality_indices(&batch.tags, tag)
                .iter()
                .filter(|&&n| batch.identities[n] == id)
                .count()
                == spec.k
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticDatasetSpec {
        SyntheticDatasetSpec {
            num_identities: 6,
            images_per_identity_per_modality: 5,
            latent_dim: 4,
            image_dims: (3, 4, 4),
            modality_offset_scale: 1.0,
            intra_class_noise: 0.5,
            rng_seed: 42,
        }
    }

    #[test]
    fn offset_free_noise_free_modalities_coincide() {
        let spec = SyntheticDatasetSpec {
            modality_offset_scale: 0.0,
            intra_class_noise: 0.0,
            ..small_spec()
        };
        let ds = Dataset::generate(&spec).unwrap();
        for id in 0..spec.num_identities {
            let v = ds.indices_of(id, ModalityTag::Visible);
            let i = ds.indices_of(id, ModalityTag::Infrared);
            for (a, b) in v.iter().zip(&i) {
                assert_eq!(ds.images().sample_data(*a), ds.images().sample_data(*b));
            }
        }
        assert!(ds.transform().scale.iter().all(|&s| s == 1.0));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = Dataset::generate(&small_spec()).unwrap();
        let b = Dataset::generate(&small_spec()).unwrap();
        assert_eq!(a, b);
        let c = Dataset::generate(&SyntheticDatasetSpec {
            rng_seed: 43,
            ..small_spec()
        })
        .unwrap();
        assert_ne!(a.images(), c.images());
    }

    #[test]
    fn labels_follow_storage_order() {
        let ds = Dataset::generate(&small_spec()).unwrap();
        let s = ds.sample(17).unwrap();
        assert_eq!(s.identity, 1);
        assert_eq!(s.modality, ModalityTag::Infrared);
        assert_eq!(s.image.dims(), Dims4::new(1, 3, 4, 4));
        assert_eq!(ds.identity_split(0.25).unwrap().1, vec![4, 5]);
    }

    #[test]
    fn invalid_specs() {
        assert!(Dataset::generate(&SyntheticDatasetSpec {
            latent_dim: 0,
            ..small_spec()
        })
        .is_err());
        assert!(Dataset::generate(&SyntheticDatasetSpec {
            intra_class_noise: -1.0,
            ..small_spec()
        })
        .is_err());
    }

    #[test]
    fn minimal_pk_batch() {
        let ds = Dataset::generate(&small_spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = PkBatchSpec::new(1, 1).unwrap();
        let b = sample_pk_batch(&ds, spec, &mut rng).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.identities[0], b.identities[1]);
        assert_eq!(b.tags, vec![ModalityTag::Visible, ModalityTag::Infrared]);
    }

    #[test]
    fn insufficient_images_without_replacement() {
        let ds = Dataset::generate(&small_spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = PkBatchSpec::new(2, 6).unwrap();
        assert!(matches!(
            sample_pk_batch(&ds, spec, &mut rng),
            Err(Error::Sampler(_))
        ));
        let sampler = PkSampler::new(spec, (0..6).collect()).unwrap().with_replacement(true);
        let b = sampler.sample_batch(&ds, &mut rng).unwrap();
        assert!(check_pk_composition(&b, spec));
        assert!(PkSampler::new(PkBatchSpec { p: 7, k: 1 }, (0..6).collect()).is_err());
    }

    #[test]
    fn epoch_batches_are_disjoint_and_balanced() {
        let ds = Dataset::generate(&small_spec()).unwrap();
        let spec = PkBatchSpec::new(2, 2).unwrap();
        let sampler = PkSampler::new(spec, (0..6).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batches = sampler.epoch_batches(&ds, &mut rng).unwrap();
        // 6 identities × 2 chunks each, 2 distinct identities per batch; one
        // identity's chunks may be left over at the end.
        assert!((5..=6).contains(&batches.len()));
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        let total = seen.len();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), total);
        for b in &batches {
            assert!(check_pk_composition(&ds.batch(b).unwrap(), spec));
        }
    }
}
