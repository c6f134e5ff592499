//! Versioned single-file checkpoint: JSON metadata header plus all named
//! parameter tensors as little-endian f64, written in sorted name order so
//! identical states produce identical bytes.

use crate::config::Config;
use crate::data::{BackgroundParams, ConceptImage, ConceptSet, PoseParams, SubjectSpec};
use crate::error::{DecalError, Result};
use crate::params::ParamStore;
use crate::rng::StreamState;
use crate::text::PseudoWord;
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"DCKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    Base,
    Customized,
}

/// Pose / background ground truth for the concept images embedded in a
/// customized checkpoint (pixels and masks live in the parameter section).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptMeta {
    pub subject: SubjectSpec,
    pub seed: u64,
    pub resolution: usize,
    pub poses: Vec<PoseParams>,
    pub backgrounds: Vec<BackgroundParams>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub kind: CheckpointKind,
    pub config: Config,
    pub config_hash: String,
    pub vocab_pseudo: Vec<PseudoWord>,
    pub concept: Option<ConceptMeta>,
    pub rng_streams: Vec<StreamState>,
    pub trained_steps: u64,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(kind: CheckpointKind, config: &Config) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                format: "decal-ckpt".into(),
                kind,
                config: config.clone(),
                config_hash: config.hash(),
                vocab_pseudo: Vec::new(),
                concept: None,
                rng_streams: Vec::new(),
                trained_steps: 0,
            },
            params: ParamStore::new(),
        }
    }

    /// Store concept images/masks as parameter tensors plus metadata.
    pub fn embed_concept(&mut self, set: &ConceptSet) {
        self.meta.concept = Some(ConceptMeta {
            subject: set.subject.clone(),
            seed: set.seed,
            resolution: set.images[0].mask.shape()[0],
            poses: set.images.iter().map(|i| i.pose.clone()).collect(),
            backgrounds: set.images.iter().map(|i| i.background.clone()).collect(),
        });
        for (i, img) in set.images.iter().enumerate() {
            self.params.insert(&format!("concept.img.{i}"), img.pixels.clone().into_dyn());
            self.params.insert(&format!("concept.mask.{i}"), img.mask.clone().into_dyn());
        }
    }

    /// Reconstruct the embedded concept set, if any.
    pub fn concept_set(&self) -> Result<Option<ConceptSet>> {
        let Some(meta) = &self.meta.concept else {
            return Ok(None);
        };
        let mut images = Vec::new();
        for i in 0..meta.poses.len() {
            let px = self.params.get(&format!("concept.img.{i}"))?;
            let mk = self.params.get(&format!("concept.mask.{i}"))?;
            images.push(ConceptImage {
                pixels: px.clone().into_dimensionality::<ndarray::Ix3>().map_err(shape_err)?,
                mask: mk.clone().into_dimensionality::<ndarray::Ix2>().map_err(shape_err)?,
                pose: meta.poses[i].clone(),
                background: meta.backgrounds[i].clone(),
                image_index: i,
            });
        }
        Ok(Some(ConceptSet { subject: meta.subject.clone(), images, seed: meta.seed }))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut buf: Vec<u8> = Vec::new();
        buf.write_all(MAGIC)?;
        buf.write_all(&VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta)?;
        buf.write_all(&(meta.len() as u64).to_le_bytes())?;
        buf.write_all(&meta)?;
        let names = self.params.sorted_names();
        buf.write_all(&(names.len() as u64).to_le_bytes())?;
        for name in names {
            let arr = self.params.get(&name)?;
            let nb = name.as_bytes();
            buf.write_all(&(nb.len() as u32).to_le_bytes())?;
            buf.write_all(nb)?;
            let dims = arr.shape();
            buf.write_all(&(dims.len() as u32).to_le_bytes())?;
            for &d in dims {
                buf.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in arr.iter() {
                buf.write_all(&v.to_le_bytes())?;
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| DecalError::MissingArtifact(format!("checkpoint {}: {e}", path.display())))?;
        let mut r = std::io::Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(DecalError::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(DecalError::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = read_u64(&mut r)? as usize;
        let mut meta_buf = vec![0u8; meta_len];
        r.read_exact(&mut meta_buf)?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta_buf)?;
        let n = read_u64(&mut r)? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name_len = read_u32(&mut r)? as usize;
            let mut nb = vec![0u8; name_len];
            r.read_exact(&mut nb)?;
            let name = String::from_utf8(nb)
                .map_err(|e| DecalError::Checkpoint(format!("bad name: {e}")))?;
            let ndim = read_u32(&mut r)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(read_u64(&mut r)? as usize);
            }
            let count: usize = dims.iter().product();
            let mut data = vec![0.0f64; count];
            let mut b8 = [0u8; 8];
            for v in data.iter_mut() {
                r.read_exact(&mut b8)?;
                *v = f64::from_le_bytes(b8);
            }
            params.insert(&name, ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(shape_err)?);
        }
        Ok(Checkpoint { meta, params })
    }
}

fn shape_err<E: std::fmt::Display>(e: E) -> DecalError {
    DecalError::Checkpoint(format!("tensor shape: {e}"))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[allow(unused)]
fn unused(_a: Array2<f64>, _b: Array3<f64>) {}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_concept_set, SubjectSpec};
    use crate::rng::stream;
    use tempfile::tempdir;

    #[test]
    fn checkpoint_roundtrip_bitexact() {
        let dir = tempdir().unwrap();
        let config = Config::default();
        let mut ck = Checkpoint::new(CheckpointKind::Customized, &config);
        let mut rng = stream(0, "init");
        ck.params.insert("a.w", crate::params::init_fan_in(&mut rng, &[3, 4]));
        ck.params.insert("b.w", crate::params::init_normal(&mut rng, &[2, 2, 2], 0.5));
        let mut sr = stream(1, "s");
        let spec = SubjectSpec::sample("s0", "dog", &mut sr).unwrap();
        let set = generate_concept_set(&spec, 2, 3, 32).unwrap();
        ck.embed_concept(&set);

        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        ck.save(&p1).unwrap();
        let back = Checkpoint::load(&p1).unwrap();
        back.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let set2 = back.concept_set().unwrap().unwrap();
        assert_eq!(set2.images.len(), 2);
        assert_eq!(set2.images[0].pixels, set.images[0].pixels);
        assert_eq!(set2.subject, set.subject);
        assert_eq!(back.meta.config_hash, config.hash());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        std::fs::write(&p, b"NOPE").unwrap();
        assert!(Checkpoint::load(&p).is_err());
    }
}
