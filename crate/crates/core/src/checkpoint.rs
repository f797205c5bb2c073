//! Versioned binary checkpoint container: JSON metadata, named tensors, and
//! opaque byte sections (e.g. the serialized replay buffer).

use crate::backbone::{ArchId, LayeredBackbone};
use crate::error::{Error, Result};
use crate::rng::SeedTree;
use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

const MAGIC: &[u8; 8] = b"CLCKPT01";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dtype {
    F32,
    F64,
}

/// In-memory checkpoint contents.
pub struct Checkpoint<S: Scalar> {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, ArrayD<S>>,
    pub sections: BTreeMap<String, Vec<u8>>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn new(meta: serde_json::Value) -> Self {
        Checkpoint {
            meta,
            tensors: BTreeMap::new(),
            sections: BTreeMap::new(),
        }
    }

    fn dtype() -> Dtype {
        if std::mem::size_of::<S>() == 4 {
            Dtype::F32
        } else {
            Dtype::F64
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Serde(e.to_string()))?;
        f.write_all(&(meta.len() as u32).to_le_bytes())?;
        f.write_all(&meta)?;

        f.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        let dtype = Self::dtype();
        for (name, arr) in &self.tensors {
            let nb = name.as_bytes();
            f.write_all(&(nb.len() as u16).to_le_bytes())?;
            f.write_all(nb)?;
            f.write_all(&[match dtype {
                Dtype::F32 => 0u8,
                Dtype::F64 => 1u8,
            }])?;
            f.write_all(&[arr.ndim() as u8])?;
            for &d in arr.shape() {
                f.write_all(&(d as u32).to_le_bytes())?;
            }
            let contiguous = arr.as_standard_layout();
            match dtype {
                Dtype::F32 => {
                    for &v in contiguous.iter() {
                        f.write_all(&(v.as_f64() as f32).to_le_bytes())?;
                    }
                }
                Dtype::F64 => {
                    for &v in contiguous.iter() {
                        f.write_all(&v.as_f64().to_le_bytes())?;
                    }
                }
            }
        }

        f.write_all(&(self.sections.len() as u32).to_le_bytes())?;
        for (name, bytes) in &self.sections {
            let nb = name.as_bytes();
            f.write_all(&(nb.len() as u16).to_le_bytes())?;
            f.write_all(nb)?;
            f.write_all(&(bytes.len() as u64).to_le_bytes())?;
            f.write_all(bytes)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::config(format!("cannot open {}: {}", path.display(), e)))?
            .read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Serde("checkpoint truncated".to_string()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 8)? != MAGIC {
            return Err(Error::Serde(format!(
                "{} is not a checkpoint file",
                path.display()
            )));
        }
        let meta_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let meta: serde_json::Value = serde_json::from_slice(take(&mut pos, meta_len)?)
            .map_err(|e| Error::Serde(e.to_string()))?;

        let n_tensors = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..n_tensors {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|e| Error::Serde(e.to_string()))?;
            let dtype = match take(&mut pos, 1)?[0] {
                0 => Dtype::F32,
                1 => Dtype::F64,
                other => return Err(Error::Serde(format!("unknown dtype tag {}", other))),
            };
            let ndim = take(&mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let count: usize = shape.iter().product();
            let mut data = Vec::with_capacity(count);
            match dtype {
                Dtype::F32 => {
                    let raw = take(&mut pos, 4 * count)?;
                    for chunk in raw.chunks_exact(4) {
                        data.push(S::of_f64(
                            f32::from_le_bytes(chunk.try_into().unwrap()) as f64
                        ));
                    }
                }
                Dtype::F64 => {
                    let raw = take(&mut pos, 8 * count)?;
                    for chunk in raw.chunks_exact(8) {
                        data.push(S::of_f64(f64::from_le_bytes(chunk.try_into().unwrap())));
                    }
                }
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
                .map_err(|e| Error::Serde(e.to_string()))?;
            tensors.insert(name, arr);
        }

        let n_sections = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut sections = BTreeMap::new();
        for _ in 0..n_sections {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|e| Error::Serde(e.to_string()))?;
            let len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
            sections.insert(name, take(&mut pos, len)?.to_vec());
        }
        Ok(Checkpoint {
            meta,
            tensors,
            sections,
        })
    }
}

// ---------------------------------------------------------------------------
// backbone checkpoints

/// Save a backbone with its shape metadata and pretraining provenance.
pub fn save_backbone<S: Scalar>(
    path: &Path,
    model: &LayeredBackbone<S>,
    extra_meta: serde_json::Value,
) -> Result<()> {
    let mut meta = serde_json::json!({
        "kind": "backbone",
        "arch": model.arch.to_string(),
        "input_shape": [model.input_shape.0, model.input_shape.1, model.input_shape.2],
        "num_classes": model.num_classes,
        "tap_shapes": model.tap_shapes.iter().map(|&(c, h, w)| vec![c, h, w]).collect::<Vec<_>>(),
        "pretrain_dataset": model.pretrain_dataset,
    });
    if let (Some(obj), Some(extra)) = (meta.as_object_mut(), extra_meta.as_object()) {
        for (k, v) in extra {
            obj.insert(k.clone(), v.clone());
        }
    }
    let mut ckpt = Checkpoint::<S>::new(meta);
    ckpt.tensors = model.state_dict();
    ckpt.save(path)
}

/// Load a backbone, validating the stored shape metadata against the rebuilt
/// architecture.
pub fn load_backbone<S: Scalar>(path: &Path) -> Result<LayeredBackbone<S>> {
    let ckpt = Checkpoint::<S>::load(path)?;
    let arch = ArchId::from_str(
        ckpt.meta["arch"]
            .as_str()
            .ok_or_else(|| Error::Serde("checkpoint missing arch".to_string()))?,
    )?;
    let shape = ckpt.meta["input_shape"]
        .as_array()
        .ok_or_else(|| Error::Serde("checkpoint missing input_shape".to_string()))?;
    let input_shape = (
        shape[0].as_u64().unwrap_or(0) as usize,
        shape[1].as_u64().unwrap_or(0) as usize,
        shape[2].as_u64().unwrap_or(0) as usize,
    );
    let num_classes = ckpt.meta["num_classes"]
        .as_u64()
        .ok_or_else(|| Error::Serde("checkpoint missing num_classes".to_string()))?
        as usize;
    let mut model = LayeredBackbone::<S>::build(arch, input_shape, num_classes, &SeedTree::new(0));
    model.load_state_dict(&ckpt.tensors)?;
    if let Some(taps) = ckpt.meta["tap_shapes"].as_array() {
        let stored: Vec<(usize, usize, usize)> = taps
            .iter()
            .map(|t| {
                let v = t.as_array().expect("tap triple");
                (
                    v[0].as_u64().unwrap_or(0) as usize,
                    v[1].as_u64().unwrap_or(0) as usize,
                    v[2].as_u64().unwrap_or(0) as usize,
                )
            })
            .collect();
        if stored != model.tap_shapes {
            return Err(Error::Shape(format!(
                "checkpoint tap shapes {:?} disagree with architecture {:?}",
                stored, model.tap_shapes
            )));
        }
    }
    if let Some(ds) = ckpt.meta["pretrain_dataset"].as_str() {
        model.pretrain_dataset = Some(ds.to_string());
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ArchId;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let tree = SeedTree::new(11);
        let mut model =
            LayeredBackbone::<f32>::build(ArchId::DeskCnn, (1, 20, 20), 10, &tree);
        model.pretrain_dataset = Some("glyphs_src".to_string());
        save_backbone(&path, &model, serde_json::json!({"seed": 3})).unwrap();
        let loaded = load_backbone::<f32>(&path).unwrap();
        assert_eq!(loaded.checksum(), model.checksum());
        assert_eq!(loaded.pretrain_dataset.as_deref(), Some("glyphs_src"));
    }

    #[test]
    fn sections_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bundle.ckpt");
        let mut ckpt = Checkpoint::<f32>::new(serde_json::json!({"kind": "bundle"}));
        ckpt.sections.insert("buffer".into(), vec![1, 2, 3, 250]);
        ckpt.tensors.insert(
            "w".into(),
            ArrayD::from_elem(IxDyn(&[2, 2]), 0.5_f32),
        );
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::<f32>::load(&path).unwrap();
        assert_eq!(loaded.sections["buffer"], vec![1, 2, 3, 250]);
        assert_eq!(loaded.tensors["w"], ckpt.tensors["w"]);
        assert_eq!(loaded.meta["kind"], "bundle");
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTCKPT0rest").unwrap();
        assert!(Checkpoint::<f32>::load(&path).is_err());
    }
}
