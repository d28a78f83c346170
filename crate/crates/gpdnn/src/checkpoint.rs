//! Model checkpoints: a flat named-tensor container with a fixed binary
//! layout, plus model-level save/load on top of it.
//!
//! Layout (all integers little-endian):
//!   magic "GPDN" | version u32 | tensor count u32 | per tensor:
//!   name length u16, UTF-8 name, rank u8, each dim u32, payload f64 LE.
//!
//! Round-trips are bit-exact: payloads are written with `to_le_bytes` and
//! read back with `from_le_bytes`, no parsing or formatting in between.
//!
//! The model spec rides along as a pseudo-tensor named `__model_spec_json__`
//! whose payload is the spec's JSON, one byte per f64. A GP head's
//! data-dependent-initialization flag is stored the same way as a scalar.

use crate::error::{Error, Result};
use crate::nn::{Head, Model, ModelSpec};
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"GPDN";
const VERSION: u32 = 1;
pub const SPEC_TENSOR_NAME: &str = "__model_spec_json__";
const GP_INIT_FLAG: &str = "gp.initialized";

pub fn write_tensors(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for (name, _) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(Error::Checkpoint(format!("duplicate tensor name '{}'", name)));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(Error::Checkpoint(format!("tensor name too long: '{}'", name)));
        }
        w.write_all(&(nb.len() as u16).to_le_bytes())?;
        w.write_all(nb)?;
        let shape = t.shape();
        if shape.len() > u8::MAX as usize {
            return Err(Error::Checkpoint("tensor rank exceeds format limit".into()));
        }
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            if d > u32::MAX as usize {
                return Err(Error::Checkpoint("tensor dimension exceeds u32".into()));
            }
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint(format!("{}: file too short for header", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic, not a checkpoint", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {} (expected {})",
            path.display(),
            version,
            VERSION
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)
            .map_err(|_| Error::Checkpoint(format!("tensor {}: truncated name", i)))?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Checkpoint(format!("tensor {}: name is not UTF-8", i)))?;
        let mut rank_buf = [0u8; 1];
        r.read_exact(&mut rank_buf)
            .map_err(|_| Error::Checkpoint(format!("tensor '{}': truncated rank", name)))?;
        let rank = rank_buf[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 8];
        r.read_exact(&mut payload)
            .map_err(|_| Error::Checkpoint(format!("tensor '{}': truncated payload", name)))?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Checkpoint("truncated u32 field".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b).map_err(|_| Error::Checkpoint("truncated u16 field".into()))?;
    Ok(u16::from_le_bytes(b))
}

fn spec_to_tensor(spec: &ModelSpec) -> Result<Tensor> {
    let js = serde_json::to_string(spec)
        .map_err(|e| Error::Checkpoint(format!("spec serialization failed: {}", e)))?;
    let bytes = js.into_bytes();
    Tensor::new(&[bytes.len()], bytes.iter().map(|&b| b as f64).collect())
}

fn spec_from_tensor(t: &Tensor) -> Result<ModelSpec> {
    let bytes: Vec<u8> = t
        .data()
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && (0.0..256.0).contains(&v) {
                Ok(v as u8)
            } else {
                Err(Error::Checkpoint("spec tensor holds non-byte values".into()))
            }
        })
        .collect::<Result<_>>()?;
    let js = String::from_utf8(bytes)
        .map_err(|_| Error::Checkpoint("spec tensor is not UTF-8".into()))?;
    serde_json::from_str(&js).map_err(|e| Error::Checkpoint(format!("spec JSON invalid: {}", e)))
}

/// Save a model: all trainable parameters plus the embedded spec.
pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> =
        vec![(SPEC_TENSOR_NAME.into(), spec_to_tensor(&model.spec)?)];
    if let Head::Gp { initialized, .. } = &model.head {
        tensors.push((GP_INIT_FLAG.into(), Tensor::scalar(if *initialized { 1.0 } else { 0.0 })));
    }
    for (name, t) in model.named_params() {
        tensors.push((name, t.clone()));
    }
    write_tensors(path, &tensors)
}

/// Load a model saved by `save_model`. Every parameter the rebuilt model
/// expects must be present with the right shape, and no extras are allowed —
/// a mismatch means the checkpoint belongs to a different architecture.
pub fn load_model(path: &Path) -> Result<Model> {
    let tensors = read_tensors(path)?;
    let mut map: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
    let spec_t = map
        .remove(SPEC_TENSOR_NAME)
        .ok_or_else(|| Error::Checkpoint(format!("{}: missing model spec", path.display())))?;
    let spec = spec_from_tensor(&spec_t)?;
    let mut model = Model::build(&spec, 0)?;
    let gp_init = map.remove(GP_INIT_FLAG).map(|t| t.item()).transpose()?.map(|v| v != 0.0);
    for (name, slot) in model.named_params_mut() {
        let t = map.remove(&name).ok_or_else(|| {
            Error::Checkpoint(format!("{}: missing tensor '{}'", path.display(), name))
        })?;
        if t.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "{}: tensor '{}' has shape {:?}, model expects {:?}",
                path.display(),
                name,
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    if !map.is_empty() {
        let mut extras: Vec<_> = map.keys().cloned().collect();
        extras.sort();
        return Err(Error::Checkpoint(format!(
            "{}: unexpected tensors {:?} — checkpoint does not match this model",
            path.display(),
            extras
        )));
    }
    if let Head::Gp { initialized, .. } = &mut model.head {
        *initialized = gp_init.ok_or_else(|| {
            Error::Checkpoint(format!("{}: GP model missing init flag", path.display()))
        })?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::preset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn raw_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.gpdn");
        // values with awkward bit patterns: subnormals, negative zero, extremes
        let t1 = Tensor::new(&[2, 3], vec![1.5e-310, -0.0, f64::MAX, f64::MIN_POSITIVE, -1.0 / 3.0, 2.0_f64.powi(-1000)]).unwrap();
        let t2 = Tensor::scalar(0.1 + 0.2);
        let tensors = vec![("a".to_string(), t1), ("b.c".to_string(), t2)];
        write_tensors(&path, &tensors).unwrap();
        let back = read_tensors(&path).unwrap();
        assert_eq!(back.len(), 2);
        for ((n0, t0), (n1, t1)) in tensors.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            for (a, b) in t0.data().iter().zip(t1.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "bit-exact round trip");
            }
        }
    }

    #[test]
    fn rejects_wrong_magic_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.gpdn");
        std::fs::write(&path, b"NOPE0000").unwrap();
        assert!(read_tensors(&path).is_err());

        let dup = vec![
            ("x".to_string(), Tensor::scalar(1.0)),
            ("x".to_string(), Tensor::scalar(2.0)),
        ];
        assert!(write_tensors(&dir.path().join("dup.gpdn"), &dup).is_err());
    }

    #[test]
    fn model_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.gpdn");
        let spec = preset("halfmoon-gpdnn-rbf").unwrap();
        let mut model = Model::build(&spec, 42).unwrap();

        let x = Tensor::new(&[25, 2], (0..50).map(|i| (i as f64 * 0.31).sin()).collect()).unwrap();
        let feats = model.extract_features(&x).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        model.install_gp_head(&feats, &mut rng).unwrap();

        save_model(&path, &model).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.spec, model.spec);
        assert!(!back.gp_needs_init());
        let pa = model.named_params();
        let pb = back.named_params();
        assert_eq!(pa.len(), pb.len());
        for ((na, ta), (nb, tb)) in pa.iter().zip(&pb) {
            assert_eq!(na, nb);
            for (a, b) in ta.data().iter().zip(tb.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "param {} bit-exact", na);
            }
        }
        // loaded model predicts identically
        let lp0 = model.predict_log_probs(&x).unwrap();
        let lp1 = back.predict_log_probs(&x).unwrap();
        assert_eq!(lp0.data(), lp1.data());
    }

    #[test]
    fn load_rejects_architecture_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gpdn");
        let model = Model::build(&preset("halfmoon-nn").unwrap(), 1).unwrap();
        save_model(&path, &model).unwrap();

        // corrupt: drop one tensor
        let mut tensors = read_tensors(&path).unwrap();
        tensors.retain(|(n, _)| n != "head.b");
        let p2 = dir.path().join("missing.gpdn");
        write_tensors(&p2, &tensors).unwrap();
        assert!(load_model(&p2).is_err());

        // corrupt: extra tensor
        let mut tensors = read_tensors(&path).unwrap();
        tensors.push(("stray".into(), Tensor::scalar(0.0)));
        let p3 = dir.path().join("extra.gpdn");
        write_tensors(&p3, &tensors).unwrap();
        assert!(load_model(&p3).is_err());
    }
}
