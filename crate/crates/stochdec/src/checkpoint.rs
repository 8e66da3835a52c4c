//! Checkpoints: a UTF-8 manifest with per-array checksums plus a
//! little-endian binary payload, restoring parameters and optimizer
//! state bit-exactly.

use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::optim::Adam;
use crate::tensor::{Scalar, Tensor};
use std::collections::BTreeMap;
use std::path::Path;

const MAGIC: &str = "stochdec-checkpoint v1";
const MANIFEST: &str = "manifest.txt";
const PAYLOAD: &str = "payload.bin";

fn write_elems<T: Scalar>(buf: &mut Vec<u8>, data: &[T]) {
    if T::NAME == "f32" {
        for &v in data {
            buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    } else {
        for &v in data {
            buf.extend_from_slice(&v.to_f64().to_le_bytes());
        }
    }
}

fn read_elems<T: Scalar>(bytes: &[u8], count: usize) -> Result<Vec<T>> {
    let width = elem_width::<T>();
    if bytes.len() != count * width {
        return Err(Error::Checkpoint(format!(
            "payload slice is {} bytes, expected {}",
            bytes.len(),
            count * width
        )));
    }
    let mut out = Vec::with_capacity(count);
    for chunk in bytes.chunks_exact(width) {
        let v = if width == 4 {
            f32::from_le_bytes(chunk.try_into().unwrap()) as f64
        } else {
            f64::from_le_bytes(chunk.try_into().unwrap())
        };
        out.push(T::from_f64(v));
    }
    Ok(out)
}

fn elem_width<T: Scalar>() -> usize {
    if T::NAME == "f32" {
        4
    } else {
        8
    }
}

struct ArrayRecord<'a, T> {
    name: String,
    shape: &'a [usize],
    data: &'a [T],
}

/// Saves parameters, Adam moments, the step counter and hyperparameters
/// under `dir` (created if needed).
pub fn save_checkpoint<T: Scalar>(dir: &Path, params: &ParamStore<T>, opt: &Adam<T>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (m, v) = opt.moments();
    let mut records: Vec<ArrayRecord<T>> = Vec::new();
    for (name, t) in params.iter() {
        records.push(ArrayRecord {
            name: format!("param/{}", name),
            shape: t.shape(),
            data: t.data(),
        });
    }
    for (prefix, map) in [("adam.m", m), ("adam.v", v)] {
        for (name, t) in map {
            records.push(ArrayRecord {
                name: format!("{}/{}", prefix, name),
                shape: t.shape(),
                data: t.data(),
            });
        }
    }

    let mut payload = Vec::new();
    let mut manifest = String::new();
    manifest.push_str(MAGIC);
    manifest.push('\n');
    manifest.push_str(&format!("dtype {}\n", T::NAME));
    manifest.push_str(&format!("t {}\n", opt.t));
    manifest.push_str(&format!("lr {}\n", opt.lr));
    manifest.push_str(&format!("beta1 {}\n", opt.beta1));
    manifest.push_str(&format!("beta2 {}\n", opt.beta2));
    manifest.push_str(&format!("eps {}\n", opt.eps));
    for rec in &records {
        let offset = payload.len();
        write_elems(&mut payload, rec.data);
        let crc = crc32fast::hash(&payload[offset..]);
        let dims: Vec<String> = rec.shape.iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!(
            "array {} {} {} {} {}\n",
            rec.name,
            dims.join(","),
            offset,
            payload.len() - offset,
            crc
        ));
    }
    std::fs::write(dir.join(PAYLOAD), &payload)?;
    std::fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Everything needed to resume training where a checkpoint left off.
pub struct LoadedCheckpoint<T: Scalar> {
    pub params: ParamStore<T>,
    pub opt: Adam<T>,
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<LoadedCheckpoint<T>> {
    let manifest = std::fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| Error::Checkpoint(format!("cannot read manifest in {}: {}", dir.display(), e)))?;
    let payload = std::fs::read(dir.join(PAYLOAD))
        .map_err(|e| Error::Checkpoint(format!("cannot read payload in {}: {}", dir.display(), e)))?;

    let mut lines = manifest.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::Checkpoint("unrecognized manifest header".into()));
    }
    let mut meta: BTreeMap<&str, &str> = BTreeMap::new();
    let mut arrays: Vec<(String, Vec<usize>, usize, usize, u32)> = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => {}
            ["array", name, dims, offset, len, crc] => {
                let shape: Vec<usize> = if dims.is_empty() {
                    vec![]
                } else {
                    dims.split(',')
                        .map(|d| d.parse().map_err(|_| Error::Checkpoint(format!("bad dims for {}", name))))
                        .collect::<Result<_>>()?
                };
                let parse =
                    |s: &str| -> Result<usize> { s.parse().map_err(|_| Error::Checkpoint(format!("bad field in {}", line))) };
                let crc: u32 = crc
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad checksum field for {}", name)))?;
                arrays.push((name.to_string(), shape, parse(offset)?, parse(len)?, crc));
            }
            [key, value] => {
                meta.insert(*key, *value);
            }
            _ => return Err(Error::Checkpoint(format!("malformed manifest line: {}", line))),
        }
    }
    let get = |k: &str| meta.get(k).ok_or_else(|| Error::Checkpoint(format!("manifest missing {}", k)));
    if *get("dtype")? != T::NAME {
        return Err(Error::Checkpoint(format!(
            "checkpoint dtype {} does not match requested {}",
            get("dtype")?,
            T::NAME
        )));
    }
    let t: u64 = get("t")?.parse().map_err(|_| Error::Checkpoint("bad step counter".into()))?;
    let parse_f = |k: &str| -> Result<f64> {
        get(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad value for {}", k)))
    };

    let mut params = ParamStore::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for (name, shape, offset, len, crc) in arrays {
        let slice = payload
            .get(offset..offset + len)
            .ok_or_else(|| Error::Checkpoint(format!("payload truncated at array {}", name)))?;
        if crc32fast::hash(slice) != crc {
            return Err(Error::Checkpoint(format!("checksum mismatch for array {}", name)));
        }
        let count: usize = shape.iter().product();
        let tensor = Tensor::new(shape, read_elems::<T>(slice, count)?)?;
        if let Some(bare) = name.strip_prefix("param/") {
            params.insert(bare, tensor);
        } else if let Some(bare) = name.strip_prefix("adam.m/") {
            m.insert(bare.to_string(), tensor);
        } else if let Some(bare) = name.strip_prefix("adam.v/") {
            v.insert(bare.to_string(), tensor);
        } else {
            return Err(Error::Checkpoint(format!("unknown array namespace: {}", name)));
        }
    }

    let mut opt = Adam::new(parse_f("lr")?);
    opt.beta1 = parse_f("beta1")?;
    opt.beta2 = parse_f("beta2")?;
    opt.eps = parse_f("eps")?;
    opt.restore_moments(t, m, v);
    Ok(LoadedCheckpoint { params, opt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_state() -> (ParamStore<f32>, Adam<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = ParamStore::new();
        params.insert("layer.w", crate::layers::glorot_uniform(&mut rng, 3, 4));
        params.insert("layer.b", Tensor::new(vec![4], vec![0.1, -0.2, 0.3, 0.0]).unwrap());
        let mut opt = Adam::new(1e-3);
        let grads: BTreeMap<String, Tensor<f32>> = params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::full(t.shape(), 0.01f32)))
            .collect();
        for _ in 0..3 {
            opt.step(&mut params, &grads).unwrap();
        }
        (params, opt)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let (params, opt) = sample_state();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &params, &opt).unwrap();
        let loaded = load_checkpoint::<f32>(dir.path()).unwrap();
        assert_eq!(loaded.opt.t, 3);
        assert_eq!(loaded.opt.lr, 1e-3);
        for (name, t) in params.iter() {
            let l = loaded.params.get(name).unwrap();
            assert_eq!(l.shape(), t.shape());
            for (a, b) in l.data().iter().zip(t.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        let (m0, v0) = opt.moments();
        let (m1, v1) = loaded.opt.moments();
        for (orig, load) in [(m0, m1), (v0, v1)] {
            assert_eq!(orig.len(), load.len());
            for (name, t) in orig {
                for (a, b) in load[name].data().iter().zip(t.data()) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }

    #[test]
    fn tampered_payload_is_rejected() {
        let (params, opt) = sample_state();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &params, &opt).unwrap();
        let payload_path = dir.path().join(PAYLOAD);
        let mut bytes = std::fs::read(&payload_path).unwrap();
        bytes[5] ^= 0x40;
        std::fs::write(&payload_path, &bytes).unwrap();
        let err = load_checkpoint::<f32>(dir.path()).err().unwrap();
        assert!(format!("{}", err).contains("checksum"));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let (params, opt) = sample_state();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &params, &opt).unwrap();
        let payload_path = dir.path().join(PAYLOAD);
        let bytes = std::fs::read(&payload_path).unwrap();
        std::fs::write(&payload_path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(load_checkpoint::<f32>(dir.path()).is_err());
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let (params, opt) = sample_state();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &params, &opt).unwrap();
        let err = load_checkpoint::<f64>(dir.path()).err().unwrap();
        assert!(format!("{}", err).contains("dtype"));
    }

    #[test]
    fn resumed_optimizer_matches_uninterrupted_run() {
        let (mut params, mut opt) = sample_state();
        let grads: BTreeMap<String, Tensor<f32>> = params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::full(t.shape(), -0.02f32)))
            .collect();

        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &params, &opt).unwrap();

        opt.step(&mut params, &grads).unwrap();
        let mut resumed = load_checkpoint::<f32>(dir.path()).unwrap();
        resumed.opt.step(&mut resumed.params, &grads).unwrap();

        assert_eq!(resumed.opt.t, opt.t);
        for (name, t) in params.iter() {
            for (a, b) in resumed.params.get(name).unwrap().data().iter().zip(t.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
