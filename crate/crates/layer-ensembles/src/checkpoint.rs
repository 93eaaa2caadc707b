//! Parameter checkpoint container: magic bytes, a manifest of
//! (name, shape, byte offset) entries, then the raw little-endian f64
//! payload. Entries are written in the parameter set's construction order,
//! which is topological and therefore deterministic for a given config.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{LeError, Result};
use crate::model::ParamSet;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8] = b"LECKPT1\n";

pub fn save_params(path: &Path, params: &ParamSet) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    let mut offset = 0u64;
    for i in 0..params.len() {
        let name = params.name(i);
        let value = params.value(i);
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(value.shape().len() as u32).to_le_bytes())?;
        for &e in value.shape() {
            out.write_all(&(e as u32).to_le_bytes())?;
        }
        out.write_all(&offset.to_le_bytes())?;
        offset += (value.numel() * 8) as u64;
    }
    for i in 0..params.len() {
        for &v in params.value(i).data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads every entry in manifest order.
pub fn load_params(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact(&mut input, &mut magic, path)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(LeError::Checkpoint(format!(
            "{}: not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let count = read_u32(&mut input, path)? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut input, path)? as usize;
        if name_len > 4096 {
            return Err(LeError::Checkpoint(format!(
                "{}: implausible name length {name_len}",
                path.display()
            )));
        }
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut input, &mut name_bytes, path)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| LeError::Checkpoint(format!("{}: non-UTF8 name", path.display())))?;
        let rank = read_u32(&mut input, path)? as usize;
        if rank == 0 || rank > 8 {
            return Err(LeError::Checkpoint(format!(
                "{}: implausible rank {rank} for `{name}`",
                path.display()
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut input, path)? as usize);
        }
        let mut off = [0u8; 8];
        read_exact(&mut input, &mut off, path)?;
        manifest.push((name, shape, u64::from_le_bytes(off)));
    }
    let mut entries = Vec::with_capacity(count);
    let mut expected_offset = 0u64;
    for (name, shape, offset) in manifest {
        if offset != expected_offset {
            return Err(LeError::Checkpoint(format!(
                "{}: `{name}` payload offset {offset} does not match manifest layout",
                path.display()
            )));
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            read_exact(&mut input, &mut buf, path)?;
            data.push(f64::from_le_bytes(buf));
        }
        expected_offset += (numel * 8) as u64;
        entries.push((name, Tensor::new(shape, data)?));
    }
    Ok(entries)
}

/// Loads a checkpoint into an existing parameter set, matching by name and
/// rejecting any missing, extra, or shape-incompatible tensor by name.
pub fn load_into(path: &Path, params: &mut ParamSet) -> Result<()> {
    let entries = load_params(path)?;
    if entries.len() != params.len() {
        return Err(LeError::Checkpoint(format!(
            "{}: holds {} tensors but the model expects {}",
            path.display(),
            entries.len(),
            params.len()
        )));
    }
    for (i, (name, value)) in entries.into_iter().enumerate() {
        if params.name(i) != name {
            return Err(LeError::Checkpoint(format!(
                "{}: tensor {i} is `{name}` but the model expects `{}`",
                path.display(),
                params.name(i)
            )));
        }
        if params.value(i).shape() != value.shape() {
            return Err(LeError::ShapeMismatch {
                context: format!("checkpoint tensor `{name}`"),
                expected: params.value(i).shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        if !value.all_finite() {
            return Err(LeError::Checkpoint(format!(
                "{}: tensor `{name}` holds non-finite values",
                path.display()
            )));
        }
        *params.value_mut(i) = value;
    }
    Ok(())
}

fn read_exact(input: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    input.read_exact(buf).map_err(|_| {
        LeError::Checkpoint(format!("{}: truncated checkpoint file", path.display()))
    })
}

fn read_u32(input: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(input, &mut buf, path)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LossKind, ModelConfig, Network};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            depth: 2,
            base_channels: 2,
            num_classes: 1,
            height: 16,
            width: 16,
            first_block_downsamples: false,
            loss: LossKind::GeneralizedDice,
            ce_class_weights: None,
        }
    }

    #[test]
    fn round_trip_restores_every_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let net = Network::build(tiny_config(), 5).unwrap();
        save_params(&path, net.params()).unwrap();

        let mut other = Network::build(tiny_config(), 99).unwrap();
        load_into(&path, other.params_mut()).unwrap();
        for i in 0..net.params().len() {
            assert_eq!(net.params().name(i), other.params().name(i));
            assert_eq!(net.params().value(i).data(), other.params().value(i).data());
        }
    }

    #[test]
    fn serialization_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let net = Network::build(tiny_config(), 5).unwrap();
        save_params(&a, net.params()).unwrap();
        save_params(&b, net.params()).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let net = Network::build(tiny_config(), 5).unwrap();
        save_params(&path, net.params()).unwrap();

        let mut wider = tiny_config();
        wider.base_channels = 4;
        let mut other = Network::build(wider, 5).unwrap();
        let err = load_into(&path, other.params_mut()).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("enc") || msg.contains("checkpoint tensor"),
            "error must name the offending tensor: {msg}"
        );
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPT").unwrap();
        assert!(matches!(load_params(&path), Err(LeError::Checkpoint(_))));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let net = Network::build(tiny_config(), 5).unwrap();
        save_params(&path, net.params()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_params(&path).is_err());
    }
}
