//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!   magic "ICLB" | u32 version = 1 | u32 tensor count
//!   per tensor: u16 name length | UTF-8 name | u8 rank | u32 dims... | f32 data
//!
//! Tensor values are written in row-major order; the byte stream is a pure
//! function of the parameter values, so identical parameters produce
//! identical files. A JSON configuration echo is stored alongside the binary
//! at `<path>.json`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, ArrayViewD};

use super::params::ParamSet;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ICLB";
pub const VERSION: u32 = 1;

/// Path of the JSON config echo stored next to a checkpoint.
pub fn echo_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

/// Writes named tensors in checkpoint layout. The write is atomic: a temp
/// file in the same directory is renamed over the target.
fn write_file(path: &Path, tensors: &[(String, ArrayViewD<'_, f32>)]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, view) in tensors {
            let bytes = name.as_bytes();
            if bytes.len() > u16::MAX as usize {
                return Err(Error::Checkpoint(format!("tensor name too long: {name}")));
            }
            w.write_all(&(bytes.len() as u16).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&[view.ndim() as u8])?;
            for &dim in view.shape() {
                w.write_all(&(dim as u32).to_le_bytes())?;
            }
            let slice = view
                .as_slice()
                .ok_or_else(|| Error::Checkpoint("non-contiguous tensor".into()))?;
            for &v in slice {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes `params` and the config echo.
pub fn save(path: &Path, params: &ParamSet<f32>, config_echo: &str) -> Result<()> {
    write_file(path, &params.visit())?;
    std::fs::write(echo_path(path), config_echo)?;
    Ok(())
}

/// Writes arbitrary named tensors in the same binary layout; used for raw
/// trace dumps. Readable with [`load`].
pub fn save_tensors(path: &Path, tensors: &[(String, ArrayD<f32>)]) -> Result<()> {
    let views: Vec<(String, ArrayViewD<'_, f32>)> =
        tensors.iter().map(|(n, a)| (n.clone(), a.view())).collect();
    write_file(path, &views)
}

/// Reads all tensors from a checkpoint file.
pub fn load(path: &Path) -> Result<Vec<(String, ArrayD<f32>)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut dims = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            dims.push(read_u32(&mut r)? as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut buf = [0u8; 4];
        for _ in 0..len {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf));
        }
        let arr = ArrayD::from_shape_vec(ndarray::IxDyn(&dims), data)
            .map_err(|e| Error::Checkpoint(format!("bad tensor shape: {e}")))?;
        out.push((name, arr));
    }
    Ok(out)
}

/// Reads the JSON config echo stored next to a checkpoint.
pub fn load_echo(path: &Path) -> Result<String> {
    Ok(std::fs::read_to_string(echo_path(path))?)
}

/// Report of a [`load_into`] call.
#[derive(Debug, Default)]
pub struct LoadReport {
    /// Tensors copied from the file.
    pub loaded: Vec<String>,
    /// Model tensors absent from the file (left at their current values).
    pub missing: Vec<String>,
}

/// Copies file tensors into `params` by name.
///
/// Shapes must match exactly, except the position table "ape": a file table
/// with fewer rows is copied into the leading rows (longer contexts extend a
/// shorter pretrained table; the tail stays at its current values). Tensors
/// present in the file but absent from the model are an error; model tensors
/// absent from the file are reported and left untouched.
pub fn load_into(
    params: &mut ParamSet<f32>,
    tensors: &[(String, ArrayD<f32>)],
) -> Result<LoadReport> {
    let model_names: Vec<String> = params.visit().into_iter().map(|(n, _)| n).collect();
    for (name, _) in tensors {
        if !model_names.iter().any(|n| n == name) {
            return Err(Error::Checkpoint(format!(
                "file tensor {name} has no model counterpart"
            )));
        }
    }
    let mut report = LoadReport::default();
    for (name, mut view) in params.visit_mut() {
        let Some((_, arr)) = tensors.iter().find(|(n, _)| *n == name) else {
            report.missing.push(name);
            continue;
        };
        if view.shape() == arr.shape() {
            for (dst, src) in view.iter_mut().zip(arr.iter()) {
                *dst = *src;
            }
        } else if name == "ape"
            && view.ndim() == 2
            && arr.ndim() == 2
            && arr.shape()[1] == view.shape()[1]
            && arr.shape()[0] <= view.shape()[0]
        {
            let cols = arr.shape()[1];
            for i in 0..arr.shape()[0] {
                for j in 0..cols {
                    view[[i, j]] = arr[[i, j]];
                }
            }
        } else {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name}: file {:?} vs model {:?}",
                arr.shape(),
                view.shape()
            )));
        }
        report.loaded.push(name);
    }
    Ok(report)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_params, ModelConfig};

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig { max_t: 17, ..ModelConfig::default() };
        let params = init_params::<f32>(&cfg, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &params, "{\"v\":1}").unwrap();

        let tensors = load(&path).unwrap();
        let mut restored = crate::net::ParamSet::<f32>::zeros(&cfg).unwrap();
        let report = load_into(&mut restored, &tensors).unwrap();
        assert!(report.missing.is_empty());
        for ((_, a), (_, b)) in params.visit().iter().zip(restored.visit().iter()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(load_echo(&path).unwrap(), "{\"v\":1}");
    }

    #[test]
    fn header_bytes_are_as_specified() {
        let cfg = ModelConfig { max_t: 5, d_model: 8, d_mlp: 16, n_labels: 4, ..ModelConfig::default() };
        let params = init_params::<f32>(&cfg, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &params, "{}").unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"ICLB");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        assert_eq!(count as usize, params.visit().len());
        // First tensor record: name length then name.
        let name_len = u16::from_le_bytes(bytes[12..14].try_into().unwrap()) as usize;
        assert_eq!(&bytes[14..14 + name_len], b"layer0.wq");
    }

    #[test]
    fn ape_prefix_loads_into_longer_table() {
        let small = ModelConfig { max_t: 5, d_model: 8, d_mlp: 16, n_labels: 4, ..ModelConfig::default() };
        let big = ModelConfig { max_t: 9, d_model: 8, d_mlp: 16, n_labels: 4, ..ModelConfig::default() };
        let mut p_small = init_params::<f32>(&small, 3).unwrap();
        p_small.ape.as_mut().unwrap().fill(0.25);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        save(&path, &p_small, "{}").unwrap();

        let mut p_big = init_params::<f32>(&big, 4).unwrap();
        p_big.ape.as_mut().unwrap().fill(0.75);
        let tensors = load(&path).unwrap();
        load_into(&mut p_big, &tensors).unwrap();
        let ape = p_big.ape.as_ref().unwrap();
        // Saved rows overwrite the prefix; rows past the saved length keep
        // their prior values.
        assert!(ape.slice(ndarray::s![0..5, ..]).iter().all(|&v| v == 0.25));
        assert!(ape.slice(ndarray::s![5..9, ..]).iter().all(|&v| v == 0.75));
    }

    #[test]
    fn mismatched_tensor_is_rejected() {
        let cfg = ModelConfig { max_t: 5, d_model: 8, d_mlp: 16, n_labels: 4, ..ModelConfig::default() };
        let other = ModelConfig { max_t: 5, d_model: 16, d_mlp: 16, n_labels: 4, ..ModelConfig::default() };
        let params = init_params::<f32>(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &params, "{}").unwrap();
        let tensors = load(&path).unwrap();
        let mut target = crate::net::ParamSet::<f32>::zeros(&other).unwrap();
        assert!(load_into(&mut target, &tensors).is_err());
    }
}
