//! Binary tensor files and parameter checkpoints.
//!
//! Tensor file layout: `MDK1`, u32 rank, rank × u32 dims, then row-major
//! little-endian f64 values. A checkpoint is a directory with one tensor file
//! per parameter plus `manifest.txt` listing `name dim0xdim1x...` per line.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

use super::{Module, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"MDK1";
pub const MANIFEST: &str = "manifest.txt";

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 8 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let fail = |offset: usize, msg: &str| Error::parse(origin, offset, format!("byte {offset}: {msg}"));
    let u32_at = |off: usize| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| fail(off, "truncated header"))
    };
    if bytes.len() < 4 || &bytes[..4] != TENSOR_MAGIC {
        return Err(fail(0, "missing MDK1 magic"));
    }
    let rank = u32_at(4)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        shape.push(u32_at(8 + 4 * i)? as usize);
    }
    let start = 8 + 4 * rank;
    let n: usize = shape.iter().product();
    let body = &bytes[start.min(bytes.len())..];
    if body.len() != 8 * n {
        return Err(fail(start + body.len(), &format!("expected {} data bytes, found {}", 8 * n, body.len())));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(&shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

fn shape_string(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

pub fn save_checkpoint(module: &dyn Module, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    let mut result = Ok(());
    module.visit(&mut |p| {
        if result.is_err() {
            return;
        }
        manifest.push_str(&format!("{} {}\n", p.name, shape_string(p.value.shape())));
        result = write_tensor(&dir.join(format!("{}.mdk", p.name)), &p.value);
    });
    result?;
    let path = dir.join(MANIFEST);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(manifest.as_bytes()).map_err(|e| Error::io(&path, e))
}

/// Loads every parameter of `module` from `dir`, validating names and shapes
/// against both the manifest and the module.
pub fn load_checkpoint(module: &mut dyn Module, dir: &Path) -> Result<()> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut listed = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (name, shape) = line
            .split_once(' ')
            .ok_or_else(|| Error::parse(&path, i + 1, "expected `name shape`"))?;
        listed.insert(name.to_string(), (i + 1, shape.to_string()));
    }
    let mut result = Ok(());
    let mut seen = 0;
    module.visit_mut(&mut |p| {
        if result.is_err() {
            return;
        }
        let want = shape_string(p.value.shape());
        result = match listed.get(&p.name) {
            None => Err(Error::config(format!("checkpoint lacks parameter {}", p.name))),
            Some((line, s)) if *s != want => Err(Error::parse(
                &path,
                *line,
                format!("{} has shape {s}, model expects {want}", p.name),
            )),
            Some(_) => read_tensor(&dir.join(format!("{}.mdk", p.name))).and_then(|t| {
                if t.shape() != p.value.shape() {
                    return Err(Error::dim(format!(
                        "{} file shape {:?} vs {:?}",
                        p.name,
                        t.shape(),
                        p.value.shape()
                    )));
                }
                p.value = t;
                seen += 1;
                Ok(())
            }),
        };
    });
    result?;
    if seen != listed.len() {
        return Err(Error::config(format!(
            "checkpoint lists {} parameters, model has {seen}",
            listed.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Linear, Param};
    use proptest::prelude::*;
    use rand::SeedableRng;

    proptest! {
        #[test]
        fn tensor_bytes_round_trip(dims in prop::collection::vec(1usize..4, 1..4), seed in any::<u64>()) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::randn(&dims, &mut rng);
            let back = decode_tensor(&encode_tensor(&t), Path::new("mem")).unwrap();
            prop_assert_eq!(back, t);
        }
    }

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
        let b = encode_tensor(&t);
        assert_eq!(&b[..4], b"MDK1");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..20], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 28);
    }

    #[test]
    fn truncated_file_names_offset() {
        let t = Tensor::ones(&[3]);
        let b = encode_tensor(&t);
        let err = decode_tensor(&b[..b.len() - 3], Path::new("x.mdk")).unwrap_err();
        assert!(err.to_string().contains("byte"), "{err}");
    }

    #[test]
    fn checkpoint_round_trip_and_shape_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a = Linear::new("lin", 3, 2, &mut rng);
        save_checkpoint(&a, dir.path()).unwrap();
        let mut b = Linear::new("lin", 3, 2, &mut rng);
        load_checkpoint(&mut b, dir.path()).unwrap();
        assert_eq!(a.weight.value, b.weight.value);

        let mut wrong = Linear::new("lin", 4, 2, &mut rng);
        assert!(load_checkpoint(&mut wrong, dir.path()).is_err());
        let mut extra = Param::zeros("other", &[1]);
        assert!(load_checkpoint(&mut extra, dir.path()).is_err());
    }
}
