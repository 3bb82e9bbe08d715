//! Single-file model checkpoints.
//!
//! Layout (little endian): magic `DFENETCK`, format version `u32`, dtype tag
//! (`u32` length + bytes), model configuration as `key = value` text
//! (`u64` length + bytes), entry count `u64`, then per entry: name
//! (`u32` length + bytes), kind `u8` (0 weight, 1 buffer), rank `u32`, dims
//! `u64` each, and the raw values in the dtype.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::kv;
use crate::model::{Model, ModelConfig};
use crate::params::ParamKind;
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 8] = b"DFENETCK";
const VERSION: u32 = 1;

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), reason: reason.into() }
}

pub fn save_checkpoint<E: Scalar>(model: &Model<E>, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let config = kv::format(&model.config().to_kv());
    let store = &model.store;
    (|| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u32::<LittleEndian>(E::DTYPE.len() as u32)?;
        w.write_all(E::DTYPE.as_bytes())?;
        w.write_u64::<LittleEndian>(config.len() as u64)?;
        w.write_all(config.as_bytes())?;
        w.write_u64::<LittleEndian>(store.len() as u64)?;
        for id in store.ids() {
            let name = store.name(id);
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u8(match store.kind(id) {
                ParamKind::Weight => 0,
                ParamKind::Buffer => 1,
            })?;
            let t = store.get(id);
            w.write_u32::<LittleEndian>(t.rank() as u32)?;
            for &d in t.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &v in t.data() {
                if E::DTYPE == "f64" {
                    w.write_f64::<LittleEndian>(v.as_f64())?;
                } else {
                    w.write_f32::<LittleEndian>(v.as_f64() as f32)?;
                }
            }
        }
        w.flush()
    })()
    .map_err(io)
}

fn read_string(r: &mut impl Read, len: usize, path: &Path) -> Result<String> {
    if len > 1 << 20 {
        return Err(bad(path, "implausible string length"));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|_| bad(path, "truncated file"))?;
    String::from_utf8(buf).map_err(|_| bad(path, "invalid UTF-8"))
}

/// Reads only the stored model configuration.
pub fn read_config(path: &Path) -> Result<ModelConfig> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    read_header(&mut r, path).map(|(cfg, _)| cfg)
}

fn read_header(r: &mut impl Read, path: &Path) -> Result<(ModelConfig, String)> {
    let trunc = |_| bad(path, "truncated file");
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(trunc)?;
    if &magic != MAGIC {
        return Err(bad(path, "not a checkpoint (bad magic)"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(trunc)?;
    if version != VERSION {
        return Err(bad(path, format!("unsupported format version {version}")));
    }
    let len = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
    let dtype = read_string(r, len, path)?;
    let len = r.read_u64::<LittleEndian>().map_err(trunc)? as usize;
    let text = read_string(r, len, path)?;
    let cfg = ModelConfig::from_kv_text(&text).map_err(|e| bad(path, format!("stored config: {e}")))?;
    Ok((cfg, dtype))
}

/// Rebuilds the stored model. With `expected`, the stored configuration must
/// match it exactly.
pub fn load_checkpoint<E: Scalar>(path: &Path, expected: Option<&ModelConfig>) -> Result<Model<E>> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let (cfg, dtype) = read_header(&mut r, path)?;
    if let Some(want) = expected {
        if want != &cfg {
            return Err(bad(
                path,
                format!("configuration mismatch: checkpoint has {}, expected {}", describe(&cfg), describe(want)),
            ));
        }
    }
    let wide = match dtype.as_str() {
        "f32" => false,
        "f64" => true,
        other => return Err(bad(path, format!("unknown dtype {other}"))),
    };
    let mut model = Model::<E>::build(&cfg)?;
    let trunc = |_| bad(path, "truncated file");
    let count = r.read_u64::<LittleEndian>().map_err(trunc)? as usize;
    if count != model.store.len() {
        return Err(bad(path, format!("{count} tensors stored, model has {}", model.store.len())));
    }
    for id in model.store.ids().collect::<Vec<_>>() {
        let len = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let name = read_string(&mut r, len, path)?;
        if name != model.store.name(id) {
            return Err(bad(path, format!("tensor `{name}` where `{}` was expected", model.store.name(id))));
        }
        let kind = r.read_u8().map_err(trunc)?;
        let want_kind = matches!(model.store.kind(id), ParamKind::Buffer) as u8;
        if kind != want_kind {
            return Err(bad(path, format!("tensor `{name}` has the wrong kind")));
        }
        let rank = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        if rank > 8 {
            return Err(bad(path, format!("tensor `{name}` has rank {rank}")));
        }
        let shape: Vec<usize> =
            (0..rank).map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize)).collect::<std::io::Result<_>>().map_err(trunc)?;
        if shape != model.store.get(id).shape() {
            return Err(bad(path, format!("tensor `{name}` has shape {shape:?}, model expects {:?}", model.store.get(id).shape())));
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let v = if wide {
                r.read_f64::<LittleEndian>().map_err(trunc)?
            } else {
                r.read_f32::<LittleEndian>().map_err(trunc)? as f64
            };
            data.push(E::lit(v));
        }
        model.store.set(id, Tensor::new(&shape, data)?)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(bad(path, "trailing bytes"));
    }
    Ok(model)
}

fn describe(cfg: &ModelConfig) -> String {
    format!(
        "variant={} channels={} depth={}",
        cfg.variant,
        kv::join_usize_list(&cfg.channels),
        cfg.context_depth
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig { channels: vec![4, 6, 8], context_depth: 3, se_ratio: 2, ppd_width: 4, variant, seed: 3 }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        for v in Variant::ALL {
            let mut m = Model::<f32>::build(&tiny(v)).unwrap();
            let id = m.store.ids().last().unwrap();
            m.store.get_mut(id).data_mut()[0] = 0.123_456_78;
            let p = dir.path().join(format!("{v}.ckpt"));
            save_checkpoint(&m, &p).unwrap();
            let back = load_checkpoint::<f32>(&p, Some(&tiny(v))).unwrap();
            assert!(back.store.bit_equal(&m.store), "{v}");
            assert_eq!(read_config(&p).unwrap(), tiny(v));
        }
    }

    #[test]
    fn mismatch_and_corruption_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&Model::<f32>::build(&tiny(Variant::Dfenet)).unwrap(), &p).unwrap();
        let err = load_checkpoint::<f32>(&p, Some(&tiny(Variant::Unet2d))).unwrap_err().to_string();
        assert!(err.contains("mismatch"), "{err}");
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_checkpoint::<f32>(&p, None).unwrap_err().to_string().contains("truncated"));
        std::fs::write(&p, b"garbage!garbage!").unwrap();
        assert!(load_checkpoint::<f32>(&p, None).unwrap_err().to_string().contains("magic"));
    }
}
