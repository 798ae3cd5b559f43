//! Parameter checkpoints: a text manifest (name, shape, byte offset) followed
//! by raw little-endian `f64` arrays, all in one file.
//!
//! ```text
//! "SCANCKPT" | u32 version | u64 manifest_len | manifest | u64 data_len | data | u32 crc32
//! ```
//!
//! Manifest lines are `meta <key> <value>` or
//! `param <name> <d0,d1,..> <offset> <count> <frozen>`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

use super::tape::ParamStore;
use super::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SCANCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore,
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(char::is_whitespace)
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut manifest = String::new();
    for (k, v) in &ckpt.meta {
        if !valid_token(k) || v.contains('\n') {
            return Err(Error::Format(format!("bad metadata entry {k:?}")));
        }
        manifest.push_str(&format!("meta {k} {v}\n"));
    }
    let mut data = Vec::new();
    let store = &ckpt.params;
    for id in store.ids() {
        let name = store.name(id);
        if !valid_token(name) {
            return Err(Error::Format(format!("bad parameter name {name:?}")));
        }
        let t = store.get(id);
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!(
            "param {name} {} {} {} {}\n",
            dims.join(","),
            data.len(),
            t.len(),
            u8::from(store.is_frozen(id))
        ));
        for &v in t.data() {
            data.write_f64::<LittleEndian>(v)?;
        }
    }
    let mut out = Vec::with_capacity(data.len() + manifest.len() + 32);
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    out.write_u64::<LittleEndian>(manifest.len() as u64)?;
    out.extend_from_slice(manifest.as_bytes());
    out.write_u64::<LittleEndian>(data.len() as u64)?;
    out.extend_from_slice(&data);
    let crc = crc32fast::hash(&out);
    out.write_u32::<LittleEndian>(crc)?;
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 + 8 + 8 + 4 {
        return Err(Error::Truncated("checkpoint shorter than its fixed header".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let mut cur = Cursor::new(&bytes[8..]);
    let version = cur.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let body_len = bytes.len() - 4;
    let stored = (&bytes[body_len..]).read_u32::<LittleEndian>()?;
    let manifest_len = cur.read_u64::<LittleEndian>()? as usize;
    let manifest_start: usize = 8 + 4 + 8;
    let data_len_at = manifest_start
        .checked_add(manifest_len)
        .filter(|&end| end + 8 <= body_len)
        .ok_or_else(|| Error::Truncated("manifest runs past end of file".into()))?;
    let data_len = (&bytes[data_len_at..data_len_at + 8]).read_u64::<LittleEndian>()? as usize;
    let data_start = data_len_at + 8;
    if data_start + data_len != body_len {
        return Err(Error::Truncated(format!(
            "expected {} data bytes, found {}",
            data_len,
            body_len.saturating_sub(data_start)
        )));
    }
    let computed = crc32fast::hash(&bytes[..body_len]);
    if computed != stored {
        return Err(Error::Checksum { stored, computed });
    }
    let manifest = std::str::from_utf8(&bytes[manifest_start..data_len_at])
        .map_err(|_| Error::Format("manifest is not UTF-8".into()))?;
    let data = &bytes[data_start..body_len];

    let mut meta = BTreeMap::new();
    let mut params = ParamStore::new();
    for line in manifest.lines() {
        let mut parts = line.splitn(2, ' ');
        match (parts.next(), parts.next()) {
            (Some("meta"), Some(rest)) => {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.insert(k.to_string(), v.to_string());
            }
            (Some("param"), Some(rest)) => {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 5 {
                    return Err(Error::Format(format!("bad manifest line {line:?}")));
                }
                let shape = f[1]
                    .split(',')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Format(format!("bad shape in {line:?}: {e}")))?;
                let offset: usize = f[2].parse().map_err(|_| Error::Format(format!("bad offset in {line:?}")))?;
                let count: usize = f[3].parse().map_err(|_| Error::Format(format!("bad count in {line:?}")))?;
                if offset + count * 8 > data.len() {
                    return Err(Error::Truncated(format!("parameter {} past end of data", f[0])));
                }
                let mut reader = &data[offset..offset + count * 8];
                let mut values = vec![0.0; count];
                reader.read_f64_into::<LittleEndian>(&mut values)?;
                let id = params.add(f[0], Tensor::new(shape, values)?);
                params.set_param_frozen(id, f[4] == "1");
            }
            _ => return Err(Error::Format(format!("bad manifest line {line:?}"))),
        }
    }
    Ok(Checkpoint { meta, params })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}
