//! Checkpoint files.
//!
//! Layout (text header, binary payload):
//!
//! ```text
//! DAGNET-CKPT-v1
//! meta <key> <value>            zero or more, value runs to end of line
//! tensor <name> <d0>x<d1>... <byte-offset>
//! payload <byte-count>
//! <little-endian f64 values, concatenated in manifest order>
//! ```
//!
//! A rank-0 tensor is written with the shape token `-`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &str = "DAGNET-CKPT-v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore,
}

pub fn encode(params: &ParamStore, meta: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    for (k, v) in meta {
        if k.contains(char::is_whitespace) || v.contains('\n') {
            return Err(Error::Checkpoint(format!("unencodable metadata entry `{k}`")));
        }
        header.push_str(&format!("meta {k} {v}\n"));
    }
    let mut offset = 0usize;
    for (_, name, t) in params.iter() {
        if name.contains(char::is_whitespace) {
            return Err(Error::Checkpoint(format!("unencodable parameter name `{name}`")));
        }
        let shape = if t.shape().is_empty() {
            "-".to_string()
        } else {
            t.shape()
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join("x")
        };
        header.push_str(&format!("tensor {name} {shape} {offset}\n"));
        offset += t.numel() * 8;
    }
    header.push_str(&format!("payload {offset}\n"));

    let mut out = header.into_bytes();
    out.reserve(offset);
    for (_, _, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |msg: String| Error::Checkpoint(msg);
    let mut pos = 0usize;
    let next_line = |pos: &mut usize| -> Result<String> {
        let rest = &bytes[*pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header".into()))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| bad("header is not UTF-8".into()))?
            .to_string();
        *pos += end + 1;
        Ok(line)
    };

    let magic = next_line(&mut pos)?;
    if magic != MAGIC {
        return Err(bad(format!("bad magic `{magic}`")));
    }
    let mut meta = BTreeMap::new();
    let mut manifest: Vec<(String, Vec<usize>, usize)> = Vec::new();
    let payload_len = loop {
        let line = next_line(&mut pos)?;
        let (kind, rest) = line.split_once(' ').unwrap_or((line.as_str(), ""));
        match kind {
            "meta" => {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.insert(k.to_string(), v.to_string());
            }
            "tensor" => {
                let fields: Vec<&str> = rest.split(' ').collect();
                let [name, shape, offset] = fields.as_slice() else {
                    return Err(bad(format!("malformed manifest line `{line}`")));
                };
                let dims = if *shape == "-" {
                    vec![]
                } else {
                    shape
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad(format!("bad shape `{shape}`")))?
                };
                let offset = offset
                    .parse()
                    .map_err(|_| bad(format!("bad offset `{offset}`")))?;
                manifest.push((name.to_string(), dims, offset));
            }
            "payload" => {
                break rest
                    .parse::<usize>()
                    .map_err(|_| bad(format!("bad payload size `{rest}`")))?
            }
            _ => return Err(bad(format!("unexpected header line `{line}`"))),
        }
    };

    let payload = &bytes[pos..];
    if payload.len() != payload_len {
        return Err(bad(format!(
            "payload holds {} bytes, header says {payload_len}",
            payload.len()
        )));
    }
    let mut params = ParamStore::new();
    for (name, dims, offset) in manifest {
        let numel: usize = dims.iter().product();
        let end = offset + numel * 8;
        if end > payload.len() {
            return Err(bad(format!("tensor `{name}` exceeds payload")));
        }
        let data = payload[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        params.add(name, Tensor::new(&dims, data)?)?;
    }
    Ok(Checkpoint { meta, params })
}

pub fn save(path: &Path, params: &ParamStore, meta: &BTreeMap<String, String>) -> Result<()> {
    let bytes = encode(params, meta)?;
    let mut f = fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(&bytes)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes =
        fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode(&bytes)
}
