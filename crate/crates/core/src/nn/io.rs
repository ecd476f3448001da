use std::path::Path;

use super::graph::Graph;
use super::tensor::{Real, Tensor};
use super::NnError;

pub const MAGIC: &[u8; 8] = b"QDPNNPRM";
pub const FORMAT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.pos + n > self.buf.len() {
            return Err(NnError::Format(format!(
                "truncated parameter blob: need {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Serializes parameters as: magic, version, manifest, then per tensor its
/// dimensions, CRC32 and little-endian f32 payload.
pub fn encode_params<T: Real>(graph: &Graph<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    let manifest = graph.manifest();
    put_u32(&mut out, manifest.len() as u32);
    out.extend_from_slice(manifest.as_bytes());
    put_u32(&mut out, graph.params.len() as u32);
    for p in &graph.params {
        put_u32(&mut out, p.shape.len() as u32);
        for &d in &p.shape {
            put_u32(&mut out, d as u32);
        }
        let payload: Vec<u8> = p
            .data
            .iter()
            .flat_map(|v| (v.to_f64() as f32).to_le_bytes())
            .collect();
        put_u32(&mut out, crc32fast::hash(&payload));
        out.extend_from_slice(&payload);
    }
    out
}

/// Loads parameters into a graph of identical architecture. Returns bytes consumed,
/// so several blobs can be read back to back.
pub fn decode_params_into<T: Real>(graph: &mut Graph<T>, bytes: &[u8]) -> Result<usize, NnError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(NnError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(NnError::Format(format!("unsupported format version {version}")));
    }
    let len = r.u32()? as usize;
    let manifest = std::str::from_utf8(r.take(len)?)
        .map_err(|_| NnError::Format("manifest is not UTF-8".into()))?;
    let expected = graph.manifest();
    if manifest != expected {
        return Err(NnError::ArchitectureMismatch {
            expected,
            found: manifest.to_string(),
        });
    }
    let count = r.u32()? as usize;
    if count != graph.params.len() {
        return Err(NnError::Format(format!(
            "blob has {count} tensors, graph has {}",
            graph.params.len()
        )));
    }
    let mut loaded = Vec::with_capacity(count);
    for (i, p) in graph.params.iter().enumerate() {
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        if shape != p.shape {
            return Err(NnError::Format(format!(
                "tensor {i} has shape {shape:?}, expected {:?}",
                p.shape
            )));
        }
        let crc = r.u32()?;
        let payload = r.take(p.len() * 4)?;
        if crc32fast::hash(payload) != crc {
            return Err(NnError::Checksum { tensor: i });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        loaded.push(Tensor { shape, data });
    }
    graph.params = loaded;
    Ok(r.pos)
}

pub fn save_params<T: Real>(graph: &Graph<T>, path: &Path) -> Result<(), NnError> {
    std::fs::write(path, encode_params(graph)).map_err(|e| NnError::Io(e.to_string()))
}

pub fn load_params<T: Real>(graph: &mut Graph<T>, path: &Path) -> Result<(), NnError> {
    let bytes = std::fs::read(path).map_err(|e| NnError::Io(e.to_string()))?;
    decode_params_into(graph, &bytes).map(|_| ())
}
