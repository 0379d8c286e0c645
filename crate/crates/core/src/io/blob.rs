//! Bit-exact tensor persistence.
//!
//! Layout, all little-endian: magic "SBZT", format version u16, rank
//! u16, dims as u64 each, payload as raw f64 bits, trailing CRC32
//! (IEEE, reflected 0xEDB88320) of the payload bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SBZT";
const VERSION: u16 = 1;

/// IEEE CRC32 over `bytes`.
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *slot = c;
    }
    let mut crc = !0u32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    !crc
}

pub fn blob_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.rank() + 8 * t.numel() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u16).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    let payload_start = out.len();
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32(&out[payload_start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn blob_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let need = |n: usize, what: &str| -> Result<()> {
        if bytes.len() < n {
            return Err(Error::Integrity(format!("blob truncated in {what}")));
        }
        Ok(())
    };
    need(8, "header")?;
    if &bytes[0..4] != MAGIC {
        return Err(Error::Integrity("bad magic, not a tensor blob".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Integrity(format!("unsupported blob version {version}")));
    }
    let rank = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    need(8 + 8 * rank, "dims")?;
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 8 + 8 * i;
        let d = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        shape.push(d as usize);
    }
    let numel: usize = shape.iter().product();
    let payload_start = 8 + 8 * rank;
    need(payload_start + 8 * numel + 4, "payload")?;
    let payload = &bytes[payload_start..payload_start + 8 * numel];
    let stored_crc = u32::from_le_bytes(
        bytes[payload_start + 8 * numel..payload_start + 8 * numel + 4]
            .try_into()
            .unwrap(),
    );
    if crc32(payload) != stored_crc {
        return Err(Error::Integrity("payload CRC mismatch".into()));
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

pub fn save_blob(t: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, blob_bytes(t))?;
    Ok(())
}

pub fn load_blob(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    blob_from_bytes(&bytes)
}
