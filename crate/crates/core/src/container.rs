//! Binary tensor container used for datasets and checkpoints.
//!
//! Layout: magic `CANT`, version u16, rank u8, extents as u32, then raw
//! 32-bit floats, everything little-endian. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::DataError;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CANT";
pub const VERSION: u16 = 1;

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Serializes one tensor into the container byte layout.
pub fn to_bytes(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 2 + 1 + 4 * tensor.rank() + 4 * tensor.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(tensor.rank() as u8);
    for &extent in tensor.shape() {
        out.extend_from_slice(&(extent as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Reads one tensor from a byte stream; used for files holding a single
/// tensor and for concatenated checkpoint blobs alike.
pub fn read_tensor(reader: &mut impl Read, path: &Path) -> Result<Tensor, DataError> {
    let display = || path.display().to_string();
    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(DataError::BadMagic { path: display() });
    }
    let mut buf2 = [0u8; 2];
    reader.read_exact(&mut buf2).map_err(|e| io_err(path, e))?;
    let version = u16::from_le_bytes(buf2);
    if version != VERSION {
        return Err(DataError::BadVersion {
            path: display(),
            version,
        });
    }
    let mut rank = [0u8; 1];
    reader.read_exact(&mut rank).map_err(|e| io_err(path, e))?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    let mut buf4 = [0u8; 4];
    for _ in 0..rank[0] {
        reader.read_exact(&mut buf4).map_err(|e| io_err(path, e))?;
        shape.push(u32::from_le_bytes(buf4) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut raw = vec![0u8; numel * 4];
    reader.read_exact(&mut raw).map_err(|_| DataError::Truncated {
        path: display(),
        detail: format!("expected {} data bytes", numel * 4),
    })?;
    let data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::new(shape, data)?)
}

pub fn write_file(path: &Path, tensor: &Tensor) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut writer = BufWriter::new(file);
    writer
        .write_all(&to_bytes(tensor))
        .map_err(|e| io_err(path, e))?;
    writer.flush().map_err(|e| io_err(path, e))
}

pub fn read_file(path: &Path) -> Result<Tensor, DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = BufReader::new(file);
    read_tensor(&mut reader, path)
}

/// SHA-1 of a byte stream, hex-encoded; the content hash recorded next to
/// checkpoints so evaluation can refuse a dataset the model never saw.
pub fn sha1_hex(bytes: &[u8]) -> String {
    let mut h: [u32; 5] = [0x67452301, 0xEFCDAB89, 0x98BADCFE, 0x10325476, 0xC3D2E1F0];
    let ml = (bytes.len() as u64) * 8;
    let mut msg = bytes.to_vec();
    msg.push(0x80);
    while msg.len() % 64 != 56 {
        msg.push(0);
    }
    msg.extend_from_slice(&ml.to_be_bytes());
    let mut w = [0u32; 80];
    for chunk in msg.chunks_exact(64) {
        for (i, word) in chunk.chunks_exact(4).enumerate() {
            w[i] = u32::from_be_bytes([word[0], word[1], word[2], word[3]]);
        }
        for i in 16..80 {
            w[i] = (w[i - 3] ^ w[i - 8] ^ w[i - 14] ^ w[i - 16]).rotate_left(1);
        }
        let (mut a, mut b, mut c, mut d, mut e) = (h[0], h[1], h[2], h[3], h[4]);
        for (i, &wi) in w.iter().enumerate() {
            let (f, k) = match i {
                0..=19 => ((b & c) | ((!b) & d), 0x5A827999u32),
                20..=39 => (b ^ c ^ d, 0x6ED9EBA1),
                40..=59 => ((b & c) | (b & d) | (c & d), 0x8F1BBCDC),
                _ => (b ^ c ^ d, 0xCA62C1D6),
            };
            let tmp = a
                .rotate_left(5)
                .wrapping_add(f)
                .wrapping_add(e)
                .wrapping_add(k)
                .wrapping_add(wi);
            e = d;
            d = c;
            c = b.rotate_left(30);
            b = a;
            a = tmp;
        }
        h[0] = h[0].wrapping_add(a);
        h[1] = h[1].wrapping_add(b);
        h[2] = h[2].wrapping_add(c);
        h[3] = h[3].wrapping_add(d);
        h[4] = h[4].wrapping_add(e);
    }
    h.iter().map(|v| format!("{v:08x}")).collect()
}

/// Content hash of one or more files, in the given order.
pub fn hash_files(paths: &[&Path]) -> Result<String, DataError> {
    let mut all = Vec::new();
    for path in paths {
        let mut file = File::open(path).map_err(|e| io_err(path, e))?;
        file.read_to_end(&mut all).map_err(|e| io_err(path, e))?;
    }
    Ok(sha1_hex(&all))
}
