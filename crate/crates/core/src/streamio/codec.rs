use std::io::{Read, Write};

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;

use super::{Record, StreamError};
use crate::wire::{Reader, WireError, Writer};

/// Upper bound on a decompressed record batch.
const MAX_BATCH_LEN: u64 = 64 << 20;

/// Compression codec, recorded as the first plaintext byte of a chunk body.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[repr(u8)]
pub enum Codec {
    None = 0,
    #[default]
    Deflate = 1,
}

impl Codec {
    pub fn from_byte(b: u8) -> Result<Self, StreamError> {
        match b {
            0 => Ok(Codec::None),
            1 => Ok(Codec::Deflate),
            _ => Err(StreamError::Malformed(WireError::Invalid("codec id"))),
        }
    }

    pub(super) fn compress(self, batch: &[u8]) -> Vec<u8> {
        let mut out = vec![self as u8];
        match self {
            Codec::None => out.extend_from_slice(batch),
            Codec::Deflate => {
                let mut enc = DeflateEncoder::new(out, Compression::default());
                enc.write_all(batch).expect("writing to a Vec cannot fail");
                out = enc.finish().expect("writing to a Vec cannot fail");
            }
        }
        out
    }

    pub(super) fn decompress(body: &[u8]) -> Result<Vec<u8>, StreamError> {
        let (&id, data) = body
            .split_first()
            .ok_or(StreamError::Malformed(WireError::Invalid("empty body")))?;
        match Codec::from_byte(id)? {
            Codec::None => Ok(data.to_vec()),
            Codec::Deflate => {
                let mut out = Vec::new();
                DeflateDecoder::new(data)
                    .take(MAX_BATCH_LEN + 1)
                    .read_to_end(&mut out)
                    .map_err(|e| StreamError::Decompress(e.to_string()))?;
                if out.len() as u64 > MAX_BATCH_LEN {
                    return Err(StreamError::Decompress("batch exceeds size limit".into()));
                }
                Ok(out)
            }
        }
    }
}

/// `count u32 || per record: ts i64 || len u32 || payload`
pub fn encode_batch(records: &[Record]) -> Vec<u8> {
    let mut w = Writer::with_capacity(4 + records.iter().map(|r| 12 + r.payload.len()).sum::<usize>());
    w.u32(u32::try_from(records.len()).expect("too many records"));
    for r in records {
        w.i64(r.ts).var_bytes(&r.payload);
    }
    w.finish()
}

pub fn decode_batch(bytes: &[u8]) -> Result<Vec<Record>, WireError> {
    let mut r = Reader::new(bytes);
    let count = r.u32()? as usize;
    // Each record occupies at least 12 bytes.
    if count > r.remaining() / 12 {
        return Err(WireError::Invalid("record count"));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let ts = r.i64()?;
        let payload = r.var_bytes()?.to_vec();
        out.push(Record { ts, payload });
    }
    r.finish()?;
    Ok(out)
}
