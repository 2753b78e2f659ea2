//! Binary feature files.
//!
//! ```text
//! magic   8 bytes  "MRFEAT01"
//! n       u64 LE
//! d       u64 LE
//! n × { id_len u32 LE, id UTF-8, cam_len u32 LE, cam UTF-8, d × f64 LE }
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::FeatureSet;

pub const FEATURE_MAGIC: &[u8; 8] = b"MRFEAT01";

pub fn encode_features(set: &FeatureSet) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(set.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(set.dim() as u64).to_le_bytes());
    for i in 0..set.len() {
        for s in [set.identity(i), set.camera(i)] {
            buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
            buf.extend_from_slice(s.as_bytes());
        }
        for v in set.row(i) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let at = self.pos;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
            offset: at as u64,
            message: format!("{what} is not UTF-8"),
        })
    }
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureSet> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8, "magic")? != FEATURE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic".into(),
        });
    }
    let n = cur.u64("record count")? as usize;
    let d_at = cur.pos;
    let d = cur.u64("dimension")? as usize;
    if d == 0 {
        return Err(Error::Format {
            offset: d_at as u64,
            message: "zero dimension".into(),
        });
    }
    let mut ids = Vec::new();
    let mut cams = Vec::new();
    let mut data = Vec::new();
    for _ in 0..n {
        ids.push(cur.string("identity")?);
        cams.push(cur.string("camera")?);
        let raw = cur.take(8 * d, "feature values")?;
        data.extend(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap())),
        );
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            offset: cur.pos as u64,
            message: format!("{} trailing bytes", bytes.len() - cur.pos),
        });
    }
    FeatureSet::new(d, data, ids, cams)
}

pub fn write_features(path: &Path, set: &FeatureSet) -> Result<()> {
    fs::write(path, encode_features(set)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one() -> FeatureSet {
        FeatureSet::from_rows(vec![vec![0.6, 0.8]], vec!["p1".into()], vec!["c0".into()]).unwrap()
    }

    #[test]
    fn empty_set_round_trips() {
        let set = FeatureSet::new(4, vec![], vec![], vec![]).unwrap();
        let bytes = encode_features(&set);
        assert_eq!(bytes.len(), 24);
        assert_eq!(decode_features(&bytes).unwrap(), set);
    }

    #[test]
    fn single_feature_round_trips() {
        let set = one();
        let back = decode_features(&encode_features(&set)).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.row(0)[1].to_bits(), 0.8f64.to_bits());
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let mut bytes = encode_features(&one());
        bytes[0] = b'X';
        assert!(matches!(
            decode_features(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_features(&one());
        let cut = &bytes[..bytes.len() - 3];
        match decode_features(cut) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, 24 + 4 + 2 + 4 + 2),
            other => panic!("{other:?}"),
        }
    }
}
