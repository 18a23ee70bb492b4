//! Bit-exact payload framing.
//!
//! Layout (all multi-byte integers little-endian):
//!
//! | offset | size | field                     |
//! |--------|------|---------------------------|
//! | 0      | 4    | magic `"NBL1"`            |
//! | 4      | 1    | format version (1)        |
//! | 5      | 1    | method id                 |
//! | 6      | 4    | rows (m)                  |
//! | 10     | 4    | cols (n)                  |
//! | 14     | 4    | rank (r, 0 when unused)   |
//! | 18     | 8    | training step             |
//! | 26     | 8    | body length in bytes      |
//! | 34     | 4    | CRC-32 of the body        |
//! | 38     | ...  | body                      |

use crate::codec::CodecError;

/// File/wire magic, stored as the four ASCII bytes `NBL1`.
pub const MAGIC: [u8; 4] = *b"NBL1";
/// Current format version.
pub const VERSION: u8 = 1;
/// Fixed header size in bytes.
pub const HEADER_LEN: usize = 38;

/// Method identifiers carried in the header.
pub mod method_id {
    pub const IDENTITY: u8 = 0x00;
    pub const FP16: u8 = 0x01;
    pub const INT8: u8 = 0x02;
    pub const SVD: u8 = 0x03;
    pub const FP16_SVD: u8 = 0x13;
    pub const INT8_SVD: u8 = 0x23;
    /// Token-id payload used by the corruption protocol; body is opaque to
    /// the matrix codecs.
    pub const TOKENS: u8 = 0x40;
}

/// One encoded tensor (or token batch) ready for the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressedPayload {
    pub method_id: u8,
    pub rows: u32,
    pub cols: u32,
    /// Low-rank stage rank; zero when the method has no such stage.
    pub rank: u32,
    /// Training step the tensor belongs to.
    pub step: u64,
    pub body: Vec<u8>,
    /// CRC-32 of `body`.
    pub crc: u32,
}

impl CompressedPayload {
    /// Builds a payload, computing the body checksum.
    pub fn new(method_id: u8, rows: u32, cols: u32, rank: u32, step: u64, body: Vec<u8>) -> Self {
        let crc = crc32fast::hash(&body);
        Self { method_id, rows, cols, rank, step, body, crc }
    }

    pub fn body_len(&self) -> usize {
        self.body.len()
    }

    /// Serializes header plus body.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.body.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.method_id);
        out.extend_from_slice(&self.rows.to_le_bytes());
        out.extend_from_slice(&self.cols.to_le_bytes());
        out.extend_from_slice(&self.rank.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.body.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.crc.to_le_bytes());
        out.extend_from_slice(&self.body);
        out
    }

    /// Parses and validates a serialized payload (magic, version, length,
    /// checksum).
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() < HEADER_LEN {
            return Err(CodecError::Malformed(format!(
                "payload shorter than the {HEADER_LEN}-byte header ({} bytes)",
                bytes.len()
            )));
        }
        if bytes[0..4] != MAGIC {
            let mut m = [0u8; 4];
            m.copy_from_slice(&bytes[0..4]);
            return Err(CodecError::BadMagic(m));
        }
        if bytes[4] != VERSION {
            return Err(CodecError::UnsupportedVersion(bytes[4]));
        }
        let method_id = bytes[5];
        let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
        let cols = u32::from_le_bytes(bytes[10..14].try_into().unwrap());
        let rank = u32::from_le_bytes(bytes[14..18].try_into().unwrap());
        let step = u64::from_le_bytes(bytes[18..26].try_into().unwrap());
        let body_len = u64::from_le_bytes(bytes[26..34].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(bytes[34..38].try_into().unwrap());
        if bytes.len() != HEADER_LEN + body_len {
            return Err(CodecError::Malformed(format!(
                "body length field says {body_len} but {} bytes follow the header",
                bytes.len() - HEADER_LEN
            )));
        }
        let body = bytes[HEADER_LEN..].to_vec();
        let actual = crc32fast::hash(&body);
        if actual != crc {
            return Err(CodecError::ChecksumMismatch { expected: crc, actual });
        }
        Ok(Self { method_id, rows, cols, rank, step, body, crc })
    }

    /// Number of stored numeric elements (dense or factor form).
    pub fn element_count(&self) -> u64 {
        let m = self.rows as u64;
        let n = self.cols as u64;
        let r = self.rank as u64;
        if r == 0 {
            m * n
        } else {
            m * r + r + r * n
        }
    }

    /// Per-element width in bytes under the 32-bit dense wire convention
    /// used for byte accounting.
    fn accounted_width(&self) -> Option<u64> {
        match self.method_id {
            method_id::IDENTITY | method_id::SVD => Some(4),
            method_id::FP16 | method_id::FP16_SVD => Some(2),
            method_id::INT8 | method_id::INT8_SVD => Some(1),
            _ => None,
        }
    }

    /// Accounted data bytes: element count times the accounted per-element
    /// width. Quantizer scales are metadata and excluded. Token payloads are
    /// charged at their actual body size.
    pub fn data_bytes(&self) -> u64 {
        match self.accounted_width() {
            Some(w) => self.element_count() * w,
            None => self.body.len() as u64,
        }
    }

    /// Actual metadata bytes on the wire beyond the accounted data
    /// (the per-tensor scales of the int8 stages).
    pub fn metadata_bytes(&self) -> u64 {
        match self.method_id {
            method_id::INT8 => 8,
            method_id::INT8_SVD => 24,
            _ => 0,
        }
    }

    /// Bytes charged to the link for this payload: header plus accounted
    /// data plus metadata.
    pub fn charged_bytes(&self) -> u64 {
        HEADER_LEN as u64 + self.data_bytes() + self.metadata_bytes()
    }

    /// Accounted data bytes relative to the 32-bit dense baseline
    /// (`4 * rows * cols`).
    pub fn measured_ratio(&self) -> f64 {
        let baseline = 4u64 * self.rows as u64 * self.cols as u64;
        self.data_bytes() as f64 / baseline as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_pinned() {
        let p = CompressedPayload::new(method_id::FP16, 3, 2, 0, 7, vec![1, 2, 3, 4]);
        let b = p.to_bytes();
        assert_eq!(&b[0..4], b"NBL1");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 0x01);
        assert_eq!(&b[6..10], &3u32.to_le_bytes());
        assert_eq!(&b[10..14], &2u32.to_le_bytes());
        assert_eq!(&b[14..18], &0u32.to_le_bytes());
        assert_eq!(&b[18..26], &7u64.to_le_bytes());
        assert_eq!(&b[26..34], &4u64.to_le_bytes());
        assert_eq!(&b[34..38], &crc32fast::hash(&[1, 2, 3, 4]).to_le_bytes());
        assert_eq!(&b[38..], &[1, 2, 3, 4]);
        assert_eq!(b.len(), HEADER_LEN + 4);
    }

    #[test]
    fn roundtrip_preserves_every_field() {
        let p = CompressedPayload::new(method_id::INT8_SVD, 100, 50, 10, u64::MAX, vec![9; 33]);
        let q = CompressedPayload::from_bytes(&p.to_bytes()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn corrupted_body_fails_checksum() {
        let p = CompressedPayload::new(method_id::IDENTITY, 1, 1, 0, 0, vec![0u8; 8]);
        let mut b = p.to_bytes();
        b[HEADER_LEN] ^= 0xff;
        assert!(matches!(
            CompressedPayload::from_bytes(&b),
            Err(CodecError::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn bad_magic_version_and_length_are_rejected() {
        let p = CompressedPayload::new(method_id::IDENTITY, 1, 1, 0, 0, vec![0u8; 8]);
        let good = p.to_bytes();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(CompressedPayload::from_bytes(&bad), Err(CodecError::BadMagic(_))));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(
            CompressedPayload::from_bytes(&bad),
            Err(CodecError::UnsupportedVersion(9))
        ));

        let mut truncated = good.clone();
        truncated.pop();
        assert!(matches!(
            CompressedPayload::from_bytes(&truncated),
            Err(CodecError::Malformed(_))
        ));

        assert!(matches!(
            CompressedPayload::from_bytes(&good[..10]),
            Err(CodecError::Malformed(_))
        ));
    }

    #[test]
    fn byte_accounting_uses_dense_32bit_convention() {
        // Identity: 8-byte f64 body on the wire, accounted at 4 bytes/element.
        let ident = CompressedPayload::new(method_id::IDENTITY, 10, 10, 0, 0, vec![0u8; 800]);
        assert_eq!(ident.data_bytes(), 400);
        assert_eq!(ident.measured_ratio(), 1.0);

        let fp16 = CompressedPayload::new(method_id::FP16, 10, 10, 0, 0, vec![0u8; 200]);
        assert_eq!(fp16.data_bytes(), 200);
        assert_eq!(fp16.measured_ratio(), 0.5);

        let int8 = CompressedPayload::new(method_id::INT8, 10, 10, 0, 0, vec![0u8; 108]);
        assert_eq!(int8.data_bytes(), 100);
        assert_eq!(int8.metadata_bytes(), 8);
        assert_eq!(int8.measured_ratio(), 0.25);

        // Factor form: m*r + r + r*n elements.
        let svd16 = CompressedPayload::new(method_id::FP16_SVD, 100, 50, 10, 0, vec![0u8; 3020]);
        assert_eq!(svd16.element_count(), 1510);
        assert_eq!(svd16.data_bytes(), 3020);
        assert_eq!(svd16.measured_ratio(), 0.5 * 0.302);
    }
}
