//! The `.cdc` container: fixed little-endian header, two range-coded
//! payloads (hyper-latent first), and a CRC-32 of the payloads.
//!
//! ```text
//! off  size  field
//!   0     4  magic "CDC1"
//!   4     1  format version
//!   5     2  height            7  2  width
//!   9     1  bottom padding   10  1  right padding
//!  11     2  C_z
//!  13     1  schedule kind    14  4  n_train
//!  18     4  schedule param a 22  4  schedule param b (f32)
//!  26     1  parameterization
//!  27    16  model id
//!  43     4  y support lo, hi (i16)
//!  47     4  z support lo, hi (i16)
//!  51     8  y payload length, z payload length (u32)
//!  59        payloads, then crc32 (u32)
//! ```

use crate::schedule::{ScheduleKind, ScheduleParams};
use crate::transforms::Parameterization;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CDC1";
pub const FORMAT_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 59;
pub const CRC_LEN: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub height: u16,
    pub width: u16,
    pub pad_bottom: u8,
    pub pad_right: u8,
    pub c_z: u16,
    pub schedule_kind: ScheduleKind,
    pub n_train: u32,
    pub schedule_a: f32,
    pub schedule_b: f32,
    pub parameterization: Parameterization,
    pub model_id: [u8; 16],
    pub y_range: (i16, i16),
    pub z_range: (i16, i16),
}

impl Header {
    pub fn padded_dims(&self) -> (usize, usize) {
        (self.height as usize + self.pad_bottom as usize, self.width as usize + self.pad_right as usize)
    }

    pub fn schedule_params(&self) -> ScheduleParams {
        ScheduleParams { kind: self.schedule_kind, n_train: self.n_train, a: self.schedule_a as f64, b: self.schedule_b as f64 }
    }

    /// True when `p` rounds to the schedule recorded here.
    pub fn schedule_matches(&self, p: &ScheduleParams) -> bool {
        p.kind == self.schedule_kind && p.n_train == self.n_train && p.a as f32 == self.schedule_a && p.b as f32 == self.schedule_b
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bitstream {
    pub header: Header,
    pub payload_y: Vec<u8>,
    pub payload_z: Vec<u8>,
}

fn payload_crc(y: &[u8], z: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(y);
    h.update(z);
    h.finalize()
}

impl Bitstream {
    pub fn byte_len(&self) -> usize {
        HEADER_LEN + self.payload_y.len() + self.payload_z.len() + CRC_LEN
    }

    /// Bits per pixel of the whole container over the unpadded image.
    pub fn bpp(&self) -> f64 {
        (self.byte_len() * 8) as f64 / (self.header.height as f64 * self.header.width as f64)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut b = Vec::with_capacity(self.byte_len());
        b.extend_from_slice(MAGIC);
        b.push(FORMAT_VERSION);
        b.extend_from_slice(&h.height.to_le_bytes());
        b.extend_from_slice(&h.width.to_le_bytes());
        b.push(h.pad_bottom);
        b.push(h.pad_right);
        b.extend_from_slice(&h.c_z.to_le_bytes());
        b.push(h.schedule_kind.code());
        b.extend_from_slice(&h.n_train.to_le_bytes());
        b.extend_from_slice(&h.schedule_a.to_le_bytes());
        b.extend_from_slice(&h.schedule_b.to_le_bytes());
        b.push(h.parameterization.code());
        b.extend_from_slice(&h.model_id);
        for v in [h.y_range.0, h.y_range.1, h.z_range.0, h.z_range.1] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&(self.payload_y.len() as u32).to_le_bytes());
        b.extend_from_slice(&(self.payload_z.len() as u32).to_le_bytes());
        debug_assert_eq!(b.len(), HEADER_LEN);
        b.extend_from_slice(&self.payload_y);
        b.extend_from_slice(&self.payload_z);
        b.extend_from_slice(&payload_crc(&self.payload_y, &self.payload_z).to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(m.to_string());
        if b.len() < HEADER_LEN + CRC_LEN {
            return Err(fmt("file shorter than the header"));
        }
        if &b[0..4] != MAGIC {
            return Err(fmt("bad magic"));
        }
        if b[4] != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {}", b[4])));
        }
        let u16_at = |o: usize| u16::from_le_bytes([b[o], b[o + 1]]);
        let i16_at = |o: usize| i16::from_le_bytes([b[o], b[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        let f32_at = |o: usize| f32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        let mut model_id = [0u8; 16];
        model_id.copy_from_slice(&b[27..43]);
        let header = Header {
            height: u16_at(5),
            width: u16_at(7),
            pad_bottom: b[9],
            pad_right: b[10],
            c_z: u16_at(11),
            schedule_kind: ScheduleKind::from_code(b[13]).ok_or_else(|| fmt("unknown schedule kind"))?,
            n_train: u32_at(14),
            schedule_a: f32_at(18),
            schedule_b: f32_at(22),
            parameterization: Parameterization::from_code(b[26]).ok_or_else(|| fmt("unknown parameterization"))?,
            model_id,
            y_range: (i16_at(43), i16_at(45)),
            z_range: (i16_at(47), i16_at(49)),
        };
        let (ly, lz) = (u32_at(51) as usize, u32_at(55) as usize);
        if b.len() != HEADER_LEN + ly + lz + CRC_LEN {
            return Err(Error::Format(format!("payload lengths {ly} + {lz} do not match file size {}", b.len())));
        }
        if header.height == 0 || header.width == 0 {
            return Err(fmt("zero image dimension"));
        }
        if header.y_range.0 > header.y_range.1 || header.z_range.0 > header.z_range.1 {
            return Err(fmt("empty symbol support"));
        }
        let payload_y = b[HEADER_LEN..HEADER_LEN + ly].to_vec();
        let payload_z = b[HEADER_LEN + ly..HEADER_LEN + ly + lz].to_vec();
        let stored = u32_at(HEADER_LEN + ly + lz);
        let computed = payload_crc(&payload_y, &payload_z);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        Ok(Self { header, payload_y, payload_z })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Bitstream {
        Bitstream {
            header: Header {
                height: 250,
                width: 300,
                pad_bottom: 6,
                pad_right: 20,
                c_z: 64,
                schedule_kind: ScheduleKind::Cosine,
                n_train: 8193,
                schedule_a: 0.008,
                schedule_b: 0.0,
                parameterization: Parameterization::XPred,
                model_id: *b"0123456789abcdef",
                y_range: (-3, 4),
                z_range: (-20, 17),
            },
            payload_y: vec![1, 2, 3],
            payload_z: vec![9; 40],
        }
    }

    #[test]
    fn round_trip_and_size() {
        let b = sample();
        let bytes = b.to_bytes();
        assert_eq!(bytes.len(), b.byte_len());
        assert_eq!(bytes.len(), 59 + 3 + 40 + 4);
        assert_eq!(Bitstream::from_bytes(&bytes).unwrap(), b);
        assert_eq!(b.header.padded_dims(), (256, 320));
        assert!(b.header.schedule_matches(&ScheduleParams::cosine_default(8193)));
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes();
        let mut flipped = bytes.clone();
        flipped[HEADER_LEN + 5] ^= 0x40;
        assert!(matches!(Bitstream::from_bytes(&flipped), Err(Error::Checksum { .. })));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Bitstream::from_bytes(&magic).is_err());
        assert!(Bitstream::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Bitstream::from_bytes(&bytes[..10]).is_err());
    }
}
