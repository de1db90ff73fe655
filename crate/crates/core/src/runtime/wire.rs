//! Length-prefixed frames exchanged between master and workers.
//!
//! Header (25 bytes, little-endian): magic `DGSW`, version u16, message
//! type u8, block id u16, iteration u64, payload length u64.

use std::io::Read;

use crate::admm::PropertyPenalties;
use crate::codec::{read_cloud_arrays, write_cloud_arrays, Precision, Reader, Writer};
use crate::error::{Error, Result};
use crate::scene::GaussianCloud;

pub const WIRE_MAGIC: [u8; 4] = *b"DGSW";
pub const WIRE_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 25;
/// Frames announcing a larger payload are rejected before allocation.
pub const MAX_PAYLOAD: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageType {
    Register = 1,
    LocalUpdate = 2,
    GlobalBroadcast = 3,
    NewIds = 4,
    Metrics = 5,
    Shutdown = 6,
    Ack = 7,
}

impl MessageType {
    pub fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            1 => Self::Register,
            2 => Self::LocalUpdate,
            3 => Self::GlobalBroadcast,
            4 => Self::NewIds,
            5 => Self::Metrics,
            6 => Self::Shutdown,
            7 => Self::Ack,
            other => return Err(Error::Protocol(format!("unknown message type {other}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub version: u16,
    pub message_type: MessageType,
    pub block_id: u16,
    pub iteration: u64,
    pub payload_len: u64,
}

pub fn encode_frame(
    message_type: MessageType,
    block_id: u16,
    iteration: u64,
    payload: &[u8],
) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.reserve(HEADER_LEN + payload.len());
    w.bytes(&WIRE_MAGIC);
    w.u16(WIRE_VERSION);
    w.u8(message_type as u8);
    w.u16(block_id);
    w.u64(iteration);
    w.u64(payload.len() as u64);
    w.bytes(payload);
    w.into_inner()
}

pub fn decode_header(bytes: &[u8]) -> Result<FrameHeader> {
    let mut r = Reader::new(bytes, "frame header");
    let magic = r.tag()?;
    if magic != WIRE_MAGIC {
        return Err(Error::BadMagic {
            expected: WIRE_MAGIC,
            found: magic,
        });
    }
    let version = r.u16()?;
    if version != WIRE_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: WIRE_VERSION,
        });
    }
    Ok(FrameHeader {
        version,
        message_type: MessageType::from_u8(r.u8()?)?,
        block_id: r.u16()?,
        iteration: r.u64()?,
        payload_len: r.u64()?,
    })
}

/// Header and payload of one complete frame.
pub fn split_frame(bytes: &[u8]) -> Result<(FrameHeader, &[u8])> {
    let header = decode_header(bytes)?;
    let body = &bytes[HEADER_LEN..];
    match (body.len() as u64).cmp(&header.payload_len) {
        std::cmp::Ordering::Less => Err(Error::Truncated {
            section: "frame payload",
        }),
        std::cmp::Ordering::Greater => Err(Error::TrailingBytes(
            body.len() - header.payload_len as usize,
        )),
        std::cmp::Ordering::Equal => Ok((header, body)),
    }
}

/// Reads one frame (header and payload) from a byte stream.
pub fn read_frame(stream: &mut impl Read) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; HEADER_LEN];
    stream.read_exact(&mut buf)?;
    let header = decode_header(&buf)?;
    if header.payload_len > MAX_PAYLOAD {
        return Err(Error::Protocol(format!(
            "payload of {} bytes exceeds the limit",
            header.payload_len
        )));
    }
    buf.resize(HEADER_LEN + header.payload_len as usize, 0);
    stream.read_exact(&mut buf[HEADER_LEN..])?;
    Ok(buf)
}

/// `count u64` followed by the parameter arrays of an ID-sorted cloud.
pub fn encode_payload(cloud: &GaussianCloud, precision: Precision) -> Vec<u8> {
    let mut w = Writer::new();
    w.u64(cloud.len() as u64);
    write_cloud_arrays(&mut w, cloud, precision);
    w.into_inner()
}

pub fn decode_payload(
    bytes: &[u8],
    feature_dim: usize,
    precision: Precision,
) -> Result<GaussianCloud> {
    let mut r = Reader::new(bytes, "gaussian payload");
    let cloud = read_payload(&mut r, feature_dim, precision)?;
    if !r.is_empty() {
        return Err(Error::TrailingBytes(r.remaining()));
    }
    Ok(cloud)
}

fn write_payload(w: &mut Writer, cloud: &GaussianCloud, precision: Precision) {
    w.u64(cloud.len() as u64);
    write_cloud_arrays(w, cloud, precision);
}

fn read_payload(
    r: &mut Reader<'_>,
    feature_dim: usize,
    precision: Precision,
) -> Result<GaussianCloud> {
    let count = r.u64()?;
    read_cloud_arrays(r, count, feature_dim, precision)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkerMetrics {
    /// Mean training loss since the previous upload, as raw f64 bits.
    pub loss_bits: u64,
    pub gaussians: u64,
    pub dual_checksum: u64,
}

impl WorkerMetrics {
    pub fn loss(&self) -> f64 {
        f64::from_bits(self.loss_bits)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Register {
        fingerprint: u64,
        precision: Precision,
        feature_dim: u32,
    },
    Ack {
        accepted: bool,
        reason: String,
    },
    LocalUpdate {
        shared: GaussianCloud,
        owned: Option<GaussianCloud>,
    },
    /// `model`, when present, is the assembled global model.
    GlobalBroadcast {
        penalties: PropertyPenalties,
        z: GaussianCloud,
        model: Option<GaussianCloud>,
    },
    NewIds {
        ids: Vec<u64>,
    },
    Metrics(WorkerMetrics),
    Shutdown,
}

impl Message {
    pub fn message_type(&self) -> MessageType {
        match self {
            Message::Register { .. } => MessageType::Register,
            Message::Ack { .. } => MessageType::Ack,
            Message::LocalUpdate { .. } => MessageType::LocalUpdate,
            Message::GlobalBroadcast { .. } => MessageType::GlobalBroadcast,
            Message::NewIds { .. } => MessageType::NewIds,
            Message::Metrics(_) => MessageType::Metrics,
            Message::Shutdown => MessageType::Shutdown,
        }
    }

    /// Complete frame bytes.
    pub fn encode(&self, block_id: u16, iteration: u64, precision: Precision) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            Message::Register {
                fingerprint,
                precision,
                feature_dim,
            } => {
                w.u64(*fingerprint);
                w.u8(precision.tag());
                w.u32(*feature_dim);
            }
            Message::Ack { accepted, reason } => {
                w.u8(u8::from(*accepted));
                w.u32(reason.len() as u32);
                w.bytes(reason.as_bytes());
            }
            Message::LocalUpdate { shared, owned } => {
                w.u8(u8::from(owned.is_some()));
                write_payload(&mut w, shared, precision);
                if let Some(o) = owned {
                    write_payload(&mut w, o, precision);
                }
            }
            Message::GlobalBroadcast {
                penalties,
                z,
                model,
            } => {
                for v in [
                    penalties.rho_p,
                    penalties.rho_q,
                    penalties.rho_s,
                    penalties.rho_f,
                    penalties.rho_o,
                ] {
                    w.f64(v);
                }
                w.u8(u8::from(model.is_some()));
                write_payload(&mut w, z, precision);
                if let Some(m) = model {
                    write_payload(&mut w, m, precision);
                }
            }
            Message::NewIds { ids } => {
                w.u64(ids.len() as u64);
                ids.iter().for_each(|&id| w.u64(id));
            }
            Message::Metrics(m) => {
                w.u64(m.loss_bits);
                w.u64(m.gaussians);
                w.u64(m.dual_checksum);
            }
            Message::Shutdown => {}
        }
        encode_frame(self.message_type(), block_id, iteration, &w.into_inner())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub header: FrameHeader,
    pub message: Message,
}

/// Decodes a complete frame. Gaussian payloads use `feature_dim` and `precision`.
pub fn decode_message(bytes: &[u8], feature_dim: usize, precision: Precision) -> Result<Frame> {
    let (header, body) = split_frame(bytes)?;
    let mut r = Reader::new(body, "message body");
    let message = match header.message_type {
        MessageType::Register => Message::Register {
            fingerprint: r.u64()?,
            precision: Precision::from_tag(r.u8()?)?,
            feature_dim: r.u32()?,
        },
        MessageType::Ack => {
            let accepted = r.u8()? != 0;
            let len = r.u32()? as usize;
            let reason = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Protocol("ack reason is not utf-8".into()))?;
            Message::Ack { accepted, reason }
        }
        MessageType::LocalUpdate => {
            let flags = r.u8()?;
            let shared = read_payload(&mut r, feature_dim, precision)?;
            let owned = if flags & 1 == 1 {
                Some(read_payload(&mut r, feature_dim, precision)?)
            } else {
                None
            };
            Message::LocalUpdate { shared, owned }
        }
        MessageType::GlobalBroadcast => {
            let penalties = PropertyPenalties {
                rho_p: r.f64()?,
                rho_q: r.f64()?,
                rho_s: r.f64()?,
                rho_f: r.f64()?,
                rho_o: r.f64()?,
            };
            let flags = r.u8()?;
            let z = read_payload(&mut r, feature_dim, precision)?;
            let model = if flags & 1 == 1 {
                Some(read_payload(&mut r, feature_dim, precision)?)
            } else {
                None
            };
            Message::GlobalBroadcast {
                penalties,
                z,
                model,
            }
        }
        MessageType::NewIds => {
            let n = r.u64()?;
            if n.checked_mul(8).is_none_or(|b| b > r.remaining() as u64) {
                return Err(Error::CountOverflow {
                    count: n,
                    available: r.remaining(),
                });
            }
            Message::NewIds {
                ids: (0..n).map(|_| r.u64()).collect::<Result<_>>()?,
            }
        }
        MessageType::Metrics => Message::Metrics(WorkerMetrics {
            loss_bits: r.u64()?,
            gaussians: r.u64()?,
            dual_checksum: r.u64()?,
        }),
        MessageType::Shutdown => Message::Shutdown,
    };
    if !r.is_empty() {
        return Err(Error::TrailingBytes(r.remaining()));
    }
    Ok(Frame { header, message })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::ShDegree;
    use crate::testing::{axis_camera, random_cloud};

    #[test]
    fn header_layout() {
        let f = encode_frame(MessageType::Metrics, 0x0102, 0x0a0b_0c0d, &[9, 9]);
        assert_eq!(&f[0..4], b"DGSW");
        assert_eq!(&f[4..6], &[1, 0]);
        assert_eq!(f[6], 5);
        assert_eq!(&f[7..9], &[2, 1]);
        assert_eq!(&f[9..17], &[0x0d, 0x0c, 0x0b, 0x0a, 0, 0, 0, 0]);
        assert_eq!(&f[17..25], &[2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(f.len(), HEADER_LEN + 2);
    }

    #[test]
    fn empty_payload_is_eight_bytes() {
        let empty = GaussianCloud::new(ShDegree::Zero);
        let bytes = encode_payload(&empty, Precision::F32);
        assert_eq!(bytes, vec![0u8; 8]);
        assert_eq!(decode_payload(&bytes, 3, Precision::F32).unwrap(), empty);
    }

    #[test]
    fn payload_stride_matches_layout() {
        let c = random_cloud(1, 10, &axis_camera(16, 16, 20.0), ShDegree::One);
        assert_eq!(
            encode_payload(&c, Precision::F32).len(),
            8 + 10 * (8 + 23 * 4)
        );
        assert_eq!(
            decode_payload(&encode_payload(&c, Precision::F64), 12, Precision::F64).unwrap(),
            c
        );
    }

    #[test]
    fn out_of_order_ids_are_rejected() {
        let mut c = random_cloud(2, 3, &axis_camera(16, 16, 20.0), ShDegree::Zero);
        c.ids.swap(0, 2);
        let bytes = encode_payload(&c, Precision::F32);
        assert!(matches!(
            decode_payload(&bytes, 3, Precision::F32),
            Err(Error::NonMonotoneIds { index: 1 })
        ));
    }

    #[test]
    fn corrupted_headers() {
        let good = Message::Shutdown.encode(3, 7, Precision::F64);
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_header(&bad), Err(Error::BadMagic { .. })));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(
            decode_header(&bad),
            Err(Error::VersionMismatch {
                found: 9,
                expected: 1
            })
        ));
        let mut bad = good.clone();
        bad[6] = 42;
        assert!(matches!(decode_header(&bad), Err(Error::Protocol(_))));
        assert!(matches!(
            decode_header(&good[..10]),
            Err(Error::Truncated { .. })
        ));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(split_frame(&long), Err(Error::TrailingBytes(1))));
    }

    #[test]
    fn count_overflow() {
        let mut bytes = encode_payload(&GaussianCloud::new(ShDegree::Zero), Precision::F32);
        bytes[..8].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(
            decode_payload(&bytes, 3, Precision::F32),
            Err(Error::CountOverflow { .. })
        ));
    }

    #[test]
    fn every_message_round_trips() {
        let cam = axis_camera(16, 16, 20.0);
        let msgs = vec![
            Message::Register {
                fingerprint: 0xdead_beef,
                precision: Precision::F64,
                feature_dim: 3,
            },
            Message::Ack {
                accepted: false,
                reason: "fingerprint mismatch".into(),
            },
            Message::LocalUpdate {
                shared: random_cloud(3, 4, &cam, ShDegree::Zero),
                owned: None,
            },
            Message::LocalUpdate {
                shared: random_cloud(4, 2, &cam, ShDegree::Zero),
                owned: Some(random_cloud(5, 6, &cam, ShDegree::Zero)),
            },
            Message::GlobalBroadcast {
                penalties: PropertyPenalties::default(),
                z: random_cloud(6, 5, &cam, ShDegree::Zero),
                model: None,
            },
            Message::GlobalBroadcast {
                penalties: PropertyPenalties::uniform(3.0),
                z: random_cloud(7, 2, &cam, ShDegree::Zero),
                model: Some(random_cloud(8, 9, &cam, ShDegree::Zero)),
            },
            Message::NewIds {
                ids: vec![1, 5, 1 << 50],
            },
            Message::Metrics(WorkerMetrics {
                loss_bits: 0.25f64.to_bits(),
                gaussians: 12,
                dual_checksum: 99,
            }),
            Message::Shutdown,
        ];
        for (i, m) in msgs.into_iter().enumerate() {
            let bytes = m.encode(i as u16, 100 + i as u64, Precision::F64);
            let f = decode_message(&bytes, 3, Precision::F64).unwrap();
            assert_eq!(f.message, m);
            assert_eq!(
                (f.header.block_id, f.header.iteration),
                (i as u16, 100 + i as u64)
            );
            let mut cursor = std::io::Cursor::new(bytes.clone());
            assert_eq!(read_frame(&mut cursor).unwrap(), bytes);
        }
    }
}
