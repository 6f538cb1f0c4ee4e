//! Binary message format for parameter exchange and checkpoints.
//!
//! Every payload — in-process, over a socket, or on disk — is the same byte
//! layout, so transport equivalence and checkpoint round-trips reduce to
//! byte equality. Numeric payloads are always little-endian `f32`; higher
//! precision runs convert on the way in and out.
//!
//! Layout:
//!
//! ```text
//! magic "FFTN" | version u16 | kind u8 | site_id u32 | epoch u32
//! | entry_count u32 | entries...
//! entry: name_len u16 | name utf-8 | rank u8 | dims u32 * rank
//!        | values f32 * product(dims)
//! ```
//!
//! All integers little-endian. The decoder tracks its byte offset and
//! reports it on any malformed input, validates every length against the
//! remaining buffer before allocating, and rejects non-finite values.

use crate::error::{Error, Result};
use crate::param_tree::{TreeEntry, TreeSnapshot};
use crate::tensor::Element;

pub const MAGIC: [u8; 4] = *b"FFTN";
pub const VERSION: u16 = 1;

/// Maximum tensor name length on the wire; matches the u16 length field.
const MAX_NAME_LEN: usize = u16::MAX as usize;
const MAX_RANK: u8 = 8;

/// Message discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageKind {
    /// Client announces itself to the coordinator.
    Register = 1,
    /// Coordinator pushes the shared parameter slice to a client.
    Deploy = 2,
    /// Client returns its locally trained shared slice.
    Upload = 3,
    /// Client confirms receipt of the final model.
    Ack = 4,
    /// Coordinator signals end of training, carrying the final aggregate.
    Finish = 5,
    /// On-disk checkpoint payload.
    Checkpoint = 0xFF,
}

impl MessageKind {
    pub fn from_byte(b: u8) -> Option<MessageKind> {
        match b {
            1 => Some(MessageKind::Register),
            2 => Some(MessageKind::Deploy),
            3 => Some(MessageKind::Upload),
            4 => Some(MessageKind::Ack),
            5 => Some(MessageKind::Finish),
            0xFF => Some(MessageKind::Checkpoint),
            _ => None,
        }
    }
}

/// A decoded message: header fields plus the carried parameter snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub kind: MessageKind,
    pub site_id: u32,
    pub epoch: u32,
    pub snapshot: TreeSnapshot<f32>,
}

impl Message {
    pub fn new(kind: MessageKind, site_id: u32, epoch: u32, snapshot: TreeSnapshot<f32>) -> Self {
        Message {
            kind,
            site_id,
            epoch,
            snapshot,
        }
    }

    /// A header-only message (registration, acknowledgement).
    pub fn control(kind: MessageKind, site_id: u32, epoch: u32) -> Self {
        Message::new(kind, site_id, epoch, Vec::new())
    }
}

/// Serializes a message to its byte representation.
pub fn encode(msg: &Message) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(64);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(msg.kind as u8);
    out.extend_from_slice(&msg.site_id.to_le_bytes());
    out.extend_from_slice(&msg.epoch.to_le_bytes());
    let count = u32::try_from(msg.snapshot.len())
        .map_err(|_| Error::protocol("too many entries for one message"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for entry in &msg.snapshot {
        if entry.name.len() > MAX_NAME_LEN {
            return Err(Error::protocol(format!(
                "tensor name exceeds {MAX_NAME_LEN} bytes: {}...",
                &entry.name[..32.min(entry.name.len())]
            )));
        }
        if entry.shape.len() > MAX_RANK as usize {
            return Err(Error::protocol(format!(
                "tensor rank {} exceeds wire limit {MAX_RANK}",
                entry.shape.len()
            )));
        }
        let expect: usize = entry.shape.iter().product();
        if expect != entry.data.len() {
            return Err(Error::protocol(format!(
                "entry '{}' carries {} values for shape {:?}",
                entry.name,
                entry.data.len(),
                entry.shape
            )));
        }
        out.extend_from_slice(&(entry.name.len() as u16).to_le_bytes());
        out.extend_from_slice(entry.name.as_bytes());
        out.push(entry.shape.len() as u8);
        for &dim in &entry.shape {
            let d = u32::try_from(dim)
                .map_err(|_| Error::protocol(format!("dimension {dim} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &entry.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Decode {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated: needed {n} bytes for {what}, {} left",
                self.buf.len() - self.pos
            )));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses a message, reporting the byte offset of the first defect.
pub fn decode(buf: &[u8]) -> Result<Message> {
    let mut r = Reader::new(buf);
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Decode {
            offset: 0,
            reason: format!("bad magic {magic:02x?}"),
        });
    }
    let version_at = r.pos;
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Decode {
            offset: version_at,
            reason: format!("unsupported version {version}"),
        });
    }
    let kind_at = r.pos;
    let kind_byte = r.u8("kind")?;
    let kind = MessageKind::from_byte(kind_byte).ok_or_else(|| Error::Decode {
        offset: kind_at,
        reason: format!("unknown message kind 0x{kind_byte:02x}"),
    })?;
    let site_id = r.u32("site id")?;
    let epoch = r.u32("epoch")?;
    let entry_count = r.u32("entry count")? as usize;

    let mut snapshot: TreeSnapshot<f32> = Vec::new();
    for index in 0..entry_count {
        let name_len = r.u16("name length")? as usize;
        let name_at = r.pos;
        let name_bytes = r.take(name_len, "name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|e| Error::Decode {
                offset: name_at + e.valid_up_to(),
                reason: format!("entry {index} name is not utf-8"),
            })?
            .to_string();
        if name.is_empty() {
            return Err(Error::Decode {
                offset: name_at,
                reason: format!("entry {index} has an empty name"),
            });
        }
        let rank_at = r.pos;
        let rank = r.u8("rank")?;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Decode {
                offset: rank_at,
                reason: format!("entry '{name}' rank {rank} outside 1..={MAX_RANK}"),
            });
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut elements: usize = 1;
        for axis in 0..rank {
            let dim_at = r.pos;
            let dim = r.u32("dimension")? as usize;
            if dim == 0 {
                return Err(Error::Decode {
                    offset: dim_at,
                    reason: format!("entry '{name}' axis {axis} has zero extent"),
                });
            }
            elements = elements.checked_mul(dim).ok_or_else(|| Error::Decode {
                offset: dim_at,
                reason: format!("entry '{name}' element count overflows"),
            })?;
            shape.push(dim);
        }
        let payload_at = r.pos;
        let byte_len = elements.checked_mul(4).ok_or_else(|| Error::Decode {
            offset: payload_at,
            reason: format!("entry '{name}' payload size overflows"),
        })?;
        let payload = r.take(byte_len, "tensor values")?;
        let mut data = Vec::with_capacity(elements);
        for (vi, chunk) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(Error::Decode {
                    offset: payload_at + 4 * vi,
                    reason: format!("entry '{name}' value {vi} is not finite"),
                });
            }
            data.push(v);
        }
        snapshot.push(TreeEntry { name, shape, data });
    }
    if r.pos != buf.len() {
        return Err(Error::Decode {
            offset: r.pos,
            reason: format!("{} trailing bytes after last entry", buf.len() - r.pos),
        });
    }
    Ok(Message {
        kind,
        site_id,
        epoch,
        snapshot,
    })
}

/// Converts a native-precision snapshot to the `f32` wire representation.
pub fn to_wire<T: Element>(snapshot: &TreeSnapshot<T>) -> TreeSnapshot<f32> {
    snapshot
        .iter()
        .map(|e| TreeEntry {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data: e.data.iter().map(|v| v.to_f32()).collect(),
        })
        .collect()
}

/// Converts a wire snapshot back to native precision.
pub fn from_wire<T: Element>(snapshot: &TreeSnapshot<f32>) -> TreeSnapshot<T> {
    snapshot
        .iter()
        .map(|e| TreeEntry {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data: e.data.iter().map(|&v| T::from_f32(v)).collect(),
        })
        .collect()
}

/// Serializes a model checkpoint: a full parameter snapshot tagged with the
/// owning site and the epoch it was captured at.
pub fn encode_checkpoint<T: Element>(
    site_id: u32,
    epoch: u32,
    snapshot: &TreeSnapshot<T>,
) -> Result<Vec<u8>> {
    encode(&Message::new(
        MessageKind::Checkpoint,
        site_id,
        epoch,
        to_wire(snapshot),
    ))
}

/// Reads back a checkpoint written by [`encode_checkpoint`], returning
/// `(site_id, epoch, snapshot)` at the caller's precision.
///
/// Blobs that decode to any other message kind are rejected so that stray
/// protocol traffic cannot be mistaken for a saved model.
pub fn decode_checkpoint<T: Element>(bytes: &[u8]) -> Result<(u32, u32, TreeSnapshot<T>)> {
    let msg = decode(bytes)?;
    if msg.kind != MessageKind::Checkpoint {
        return Err(Error::decode(
            6,
            format!("expected a checkpoint blob, found a {:?} message", msg.kind),
        ));
    }
    Ok((msg.site_id, msg.epoch, from_wire(&msg.snapshot)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_message() -> Message {
        Message::new(
            MessageKind::Upload,
            3,
            7,
            vec![
                TreeEntry {
                    name: "a.w".into(),
                    shape: vec![2, 2],
                    data: vec![1.0, -2.5, 0.0, 4.25],
                },
                TreeEntry {
                    name: "b".into(),
                    shape: vec![3],
                    data: vec![0.5, 0.25, -0.125],
                },
            ],
        )
    }

    #[test]
    fn round_trip_preserves_everything() {
        let msg = sample_message();
        let bytes = encode(&msg).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back, msg);
    }

    #[test]
    fn known_byte_layout() {
        // Hand-assembled single-entry message, checked byte for byte.
        let msg = Message::new(
            MessageKind::Deploy,
            0x0102_0304,
            5,
            vec![TreeEntry {
                name: "w".into(),
                shape: vec![2],
                data: vec![1.0, -1.0],
            }],
        );
        let mut want: Vec<u8> = Vec::new();
        want.extend_from_slice(b"FFTN");
        want.extend_from_slice(&1u16.to_le_bytes()); // version
        want.push(2); // deploy
        want.extend_from_slice(&0x0102_0304u32.to_le_bytes());
        want.extend_from_slice(&5u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes()); // one entry
        want.extend_from_slice(&1u16.to_le_bytes()); // name length
        want.push(b'w');
        want.push(1); // rank
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-1.0f32).to_le_bytes());
        assert_eq!(encode(&msg).unwrap(), want);
    }

    #[test]
    fn control_messages_carry_no_entries() {
        let msg = Message::control(MessageKind::Register, 9, 0);
        let bytes = encode(&msg).unwrap();
        assert_eq!(bytes.len(), 4 + 2 + 1 + 4 + 4 + 4);
        assert_eq!(decode(&bytes).unwrap(), msg);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = encode(&sample_message()).unwrap();
        bytes[0] = b'X';
        match decode(&bytes) {
            Err(Error::Decode { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected decode error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_version() {
        let mut bytes = encode(&sample_message()).unwrap();
        bytes[4] = 9;
        match decode(&bytes) {
            Err(Error::Decode { offset, reason }) => {
                assert_eq!(offset, 4);
                assert!(reason.contains("version"));
            }
            other => panic!("expected decode error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_unknown_kind() {
        let mut bytes = encode(&sample_message()).unwrap();
        bytes[6] = 0x77;
        match decode(&bytes) {
            Err(Error::Decode { offset, .. }) => assert_eq!(offset, 6),
            other => panic!("expected decode error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_truncation_at_every_length() {
        let bytes = encode(&sample_message()).unwrap();
        for cut in 0..bytes.len() {
            let err = decode(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, Error::Decode { .. }),
                "cut at {cut} gave {err:?}"
            );
        }
    }

    #[test]
    fn rejects_trailing_garbage() {
        let mut bytes = encode(&sample_message()).unwrap();
        let end = bytes.len();
        bytes.push(0);
        match decode(&bytes) {
            Err(Error::Decode { offset, reason }) => {
                assert_eq!(offset, end);
                assert!(reason.contains("trailing"));
            }
            other => panic!("expected decode error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_non_finite_values() {
        let msg = Message::new(
            MessageKind::Upload,
            1,
            1,
            vec![TreeEntry {
                name: "w".into(),
                shape: vec![2],
                data: vec![1.0, 2.0],
            }],
        );
        let mut bytes = encode(&msg).unwrap();
        let second_value_at = bytes.len() - 4;
        bytes[second_value_at..].copy_from_slice(&f32::NAN.to_le_bytes());
        match decode(&bytes) {
            Err(Error::Decode { offset, reason }) => {
                assert_eq!(offset, second_value_at);
                assert!(reason.contains("finite"));
            }
            other => panic!("expected decode error, got {other:?}"),
        }
        let mut bytes2 = encode(&msg).unwrap();
        let n = bytes2.len();
        bytes2[n - 4..].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(decode(&bytes2), Err(Error::Decode { .. })));
    }

    #[test]
    fn rejects_oversized_dimension_claim_before_allocating() {
        // A dimension of u32::MAX must fail on the length check against
        // the remaining bytes, not attempt a huge allocation.
        let msg = Message::new(
            MessageKind::Upload,
            1,
            1,
            vec![TreeEntry {
                name: "w".into(),
                shape: vec![2],
                data: vec![1.0, 2.0],
            }],
        );
        let mut bytes = encode(&msg).unwrap();
        // dims start after header(19) + name_len(2) + name(1) + rank(1)
        let dim_at = 19 + 2 + 1 + 1;
        bytes[dim_at..dim_at + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Decode { .. })));
    }

    #[test]
    fn rejects_zero_dimension() {
        let msg = Message::new(
            MessageKind::Upload,
            1,
            1,
            vec![TreeEntry {
                name: "w".into(),
                shape: vec![2],
                data: vec![1.0, 2.0],
            }],
        );
        let mut bytes = encode(&msg).unwrap();
        let dim_at = 19 + 2 + 1 + 1;
        bytes[dim_at..dim_at + 4].copy_from_slice(&0u32.to_le_bytes());
        match decode(&bytes) {
            Err(Error::Decode { offset, reason }) => {
                assert_eq!(offset, dim_at);
                assert!(reason.contains("zero"));
            }
            other => panic!("expected decode error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_invalid_utf8_name() {
        let msg = sample_message();
        let mut bytes = encode(&msg).unwrap();
        // First entry name starts after the 19-byte header + 2-byte length.
        bytes[21] = 0xFF;
        assert!(matches!(decode(&bytes), Err(Error::Decode { .. })));
    }

    #[test]
    fn encode_rejects_inconsistent_entry() {
        let msg = Message::new(
            MessageKind::Upload,
            1,
            1,
            vec![TreeEntry {
                name: "w".into(),
                shape: vec![3],
                data: vec![1.0, 2.0],
            }],
        );
        assert!(matches!(encode(&msg), Err(Error::Protocol(_))));
    }

    #[test]
    fn precision_conversion_round_trips_f32_exactly() {
        let native: TreeSnapshot<f64> = vec![TreeEntry {
            name: "w".into(),
            shape: vec![2],
            data: vec![0.5, -0.25],
        }];
        let wire = to_wire(&native);
        let back: TreeSnapshot<f64> = from_wire(&wire);
        assert_eq!(native, back);
    }

    #[test]
    fn checkpoint_round_trip_and_kind_guard() {
        let snapshot: TreeSnapshot<f64> = vec![TreeEntry {
            name: "denoiser.enc0.conv0.w".into(),
            shape: vec![2, 1, 1, 1, 1],
            data: vec![0.75, -1.5],
        }];
        let bytes = encode_checkpoint(3, 12, &snapshot).unwrap();
        let (site, epoch, back): (u32, u32, TreeSnapshot<f64>) =
            decode_checkpoint(&bytes).unwrap();
        assert_eq!(site, 3);
        assert_eq!(epoch, 12);
        assert_eq!(back, snapshot);

        let stray = encode(&Message::control(MessageKind::Ack, 3, 12)).unwrap();
        match decode_checkpoint::<f64>(&stray) {
            Err(Error::Decode { offset, reason }) => {
                assert_eq!(offset, 6);
                assert!(reason.contains("checkpoint"));
            }
            other => panic!("expected a kind rejection, got {other:?}"),
        }
    }
}
