//! Client-to-server packet and its little-endian wire encoding.
//!
//! Layout: magic `FMLP`, version u16, client_id u32, backbone id (u16
//! length + UTF-8), block count u16, batch u16, seq u16, hidden u32,
//! classes u16; then each block as `batch·seq·hidden` f16 values, the
//! deviation as `batch·classes` f16 values, and a trailer of `batch`
//! u32 sample ids.

use half::f16;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PACKET_MAGIC: &[u8; 4] = b"FMLP";
pub const PACKET_VERSION: u16 = 1;
/// Bytes per value on the wire.
pub const WIRE_BYTES: usize = 2;

/// Rounds to the nearest f16 (ties to even) and back.
pub fn quantize(x: f64) -> f64 {
    f16::from_f64(x).to_f64()
}

fn quantize_tensor(t: &Tensor) -> Result<Tensor> {
    let data: Vec<f64> = t.data().iter().map(|&x| quantize(x)).collect();
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("value overflows 16-bit wire precision".into()));
    }
    Tensor::new(t.shape().to_vec(), data)
}

/// One batch of tapped activations plus deviations, held at wire precision.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationPacket {
    pub client_id: u32,
    pub backbone_id: String,
    pub sample_ids: Vec<u32>,
    pub seq_len: usize,
    /// `B` tensors of shape `[batch, seq, hidden]`.
    pub blocks: Vec<Tensor>,
    /// `[batch, classes]`.
    pub deviation: Tensor,
    /// Always 0: every sample is sent exactly once.
    pub epoch_flag: u8,
}

impl ActivationPacket {
    /// Validates shapes and rounds every value to wire precision.
    pub fn new(
        client_id: u32,
        backbone_id: &str,
        sample_ids: Vec<u32>,
        blocks: &[Tensor],
        deviation: &Tensor,
    ) -> Result<Self> {
        let batch = sample_ids.len();
        let first = blocks
            .first()
            .ok_or_else(|| Error::Dimension("packet needs at least one block".into()))?;
        if first.shape().len() != 3 || first.shape()[0] != batch {
            return Err(Error::Dimension(format!(
                "block shape {:?} does not match batch {batch}",
                first.shape()
            )));
        }
        if blocks.iter().any(|b| b.shape() != first.shape()) {
            return Err(Error::Dimension("blocks must share one shape".into()));
        }
        if deviation.shape().len() != 2 || deviation.shape()[0] != batch {
            return Err(Error::Dimension(format!(
                "deviation shape {:?} does not match batch {batch}",
                deviation.shape()
            )));
        }
        Ok(ActivationPacket {
            client_id,
            backbone_id: backbone_id.to_string(),
            seq_len: first.shape()[1],
            sample_ids,
            blocks: blocks.iter().map(quantize_tensor).collect::<Result<_>>()?,
            deviation: quantize_tensor(deviation)?,
            epoch_flag: 0,
        })
    }

    pub fn batch(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn hidden(&self) -> usize {
        self.blocks[0].shape()[2]
    }

    pub fn num_classes(&self) -> usize {
        self.deviation.shape()[1]
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn payload_bytes(&self) -> usize {
        payload_bytes(
            self.backbone_id.len(),
            self.block_count(),
            self.batch(),
            self.seq_len,
            self.hidden(),
            self.num_classes(),
        )
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.payload_bytes());
        out.extend_from_slice(PACKET_MAGIC);
        out.extend_from_slice(&PACKET_VERSION.to_le_bytes());
        out.extend_from_slice(&self.client_id.to_le_bytes());
        out.extend_from_slice(&(self.backbone_id.len() as u16).to_le_bytes());
        out.extend_from_slice(self.backbone_id.as_bytes());
        out.extend_from_slice(&(self.block_count() as u16).to_le_bytes());
        out.extend_from_slice(&(self.batch() as u16).to_le_bytes());
        out.extend_from_slice(&(self.seq_len as u16).to_le_bytes());
        out.extend_from_slice(&(self.hidden() as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_classes() as u16).to_le_bytes());
        for t in self.blocks.iter().chain(std::iter::once(&self.deviation)) {
            for &x in t.data() {
                out.extend_from_slice(&f16::from_f64(x).to_le_bytes());
            }
        }
        for id in &self.sample_ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor::new(bytes);
        let p = Self::decode_from(&mut c)?;
        c.finish()?;
        Ok(p)
    }

    pub(crate) fn decode_from(c: &mut Cursor<'_>) -> Result<Self> {
        if c.take(4)? != PACKET_MAGIC {
            return Err(Error::Format("bad packet magic".into()));
        }
        let version = c.u16()?;
        if version != PACKET_VERSION {
            return Err(Error::Format(format!("unsupported packet version {version}")));
        }
        let client_id = c.u32()?;
        let id_len = c.u16()? as usize;
        let backbone_id = String::from_utf8(c.take(id_len)?.to_vec())
            .map_err(|_| Error::Format("backbone id is not UTF-8".into()))?;
        let b = c.u16()? as usize;
        let batch = c.u16()? as usize;
        let seq = c.u16()? as usize;
        let hidden = c.u32()? as usize;
        let classes = c.u16()? as usize;
        if b == 0 || batch == 0 {
            return Err(Error::Format("packet with zero blocks or zero batch".into()));
        }
        let mut read = |shape: Vec<usize>| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| c.f16()).collect::<Result<Vec<_>>>()?;
            Tensor::new(shape, data)
        };
        let blocks = (0..b)
            .map(|_| read(vec![batch, seq, hidden]))
            .collect::<Result<Vec<_>>>()?;
        let deviation = read(vec![batch, classes])?;
        let sample_ids = (0..batch).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        Ok(ActivationPacket {
            client_id,
            backbone_id,
            sample_ids,
            seq_len: seq,
            blocks,
            deviation,
            epoch_flag: 0,
        })
    }
}

/// Header plus sample-id trailer.
pub fn framing_bytes(id_len: usize, batch: usize) -> usize {
    4 + 2 + 4 + 2 + id_len + 2 + 2 + 2 + 4 + 2 + 4 * batch
}

/// Closed-form encoded size of one packet.
pub fn payload_bytes(id_len: usize, b: usize, batch: usize, seq: usize, hidden: usize, classes: usize) -> usize {
    b * batch * seq * hidden * WIRE_BYTES + batch * classes * WIRE_BYTES + framing_bytes(id_len, batch)
}

/// Bounds-checked little-endian reader.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated input at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub(crate) fn f16(&mut self) -> Result<f64> {
        Ok(f16::from_le_bytes(self.array()?).to_f64())
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.is_empty() {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn packet() -> ActivationPacket {
        let blocks: Vec<Tensor> = (0..3)
            .map(|j| Tensor::from_fn(&[2, 4, 5], |i| (i as f64 * 0.37 + j as f64).sin() * 3.0))
            .collect();
        let dev = Tensor::new(vec![2, 3], vec![0.2, -0.7, 0.5, -0.9, 0.6, 0.3]).unwrap();
        ActivationPacket::new(7, "tier-b", vec![11, 12], &blocks, &dev).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let p = packet();
        let bytes = p.encode();
        assert_eq!(bytes.len(), p.payload_bytes());
        let back = ActivationPacket::decode(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn quantization_rounds_to_nearest_even() {
        // 1 + 2^-11 lies halfway between 1 and the next f16; ties go to 1.
        assert_eq!(quantize(1.0 + 2f64.powi(-11)), 1.0);
        assert_eq!(quantize(0.1), f16::from_f32(0.1).to_f64());
        assert!(quantize(1e6).is_infinite());
    }

    #[test]
    fn closed_form_size_for_reference_shape() {
        let blocks = payload_bytes(1, 8, 8, 32, 64, 4) - framing_bytes(1, 8);
        assert_eq!(blocks, 8 * (8 * 32 * 64 * 2) + 8 * 4 * 2);
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let bytes = packet().encode();
        assert!(matches!(ActivationPacket::decode(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ActivationPacket::decode(&bad), Err(Error::Format(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(ActivationPacket::decode(&long), Err(Error::Format(_))));
    }

    #[test]
    fn overflow_is_numeric_error() {
        let b = Tensor::from_fn(&[1, 1, 1], |_| 1e9);
        let d = Tensor::zeros(&[1, 2]);
        assert!(matches!(ActivationPacket::new(0, "x", vec![0], &[b], &d), Err(Error::Numeric(_))));
    }
}
