//! Binary tensor (`FCNT`) and checkpoint (`FCNZ`) files.
//!
//! Tensor record: magic `FCNT`, u32 version (1), u32 rank (4), four u32 dims,
//! then the payload as little-endian f32. Checkpoint: magic `FCNZ`, u32
//! version (1), u32 entry count, then per entry a u16 name length, the UTF-8
//! name and an embedded tensor record. Entries are written in name order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::tensor::{checked_len, Scalar, Tensor};

pub const TENSOR_MAGIC: [u8; 4] = *b"FCNT";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FCNZ";
pub const FORMAT_VERSION: u32 = 1;

/// Name-sorted parameter set.
pub type Checkpoint = BTreeMap<String, Tensor<f32>>;

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&4u32.to_le_bytes());
    for d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.reserve(t.len() * 4);
    for v in t.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.buf.len() < n {
            return Err(FormatError::Truncated {
                needed: n - self.buf.len(),
            });
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<(), FormatError> {
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if found != expected {
            return Err(FormatError::BadMagic { expected, found });
        }
        Ok(())
    }

    fn tensor(&mut self) -> Result<Tensor<f32>, FormatError> {
        self.magic(TENSOR_MAGIC)?;
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(FormatError::Version(version));
        }
        let rank = self.u32()?;
        if rank != 4 {
            return Err(FormatError::Rank(rank));
        }
        let raw = [self.u32()?, self.u32()?, self.u32()?, self.u32()?];
        let dims = raw.map(|d| d as usize);
        let len = checked_len(dims)
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or(FormatError::DimOverflow(raw))?;
        let payload = self.take(len * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(Tensor::new(dims, data).expect("length checked"))
    }
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = Reader { buf: bytes };
    let t = r.tensor()?;
    if !r.buf.is_empty() {
        return Err(FormatError::Trailing.into());
    }
    Ok(t)
}

pub fn write_tensor<T: Scalar>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    encode_tensor(t, &mut buf);
    let path = path.as_ref();
    fs::write(path, buf).map_err(|e| Error::from(e).at(path))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::from(e).at(path))?;
    decode_tensor(&bytes).map_err(|e| e.at(path))
}

/// Serialize named tensors. Names must be unique and nonempty; output order is
/// lexicographic by name regardless of input order.
pub fn encode_checkpoint<'a, T: Scalar>(
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> Result<Vec<u8>> {
    let mut sorted: BTreeMap<&str, &Tensor<T>> = BTreeMap::new();
    for (name, t) in entries {
        if name.is_empty() {
            return Err(Error::Invalid("empty checkpoint entry name".into()));
        }
        if name.len() > u16::MAX as usize {
            return Err(Error::Invalid(format!(
                "entry name too long: {} bytes",
                name.len()
            )));
        }
        if sorted.insert(name, t).is_some() {
            return Err(Error::DuplicateName(name.to_string()));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(sorted.len() as u32).to_le_bytes());
    for (name, t) in sorted {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode_tensor(t, &mut out);
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes };
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(FormatError::Version(version).into());
    }
    let count = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| FormatError::Utf8)?
            .to_string();
        let t = r.tensor()?;
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::DuplicateName(name));
        }
    }
    if !r.buf.is_empty() {
        return Err(FormatError::Trailing.into());
    }
    Ok(out)
}

pub fn write_checkpoint<'a, T: Scalar>(
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(entries)?;
    fs::write(path, bytes).map_err(|e| Error::from(e).at(path))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::from(e).at(path))?;
    decode_checkpoint(&bytes).map_err(|e| e.at(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unit_tensor_is_32_bytes() {
        let t = Tensor::<f32>::new([1, 1, 1, 1], vec![0.5]).unwrap();
        let mut buf = Vec::new();
        encode_tensor(&t, &mut buf);
        assert_eq!(buf.len(), 32);
        assert_eq!(&buf[..4], b"FCNT");
        assert_eq!(&buf[28..], &0.5f32.to_le_bytes());
    }

    #[test]
    fn bad_magic() {
        let mut buf = Vec::new();
        encode_tensor(&Tensor::<f32>::zeros([1, 1, 1, 1]), &mut buf);
        buf[..4].copy_from_slice(b"XXXX");
        let err = decode_tensor(&buf).unwrap_err();
        assert!(
            matches!(err, Error::Format(FormatError::BadMagic { .. })),
            "{err}"
        );
    }

    #[test]
    fn truncated_and_overflow_are_distinct() {
        let mut buf = Vec::new();
        encode_tensor(&Tensor::<f32>::zeros([1, 2, 3, 4]), &mut buf);
        let err = decode_tensor(&buf[..buf.len() - 1]).unwrap_err();
        assert!(
            matches!(err, Error::Format(FormatError::Truncated { needed: 1 })),
            "{err}"
        );

        let mut huge = Vec::new();
        huge.extend_from_slice(b"FCNT");
        huge.extend_from_slice(&1u32.to_le_bytes());
        huge.extend_from_slice(&4u32.to_le_bytes());
        for _ in 0..4 {
            huge.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        let err = decode_tensor(&huge).unwrap_err();
        assert!(
            matches!(err, Error::Format(FormatError::DimOverflow(_))),
            "{err}"
        );
    }

    #[test]
    fn negative_zero_survives() {
        let t = Tensor::<f32>::new([1, 1, 1, 2], vec![-0.0, f32::MIN_POSITIVE]).unwrap();
        let mut buf = Vec::new();
        encode_tensor(&t, &mut buf);
        let back = decode_tensor(&buf).unwrap();
        assert_eq!(back.data()[0].to_bits(), (-0.0f32).to_bits());
        assert_eq!(back.data()[1], f32::MIN_POSITIVE);
    }

    #[test]
    fn checkpoint_empty_and_sorted() {
        let bytes = encode_checkpoint::<f32>([]).unwrap();
        assert!(decode_checkpoint(&bytes).unwrap().is_empty());

        let a = Tensor::<f32>::full([1, 1, 1, 1], 1.0);
        let b = Tensor::<f32>::full([2, 1, 1, 1], 2.0);
        let bytes = encode_checkpoint([("zeta.w", &a), ("conv1.w", &b)]).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        let names: Vec<_> = back.keys().cloned().collect();
        assert_eq!(names, ["conv1.w", "zeta.w"]);
        assert_eq!(back["conv1.w"], b);
        // first entry on disk is conv1.w
        assert_eq!(&bytes[14..14 + 7], b"conv1.w");
    }

    #[test]
    fn checkpoint_duplicate_name_rejected() {
        let a = Tensor::<f32>::zeros([1, 1, 1, 1]);
        let err = encode_checkpoint([("x", &a), ("x", &a)]).unwrap_err();
        assert!(matches!(err, Error::DuplicateName(ref n) if n == "x"));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::<f32>::from_fn([1, 3, 2, 2], |[_, c, y, x]| {
            (c as f32) - 0.25 * (y * 2 + x) as f32
        });
        let p = dir.path().join("t.fcnt");
        write_tensor(&t, &p).unwrap();
        assert_eq!(read_tensor(&p).unwrap(), t);
        let ck = dir.path().join("c.fcnz");
        write_checkpoint([("conv1.w", &t)], &ck).unwrap();
        assert_eq!(read_checkpoint(&ck).unwrap()["conv1.w"], t);
    }

    proptest! {
        #[test]
        fn tensor_round_trip_bit_exact(
            (dims, bits) in prop::array::uniform4(1usize..4)
                .prop_flat_map(|d| (Just(d), prop::collection::vec(any::<u32>(), d.iter().product::<usize>())))
        ) {
            let data: Vec<f32> = bits.into_iter().map(f32::from_bits).collect();
            let t = Tensor::new(dims, data).unwrap();
            let mut buf = Vec::new();
            encode_tensor(&t, &mut buf);
            let back = decode_tensor(&buf).unwrap();
            prop_assert_eq!(back.dims(), t.dims());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
