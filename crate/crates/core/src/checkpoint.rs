//! `SIMTCKPT1` parameter files.
//!
//! Layout (all integers little-endian `u32`, values little-endian `f64`):
//! magic `SIMTCKPT1`, parameter count, then per parameter: name byte length,
//! UTF-8 name, rank, dims, row-major data.

use std::io::{Read, Write};

use crate::error::{Result, SimtError};
use crate::params::ParamStore;
use crate::tensor::{numel, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"SIMTCKPT1";

fn put_u32(out: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| SimtError::Contract(format!("{v} does not fit in u32")))?;
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_params(store: &ParamStore, out: &mut impl Write) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    put_u32(out, store.len())?;
    for (name, t) in store.iter() {
        put_u32(out, name.len())?;
        out.write_all(name.as_bytes())?;
        put_u32(out, t.shape().len())?;
        for d in t.shape() {
            put_u32(out, *d)?;
        }
        let mut buf = Vec::with_capacity(t.len() * 8);
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn params_to_bytes(store: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::new();
    write_params(store, &mut buf).expect("writing to memory cannot fail");
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(SimtError::Parse {
                offset: self.pos,
                detail: format!("need {n} bytes, {} remain", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn params_from_bytes(bytes: &[u8]) -> Result<ParamStore> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(SimtError::Parse {
            offset: 0,
            detail: "bad checkpoint magic".into(),
        });
    }
    let count = c.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let at = c.pos;
        let len = c.u32()?;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|e| SimtError::Parse {
                offset: at,
                detail: format!("parameter name: {e}"),
            })?
            .to_string();
        let rank = c.u32()?;
        let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let raw = c.take(numel(&shape) * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    if c.pos != bytes.len() {
        return Err(SimtError::Parse {
            offset: c.pos,
            detail: format!("{} trailing bytes", bytes.len() - c.pos),
        });
    }
    Ok(store)
}

pub fn read_params(input: &mut impl Read) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    params_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let mut s = ParamStore::new();
        s.insert("ab", Tensor::new(vec![1, 2], vec![1.0, -0.5]).unwrap()).unwrap();
        let bytes = params_to_bytes(&s);
        let mut expected = b"SIMTCKPT1".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(b"ab");
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        expected.extend_from_slice(&(-0.5f64).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn truncation_and_bad_magic_are_reported() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let bytes = params_to_bytes(&s);
        assert!(matches!(params_from_bytes(&bytes[..bytes.len() - 3]), Err(SimtError::Parse { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(params_from_bytes(&bad), Err(SimtError::Parse { offset: 0, .. })));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_identical(values in prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 1..40)) {
            let mut s = ParamStore::new();
            let n = values.len();
            s.insert("a.w", Tensor::new(vec![n], values.clone()).unwrap()).unwrap();
            s.insert("b", Tensor::new(vec![1, n], values).unwrap()).unwrap();
            let back = params_from_bytes(&params_to_bytes(&s)).unwrap();
            prop_assert!(back.bit_identical(&s));
        }
    }
}
