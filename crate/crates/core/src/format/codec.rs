//! `.sprp` container.
//!
//! ```text
//! magic "SPRP" | version u16 | kind u8
//! kind 1 (CSR):  n_rows u32 | n_cols u32 | nnz u32
//!                row_ptr [u32; n_rows+1] | col_idx [u32; nnz] | vals [f32; nnz]
//! kind 2 (conv): oc u32 | ic u32 | kh u32 | kw u32 | nnz u32
//!                w_och [u32; oc+1] | w_ich [u16; oc·(ic+1)]
//!                w_x [u8; nnz] | w_y [u8; nnz] | w_vals [f32; nnz]
//! ```
//! All integers and floats are little-endian.

use crate::error::{Error, Result};

use super::{CsrMatrix, SparseConvWeights};

pub const MAGIC: [u8; 4] = *b"SPRP";
pub const FORMAT_VERSION: u16 = 1;
pub const KIND_CSR: u8 = 1;
pub const KIND_CONV: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum SparseObject {
    Csr(CsrMatrix<f32>),
    Conv(SparseConvWeights<f32>),
}

impl From<CsrMatrix<f32>> for SparseObject {
    fn from(w: CsrMatrix<f32>) -> Self {
        Self::Csr(w)
    }
}

impl From<SparseConvWeights<f32>> for SparseObject {
    fn from(w: SparseConvWeights<f32>) -> Self {
        Self::Conv(w)
    }
}

pub fn serialize(obj: &SparseObject) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    match obj {
        SparseObject::Csr(w) => {
            out.push(KIND_CSR);
            for d in [w.n_rows(), w.n_cols(), w.nnz()] {
                put_u32(&mut out, d)?;
            }
            w.row_ptr().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            w.col_idx().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            w.vals().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        SparseObject::Conv(w) => {
            out.push(KIND_CONV);
            for d in [w.out_channels(), w.in_channels(), w.kernel_h(), w.kernel_w(), w.nnz()] {
                put_u32(&mut out, d)?;
            }
            w.w_och().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            w.w_ich().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            out.extend_from_slice(w.w_x());
            out.extend_from_slice(w.w_y());
            w.vals().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
    }
    Ok(out)
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::IndexWidthOverflow(format!("dimension {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::TruncatedStream);
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn count(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    /// Reads `n` fixed-width little-endian items, checking the length up front
    /// so a corrupt count cannot trigger a huge allocation.
    fn array<const B: usize, V>(&mut self, n: usize, conv: fn([u8; B]) -> V) -> Result<Vec<V>> {
        let bytes = n.checked_mul(B).ok_or(Error::TruncatedStream)?;
        let raw = self.take(bytes)?;
        Ok(raw.chunks_exact(B).map(|c| conv(c.try_into().unwrap())).collect())
    }
}

pub fn deserialize(bytes: &[u8]) -> Result<SparseObject> {
    let mut r = Reader { buf: bytes };
    if r.take(4).map_err(|_| Error::BadMagic)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let obj = match r.u8()? {
        KIND_CSR => {
            let (rows, cols, nnz) = (r.count()?, r.count()?, r.count()?);
            let row_ptr = r.array(rows.checked_add(1).ok_or(Error::TruncatedStream)?, u32::from_le_bytes)?;
            let col_idx = r.array(nnz, u32::from_le_bytes)?;
            let vals = r.array(nnz, f32::from_le_bytes)?;
            SparseObject::Csr(CsrMatrix::from_parts(rows, cols, row_ptr, col_idx, vals)?)
        }
        KIND_CONV => {
            let (oc, ic, kh, kw, nnz) = (r.count()?, r.count()?, r.count()?, r.count()?, r.count()?);
            let w_och = r.array(oc.checked_add(1).ok_or(Error::TruncatedStream)?, u32::from_le_bytes)?;
            let ich_len = oc.checked_mul(ic + 1).ok_or(Error::TruncatedStream)?;
            let w_ich = r.array(ich_len, u16::from_le_bytes)?;
            let w_x = r.take(nnz)?.to_vec();
            let w_y = r.take(nnz)?.to_vec();
            let w_vals = r.array(nnz, f32::from_le_bytes)?;
            SparseObject::Conv(SparseConvWeights::from_parts(oc, ic, kh, kw, w_och, w_ich, w_x, w_y, w_vals)?)
        }
        k => return Err(Error::InvariantViolation(format!("unknown object kind {k}"))),
    };
    if !r.buf.is_empty() {
        return Err(Error::InvariantViolation(format!("{} trailing bytes", r.buf.len())));
    }
    Ok(obj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{DenseMatrix, DenseTensor4, Layout4};

    #[test]
    fn empty_csr_round_trip() {
        let obj = SparseObject::Csr(CsrMatrix::empty(0, 0));
        let bytes = serialize(&obj).unwrap();
        assert_eq!(bytes.len(), 4 + 2 + 1 + 12 + 4);
        assert_eq!(deserialize(&bytes).unwrap(), obj);
    }

    #[test]
    fn csr_layout_is_fixed() {
        let w = CsrMatrix::from_dense(&DenseMatrix::<f32>::identity(2)).unwrap();
        let bytes = serialize(&w.into()).unwrap();
        let mut expected = b"SPRP".to_vec();
        expected.extend_from_slice(&[1, 0, 1]);
        for v in [2u32, 2, 2, 0, 1, 2, 0, 1] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn error_paths() {
        assert_eq!(deserialize(b"SP"), Err(Error::BadMagic));
        assert_eq!(deserialize(b"XPRP\x01\x00\x01"), Err(Error::BadMagic));
        assert_eq!(deserialize(b"SPRP\x02\x00\x01"), Err(Error::VersionUnsupported(2)));
        assert_eq!(deserialize(b"SPRP\x01\x00"), Err(Error::TruncatedStream));

        let w = CsrMatrix::from_dense(&DenseMatrix::<f32>::identity(3)).unwrap();
        let bytes = serialize(&w.into()).unwrap();
        for cut in 7..bytes.len() {
            assert_eq!(deserialize(&bytes[..cut]), Err(Error::TruncatedStream), "cut at {cut}");
        }
        // column index 1 of row 0 rewritten to 7
        let mut corrupt = bytes.clone();
        let col0 = 7 + 12 + 4 * 4;
        corrupt[col0..col0 + 4].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(deserialize(&corrupt), Err(Error::InvariantViolation(_))));

        let mut trailing = bytes;
        trailing.push(0);
        assert!(matches!(deserialize(&trailing), Err(Error::InvariantViolation(_))));
        assert!(matches!(deserialize(b"SPRP\x01\x00\x09"), Err(Error::InvariantViolation(_))));
    }

    #[test]
    fn huge_declared_count_is_truncation_not_allocation() {
        let mut bytes = b"SPRP\x01\x00\x01".to_vec();
        for v in [1u32, 1, u32::MAX] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&[0u8; 8]);
        assert_eq!(deserialize(&bytes), Err(Error::TruncatedStream));
    }

    #[test]
    fn conv_round_trip() {
        let mut t = DenseTensor4::zeros([3, 2, 2, 3], Layout4::Bicmn);
        t.set([0, 0, 0, 1], 1.5f32);
        t.set([2, 1, 1, 2], -2.0);
        let obj = SparseObject::Conv(SparseConvWeights::from_dense(&t).unwrap());
        let bytes = serialize(&obj).unwrap();
        assert_eq!(deserialize(&bytes).unwrap(), obj);
    }
}
