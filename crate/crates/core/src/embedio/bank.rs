//! Binary embedding banks: fixed-dimension row stores with a compact
//! little-endian on-disk format.
//!
//! Layout: magic `AAPB`, u32 version (= 1), u8 dtype (1 = f32, 2 = f64),
//! u32 dim, u64 count, then `count * dim` values row-major. Readers reject
//! truncated payloads and trailing bytes, naming the offending field.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

pub const BANK_MAGIC: [u8; 4] = *b"AAPB";
pub const BANK_VERSION: u32 = 1;

/// Storage precision of a bank. Training always promotes rows to f64.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BankDtype {
    F32,
    F64,
}

impl BankDtype {
    fn code(self) -> u8 {
        match self {
            BankDtype::F32 => 1,
            BankDtype::F64 => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(BankDtype::F32),
            2 => Ok(BankDtype::F64),
            other => Err(Error::Format(format!(
                "bank dtype field: unknown code {other}"
            ))),
        }
    }

    fn width(self) -> usize {
        match self {
            BankDtype::F32 => 4,
            BankDtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Storage {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// Immutable bank of `count` embeddings of width `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBank {
    dim: usize,
    storage: Storage,
}

impl EmbeddingBank {
    /// Builds a bank from f64 rows, casting to the requested storage dtype.
    pub fn from_rows(rows: &[Vec<f64>], dtype: BankDtype) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("bank needs at least one row".into()));
        }
        let dim = rows[0].len();
        if dim == 0 {
            return Err(Error::Data("bank rows must be non-empty".into()));
        }
        let mut flat = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::Shape(format!(
                    "bank row {i} has width {}, expected {dim}",
                    r.len()
                )));
            }
            for (j, &v) in r.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("bank row {i} element {j} is {v}")));
                }
                flat.push(v);
            }
        }
        let storage = match dtype {
            BankDtype::F32 => Storage::F32(flat.into_iter().map(|v| v as f32).collect()),
            BankDtype::F64 => Storage::F64(flat),
        };
        Ok(EmbeddingBank { dim, storage })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dtype(&self) -> BankDtype {
        match self.storage {
            Storage::F32(_) => BankDtype::F32,
            Storage::F64(_) => BankDtype::F64,
        }
    }

    pub fn count(&self) -> usize {
        match &self.storage {
            Storage::F32(v) => v.len() / self.dim,
            Storage::F64(v) => v.len() / self.dim,
        }
    }

    fn check_id(&self, id: usize) -> Result<()> {
        if id >= self.count() {
            return Err(Error::Data(format!(
                "embedding id {id} out of range (bank holds {})",
                self.count()
            )));
        }
        Ok(())
    }

    /// Row `id` promoted to f64.
    pub fn row(&self, id: usize) -> Result<Vec<f64>> {
        self.check_id(id)?;
        let lo = id * self.dim;
        let hi = lo + self.dim;
        Ok(match &self.storage {
            Storage::F32(v) => v[lo..hi].iter().map(|&x| x as f64).collect(),
            Storage::F64(v) => v[lo..hi].to_vec(),
        })
    }

    /// Row `id` as a `1 x dim` tensor.
    pub fn row_tensor(&self, id: usize) -> Result<Tensor> {
        Tensor::row(self.row(id)?)
    }

    /// Stacks the given ids into an `n x dim` tensor (promoted to f64).
    pub fn rows_tensor(&self, ids: &[usize]) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(Error::Data("cannot stack an empty id list".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            data.extend_from_slice(&self.row(id)?);
        }
        Tensor::new(ids.len(), self.dim, data)
    }

    /// Every row as an `count x dim` tensor.
    pub fn all_rows_tensor(&self) -> Result<Tensor> {
        let ids: Vec<usize> = (0..self.count()).collect();
        self.rows_tensor(&ids)
    }

    /// Returns a bank with every row scaled to unit norm. Normalization runs
    /// in f64 and casts back to the source dtype; zero rows are rejected.
    pub fn normalized(&self) -> Result<EmbeddingBank> {
        let mut rows = Vec::with_capacity(self.count());
        for i in 0..self.count() {
            let r = self.row(i)?;
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Norm(format!("bank row {i} has zero norm")));
            }
            rows.push(r.into_iter().map(|v| v / norm).collect());
        }
        EmbeddingBank::from_rows(&rows, self.dtype())
    }

    /// Serializes the bank to `w` in the binary format.
    pub fn write_bank<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&BANK_MAGIC)?;
        w.write_all(&BANK_VERSION.to_le_bytes())?;
        w.write_all(&[self.dtype().code()])?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.count() as u64).to_le_bytes())?;
        match &self.storage {
            Storage::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            Storage::F64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    /// Parses a bank from bytes, enforcing the exact length contract.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (bank, used) = Self::parse_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::Format(format!(
                "bank payload: {} trailing bytes after values",
                bytes.len() - used
            )));
        }
        Ok(bank)
    }

    /// Parses one bank from the front of `bytes`, returning it and the
    /// number of bytes consumed (used for embedded banks inside other
    /// containers).
    pub fn parse_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize, field: &str| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Format(format!(
                    "bank {field} field: truncated (need {n} bytes at offset {pos})",
                    pos = *pos
                )));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };

        let magic = take(&mut pos, 4, "magic")?;
        if magic != BANK_MAGIC {
            return Err(Error::Format(format!(
                "bank magic field: expected AAPB, found {:?}",
                &magic
            )));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4, "version")?.try_into().unwrap());
        if version != BANK_VERSION {
            return Err(Error::Format(format!(
                "bank version field: unsupported version {version}"
            )));
        }
        let dtype = BankDtype::from_code(take(&mut pos, 1, "dtype")?[0])?;
        let dim = u32::from_le_bytes(take(&mut pos, 4, "dim")?.try_into().unwrap()) as usize;
        if dim == 0 {
            return Err(Error::Format("bank dim field: zero".into()));
        }
        let count = u64::from_le_bytes(take(&mut pos, 8, "count")?.try_into().unwrap()) as usize;
        if count == 0 {
            return Err(Error::Format("bank count field: zero".into()));
        }
        let values = count
            .checked_mul(dim)
            .ok_or_else(|| Error::Format("bank count field: overflows".into()))?;
        let payload = take(&mut pos, values * dtype.width(), "values")?;
        let storage = match dtype {
            BankDtype::F32 => {
                let mut v = Vec::with_capacity(values);
                for c in payload.chunks_exact(4) {
                    let x = f32::from_le_bytes(c.try_into().unwrap());
                    if !x.is_finite() {
                        return Err(Error::Format(format!(
                            "bank values field: non-finite value {x}"
                        )));
                    }
                    v.push(x);
                }
                Storage::F32(v)
            }
            BankDtype::F64 => {
                let mut v = Vec::with_capacity(values);
                for c in payload.chunks_exact(8) {
                    let x = f64::from_le_bytes(c.try_into().unwrap());
                    if !x.is_finite() {
                        return Err(Error::Format(format!(
                            "bank values field: non-finite value {x}"
                        )));
                    }
                    v.push(x);
                }
                Storage::F64(v)
            }
        };
        Ok((EmbeddingBank { dim, storage }, pos))
    }

    /// Reads a bank from `r`, consuming it to the end.
    pub fn read_bank<R: Read>(r: &mut R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn write_bank_file(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_bank(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_bank_file(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_bank(&mut r)
    }
}
