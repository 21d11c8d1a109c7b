//! SNFX: the binary container for backbone token exports.
//!
//! Layout, all little-endian:
//!
//! ```text
//! header  "SNFX" | version u32 = 1 | n u32 | zeta u32 | d u32 | grid_h u32 | grid_w u32
//!         | layer_index u32 | record_count u32
//! record  image_id u64 | label u32 | tokens f32[(n+zeta)*d] | attn f32[(n+zeta)^2]
//! ```
//!
//! Token rows are auxiliary tokens first (row 0 = CLS, row 1 = DIST when
//! `zeta == 2`), then the `n` visual tokens in patch-grid raster order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio::{to_u32, BinReader, BinWriter};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const SNFX_MAGIC: &[u8; 4] = b"SNFX";
pub const SNFX_VERSION: u32 = 1;
pub const SNFX_HEADER_BYTES: usize = 4 + 4 * 8;

/// Maximum deviation of an attention row sum from 1 accepted on read.
pub const ATTN_ROW_SUM_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub n: u32,
    pub zeta: u32,
    pub d: u32,
    pub grid_h: u32,
    pub grid_w: u32,
    pub layer_index: u32,
    pub record_count: u32,
}

impl DatasetHeader {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 {
            return Err(Error::InvalidHeader("n and d must be positive".into()));
        }
        if u64::from(self.n) != u64::from(self.grid_h) * u64::from(self.grid_w) {
            return Err(Error::InvalidHeader(format!(
                "n = {} but grid is {}x{}",
                self.n, self.grid_h, self.grid_w
            )));
        }
        if !(1..=2).contains(&self.zeta) {
            return Err(Error::InvalidHeader(format!(
                "zeta must be 1 or 2, got {}",
                self.zeta
            )));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        (self.n + self.zeta) as usize
    }

    pub fn record_bytes(&self) -> usize {
        let t = self.tokens();
        8 + 4 + 4 * t * self.d as usize + 4 * t * t
    }

    pub fn grid(&self) -> TokenGrid {
        TokenGrid {
            zeta: self.zeta as usize,
            grid_h: self.grid_h as usize,
            grid_w: self.grid_w as usize,
        }
    }
}

/// Patch-grid geometry shared by every record of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub zeta: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl TokenGrid {
    pub fn visual_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// One image's backbone output.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub image_id: u64,
    pub label: u32,
    pub grid: TokenGrid,
    /// Raster grid index of each visual token, in token order. The identity
    /// for records read from disk; perturbation keeps survivors' original
    /// indices here.
    pub positions: Vec<u32>,
    /// `(n + zeta) x d` token embeddings, auxiliary rows first.
    pub tokens: Matrix,
    /// `(n + zeta) x (n + zeta)` head-averaged attention.
    pub attn: Matrix,
}

impl FeatureRecord {
    /// Builds a full-grid record (positions are the identity).
    pub fn new(image_id: u64, label: u32, grid: TokenGrid, tokens: Matrix, attn: Matrix) -> Result<Self> {
        let rec = Self {
            image_id,
            label,
            grid,
            positions: (0..grid.visual_tokens() as u32).collect(),
            tokens,
            attn,
        };
        rec.check_shapes()?;
        Ok(rec)
    }

    /// Number of visual tokens currently present.
    pub fn n_visual(&self) -> usize {
        self.positions.len()
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn visual_token(&self, i: usize) -> &[f64] {
        self.tokens.row(self.grid.zeta + i)
    }

    pub fn has_full_grid(&self) -> bool {
        self.positions.len() == self.grid.visual_tokens()
            && self.positions.iter().enumerate().all(|(i, &p)| p as usize == i)
    }

    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::InvalidRecord {
            image_id: self.image_id,
            reason: reason.into(),
        }
    }

    pub fn check_shapes(&self) -> Result<()> {
        let t = self.n_visual() + self.grid.zeta;
        if self.tokens.rows() != t {
            return Err(self.fail(format!("{} token rows, expected {t}", self.tokens.rows())));
        }
        if self.attn.shape() != (t, t) {
            return Err(self.fail(format!(
                "attention is {:?}, expected {t}x{t}",
                self.attn.shape()
            )));
        }
        let cells = self.grid.visual_tokens();
        if let Some(p) = self.positions.iter().find(|&&p| p as usize >= cells) {
            return Err(self.fail(format!("position {p} outside {cells}-cell grid")));
        }
        Ok(())
    }

    /// Full on-read validation: shapes, finiteness, attention row sums and
    /// optionally the label range.
    pub fn validate(&self, class_count: Option<u32>) -> Result<()> {
        self.check_shapes()?;
        if !self.tokens.is_finite() {
            return Err(self.fail("non-finite token embedding"));
        }
        if !self.attn.is_finite() {
            return Err(self.fail("non-finite attention value"));
        }
        for (r, row) in self.attn.row_iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ATTN_ROW_SUM_TOL {
                return Err(self.fail(format!("attention row {r} sums to {sum}")));
            }
        }
        if let Some(c) = class_count {
            if self.label >= c {
                return Err(self.fail(format!("label {} >= class count {c}", self.label)));
            }
        }
        Ok(())
    }

    fn conforms_to(&self, header: &DatasetHeader) -> Result<()> {
        if self.grid != header.grid() {
            return Err(self.fail(format!(
                "grid {:?} does not match header {:?}",
                self.grid,
                header.grid()
            )));
        }
        if !self.has_full_grid() {
            return Err(self.fail("perturbed records cannot be serialized"));
        }
        if self.dim() != header.d as usize {
            return Err(self.fail(format!("d = {}, header says {}", self.dim(), header.d)));
        }
        self.check_shapes()
    }
}

pub struct DatasetWriter<W: Write> {
    out: BinWriter<W>,
    header: DatasetHeader,
    written: u32,
}

impl DatasetWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>, header: DatasetHeader) -> Result<Self> {
        Self::new(BufWriter::new(File::create(path)?), header)
    }
}

impl<W: Write> DatasetWriter<W> {
    pub fn new(inner: W, header: DatasetHeader) -> Result<Self> {
        header.validate()?;
        let mut out = BinWriter::new(inner);
        out.bytes(SNFX_MAGIC)?;
        for v in [
            SNFX_VERSION,
            header.n,
            header.zeta,
            header.d,
            header.grid_h,
            header.grid_w,
            header.layer_index,
            header.record_count,
        ] {
            out.u32(v)?;
        }
        Ok(Self {
            out,
            header,
            written: 0,
        })
    }

    pub fn write_record(&mut self, rec: &FeatureRecord) -> Result<()> {
        rec.conforms_to(&self.header)?;
        if self.written == self.header.record_count {
            return Err(rec.fail(format!(
                "header declares {} records; this would be one more",
                self.header.record_count
            )));
        }
        self.out.u64(rec.image_id)?;
        self.out.u32(rec.label)?;
        self.out.f32_slice(rec.tokens.as_slice())?;
        self.out.f32_slice(rec.attn.as_slice())?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        if self.written != self.header.record_count {
            return Err(Error::InvalidHeader(format!(
                "header declares {} records but {} were written",
                self.header.record_count, self.written
            )));
        }
        self.out.flush()?;
        Ok(self.out.into_inner())
    }
}

/// Writes `header` followed by `records`. The record count must match the header.
pub fn write_dataset<'a>(
    path: impl AsRef<Path>,
    header: DatasetHeader,
    records: impl IntoIterator<Item = &'a FeatureRecord>,
) -> Result<()> {
    let mut w = DatasetWriter::create(path, header)?;
    for rec in records {
        w.write_record(rec)?;
    }
    w.finish()?;
    Ok(())
}

/// Header for `records` sharing `grid`, with `record_count` filled in.
pub fn header_for(records: &[FeatureRecord], layer_index: u32) -> Result<DatasetHeader> {
    let first = records
        .first()
        .ok_or_else(|| Error::invalid("cannot derive a header from zero records"))?;
    Ok(DatasetHeader {
        n: to_u32(first.grid.visual_tokens(), "n")?,
        zeta: to_u32(first.grid.zeta, "zeta")?,
        d: to_u32(first.dim(), "d")?,
        grid_h: to_u32(first.grid.grid_h, "grid_h")?,
        grid_w: to_u32(first.grid.grid_w, "grid_w")?,
        layer_index,
        record_count: to_u32(records.len(), "record count")?,
    })
}

/// Streaming SNFX reader; yields one validated record at a time.
pub struct DatasetReader<R: Read> {
    input: BinReader<R>,
    header: DatasetHeader,
    remaining: u32,
    class_count: Option<u32>,
    failed: bool,
}

impl DatasetReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(BufReader::new(File::open(path)?))
    }
}

impl<R: Read> DatasetReader<R> {
    pub fn new(inner: R) -> Result<Self> {
        let mut input = BinReader::new(inner, "SNFX");
        input.magic(SNFX_MAGIC)?;
        input.version(SNFX_VERSION)?;
        let mut f = [0u32; 7];
        for v in f.iter_mut() {
            *v = input.u32()?;
        }
        let header = DatasetHeader {
            n: f[0],
            zeta: f[1],
            d: f[2],
            grid_h: f[3],
            grid_w: f[4],
            layer_index: f[5],
            record_count: f[6],
        };
        header.validate()?;
        Ok(Self {
            input,
            header,
            remaining: header.record_count,
            class_count: None,
            failed: false,
        })
    }

    /// Also reject records whose label is not below `c`.
    pub fn with_class_count(mut self, c: u32) -> Self {
        self.class_count = Some(c);
        self
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    fn read_record(&mut self) -> Result<FeatureRecord> {
        let t = self.header.tokens();
        let d = self.header.d as usize;
        let image_id = self.input.u64()?;
        let label = self.input.u32()?;
        let tokens = Matrix::from_vec(t, d, self.input.f32_vec(t * d)?)?;
        let attn = Matrix::from_vec(t, t, self.input.f32_vec(t * t)?)?;
        let rec = FeatureRecord::new(image_id, label, self.header.grid(), tokens, attn)?;
        rec.validate(self.class_count)?;
        Ok(rec)
    }
}

impl<R: Read> Iterator for DatasetReader<R> {
    type Item = Result<FeatureRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        if self.remaining == 0 {
            // A well-formed file ends exactly after the declared records.
            return match self.input.expect_end() {
                Ok(()) => None,
                Err(e) => {
                    self.failed = true;
                    Some(Err(e))
                }
            };
        }
        self.remaining -= 1;
        let rec = self.read_record();
        if rec.is_err() {
            self.failed = true;
        }
        Some(rec)
    }
}

/// Opens `path` and returns its header and a streaming record iterator.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<(DatasetHeader, DatasetReader<BufReader<File>>)> {
    let reader = DatasetReader::open(path)?;
    Ok((*reader.header(), reader))
}

/// Reads every record into memory.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<(DatasetHeader, Vec<FeatureRecord>)> {
    let (header, reader) = read_dataset(path)?;
    let records = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(n: u32, zeta: u32, d: u32, count: u32) -> DatasetHeader {
        DatasetHeader {
            n,
            zeta,
            d,
            grid_h: 1,
            grid_w: n,
            layer_index: 9,
            record_count: count,
        }
    }

    fn record(h: &DatasetHeader, id: u64) -> FeatureRecord {
        let t = h.tokens();
        let d = h.d as usize;
        let tokens = Matrix::from_vec(t, d, (0..t * d).map(|v| v as f64 * 0.25 - 1.0).collect()).unwrap();
        let attn = Matrix::from_vec(t, t, vec![(1.0 / t as f64) as f32 as f64; t * t]).unwrap();
        FeatureRecord::new(id, 1, h.grid(), tokens, attn).unwrap()
    }

    fn bytes_of(h: DatasetHeader, recs: &[FeatureRecord]) -> Vec<u8> {
        let mut w = DatasetWriter::new(Vec::new(), h).unwrap();
        for r in recs {
            w.write_record(r).unwrap();
        }
        w.finish().unwrap()
    }

    #[test]
    fn empty_dataset_is_header_only() {
        assert_eq!(bytes_of(header(4, 2, 3, 0), &[]).len(), SNFX_HEADER_BYTES);
    }

    #[test]
    fn record_byte_count() {
        let h = header(4, 2, 3, 1);
        let bytes = bytes_of(h, &[record(&h, 0)]);
        // 8 (id) + 4 (label) + 4·(6·3) tokens + 4·(6·6) attention
        assert_eq!(bytes.len() - SNFX_HEADER_BYTES, 8 + 4 + 4 * 18 + 4 * 36);
        assert_eq!(h.record_bytes(), 8 + 4 + 4 * 18 + 4 * 36);
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let h = header(4, 2, 3, 2);
        let recs = vec![record(&h, 10), record(&h, 11)];
        let bytes = bytes_of(h, &recs);
        let reader = DatasetReader::new(bytes.as_slice()).unwrap();
        assert_eq!(*reader.header(), h);
        let back: Vec<_> = reader.collect::<Result<_>>().unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn truncated_file_errors() {
        let h = header(4, 2, 3, 2);
        let bytes = bytes_of(h, &[record(&h, 0), record(&h, 1)]);
        let cut = &bytes[..bytes.len() - 5];
        let results: Vec<_> = DatasetReader::new(cut).unwrap().collect();
        assert!(results[0].is_ok());
        assert!(matches!(results[1], Err(Error::Truncated("SNFX"))));
        assert_eq!(results.len(), 2);
        assert!(DatasetReader::new(&bytes[..10]).is_err());
    }

    #[test]
    fn bad_magic_errors() {
        let h = header(4, 2, 3, 0);
        let mut bytes = bytes_of(h, &[]);
        bytes[0] = b'X';
        assert!(matches!(DatasetReader::new(bytes.as_slice()), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn bad_row_sum_names_image() {
        let h = header(4, 2, 3, 1);
        let mut rec = record(&h, 77);
        let t = h.tokens();
        for c in 0..t {
            rec.attn.set(2, c, 0.9 / t as f64);
        }
        let bytes = bytes_of(h, &[rec]);
        let err = DatasetReader::new(bytes.as_slice()).unwrap().next().unwrap().unwrap_err();
        assert!(matches!(err, Error::InvalidRecord { image_id: 77, .. }), "{err}");
    }

    #[test]
    fn label_range_checked_when_declared() {
        let h = header(4, 1, 2, 1);
        let bytes = bytes_of(h, &[record(&h, 3)]);
        let ok = DatasetReader::new(bytes.as_slice()).unwrap().with_class_count(2).next().unwrap();
        assert!(ok.is_ok());
        let bad = DatasetReader::new(bytes.as_slice()).unwrap().with_class_count(1).next().unwrap();
        assert!(bad.is_err());
    }

    #[test]
    fn writer_rejects_mismatched_record() {
        let h = header(4, 2, 3, 1);
        let other = header(4, 2, 5, 1);
        let mut w = DatasetWriter::new(Vec::new(), h).unwrap();
        let err = w.write_record(&record(&other, 5)).unwrap_err();
        assert!(matches!(err, Error::InvalidRecord { image_id: 5, .. }));
    }

    #[test]
    fn header_invariants() {
        let mut h = header(4, 2, 3, 0);
        h.grid_h = 2;
        assert!(h.validate().is_err());
        let mut h = header(4, 3, 3, 0);
        assert!(h.validate().is_err());
        h.zeta = 1;
        assert!(h.validate().is_ok());
    }

    #[test]
    fn record_count_mismatch_on_finish() {
        let h = header(4, 2, 3, 2);
        let mut w = DatasetWriter::new(Vec::new(), h).unwrap();
        w.write_record(&record(&h, 0)).unwrap();
        assert!(w.finish().is_err());
    }
}
