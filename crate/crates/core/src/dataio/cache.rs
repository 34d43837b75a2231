use std::path::Path;

use super::batch::SeriesBatch;
use crate::binio::{BinReader, BinWriter};
use crate::error::Result;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TSCM";
pub const VERSION: u32 = 1;

/// Header `TSCM`, version, `B, D, L, C` as u32, then values and labels.
pub fn write_cache(path: &Path, batch: &SeriesBatch) -> Result<()> {
    let mut w = BinWriter::new(MAGIC, VERSION);
    for n in [batch.len(), batch.channels(), batch.length(), batch.class_count] {
        w.u32(n as u32);
    }
    w.f64s(batch.values.data());
    for &l in &batch.labels {
        w.u32(l as u32);
    }
    w.save(path)
}

pub fn read_cache(path: &Path) -> Result<SeriesBatch> {
    let mut r = BinReader::open(path, MAGIC, VERSION)?;
    let (b, d, l, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let values = r.f64s(b * d * l)?;
    let labels = (0..b).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    SeriesBatch::new(Tensor::new(vec![b, d, l], values)?, labels, c)
}
