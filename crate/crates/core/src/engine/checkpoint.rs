//! Binary table dump.
//!
//! Little-endian throughout:
//! `NEOEMB01`, u64 H, u64 D, u8 precision (0 fp32, 1 fp16), u8 moment kind
//! (0 none, 1 row-wise, 2 elementwise), u32 id length + UTF-8 id, f64 average
//! pooling, and for row-wise state u64 group count followed by
//! `(u64 start, u64 end)` per group. Then H×D f64 values row-major, then the
//! moment values row-major.

use std::io::{Read, Write};
use std::ops::Range;

use ndarray::Array2;
use thiserror::Error;

use super::{EmbeddingTable, MomentState};
use crate::model::{Precision, TableSpec};
use crate::Scalar;

const MAGIC: &[u8; 8] = b"NEOEMB01";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a table checkpoint")]
    BadMagic,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub fn write_checkpoint<S: Scalar, W: Write>(table: &EmbeddingTable<S>, mut w: W) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&(table.num_rows() as u64).to_le_bytes())?;
    w.write_all(&(table.dim() as u64).to_le_bytes())?;
    w.write_all(&[match table.spec.precision {
        Precision::Fp32 => 0,
        Precision::Fp16 => 1,
    }])?;
    let kind = match &table.moment {
        MomentState::None => 0u8,
        MomentState::RowWise { .. } => 1,
        MomentState::Elementwise(_) => 2,
    };
    w.write_all(&[kind])?;
    let id = table.spec.id.as_bytes();
    w.write_all(&(id.len() as u32).to_le_bytes())?;
    w.write_all(id)?;
    w.write_all(&table.spec.avg_pooling.to_le_bytes())?;
    if let MomentState::RowWise { groups, .. } = &table.moment {
        w.write_all(&(groups.len() as u64).to_le_bytes())?;
        for g in groups {
            w.write_all(&(g.start as u64).to_le_bytes())?;
            w.write_all(&(g.end as u64).to_le_bytes())?;
        }
    }
    for v in table.values.iter().chain(table.moment.values().iter()) {
        w.write_all(&v.to_f64().unwrap().to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], CheckpointError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => CheckpointError::Corrupt("truncated".into()),
        _ => CheckpointError::Io(e),
    })?;
    Ok(buf)
}

fn u64_of<R: Read>(r: &mut R) -> Result<u64, CheckpointError> {
    Ok(u64::from_le_bytes(take::<8, _>(r)?))
}

fn matrix<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<Array2<f64>, CheckpointError> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(f64::from_le_bytes(take::<8, _>(r)?));
    }
    Ok(Array2::from_shape_vec((rows, cols), data).expect("sized above"))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<EmbeddingTable<f64>, CheckpointError> {
    if &take::<8, _>(&mut r)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let rows = u64_of(&mut r)?;
    let dim = u64_of(&mut r)? as usize;
    let precision = match take::<1, _>(&mut r)?[0] {
        0 => Precision::Fp32,
        1 => Precision::Fp16,
        p => return Err(CheckpointError::Corrupt(format!("precision tag {p}"))),
    };
    let kind = take::<1, _>(&mut r)?[0];
    let id_len = u32::from_le_bytes(take::<4, _>(&mut r)?) as usize;
    let mut id = vec![0u8; id_len];
    r.read_exact(&mut id).map_err(|_| CheckpointError::Corrupt("truncated id".into()))?;
    let id = String::from_utf8(id).map_err(|_| CheckpointError::Corrupt("id is not UTF-8".into()))?;
    let pooling = f64::from_le_bytes(take::<8, _>(&mut r)?);

    let mut groups: Vec<Range<usize>> = Vec::new();
    if kind == 1 {
        let n = u64_of(&mut r)?;
        for _ in 0..n {
            let start = u64_of(&mut r)? as usize;
            let end = u64_of(&mut r)? as usize;
            if start >= end || end > dim {
                return Err(CheckpointError::Corrupt(format!("moment group {start}..{end}")));
            }
            groups.push(start..end);
        }
    }
    let rows_usize = rows as usize;
    let values = matrix(&mut r, rows_usize, dim)?;
    let moment = match kind {
        0 => MomentState::None,
        1 => MomentState::RowWise { values: matrix(&mut r, rows_usize, groups.len())?, groups },
        2 => MomentState::Elementwise(matrix(&mut r, rows_usize, dim)?),
        k => return Err(CheckpointError::Corrupt(format!("moment tag {k}"))),
    };
    if r.read(&mut [0u8])? != 0 {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    let spec = TableSpec::new(id, rows, dim, pooling).with_precision(precision);
    Ok(EmbeddingTable { spec, values, moment })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::OptimizerKind;

    fn roundtrip(t: &EmbeddingTable<f64>) -> EmbeddingTable<f64> {
        let mut buf = Vec::new();
        write_checkpoint(t, &mut buf).unwrap();
        read_checkpoint(buf.as_slice()).unwrap()
    }

    #[test]
    fn roundtrips_every_state() {
        let spec = TableSpec::new("emb_7", 6, 4, 2.5).with_precision(Precision::Fp16);
        for kind in [OptimizerKind::Sgd, OptimizerKind::RowWiseAdaGrad, OptimizerKind::AdaGrad] {
            let mut t = EmbeddingTable::<f64>::random(spec.clone(), kind, 1);
            if kind == OptimizerKind::RowWiseAdaGrad {
                t.split_moment_groups(vec![0..2, 2..4]);
            }
            assert_eq!(roundtrip(&t), t);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(read_checkpoint(&b"NOTATABLE"[..]), Err(CheckpointError::BadMagic)));
        let t = EmbeddingTable::<f64>::random(TableSpec::new("t", 3, 2, 1.0), OptimizerKind::Sgd, 0);
        let mut buf = Vec::new();
        write_checkpoint(&t, &mut buf).unwrap();
        assert!(matches!(read_checkpoint(&buf[..buf.len() - 3]), Err(CheckpointError::Corrupt(_))));
        buf.push(0);
        assert!(matches!(read_checkpoint(buf.as_slice()), Err(CheckpointError::Corrupt(_))));
    }
}
