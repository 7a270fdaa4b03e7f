//! Trace files.
//!
//! Transaction traces: header `block,src,dst,value,gas`, one row per
//! transaction, blocks non-decreasing. UTXO traces: header
//! `txid,inputs,outputs,block` with `|`-separated address lists.

use std::fs::File;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fixed::FixedPoint;
use crate::types::{AccountId, BlockHeight, Transaction};

use super::{BlockBatch, UtxoRecord};

const TRACE_COLUMNS: [&str; 5] = ["block", "src", "dst", "value", "gas"];
const UTXO_COLUMNS: [&str; 4] = ["txid", "inputs", "outputs", "block"];

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.display().to_string(), line, msg: msg.into() }
}

fn column_positions(path: &Path, headers: &csv::StringRecord, want: &[&str]) -> Result<Vec<usize>> {
    want.iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h.trim() == *name)
                .ok_or_else(|| parse_err(path, 1, format!("missing column `{name}`")))
        })
        .collect()
}

fn open_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file))
}

/// Reads a transaction trace into per-block batches indexed by block number;
/// blocks with no rows become empty batches so inter-arrival gaps survive.
pub fn ingest_csv(path: impl AsRef<Path>) -> Result<Vec<BlockBatch>> {
    let path = path.as_ref();
    let mut rdr = open_reader(path)?;
    let headers = rdr.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.clone();
    let cols = column_positions(path, &headers, &TRACE_COLUMNS)?;
    let mut blocks: Vec<BlockBatch> = Vec::new();
    let mut last_block = 0u64;
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(path, line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| row.get(cols[i]).unwrap_or("");
        let int = |i: usize| -> Result<u64> {
            field(i)
                .parse::<u64>()
                .map_err(|e| parse_err(path, line, format!("{}: {e}", TRACE_COLUMNS[i])))
        };
        let block = int(0)?;
        let src = int(1)?;
        let dst = int(2)?;
        let value: f64 = field(3)
            .parse()
            .map_err(|e| parse_err(path, line, format!("value: {e}")))?;
        let gas = int(4)?;
        if gas == 0 {
            return Err(parse_err(path, line, "gas must be positive"));
        }
        if block < last_block {
            return Err(parse_err(path, line, format!("block {block} precedes {last_block}")));
        }
        last_block = block;
        if blocks.len() <= block as usize {
            blocks.resize_with(block as usize + 1, Vec::new);
        }
        blocks[block as usize].push(Transaction {
            src: AccountId(src),
            dst: AccountId(dst),
            value: FixedPoint::from_f64(value),
            gas,
            arrival_block: BlockHeight(block),
        });
    }
    Ok(blocks)
}

pub fn export_csv<'a>(path: impl AsRef<Path>, blocks: impl IntoIterator<Item = &'a BlockBatch>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(TRACE_COLUMNS).map_err(io)?;
    for batch in blocks {
        for tx in batch {
            w.write_record([
                tx.arrival_block.0.to_string(),
                tx.src.0.to_string(),
                tx.dst.0.to_string(),
                tx.value.to_f64().to_string(),
                tx.gas.to_string(),
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads UTXO records. Rows that fail to parse are errors; rows with empty
/// input or output lists are returned as-is and skipped by the clusterer.
pub fn read_utxo_csv(path: impl AsRef<Path>) -> Result<Vec<UtxoRecord>> {
    let path = path.as_ref();
    let mut rdr = open_reader(path)?;
    let headers = rdr.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.clone();
    let cols = column_positions(path, &headers, &UTXO_COLUMNS)?;
    let split = |s: &str| -> Vec<String> {
        s.split('|').map(str::trim).filter(|a| !a.is_empty()).map(String::from).collect()
    };
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(path, line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let block = row
            .get(cols[3])
            .unwrap_or("")
            .parse::<u64>()
            .map_err(|e| parse_err(path, line, format!("block: {e}")))?;
        out.push(UtxoRecord {
            txid: row.get(cols[0]).unwrap_or("").to_string(),
            inputs: split(row.get(cols[1]).unwrap_or("")),
            outputs: split(row.get(cols[2]).unwrap_or("")),
            block,
        });
    }
    Ok(out)
}

pub fn write_utxo_csv(path: impl AsRef<Path>, records: &[UtxoRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(UTXO_COLUMNS).map_err(io)?;
    for r in records {
        w.write_record([r.txid.clone(), r.inputs.join("|"), r.outputs.join("|"), r.block.to_string()])
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;
    use crate::workload::{generate, TraceSpec};

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn header_only_is_empty() {
        let f = write("block,src,dst,value,gas\n");
        assert!(ingest_csv(f.path()).unwrap().is_empty());
    }

    #[test]
    fn rows_keep_order() {
        let f = write("block,src,dst,value,gas\n0,1,2,5,21000\n0,3,4,1.5,30000\n2,5,6,7,100\n");
        let blocks = ingest_csv(f.path()).unwrap();
        assert_eq!(blocks.len(), 3);
        let flat: Vec<(u64, u64)> = blocks.iter().flatten().map(|t| (t.src.0, t.arrival_block.0)).collect();
        assert_eq!(flat, vec![(1, 0), (3, 0), (5, 2)]);
        assert!(blocks[1].is_empty());
        assert_eq!(blocks[0][1].value, FixedPoint::from_f64(1.5));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let f = write("block,src,dst,value,gas\n0,1,2,5,21000\n0,x,2,5,21000\n");
        let err = ingest_csv(f.path()).unwrap_err().to_string();
        assert!(err.contains(":3:"), "{err}");
        let f = write("block,src,value,gas\n0,1,5,21000\n");
        let err = ingest_csv(f.path()).unwrap_err().to_string();
        assert!(err.contains("missing column `dst`"), "{err}");
    }

    #[test]
    fn generate_export_ingest_round_trip() {
        let spec = TraceSpec { duration: 20, base_rate: 20.0, ..TraceSpec::default() };
        let blocks: Vec<BlockBatch> = generate(&spec).unwrap().collect();
        let f = tempfile::NamedTempFile::new().unwrap();
        export_csv(f.path(), &blocks).unwrap();
        let back = ingest_csv(f.path()).unwrap();
        let a: Vec<&Transaction> = blocks.iter().flatten().collect();
        let b: Vec<&Transaction> = back.iter().flatten().collect();
        assert_eq!(a, b);
    }

    #[test]
    fn utxo_round_trip() {
        let recs = vec![UtxoRecord {
            txid: "ab".into(),
            inputs: vec!["x".into(), "y".into()],
            outputs: vec!["z".into()],
            block: 4,
        }];
        let f = tempfile::NamedTempFile::new().unwrap();
        write_utxo_csv(f.path(), &recs).unwrap();
        assert_eq!(read_utxo_csv(f.path()).unwrap(), recs);
    }
}
