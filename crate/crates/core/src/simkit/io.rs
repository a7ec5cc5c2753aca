//! Line-delimited JSON trace and order files.
//!
//! `trace.jsonl`, one snapshot per line:
//! `{"item":0,"day":0,"promoters":[1,2],"edges":[[1,2]],"self_sales":{"1":0.0,"2":3.0}}`
//!
//! `orders.jsonl`, one order per line:
//! `{"order_id":0,"item":0,"day":0,"sales":3.0,"chain":[2,1]}`

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{OrderRecord, PromotionSnapshot, SimError};

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), SimError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| SimError::Parse { line: 0, source: e })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, SimError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| SimError::Parse { line: i + 1, source: e })?);
    }
    Ok(out)
}

pub fn write_trace(path: &Path, trace: &[PromotionSnapshot]) -> Result<(), SimError> {
    write_jsonl(path, trace)
}

pub fn read_trace(path: &Path) -> Result<Vec<PromotionSnapshot>, SimError> {
    read_jsonl(path)
}

pub fn write_orders(path: &Path, orders: &[OrderRecord]) -> Result<(), SimError> {
    write_jsonl(path, orders)
}

pub fn read_orders(path: &Path) -> Result<Vec<OrderRecord>, SimError> {
    read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simkit::chain_fixture;

    #[test]
    fn fixture_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (trace, orders) = chain_fixture();
        write_trace(&dir.path().join("trace.jsonl"), &trace).unwrap();
        write_orders(&dir.path().join("orders.jsonl"), &orders).unwrap();
        assert_eq!(read_trace(&dir.path().join("trace.jsonl")).unwrap(), trace);
        assert_eq!(read_orders(&dir.path().join("orders.jsonl")).unwrap(), orders);
        let text = std::fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
        assert!(text.contains(r#""edges":[[1,2],[2,4],[1,3]]"#), "{text}");
        assert!(text.contains(r#""self_sales":{"1":0.0,"2":0.0,"3":4.0,"4":2.0}"#), "{text}");
    }

    #[test]
    fn bad_line_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("orders.jsonl");
        std::fs::write(&p, "{\"order_id\":0,\"item\":0,\"day\":0,\"sales\":1.0,\"chain\":[1]}\n{oops\n").unwrap();
        assert!(matches!(read_orders(&p), Err(SimError::Parse { line: 2, .. })));
    }
}
