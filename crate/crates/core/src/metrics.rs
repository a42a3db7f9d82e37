//! Round-record output.
//!
//! CSV files start with a schema comment line, then a header row. Floats use
//! the shortest representation that parses back to the same bits, so equal
//! record streams produce byte-identical files.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::orchestrator::RoundRecord;

pub const CSV_SCHEMA: &str = "# fedmr-metrics v1";

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    round: usize,
    selected_clients: String,
    global_loss: f64,
    global_acc: f64,
    local_acc_mean: f64,
    cosine_mean: f64,
    lemma1_sum_gap: f64,
    bytes_up: u64,
    bytes_down: u64,
}

impl From<&RoundRecord> for CsvRow {
    fn from(r: &RoundRecord) -> Self {
        CsvRow {
            round: r.round,
            selected_clients: r
                .selected_clients
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(";"),
            global_loss: r.global_loss,
            global_acc: r.global_acc,
            local_acc_mean: r.local_acc_mean,
            cosine_mean: r.cosine_mean,
            lemma1_sum_gap: r.lemma1_sum_gap,
            bytes_up: r.bytes_up,
            bytes_down: r.bytes_down,
        }
    }
}

impl TryFrom<CsvRow> for RoundRecord {
    type Error = Error;

    fn try_from(r: CsvRow) -> Result<Self> {
        let selected_clients = if r.selected_clients.is_empty() {
            Vec::new()
        } else {
            r.selected_clients
                .split(';')
                .map(|c| {
                    c.parse()
                        .map_err(|_| Error::Format(format!("bad client id `{c}` in round {}", r.round)))
                })
                .collect::<Result<_>>()?
        };
        Ok(RoundRecord {
            round: r.round,
            selected_clients,
            global_loss: r.global_loss,
            global_acc: r.global_acc,
            local_acc_mean: r.local_acc_mean,
            cosine_mean: r.cosine_mean,
            lemma1_sum_gap: r.lemma1_sum_gap,
            bytes_up: r.bytes_up,
            bytes_down: r.bytes_down,
        })
    }
}

pub fn write_csv<W: Write>(mut out: W, records: &[RoundRecord]) -> Result<()> {
    writeln!(out, "{CSV_SCHEMA}")?;
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(CsvRow::from(r))?;
    }
    if records.is_empty() {
        // csv only emits the header alongside the first row.
        w.write_record([
            "round",
            "selected_clients",
            "global_loss",
            "global_acc",
            "local_acc_mean",
            "cosine_mean",
            "lemma1_sum_gap",
            "bytes_up",
            "bytes_down",
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn csv_string(records: &[RoundRecord]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(&mut buf, records)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<RoundRecord>> {
    let file = std::fs::File::open(path)?;
    let mut reader = std::io::BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    if first.trim_end() != CSV_SCHEMA {
        return Err(Error::Format(format!(
            "expected schema line `{CSV_SCHEMA}`, found `{}`",
            first.trim_end()
        )));
    }
    csv::Reader::from_reader(reader)
        .deserialize::<CsvRow>()
        .map(|row| RoundRecord::try_from(row?))
        .collect()
}

pub fn write_jsonl<W: Write>(mut out: W, records: &[RoundRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(round: usize) -> RoundRecord {
        RoundRecord {
            round,
            selected_clients: vec![4, 0, 9],
            global_loss: 1.0 / 3.0,
            global_acc: 0.8125,
            local_acc_mean: 0.1,
            cosine_mean: f64::NAN,
            lemma1_sum_gap: 1e-17,
            bytes_up: 1200,
            bytes_down: 1200,
        }
    }

    #[test]
    fn csv_round_trips_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let records = vec![record(1), record(2)];
        write_csv(std::fs::File::create(&path).unwrap(), &records).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# fedmr-metrics v1\nround,selected_clients,"));
        let back = read_csv(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].global_loss.to_bits(), records[0].global_loss.to_bits());
        assert_eq!(back[1].selected_clients, vec![4, 0, 9]);
        assert!(back[0].cosine_mean.is_nan());
    }

    #[test]
    fn empty_stream_still_has_a_header() {
        let s = csv_string(&[]).unwrap();
        assert_eq!(s.lines().count(), 2);
    }

    #[test]
    fn jsonl_has_one_line_per_record() {
        let mut buf = Vec::new();
        let mut r = record(3);
        r.cosine_mean = 0.5;
        write_jsonl(&mut buf, &[r.clone(), r]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        let back: RoundRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(back.round, 3);
    }
}
