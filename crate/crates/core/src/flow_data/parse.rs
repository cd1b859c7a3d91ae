use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;
use crate::dataset::FlowClass;

/// One NetFlow record restricted to the retained attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFlowRecord {
    pub duration: f64,
    pub protocol: String,
    pub src_port: u16,
    pub dst_port: u16,
    pub packets: u64,
    pub bytes: u64,
    pub flags: String,
    pub label: FlowClass,
}

/// Header names for each retained attribute. Defaults follow the CIDDS
/// export layout; all other columns (addresses, dates, Tos, Flows, attack
/// metadata) are ignored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMap {
    pub duration: String,
    pub protocol: String,
    pub src_port: String,
    pub dst_port: String,
    pub packets: String,
    pub bytes: String,
    pub flags: String,
    pub class: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            duration: "Duration".into(),
            protocol: "Proto".into(),
            src_port: "Src Pt".into(),
            dst_port: "Dst Pt".into(),
            packets: "Packets".into(),
            bytes: "Bytes".into(),
            flags: "Flags".into(),
            class: "class".into(),
        }
    }
}

impl ColumnMap {
    fn names(&self) -> [&str; 8] {
        [
            &self.duration,
            &self.protocol,
            &self.src_port,
            &self.dst_port,
            &self.packets,
            &self.bytes,
            &self.flags,
            &self.class,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RejectReason {
    Malformed(String),
    FilteredClass(String),
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RejectReason::Malformed(m) => write!(f, "malformed: {m}"),
            RejectReason::FilteredClass(c) => write!(f, "class `{c}` filtered"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reject {
    /// 1-based line number in the source file (the header is line 1).
    pub line: u64,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedFlows {
    pub records: Vec<RawFlowRecord>,
    pub rejects: Vec<Reject>,
}

impl ParsedFlows {
    pub fn filtered_count(&self) -> usize {
        self.rejects
            .iter()
            .filter(|r| matches!(r.reason, RejectReason::FilteredClass(_)))
            .count()
    }

    pub fn malformed_count(&self) -> usize {
        self.rejects.len() - self.filtered_count()
    }

    /// Write the rejects report: one `<line_no>\t<reason>` line per reject.
    pub fn write_rejects<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for r in &self.rejects {
            writeln!(out, "{}\t{}", r.line, r.reason)?;
        }
        out.flush()
    }
}

/// Expand a byte count such as `"1234"`, `"2.1 M"` or `"15 K"` to an integer.
/// `K` = 10^3, `M` = 10^6, `G` = 10^9. Fractional results round half up.
pub fn parse_byte_count(raw: &str) -> Result<u64, String> {
    let s = raw.trim();
    let (number, multiplier) = match s.char_indices().find(|(_, c)| c.is_ascii_alphabetic()) {
        Some((pos, _)) => {
            let mult: u128 = match s[pos..].trim() {
                "K" | "k" => 1_000,
                "M" | "m" => 1_000_000,
                "G" | "g" => 1_000_000_000,
                other => return Err(format!("unknown magnitude suffix `{other}` in `{raw}`")),
            };
            (s[..pos].trim(), mult)
        }
        None => (s, 1),
    };
    let (int_part, frac_part) = match number.split_once('.') {
        Some((i, f)) => (i, f),
        None => (number, ""),
    };
    let digits_ok = |p: &str| p.bytes().all(|b| b.is_ascii_digit());
    if (int_part.is_empty() && frac_part.is_empty()) || !digits_ok(int_part) || !digits_ok(frac_part) {
        return Err(format!("invalid byte count `{raw}`"));
    }
    if frac_part.len() > 18 || int_part.len() > 20 {
        return Err(format!("byte count `{raw}` out of range"));
    }
    let scale = 10u128.pow(frac_part.len() as u32);
    let int_v: u128 = if int_part.is_empty() { 0 } else { int_part.parse().map_err(|_| format!("invalid byte count `{raw}`"))? };
    let frac_v: u128 = if frac_part.is_empty() { 0 } else { frac_part.parse().map_err(|_| format!("invalid byte count `{raw}`"))? };
    let scaled = (int_v * scale + frac_v)
        .checked_mul(multiplier)
        .ok_or_else(|| format!("byte count `{raw}` out of range"))?;
    let value = (scaled + scale / 2) / scale;
    u64::try_from(value).map_err(|_| format!("byte count `{raw}` out of range"))
}

fn parse_port(raw: &str) -> Result<u16, String> {
    let s = raw.trim();
    if let Ok(v) = s.parse::<u32>() {
        return u16::try_from(v).map_err(|_| format!("port {v} out of range"));
    }
    // ICMP rows carry `type.code` in the port columns; keep the integer part.
    let v: f64 = s.parse().map_err(|_| format!("invalid port `{raw}`"))?;
    if !(0.0..65536.0).contains(&v) {
        return Err(format!("port `{raw}` out of range"));
    }
    Ok(v.trunc() as u16)
}

fn parse_duration(raw: &str) -> Result<f64, String> {
    let v: f64 = raw.trim().parse().map_err(|_| format!("invalid duration `{raw}`"))?;
    if !v.is_finite() || v < 0.0 {
        return Err(format!("duration `{raw}` must be finite and non-negative"));
    }
    Ok(v)
}

fn parse_packets(raw: &str) -> Result<u64, String> {
    raw.trim().parse().map_err(|_| format!("invalid packet count `{raw}`"))
}

fn token(raw: &str, what: &str) -> Result<String, String> {
    let t = raw.trim();
    if t.is_empty() {
        Err(format!("empty {what}"))
    } else {
        Ok(t.to_string())
    }
}

pub fn parse_flow_csv(path: impl AsRef<Path>, columns: &ColumnMap) -> Result<ParsedFlows, DataError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    parse_flow_reader(file, columns)
}

/// Parse comma-separated flow records with a header row.
///
/// Rows that cannot be parsed are skipped and listed in
/// [`ParsedFlows::rejects`]; rows whose class lies outside
/// normal/attacker/victim are dropped and listed the same way.
pub fn parse_flow_reader<R: Read>(reader: R, columns: &ColumnMap) -> Result<ParsedFlows, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut idx = [0usize; 8];
    for (slot, name) in idx.iter_mut().zip(columns.names()) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))?;
    }

    let mut out = ParsedFlows::default();
    let mut row = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut row) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                // UTF-8 and similar row-level errors: report and continue.
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                if matches!(e.kind(), csv::ErrorKind::Io(_)) {
                    return Err(e.into());
                }
                out.rejects.push(Reject { line, reason: RejectReason::Malformed(e.to_string()) });
                continue;
            }
        }
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        match record_from_row(&row, &idx) {
            Ok(rec) => out.records.push(rec),
            Err(reason) => out.rejects.push(Reject { line, reason }),
        }
    }
    Ok(out)
}

fn record_from_row(row: &csv::StringRecord, idx: &[usize; 8]) -> Result<RawFlowRecord, RejectReason> {
    let field = |i: usize| -> Result<&str, RejectReason> {
        row.get(idx[i])
            .ok_or_else(|| RejectReason::Malformed(format!("row has {} fields", row.len())))
    };
    let class_raw = field(7)?;
    let label = FlowClass::from_token(class_raw)
        .ok_or_else(|| RejectReason::FilteredClass(class_raw.to_string()))?;
    let m = RejectReason::Malformed;
    Ok(RawFlowRecord {
        duration: parse_duration(field(0)?).map_err(m)?,
        protocol: token(field(1)?, "protocol").map_err(m)?,
        src_port: parse_port(field(2)?).map_err(m)?,
        dst_port: parse_port(field(3)?).map_err(m)?,
        packets: parse_packets(field(4)?).map_err(m)?,
        bytes: parse_byte_count(field(5)?).map_err(m)?,
        flags: token(field(6)?, "flags").map_err(m)?,
        label,
    })
}

/// Write records with a header using `columns` for the names. Output parses
/// back to the same records.
pub fn write_flow_csv<W: Write>(out: W, records: &[RawFlowRecord], columns: &ColumnMap) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(columns.names())?;
    for r in records {
        w.write_record([
            format_duration(r.duration),
            r.protocol.clone(),
            r.src_port.to_string(),
            r.dst_port.to_string(),
            r.packets.to_string(),
            r.bytes.to_string(),
            r.flags.clone(),
            r.label.as_str().to_string(),
        ])?;
    }
    w.flush().map_err(|e| DataError::Csv(e.into()))?;
    Ok(())
}

fn format_duration(d: f64) -> String {
    // `{:?}` prints the shortest representation that round-trips exactly.
    format!("{d:?}")
}
