use std::collections::BTreeMap;

use super::{DataError, RawFlowRecord};
use crate::dataset::{FlowClass, LabeledDataset, Matrix, NUM_FEATURES};

/// Categorical token → dense integer code, shared by every worker.
///
/// Codes are assigned in lexicographic token order starting at 0. Class
/// labels use the fixed convention of [`FlowClass::code`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodingMap {
    protocol_codes: BTreeMap<String, u32>,
    flags_codes: BTreeMap<String, u32>,
}

fn dense_codes<I, S>(tokens: I) -> BTreeMap<String, u32>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let mut map: BTreeMap<String, u32> = tokens.into_iter().map(|t| (t.into(), 0)).collect();
    for (code, v) in map.values_mut().enumerate() {
        *v = code as u32;
    }
    map
}

impl EncodingMap {
    pub fn from_vocabulary<P, F, S1, S2>(protocols: P, flags: F) -> Self
    where
        P: IntoIterator<Item = S1>,
        F: IntoIterator<Item = S2>,
        S1: Into<String>,
        S2: Into<String>,
    {
        Self { protocol_codes: dense_codes(protocols), flags_codes: dense_codes(flags) }
    }

    /// Fixed vocabulary covering CIDDS exports: the five transport protocols
    /// that occur there and every combination of the six TCP flag positions
    /// `UAPRSF` written with `.` for an unset flag.
    pub fn cidds_default() -> Self {
        const POSITIONS: [char; 6] = ['U', 'A', 'P', 'R', 'S', 'F'];
        let flags = (0u32..64).map(|mask| {
            POSITIONS
                .iter()
                .enumerate()
                .map(|(bit, &c)| if mask & (1 << (5 - bit)) != 0 { c } else { '.' })
                .collect::<String>()
        });
        Self::from_vocabulary(["GRE", "ICMP", "IGMP", "TCP", "UDP"], flags)
    }

    pub fn protocol_code(&self, token: &str) -> Result<u32, DataError> {
        self.protocol_codes
            .get(token)
            .copied()
            .ok_or_else(|| DataError::UnknownToken { field: "protocol", token: token.to_string() })
    }

    pub fn flags_code(&self, token: &str) -> Result<u32, DataError> {
        self.flags_codes
            .get(token)
            .copied()
            .ok_or_else(|| DataError::UnknownToken { field: "flags", token: token.to_string() })
    }

    pub fn label_code(&self, class: FlowClass) -> usize {
        class.code()
    }

    pub fn decode_label(&self, code: usize) -> Option<FlowClass> {
        FlowClass::from_code(code)
    }

    pub fn protocol_tokens(&self) -> impl Iterator<Item = &str> {
        self.protocol_codes.keys().map(String::as_str)
    }

    pub fn flags_tokens(&self) -> impl Iterator<Item = &str> {
        self.flags_codes.keys().map(String::as_str)
    }

    /// Numeric feature row in [`crate::dataset::FEATURE_NAMES`] order.
    pub fn encode_record(&self, r: &RawFlowRecord) -> Result<[f64; NUM_FEATURES], DataError> {
        Ok([
            r.duration,
            f64::from(self.protocol_code(&r.protocol)?),
            f64::from(r.src_port),
            f64::from(r.dst_port),
            r.packets as f64,
            r.bytes as f64,
            f64::from(self.flags_code(&r.flags)?),
        ])
    }

    pub fn encode(&self, records: &[RawFlowRecord]) -> Result<LabeledDataset, DataError> {
        let mut data = Vec::with_capacity(records.len() * NUM_FEATURES);
        let mut labels = Vec::with_capacity(records.len());
        for r in records {
            data.extend_from_slice(&self.encode_record(r)?);
            labels.push(self.label_code(r.label));
        }
        Ok(LabeledDataset::new(Matrix::from_vec(NUM_FEATURES, data)?, labels)?)
    }
}

/// Build an encoding from the tokens observed in `records`.
pub fn fit_encoding(records: &[RawFlowRecord]) -> Result<EncodingMap, DataError> {
    if records.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(EncodingMap::from_vocabulary(
        records.iter().map(|r| r.protocol.clone()),
        records.iter().map(|r| r.flags.clone()),
    ))
}
