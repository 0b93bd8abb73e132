//! NDJSON dataset files and the persisted label dictionary.
//!
//! One JSON object per line: `{"lengths": [...], "label": "...",
//! "ts": <float seconds>, "key": "tcp|udp:src:sport>dst:dport"}` with every
//! field but `lengths` optional. Writing is canonical (fixed field order,
//! no extra whitespace), so write -> read -> write is byte-stable.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FeatureConfig, FeatureVector, FlowError, FlowKey, FlowRecord, Transport, MAX_PACKET_LEN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub lengths: Vec<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ts: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
}

impl DatasetRecord {
    pub fn from_flow(flow: &FlowRecord, label: Option<&str>) -> Self {
        DatasetRecord {
            lengths: flow.signed_lengths.clone(),
            label: label.map(str::to_owned),
            ts: Some(flow.first_ts_us as f64 / 1e6),
            key: Some(flow.key_string()),
        }
    }

    pub fn to_feature(&self, cfg: &FeatureConfig) -> Result<FeatureVector, FlowError> {
        FeatureVector::from_lengths(&self.lengths, cfg.seq_len, cfg.norm_divisor)
    }

    fn validate(&self, line: usize) -> Result<(), FlowError> {
        if self.lengths.is_empty() {
            return Err(FlowError::Parse {
                line,
                reason: "\"lengths\" must be non-empty".into(),
            });
        }
        for &l in &self.lengths {
            if l == 0 || (l as i64).abs() > MAX_PACKET_LEN {
                return Err(FlowError::Parse {
                    line,
                    reason: format!("length {l} out of range (non-zero, |l| <= {MAX_PACKET_LEN})"),
                });
            }
        }
        Ok(())
    }
}

/// Parse a `"tcp|udp:src:sport>dst:dport"` key back into a canonical
/// [`FlowKey`] plus the client-orientation bit.
pub fn parse_key_string(s: &str) -> Result<(FlowKey, bool), FlowError> {
    let bad = |reason: &str| FlowError::Parse {
        line: 0,
        reason: format!("bad key {s:?}: {reason}"),
    };
    let (left, right) = s.split_once('>').ok_or_else(|| bad("missing '>'"))?;
    let (proto, src) = left.split_once(':').ok_or_else(|| bad("missing transport"))?;
    let transport = match proto {
        "tcp" => Transport::Tcp,
        "udp" => Transport::Udp,
        other => return Err(bad(&format!("unknown transport {other:?}"))),
    };
    let parse_ep = |ep: &str| -> Result<(std::net::IpAddr, u16), FlowError> {
        let (addr, port) = ep.rsplit_once(':').ok_or_else(|| bad("missing port"))?;
        Ok((
            addr.parse().map_err(|_| bad("bad address"))?,
            port.parse().map_err(|_| bad("bad port"))?,
        ))
    };
    let (sa, sp) = parse_ep(src)?;
    let (da, dp) = parse_ep(right)?;
    Ok(FlowKey::canonical(sa, sp, da, dp, transport))
}

/// Read an NDJSON dataset. Blank lines are skipped; any malformed line is a
/// [`FlowError::Parse`] carrying its 1-based line number.
pub fn read_records(path: &Path) -> Result<Vec<DatasetRecord>, FlowError> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line).map_err(|e| FlowError::Parse {
            line: line_no,
            reason: e.to_string(),
        })?;
        rec.validate(line_no)?;
        out.push(rec);
    }
    Ok(out)
}

/// Write records canonically, one compact JSON object per line.
pub fn write_records(path: &Path, records: &[DatasetRecord]) -> Result<(), FlowError> {
    let mut buf = Vec::new();
    for rec in records {
        serde_json::to_writer(&mut buf, rec).expect("dataset record serializes");
        buf.push(b'\n');
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Label string -> class id mapping, persisted next to every trained
/// checkpoint. Ids are always the dense range `0..num_classes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelDict {
    map: BTreeMap<String, usize>,
}

impl LabelDict {
    /// Build from observed label strings; ids follow sorted label order.
    pub fn from_labels<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut names: Vec<String> = labels.into_iter().map(|s| s.as_ref().to_owned()).collect();
        names.sort();
        names.dedup();
        let map = names.into_iter().enumerate().map(|(i, n)| (n, i)).collect();
        LabelDict { map }
    }

    pub fn from_map(map: BTreeMap<String, usize>) -> Result<Self, FlowError> {
        let dict = LabelDict { map };
        dict.check()?;
        Ok(dict)
    }

    fn check(&self) -> Result<(), FlowError> {
        let n = self.map.len();
        let mut seen = vec![false; n];
        for (name, &id) in &self.map {
            if id >= n {
                return Err(FlowError::LabelDict(format!(
                    "label {name:?} has id {id}, expected ids 0..{n}"
                )));
            }
            if seen[id] {
                return Err(FlowError::LabelDict(format!(
                    "duplicate id {id} (label {name:?})"
                )));
            }
            seen[id] = true;
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.map.len()
    }

    pub fn id_of(&self, label: &str) -> Option<usize> {
        self.map.get(label).copied()
    }

    pub fn name_of(&self, id: usize) -> Option<&str> {
        self.map
            .iter()
            .find(|(_, &v)| v == id)
            .map(|(k, _)| k.as_str())
    }

    /// Label names ordered by class id.
    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<(usize, String)> =
            self.map.iter().map(|(k, &i)| (i, k.clone())).collect();
        v.sort();
        v.into_iter().map(|(_, n)| n).collect()
    }

    pub fn map(&self) -> &BTreeMap<String, usize> {
        &self.map
    }

    /// Map each record's label string through the dictionary. A labeled
    /// record with an unknown string fails with its line number.
    pub fn resolve(&self, records: &[DatasetRecord]) -> Result<Vec<Option<usize>>, FlowError> {
        records
            .iter()
            .enumerate()
            .map(|(i, rec)| match &rec.label {
                None => Ok(None),
                Some(name) => self.id_of(name).map(Some).ok_or(FlowError::UnknownLabel {
                    line: i + 1,
                    label: name.clone(),
                }),
            })
            .collect()
    }
}

pub fn read_label_dict(path: &Path) -> Result<LabelDict, FlowError> {
    let text = fs::read_to_string(path)?;
    let map: BTreeMap<String, usize> =
        serde_json::from_str(&text).map_err(|e| FlowError::LabelDict(e.to_string()))?;
    LabelDict::from_map(map)
}

pub fn write_label_dict(path: &Path, dict: &LabelDict) -> Result<(), FlowError> {
    let mut text = serde_json::to_string_pretty(dict).expect("label dict serializes");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
