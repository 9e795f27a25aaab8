//! Versioned JSON artifacts: checkpoints and line-delimited record files.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{PadError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Provenance stamped into every artifact the pipeline writes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub schema_version: u32,
    pub kind: String,
    #[serde(flatten)]
    pub provenance: Provenance,
    pub body: T,
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| PadError::io(dir, e))?;
        }
    }
    Ok(())
}

/// Writes `body` wrapped in a versioned envelope.
pub fn save_json<T: Serialize>(path: &Path, kind: &str, provenance: &Provenance, body: &T) -> Result<()> {
    let env = Envelope {
        schema_version: SCHEMA_VERSION,
        kind: kind.to_string(),
        provenance: provenance.clone(),
        body,
    };
    let mut text = serde_json::to_string(&env).map_err(|e| PadError::json(path, e))?;
    text.push('\n');
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| PadError::io(path, e))
}

/// Reads an envelope written by [`save_json`], checking version and kind.
pub fn load_json<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<(Provenance, T)> {
    let text = fs::read_to_string(path).map_err(|e| PadError::io(path, e))?;
    let env: Envelope<T> = serde_json::from_str(&text).map_err(|e| PadError::json(path, e))?;
    check_header(path, env.schema_version, &env.kind, kind)?;
    Ok((env.provenance, env.body))
}

fn check_header(path: &Path, version: u32, found: &str, expected: &str) -> Result<()> {
    if version != SCHEMA_VERSION {
        return Err(PadError::Schema {
            path: path.to_path_buf(),
            detail: format!("schema_version {version}, expected {SCHEMA_VERSION}"),
        });
    }
    if found != expected {
        return Err(PadError::Schema {
            path: path.to_path_buf(),
            detail: format!("kind `{found}`, expected `{expected}`"),
        });
    }
    Ok(())
}

/// First line of every JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonlHeader {
    pub schema_version: u32,
    pub kind: String,
    #[serde(flatten)]
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl JsonlHeader {
    pub fn new(kind: &str, provenance: Provenance) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            kind: kind.to_string(),
            provenance,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl Serialize) -> Self {
        let v = serde_json::to_value(value).expect("header metadata serializes");
        self.meta.insert(key.to_string(), v);
        self
    }
}

/// Serializes a header plus records into JSONL text.
pub fn to_jsonl<T: Serialize>(header: &JsonlHeader, records: &[T]) -> std::result::Result<String, serde_json::Error> {
    let mut out = serde_json::to_string(header)?;
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses JSONL text produced by [`to_jsonl`].
pub fn from_jsonl<T: DeserializeOwned>(text: &str) -> std::result::Result<(JsonlHeader, Vec<T>), serde_json::Error> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: JsonlHeader = match lines.next() {
        Some(l) => serde_json::from_str(l)?,
        None => serde_json::from_str("")?,
    };
    let records = lines
        .map(serde_json::from_str)
        .collect::<std::result::Result<Vec<T>, _>>()?;
    Ok((header, records))
}

pub fn write_jsonl<T: Serialize>(path: &Path, header: &JsonlHeader, records: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let file = fs::File::create(path).map_err(|e| PadError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let text = to_jsonl(header, records).map_err(|e| PadError::json(path, e))?;
    w.write_all(text.as_bytes()).map_err(|e| PadError::io(path, e))?;
    w.flush().map_err(|e| PadError::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<(JsonlHeader, Vec<T>)> {
    let file = fs::File::open(path).map_err(|e| PadError::io(path, e))?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line.map_err(|e| PadError::io(path, e))?);
        text.push('\n');
    }
    let (header, records) = from_jsonl(&text).map_err(|e| PadError::json(path, e))?;
    check_header(path, header.schema_version, &header.kind, kind)?;
    Ok((header, records))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| PadError::io(path, e))
}

/// Serde adapter storing a `BTreeMap` with sequence keys as a list of
/// `[key, value]` pairs, since JSON object keys must be strings.
pub(crate) mod table {
    use std::collections::BTreeMap;

    use serde::de::DeserializeOwned;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<K, V, S>(map: &BTreeMap<K, V>, ser: S) -> Result<S::Ok, S::Error>
    where
        K: Serialize,
        V: Serialize,
        S: Serializer,
    {
        ser.collect_seq(map.iter())
    }

    pub fn deserialize<'de, K, V, D>(de: D) -> Result<BTreeMap<K, V>, D::Error>
    where
        K: DeserializeOwned + Ord,
        V: DeserializeOwned,
        D: Deserializer<'de>,
    {
        let entries: Vec<(K, V)> = Vec::deserialize(de)?;
        Ok(entries.into_iter().collect())
    }
}
