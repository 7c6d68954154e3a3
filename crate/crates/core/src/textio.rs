//! Line-oriented container shared by dataset and model files.
//!
//! ```text
//! <magic>
//! schema_version <u32>
//! meta <key> <value...>
//! block <name> <rows> <cols>
//! <cols numbers>            (rows lines)
//! checksum sha256 <hex>     (over every byte before this line)
//! ```
//!
//! Numbers are written with 17 significant digits so they round-trip exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Block {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Block {
    pub fn from_rows(rows: &[Vec<f64>], cols: usize) -> Self {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            debug_assert_eq!(r.len(), cols);
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn vector(v: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        if self.cols == 0 {
            return vec![Vec::new(); self.rows];
        }
        self.data.chunks(self.cols).map(|c| c.to_vec()).collect()
    }
}

#[derive(Debug, Default)]
pub(crate) struct Document {
    pub meta: BTreeMap<String, String>,
    pub blocks: BTreeMap<String, Block>,
}

impl Document {
    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("missing meta field `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta(key)?
            .parse()
            .map_err(|_| Error::Format(format!("meta field `{key}` is malformed")))
    }

    pub fn block(&self, name: &str) -> Result<&Block> {
        self.blocks
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing block `{name}`")))
    }
}

pub(crate) struct Writer {
    buf: String,
}

impl Writer {
    pub fn new(magic: &str, version: u32) -> Self {
        let mut buf = String::new();
        let _ = writeln!(buf, "{magic}");
        let _ = writeln!(buf, "schema_version {version}");
        Self { buf }
    }

    pub fn meta(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        let _ = writeln!(self.buf, "meta {key} {value}");
        self
    }

    pub fn block(&mut self, name: &str, block: &Block) -> &mut Self {
        let _ = writeln!(self.buf, "block {name} {} {}", block.rows, block.cols);
        if block.cols > 0 {
            for row in block.data.chunks(block.cols) {
                let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
                let _ = writeln!(self.buf, "{}", line.join(" "));
            }
        }
        self
    }

    pub fn finish(mut self) -> String {
        let digest = Sha256::digest(self.buf.as_bytes());
        let _ = writeln!(self.buf, "checksum sha256 {}", hex::encode(digest));
        self.buf
    }
}

/// Parses a container, checking magic, schema version (before the checksum, so
/// version errors are reported as such) and checksum.
pub(crate) fn parse(text: &str, magic: &str, version: u32) -> Result<Document> {
    let mut lines = text.lines();
    match lines.next() {
        Some(l) if l.trim_end() == magic => {}
        _ => return Err(Error::Format(format!("expected `{magic}` header"))),
    }
    let found: u32 = lines
        .next()
        .and_then(|l| l.strip_prefix("schema_version "))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::Format("missing schema_version line".into()))?;
    if found != version {
        return Err(Error::SchemaVersion {
            found,
            expected: version,
        });
    }

    let marker = "checksum sha256 ";
    let pos = text.rfind(marker).ok_or(Error::Checksum)?;
    let stated = text[pos + marker.len()..].trim();
    let digest = hex::encode(Sha256::digest(&text.as_bytes()[..pos]));
    if stated != digest {
        return Err(Error::Checksum);
    }

    let body = &text[..pos];
    let mut doc = Document::default();
    let mut it = body.lines().skip(2);
    while let Some(line) = it.next() {
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("meta ") {
            let (k, v) = rest
                .split_once(' ')
                .ok_or_else(|| Error::Format(format!("bad meta line `{line}`")))?;
            doc.meta.insert(k.to_string(), v.to_string());
        } else if let Some(rest) = line.strip_prefix("block ") {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(Error::Format(format!("bad block header `{line}`")));
            }
            let rows: usize = parts[1]
                .parse()
                .map_err(|_| Error::Format(format!("bad block header `{line}`")))?;
            let cols: usize = parts[2]
                .parse()
                .map_err(|_| Error::Format(format!("bad block header `{line}`")))?;
            let mut data = Vec::with_capacity(rows * cols);
            if cols > 0 {
                for _ in 0..rows {
                    let row = it
                        .next()
                        .ok_or_else(|| Error::Format(format!("block `{}` is short", parts[0])))?;
                    let before = data.len();
                    for tok in row.split_whitespace() {
                        data.push(
                            tok.parse::<f64>()
                                .map_err(|_| Error::Format(format!("bad number `{tok}`")))?,
                        );
                    }
                    if data.len() - before != cols {
                        return Err(Error::Format(format!(
                            "block `{}` row has wrong width",
                            parts[0]
                        )));
                    }
                }
            }
            doc.blocks
                .insert(parts[0].to_string(), Block { rows, cols, data });
        } else {
            return Err(Error::Format(format!("unexpected line `{line}`")));
        }
    }
    Ok(doc)
}
