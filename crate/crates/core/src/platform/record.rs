//! Registry records and their line format.

use std::fmt::Write as _;

use crate::artifact::sha256_hex;
use crate::error::{Error, Result};
use crate::trainer::Mode;

/// One stored file of a tenant, relative to its directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactRef {
    pub role: String,
    pub file: String,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TenantRecord {
    pub name: String,
    pub ordinal: usize,
    pub mode: Mode,
    /// Unix seconds.
    pub registered_at: u64,
    /// Tenants whose adapters taught this one, in registration order.
    pub teachers: Vec<String>,
    pub eta: Option<f64>,
    pub files: Vec<ArtifactRef>,
    pub content_hash: String,
}

pub fn content_hash(files: &[ArtifactRef]) -> String {
    let mut s = String::new();
    for f in files {
        let _ = writeln!(s, "{}:{}:{}", f.role, f.file, f.hash);
    }
    sha256_hex(s.as_bytes())
}

pub fn validate_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name.len() <= 64
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        && !name.starts_with('-');
    if ok {
        Ok(())
    } else {
        Err(Error::Usage(format!(
            "tenant name {name:?} must be 1-64 ASCII letters, digits, '_' or '-'"
        )))
    }
}

impl TenantRecord {
    pub fn file(&self, role: &str) -> Option<&ArtifactRef> {
        self.files.iter().find(|f| f.role == role)
    }

    pub fn adapter_path(&self) -> Option<&str> {
        self.file("adapter").map(|f| f.file.as_str())
    }

    pub fn head_path(&self) -> Option<&str> {
        self.file("head").map(|f| f.file.as_str())
    }

    pub fn to_line(&self) -> String {
        let mut line = format!(
            "name={}\tordinal={}\tmode={}\tregistered_at={}\tteachers={}\teta={}\tcontent_hash={}",
            self.name,
            self.ordinal,
            self.mode,
            self.registered_at,
            self.teachers.join(","),
            self.eta.map_or_else(|| "-".to_string(), |e| e.to_string()),
            self.content_hash
        );
        for f in &self.files {
            let _ = write!(line, "\tfile={}:{}:{}", f.role, f.file, f.hash);
        }
        line
    }

    pub fn parse_line(line: &str, line_no: usize) -> Result<Self> {
        let err = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        let mut fields: Vec<(&str, &str)> = Vec::new();
        let mut files = Vec::new();
        for part in line.split('\t') {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| err(format!("field {part:?} is not key=value")))?;
            if k == "file" {
                let mut it = v.splitn(3, ':');
                match (it.next(), it.next(), it.next()) {
                    (Some(role), Some(file), Some(hash)) => files.push(ArtifactRef {
                        role: role.into(),
                        file: file.into(),
                        hash: hash.into(),
                    }),
                    _ => return Err(err(format!("bad file entry {v:?}"))),
                }
            } else {
                fields.push((k, v));
            }
        }
        let get = |k: &str| {
            fields
                .iter()
                .find(|(key, _)| *key == k)
                .map(|(_, v)| *v)
                .ok_or_else(|| err(format!("missing field {k}")))
        };
        let name = get("name")?.to_string();
        validate_name(&name).map_err(|e| err(e.to_string()))?;
        let ordinal = get("ordinal")?
            .parse()
            .map_err(|_| err("bad ordinal".into()))?;
        let mode = get("mode")?
            .parse::<Mode>()
            .map_err(|e| err(e.to_string()))?;
        let registered_at = get("registered_at")?
            .parse()
            .map_err(|_| err("bad timestamp".into()))?;
        let teachers = match get("teachers")? {
            "" => Vec::new(),
            t => t.split(',').map(str::to_string).collect(),
        };
        let eta = match get("eta")? {
            "-" => None,
            e => Some(e.parse().map_err(|_| err(format!("bad eta {e:?}")))?),
        };
        let record = TenantRecord {
            name,
            ordinal,
            mode,
            registered_at,
            teachers,
            eta,
            content_hash: get("content_hash")?.to_string(),
            files,
        };
        if content_hash(&record.files) != record.content_hash {
            return Err(err(format!(
                "content hash of {} does not match its files",
                record.name
            )));
        }
        Ok(record)
    }
}

pub fn registry_to_text(records: &[TenantRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    out
}

/// Parses a registry and checks names are unique and ordinals run 1, 2, ...
pub fn parse_registry(text: &str) -> Result<Vec<TenantRecord>> {
    let mut out: Vec<TenantRecord> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r = TenantRecord::parse_line(line, i + 1)?;
        if r.ordinal != out.len() + 1 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("ordinal {} out of sequence", r.ordinal),
            });
        }
        if out.iter().any(|o| o.name == r.name) {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("duplicate tenant {}", r.name),
            });
        }
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> TenantRecord {
        let files = vec![
            ArtifactRef {
                role: "adapter".into(),
                file: "adapter.bin".into(),
                hash: "ab".repeat(32),
            },
            ArtifactRef {
                role: "head".into(),
                file: "head.bin".into(),
                hash: "cd".repeat(32),
            },
        ];
        TenantRecord {
            name: "bank-1".into(),
            ordinal: 1,
            mode: Mode::AdapterDistill,
            registered_at: 17,
            teachers: vec![],
            eta: Some(0.5),
            content_hash: content_hash(&files),
            files,
        }
    }

    #[test]
    fn line_round_trip() {
        let r = record();
        let back = parse_registry(&registry_to_text(&[r.clone()])).unwrap();
        assert_eq!(back, vec![r.clone()]);
        assert_eq!(r.adapter_path(), Some("adapter.bin"));
    }

    #[test]
    fn tampered_line_rejected() {
        let line = record().to_line().replace("head.bin", "other.bin");
        assert!(matches!(
            parse_registry(&line),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn ordinals_must_run_in_sequence() {
        let mut r = record();
        r.ordinal = 2;
        assert!(parse_registry(&r.to_line()).is_err());
    }

    #[test]
    fn names() {
        validate_name("tenant_01").unwrap();
        for bad in ["", "a/b", "..", "-x", "a b"] {
            assert!(validate_name(bad).is_err(), "{bad}");
        }
    }
}
