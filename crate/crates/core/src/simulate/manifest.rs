use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UttKind {
    Keyword,
    Negative,
    Noise,
}

impl fmt::Display for UttKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UttKind::Keyword => "keyword",
            UttKind::Negative => "negative",
            UttKind::Noise => "noise",
        })
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    #[serde(rename = "type")]
    pub kind: UttKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keyword_end_s: Option<f64>,
}

/// Line-delimited JSON manifest. Relative paths are resolved against the
/// directory holding the manifest file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self { entries };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for e in &self.entries {
            if !ids.insert(e.id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate manifest id {}", e.id)));
            }
            match (e.kind, e.keyword_end_s) {
                (UttKind::Keyword, None) => {
                    return Err(Error::InvalidInput(format!("keyword entry {} has no keyword_end_s", e.id)))
                }
                (UttKind::Keyword, Some(end)) if !(end.is_finite() && end > 0.0) => {
                    return Err(Error::InvalidInput(format!("keyword entry {} has end time {end}", e.id)))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let file = std::fs::File::open(path)?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut e: ManifestEntry = serde_json::from_str(&line).map_err(|err| {
                Error::InvalidInput(format!("{}:{}: {err}", path.display(), n + 1))
            })?;
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
            entries.push(e);
        }
        Self::new(entries)
    }

    /// Writes one JSON object per line; paths under `base` are stored
    /// relative to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in &self.entries {
            let mut e = e.clone();
            if let Ok(rel) = e.path.strip_prefix(&base) {
                e.path = rel.to_path_buf();
            }
            writeln!(out, "{}", serde_json::to_string(&e)?)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Fails if any referenced file is missing.
    pub fn check_files(&self) -> Result<()> {
        for e in &self.entries {
            if !e.path.is_file() {
                return Err(Error::InvalidInput(format!(
                    "manifest entry {} points to missing file {}",
                    e.id,
                    e.path.display()
                )));
            }
        }
        Ok(())
    }

    pub fn of_kind(&self, kind: UttKind) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.kind == kind).collect()
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    fn speakers(&self) -> BTreeSet<&str> {
        self.entries
            .iter()
            .filter(|e| e.kind != UttKind::Noise)
            .filter_map(|e| e.speaker.as_deref())
            .collect()
    }

    fn noise_sources(&self) -> BTreeSet<PathBuf> {
        self.of_kind(UttKind::Noise).into_iter().map(|e| e.path.clone()).collect()
    }
}

/// Train and test partitions must not share speakers or noise recordings.
pub fn check_disjoint(train: &Manifest, test: &Manifest) -> Result<()> {
    if let Some(s) = train.speakers().intersection(&test.speakers()).next() {
        return Err(Error::InvalidInput(format!("speaker {s} appears in both train and test manifests")));
    }
    if let Some(p) = train.noise_sources().intersection(&test.noise_sources()).next() {
        return Err(Error::InvalidInput(format!(
            "noise {} appears in both train and test manifests",
            p.display()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, kind: UttKind, speaker: Option<&str>) -> ManifestEntry {
        ManifestEntry {
            id: id.into(),
            path: PathBuf::from(format!("{id}.wav")),
            kind,
            speaker: speaker.map(String::from),
            keyword_end_s: (kind == UttKind::Keyword).then_some(0.8),
        }
    }

    #[test]
    fn round_trip_with_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::new(vec![
            ManifestEntry {
                path: dir.path().join("a.wav"),
                ..entry("a", UttKind::Keyword, Some("s1"))
            },
            ManifestEntry {
                path: dir.path().join("n.wav"),
                ..entry("n", UttKind::Noise, None)
            },
        ])
        .unwrap();
        let p = dir.path().join("m.jsonl");
        m.save(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"path\":\"a.wav\""));
        assert!(text.contains("\"type\":\"keyword\""));
        assert_eq!(Manifest::load(&p).unwrap(), m);
    }

    #[test]
    fn keyword_without_end_time_rejected() {
        let mut e = entry("k", UttKind::Keyword, None);
        e.keyword_end_s = None;
        assert!(Manifest::new(vec![e]).is_err());
    }

    #[test]
    fn overlap_detected() {
        let train = Manifest::new(vec![entry("a", UttKind::Keyword, Some("s1"))]).unwrap();
        let test = Manifest::new(vec![entry("b", UttKind::Negative, Some("s1"))]).unwrap();
        assert!(check_disjoint(&train, &test).is_err());
        let test = Manifest::new(vec![entry("b", UttKind::Negative, Some("s2"))]).unwrap();
        check_disjoint(&train, &test).unwrap();
        let train = Manifest::new(vec![entry("n", UttKind::Noise, None)]).unwrap();
        let test = Manifest::new(vec![entry("n2", UttKind::Noise, None)]).unwrap();
        check_disjoint(&train, &test).unwrap();
    }
}
