//! Manifest CSV: one row per image, grouped into per-eye records.
//!
//! Header: `eye_id,class,modality,path,split,bbox` where `bbox` is
//! `x0:y0:x1:y1` (inclusive pixel bounds) or empty.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEADER: [&str; 6] = ["eye_id", "class", "modality", "path", "split", "bbox"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Class {
    #[serde(rename = "normal")]
    Normal,
    #[serde(rename = "dryAMD")]
    DryAmd,
    #[serde(rename = "wetAMD")]
    WetAmd,
}

impl Class {
    pub const ALL: [Class; 3] = [Class::Normal, Class::DryAmd, Class::WetAmd];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Class> {
        Class::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Class::Normal => "normal",
            Class::DryAmd => "dryAMD",
            Class::WetAmd => "wetAMD",
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Class {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Class::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown class {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Inclusive pixel box of a planted pattern.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..=self.x1).contains(&x) && (self.y0..=self.y1).contains(&y)
    }

    pub fn dilate(&self, by: usize, limit: usize) -> BBox {
        BBox {
            x0: self.x0.saturating_sub(by),
            y0: self.y0.saturating_sub(by),
            x1: (self.x1 + by).min(limit.saturating_sub(1)),
            y1: (self.y1 + by).min(limit.saturating_sub(1)),
        }
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}:{}", self.x0, self.y0, self.x1, self.y1)
    }
}

impl FromStr for BBox {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<usize> = s
            .split(':')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| format!("bad bbox {s:?}"))?;
        match parts[..] {
            [x0, y0, x1, y1] if x0 <= x1 && y0 <= y1 => Ok(BBox { x0, y0, x1, y1 }),
            _ => Err(format!("bad bbox {s:?}, expected x0:y0:x1:y1")),
        }
    }
}

/// An image file reference relative to the manifest directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub path: String,
    pub bbox: Option<BBox>,
}

/// One eye: its label, split and the images taken of it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EyeRecord {
    pub eye_id: String,
    pub class: Class,
    pub split: Split,
    pub fundus: Vec<ImageRef>,
    pub oct: Vec<ImageRef>,
}

#[derive(Debug, Deserialize)]
struct Row {
    eye_id: String,
    class: String,
    modality: String,
    path: String,
    split: String,
    bbox: String,
}

/// Parses manifest CSV text; line numbers in errors are 1-based file lines.
pub fn parse_manifest(text: &str) -> Result<Vec<EyeRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::Manifest {
        line: 1,
        message: e.to_string(),
    })?;
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(Error::Manifest {
            line: 1,
            message: format!("expected header {}", HEADER.join(",")),
        });
    }
    let mut records: Vec<EyeRecord> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    let mut seen: HashMap<(String, String), usize> = HashMap::new();
    let header = header.clone();
    let mut raw = csv::StringRecord::new();
    loop {
        let more = reader.read_record(&mut raw).map_err(|e| Error::Manifest {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        if !more {
            break;
        }
        let line = raw.position().map_or(0, |p| p.line() as usize);
        let row: Row = raw
            .deserialize(Some(&header))
            .map_err(|e| Error::Manifest {
                line,
                message: e.to_string(),
            })?;
        let bad = |message: String| Error::Manifest { line, message };
        if row.eye_id.is_empty() || row.path.is_empty() {
            return Err(bad("eye_id and path must be non-empty".into()));
        }
        let class: Class = row.class.parse().map_err(bad)?;
        let split: Split = row.split.parse().map_err(bad)?;
        let bbox = if row.bbox.is_empty() {
            None
        } else {
            Some(row.bbox.parse::<BBox>().map_err(bad)?)
        };
        if let Some(first) = seen.insert((row.eye_id.clone(), row.path.clone()), line) {
            return Err(bad(format!(
                "duplicate image {} for eye {} (first on line {first})",
                row.path, row.eye_id
            )));
        }
        let idx = *by_id.entry(row.eye_id.clone()).or_insert_with(|| {
            records.push(EyeRecord {
                eye_id: row.eye_id.clone(),
                class,
                split,
                fundus: Vec::new(),
                oct: Vec::new(),
            });
            records.len() - 1
        });
        let rec = &mut records[idx];
        if rec.class != class {
            return Err(bad(format!(
                "eye {} labelled both {} and {class}",
                rec.eye_id, rec.class
            )));
        }
        if rec.split != split {
            return Err(bad(format!(
                "eye {} assigned to both {} and {split}",
                rec.eye_id, rec.split
            )));
        }
        let image = ImageRef {
            path: row.path,
            bbox,
        };
        match row.modality.as_str() {
            "fundus" => rec.fundus.push(image),
            "oct" => rec.oct.push(image),
            other => return Err(bad(format!("unknown modality {other:?}"))),
        }
    }
    Ok(records)
}

pub fn load_manifest(path: &Path) -> Result<Vec<EyeRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

/// Renders records back to manifest CSV (fundus rows before OCT rows per eye).
pub fn manifest_to_string(records: &[EyeRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HEADER).expect("in-memory write");
    for r in records {
        let rows = r
            .fundus
            .iter()
            .map(|i| ("fundus", i))
            .chain(r.oct.iter().map(|i| ("oct", i)));
        for (modality, img) in rows {
            let bbox = img.bbox.map(|b| b.to_string()).unwrap_or_default();
            w.write_record([
                r.eye_id.as_str(),
                r.class.as_str(),
                modality,
                img.path.as_str(),
                r.split.as_str(),
                bbox.as_str(),
            ])
            .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("CSV of UTF-8 fields")
}

pub fn write_manifest(records: &[EyeRecord], path: &Path) -> Result<()> {
    std::fs::write(path, manifest_to_string(records)).map_err(|e| Error::io(path, e))
}

/// Per-class image counts `(fundus, oct)` within one split.
pub fn image_counts(records: &[EyeRecord], split: Split) -> [(usize, usize); 3] {
    let mut counts = [(0, 0); 3];
    for r in records.iter().filter(|r| r.split == split) {
        counts[r.class.index()].0 += r.fundus.len();
        counts[r.class.index()].1 += r.oct.len();
    }
    counts
}

/// Per-class number of eyes with at least one image of each modality.
pub fn eye_counts(records: &[EyeRecord], split: Split) -> [(usize, usize); 3] {
    let mut counts = [(0, 0); 3];
    for r in records.iter().filter(|r| r.split == split) {
        counts[r.class.index()].0 += usize::from(!r.fundus.is_empty());
        counts[r.class.index()].1 += usize::from(!r.oct.is_empty());
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEAD: &str = "eye_id,class,modality,path,split,bbox\n";

    #[test]
    fn header_only_is_empty() {
        assert!(parse_manifest(HEAD).unwrap().is_empty());
    }

    #[test]
    fn groups_rows_by_eye() {
        let text = format!(
            "{HEAD}e1,wetAMD,fundus,f1.ppm,train,\ne1,wetAMD,oct,o1.pgm,train,1:2:3:4\ne2,normal,oct,o2.pgm,test,\n"
        );
        let recs = parse_manifest(&text).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].fundus.len(), 1);
        assert_eq!(
            recs[0].oct[0].bbox,
            Some(BBox {
                x0: 1,
                y0: 2,
                x1: 3,
                y1: 4
            })
        );
        assert_eq!(recs[1].split, Split::Test);
        assert_eq!(parse_manifest(&manifest_to_string(&recs)).unwrap(), recs);
    }

    #[test]
    fn unknown_class_reports_line() {
        let text =
            format!("{HEAD}e1,normal,fundus,a.ppm,train,\ne2,glaucoma,fundus,b.ppm,train,\n");
        match parse_manifest(&text) {
            Err(Error::Manifest { line: 3, message }) => assert!(message.contains("glaucoma")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_image_rejected() {
        let text = format!("{HEAD}e1,normal,fundus,a.ppm,train,\ne1,normal,fundus,a.ppm,train,\n");
        assert!(matches!(
            parse_manifest(&text),
            Err(Error::Manifest { line: 3, .. })
        ));
    }

    #[test]
    fn conflicting_label_or_split_rejected() {
        let a = format!("{HEAD}e1,normal,fundus,a.ppm,train,\ne1,dryAMD,oct,b.pgm,train,\n");
        let b = format!("{HEAD}e1,normal,fundus,a.ppm,train,\ne1,normal,oct,b.pgm,val,\n");
        assert!(parse_manifest(&a).is_err());
        assert!(parse_manifest(&b).is_err());
    }

    #[test]
    fn malformed_row_rejected() {
        let text = format!("{HEAD}e1,normal,fundus\n");
        assert!(matches!(parse_manifest(&text), Err(Error::Manifest { .. })));
        let text = format!("{HEAD}e1,normal,fundus,a.ppm,train,1:2\n");
        assert!(matches!(
            parse_manifest(&text),
            Err(Error::Manifest { line: 2, .. })
        ));
    }
}
