//! Dataset manifest: one CSV row per image.
//!
//! Header: `path,subject,phase,breathing,motion_class,mask_path`. Paths are
//! relative to the manifest's directory. Severe (class 3) images carry no
//! mask; every other image must have one.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 6] = ["path", "subject", "phase", "breathing", "motion_class", "mask_path"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Ed,
    Es,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Breathing {
    FullBreathHold,
    HalfBreathHold,
    FreeBreathing,
    IntensiveBreathing,
}

impl FromStr for Phase {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ED" => Ok(Phase::Ed),
            "ES" => Ok(Phase::Es),
            _ => Err(format!("unknown phase {s:?} (expected ED or ES)")),
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Ed => "ED",
            Phase::Es => "ES",
        })
    }
}

impl Breathing {
    pub const ALL: [Breathing; 4] = [
        Breathing::FullBreathHold,
        Breathing::HalfBreathHold,
        Breathing::FreeBreathing,
        Breathing::IntensiveBreathing,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Breathing::FullBreathHold => "full-breath-hold",
            Breathing::HalfBreathHold => "half-breath-hold",
            Breathing::FreeBreathing => "free-breathing",
            Breathing::IntensiveBreathing => "intensive-breathing",
        }
    }
}

impl FromStr for Breathing {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Breathing::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| format!("unknown breathing condition {s:?}"))
    }
}

impl fmt::Display for Breathing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    pub path: String,
    pub subject: String,
    pub phase: Phase,
    pub breathing: Breathing,
    pub motion_class: u8,
    pub mask_path: Option<String>,
}

pub fn load_manifest(bytes: &[u8]) -> Result<Vec<SampleRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let header = rdr.headers().map_err(|e| Error::Data(format!("manifest header: {e}")))?;
    if header.iter().ne(MANIFEST_HEADER) {
        return Err(Error::Data(format!(
            "manifest header is {:?}, expected {}",
            header.iter().collect::<Vec<_>>(),
            MANIFEST_HEADER.join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        // Row numbers count the header as row 1.
        let line = i + 2;
        let row = row.map_err(|e| Error::Data(format!("manifest row {line}: {e}")))?;
        let bad = |msg: String| Error::Data(format!("manifest row {line}: {msg}"));
        let field = |j: usize| row[j].trim();
        if field(0).is_empty() {
            return Err(bad("empty path".into()));
        }
        let phase = field(2).parse().map_err(bad)?;
        let breathing = field(3).parse().map_err(bad)?;
        let motion_class: u8 = match field(4) {
            "1" => 1,
            "2" => 2,
            "3" => 3,
            other => return Err(bad(format!("motion_class {other:?} is not 1, 2 or 3"))),
        };
        let mask_path = Some(field(5).to_string()).filter(|s| !s.is_empty());
        match (motion_class, &mask_path) {
            (3, Some(_)) => return Err(bad("severe (class 3) images have no mask".into())),
            (1 | 2, None) => return Err(bad(format!("class {motion_class} image needs a mask_path"))),
            _ => {}
        }
        out.push(SampleRecord {
            path: field(0).to_string(),
            subject: field(1).to_string(),
            phase,
            breathing,
            motion_class,
            mask_path,
        });
    }
    Ok(out)
}

pub fn manifest_csv(records: &[SampleRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Data(format!("manifest: {e}"));
    w.write_record(MANIFEST_HEADER).map_err(err)?;
    for r in records {
        let class = r.motion_class.to_string();
        w.write_record([
            r.path.as_str(),
            &r.subject,
            &r.phase.to_string(),
            r.breathing.as_str(),
            &class,
            r.mask_path.as_deref().unwrap_or(""),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("manifest: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
