//! Per-slice categorical label sequences over the two class taxonomies.

use super::{io_err, VolIoError};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// Fine 6-class pullback taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OctClass {
    Healthy = 0,
    Calcified = 1,
    LipidRich = 2,
    Fibrous = 3,
    Thrombus = 4,
    Stent = 5,
}

impl OctClass {
    pub const COUNT: usize = 6;
    pub const ALL: [OctClass; 6] = [
        OctClass::Healthy,
        OctClass::Calcified,
        OctClass::LipidRich,
        OctClass::Fibrous,
        OctClass::Thrombus,
        OctClass::Stent,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OctClass::Healthy => "healthy",
            OctClass::Calcified => "calcified",
            OctClass::LipidRich => "lipid_rich",
            OctClass::Fibrous => "fibrous",
            OctClass::Thrombus => "thrombus",
            OctClass::Stent => "stent",
        }
    }

    /// Display name used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            OctClass::Healthy => "Healthy",
            OctClass::Calcified => "Calcified",
            OctClass::LipidRich => "Lipid-rich",
            OctClass::Fibrous => "Fibrous",
            OctClass::Thrombus => "Thrombus",
            OctClass::Stent => "Stent",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|c| c.name() == name)
    }

    /// Tie-break rank for label merging: higher wins. Order:
    /// thrombus > lipid_rich > calcified > fibrous > stent > healthy,
    /// so rupture-relevant classes survive downsampling.
    pub fn severity_rank(self) -> u8 {
        match self {
            OctClass::Thrombus => 5,
            OctClass::LipidRich => 4,
            OctClass::Calcified => 3,
            OctClass::Fibrous => 2,
            OctClass::Stent => 1,
            OctClass::Healthy => 0,
        }
    }
}

/// Coarse 3-class CT-side taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CctaClass {
    NonCalcified = 0,
    Calcified = 1,
    Stent = 2,
}

impl CctaClass {
    pub const COUNT: usize = 3;
    pub const ALL: [CctaClass; 3] = [
        CctaClass::NonCalcified,
        CctaClass::Calcified,
        CctaClass::Stent,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            CctaClass::NonCalcified => "non_calcified",
            CctaClass::Calcified => "calcified",
            CctaClass::Stent => "stent",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|c| c.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Taxonomy {
    Oct6,
    Ccta3,
}

impl Taxonomy {
    pub fn class_count(self) -> usize {
        match self {
            Taxonomy::Oct6 => OctClass::COUNT,
            Taxonomy::Ccta3 => CctaClass::COUNT,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Taxonomy::Oct6 => "oct6",
            Taxonomy::Ccta3 => "ccta3",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "oct6" => Some(Taxonomy::Oct6),
            "ccta3" => Some(Taxonomy::Ccta3),
            _ => None,
        }
    }

    pub fn class_name(self, id: u8) -> Option<&'static str> {
        match self {
            Taxonomy::Oct6 => OctClass::from_id(id).map(OctClass::name),
            Taxonomy::Ccta3 => CctaClass::from_id(id).map(CctaClass::name),
        }
    }

    pub fn parse_class(self, name: &str) -> Option<u8> {
        match self {
            Taxonomy::Oct6 => OctClass::parse(name).map(OctClass::id),
            Taxonomy::Ccta3 => CctaClass::parse(name).map(CctaClass::id),
        }
    }
}

/// An ordered per-slice (or per-frame) class-label sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSeq {
    taxonomy: Taxonomy,
    labels: Vec<u8>,
    slice_thickness_mm: f64,
}

impl LabelSeq {
    pub fn new(
        taxonomy: Taxonomy,
        labels: Vec<u8>,
        slice_thickness_mm: f64,
    ) -> Result<Self, VolIoError> {
        if labels.is_empty() {
            return Err(VolIoError::InvalidLabels(
                "label sequence must hold at least one entry".to_string(),
            ));
        }
        if !(slice_thickness_mm > 0.0) || !slice_thickness_mm.is_finite() {
            return Err(VolIoError::InvalidLabels(format!(
                "slice thickness must be positive, got {slice_thickness_mm}"
            )));
        }
        let max = taxonomy.class_count() as u8;
        if let Some(&bad) = labels.iter().find(|&&l| l >= max) {
            return Err(VolIoError::InvalidLabels(format!(
                "class id {bad} out of range for taxonomy {taxonomy:?}"
            )));
        }
        Ok(Self {
            taxonomy,
            labels,
            slice_thickness_mm,
        })
    }

    pub fn taxonomy(&self) -> Taxonomy {
        self.taxonomy
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn slice_thickness_mm(&self) -> f64 {
        self.slice_thickness_mm
    }

    /// Load from CSV: comment lines declare thickness and taxonomy, then a
    /// `index,label` header and contiguous rows from index 0.
    pub fn load(path: &Path) -> Result<Self, VolIoError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut thickness: Option<f64> = None;
        let mut taxonomy = Taxonomy::Oct6;
        let mut saw_header = false;
        let mut labels: Vec<u8> = Vec::new();
        let malformed = |line: usize, reason: String| VolIoError::MalformedLabels {
            path: path.to_path_buf(),
            line,
            reason,
        };
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                let comment = comment.trim();
                if let Some(v) = comment.strip_prefix("thickness_mm=") {
                    thickness = Some(v.trim().parse::<f64>().map_err(|e| {
                        malformed(lineno + 1, format!("bad thickness value: {e}"))
                    })?);
                } else if let Some(v) = comment.strip_prefix("taxonomy=") {
                    taxonomy = Taxonomy::parse(v.trim()).ok_or_else(|| {
                        malformed(lineno + 1, format!("unknown taxonomy {v:?}"))
                    })?;
                }
                continue;
            }
            if !saw_header {
                if line != "index,label" {
                    return Err(malformed(
                        lineno + 1,
                        format!("expected header \"index,label\", got {line:?}"),
                    ));
                }
                saw_header = true;
                continue;
            }
            let (idx_str, name) = line
                .split_once(',')
                .ok_or_else(|| malformed(lineno + 1, "expected index,label".to_string()))?;
            let idx: usize = idx_str
                .trim()
                .parse()
                .map_err(|e| malformed(lineno + 1, format!("bad index: {e}")))?;
            if idx != labels.len() {
                return Err(malformed(
                    lineno + 1,
                    format!("index {idx} out of order (expected {})", labels.len()),
                ));
            }
            let name = name.trim();
            let id = taxonomy
                .parse_class(name)
                .ok_or_else(|| VolIoError::UnknownClass {
                    name: name.to_string(),
                    taxonomy,
                })?;
            labels.push(id);
        }
        let thickness = thickness.ok_or_else(|| {
            malformed(0, "missing \"# thickness_mm=<v>\" comment line".to_string())
        })?;
        if labels.is_empty() {
            return Err(malformed(0, "no label rows".to_string()));
        }
        Self::new(taxonomy, labels, thickness)
    }

    pub fn save(&self, path: &Path) -> Result<(), VolIoError> {
        let mut out = String::new();
        out.push_str(&format!("# thickness_mm={}\n", self.slice_thickness_mm));
        out.push_str(&format!("# taxonomy={}\n", self.taxonomy.name()));
        out.push_str("index,label\n");
        for (i, &l) in self.labels.iter().enumerate() {
            let name = self
                .taxonomy
                .class_name(l)
                .expect("ids validated at construction");
            out.push_str(&format!("{i},{name}\n"));
        }
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            }
        }
        fs::write(path, out).map_err(|e| io_err(path, e))
    }
}
