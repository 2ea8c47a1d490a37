//! Manually screened (pullback frame, MPR slice) correspondences.

use super::{io_err, VolIoError};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// Ordered reference-location pairs, sorted by pullback frame index and
/// strictly increasing in both coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferencePairs {
    pairs: Vec<(usize, usize)>,
}

impl ReferencePairs {
    /// Sorts by pullback index and validates strict monotonicity in both
    /// coordinates.
    pub fn new(mut pairs: Vec<(usize, usize)>) -> Result<Self, VolIoError> {
        if pairs.is_empty() {
            return Err(VolIoError::NonMonotoneReferences {
                reason: "at least one reference pair is required".to_string(),
            });
        }
        pairs.sort_by_key(|&(oct, _)| oct);
        for w in pairs.windows(2) {
            let (o0, m0) = w[0];
            let (o1, m1) = w[1];
            if o1 <= o0 || m1 <= m0 {
                return Err(VolIoError::NonMonotoneReferences {
                    reason: format!("({o0},{m0}) then ({o1},{m1})"),
                });
            }
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn first(&self) -> (usize, usize) {
        self.pairs[0]
    }

    pub fn last(&self) -> (usize, usize) {
        *self.pairs.last().expect("non-empty by construction")
    }

    /// Checks all indices against the sequence lengths they refer into.
    pub fn check_bounds(&self, oct_len: usize, mpr_len: usize) -> Result<(), VolIoError> {
        for &(o, m) in &self.pairs {
            if o >= oct_len || m >= mpr_len {
                return Err(VolIoError::NonMonotoneReferences {
                    reason: format!(
                        "pair ({o},{m}) out of bounds for lengths ({oct_len},{mpr_len})"
                    ),
                });
            }
        }
        Ok(())
    }

    /// Load from CSV with header `oct_index,mpr_index`.
    pub fn load(path: &Path) -> Result<Self, VolIoError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let malformed = |line: usize, reason: String| VolIoError::MalformedReferences {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut saw_header = false;
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !saw_header {
                if line != "oct_index,mpr_index" {
                    return Err(malformed(
                        lineno + 1,
                        format!("expected header \"oct_index,mpr_index\", got {line:?}"),
                    ));
                }
                saw_header = true;
                continue;
            }
            let (a, b) = line
                .split_once(',')
                .ok_or_else(|| malformed(lineno + 1, "expected two columns".to_string()))?;
            let oct: usize = a
                .trim()
                .parse()
                .map_err(|e| malformed(lineno + 1, format!("bad oct index: {e}")))?;
            let mpr: usize = b
                .trim()
                .parse()
                .map_err(|e| malformed(lineno + 1, format!("bad mpr index: {e}")))?;
            pairs.push((oct, mpr));
        }
        if pairs.is_empty() {
            return Err(VolIoError::NoReferences {
                path: path.to_path_buf(),
            });
        }
        Self::new(pairs)
    }

    pub fn save(&self, path: &Path) -> Result<(), VolIoError> {
        let mut out = String::from("oct_index,mpr_index\n");
        for &(o, m) in &self.pairs {
            out.push_str(&format!("{o},{m}\n"));
        }
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            }
        }
        fs::write(path, out).map_err(|e| io_err(path, e))
    }
}
