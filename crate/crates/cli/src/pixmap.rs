//! Label-strip images as binary portable pixmaps (P6).

use anyhow::{Context, Result};
use std::fs;
use std::path::Path;

/// RGB per fine class id (healthy, calcified, lipid-rich, fibrous,
/// thrombus, stent).
const CLASS_COLORS: [[u8; 3]; 6] = [
    [190, 190, 190], // healthy: gray
    [250, 230, 60],  // calcified: yellow
    [220, 60, 60],   // lipid-rich: red
    [70, 110, 220],  // fibrous: blue
    [170, 60, 200],  // thrombus: purple
    [60, 200, 200],  // stent: cyan
];

const CELL_W: usize = 6;
const ROW_H: usize = 14;
const GAP: usize = 2;

/// Render stacked label strips (one row per named sequence) into a P6 file.
/// All rows must share one length.
pub fn write_strips(path: &Path, rows: &[(&str, &[u8])]) -> Result<()> {
    let len = rows.first().map(|(_, r)| r.len()).unwrap_or(0);
    anyhow::ensure!(len > 0, "empty strip");
    anyhow::ensure!(
        rows.iter().all(|(_, r)| r.len() == len),
        "strip rows differ in length"
    );
    let width = len * CELL_W;
    let height = rows.len() * ROW_H + rows.len().saturating_sub(1) * GAP;
    let mut pixels = vec![0u8; width * height * 3];
    for (ri, (_, labels)) in rows.iter().enumerate() {
        let y0 = ri * (ROW_H + GAP);
        for (ci, &label) in labels.iter().enumerate() {
            let color = CLASS_COLORS
                .get(label as usize)
                .copied()
                .unwrap_or([0, 0, 0]);
            for y in y0..y0 + ROW_H {
                let base = (y * width + ci * CELL_W) * 3;
                for x in 0..CELL_W {
                    pixels[base + x * 3..base + x * 3 + 3].copy_from_slice(&color);
                }
            }
        }
    }
    let mut out = Vec::with_capacity(pixels.len() + 32);
    out.extend_from_slice(format!("P6\n{width} {height}\n255\n").as_bytes());
    out.extend_from_slice(&pixels);
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}
