//! Attention heatmap export: numeric rows plus optional graymaps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::Prediction;

/// Per-head rows followed by the combined row.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub heads: Vec<Vec<f64>>,
    pub combined: Vec<f64>,
}

impl Heatmap {
    pub fn from_prediction(p: &Prediction) -> Self {
        Heatmap {
            heads: p.head_weights.clone(),
            combined: p.alpha.clone(),
        }
    }

    /// One line per row, `name: w1 w2 …`, in shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let rows = self
            .heads
            .iter()
            .enumerate()
            .map(|(h, r)| (format!("head{}", h + 1), r))
            .chain(std::iter::once(("combined".to_string(), &self.combined)));
        for (name, row) in rows {
            let vals: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(s, "{name}: {}", vals.join(" "));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (_, vals) = line
                .split_once(':')
                .ok_or_else(|| Error::Data(format!("bad heatmap line `{line}`")))?;
            let row = vals
                .split_whitespace()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| Error::Data(format!("bad heatmap value `{v}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let combined = rows.pop().ok_or_else(|| Error::Data("empty heatmap".into()))?;
        Ok(Heatmap { heads: rows, combined })
    }
}

/// Side length when `k` is a perfect square.
pub fn grid_side(k: usize) -> Option<usize> {
    let s = (k as f64).sqrt().round() as usize;
    (s * s == k && k > 0).then_some(s)
}

/// Plain-text graymap of `weights` on a `side × side` grid, min-max scaled
/// to 0–255. A constant row maps to 255 everywhere.
pub fn graymap(weights: &[f64], side: usize) -> String {
    let lo = weights.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let level = |w: f64| -> u8 {
        if hi > lo {
            ((w - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            255
        }
    };
    let mut s = format!("P2\n{side} {side}\n255\n");
    for row in weights.chunks(side) {
        let cells: Vec<String> = row.iter().map(|&w| level(w).to_string()).collect();
        s.push_str(&cells.join(" "));
        s.push('\n');
    }
    s
}

/// Writes `<stem>.txt` and, for square region grids, `<stem>_head<i>.pgm`
/// per head plus `<stem>_combined.pgm`. Returns the written paths.
pub fn export_heatmap(heatmap: &Heatmap, out_dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: String, text: String| -> Result<()> {
        let p = out_dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(())
    };
    put(format!("{stem}.txt"), heatmap.to_text())?;
    if let Some(side) = grid_side(heatmap.combined.len()) {
        for (h, row) in heatmap.heads.iter().enumerate() {
            put(format!("{stem}_head{}.pgm", h + 1), graymap(row, side))?;
        }
        put(format!("{stem}_combined.pgm"), graymap(&heatmap.combined, side))?;
    }
    Ok(written)
}
