//! Report file emission: CSV tables and 8-bit PGM heatmaps.
//!
//! All numeric fields use fixed 6-decimal formatting so report files are
//! diff-able across runs.

use std::fs;
use std::path::Path;

use crate::error::Result;
use crate::selection::Selection;
use crate::stats::SimilarityCurve;

pub fn format_value(v: f64) -> String {
    format!("{v:.6}")
}

/// Overlap matrix as CSV with language row/column labels.
pub fn write_overlap_csv(languages: &[String], matrix: &[Vec<f64>], path: &Path) -> Result<()> {
    let mut out = String::from("language");
    for lang in languages {
        out.push(',');
        out.push_str(lang);
    }
    out.push('\n');
    for (i, row) in matrix.iter().enumerate() {
        out.push_str(&languages[i]);
        for &v in row {
            out.push(',');
            out.push_str(&format_value(v));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Per-layer similarity curves, one row per layer, one column per language.
pub fn write_curves_csv(curves: &[SimilarityCurve], path: &Path) -> Result<()> {
    let mut out = String::from("layer");
    for curve in curves {
        out.push(',');
        out.push_str(&curve.language);
    }
    out.push('\n');
    let n_layers = curves.first().map_or(0, |c| c.values.len());
    for l in 0..n_layers {
        out.push_str(&l.to_string());
        for curve in curves {
            out.push(',');
            out.push_str(&format_value(curve.values[l]));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Region-average table: language, shallow, middle, deep, avg.
pub fn write_region_table_csv(
    rows: &[(String, f64, f64, f64)],
    path: &Path,
) -> Result<()> {
    let mut out = String::from("language,shallow,middle,deep,avg\n");
    for (lang, s, m, d) in rows {
        let avg = (s + m + d) / 3.0;
        out.push_str(&format!(
            "{lang},{},{},{},{}\n",
            format_value(*s),
            format_value(*m),
            format_value(*d),
            format_value(avg)
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Binary 8-bit PGM (P5) with one gray level per 1/255 of value; values are
/// clamped to [0, 1].
pub fn write_pgm(values: &[Vec<f64>], path: &Path) -> Result<()> {
    let height = values.len();
    let width = values.first().map_or(0, |r| r.len());
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    for row in values {
        for &v in row {
            let gray = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            out.push(gray);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Selection heatmap: one row per expert index, one column per layer;
/// selected cells are white.
pub fn write_selection_pgm(
    selection: &Selection,
    n_layers: usize,
    n_experts: usize,
    path: &Path,
) -> Result<()> {
    let mut grid = vec![vec![0.0; n_layers]; n_experts];
    for e in &selection.experts {
        grid[e.expert][e.layer] = 1.0;
    }
    write_pgm(&grid, path)
}

/// Per-step loss history.
pub fn write_loss_csv(history: &[f64], path: &Path) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for (i, loss) in history.iter().enumerate() {
        out.push_str(&format!("{i},{}\n", format_value(*loss)));
    }
    fs::write(path, out)?;
    Ok(())
}
