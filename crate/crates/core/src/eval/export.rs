use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geo::{CellIndex, GridSpec, Label};
use crate::imageio::RgbImage;

pub const DANGEROUS_RGB: [u8; 3] = [220, 50, 47];
pub const SAFE_RGB: [u8; 3] = [60, 160, 70];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellPrediction {
    pub index: CellIndex,
    pub label: Label,
    pub prob_dangerous: f64,
}

#[derive(Serialize)]
struct Row {
    col: u32,
    row: u32,
    center_lat: f64,
    center_lon: f64,
    label: Label,
    prob_dangerous: f64,
}

/// Writes `<stem>.csv` and `<stem>.ppm` (one pixel per cell, north up) and
/// returns both paths.
pub fn safety_map_export(
    grid: &GridSpec,
    predictions: &[CellPrediction],
    dir: impl AsRef<Path>,
    stem: &str,
) -> Result<(PathBuf, PathBuf)> {
    let mut by_cell = HashMap::with_capacity(predictions.len());
    for p in predictions {
        if p.index.col >= grid.columns || p.index.row >= grid.rows {
            return Err(Error::Data(format!(
                "prediction for {:?} lies outside the grid",
                p.index
            )));
        }
        if by_cell.insert(p.index, p).is_some() {
            return Err(Error::Data(format!("duplicate prediction for {:?}", p.index)));
        }
    }
    if by_cell.len() != grid.cell_count() {
        return Err(Error::Data(format!(
            "{} of {} cells have predictions",
            by_cell.len(),
            grid.cell_count()
        )));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let ppm_path = dir.join(format!("{stem}.ppm"));

    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::Data(format!("{}: {e}", csv_path.display())))?;
    let mut img = RgbImage::new(grid.columns as usize, grid.rows as usize);
    for idx in grid.indices() {
        let p = by_cell[&idx];
        let (center_lat, center_lon) = grid.cell_center(idx);
        w.serialize(Row {
            col: idx.col,
            row: idx.row,
            center_lat,
            center_lon,
            label: p.label,
            prob_dangerous: p.prob_dangerous,
        })?;
        let color = match p.label {
            Label::Safe => SAFE_RGB,
            Label::Dangerous => DANGEROUS_RGB,
        };
        img.put(idx.col as usize, (grid.rows - 1 - idx.row) as usize, color);
    }
    w.flush().map_err(|e| Error::file(&csv_path, e))?;
    img.write_ppm(&ppm_path)?;
    Ok((csv_path, ppm_path))
}
