//! Square-cell grid over a local equirectangular projection.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{AccidentRecord, Label};
use crate::error::{Error, Result};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;
pub const DEFAULT_CELL_SIZE_M: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellIndex {
    pub col: u32,
    pub row: u32,
}

impl CellIndex {
    pub fn new(col: u32, row: u32) -> Self {
        Self { col, row }
    }
}

/// Grid geometry. `x` grows east and `y` grows north; row 0 is the southern
/// edge. Cells are half-open: `[k*s, (k+1)*s)` from the origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// South-west corner.
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub cell_size_m: f64,
    pub columns: u32,
    pub rows: u32,
    /// Projection reference (bounding-box centre).
    pub ref_lat: f64,
    pub ref_lon: f64,
    pub earth_radius_m: f64,
    /// Projected coordinates of the origin.
    pub origin_x_m: f64,
    pub origin_y_m: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub index: CellIndex,
    pub center_lat: f64,
    pub center_lon: f64,
    /// Number of accidents mapped into the cell.
    pub safety_score: u32,
    pub label: Option<Label>,
}

impl GridSpec {
    /// Smallest grid anchored at the bounding-box minimum that contains every
    /// point `(lat, lon)`.
    pub fn covering(points: &[(f64, f64)], cell_size_m: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::NoRecords);
        }
        if !(cell_size_m > 0.0 && cell_size_m.is_finite()) {
            return Err(Error::Config(format!("cell size must be positive, got {cell_size_m}")));
        }
        let (mut lat_min, mut lat_max) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut lon_min, mut lon_max) = (f64::INFINITY, f64::NEG_INFINITY);
        for &(lat, lon) in points {
            lat_min = lat_min.min(lat);
            lat_max = lat_max.max(lat);
            lon_min = lon_min.min(lon);
            lon_max = lon_max.max(lon);
        }
        let mut grid = GridSpec {
            origin_lat: 0.0,
            origin_lon: 0.0,
            cell_size_m,
            columns: 1,
            rows: 1,
            ref_lat: 0.5 * (lat_min + lat_max),
            ref_lon: 0.5 * (lon_min + lon_max),
            earth_radius_m: EARTH_RADIUS_M,
            origin_x_m: 0.0,
            origin_y_m: 0.0,
        };
        let (mut x_min, mut y_min) = (f64::INFINITY, f64::INFINITY);
        let (mut x_max, mut y_max) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &(lat, lon) in points {
            let (x, y) = grid.project(lat, lon);
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
        grid.origin_x_m = x_min;
        grid.origin_y_m = y_min;
        let (olat, olon) = grid.unproject(x_min, y_min);
        grid.origin_lat = olat;
        grid.origin_lon = olon;
        let cols = ((x_max - x_min) / cell_size_m).floor() as u64 + 1;
        let rows = ((y_max - y_min) / cell_size_m).floor() as u64 + 1;
        grid.columns = u32::try_from(cols).map_err(|_| Error::Data("grid too wide".into()))?;
        grid.rows = u32::try_from(rows).map_err(|_| Error::Data("grid too tall".into()))?;
        Ok(grid)
    }

    pub fn cell_count(&self) -> usize {
        self.columns as usize * self.rows as usize
    }

    /// Local equirectangular projection about `(ref_lat, ref_lon)`, metres.
    pub fn project(&self, lat: f64, lon: f64) -> (f64, f64) {
        let r = self.earth_radius_m;
        let x = r * (lon - self.ref_lon) * PI / 180.0 * (self.ref_lat * PI / 180.0).cos();
        let y = r * (lat - self.ref_lat) * PI / 180.0;
        (x, y)
    }

    pub fn unproject(&self, x: f64, y: f64) -> (f64, f64) {
        let r = self.earth_radius_m;
        let lat = self.ref_lat + y / r * 180.0 / PI;
        let lon = self.ref_lon + x / (r * (self.ref_lat * PI / 180.0).cos()) * 180.0 / PI;
        (lat, lon)
    }

    /// Cell holding projected point `(x, y)`, by the floor convention.
    pub fn cell_of_xy(&self, x: f64, y: f64) -> Option<CellIndex> {
        let cx = ((x - self.origin_x_m) / self.cell_size_m).floor();
        let cy = ((y - self.origin_y_m) / self.cell_size_m).floor();
        if cx < 0.0 || cy < 0.0 || cx >= self.columns as f64 || cy >= self.rows as f64 {
            return None;
        }
        Some(CellIndex::new(cx as u32, cy as u32))
    }

    pub fn cell_of(&self, lat: f64, lon: f64) -> Option<CellIndex> {
        let (x, y) = self.project(lat, lon);
        self.cell_of_xy(x, y)
    }

    pub fn cell_center(&self, idx: CellIndex) -> (f64, f64) {
        let x = self.origin_x_m + (idx.col as f64 + 0.5) * self.cell_size_m;
        let y = self.origin_y_m + (idx.row as f64 + 0.5) * self.cell_size_m;
        self.unproject(x, y)
    }

    /// Row-major position of `idx` (row 0 first).
    pub fn linear_index(&self, idx: CellIndex) -> usize {
        idx.row as usize * self.columns as usize + idx.col as usize
    }

    pub fn indices(&self) -> impl Iterator<Item = CellIndex> + '_ {
        (0..self.rows).flat_map(move |row| (0..self.columns).map(move |col| CellIndex::new(col, row)))
    }
}

/// Fits a grid to `records` and maps each record to its cell.
pub fn build_grid(records: &[AccidentRecord], cell_size_m: f64) -> Result<(GridSpec, Vec<CellIndex>)> {
    let points: Vec<(f64, f64)> = records.iter().map(|r| (r.latitude, r.longitude)).collect();
    let grid = GridSpec::covering(&points, cell_size_m)?;
    let cells = points
        .iter()
        .map(|&(lat, lon)| {
            grid.cell_of(lat, lon)
                .ok_or_else(|| Error::Data(format!("point ({lat}, {lon}) falls outside its own grid")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((grid, cells))
}

/// Counts records per cell. Every cell of the grid is returned, row-major,
/// including those with no accidents.
pub fn score_cells(grid: &GridSpec, assignment: &[CellIndex]) -> Result<Vec<Cell>> {
    let mut counts = vec![0u32; grid.cell_count()];
    for &idx in assignment {
        if idx.col >= grid.columns || idx.row >= grid.rows {
            return Err(Error::Data(format!("cell {idx:?} is outside the grid")));
        }
        counts[grid.linear_index(idx)] += 1;
    }
    Ok(grid
        .indices()
        .zip(counts)
        .map(|(index, safety_score)| {
            let (center_lat, center_lon) = grid.cell_center(index);
            Cell {
                index,
                center_lat,
                center_lon,
                safety_score,
                label: None,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_is_one_cell() {
        let g = GridSpec::covering(&[(51.5, -0.1)], 30.0).unwrap();
        assert_eq!((g.columns, g.rows), (1, 1));
        assert_eq!(g.cell_of(51.5, -0.1), Some(CellIndex::new(0, 0)));
    }

    #[test]
    fn two_points_45m_apart() {
        let g = GridSpec::covering(&[(0.0, 0.0), (0.0, 0.000404)], 30.0).unwrap();
        let (x0, _) = g.project(0.0, 0.0);
        let (x1, _) = g.project(0.0, 0.000404);
        assert!((x1 - x0 - 44.92).abs() < 0.01, "{}", x1 - x0);
        assert_eq!(g.cell_of(0.0, 0.0), Some(CellIndex::new(0, 0)));
        assert_eq!(g.cell_of(0.0, 0.000404), Some(CellIndex::new(1, 0)));
        assert_eq!((g.columns, g.rows), (2, 1));
    }

    #[test]
    fn boundary_goes_to_next_cell() {
        let mut g = GridSpec::covering(&[(0.0, 0.0)], 30.0).unwrap();
        g.columns = 3;
        g.origin_x_m = 0.0;
        g.origin_y_m = 0.0;
        assert_eq!(g.cell_of_xy(30.0, 0.0), Some(CellIndex::new(1, 0)));
        assert_eq!(g.cell_of_xy(29.999, 0.0), Some(CellIndex::new(0, 0)));
        assert_eq!(g.cell_of_xy(-0.001, 0.0), None);
    }

    #[test]
    fn rejects_bad_cell_size() {
        assert!(GridSpec::covering(&[(0.0, 0.0)], 0.0).is_err());
        assert!(GridSpec::covering(&[], 30.0).is_err());
    }

    #[test]
    fn centers_invert_projection() {
        let pts = [(51.50, -0.12), (51.51, -0.10)];
        let g = GridSpec::covering(&pts, 30.0).unwrap();
        for idx in [CellIndex::new(0, 0), CellIndex::new(g.columns - 1, g.rows - 1)] {
            let (lat, lon) = g.cell_center(idx);
            assert_eq!(g.cell_of(lat, lon), Some(idx));
        }
    }

    #[test]
    fn five_records_one_cell() {
        let g = GridSpec::covering(&[(0.0, 0.0), (0.0, 0.001)], 30.0).unwrap();
        let assign = vec![CellIndex::new(2, 0); 5];
        let cells = score_cells(&g, &assign).unwrap();
        assert_eq!(cells.len(), g.cell_count());
        for c in &cells {
            let want = if c.index == CellIndex::new(2, 0) { 5 } else { 0 };
            assert_eq!(c.safety_score, want);
        }
    }
}
