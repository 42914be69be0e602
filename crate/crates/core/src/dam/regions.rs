use serde::{Deserialize, Serialize};

use super::{SchemeKind, SubregionScheme};
use crate::error::{Error, Result};
use crate::tensor::Rect;

/// One subregion of the conv-2 map and the scheme that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub rect: Rect,
    pub kind: SchemeKind,
    /// Position within its own scheme.
    pub index: usize,
}

/// Start of part `i` of `parts` over `len` cells (proportional rounding down).
fn cut(i: usize, len: usize, parts: usize) -> usize {
    i * len / parts
}

fn exact_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

/// Splits an `h x w` map into the regions of every scheme, schemes ordered
/// HS, VS, SQ. Within a scheme the regions are disjoint and tile the map;
/// SQ blocks are listed row by row.
pub fn partition_regions(map_hw: (usize, usize), schemes: &[SubregionScheme]) -> Result<Vec<Region>> {
    let (h, w) = map_hw;
    if schemes.is_empty() {
        return Err(Error::Config("at least one subregion scheme is required".into()));
    }
    let mut ordered = schemes.to_vec();
    ordered.sort_by_key(|s| s.kind);
    let mut regions = Vec::new();
    for s in ordered {
        let n = s.count;
        if n == 0 {
            return Err(Error::Config(format!("{:?} needs at least one region", s.kind)));
        }
        match s.kind {
            SchemeKind::HS => {
                if h < n {
                    return Err(Error::Config(format!(
                        "HS with N={n} needs height >= {n}, map is {h}x{w}"
                    )));
                }
                for i in 0..n {
                    let (y0, y1) = (cut(i, h, n), cut(i + 1, h, n));
                    regions.push(Region {
                        rect: Rect::new(y0, 0, y1 - y0, w),
                        kind: s.kind,
                        index: i,
                    });
                }
            }
            SchemeKind::VS => {
                if w < n {
                    return Err(Error::Config(format!(
                        "VS with N={n} needs width >= {n}, map is {h}x{w}"
                    )));
                }
                for i in 0..n {
                    let (x0, x1) = (cut(i, w, n), cut(i + 1, w, n));
                    regions.push(Region {
                        rect: Rect::new(0, x0, h, x1 - x0),
                        kind: s.kind,
                        index: i,
                    });
                }
            }
            SchemeKind::SQ => {
                let r = exact_sqrt(n).ok_or_else(|| Error::Config(format!("SQ needs a perfect-square N, got {n}")))?;
                if h < r || w < r {
                    return Err(Error::Config(format!(
                        "SQ with N={n} needs a map of at least {r}x{r}, got {h}x{w}"
                    )));
                }
                for by in 0..r {
                    for bx in 0..r {
                        let (y0, y1) = (cut(by, h, r), cut(by + 1, h, r));
                        let (x0, x1) = (cut(bx, w, r), cut(bx + 1, w, r));
                        regions.push(Region {
                            rect: Rect::new(y0, x0, y1 - y0, x1 - x0),
                            kind: s.kind,
                            index: by * r + bx,
                        });
                    }
                }
            }
        }
    }
    Ok(regions)
}

/// Index of the region whose most likely class is most probable. Ties go to
/// the lowest index.
pub fn select_region<P: AsRef<[f64]>>(probs: &[P]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in probs.iter().enumerate() {
        let score = p.as_ref().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((i, score));
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| Error::Data("select_region needs at least one region".into()))
}
