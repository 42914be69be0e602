//! Static-map tile requests. Only URL construction and the on-disk cache
//! layout live here; nothing performs network I/O.

use std::path::PathBuf;

use super::Cell;
use crate::error::{Error, Result};

pub const STATIC_MAPS_KEY_ENV: &str = "STATIC_MAPS_KEY";
pub const STATIC_MAPS_ENDPOINT: &str = "https://maps.googleapis.com/maps/api/staticmap";
pub const MAX_ZOOM: u8 = 21;
pub const MAX_SIZE_PX: u32 = 640;

/// Where the API key comes from.
#[derive(Clone, Debug)]
pub enum KeySource {
    /// The `STATIC_MAPS_KEY` environment variable.
    Env,
    Explicit(String),
}

impl KeySource {
    pub fn resolve(&self) -> Result<String> {
        let key = match self {
            KeySource::Env => std::env::var(STATIC_MAPS_KEY_ENV).unwrap_or_default(),
            KeySource::Explicit(k) => k.clone(),
        };
        if key.trim().is_empty() {
            return Err(Error::KeyMissing {
                var: STATIC_MAPS_KEY_ENV,
            });
        }
        Ok(key)
    }
}

/// Satellite tile URL centred on the cell.
pub fn tile_url(cell: &Cell, zoom: u8, size_px: u32, key: &KeySource) -> Result<String> {
    if zoom > MAX_ZOOM {
        return Err(Error::Config(format!("zoom {zoom} outside 0..={MAX_ZOOM}")));
    }
    if size_px == 0 || size_px > MAX_SIZE_PX {
        return Err(Error::Config(format!("size {size_px} outside 1..={MAX_SIZE_PX}")));
    }
    let key = key.resolve()?;
    Ok(format!(
        "{STATIC_MAPS_ENDPOINT}?center={:.6},{:.6}&zoom={zoom}&size={size_px}x{size_px}&maptype=satellite&key={}",
        cell.center_lat,
        cell.center_lon,
        encode_component(&key)
    ))
}

/// Cache location for a downloaded tile: `z{zoom}/{size}px/{col}_{row}.png`.
pub fn tile_cache_path(cell: &Cell, zoom: u8, size_px: u32) -> PathBuf {
    PathBuf::from(format!("z{zoom}"))
        .join(format!("{size_px}px"))
        .join(format!("{}_{}.png", cell.index.col, cell.index.row))
}

fn encode_component(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || b"-_.~".contains(&b) {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::CellIndex;

    fn cell() -> Cell {
        Cell {
            index: CellIndex::new(3, 4),
            center_lat: 51.5847,
            center_lon: 0.2793,
            safety_score: 0,
            label: None,
        }
    }

    #[test]
    fn url_contents() {
        let key = KeySource::Explicit("abc 123".into());
        let url = tile_url(&cell(), 19, 400, &key).unwrap();
        assert!(url.contains("center=51.584700,0.279300"), "{url}");
        assert!(url.contains("maptype=satellite"));
        assert!(url.contains("size=400x400"));
        assert!(url.contains("zoom=19"));
        assert!(url.ends_with("key=abc%20123"));
        assert_eq!(url, tile_url(&cell(), 19, 400, &key).unwrap());
    }

    #[test]
    fn missing_key_names_the_variable() {
        let err = tile_url(&cell(), 19, 400, &KeySource::Explicit(String::new())).unwrap_err();
        assert!(matches!(err, Error::KeyMissing { .. }));
        assert!(err.to_string().contains(STATIC_MAPS_KEY_ENV));
    }

    #[test]
    fn zoom_and_size_range() {
        let key = KeySource::Explicit("k".into());
        assert!(tile_url(&cell(), 22, 400, &key).is_err());
        assert!(tile_url(&cell(), 10, 0, &key).is_err());
        assert_eq!(tile_cache_path(&cell(), 19, 400), PathBuf::from("z19/400px/3_4.png"));
    }
}
