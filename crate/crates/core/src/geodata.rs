//! Raster ingestion and the per-cell location table.
//!
//! Rasters are ESRI ASCII grids. Row 0 is the northern edge; cell `(r, c)`
//! covers `[x0 + c·h, x0 + (c+1)·h] × [ytop − (r+1)·h, ytop − r·h]`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

pub const DEFAULT_NODATA: f64 = -9999.0;

/// Damage levels at or above this value count as severe.
pub const SEVERE_LEVEL: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    pub ncols: usize,
    pub nrows: usize,
    pub xllcorner: f64,
    pub yllcorner: f64,
    pub cellsize: f64,
}

impl GridGeometry {
    pub fn len(&self) -> usize {
        self.ncols * self.nrows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x_max(&self) -> f64 {
        self.xllcorner + self.ncols as f64 * self.cellsize
    }

    pub fn y_max(&self) -> f64 {
        self.yllcorner + self.nrows as f64 * self.cellsize
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.xllcorner + (col as f64 + 0.5) * self.cellsize,
            self.y_max() - (row as f64 + 0.5) * self.cellsize,
        )
    }

    /// Cell containing the point, if any.
    pub fn cell_at(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fc = (x - self.xllcorner) / self.cellsize;
        let fr = (self.y_max() - y) / self.cellsize;
        if !(fc >= 0.0 && fr >= 0.0) {
            return None;
        }
        let (c, r) = (fc.floor() as usize, fr.floor() as usize);
        (c < self.ncols && r < self.nrows).then_some((r, c))
    }

    pub fn overlaps(&self, other: &GridGeometry) -> bool {
        self.xllcorner < other.x_max()
            && other.xllcorner < self.x_max()
            && self.yllcorner < other.y_max()
            && other.yllcorner < self.y_max()
    }
}

/// A rectangular raster layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRaster {
    pub ncols: usize,
    pub nrows: usize,
    pub xllcorner: f64,
    pub yllcorner: f64,
    pub cellsize: f64,
    pub nodata_value: f64,
    /// Row-major, northern row first.
    pub values: Vec<f64>,
}

impl GridRaster {
    pub fn new(geometry: GridGeometry, nodata_value: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != geometry.len() {
            return Err(Error::invalid(format!(
                "raster has {} values for {}x{} cells",
                values.len(),
                geometry.nrows,
                geometry.ncols
            )));
        }
        if !(geometry.cellsize > 0.0) {
            return Err(Error::invalid(format!("cellsize must be positive, got {}", geometry.cellsize)));
        }
        Ok(GridRaster {
            ncols: geometry.ncols,
            nrows: geometry.nrows,
            xllcorner: geometry.xllcorner,
            yllcorner: geometry.yllcorner,
            cellsize: geometry.cellsize,
            nodata_value,
            values,
        })
    }

    pub fn filled(geometry: GridGeometry, nodata_value: f64, value: f64) -> Self {
        GridRaster {
            ncols: geometry.ncols,
            nrows: geometry.nrows,
            xllcorner: geometry.xllcorner,
            yllcorner: geometry.yllcorner,
            cellsize: geometry.cellsize,
            nodata_value,
            values: vec![value; geometry.len()],
        }
    }

    pub fn geometry(&self) -> GridGeometry {
        GridGeometry {
            ncols: self.ncols,
            nrows: self.nrows,
            xllcorner: self.xllcorner,
            yllcorner: self.yllcorner,
            cellsize: self.cellsize,
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.ncols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[row * self.ncols + col] = value;
    }

    pub fn is_nodata(&self, v: f64) -> bool {
        v == self.nodata_value || (v.is_nan() && self.nodata_value.is_nan())
    }

    /// Cell value, `None` for NODATA.
    pub fn value(&self, row: usize, col: usize) -> Option<f64> {
        let v = self.get(row, col);
        (!self.is_nodata(v)).then_some(v)
    }
}

const HEADER_KEYS: [&str; 8] = [
    "ncols",
    "nrows",
    "xllcorner",
    "yllcorner",
    "xllcenter",
    "yllcenter",
    "cellsize",
    "nodata_value",
];

pub fn parse_ascii_grid(text: &str) -> Result<GridRaster> {
    let mut header: BTreeMap<String, (usize, String)> = BTreeMap::new();
    let mut lines = text.lines().enumerate().peekable();
    while let Some(&(idx, line)) = lines.peek() {
        let mut tokens = line.split_whitespace();
        let Some(key) = tokens.next() else {
            lines.next();
            continue;
        };
        let key = key.to_ascii_lowercase();
        if !HEADER_KEYS.contains(&key.as_str()) {
            break;
        }
        let value = tokens
            .next()
            .ok_or_else(|| Error::parse(idx + 1, format!("header key {key} has no value")))?;
        if tokens.next().is_some() {
            return Err(Error::parse(idx + 1, format!("trailing tokens after {key}")));
        }
        header.insert(key, (idx + 1, value.to_string()));
        lines.next();
    }

    let header_line = |key: &str| header.get(key).map(|(l, _)| *l).unwrap_or(1);
    let get_usize = |key: &str| -> Result<usize> {
        let (line, v) = header
            .get(key)
            .ok_or_else(|| Error::parse(1, format!("missing header key {}", key.to_uppercase())))?;
        v.parse::<usize>()
            .map_err(|_| Error::parse(*line, format!("{} is not a non-negative integer: {v}", key.to_uppercase())))
    };
    let get_f64 = |key: &str| -> Result<Option<f64>> {
        match header.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse::<f64>()
                .map(Some)
                .map_err(|_| Error::parse(*line, format!("{} is not a number: {v}", key.to_uppercase()))),
        }
    };

    let ncols = get_usize("ncols")?;
    let nrows = get_usize("nrows")?;
    let cellsize = get_f64("cellsize")?.ok_or_else(|| Error::parse(1, "missing header key CELLSIZE"))?;
    if !(cellsize > 0.0) {
        return Err(Error::parse(header_line("cellsize"), format!("CELLSIZE must be positive, got {cellsize}")));
    }
    let corner = |corner_key: &str, center_key: &str| -> Result<f64> {
        match (get_f64(corner_key)?, get_f64(center_key)?) {
            (Some(v), None) => Ok(v),
            (None, Some(v)) => Ok(v - 0.5 * cellsize),
            (Some(_), Some(_)) => Err(Error::parse(
                header_line(center_key),
                format!("both {} and {} given", corner_key.to_uppercase(), center_key.to_uppercase()),
            )),
            (None, None) => Err(Error::parse(1, format!("missing header key {}", corner_key.to_uppercase()))),
        }
    };
    let xllcorner = corner("xllcorner", "xllcenter")?;
    let yllcorner = corner("yllcorner", "yllcenter")?;
    let nodata_value = get_f64("nodata_value")?.unwrap_or(DEFAULT_NODATA);

    let expected = ncols * nrows;
    let mut values = Vec::with_capacity(expected);
    let mut last_line = header.values().map(|(l, _)| *l).max().unwrap_or(0);
    for (idx, line) in lines {
        last_line = idx + 1;
        for token in line.split_whitespace() {
            let v = token
                .parse::<f64>()
                .map_err(|_| Error::parse(idx + 1, format!("non-numeric value {token:?}")))?;
            if values.len() == expected {
                return Err(Error::parse(idx + 1, format!("more than {expected} values")));
            }
            values.push(v);
        }
    }
    if values.len() != expected {
        return Err(Error::parse(
            last_line,
            format!("expected {expected} values ({nrows} rows x {ncols} cols), found {}", values.len()),
        ));
    }
    Ok(GridRaster {
        ncols,
        nrows,
        xllcorner,
        yllcorner,
        cellsize,
        nodata_value,
        values,
    })
}

pub fn read_ascii_grid(path: impl AsRef<Path>) -> Result<GridRaster> {
    let text = fs::read_to_string(path.as_ref())?;
    parse_ascii_grid(&text)
}

/// Shortest representation that parses back to the same bits.
fn fmt_value(v: f64) -> String {
    format!("{v:?}")
}

pub fn format_ascii_grid(raster: &GridRaster) -> String {
    let mut out = String::with_capacity(raster.values.len() * 8 + 128);
    let _ = writeln!(out, "NCOLS {}", raster.ncols);
    let _ = writeln!(out, "NROWS {}", raster.nrows);
    let _ = writeln!(out, "XLLCORNER {}", fmt_value(raster.xllcorner));
    let _ = writeln!(out, "YLLCORNER {}", fmt_value(raster.yllcorner));
    let _ = writeln!(out, "CELLSIZE {}", fmt_value(raster.cellsize));
    let _ = writeln!(out, "NODATA_VALUE {}", fmt_value(raster.nodata_value));
    for row in raster.values.chunks(raster.ncols.max(1)) {
        let mut first = true;
        for v in row {
            if !first {
                out.push(' ');
            }
            first = false;
            out.push_str(&fmt_value(*v));
        }
        out.push('\n');
    }
    out
}

pub fn write_ascii_grid(raster: &GridRaster, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path.as_ref())?;
    f.write_all(format_ascii_grid(raster).as_bytes())?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resampling {
    Nearest,
    Bilinear,
}

/// Resamples `src` onto the geometry of `target`; target values are ignored.
pub fn resample_to_grid(src: &GridRaster, target: &GridRaster, method: Resampling) -> Result<GridRaster> {
    let sg = src.geometry();
    let tg = target.geometry();
    if !sg.overlaps(&tg) {
        return Err(Error::Geometry("source and target extents are disjoint".into()));
    }
    let nodata = src.nodata_value;
    let mut out = GridRaster::filled(tg, nodata, nodata);
    for r in 0..tg.nrows {
        for c in 0..tg.ncols {
            let (x, y) = tg.cell_center(r, c);
            let v = match method {
                Resampling::Nearest => sg.cell_at(x, y).and_then(|(sr, sc)| src.value(sr, sc)),
                Resampling::Bilinear => {
                    if sg.cell_at(x, y).is_none() {
                        None
                    } else {
                        bilinear(src, x, y)
                    }
                }
            };
            out.set(r, c, v.unwrap_or(nodata));
        }
    }
    Ok(out)
}

/// Interpolates on the lattice of cell centers, clamping at the outer
/// half-cell border. Any NODATA neighbor yields `None`.
fn bilinear(src: &GridRaster, x: f64, y: f64) -> Option<f64> {
    let g = src.geometry();
    let fx = ((x - g.xllcorner) / g.cellsize - 0.5).clamp(0.0, (g.ncols - 1) as f64);
    let fy = ((g.y_max() - y) / g.cellsize - 0.5).clamp(0.0, (g.nrows - 1) as f64);
    let c0 = fx.floor() as usize;
    let r0 = fy.floor() as usize;
    let c1 = (c0 + 1).min(g.ncols - 1);
    let r1 = (r0 + 1).min(g.nrows - 1);
    let tx = fx - c0 as f64;
    let ty = fy - r0 as f64;
    let v00 = src.value(r0, c0)?;
    let v01 = src.value(r0, c1)?;
    let v10 = src.value(r1, c0)?;
    let v11 = src.value(r1, c1)?;
    let top = v00 + (v01 - v00) * tx;
    let bottom = v10 + (v11 - v10) * tx;
    Some(top + (bottom - top) * ty)
}

/// One DPM cell with aligned inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocationRecord {
    pub row: usize,
    pub col: usize,
    /// DPM value, strictly positive.
    pub y: f64,
    /// Wind prior on the log scale.
    pub a_w: f64,
    /// Flood prior on the log scale.
    pub a_f: f64,
    pub has_footprint: bool,
    /// Binarized damage label, only where a footprint exists.
    pub label: Option<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocationTable {
    pub geometry: GridGeometry,
    pub records: Vec<LocationRecord>,
}

impl LocationTable {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn footprint_count(&self) -> usize {
        self.records.iter().filter(|r| r.has_footprint).count()
    }

    /// Writes `row,col,y,a_w,a_f,footprint,label`.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("row,col,y,a_w,a_f,footprint,label\n");
        for r in &self.records {
            let label = r.label.map(|l| l.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.row,
                r.col,
                fmt_value(r.y),
                fmt_value(r.a_w),
                fmt_value(r.a_f),
                u8::from(r.has_footprint),
                label
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

fn smallest_positive(raster: &GridRaster) -> Option<f64> {
    raster
        .values
        .iter()
        .copied()
        .filter(|v| !raster.is_nodata(*v) && *v > 0.0 && v.is_finite())
        .min_by(|a, b| a.total_cmp(b))
}

/// Joins aligned layers into one record per DPM cell where DPM, flood and
/// wind are all valid. Zero DPM values are floored at `10⁻³` times the
/// smallest positive DPM value; hazard intensities enter as logs, floored
/// the same way per layer.
pub fn build_location_table(
    dpm: &GridRaster,
    flood: &GridRaster,
    wind: &GridRaster,
    footprint: Option<&GridRaster>,
) -> Result<LocationTable> {
    let geometry = dpm.geometry();
    for (name, layer) in [("flood", Some(flood)), ("wind", Some(wind)), ("footprint", footprint)] {
        if let Some(layer) = layer {
            if layer.geometry() != geometry {
                return Err(Error::Geometry(format!("{name} layer is not on the DPM grid")));
            }
        }
    }
    let floor = |layer: &GridRaster| smallest_positive(layer).map(|v| 1e-3 * v);
    let y_floor = floor(dpm);
    let flood_floor = floor(flood).unwrap_or(f64::MIN_POSITIVE);
    let wind_floor = floor(wind).unwrap_or(f64::MIN_POSITIVE);

    let mut records = Vec::new();
    for row in 0..geometry.nrows {
        for col in 0..geometry.ncols {
            let (Some(y), Some(f), Some(w)) = (dpm.value(row, col), flood.value(row, col), wind.value(row, col))
            else {
                continue;
            };
            if !(y.is_finite() && f.is_finite() && w.is_finite()) {
                continue;
            }
            let y = if y > 0.0 {
                y
            } else {
                y_floor.ok_or_else(|| Error::Data("DPM has no positive value to floor against".into()))?
            };
            let has_footprint = footprint
                .and_then(|fp| fp.value(row, col))
                .is_some_and(|v| v > 0.0);
            records.push(LocationRecord {
                row,
                col,
                y,
                a_w: w.max(wind_floor).ln(),
                a_f: f.max(flood_floor).ln(),
                has_footprint,
                label: None,
            });
        }
    }
    Ok(LocationTable { geometry, records })
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct LabelRow {
    pub lat: f64,
    pub lon: f64,
    pub level: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct JoinReport {
    pub joined: usize,
    pub out_of_extent: usize,
    /// Inside the grid but on a cell without a table record or footprint.
    pub unmatched: usize,
}

pub fn read_labels_csv(path: impl AsRef<Path>) -> Result<Vec<LabelRow>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path.as_ref())?;
    let mut rows = Vec::new();
    for (i, row) in reader.deserialize::<LabelRow>().enumerate() {
        let row = row?;
        if row.level > 4 {
            return Err(Error::parse(i + 2, format!("damage level {} outside 0..=4", row.level)));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn binarize_level(level: u8) -> u8 {
    u8::from(level >= SEVERE_LEVEL)
}

/// Assigns each building to its containing cell; several buildings in one
/// cell aggregate by their maximum level.
pub fn join_label_rows(table: &mut LocationTable, labels: &[LabelRow]) -> JoinReport {
    let mut report = JoinReport::default();
    let mut per_cell: BTreeMap<(usize, usize), u8> = BTreeMap::new();
    for l in labels {
        match table.geometry.cell_at(l.lon, l.lat) {
            None => report.out_of_extent += 1,
            Some(cell) => {
                let e = per_cell.entry(cell).or_insert(0);
                *e = (*e).max(l.level);
            }
        }
    }
    for r in table.records.iter_mut() {
        r.label = None;
    }
    let index: BTreeMap<(usize, usize), usize> = table
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| ((r.row, r.col), i))
        .collect();
    for (cell, level) in per_cell {
        match index.get(&cell) {
            Some(&i) if table.records[i].has_footprint => {
                table.records[i].label = Some(binarize_level(level));
                report.joined += 1;
            }
            _ => report.unmatched += 1,
        }
    }
    report
}

pub fn join_labels(table: &mut LocationTable, labels_csv: impl AsRef<Path>) -> Result<JoinReport> {
    let rows = read_labels_csv(labels_csv)?;
    Ok(join_label_rows(table, &rows))
}

pub fn write_labels_csv(labels: &[LabelRow], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("lat,lon,level\n");
    for l in labels {
        let _ = writeln!(out, "{},{},{}", fmt_value(l.lat), fmt_value(l.lon), l.level);
    }
    fs::write(path, out)?;
    Ok(())
}
