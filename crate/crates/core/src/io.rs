//! Text formats: point patterns (`x,y,z,w1,...,wp`), empirical curves
//! (`r,value,pairs`) and plain-text covariate rasters.
//!
//! Floats are written in shortest round-trip form, so a pattern read back
//! from its own output is bit-identical.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::estimators::EmpiricalCurve;
use crate::geometry::{PointPattern, Window};

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse { line, message: format!("{other:?}") },
    }
}

pub fn write_pattern_csv<W: Write>(pattern: &PointPattern, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["x".to_string(), "y".to_string(), "z".to_string()];
    header.extend((1..=pattern.dim()).map(|k| format!("w{k}")));
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..pattern.len() {
        let mut row = vec![
            pattern.locations[i][0].to_string(),
            pattern.locations[i][1].to_string(),
            pattern.marks[i].to_string(),
        ];
        row.extend(pattern.covariate(i).iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_field(s: &str, line: usize, name: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::Parse { line, message: format!("column {name}: '{s}' is not a number") })?;
    if !v.is_finite() {
        return Err(Error::Parse { line, message: format!("column {name} is not finite") });
    }
    Ok(v)
}

/// Reads `x,y,z,w1,...,wp`. Without an explicit window the bounding box of
/// the locations is used.
pub fn read_pattern_csv<R: Read>(input: R, window: Option<Window>) -> Result<PointPattern> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let p = header.len().saturating_sub(3);
    let expected: Vec<String> = ["x", "y", "z"]
        .iter()
        .map(|s| s.to_string())
        .chain((1..=p).map(|k| format!("w{k}")))
        .collect();
    if p == 0 || header != expected {
        return Err(Error::Parse { line: 1, message: format!("expected header {}", expected.join(",")) });
    }
    let (mut locs, mut marks, mut covs) = (Vec::new(), Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != header.len() {
            return Err(Error::Parse { line, message: format!("expected {} fields, got {}", header.len(), rec.len()) });
        }
        let vals: Vec<f64> =
            rec.iter().zip(&header).map(|(s, h)| parse_field(s, line, h)).collect::<Result<_>>()?;
        locs.push([vals[0], vals[1]]);
        marks.push(vals[2]);
        covs.push(vals[3..].to_vec());
    }
    let window = match window {
        Some(w) => w,
        None => bounding_box(&locs)?,
    };
    PointPattern::new(window, locs, marks, covs)
}

fn bounding_box(locs: &[[f64; 2]]) -> Result<Window> {
    if locs.is_empty() {
        return Err(Error::Config("empty pattern and no window given".into()));
    }
    log::warn!("no window supplied; using the bounding box of the points");
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in locs {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    Window::new(x0, x1, y0, y1)
}

pub fn write_curve_csv<W: Write>(curve: &EmpiricalCurve, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["r", "value", "pairs"]).map_err(csv_err)?;
    for k in 0..curve.len() {
        w.write_record([curve.lags[k].to_string(), curve.values[k].to_string(), curve.pair_count[k].to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Regular covariate raster. The text form is a header of `key value` lines
/// (`ncols`, `nrows`, `xorigin`, `yorigin`, `cellsize`) followed by `nrows`
/// rows of `ncols` whitespace-separated values, southernmost row first.
/// `(xorigin, yorigin)` is the lower-left corner of the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub ncols: usize,
    pub nrows: usize,
    pub xorigin: f64,
    pub yorigin: f64,
    pub cellsize: f64,
    /// Row-major, row 0 at the south edge.
    pub values: Vec<f64>,
}

impl Raster {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let mut header = std::collections::HashMap::new();
        for _ in 0..5 {
            let (ln, l) = lines.next().ok_or(Error::Parse { line: 0, message: "truncated raster header".into() })?;
            let mut it = l.split_whitespace();
            let (k, v) = (it.next().unwrap_or(""), it.next().unwrap_or(""));
            let v = parse_field(v, ln + 1, k)?;
            header.insert(k.to_ascii_lowercase(), (v, ln + 1));
        }
        let get = |k: &str| {
            header.get(k).copied().ok_or(Error::Parse { line: 0, message: format!("raster header lacks {k}") })
        };
        let count = |k: &str| -> Result<usize> {
            let (v, ln) = get(k)?;
            if v < 1.0 || v.fract() != 0.0 {
                return Err(Error::Parse { line: ln, message: format!("{k} must be a positive integer") });
            }
            Ok(v as usize)
        };
        let (ncols, nrows) = (count("ncols")?, count("nrows")?);
        let (cellsize, ln) = get("cellsize")?;
        if !(cellsize > 0.0) {
            return Err(Error::Parse { line: ln, message: "cellsize must be positive".into() });
        }
        let mut values = Vec::with_capacity(ncols * nrows);
        let mut rows = 0;
        for (ln, l) in lines {
            let row: Vec<f64> = l
                .split_whitespace()
                .enumerate()
                .map(|(c, s)| parse_field(s, ln + 1, &format!("col {}", c + 1)))
                .collect::<Result<_>>()?;
            if row.len() != ncols {
                return Err(Error::Parse { line: ln + 1, message: format!("expected {ncols} values, got {}", row.len()) });
            }
            values.extend(row);
            rows += 1;
        }
        if rows != nrows {
            return Err(Error::Parse { line: 0, message: format!("expected {nrows} raster rows, got {rows}") });
        }
        Ok(Self { ncols, nrows, xorigin: get("xorigin")?.0, yorigin: get("yorigin")?.0, cellsize, values })
    }

    pub fn extent(&self) -> Window {
        Window {
            xmin: self.xorigin,
            xmax: self.xorigin + self.ncols as f64 * self.cellsize,
            ymin: self.yorigin,
            ymax: self.yorigin + self.nrows as f64 * self.cellsize,
        }
    }

    /// Bilinear interpolation between cell centres, constant beyond the
    /// outermost centres. `None` outside the raster extent.
    pub fn sample(&self, s: [f64; 2]) -> Option<f64> {
        if !self.extent().contains(s) {
            return None;
        }
        let axis = |v: f64, o: f64, n: usize| -> (usize, f64) {
            if n == 1 {
                return (0, 0.0);
            }
            let f = ((v - o) / self.cellsize - 0.5).clamp(0.0, (n - 1) as f64);
            let i = (f.floor() as usize).min(n - 2);
            (i, f - i as f64)
        };
        let (c, tx) = axis(s[0], self.xorigin, self.ncols);
        let (r, ty) = axis(s[1], self.yorigin, self.nrows);
        let at = |r: usize, c: usize| self.values[r.min(self.nrows - 1) * self.ncols + c.min(self.ncols - 1)];
        let lo = at(r, c) * (1.0 - tx) + at(r, c + 1) * tx;
        let hi = at(r + 1, c) * (1.0 - tx) + at(r + 1, c + 1) * tx;
        Some(lo * (1.0 - ty) + hi * ty)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pattern_round_trip_is_exact() {
        let w = Window::square(1.0);
        let p = PointPattern::new(
            w,
            vec![[0.1, 0.2], [1.0 / 3.0, 0.7], [0.999, 1e-9]],
            vec![1.25, -0.1 + 0.2, 3.0],
            vec![vec![1.0, 0.1], vec![1.0, -2.0 / 7.0], vec![1.0, 0.0]],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_pattern_csv(&p, &mut buf).unwrap();
        assert!(buf.starts_with(b"x,y,z,w1,w2\n"));
        let q = read_pattern_csv(&buf[..], Some(w)).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn malformed_rows_report_line() {
        let text = "x,y,z,w1\n0.1,0.2,1,1\n0.3,abc,1,1\n";
        match read_pattern_csv(text.as_bytes(), Some(Window::square(1.0))) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(read_pattern_csv("a,b\n1,2\n".as_bytes(), None).is_err());
    }

    #[test]
    fn raster_parse_and_sample() {
        let text = "ncols 3\nnrows 2\nxorigin 0\nyorigin 0\ncellsize 1\n0 1 2\n10 11 12\n";
        let r = Raster::parse(text).unwrap();
        assert_eq!(r.sample([0.5, 0.5]), Some(0.0));
        assert_eq!(r.sample([1.5, 1.5]), Some(11.0));
        assert!((r.sample([1.0, 1.0]).unwrap() - 5.5).abs() < 1e-12);
        assert_eq!(r.sample([3.5, 0.5]), None);
        assert!(Raster::parse("ncols 3\nnrows 2\nxorigin 0\nyorigin 0\ncellsize 1\n0 1 2\n").is_err());
    }
}
