//! Rectangular observation windows, point patterns, and distance-limited pair
//! enumeration by uniform cell binning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangular observation window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

impl Window {
    pub fn new(xmin: f64, xmax: f64, ymin: f64, ymax: f64) -> Result<Self> {
        let w = Self { xmin, xmax, ymin, ymax };
        w.validate()?;
        Ok(w)
    }

    /// The square `[0, side]²`.
    pub fn square(side: f64) -> Self {
        Self { xmin: 0.0, xmax: side, ymin: 0.0, ymax: side }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.xmin, self.xmax, self.ymin, self.ymax].iter().all(|v| v.is_finite());
        if !finite || !(self.xmax > self.xmin) || !(self.ymax > self.ymin) {
            return Err(Error::InvalidParameter(format!("degenerate window {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn min_side(&self) -> f64 {
        self.width().min(self.height())
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.xmin && p[0] <= self.xmax && p[1] >= self.ymin && p[1] <= self.ymax
    }

    /// Area of `S ∩ (S + (dx, dy))` for this rectangle `S`.
    pub fn translation_overlap(&self, dx: f64, dy: f64) -> f64 {
        (self.width() - dx.abs()).max(0.0) * (self.height() - dy.abs()).max(0.0)
    }

    /// Parses `xmin,xmax,ymin,ymax`.
    pub fn parse(s: &str) -> Result<Self> {
        let v: Vec<f64> = s
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("window '{s}': {e}")))?;
        if v.len() != 4 {
            return Err(Error::Config(format!("window '{s}' needs xmin,xmax,ymin,ymax")));
        }
        Window::new(v[0], v[1], v[2], v[3])
    }
}

/// Observed locations with their marks and covariate vectors.
///
/// Covariates are stored row-major, `p` entries per point; the first entry is
/// the intercept column and is expected to be 1.
#[derive(Debug, Clone, PartialEq)]
pub struct PointPattern {
    pub window: Window,
    pub locations: Vec<[f64; 2]>,
    pub marks: Vec<f64>,
    covariates: Vec<f64>,
    p: usize,
}

impl PointPattern {
    pub fn new(
        window: Window,
        locations: Vec<[f64; 2]>,
        marks: Vec<f64>,
        covariates: Vec<Vec<f64>>,
    ) -> Result<Self> {
        window.validate()?;
        let n = locations.len();
        if marks.len() != n || covariates.len() != n {
            return Err(Error::InvalidParameter(format!(
                "pattern has {n} locations, {} marks, {} covariate rows",
                marks.len(),
                covariates.len()
            )));
        }
        let p = covariates.first().map_or(1, |r| r.len());
        if p == 0 {
            return Err(Error::InvalidParameter("covariate dimension must be ≥ 1".into()));
        }
        if let Some(i) = covariates.iter().position(|r| r.len() != p) {
            return Err(Error::InvalidParameter(format!("covariate row {i} has wrong length")));
        }
        if let Some(i) = locations.iter().position(|&s| !window.contains(s)) {
            return Err(Error::InvalidParameter(format!(
                "location {i} {:?} lies outside the window",
                locations[i]
            )));
        }
        Ok(Self { window, locations, marks, covariates: covariates.concat(), p })
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    /// Covariate dimension p.
    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn covariate(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.p..(i + 1) * self.p]
    }

    /// Marks shifted by a constant (used by invariance checks).
    pub fn with_marks(&self, marks: Vec<f64>) -> Self {
        assert_eq!(marks.len(), self.len());
        Self { marks, ..self.clone() }
    }

    /// Residuals `Z(s) − w(s)ᵀβ`.
    pub fn residuals(&self, beta: &[f64]) -> Vec<f64> {
        assert_eq!(beta.len(), self.p, "coefficient length must match covariate dimension");
        (0..self.len())
            .map(|i| {
                let fit: f64 = self.covariate(i).iter().zip(beta).map(|(w, b)| w * b).sum();
                self.marks[i] - fit
            })
            .collect()
    }
}

/// Unordered pair `(i, j)`, `i < j`, with its Euclidean distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair {
    pub i: u32,
    pub j: u32,
    pub dist: f64,
}

const MAX_CELLS_PER_AXIS: usize = 4096;

/// All unordered pairs at distance ≤ `rmax`, enumerated through a uniform
/// cell grid with cell side ≥ `rmax`.
///
/// The output order is fixed by the cell layout and the input order, so any
/// reduction that walks the list sequentially is reproducible.
pub fn pairs_within(points: &[[f64; 2]], rmax: f64) -> Vec<Pair> {
    if points.len() < 2 || !(rmax >= 0.0) {
        return Vec::new();
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in points {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    let extent = (x1 - x0).max(y1 - y0).max(f64::MIN_POSITIVE);
    let cell = rmax.max(extent / MAX_CELLS_PER_AXIS as f64).max(f64::MIN_POSITIVE);
    let nx = ((x1 - x0) / cell).floor() as usize + 1;
    let ny = ((y1 - y0) / cell).floor() as usize + 1;

    let cell_of = |p: &[f64; 2]| {
        let cx = (((p[0] - x0) / cell).floor() as usize).min(nx - 1);
        let cy = (((p[1] - y0) / cell).floor() as usize).min(ny - 1);
        cy * nx + cx
    };
    // Counting sort of point indices into cells.
    let mut start = vec![0usize; nx * ny + 1];
    for p in points {
        start[cell_of(p) + 1] += 1;
    }
    for c in 0..nx * ny {
        start[c + 1] += start[c];
    }
    let mut fill = start.clone();
    let mut members = vec![0u32; points.len()];
    for (idx, p) in points.iter().enumerate() {
        let c = cell_of(p);
        members[fill[c]] = idx as u32;
        fill[c] += 1;
    }

    let r2 = rmax * rmax;
    let mut out = Vec::new();
    let mut push = |a: u32, b: u32| {
        let (pa, pb) = (points[a as usize], points[b as usize]);
        let (dx, dy) = (pa[0] - pb[0], pa[1] - pb[1]);
        let d2 = dx * dx + dy * dy;
        if d2 <= r2 {
            let (i, j) = if a < b { (a, b) } else { (b, a) };
            out.push(Pair { i, j, dist: d2.sqrt() });
        }
    };
    for cy in 0..ny {
        for cx in 0..nx {
            let c = cy * nx + cx;
            let own = &members[start[c]..start[c + 1]];
            for (k, &a) in own.iter().enumerate() {
                for &b in &own[k + 1..] {
                    push(a, b);
                }
            }
            // Half stencil: each neighbouring cell pair is visited once.
            for (ox, oy) in [(1i64, 0i64), (-1, 1), (0, 1), (1, 1)] {
                let (nx_, ny_) = (cx as i64 + ox, cy as i64 + oy);
                if nx_ < 0 || ny_ < 0 || nx_ >= nx as i64 || ny_ >= ny as i64 {
                    continue;
                }
                let d = ny_ as usize * nx + nx_ as usize;
                for &a in own {
                    for &b in &members[start[d]..start[d + 1]] {
                        push(a, b);
                    }
                }
            }
        }
    }
    out
}

/// O(n²) reference enumeration, in `(i, j)` lexicographic order.
pub fn pairs_within_brute(points: &[[f64; 2]], rmax: f64) -> Vec<Pair> {
    let mut out = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = ((points[i][0] - points[j][0]).powi(2) + (points[i][1] - points[j][1]).powi(2)).sqrt();
            if d <= rmax {
                out.push(Pair { i: i as u32, j: j as u32, dist: d });
            }
        }
    }
    out
}

/// Median of all pairwise distances (used for default starting values).
pub fn median_pair_distance(points: &[[f64; 2]]) -> f64 {
    let mut d: Vec<f64> = pairs_within_brute(points, f64::INFINITY).iter().map(|p| p.dist).collect();
    if d.is_empty() {
        return 0.0;
    }
    let mid = d.len() / 2;
    *d.select_nth_unstable_by(mid, f64::total_cmp).1
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn overlap_of_unit_square() {
        let w = Window::square(1.0);
        assert!((w.translation_overlap(0.1, 0.0) - 0.9).abs() < 1e-15);
        assert!((w.translation_overlap(-0.2, 0.5) - 0.4).abs() < 1e-15);
        assert_eq!(w.translation_overlap(1.5, 0.0), 0.0);
    }

    #[test]
    fn pattern_rejects_outside_points() {
        let w = Window::square(1.0);
        let r = PointPattern::new(w, vec![[1.5, 0.5]], vec![0.0], vec![vec![1.0]]);
        assert!(r.is_err());
    }

    #[test]
    fn window_parse() {
        assert_eq!(Window::parse("0,2,0,3").unwrap(), Window::new(0.0, 2.0, 0.0, 3.0).unwrap());
        assert!(Window::parse("0,2,0").is_err());
        assert!(Window::parse("1,0,0,1").is_err());
    }

    proptest! {
        #[test]
        fn binned_pairs_match_brute_force(
            pts in prop::collection::vec((0.0f64..3.0, 0.0f64..2.0), 0..120),
            rmax in 0.0f64..1.5,
        ) {
            let points: Vec<[f64; 2]> = pts.into_iter().map(|(x, y)| [x, y]).collect();
            let mut fast: Vec<(u32, u32)> = pairs_within(&points, rmax).iter().map(|p| (p.i, p.j)).collect();
            let slow: Vec<(u32, u32)> = pairs_within_brute(&points, rmax).iter().map(|p| (p.i, p.j)).collect();
            fast.sort();
            prop_assert_eq!(fast, slow);
        }
    }
}
