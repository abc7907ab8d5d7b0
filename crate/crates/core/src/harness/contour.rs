//! Marching squares over a rectilinear grid.
//!
//! A corner counts as "above" when its value is `>= level`, so a corner equal
//! to the level is never crossed from the inside of an above-region. Crossing
//! points are linearly interpolated along cell edges. Saddle cells are split
//! using the mean of their four corners.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub type Point = (f64, f64);
pub type Polyline = Vec<Point>;

/// Values sampled on the grid `xs × ys`, stored x-major: `values[i * ys.len() + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<'a> {
    pub xs: &'a [f64],
    pub ys: &'a [f64],
    pub values: &'a [f64],
}

impl Grid<'_> {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.ys.len() + j]
    }

    /// Bilinear interpolation; `p` must lie inside the grid's bounding box.
    pub fn bilinear(&self, p: Point) -> f64 {
        let i = locate(self.xs, p.0);
        let j = locate(self.ys, p.1);
        let tx = (p.0 - self.xs[i]) / (self.xs[i + 1] - self.xs[i]);
        let ty = (p.1 - self.ys[j]) / (self.ys[j + 1] - self.ys[j]);
        let bottom = self.at(i, j) * (1.0 - tx) + self.at(i + 1, j) * tx;
        let top = self.at(i, j + 1) * (1.0 - tx) + self.at(i + 1, j + 1) * tx;
        bottom * (1.0 - ty) + top * ty
    }
}

fn locate(axis: &[f64], v: f64) -> usize {
    let last = axis.len() - 2;
    (0..=last).find(|&i| v <= axis[i + 1]).unwrap_or(last)
}

/// Grid edges, identified by their lower-index endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Edge {
    /// `(i, j)` to `(i + 1, j)`.
    Horizontal(usize, usize),
    /// `(i, j)` to `(i, j + 1)`.
    Vertical(usize, usize),
}

/// Extracts the iso-line `level` as polylines in grid coordinates.
///
/// Closed loops repeat their first vertex at the end. A grid with fewer than
/// two samples along either axis has no cells and yields no polylines.
pub fn marching_squares(grid: &Grid<'_>, level: f64) -> Result<Vec<Polyline>> {
    let (nx, ny) = (grid.xs.len(), grid.ys.len());
    if grid.values.len() != nx * ny {
        return Err(Error::Shape {
            op: "marching_squares",
            left: vec![nx, ny],
            right: vec![grid.values.len()],
        });
    }
    if nx < 2 || ny < 2 || !level.is_finite() {
        return Ok(Vec::new());
    }
    for axis in [grid.xs, grid.ys] {
        if axis.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Domain("grid axes must be strictly increasing".into()));
        }
    }

    let above = |i: usize, j: usize| grid.at(i, j) >= level;
    let crossing = |e: Edge| -> Point {
        let ((i0, j0), (i1, j1)) = match e {
            Edge::Horizontal(i, j) => ((i, j), (i + 1, j)),
            Edge::Vertical(i, j) => ((i, j), (i, j + 1)),
        };
        let (z0, z1) = (grid.at(i0, j0), grid.at(i1, j1));
        let t = (level - z0) / (z1 - z0);
        let lerp = |a: f64, b: f64| a + t * (b - a);
        (lerp(grid.xs[i0], grid.xs[i1]), lerp(grid.ys[j0], grid.ys[j1]))
    };

    let mut segments: Vec<[Edge; 2]> = Vec::new();
    for i in 0..nx - 1 {
        for j in 0..ny - 1 {
            // Corners counter-clockwise from (i, j); edge k joins corner k and k+1.
            let corners = [above(i, j), above(i + 1, j), above(i + 1, j + 1), above(i, j + 1)];
            let edges = [
                Edge::Horizontal(i, j),
                Edge::Vertical(i + 1, j),
                Edge::Horizontal(i, j + 1),
                Edge::Vertical(i, j),
            ];
            let crossed: Vec<usize> = (0..4).filter(|&k| corners[k] != corners[(k + 1) % 4]).collect();
            match crossed.len() {
                0 => {}
                2 => segments.push([edges[crossed[0]], edges[crossed[1]]]),
                4 => {
                    let center = (grid.at(i, j) + grid.at(i + 1, j) + grid.at(i + 1, j + 1) + grid.at(i, j + 1)) / 4.0;
                    let center_above = center >= level;
                    // Cut off the corners on the opposite side of the centre.
                    for k in 0..4 {
                        if corners[k] != center_above {
                            segments.push([edges[(k + 3) % 4], edges[k]]);
                        }
                    }
                }
                _ => unreachable!("a cell boundary crosses an even number of times"),
            }
        }
    }

    let mut by_edge: HashMap<Edge, Vec<usize>> = HashMap::new();
    for (s, seg) in segments.iter().enumerate() {
        for e in seg {
            by_edge.entry(*e).or_default().push(s);
        }
    }
    let degree = |e: &Edge| by_edge[e].len();

    let mut used = vec![false; segments.len()];
    let walk = |start: usize, from: Edge, used: &mut Vec<bool>| -> Polyline {
        let mut line = vec![crossing(from)];
        let (mut seg, mut at) = (start, from);
        loop {
            used[seg] = true;
            let [a, b] = segments[seg];
            let next = if a == at { b } else { a };
            line.push(crossing(next));
            match by_edge[&next].iter().find(|&&s| !used[s]) {
                Some(&s) => {
                    seg = s;
                    at = next;
                }
                None => break,
            }
        }
        line
    };

    let mut lines = Vec::new();
    // Open polylines start at an edge touched by a single segment.
    for s in 0..segments.len() {
        if used[s] {
            continue;
        }
        if let Some(&e) = segments[s].iter().find(|e| degree(e) == 1) {
            lines.push(walk(s, e, &mut used));
        }
    }
    for s in 0..segments.len() {
        if !used[s] {
            lines.push(walk(s, segments[s][0], &mut used));
        }
    }
    Ok(lines)
}
