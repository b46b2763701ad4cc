//! Defect graphs for matching-based decoding.
//!
//! Each syndrome sector (stars, plaquettes) yields a complete graph whose
//! vertices are the fired checks and whose edge weights are toroidal
//! Manhattan distances. A minimum-weight perfect matching on that graph picks
//! the correction pairing, and `shortest_toroidal_path` turns each pair into
//! a concrete set of edges to flip.

use crate::decoders::matching::{max_weight_matching, UNMATCHED};
use crate::error::{Error, Result};
use crate::lattice::{CheckCoord, CheckKind, ToricCode};

/// Manhattan distance on the L x L torus.
pub fn toroidal_distance(l: usize, a: (usize, usize), b: (usize, usize)) -> i64 {
    let dr = a.0.abs_diff(b.0);
    let dc = a.1.abs_diff(b.1);
    (dr.min(l - dr) + dc.min(l - dc)) as i64
}

/// Complete weighted graph over one sector's defects.
#[derive(Debug, Clone)]
pub struct DefectGraph {
    pub l: usize,
    pub defects: Vec<CheckCoord>,
    /// weights[i][j] = toroidal Manhattan distance between defects i and j.
    pub weights: Vec<Vec<i64>>,
}

impl DefectGraph {
    pub fn new(l: usize, defects: Vec<CheckCoord>) -> Self {
        let weights = defects
            .iter()
            .map(|a| {
                defects
                    .iter()
                    .map(|b| toroidal_distance(l, (a.row, a.col), (b.row, b.col)))
                    .collect()
            })
            .collect();
        DefectGraph { l, defects, weights }
    }
}

/// A perfect matching on a defect graph: index pairs plus total path weight.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matching {
    pub pairs: Vec<(usize, usize)>,
    pub total_weight: i64,
}

/// Minimum-weight perfect matching via the blossom solver. The weights are
/// flipped (w -> wmax - w) and solved in max-cardinality mode, which on an
/// even complete graph forces a perfect matching of minimum original weight.
pub fn blossom_min_matching(graph: &DefectGraph) -> Result<Matching> {
    let nv = graph.defects.len();
    if nv % 2 != 0 {
        return Err(Error::config(format!(
            "perfect matching requires an even defect count, got {nv}"
        )));
    }
    if nv == 0 {
        return Ok(Matching { pairs: Vec::new(), total_weight: 0 });
    }
    let mut edges = Vec::with_capacity(nv * (nv - 1) / 2);
    let mut wmax = 0;
    for i in 0..nv {
        for j in (i + 1)..nv {
            wmax = wmax.max(graph.weights[i][j]);
        }
    }
    for i in 0..nv {
        for j in (i + 1)..nv {
            edges.push((i, j, wmax - graph.weights[i][j]));
        }
    }
    let mate = max_weight_matching(nv, &edges, true);
    let mut pairs = Vec::with_capacity(nv / 2);
    let mut total_weight = 0;
    for (v, &m) in mate.iter().enumerate() {
        if m == UNMATCHED {
            return Err(Error::numerical(format!(
                "matching left defect {v} unpaired on a complete even graph"
            )));
        }
        if v < m {
            pairs.push((v, m));
            total_weight += graph.weights[v][m];
        }
    }
    Ok(Matching { pairs, total_weight })
}

/// Edges along one shortest path between two same-sector checks on the torus.
///
/// Routing is deterministic: rows first, then columns; each axis wraps in the
/// direction with the smaller step count, and ties go to the non-wrapping
/// direction. Star defects are joined across the primal lattice (vertex to
/// vertex), plaquette defects across the dual lattice (face to face).
pub fn shortest_toroidal_path(code: &ToricCode, a: CheckCoord, b: CheckCoord) -> Result<Vec<usize>> {
    if a.kind != b.kind {
        return Err(Error::config(
            "cannot route a correction between a star and a plaquette defect",
        ));
    }
    let l = code.l();
    if a.row >= l || a.col >= l || b.row >= l || b.col >= l {
        return Err(Error::config(format!(
            "check coordinate out of range for L={l}: ({},{}) -> ({},{})",
            a.row, a.col, b.row, b.col
        )));
    }
    let mut edges = Vec::new();
    let mut r = a.row;
    let mut c = a.col;

    let row_step = axis_step(l, a.row, b.row);
    while r != b.row {
        let next = (r + l + row_step.unsigned_offset(l)) % l;
        edges.push(match a.kind {
            // Vertical edge (r, c) joins vertices (r, c) and (r+1, c).
            CheckKind::Star => {
                if row_step == Step::Down {
                    code.vertical_edge(r, c)
                } else {
                    code.vertical_edge(next, c)
                }
            }
            // Faces (r, c) and (r+1, c) share horizontal edge (r+1, c).
            CheckKind::Plaquette => {
                if row_step == Step::Down {
                    code.horizontal_edge(next, c)
                } else {
                    code.horizontal_edge(r, c)
                }
            }
        });
        r = next;
    }

    let col_step = axis_step(l, a.col, b.col);
    while c != b.col {
        let next = (c + l + col_step.unsigned_offset(l)) % l;
        edges.push(match a.kind {
            // Horizontal edge (r, c) joins vertices (r, c) and (r, c+1).
            CheckKind::Star => {
                if col_step == Step::Down {
                    code.horizontal_edge(r, c)
                } else {
                    code.horizontal_edge(r, next)
                }
            }
            // Faces (r, c) and (r, c+1) share vertical edge (r, c+1).
            CheckKind::Plaquette => {
                if col_step == Step::Down {
                    code.vertical_edge(r, next)
                } else {
                    code.vertical_edge(r, c)
                }
            }
        });
        c = next;
    }

    Ok(edges)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    /// Increasing coordinate.
    Down,
    /// Decreasing coordinate.
    Up,
}

impl Step {
    fn unsigned_offset(self, l: usize) -> usize {
        match self {
            Step::Down => 1,
            Step::Up => l - 1,
        }
    }
}

/// Direction along one axis: fewer steps wins, ties go to the direction that
/// does not cross the periodic boundary.
fn axis_step(l: usize, from: usize, to: usize) -> Step {
    let down = (to + l - from) % l;
    let up = (from + l - to) % l;
    if down < up {
        Step::Down
    } else if up < down {
        Step::Up
    } else if from <= to {
        Step::Down
    } else {
        Step::Up
    }
}
