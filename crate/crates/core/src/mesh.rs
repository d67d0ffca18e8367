//! Lattice topology: cells, directional neighbor links and border handling.
//!
//! Cells are identified by dense ids. Each cell carries a list of links tagged
//! with a compass [`Direction`]; a link may point at no cell (`None`), which is
//! how zero-padded borders are expressed. Regular grids are one constructor;
//! the representation itself does not assume a grid.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    N,
    NE,
    E,
    SE,
    S,
    SW,
    W,
    NW,
}

impl Direction {
    pub const ALL: [Direction; 8] = [
        Direction::N,
        Direction::NE,
        Direction::E,
        Direction::SE,
        Direction::S,
        Direction::SW,
        Direction::W,
        Direction::NW,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Direction> {
        Self::ALL.get(i).copied()
    }

    pub fn opposite(self) -> Direction {
        Self::ALL[(self.index() + 4) % 8]
    }

    /// Row and column offsets; north decreases the row, east increases the column.
    pub fn offset(self) -> (isize, isize) {
        match self {
            Direction::N => (-1, 0),
            Direction::NE => (-1, 1),
            Direction::E => (0, 1),
            Direction::SE => (1, 1),
            Direction::S => (1, 0),
            Direction::SW => (1, -1),
            Direction::W => (0, -1),
            Direction::NW => (-1, -1),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::N => "N",
            Direction::NE => "NE",
            Direction::E => "E",
            Direction::SE => "SE",
            Direction::S => "S",
            Direction::SW => "SW",
            Direction::W => "W",
            Direction::NW => "NW",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|d| d.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown direction {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BorderMode {
    ZeroPad,
    Periodic,
}

impl FromStr for BorderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "zero_pad" | "zero" => Ok(BorderMode::ZeroPad),
            "periodic" => Ok(BorderMode::Periodic),
            other => Err(Error::Config(format!("unknown border mode {other:?}"))),
        }
    }
}

/// One directional link out of a cell. `to == None` is an absent neighbor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Link {
    pub direction: Direction,
    pub to: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeshTopology {
    border: BorderMode,
    links: Vec<Vec<Link>>,
    grid: Option<(usize, usize)>,
}

/// A broken topology invariant, as reported by [`MeshTopology::validate`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    OutOfRange { from: usize, direction: Direction, to: usize },
    NotReciprocal { from: usize, direction: Direction, to: usize },
    DuplicateDirection { cell: usize, direction: Direction },
}

impl MeshTopology {
    /// A `height × width` grid with row-major cell ids and full 8-neighborhoods.
    pub fn grid(height: usize, width: usize, border: BorderMode) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Config(format!("grid must be at least 1x1, got {height}x{width}")));
        }
        let mut links = Vec::with_capacity(height * width);
        for row in 0..height {
            for col in 0..width {
                let cell_links = Direction::ALL
                    .iter()
                    .map(|&direction| {
                        let (dr, dc) = direction.offset();
                        let (r, c) = (row as isize + dr, col as isize + dc);
                        let to = match border {
                            BorderMode::ZeroPad => {
                                if r < 0 || c < 0 || r >= height as isize || c >= width as isize {
                                    None
                                } else {
                                    Some(r as usize * width + c as usize)
                                }
                            }
                            BorderMode::Periodic => {
                                let r = r.rem_euclid(height as isize) as usize;
                                let c = c.rem_euclid(width as isize) as usize;
                                Some(r * width + c)
                            }
                        };
                        Link { direction, to }
                    })
                    .collect();
                links.push(cell_links);
            }
        }
        Ok(Self {
            border,
            links,
            grid: Some((height, width)),
        })
    }

    /// An arbitrary graph given as per-cell link lists. No checks are made; see [`validate`](Self::validate).
    pub fn from_links(links: Vec<Vec<Link>>, border: BorderMode) -> Self {
        Self {
            border,
            links,
            grid: None,
        }
    }

    pub fn cells(&self) -> usize {
        self.links.len()
    }

    pub fn border(&self) -> BorderMode {
        self.border
    }

    /// `(height, width)` when built by [`grid`](Self::grid).
    pub fn grid_shape(&self) -> Option<(usize, usize)> {
        self.grid
    }

    pub fn links(&self, cell: usize) -> &[Link] {
        &self.links[cell]
    }

    pub fn neighbor(&self, cell: usize, direction: Direction) -> Option<usize> {
        self.links[cell]
            .iter()
            .find(|l| l.direction == direction)
            .and_then(|l| l.to)
    }

    pub fn present_neighbors(&self, cell: usize) -> impl Iterator<Item = (Direction, usize)> + '_ {
        self.links[cell].iter().filter_map(|l| l.to.map(|to| (l.direction, to)))
    }

    /// Checks id ranges, one link per direction, and reciprocity of every present edge.
    pub fn validate(&self) -> std::result::Result<(), Vec<Violation>> {
        let n = self.cells();
        let mut violations = Vec::new();
        for (from, cell_links) in self.links.iter().enumerate() {
            let mut seen = [false; 8];
            for link in cell_links {
                if std::mem::replace(&mut seen[link.direction.index()], true) {
                    violations.push(Violation::DuplicateDirection {
                        cell: from,
                        direction: link.direction,
                    });
                }
                let Some(to) = link.to else { continue };
                if to >= n {
                    violations.push(Violation::OutOfRange {
                        from,
                        direction: link.direction,
                        to,
                    });
                    continue;
                }
                let back = self.links[to]
                    .iter()
                    .find(|l| l.direction == link.direction.opposite());
                if !matches!(back, Some(Link { to: Some(b), .. }) if *b == from) {
                    violations.push(Violation::NotReciprocal {
                        from,
                        direction: link.direction,
                        to,
                    });
                }
            }
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(violations)
        }
    }

    pub fn to_json(&self) -> TopologyDocument {
        let edges = self
            .links
            .iter()
            .enumerate()
            .flat_map(|(from, ls)| {
                ls.iter()
                    .filter_map(move |l| l.to.map(|to| (from, l.direction.name().to_string(), to)))
            })
            .collect();
        TopologyDocument {
            cells: self.cells(),
            border: self.border,
            edges,
        }
    }

    /// Rebuilds a topology from its JSON document. Directions with no edge become absent links.
    pub fn from_json(doc: &TopologyDocument) -> Result<Self> {
        let mut links: Vec<Vec<Link>> = (0..doc.cells)
            .map(|_| {
                Direction::ALL
                    .iter()
                    .map(|&direction| Link { direction, to: None })
                    .collect()
            })
            .collect();
        for (from, dir, to) in &doc.edges {
            let direction: Direction = dir.parse()?;
            let slot = links
                .get_mut(*from)
                .ok_or_else(|| Error::Config(format!("edge source {from} outside {} cells", doc.cells)))?;
            slot[direction.index()].to = Some(*to);
        }
        Ok(Self::from_links(links, doc.border))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_json()).expect("topology serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: TopologyDocument =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        Self::from_json(&doc)
    }
}

/// Serialized form: `{"cells": N, "border": "...", "edges": [[from, dir, to], ...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologyDocument {
    pub cells: usize,
    pub border: BorderMode,
    pub edges: Vec<(usize, String, usize)>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn opposite_is_involution() {
        for d in Direction::ALL {
            assert_eq!(d.opposite().opposite(), d);
            assert_ne!(d.opposite(), d);
        }
        assert_eq!(Direction::N.opposite(), Direction::S);
        assert_eq!(Direction::NE.opposite(), Direction::SW);
        assert_eq!(Direction::E.opposite(), Direction::W);
        assert_eq!(Direction::SE.opposite(), Direction::NW);
    }

    #[test]
    fn zero_pad_corner_has_absent_links() {
        let g = MeshTopology::grid(16, 16, BorderMode::ZeroPad).unwrap();
        for d in [Direction::N, Direction::NW, Direction::W, Direction::SW, Direction::NE] {
            assert_eq!(g.neighbor(0, d), None, "{d}");
        }
        assert_eq!(g.neighbor(0, Direction::E), Some(1));
        assert_eq!(g.present_neighbors(0).count(), 3);
    }

    #[test]
    fn direction_convention() {
        let g = MeshTopology::grid(16, 16, BorderMode::ZeroPad).unwrap();
        assert_eq!(g.neighbor(5 * 16 + 5, Direction::NE), Some(4 * 16 + 6));
        assert_eq!(g.neighbor(5 * 16 + 5, Direction::S), Some(6 * 16 + 5));
    }

    #[test]
    fn periodic_wraps() {
        let g = MeshTopology::grid(4, 4, BorderMode::Periodic).unwrap();
        assert_eq!(g.neighbor(0, Direction::N), Some(12));
        assert_eq!(g.neighbor(0, Direction::NW), Some(15));
        assert!((0..16).all(|c| g.present_neighbors(c).count() == 8));
    }

    #[test]
    fn zero_sized_grid_is_rejected() {
        assert!(MeshTopology::grid(0, 4, BorderMode::ZeroPad).is_err());
        assert!(MeshTopology::grid(4, 0, BorderMode::Periodic).is_err());
    }

    #[test]
    fn one_way_edge_is_reported() {
        let mut links = vec![Vec::new(), Vec::new()];
        links[0].push(Link {
            direction: Direction::E,
            to: Some(1),
        });
        let t = MeshTopology::from_links(links, BorderMode::ZeroPad);
        let v = t.validate().unwrap_err();
        assert_eq!(
            v,
            vec![Violation::NotReciprocal {
                from: 0,
                direction: Direction::E,
                to: 1
            }]
        );
    }

    #[test]
    fn out_of_range_is_reported() {
        let links = vec![vec![Link {
            direction: Direction::S,
            to: Some(3),
        }]];
        let t = MeshTopology::from_links(links, BorderMode::ZeroPad);
        assert!(matches!(
            t.validate().unwrap_err()[0],
            Violation::OutOfRange { to: 3, .. }
        ));
    }

    #[test]
    fn json_round_trip() {
        let g = MeshTopology::grid(3, 5, BorderMode::ZeroPad).unwrap();
        let doc = g.to_json();
        let text = serde_json::to_string(&doc).unwrap();
        assert!(text.starts_with("{\"cells\":15,\"border\":\"zero_pad\",\"edges\":[[0,\"E\",1]"));
        let back = MeshTopology::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back.cells(), 15);
        for c in 0..15 {
            for d in Direction::ALL {
                assert_eq!(back.neighbor(c, d), g.neighbor(c, d));
            }
        }
    }
}
