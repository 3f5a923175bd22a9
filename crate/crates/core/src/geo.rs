//! Planar geometry for the disc coverage model.

use serde::{Deserialize, Serialize};

const EPS: f64 = 1e-9;

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Radio coverage of an access point: everything within `radius` of `center`.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disc {
    pub center: Point,
    pub radius: f64,
}

impl Disc {
    pub const fn new(center: Point, radius: f64) -> Self {
        Disc { center, radius }
    }

    pub fn covers(&self, p: &Point) -> bool {
        self.center.distance(p) <= self.radius + EPS
    }
}

/// Intersection of discs. An empty region list covers the whole plane.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub discs: Vec<Disc>,
}

impl Region {
    pub fn intersection(discs: impl IntoIterator<Item = Disc>) -> Self {
        Region {
            discs: discs.into_iter().collect(),
        }
    }

    pub fn contains(&self, p: &Point) -> bool {
        self.discs.iter().all(|d| d.covers(p))
    }
}
