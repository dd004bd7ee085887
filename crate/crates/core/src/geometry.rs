//! Planar geometry helpers. All coordinates are meters in a local planar frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Distance from `p` to the closed segment `a`-`b`.
pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return p.dist(a);
    }
    let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0);
    p.dist(Point::new(a.x + t * dx, a.y + t * dy))
}

pub fn point_polyline_distance(p: Point, line: &[Point]) -> f64 {
    line.windows(2)
        .map(|w| point_segment_distance(p, w[0], w[1]))
        .fold(f64::INFINITY, f64::min)
}

pub fn polyline_length(line: &[Point]) -> f64 {
    line.windows(2).map(|w| w[0].dist(w[1])).sum()
}

/// Point halfway along the polyline by arc length.
pub fn arc_length_midpoint(line: &[Point]) -> Point {
    let half = polyline_length(line) / 2.0;
    let mut walked = 0.0;
    for w in line.windows(2) {
        let seg = w[0].dist(w[1]);
        if walked + seg >= half && seg > 0.0 {
            let t = (half - walked) / seg;
            return Point::new(w[0].x + t * (w[1].x - w[0].x), w[0].y + t * (w[1].y - w[0].y));
        }
        walked += seg;
    }
    line[0]
}

/// Signed shoelace area of a closed ring (first point repeated at the end).
fn signed_area(ring: &[Point]) -> f64 {
    ring.windows(2).map(|w| w[0].x * w[1].y - w[1].x * w[0].y).sum::<f64>() / 2.0
}

pub fn polygon_area(ring: &[Point]) -> f64 {
    signed_area(ring).abs()
}

/// Area centroid of a simple closed ring.
pub fn polygon_centroid(ring: &[Point]) -> Point {
    let a = signed_area(ring);
    if a == 0.0 {
        let n = (ring.len() - 1).max(1) as f64;
        let (sx, sy) = ring[..ring.len() - 1].iter().fold((0.0, 0.0), |(x, y), p| (x + p.x, y + p.y));
        return Point::new(sx / n, sy / n);
    }
    let (mut cx, mut cy) = (0.0, 0.0);
    for w in ring.windows(2) {
        let cross = w[0].x * w[1].y - w[1].x * w[0].y;
        cx += (w[0].x + w[1].x) * cross;
        cy += (w[0].y + w[1].y) * cross;
    }
    Point::new(cx / (6.0 * a), cy / (6.0 * a))
}

/// Even-odd ray casting. Points exactly on the boundary may land on either side.
pub fn point_in_polygon(p: Point, ring: &[Point]) -> bool {
    let mut inside = false;
    for w in ring.windows(2) {
        let (a, b) = (w[0], w[1]);
        if (a.y > p.y) != (b.y > p.y) {
            let x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x_cross {
                inside = !inside;
            }
        }
    }
    inside
}

/// Distance to the polygon boundary (zero on the boundary, positive inside and outside).
pub fn point_boundary_distance(p: Point, ring: &[Point]) -> f64 {
    point_polyline_distance(p, ring)
}

/// Angle of the vector `from -> to`, counterclockwise from +x, in `[0, 2π)`.
pub fn direction_angle(from: Point, to: Point) -> f64 {
    let a = (to.y - from.y).atan2(to.x - from.x);
    if a < 0.0 {
        a + std::f64::consts::TAU
    } else {
        a
    }
}

/// Local equirectangular projection of lon/lat degrees around an origin.
pub fn project_equirectangular(lon: f64, lat: f64, origin_lon: f64, origin_lat: f64) -> Point {
    const EARTH_RADIUS_M: f64 = 6_371_008.8;
    let x = (lon - origin_lon).to_radians() * origin_lat.to_radians().cos() * EARTH_RADIUS_M;
    let y = (lat - origin_lat).to_radians() * EARTH_RADIUS_M;
    Point::new(x, y)
}

fn fmt_coords(points: &[Point]) -> String {
    points.iter().map(|p| format!("{} {}", p.x, p.y)).collect::<Vec<_>>().join(", ")
}

pub fn linestring_to_wkt(line: &[Point]) -> String {
    format!("LINESTRING ({})", fmt_coords(line))
}

pub fn polygon_to_wkt(ring: &[Point]) -> String {
    format!("POLYGON (({}))", fmt_coords(ring))
}

fn parse_coords(body: &str) -> Result<Vec<Point>> {
    body.split(',')
        .map(|pair| {
            let mut it = pair.split_whitespace().map(str::parse::<f64>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(x)), Some(Ok(y)), None) => Ok(Point::new(x, y)),
                _ => Err(Error::parse("wkt", format!("bad coordinate pair `{}`", pair.trim()))),
            }
        })
        .collect()
}

fn strip_tag<'a>(wkt: &'a str, tag: &str) -> Result<&'a str> {
    let s = wkt.trim();
    if s.len() < tag.len() || !s[..tag.len()].eq_ignore_ascii_case(tag) {
        return Err(Error::parse("wkt", format!("expected {tag}, got `{s}`")));
    }
    Ok(s[tag.len()..].trim())
}

pub fn parse_wkt_linestring(wkt: &str) -> Result<Vec<Point>> {
    let body = strip_tag(wkt, "LINESTRING")?;
    let inner = body
        .strip_prefix('(')
        .and_then(|b| b.strip_suffix(')'))
        .ok_or_else(|| Error::parse("wkt", format!("unbalanced parentheses in `{wkt}`")))?;
    parse_coords(inner)
}

/// Parses the exterior ring of a POLYGON; interior rings are ignored.
pub fn parse_wkt_polygon(wkt: &str) -> Result<Vec<Point>> {
    let body = strip_tag(wkt, "POLYGON")?;
    let inner = body
        .strip_prefix("((")
        .ok_or_else(|| Error::parse("wkt", format!("unbalanced parentheses in `{wkt}`")))?;
    let end = inner.find(')').ok_or_else(|| Error::parse("wkt", format!("unterminated ring in `{wkt}`")))?;
    parse_coords(&inner[..end])
}
