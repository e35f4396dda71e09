use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Closed polyline with cumulative arc length. The last vertex repeats the
/// first.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    pts: Vec<Point>,
    cum: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Arc length of the foot point, in `[0, length)`.
    pub s: f64,
    pub point: Point,
    pub distance: f64,
    /// Positive when the query lies to the left of the direction of travel.
    pub lateral: f64,
    pub segment: usize,
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

impl Polyline {
    /// Closes the loop if the last point does not already coincide with the
    /// first.
    pub fn closed(mut pts: Vec<Point>) -> Result<Self> {
        if pts.len() < 2 {
            return Err(Error::invalid("polyline", format!("needs at least 2 points, got {}", pts.len())));
        }
        if pts.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("polyline"));
        }
        if dist(pts[0], pts[pts.len() - 1]) > 1e-9 {
            pts.push(pts[0]);
        } else {
            let n = pts.len();
            pts[n - 1] = pts[0];
        }
        if pts.len() < 3 {
            return Err(Error::invalid("polyline", "degenerate loop"));
        }
        let mut cum = Vec::with_capacity(pts.len());
        cum.push(0.0);
        for w in pts.windows(2) {
            let d = dist(w[0], w[1]);
            cum.push(cum.last().unwrap() + d);
        }
        if !(*cum.last().unwrap() > 0.0) {
            return Err(Error::invalid("polyline", "zero length"));
        }
        Ok(Self { pts, cum })
    }

    pub fn points(&self) -> &[Point] {
        &self.pts
    }

    /// Vertices without the repeated closing point.
    pub fn vertices(&self) -> &[Point] {
        &self.pts[..self.pts.len() - 1]
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    pub fn arc_length_at_vertex(&self, i: usize) -> f64 {
        self.cum[i]
    }

    pub fn wrap_s(&self, s: f64) -> f64 {
        let l = self.length();
        let r = s.rem_euclid(l);
        if r >= l {
            0.0
        } else {
            r
        }
    }

    fn segment_at(&self, s: f64) -> usize {
        // last i with cum[i] <= s, restricted to valid segments
        match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(self.pts.len() - 2),
            Err(i) => (i - 1).min(self.pts.len() - 2),
        }
    }

    pub fn point_at(&self, s: f64) -> Point {
        let s = self.wrap_s(s);
        let i = self.segment_at(s);
        let seg = self.cum[i + 1] - self.cum[i];
        let t = if seg > 0.0 { (s - self.cum[i]) / seg } else { 0.0 };
        let (a, b) = (self.pts[i], self.pts[i + 1]);
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
    }

    pub fn heading_at(&self, s: f64) -> f64 {
        let i = self.segment_at(self.wrap_s(s));
        let (a, b) = (self.pts[i], self.pts[i + 1]);
        (b[1] - a[1]).atan2(b[0] - a[0])
    }

    /// Nearest point over all segments.
    pub fn project(&self, p: Point) -> Projection {
        let mut best = Projection {
            s: 0.0,
            point: self.pts[0],
            distance: f64::INFINITY,
            lateral: 0.0,
            segment: 0,
        };
        for i in 0..self.pts.len() - 1 {
            let (a, b) = (self.pts[i], self.pts[i + 1]);
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len2 = dx * dx + dy * dy;
            let t = if len2 > 0.0 {
                (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let q = [a[0] + t * dx, a[1] + t * dy];
            let d = dist(p, q);
            if d < best.distance {
                let cross = dx * (p[1] - a[1]) - dy * (p[0] - a[0]);
                best = Projection {
                    s: self.wrap_s(self.cum[i] + t * len2.sqrt()),
                    point: q,
                    distance: d,
                    lateral: if cross >= 0.0 { d } else { -d },
                    segment: i,
                };
            }
        }
        best
    }

    /// Signed curvature at each vertex from the circle through it and its
    /// neighbours.
    pub fn vertex_curvature(&self) -> Vec<f64> {
        let v = self.vertices();
        let n = v.len();
        (0..n)
            .map(|i| {
                let (a, b, c) = (v[(i + n - 1) % n], v[i], v[(i + 1) % n]);
                let cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
                let denom = dist(a, b) * dist(b, c) * dist(a, c);
                if denom > 0.0 {
                    2.0 * cross / denom
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Resamples to `n` vertices equally spaced in arc length.
    pub fn resampled(&self, n: usize) -> Result<Self> {
        let l = self.length();
        let pts = (0..n).map(|k| self.point_at(l * k as f64 / n as f64)).collect();
        Self::closed(pts)
    }

    /// Re-indexes the loop so that it starts at vertex `i`.
    pub fn rotated(&self, i: usize) -> Result<Self> {
        let v = self.vertices();
        let mut pts = v[i..].to_vec();
        pts.extend_from_slice(&v[..i]);
        Self::closed(pts)
    }
}

/// Symmetric Hausdorff distance between the vertex sets of two loops,
/// measured against the other loop's segments.
pub fn hausdorff(a: &Polyline, b: &Polyline) -> f64 {
    let one_way = |p: &Polyline, q: &Polyline| {
        p.vertices()
            .iter()
            .map(|&v| q.project(v).distance)
            .fold(0.0, f64::max)
    };
    one_way(a, b).max(one_way(b, a))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrackFile {
    centerline: Vec<Point>,
    half_width: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    raceline: Option<Vec<Point>>,
}

/// Closed circuit: centerline, half width and the reference line to follow.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    centerline: Polyline,
    half_width: f64,
    raceline: Polyline,
}

impl Track {
    pub fn new(centerline: Polyline, half_width: f64, raceline: Option<Polyline>) -> Result<Self> {
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(Error::invalid("half_width", format!("must be positive, got {half_width}")));
        }
        let raceline = raceline.unwrap_or_else(|| centerline.clone());
        for (i, &p) in raceline.vertices().iter().enumerate() {
            let d = centerline.project(p).distance;
            if d > half_width {
                return Err(Error::invalid(
                    "raceline",
                    format!("point {i} lies {d:.3} m from the centerline, beyond half width {half_width}"),
                ));
            }
        }
        Ok(Self {
            centerline,
            half_width,
            raceline,
        })
    }

    pub fn centerline(&self) -> &Polyline {
        &self.centerline
    }

    pub fn raceline(&self) -> &Polyline {
        &self.raceline
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    /// Replaces the reference line, e.g. with an externally optimised one.
    pub fn with_raceline(self, raceline: Polyline) -> Result<Self> {
        Track::new(self.centerline, self.half_width, Some(raceline))
    }

    /// Lateral offset of `p` from the centerline exceeds the half width.
    pub fn is_outside(&self, p: Point) -> bool {
        self.centerline.project(p).distance > self.half_width
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: TrackFile = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        let raceline = file.raceline.map(Polyline::closed).transpose()?;
        Track::new(Polyline::closed(file.centerline)?, file.half_width, raceline)
    }

    pub fn to_json(&self) -> String {
        let file = TrackFile {
            centerline: self.centerline.points().to_vec(),
            half_width: self.half_width,
            raceline: (self.raceline != self.centerline).then(|| self.raceline.points().to_vec()),
        };
        serde_json::to_string_pretty(&file).expect("track serializes")
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

const TRACK_VERTICES: usize = 240;
const TRACK_HALF_WIDTH: f64 = 0.2;

fn parametric(f: impl Fn(f64) -> Point) -> Result<Polyline> {
    let dense: Vec<Point> = (0..4000).map(|k| f(2.0 * PI * k as f64 / 4000.0)).collect();
    let resampled = Polyline::closed(dense)?.resampled(TRACK_VERTICES)?;
    // start on the straightest stretch
    let kappa = resampled.vertex_curvature();
    let start = (0..kappa.len())
        .min_by(|&a, &b| kappa[a].abs().partial_cmp(&kappa[b].abs()).unwrap())
        .unwrap();
    resampled.rotated(start)
}

/// The two 1:43-scale circuits: a bean-shaped loop with one right-hand
/// kink (training) and a three-lobed loop (testing). Both run
/// counter-clockwise and are about 10 m long.
pub fn make_tracks() -> (Track, Track) {
    let bean = parametric(|p| {
        let dent = 0.6 * (8.0 * ((p - PI / 2.0).cos() - 1.0)).exp();
        [2.0 * p.cos(), 1.2 * p.sin() - dent]
    })
    .expect("track 1 is well formed");
    let lobes = parametric(|p| {
        let r = 1.5 * (1.0 + 0.2 * (3.0 * p).cos());
        [r * p.cos(), r * p.sin()]
    })
    .expect("track 2 is well formed");
    (
        Track::new(bean, TRACK_HALF_WIDTH, None).expect("track 1"),
        Track::new(lobes, TRACK_HALF_WIDTH, None).expect("track 2"),
    )
}
