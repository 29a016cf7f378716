//! Exact rational polytopes in dimension 1 and 2: vertex lists, Minkowski
//! sums, volumes, barycenters, and the plain-text vertex-list format.

use crate::error::{CkeError, Result};
use num_rational::Rational64;
use num_traits::{Signed, Zero};
use std::fmt::Write as _;

pub type Rat = Rational64;

/// Convex polytope with exact rational vertices.
///
/// 1-dimensional polytopes are intervals `[a, b]`; 2-dimensional ones are
/// convex polygons stored with vertices in counterclockwise order starting
/// from the lexicographically smallest vertex.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Polytope {
    pub dim: usize,
    pub vertices: Vec<Vec<Rat>>,
}

fn cross(o: &[Rat], a: &[Rat], b: &[Rat]) -> Rat {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

impl Polytope {
    pub fn interval(a: Rat, b: Rat) -> Self {
        assert!(a <= b, "interval endpoints out of order");
        Polytope {
            dim: 1,
            vertices: vec![vec![a], vec![b]],
        }
    }

    pub fn interval_f64(a: f64, b: f64) -> Self {
        Self::interval(rat_from_f64(a), rat_from_f64(b))
    }

    /// Convex hull of the given points (dimension 2), canonically ordered.
    pub fn polygon(points: &[Vec<Rat>]) -> Self {
        assert!(points.iter().all(|p| p.len() == 2));
        let mut pts = points.to_vec();
        pts.sort();
        pts.dedup();
        if pts.len() == 1 {
            return Polytope {
                dim: 2,
                vertices: pts,
            };
        }
        // Andrew monotone chain.
        let mut lower: Vec<Vec<Rat>> = Vec::new();
        for p in &pts {
            while lower.len() >= 2
                && cross(&lower[lower.len() - 2], &lower[lower.len() - 1], p) <= Rat::zero()
            {
                lower.pop();
            }
            lower.push(p.clone());
        }
        let mut upper: Vec<Vec<Rat>> = Vec::new();
        for p in pts.iter().rev() {
            while upper.len() >= 2
                && cross(&upper[upper.len() - 2], &upper[upper.len() - 1], p) <= Rat::zero()
            {
                upper.pop();
            }
            upper.push(p.clone());
        }
        lower.pop();
        upper.pop();
        lower.extend(upper);
        let mut verts = lower;
        // rotate so the lexicographically smallest vertex comes first
        if let Some(k) = verts
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.cmp(b.1))
            .map(|(k, _)| k)
        {
            verts.rotate_left(k);
        }
        Polytope { dim: 2, vertices: verts }
    }

    pub fn vertices_f64(&self) -> Vec<Vec<f64>> {
        self.vertices
            .iter()
            .map(|v| v.iter().map(rat_to_f64).collect())
            .collect()
    }

    pub fn scale(&self, s: Rat) -> Self {
        let verts: Vec<Vec<Rat>> = self
            .vertices
            .iter()
            .map(|v| v.iter().map(|c| *c * s).collect())
            .collect();
        match self.dim {
            1 => {
                let mut vals: Vec<Rat> = verts.iter().map(|v| v[0]).collect();
                vals.sort();
                Polytope::interval(vals[0], vals[vals.len() - 1])
            }
            _ => Polytope::polygon(&verts),
        }
    }

    pub fn translate(&self, t: &[Rat]) -> Self {
        let verts: Vec<Vec<Rat>> = self
            .vertices
            .iter()
            .map(|v| v.iter().zip(t).map(|(c, d)| *c + *d).collect())
            .collect();
        Polytope {
            dim: self.dim,
            vertices: verts,
        }
    }

    /// Exact Minkowski sum (interval addition in 1d, edge merge in 2d).
    pub fn minkowski_sum(&self, other: &Polytope) -> Self {
        assert_eq!(self.dim, other.dim);
        match self.dim {
            1 => Polytope::interval(
                self.vertices[0][0] + other.vertices[0][0],
                self.vertices[1][0] + other.vertices[1][0],
            ),
            _ => {
                // Pairwise vertex sums followed by a hull pass; exact and
                // plenty fast at catalog sizes.
                let mut sums = Vec::with_capacity(self.vertices.len() * other.vertices.len());
                for a in &self.vertices {
                    for b in &other.vertices {
                        sums.push(vec![a[0] + b[0], a[1] + b[1]]);
                    }
                }
                Polytope::polygon(&sums)
            }
        }
    }

    /// Euclidean volume (length / area), exact.
    pub fn volume(&self) -> Rat {
        match self.dim {
            1 => self.vertices[1][0] - self.vertices[0][0],
            _ => {
                let v = &self.vertices;
                let n = v.len();
                let mut two_area = Rat::zero();
                for k in 0..n {
                    let a = &v[k];
                    let b = &v[(k + 1) % n];
                    two_area += a[0] * b[1] - b[0] * a[1];
                }
                two_area.abs() / Rat::from_integer(2)
            }
        }
    }

    /// Lebesgue barycenter, exact.
    pub fn barycenter(&self) -> Vec<Rat> {
        match self.dim {
            1 => vec![(self.vertices[0][0] + self.vertices[1][0]) / Rat::from_integer(2)],
            _ => {
                let v = &self.vertices;
                let n = v.len();
                let mut cx = Rat::zero();
                let mut cy = Rat::zero();
                let mut two_area = Rat::zero();
                for k in 0..n {
                    let a = &v[k];
                    let b = &v[(k + 1) % n];
                    let w = a[0] * b[1] - b[0] * a[1];
                    two_area += w;
                    cx += (a[0] + b[0]) * w;
                    cy += (a[1] + b[1]) * w;
                }
                let six_area = two_area * Rat::from_integer(3);
                vec![cx / six_area, cy / six_area]
            }
        }
    }

    /// Inner-normal facet representation `(normal, offset)` with
    /// `<x, normal> >= offset` on the polytope. Normals are primitive integer
    /// vectors when the edge directions are rational.
    pub fn facets(&self) -> Vec<(Vec<i64>, Rat)> {
        match self.dim {
            1 => vec![
                (vec![1], self.vertices[0][0]),
                (vec![-1], -self.vertices[1][0]),
            ],
            _ => {
                let v = &self.vertices;
                let n = v.len();
                let mut out = Vec::with_capacity(n);
                for k in 0..n {
                    let a = &v[k];
                    let b = &v[(k + 1) % n];
                    // edge direction (dx, dy); inner normal for ccw order is (-dy, dx)
                    let dx = b[0] - a[0];
                    let dy = b[1] - a[1];
                    let (nx, ny) = primitive_normal(-dy, dx);
                    let off = Rat::from_integer(nx) * a[0] + Rat::from_integer(ny) * a[1];
                    out.push((vec![nx, ny], off));
                }
                out
            }
        }
    }

    /// True when all facet offsets are exactly -1 and all vertices integral.
    pub fn is_reflexive(&self) -> bool {
        let integral = self
            .vertices
            .iter()
            .all(|v| v.iter().all(|c| c.is_integer()));
        let minus_one = Rat::from_integer(-1);
        integral && self.facets().iter().all(|(_, off)| *off == minus_one)
    }

    pub fn contains_origin_interior(&self) -> bool {
        self.facets().iter().all(|(_, off)| *off < Rat::zero())
    }

    pub fn has_interior(&self) -> bool {
        self.volume() > Rat::zero()
    }

    /// Support function evaluated at a float direction.
    pub fn support(&self, u: &[f64]) -> f64 {
        self.vertices_f64()
            .iter()
            .map(|v| v.iter().zip(u).map(|(a, b)| a * b).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Plain-text vertex list: one vertex per line, rational coordinates.
    pub fn to_vertex_list(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let line: Vec<String> = v.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    pub fn from_vertex_list(text: &str) -> Result<Self> {
        let mut verts: Vec<Vec<Rat>> = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let coords: Result<Vec<Rat>> = line
                .split_whitespace()
                .map(|tok| parse_rat(tok).ok_or_else(|| {
                    CkeError::Invalid(format!("bad rational '{tok}' on line {}", ln + 1))
                }))
                .collect();
            verts.push(coords?);
        }
        if verts.is_empty() {
            return Err(CkeError::Invalid("empty vertex list".into()));
        }
        let dim = verts[0].len();
        if verts.iter().any(|v| v.len() != dim) {
            return Err(CkeError::Invalid("inconsistent vertex dimensions".into()));
        }
        match dim {
            1 => {
                let mut vals: Vec<Rat> = verts.iter().map(|v| v[0]).collect();
                vals.sort();
                Ok(Polytope::interval(vals[0], vals[vals.len() - 1]))
            }
            2 => Ok(Polytope::polygon(&verts)),
            d => Err(CkeError::Invalid(format!("unsupported dimension {d}"))),
        }
    }
}

fn gcd(a: i64, b: i64) -> i64 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

fn primitive_normal(nx: Rat, ny: Rat) -> (i64, i64) {
    // clear denominators, then divide by gcd
    let d = *nx.denom() * *ny.denom() / gcd(*nx.denom(), *ny.denom());
    let ax = *nx.numer() * (d / *nx.denom());
    let ay = *ny.numer() * (d / *ny.denom());
    let g = gcd(ax, ay).max(1);
    (ax / g, ay / g)
}

pub fn parse_rat(tok: &str) -> Option<Rat> {
    if let Some((num, den)) = tok.split_once('/') {
        let n: i64 = num.parse().ok()?;
        let d: i64 = den.parse().ok()?;
        if d == 0 {
            return None;
        }
        Some(Rat::new(n, d))
    } else if let Ok(n) = tok.parse::<i64>() {
        Some(Rat::from_integer(n))
    } else {
        // decimal literal like 0.3
        let f: f64 = tok.parse().ok()?;
        Some(rat_from_f64(f))
    }
}

/// Nearest rational with denominator up to 10^6; exact for short decimals.
pub fn rat_from_f64(x: f64) -> Rat {
    let den = 1_000_000i64;
    Rat::new((x * den as f64).round() as i64, den)
}

pub fn rat_to_f64(r: &Rat) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(x: i64, y: i64) -> Vec<Rat> {
        vec![Rat::from_integer(x), Rat::from_integer(y)]
    }

    #[test]
    fn interval_sum_and_volume() {
        let a = Polytope::interval_f64(-0.3, 0.3);
        let b = Polytope::interval_f64(-0.7, 0.7);
        let s = a.minkowski_sum(&b);
        assert_eq!(s, Polytope::interval_f64(-1.0, 1.0));
        assert_eq!(s.volume(), Rat::from_integer(2));
    }

    #[test]
    fn square_sum() {
        let unit = Polytope::polygon(&[p(-1, -1), p(1, -1), p(1, 1), p(-1, 1)]);
        let half = unit.scale(Rat::new(1, 2));
        let s = half.minkowski_sum(&half);
        assert_eq!(s, unit);
        assert_eq!(unit.volume(), Rat::from_integer(4));
        assert!(unit.is_reflexive());
    }

    #[test]
    fn bl1_trapezoid_facets_and_barycenter() {
        let bl1 = Polytope::polygon(&[p(-1, 0), p(0, -1), p(2, -1), p(-1, 2)]);
        assert!(bl1.is_reflexive());
        assert_eq!(bl1.volume(), Rat::from_integer(4));
        assert_eq!(bl1.barycenter(), vec![Rat::new(1, 12), Rat::new(1, 12)]);
        let mut normals: Vec<Vec<i64>> = bl1.facets().into_iter().map(|f| f.0).collect();
        normals.sort();
        assert_eq!(
            normals,
            vec![vec![-1, -1], vec![0, 1], vec![1, 0], vec![1, 1]]
        );
    }

    #[test]
    fn triangle_plus_segment_is_bl1() {
        let t = Polytope::polygon(&[p(-1, 0), p(1, 0), p(-1, 2)]);
        let s = Polytope::polygon(&[p(0, 0), p(1, -1)]);
        let sum = t.minkowski_sum(&s);
        let bl1 = Polytope::polygon(&[p(-1, 0), p(0, -1), p(2, -1), p(-1, 2)]);
        assert_eq!(sum, bl1);
    }

    #[test]
    fn vertex_list_round_trip() {
        let bl1 = Polytope::polygon(&[p(-1, 0), p(0, -1), p(2, -1), p(-1, 2)]);
        let txt = bl1.to_vertex_list();
        let back = Polytope::from_vertex_list(&txt).unwrap();
        assert_eq!(bl1, back);
        let iv = Polytope::from_vertex_list("-3/10\n3/10\n").unwrap();
        assert_eq!(iv, Polytope::interval(Rat::new(-3, 10), Rat::new(3, 10)));
    }
}
