//! The finite catalog of toric Fano models: reflexive polytopes, master
//! reference potentials, and decompositions of the anticanonical class.
//!
//! Every shipped reference potential is a weighted log-sum-exp
//! `psi(x) = log sum_a w_a exp(<a,x>) + <linear,x>` whose gradient image is
//! the interior of its moment polytope. Metrics in a class are represented
//! as nonnegative combinations of a background's master potentials plus a
//! translation term, which keeps determinants and facet decay rates exact.

use crate::error::{CkeError, Result};
use crate::geom::{rat_from_f64, rat_to_f64, Polytope, Rat};
use num_traits::Zero;
use std::sync::Arc;

/// One log-sum-exp building block.
#[derive(Debug, Clone)]
pub struct MasterPotential {
    pub name: String,
    /// support points in R^dim
    pub points: Vec<Vec<f64>>,
    pub log_weights: Vec<f64>,
    /// extra linear term added to the log-sum-exp
    pub linear: Vec<f64>,
    pub polytope: Polytope,
}

/// Pointwise evaluation of a master potential: value, gradient, Hessian,
/// third derivatives, and the softmax carriers needed for
/// cancellation-free determinants.
#[derive(Debug, Clone)]
pub struct MasterEval {
    pub value: f64,
    pub grad: [f64; 2],
    /// xx, xy, yy (xy, yy zero in dimension 1)
    pub hess: [f64; 3],
    /// third central moments T_xxx, T_xxy, T_xyy, T_yyy: the full third
    /// derivative tensor of the log-sum-exp
    pub third: [f64; 4],
    /// (weight p_a, centered point u_a) with hess = sum p u u^T
    pub carriers: Vec<(f64, [f64; 2])>,
}

impl MasterEval {
    /// Entry T_{a b c} of the third-derivative tensor by axis indices.
    #[inline]
    pub fn third_entry(&self, a: usize, b: usize, c: usize) -> f64 {
        self.third[a + b + c]
    }
}

impl MasterPotential {
    pub fn eval(&self, x: &[f64]) -> MasterEval {
        let dim = x.len();
        let k = self.points.len();
        let mut expo = vec![0.0; k];
        let mut m = f64::NEG_INFINITY;
        for a in 0..k {
            let mut e = self.log_weights[a];
            for d in 0..dim {
                e += self.points[a][d] * x[d];
            }
            expo[a] = e;
            m = m.max(e);
        }
        let mut z = 0.0;
        for a in 0..k {
            expo[a] = (expo[a] - m).exp();
            z += expo[a];
        }
        let mut mu = [0.0f64; 2];
        for a in 0..k {
            expo[a] /= z;
            for d in 0..dim {
                mu[d] += expo[a] * self.points[a][d];
            }
        }
        let mut hess = [0.0f64; 3];
        let mut third = [0.0f64; 4];
        let mut carriers = Vec::with_capacity(k);
        for a in 0..k {
            let mut u = [0.0f64; 2];
            for d in 0..dim {
                u[d] = self.points[a][d] - mu[d];
            }
            hess[0] += expo[a] * u[0] * u[0];
            hess[1] += expo[a] * u[0] * u[1];
            hess[2] += expo[a] * u[1] * u[1];
            third[0] += expo[a] * u[0] * u[0] * u[0];
            third[1] += expo[a] * u[0] * u[0] * u[1];
            third[2] += expo[a] * u[0] * u[1] * u[1];
            third[3] += expo[a] * u[1] * u[1] * u[1];
            carriers.push((expo[a], u));
        }
        let mut value = m + z.ln();
        let mut grad = [0.0f64; 2];
        for d in 0..dim {
            value += self.linear[d] * x[d];
            grad[d] = mu[d] + self.linear[d];
        }
        MasterEval {
            value,
            grad,
            hess,
            third,
            carriers,
        }
    }
}

/// A toric Fano model: the computational stage.
#[derive(Debug, Clone)]
pub struct ToricBackground {
    pub name: String,
    /// torus rank n (1 or 2)
    pub dim: usize,
    pub anticanonical_polytope: Polytope,
    /// inner-normal facet data (normal, offset); offsets are -1 in canonical position
    pub facets: Vec<(Vec<i64>, Rat)>,
    pub torus_generators: Vec<String>,
    pub masters: Vec<MasterPotential>,
    /// coefficients expressing the anticanonical reference as a master combination
    pub anticanonical_combo: Vec<f64>,
    /// whether that reference is exactly Kähler-Einstein
    pub has_closed_form_ke: bool,
    /// slowest decay rate of the anticanonical density, min_{|u|=1} h_P(u)
    pub decay_rate: f64,
}

impl ToricBackground {
    fn new(
        name: &str,
        dim: usize,
        anticanonical: Polytope,
        masters: Vec<MasterPotential>,
        combo: Vec<f64>,
        ke: bool,
    ) -> Self {
        let facets = anticanonical.facets();
        assert!(anticanonical.contains_origin_interior());
        assert!(anticanonical.is_reflexive());
        let decay_rate = min_support(&anticanonical);
        let torus_generators = (0..dim).map(|k| format!("z{}", k + 1)).collect();
        ToricBackground {
            name: name.into(),
            dim,
            anticanonical_polytope: anticanonical,
            facets,
            torus_generators,
            masters,
            anticanonical_combo: combo,
            has_closed_form_ke: ke,
            decay_rate,
        }
    }

    /// Reference potential data for a class combination plus translation.
    pub fn combo_polytope(&self, combo: &[f64], translation: &[f64]) -> Polytope {
        let mut acc: Option<Polytope> = None;
        for (c, m) in combo.iter().zip(&self.masters) {
            if *c == 0.0 {
                continue;
            }
            let piece = m.polytope.scale(rat_from_f64(*c));
            acc = Some(match acc {
                None => piece,
                Some(p) => p.minkowski_sum(&piece),
            });
        }
        let t: Vec<Rat> = translation.iter().map(|v| rat_from_f64(*v)).collect();
        acc.expect("combo must have a nonzero coefficient").translate(&t)
    }
}

fn min_support(p: &Polytope) -> f64 {
    match p.dim {
        1 => {
            let v = p.vertices_f64();
            (v[1][0]).min(-v[0][0])
        }
        _ => {
            let mut best = f64::INFINITY;
            for k in 0..720 {
                let a = std::f64::consts::PI * (k as f64) / 360.0;
                let u = [a.cos(), a.sin()];
                best = best.min(p.support(&u));
            }
            best
        }
    }
}

fn lse(name: &str, pts: &[(Vec<f64>, f64)], linear: Vec<f64>) -> MasterPotential {
    let points: Vec<Vec<f64>> = pts.iter().map(|(p, _)| p.clone()).collect();
    let log_weights: Vec<f64> = pts.iter().map(|(_, w)| w.ln()).collect();
    let dim = points[0].len();
    // moment polytope = conv(points) + gradient shift by `linear`
    let rat_pts: Vec<Vec<Rat>> = points
        .iter()
        .map(|p| {
            p.iter()
                .zip(linear.iter())
                .map(|(c, l)| rat_from_f64(*c) + rat_from_f64(*l))
                .collect()
        })
        .collect();
    let polytope = match dim {
        1 => {
            let mut vals: Vec<Rat> = rat_pts.iter().map(|v| v[0]).collect();
            vals.sort();
            Polytope::interval(vals[0], vals[vals.len() - 1])
        }
        _ => Polytope::polygon(&rat_pts),
    };
    MasterPotential {
        name: name.into(),
        points,
        log_weights,
        linear,
        polytope,
    }
}

/// The shipped model catalog.
pub fn catalog() -> Vec<Arc<ToricBackground>> {
    let mut out = Vec::new();

    // CP^1: P = [-1, 1]; round metric psi = 2 log(1+e^x) - x = log(e^-x + 2 + e^x).
    let round1 = lse(
        "round",
        &[
            (vec![-1.0], 1.0),
            (vec![0.0], 2.0),
            (vec![1.0], 1.0),
        ],
        vec![0.0],
    );
    out.push(Arc::new(ToricBackground::new(
        "p1",
        1,
        Polytope::interval_f64(-1.0, 1.0),
        vec![round1],
        vec![1.0],
        true,
    )));

    // CP^1 x CP^1: P = [-1,1]^2; product of round factors.
    let round_x = lse(
        "round-x",
        &[
            (vec![-1.0, 0.0], 1.0),
            (vec![0.0, 0.0], 2.0),
            (vec![1.0, 0.0], 1.0),
        ],
        vec![0.0, 0.0],
    );
    let round_y = lse(
        "round-y",
        &[
            (vec![0.0, -1.0], 1.0),
            (vec![0.0, 0.0], 2.0),
            (vec![0.0, 1.0], 1.0),
        ],
        vec![0.0, 0.0],
    );
    let square = Polytope::polygon(&[
        ivec(-1, -1),
        ivec(1, -1),
        ivec(1, 1),
        ivec(-1, 1),
    ]);
    out.push(Arc::new(ToricBackground::new(
        "p1xp1",
        2,
        square,
        vec![round_x, round_y],
        vec![1.0, 1.0],
        true,
    )));

    // CP^2: P = conv{(-1,-1),(2,-1),(-1,2)}; Fubini-Study anticanonical,
    // psi = 3 log(1+e^x+e^y) - x - y, realized over 3*simplex - (1,1) with
    // multinomial weights.
    let mut cp2_pts = Vec::new();
    for i in 0..=3i64 {
        for j in 0..=(3 - i) {
            let w = fact(3) / (fact(i) * fact(j) * fact(3 - i - j));
            cp2_pts.push((vec![(i - 1) as f64, (j - 1) as f64], w as f64));
        }
    }
    let fs2 = lse("fubini-study", &cp2_pts, vec![0.0, 0.0]);
    let tri = Polytope::polygon(&[ivec(-1, -1), ivec(2, -1), ivec(-1, 2)]);
    out.push(Arc::new(ToricBackground::new(
        "cp2",
        2,
        tri,
        vec![fs2],
        vec![1.0],
        true,
    )));

    // Bl_1 CP^2: P = conv{(-1,0),(0,-1),(2,-1),(-1,2)} = T + S with
    // T = conv{(-1,0),(1,0),(-1,2)} (a scaled CP^2 class) and
    // S = [(0,0),(1,-1)] (the fiberwise class).
    let mut t_pts = Vec::new();
    for i in 0..=2i64 {
        for j in 0..=(2 - i) {
            let w = fact(2) / (fact(i) * fact(j) * fact(2 - i - j));
            t_pts.push((vec![(i - 1) as f64, j as f64], w as f64));
        }
    }
    let t_bl1 = lse("base", &t_pts, vec![0.0, 0.0]);
    let s_bl1 = lse(
        "fiber",
        &[(vec![0.0, 0.0], 1.0), (vec![1.0, -1.0], 1.0)],
        vec![0.0, 0.0],
    );
    let bl1 = Polytope::polygon(&[ivec(-1, 0), ivec(0, -1), ivec(2, -1), ivec(-1, 2)]);
    out.push(Arc::new(ToricBackground::new(
        "bl1p2",
        2,
        bl1,
        vec![t_bl1, s_bl1],
        vec![1.0, 1.0],
        false,
    )));

    // Bl_2 CP^2: P = conv{(-1,0),(0,-1),(2,-1),(0,1),(-1,1)} = T'' + Sa + Sb.
    let t_dp7 = lse(
        "base",
        &[
            (vec![-1.0, 0.0], 1.0),
            (vec![0.0, 0.0], 1.0),
            (vec![-1.0, 1.0], 1.0),
        ],
        vec![0.0, 0.0],
    );
    let sa = lse(
        "fiber-a",
        &[(vec![0.0, 0.0], 1.0), (vec![1.0, 0.0], 1.0)],
        vec![0.0, 0.0],
    );
    let sb = lse(
        "fiber-b",
        &[(vec![0.0, 0.0], 1.0), (vec![1.0, -1.0], 1.0)],
        vec![0.0, 0.0],
    );
    let bl2 = Polytope::polygon(&[
        ivec(-1, 0),
        ivec(0, -1),
        ivec(2, -1),
        ivec(0, 1),
        ivec(-1, 1),
    ]);
    out.push(Arc::new(ToricBackground::new(
        "bl2p2",
        2,
        bl2,
        vec![t_dp7, sa, sb],
        vec![1.0, 1.0, 1.0],
        false,
    )));

    out
}

pub fn find_background(name: &str) -> Result<Arc<ToricBackground>> {
    catalog()
        .into_iter()
        .find(|b| b.name == name)
        .ok_or_else(|| CkeError::Invalid(format!("unknown background '{name}'")))
}

fn fact(n: i64) -> i64 {
    (1..=n).product::<i64>().max(1)
}

fn ivec(x: i64, y: i64) -> Vec<Rat> {
    vec![Rat::from_integer(x), Rat::from_integer(y)]
}

/// A decomposition of the anticanonical class into N Kähler classes,
/// stored as master-combination coefficients plus translations whose
/// polytopes Minkowski-sum to the anticanonical polytope.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub background: Arc<ToricBackground>,
    pub n_factors: usize,
    /// combos[i][k] = coefficient of master k in factor i
    pub combos: Vec<Vec<f64>>,
    /// per-factor translation of the moment polytope (sums to zero)
    pub translations: Vec<Vec<f64>>,
    pub polytopes: Vec<Polytope>,
    pub labels: Vec<String>,
}

/// A single Kähler class: moment polytope plus its volume in Hessian units.
#[derive(Debug, Clone)]
pub struct KaehlerClass {
    pub polytope: Polytope,
    /// n! * EuclideanVolume(Q)
    pub volume: f64,
}

impl KaehlerClass {
    pub fn from_polytope(p: &Polytope) -> Result<Self> {
        let vol = rat_to_f64(&p.volume()) * fact(p.dim as i64) as f64;
        if vol <= 0.0 {
            return Err(CkeError::DegenerateFactor(0));
        }
        Ok(KaehlerClass {
            polytope: p.clone(),
            volume: vol,
        })
    }
}

impl Decomposition {
    /// Build from combination coefficients (the canonical construction path).
    pub fn from_combos(
        background: &Arc<ToricBackground>,
        combos: Vec<Vec<f64>>,
        translations: Option<Vec<Vec<f64>>>,
        labels: Option<Vec<String>>,
    ) -> Result<Self> {
        let n = combos.len();
        if n == 0 {
            return Err(CkeError::Invalid("empty decomposition".into()));
        }
        let nm = background.masters.len();
        if combos.iter().any(|c| c.len() != nm) {
            return Err(CkeError::ShapeMismatch(
                "combo length must match master count".into(),
            ));
        }
        let translations =
            translations.unwrap_or_else(|| vec![vec![0.0; background.dim]; n]);
        // the combos must sum to the anticanonical combination
        for k in 0..nm {
            let s: f64 = combos.iter().map(|c| c[k]).sum();
            if (s - background.anticanonical_combo[k]).abs() > 1e-12 {
                return Err(CkeError::SumMismatch(format!(
                    "master '{}' coefficients sum to {s}, expected {}",
                    background.masters[k].name, background.anticanonical_combo[k]
                )));
            }
            if combos.iter().any(|c| c[k] < 0.0) {
                return Err(CkeError::Invalid(format!(
                    "negative coefficient on master '{}'",
                    background.masters[k].name
                )));
            }
        }
        for (i, tr) in translations.iter().enumerate() {
            if tr.len() != background.dim {
                return Err(CkeError::ShapeMismatch(format!(
                    "translation {i} has wrong dimension"
                )));
            }
        }
        for d in 0..background.dim {
            let s: f64 = translations.iter().map(|t| t[d]).sum();
            if s.abs() > 1e-12 {
                return Err(CkeError::SumMismatch(
                    "factor translations must sum to zero".into(),
                ));
            }
        }
        let polytopes: Vec<Polytope> = combos
            .iter()
            .zip(&translations)
            .map(|(c, t)| background.combo_polytope(c, t))
            .collect();
        for (i, q) in polytopes.iter().enumerate() {
            if !q.has_interior() {
                return Err(CkeError::DegenerateFactor(i));
            }
        }
        let labels = labels.unwrap_or_else(|| {
            (0..n).map(|i| format!("factor{}", i + 1)).collect()
        });
        Ok(Decomposition {
            background: background.clone(),
            n_factors: n,
            combos,
            translations,
            polytopes,
            labels,
        })
    }

    /// Trivial decomposition by scalings of the anticanonical class.
    pub fn scaled(background: &Arc<ToricBackground>, lambdas: &[f64]) -> Result<Self> {
        let combos: Vec<Vec<f64>> = lambdas
            .iter()
            .map(|l| {
                background
                    .anticanonical_combo
                    .iter()
                    .map(|c| c * l)
                    .collect()
            })
            .collect();
        let sum: f64 = lambdas.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(CkeError::SumMismatch(format!(
                "scalings sum to {sum}, expected 1"
            )));
        }
        let labels = lambdas.iter().map(|l| format!("{l}*P")).collect();
        Self::from_combos(background, combos, None, Some(labels))
    }

    /// Validated decomposition from explicit polytopes: recovers the master
    /// coefficients factor by factor, checks the exact Minkowski sum.
    pub fn from_polytopes(
        background: &Arc<ToricBackground>,
        polytopes: &[Polytope],
    ) -> Result<Self> {
        if polytopes.is_empty() {
            return Err(CkeError::Invalid("empty decomposition".into()));
        }
        if polytopes.iter().any(|q| q.dim != background.dim) {
            return Err(CkeError::ShapeMismatch("polytope dimension".into()));
        }
        for (i, q) in polytopes.iter().enumerate() {
            if !q.has_interior() {
                return Err(CkeError::DegenerateFactor(i));
            }
        }
        // exact Minkowski sum check
        let mut sum = polytopes[0].clone();
        for q in &polytopes[1..] {
            sum = sum.minkowski_sum(q);
        }
        if sum != background.anticanonical_polytope {
            return Err(CkeError::SumMismatch(format!(
                "sum has vertices {:?}",
                sum.vertices_f64()
            )));
        }
        // recover combos from edge data (1d: lengths; 2d: per-direction edge coefficients)
        let mut combos = Vec::new();
        let mut translations = Vec::new();
        for (i, q) in polytopes.iter().enumerate() {
            let (combo, tr) = infer_combo(background, q)
                .ok_or_else(|| CkeError::NotAvailable(format!(
                    "factor {i} is not a combination of the '{}' masters",
                    background.name
                )))?;
            combos.push(combo);
            translations.push(tr);
        }
        Self::from_combos(background, combos, Some(translations), None)
    }

    pub fn classes(&self) -> Vec<KaehlerClass> {
        self.polytopes
            .iter()
            .map(|p| KaehlerClass::from_polytope(p).expect("validated"))
            .collect()
    }

    /// n! Vol(Q_i)
    pub fn class_volume(&self, i: usize) -> f64 {
        rat_to_f64(&self.polytopes[i].volume()) * fact(self.background.dim as i64) as f64
    }
}

/// Express a polytope as nonneg master combination + translation, if possible.
fn infer_combo(bg: &ToricBackground, q: &Polytope) -> Option<(Vec<f64>, Vec<f64>)> {
    let nm = bg.masters.len();
    match bg.dim {
        1 => {
            let v = q.vertices_f64();
            let len = v[1][0] - v[0][0];
            let mid = 0.5 * (v[1][0] + v[0][0]);
            let mlen = {
                let mv = bg.masters[0].polytope.vertices_f64();
                mv[1][0] - mv[0][0]
            };
            Some((vec![len / mlen], vec![mid]))
        }
        _ => {
            // match per-direction edge coefficients: for each primitive edge
            // direction, length(Q) = sum_k combo_k length(master_k)
            let dirs = edge_coefficients(q);
            let master_dirs: Vec<std::collections::BTreeMap<(i64, i64), f64>> = bg
                .masters
                .iter()
                .map(|m| edge_coefficients(&m.polytope))
                .collect();
            let mut keys: std::collections::BTreeSet<(i64, i64)> = dirs.keys().cloned().collect();
            for md in &master_dirs {
                keys.extend(md.keys().cloned());
            }
            let keys: Vec<(i64, i64)> = keys.into_iter().collect();
            // least squares on the small (|keys| x nm) system
            let rows = keys.len();
            let mut a = faer::Mat::<f64>::zeros(rows, nm);
            let mut b = faer::Mat::<f64>::zeros(rows, 1);
            for (r, key) in keys.iter().enumerate() {
                for k in 0..nm {
                    a[(r, k)] = *master_dirs[k].get(key).unwrap_or(&0.0);
                }
                b[(r, 0)] = *dirs.get(key).unwrap_or(&0.0);
            }
            use faer::linalg::solvers::SolveLstsq;
            let qr = a.col_piv_qr();
            let sol = qr.solve_lstsq(&b);
            let combo: Vec<f64> = (0..nm).map(|k| sol[(k, 0)]).collect();
            if combo.iter().any(|c| *c < -1e-9) {
                return None;
            }
            let combo: Vec<f64> = combo.iter().map(|c| c.max(0.0)).collect();
            // verify exactly and read off the translation
            let model = bg.combo_polytope(&combo, &vec![0.0; bg.dim]);
            let mv = model.vertices_f64();
            let qv = q.vertices_f64();
            if mv.len() != qv.len() {
                return None;
            }
            let tr: Vec<f64> = (0..bg.dim).map(|d| qv[0][d] - mv[0][d]).collect();
            let tr_rat: Vec<Rat> = tr.iter().map(|v| rat_from_f64(*v)).collect();
            if model.translate(&tr_rat) != *q {
                return None;
            }
            Some((combo, tr))
        }
    }
}

/// Lattice-length coefficients per primitive edge direction.
fn edge_coefficients(p: &Polytope) -> std::collections::BTreeMap<(i64, i64), f64> {
    let mut out = std::collections::BTreeMap::new();
    let v = &p.vertices;
    let n = v.len();
    if n < 2 {
        return out;
    }
    let count = if n == 2 { 1 } else { n };
    for k in 0..count {
        let a = &v[k];
        let b = &v[(k + 1) % n];
        let dx = b[0] - a[0];
        let dy = b[1] - a[1];
        if dx.is_zero() && dy.is_zero() {
            continue;
        }
        let (px, py, len) = primitive_with_length(dx, dy);
        *out.entry((px, py)).or_insert(0.0) += len;
        if n == 2 {
            // a segment contributes both orientations
            *out.entry((-px, -py)).or_insert(0.0) += len;
        }
    }
    out
}

fn primitive_with_length(dx: Rat, dy: Rat) -> (i64, i64, f64) {
    fn gcd(a: i64, b: i64) -> i64 {
        let (mut a, mut b) = (a.abs(), b.abs());
        while b != 0 {
            let t = a % b;
            a = b;
            b = t;
        }
        a
    }
    let d = *dx.denom() * *dy.denom() / gcd(*dx.denom(), *dy.denom());
    let ax = *dx.numer() * (d / *dx.denom());
    let ay = *dy.numer() * (d / *dy.denom());
    let g = gcd(ax, ay).max(1);
    (ax / g, ay / g, g as f64 / d as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_is_reflexive_with_origin_interior() {
        for bg in catalog() {
            assert!(bg.anticanonical_polytope.is_reflexive(), "{}", bg.name);
            assert!(bg.anticanonical_polytope.contains_origin_interior());
            for (_, off) in &bg.facets {
                assert_eq!(*off, Rat::from_integer(-1), "{}", bg.name);
            }
            // masters sum to the anticanonical polytope
            let p = bg.combo_polytope(&bg.anticanonical_combo, &vec![0.0; bg.dim]);
            assert_eq!(p, bg.anticanonical_polytope, "{}", bg.name);
        }
    }

    #[test]
    fn catalog_polytopes_match_expected() {
        let names: Vec<String> = catalog().iter().map(|b| b.name.clone()).collect();
        assert_eq!(names, vec!["p1", "p1xp1", "cp2", "bl1p2", "bl2p2"]);
        let p1 = find_background("p1").unwrap();
        assert_eq!(p1.dim, 1);
        assert_eq!(
            p1.anticanonical_polytope,
            Polytope::interval_f64(-1.0, 1.0)
        );
        let bl1 = find_background("bl1p2").unwrap();
        assert_eq!(bl1.facets.len(), 4);
    }

    // cross-check the Bl1 facet list against the fan recomputation: rays
    // e1, e2, e1+e2, -e1-e2 with offsets -1 determine the vertices by
    // intersecting adjacent facet lines.
    #[test]
    fn bl1_facets_against_fan_reconstruction() {
        let bl1 = find_background("bl1p2").unwrap();
        let rays: Vec<(i64, i64)> = vec![(1, 0), (1, 1), (0, 1), (-1, -1)];
        // adjacent pairs in angular order: (1,0)&(1,1), (1,1)&(0,1), (0,1)&(-1,-1), (-1,-1)&(1,0)
        let mut verts = Vec::new();
        for k in 0..rays.len() {
            let (a1, a2) = rays[k];
            let (b1, b2) = rays[(k + 1) % rays.len()];
            let det = (a1 * b2 - a2 * b1) as f64;
            assert!(det != 0.0);
            // solve <v, a> = -1, <v, b> = -1
            let vx = (-(b2 - a2)) as f64 / det;
            let vy = (-(a1 - b1)) as f64 / det;
            verts.push(vec![rat_from_f64(vx), rat_from_f64(vy)]);
        }
        let from_fan = Polytope::polygon(&verts);
        assert_eq!(from_fan, bl1.anticanonical_polytope);
    }

    #[test]
    fn master_eval_round_matches_closed_form() {
        let p1 = find_background("p1").unwrap();
        for &x in &[-7.0, -1.3, 0.0, 0.4, 5.0] {
            let e = p1.masters[0].eval(&[x]);
            let psi = 2.0 * (1.0 + x.exp()).ln() - x;
            let grad = 2.0 * x.exp() / (1.0 + x.exp()) - 1.0;
            let hess = 2.0 * x.exp() / (1.0 + x.exp()).powi(2);
            assert!((e.value - psi).abs() < 1e-12, "value at {x}");
            assert!((e.grad[0] - grad).abs() < 1e-12, "grad at {x}");
            assert!((e.hess[0] - hess).abs() < 1e-12, "hess at {x}");
        }
    }

    #[test]
    fn fs_master_determinant_identity() {
        // det D^2 psi_FS = 9 p0 p1 p2 = exp(-(psi - log 9)); the carrier
        // (Cauchy-Binet) determinant must reproduce it with full relative
        // accuracy even far out.
        let cp2 = find_background("cp2").unwrap();
        for &pt in &[[0.0, 0.0], [5.0, -3.0], [20.0, 4.0], [-28.0, -25.0]] {
            let e = cp2.masters[0].eval(&pt);
            let mut det = 0.0;
            let cs = &e.carriers;
            for a in 0..cs.len() {
                for b in (a + 1)..cs.len() {
                    let cr = cs[a].1[0] * cs[b].1[1] - cs[a].1[1] * cs[b].1[0];
                    det += cs[a].0 * cs[b].0 * cr * cr;
                }
            }
            let expect = (-(e.value) + 9.0f64.ln()).exp();
            assert!(
                (det / expect - 1.0).abs() < 1e-12,
                "at {pt:?}: {det:e} vs {expect:e}"
            );
        }
    }

    #[test]
    fn decomposition_validation() {
        let p1 = find_background("p1").unwrap();
        let d = Decomposition::from_polytopes(
            &p1,
            &[
                Polytope::interval_f64(-0.3, 0.3),
                Polytope::interval_f64(-0.7, 0.7),
            ],
        )
        .unwrap();
        assert_eq!(d.n_factors, 2);
        assert!((d.combos[0][0] - 0.3).abs() < 1e-12);

        // sum mismatch
        let bad = Decomposition::from_polytopes(
            &p1,
            &[
                Polytope::interval_f64(-1.0, 1.0),
                Polytope::interval_f64(-1.0, 1.0),
            ],
        );
        assert!(matches!(bad, Err(CkeError::SumMismatch(_))));

        // degenerate factor
        let deg = Decomposition::from_polytopes(
            &p1,
            &[
                Polytope::interval_f64(0.0, 0.0),
                Polytope::interval_f64(-1.0, 1.0),
            ],
        );
        assert!(matches!(deg, Err(CkeError::DegenerateFactor(0))));
    }

    #[test]
    fn product_decomposition_on_p1xp1() {
        let bg = find_background("p1xp1").unwrap();
        let rect = |a: f64, b: f64| {
            Polytope::polygon(&[
                vec![rat_from_f64(-a / 2.0), rat_from_f64(-b / 2.0)],
                vec![rat_from_f64(a / 2.0), rat_from_f64(-b / 2.0)],
                vec![rat_from_f64(a / 2.0), rat_from_f64(b / 2.0)],
                vec![rat_from_f64(-a / 2.0), rat_from_f64(b / 2.0)],
            ])
        };
        let d =
            Decomposition::from_polytopes(&bg, &[rect(1.2, 0.6), rect(0.8, 1.4)]).unwrap();
        assert!((d.combos[0][0] - 0.6).abs() < 1e-9);
        assert!((d.combos[0][1] - 0.3).abs() < 1e-9);
        assert!((d.class_volume(0) - 2.0 * 1.2 * 0.6).abs() < 1e-9);
    }

    #[test]
    fn bl1_summand_decomposition() {
        let bg = find_background("bl1p2").unwrap();
        let d = Decomposition::from_combos(
            &bg,
            vec![vec![0.5, 0.4], vec![0.5, 0.6]],
            None,
            None,
        )
        .unwrap();
        let mut sum = d.polytopes[0].clone();
        sum = sum.minkowski_sum(&d.polytopes[1]);
        assert_eq!(sum, bg.anticanonical_polytope);
    }
}
