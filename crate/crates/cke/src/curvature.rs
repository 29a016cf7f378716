//! Curvature computations: Ricci potentials of metric tuples, harmonic
//! representatives of deformation directions, the potentials h_eta and the
//! centered norm vector I_eta, and the coupled-KE residual.

use crate::background::{Decomposition, MasterPotential};
use crate::error::{CkeError, Result};
use crate::grid::{
    ddbar, integrate, poisson_solve, trace, FormField, Grid, PotentialVector,
    ScalarField, VolumeDensity,
};
use crate::linalg;
use faer::Mat;
use std::sync::Arc;

/// N torus-invariant Kähler metrics as convex potentials: an analytic
/// master combination per factor plus a bounded numeric correction.
#[derive(Debug, Clone)]
pub struct MetricTuple {
    pub decomposition: Decomposition,
    pub grid: Arc<Grid>,
    /// current class coefficients (shifted along deformations)
    pub combos: Vec<Vec<f64>>,
    /// bounded numeric potential corrections
    pub numeric: Vec<ScalarField>,
    /// cached forms with stable determinants
    pub forms: Vec<FormField>,
    /// Σ_j ψ_j (reference part plus all numeric corrections)
    pub sum_psi: ScalarField,
    /// n! Vol(Q_i) from exact mixed volumes
    pub volumes: Vec<f64>,
}

/// Relative determinant deficit below which a sign flip is treated as
/// discretization noise in the anisotropic tail rather than a genuine exit
/// from the Kähler cone.
pub const CONE_CERT_TOL: f64 = 1e-4;

/// Differentiation-noise fraction of the numeric part's global Hessian
/// scale: collocation through the compactification delivers numeric
/// Hessians to roughly this relative accuracy in the absolute sense, so
/// deep anisotropic nodes cannot be certified below it.
pub const CONE_NOISE_FRACTION: f64 = 1e-4;

/// Builds the Hessian field of a master combination plus a numeric part,
/// with a cancellation-free determinant (Cauchy-Binet over the softmax
/// carriers). The determinant is floored at a fraction of the analytic
/// part; a genuine positivity violation — deficit beyond `CONE_CERT_TOL`
/// relative to the anisotropic entry scale on a cone node — is recorded on
/// the form for `check_positive`.
pub fn combined_form(
    grid: &Arc<Grid>,
    parts: &[(f64, &MasterPotential)],
    numeric: Option<&ScalarField>,
) -> FormField {
    let n = grid.nodes;
    let dim = grid.dim;
    let k = if dim == 1 { 1 } else { 3 };
    let mut comps = vec![vec![0.0; n]; k];
    let mut det = vec![0.0; n];
    let mut violation: Option<usize> = None;
    let num_hess = numeric.map(ddbar);
    // absolute differentiation-noise scale of the numeric part
    let mut eta = 0.0f64;
    if let Some(nh) = &num_hess {
        for c in &nh.comps {
            for v in c {
                eta = eta.max(v.abs());
            }
        }
        eta *= CONE_NOISE_FRACTION;
    }
    for idx in 0..n {
        let pt = grid.node_point(idx);
        let evals: Vec<(f64, crate::background::MasterEval)> = parts
            .iter()
            .filter(|(c, _)| *c != 0.0)
            .map(|(c, m)| (*c, m.eval(&pt)))
            .collect();
        let mut h = [0.0f64; 3];
        for (c, e) in &evals {
            h[0] += c * e.hess[0];
            h[1] += c * e.hess[1];
            h[2] += c * e.hess[2];
        }
        let mut hn = [0.0f64; 3];
        if let Some(nh) = &num_hess {
            hn[0] = nh.comps[0][idx];
            if dim == 2 {
                hn[1] = nh.comps[1][idx];
                hn[2] = nh.comps[2][idx];
            }
        }
        comps[0][idx] = h[0] + hn[0];
        if dim == 2 {
            comps[1][idx] = h[1] + hn[1];
            comps[2][idx] = h[2] + hn[2];
        }
        if dim == 1 {
            let analytic = h[0];
            let raw = analytic + hn[0];
            if grid.cone[idx]
                && raw < -(CONE_CERT_TOL * analytic.abs() + eta)
                && violation.is_none()
            {
                violation = Some(idx);
            }
            det[idx] = raw.max(1e-2 * analytic.max(1e-300));
        } else {
            // det(sum of parts): pairwise Cauchy-Binet over carriers keeps
            // every term nonnegative for the analytic blocks
            let mut d_analytic = 0.0;
            for a in 0..evals.len() {
                let (ca, ea) = &evals[a];
                for b in a..evals.len() {
                    let (cb, eb) = &evals[b];
                    let mut acc = 0.0;
                    if a == b {
                        for p in 0..ea.carriers.len() {
                            for q in (p + 1)..ea.carriers.len() {
                                let (wp, up) = ea.carriers[p];
                                let (wq, uq) = ea.carriers[q];
                                let cr = up[0] * uq[1] - up[1] * uq[0];
                                acc += wp * wq * cr * cr;
                            }
                        }
                        d_analytic += ca * ca * acc;
                    } else {
                        for &(wp, up) in &ea.carriers {
                            for &(wq, uq) in &eb.carriers {
                                let cr = up[0] * uq[1] - up[1] * uq[0];
                                acc += wp * wq * cr * cr;
                            }
                        }
                        d_analytic += ca * cb * acc;
                    }
                }
            }
            let mixed = h[0] * hn[2] + h[2] * hn[0] - 2.0 * h[1] * hn[1];
            let d_num = hn[0] * hn[2] - hn[1] * hn[1];
            let raw = d_analytic + mixed + d_num;
            if grid.cone[idx] && violation.is_none() {
                let scale =
                    (comps[0][idx] * comps[2][idx]).abs() + comps[1][idx] * comps[1][idx];
                // entrywise noise propagates through the mixed term with the
                // trace scale, not the geometric mean
                let tr_scale =
                    comps[0][idx].abs() + comps[2][idx].abs() + 2.0 * comps[1][idx].abs();
                let floor = CONE_CERT_TOL * scale + tr_scale * eta + eta * eta;
                if raw < -floor || comps[0][idx] <= -eta {
                    violation = Some(idx);
                }
            }
            det[idx] = raw.max(1e-2 * d_analytic.max(1e-300));
        }
    }
    FormField {
        grid: grid.clone(),
        comps,
        det: Some(det),
        violation,
    }
}

impl MetricTuple {
    pub fn from_parts(
        decomposition: &Decomposition,
        grid: &Arc<Grid>,
        combos: Vec<Vec<f64>>,
        numeric: Vec<ScalarField>,
    ) -> Result<Self> {
        let bg = &decomposition.background;
        let n = decomposition.n_factors;
        if combos.len() != n || numeric.len() != n {
            return Err(CkeError::ShapeMismatch("metric tuple arity".into()));
        }
        let mut forms = Vec::with_capacity(n);
        let mut volumes = Vec::with_capacity(n);
        for i in 0..n {
            let parts: Vec<(f64, &MasterPotential)> = combos[i]
                .iter()
                .zip(&bg.masters)
                .map(|(c, m)| (*c, m))
                .collect();
            forms.push(combined_form(grid, &parts, Some(&numeric[i])));
            let vol = class_volume(bg, &combos[i]);
            if vol <= 0.0 {
                return Err(CkeError::NotKaehler {
                    component: i,
                    node: 0,
                    t: f64::NAN,
                });
            }
            volumes.push(vol);
        }
        // Σψ: the combos sum to the anticanonical combination, so the
        // reference part is -log(ref_density); translations sum to zero.
        let mut sum_vals: Vec<f64> = grid.ref_density.iter().map(|d| -d.ln()).collect();
        for f in &numeric {
            for i in 0..grid.nodes {
                sum_vals[i] += f.values[i];
            }
        }
        Ok(MetricTuple {
            decomposition: decomposition.clone(),
            grid: grid.clone(),
            combos,
            numeric,
            forms,
            sum_psi: ScalarField::new(grid, sum_vals),
            volumes,
        })
    }

    pub fn n(&self) -> usize {
        self.decomposition.n_factors
    }

    /// Full gradient of ψ_i at a node (moment map into Q_i).
    pub fn gradient(&self, i: usize, idx: usize) -> [f64; 2] {
        let bg = &self.decomposition.background;
        let pt = self.grid.node_point(idx);
        let mut g = [0.0f64; 2];
        for (c, m) in self.combos[i].iter().zip(&bg.masters) {
            if *c != 0.0 {
                let e = m.eval(&pt);
                g[0] += c * e.grad[0];
                g[1] += c * e.grad[1];
            }
        }
        for (d, t) in self.decomposition.translations[i].iter().enumerate() {
            g[d] += t;
        }
        g
    }

    /// Numeric-gradient corrected moment map (adds ∇ of the correction).
    pub fn gradient_field(&self, i: usize, axis: usize) -> Vec<f64> {
        let g = &self.grid;
        let mut out = vec![0.0; g.nodes];
        for idx in 0..g.nodes {
            out[idx] = self.gradient(i, idx)[axis];
        }
        let dnum = g.apply_d1(&self.numeric[i].values, axis);
        for idx in 0..g.nodes {
            out[idx] += dnum[idx];
        }
        out
    }

    /// Shift classes along a deformation and add potential corrections:
    /// ω_i(t, φ) = θ_i + t η_i + i∂∂̄ φ_i.
    pub fn deformed(
        &self,
        eta: &HarmonicDeformation,
        t: f64,
        phi: &PotentialVector,
    ) -> Result<Self> {
        let n = self.n();
        if phi.n() != n {
            return Err(CkeError::ShapeMismatch("phi arity".into()));
        }
        let mut combos = self.combos.clone();
        for i in 0..n {
            for (k, d) in eta.increments[i].iter().enumerate() {
                combos[i][k] += t * d;
            }
        }
        let mut numeric = Vec::with_capacity(n);
        for i in 0..n {
            let mut v = self.numeric[i].clone();
            if let Some(u) = &eta.potentials {
                v = v.add(&u.comps[i].scale(t));
            }
            numeric.push(v.add(&phi.comps[i]));
        }
        MetricTuple::from_parts(&self.decomposition, &self.grid, combos, numeric).map_err(|e| {
            match e {
                CkeError::NotKaehler { component, node, .. } => CkeError::NotKaehler {
                    component,
                    node,
                    t,
                },
                other => other,
            }
        })
    }

    /// The fixed volume density dV0 = (anticanonical density of this tuple),
    /// normalized to unit mass. At a coupled KE start this equals
    /// θ_i^n / ∫ θ_i^n for every i.
    pub fn dv0(&self) -> VolumeDensity {
        let g = &self.grid;
        let density: Vec<f64> = (0..g.nodes)
            .map(|i| (-self.sum_psi.values[i]).exp())
            .collect();
        VolumeDensity::new(g, density).normalized()
    }

    /// Σ_i θ_i as a form (used as the explicit deformation-norm metric).
    pub fn sum_form(&self) -> FormField {
        let mut acc = self.forms[0].clone();
        for f in &self.forms[1..] {
            acc = acc.add(f);
        }
        // stable det for the sum: rebuild from the summed combo
        let bg = &self.decomposition.background;
        let total: Vec<f64> = (0..bg.masters.len())
            .map(|k| self.combos.iter().map(|c| c[k]).sum())
            .collect();
        let parts: Vec<(f64, &MasterPotential)> = total
            .iter()
            .zip(&bg.masters)
            .map(|(c, m)| (*c, m))
            .collect();
        let mut num_sum = self.numeric[0].clone();
        for f in &self.numeric[1..] {
            num_sum = num_sum.add(f);
        }
        let full = combined_form(&self.grid, &parts, Some(&num_sum));
        FormField {
            grid: acc.grid.clone(),
            comps: acc.comps,
            det: full.det,
            violation: full.violation,
        }
    }
}

/// Exact volume of a master combination (mixed-volume polynomial).
pub fn volume_of_combo(bg: &crate::background::ToricBackground, combo: &[f64]) -> f64 {
    use crate::geom::rat_to_f64;
    let k = bg.masters.len();
    match bg.dim {
        1 => {
            let mut acc = 0.0;
            for (c, m) in combo.iter().zip(&bg.masters) {
                acc += c * rat_to_f64(&m.polytope.volume());
            }
            acc
        }
        _ => {
            let mut acc = 0.0;
            for a in 0..k {
                for b in 0..k {
                    let va = rat_to_f64(&bg.masters[a].polytope.volume());
                    let vb = rat_to_f64(&bg.masters[b].polytope.volume());
                    let mv = if a == b {
                        va
                    } else {
                        let sum = bg.masters[a]
                            .polytope
                            .minkowski_sum(&bg.masters[b].polytope);
                        (rat_to_f64(&sum.volume()) - va - vb) / 2.0
                    };
                    acc += combo[a] * combo[b] * mv;
                }
            }
            acc
        }
    }
}

/// n! Vol for a combo.
pub fn class_volume(bg: &crate::background::ToricBackground, combo: &[f64]) -> f64 {
    let nf: f64 = (1..=bg.dim).product::<usize>().max(1) as f64;
    nf * volume_of_combo(bg, combo)
}

/// The exact coupled-KE start for trivial scalings and product
/// decompositions on Kähler-Einstein backgrounds.
pub fn reference_metric_tuple(
    decomposition: &Decomposition,
    grid: &Arc<Grid>,
) -> Result<MetricTuple> {
    let bg = &decomposition.background;
    if !bg.has_closed_form_ke {
        return Err(CkeError::NotAvailable(format!(
            "background '{}' has no closed-form Kähler-Einstein metric",
            bg.name
        )));
    }
    let n = decomposition.n_factors;
    MetricTuple::from_parts(
        decomposition,
        grid,
        decomposition.combos.clone(),
        (0..n).map(|_| ScalarField::zeros(grid)).collect(),
    )
}

/// The Ricci potential tuple f_i with its normalizations.
#[derive(Debug, Clone)]
pub struct RicciPotentialTuple {
    pub f: PotentialVector,
    /// affine gauge coefficients [const, a_1, (a_2)] per factor
    pub affine: Vec<Vec<f64>>,
    /// normalization constants c_i
    pub constants: Vec<f64>,
    /// sup norms over core nodes
    pub sup_norms: Vec<f64>,
}

/// Shell fit data shared by the Ricci potential and the Newton Jacobian.
///
/// The gauge actually subtracted from the raw potential is the shell mean
/// (the constant term): all shipped references are in canonical position
/// with smooth facet rates, so the true linear part of the raw potential
/// vanishes identically, and subtracting a fitted linear term would inject
/// the spurious tilt of the bounded shell variation instead. The full
/// affine fit is still computed: its linear coefficients, together with the
/// outer-shell growth of the remainder, drive the unboundedness detector.
pub struct AffineFit {
    pub shell_idx: Vec<usize>,
    /// basis values [1, x, (y)] at all nodes
    pub basis: Vec<Vec<f64>>,
    /// (1+dim) x nshell pseudo-inverse: coef = fit * values_at_shell
    pub fit: Mat<f64>,
}

pub fn affine_fit(grid: &Arc<Grid>) -> AffineFit {
    let shell_idx: Vec<usize> = (0..grid.nodes).filter(|i| grid.shell[*i]).collect();
    let np = 1 + grid.dim;
    let mut basis = vec![vec![1.0; grid.nodes]];
    for d in 0..grid.dim {
        basis.push((0..grid.nodes).map(|i| grid.node_xy(i)[d]).collect());
    }
    let nsh = shell_idx.len();
    let mut a = Mat::<f64>::zeros(nsh, np);
    for (r, &i) in shell_idx.iter().enumerate() {
        for c in 0..np {
            a[(r, c)] = basis[c][i];
        }
    }
    // pseudo-inverse via normal equations on the small np x np system
    let mut ata = Mat::<f64>::zeros(np, np);
    for p in 0..np {
        for q in 0..np {
            let mut acc = 0.0;
            for r in 0..nsh {
                acc += a[(r, p)] * a[(r, q)];
            }
            ata[(p, q)] = acc;
        }
    }
    let inv = Factor::new(ata);
    let mut fit = Mat::<f64>::zeros(np, nsh);
    for r in 0..nsh {
        let col: Vec<f64> = (0..np).map(|p| a[(r, p)]).collect();
        let sol = inv.solve(&col);
        for p in 0..np {
            fit[(p, r)] = sol[p];
        }
    }
    AffineFit {
        shell_idx,
        basis,
        fit,
    }
}

struct Factor {
    lu: linalg::Factorized,
}

impl Factor {
    fn new(a: Mat<f64>) -> Self {
        Factor {
            lu: linalg::Factorized::new(a),
        }
    }
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.lu.solve(b)
    }
}

/// Computes the Ricci potential tuple of a metric tuple:
/// f_i = -log det D²ψ_i - Σ_j ψ_j - ℓ_i + c_i with ℓ_i the shell affine fit
/// and c_i enforcing ∫ (1 - e^{f_i}) ω_i^n = 0 (closed form, since
/// e^{f̂_i} det W_i = e^{-Σψ - ℓ_i} is available without the determinant).
pub fn ricci_potential(metrics: &MetricTuple) -> Result<RicciPotentialTuple> {
    ricci_potential_with(metrics, &affine_fit(&metrics.grid))
}

pub fn ricci_potential_with(
    metrics: &MetricTuple,
    fit: &AffineFit,
) -> Result<RicciPotentialTuple> {
    let g = &metrics.grid;
    let n = metrics.n();
    let np = 1 + g.dim;
    let mut comps = Vec::with_capacity(n);
    let mut affs = Vec::with_capacity(n);
    let mut consts = Vec::with_capacity(n);
    let mut sups = Vec::with_capacity(n);
    for i in 0..n {
        let form = &metrics.forms[i];
        if let Err(node) = form.check_positive() {
            return Err(CkeError::NotPositive { component: i, node });
        }
        let det = form.det.as_ref().expect("metric forms carry dets");
        let mut raw = vec![0.0; g.nodes];
        for idx in 0..g.nodes {
            if g.live[idx] {
                raw[idx] = -det[idx].ln() - metrics.sum_psi.values[idx];
            }
        }
        // full affine fit over the shell (diagnostics + boundedness check)
        let shell_vals: Vec<f64> = fit.shell_idx.iter().map(|&idx| raw[idx]).collect();
        let mut coef = vec![0.0; np];
        for p in 0..np {
            let mut acc = 0.0;
            for (r, v) in shell_vals.iter().enumerate() {
                acc += fit.fit[(p, r)] * v;
            }
            coef[p] = acc;
        }
        // gauge actually removed: the shell mean only (canonical position
        // keeps the true linear part identically zero)
        let ell = coef[0];
        let mut fhat = vec![0.0; g.nodes];
        for idx in 0..g.nodes {
            if g.live[idx] {
                fhat[idx] = raw[idx] - ell;
            }
        }
        // boundedness: growth of the mean-subtracted residual across the
        // shell radii catches genuine affine (or worse) trends
        let mut inner_max = 0.0f64;
        let mut outer_max = 0.0f64;
        for &idx in &fit.shell_idx {
            let (a, b) = crate::grid::split(idx, g.m, g.dim);
            let smax = if g.dim == 1 {
                g.s[a].abs()
            } else {
                g.s[a].abs().max(g.s[b].abs())
            };
            if smax > 0.97 {
                outer_max = outer_max.max(fhat[idx].abs());
            } else {
                inner_max = inner_max.max(fhat[idx].abs());
            }
        }
        let growth = outer_max - inner_max;
        if growth > UNBOUNDED_GROWTH_TOL {
            return Err(CkeError::Unbounded(growth));
        }
        // normalization: c = log(Vol(Q_i) / ∫ e^{-Σψ - ℓ} dx)
        let mut mass = 0.0;
        for idx in 0..g.nodes {
            if g.live[idx] {
                mass += g.weights[idx] * (-metrics.sum_psi.values[idx] - ell).exp();
            }
        }
        let vol_q = metrics.volumes[i] / factorial(g.dim);
        let c = (vol_q / mass).ln();
        let mut sup = 0.0f64;
        for idx in 0..g.nodes {
            if g.live[idx] {
                fhat[idx] += c;
                if g.core[idx] {
                    sup = sup.max(fhat[idx].abs());
                }
            }
        }
        comps.push(ScalarField::new(g, fhat));
        affs.push(coef);
        consts.push(c);
        sups.push(sup);
    }
    Ok(RicciPotentialTuple {
        f: PotentialVector::new(comps),
        affine: affs,
        constants: consts,
        sup_norms: sups,
    })
}

pub const UNBOUNDED_GROWTH_TOL: f64 = 0.5;

fn factorial(n: usize) -> f64 {
    (1..=n).product::<usize>().max(1) as f64
}

/// max_i ‖f_i‖_∞ over core nodes; zero exactly at a coupled KE tuple.
pub fn cke_residual(metrics: &MetricTuple) -> Result<f64> {
    let rp = ricci_potential(metrics)?;
    Ok(rp.sup_norms.iter().cloned().fold(0.0, f64::max))
}

/// A normalized tuple of harmonic (1,1)-forms with Σ_i [η_i] = 0.
#[derive(Debug, Clone)]
pub struct HarmonicDeformation {
    /// per-factor master-coefficient increments (rows sum to zero)
    pub increments: Vec<Vec<f64>>,
    pub forms: Vec<FormField>,
    /// harmonic correction potentials u_i (None when every η_i is a pure
    /// master combination, as on product and trivial starts)
    pub potentials: Option<PotentialVector>,
    /// scale applied to reach ‖η‖ = 1
    pub normalization: f64,
}

/// Harmonic representative of a class increment with respect to θ: takes
/// the master-combination representative η₀ and solves
/// Δ_θ u = mean(tr_θ η₀) - tr_θ η₀, so η = η₀ + i∂∂̄u has constant trace.
pub fn harmonic_representative(
    increment: &[f64],
    theta: &FormField,
    metrics: &MetricTuple,
    comp: usize,
) -> Result<(FormField, ScalarField)> {
    let g = &theta.grid;
    let bg = &metrics.decomposition.background;
    let parts: Vec<(f64, &MasterPotential)> = increment
        .iter()
        .zip(&bg.masters)
        .map(|(c, m)| (*c, m))
        .collect();
    let eta0 = combined_form(g, &parts, None);
    let tr0 = trace(&eta0, theta)?;
    let dens = VolumeDensity::from_form(theta);
    let mean = integrate(&tr0, &dens) / dens.mass;
    let rhs = ScalarField::new(
        g,
        tr0.values.iter().map(|v| mean - v).collect(),
    );
    let u = poisson_solve(theta, &rhs, &dens.normalized())?;
    let _ = comp;
    let eta = eta0.add(&ddbar(&u));
    Ok((eta, u))
}

/// Bounded invariant field built as a polynomial in the analytic moment-map
/// coordinates of one factor. These fields and all their derivatives decay
/// at the rates of the metric itself, which makes them safe probe data for
/// perturbations and randomized operator tests.
pub fn moment_polynomial(
    metrics: &MetricTuple,
    comp: usize,
    terms: &[(f64, [usize; 2])],
) -> ScalarField {
    let g = &metrics.grid;
    ScalarField::new(
        g,
        (0..g.nodes)
            .map(|idx| {
                let m = metrics.gradient(comp, idx);
                terms
                    .iter()
                    .map(|(a, p)| {
                        a * m[0].powi(p[0] as i32) * if g.dim == 2 { m[1].powi(p[1] as i32) } else { 1.0 }
                    })
                    .sum()
            })
            .collect(),
    )
}

/// Squared product of the facet affine functions evaluated on a factor's
/// moment image: an invariant probe field vanishing to second order toward
/// every divisor. Its numeric Hessian decays twice as fast as the metric,
/// so adding a small multiple to a potential stays certifiably inside the
/// Kähler cone.
pub fn facet_bump(metrics: &MetricTuple, comp: usize) -> ScalarField {
    let g = &metrics.grid;
    let facets = &metrics.decomposition.background.facets;
    ScalarField::new(
        g,
        (0..g.nodes)
            .map(|idx| {
                let m = metrics.gradient(comp, idx);
                let prod: f64 = facets
                    .iter()
                    .map(|(nu, off)| {
                        let dot: f64 = nu
                            .iter()
                            .enumerate()
                            .map(|(d, v)| *v as f64 * m[d])
                            .sum();
                        dot - crate::geom::rat_to_f64(off)
                    })
                    .product();
                prod * prod
            })
            .collect(),
    )
}

/// Pointwise |η|²_g = tr(g^{-1} η g^{-1} η).
pub fn norm2_wrt(eta: &FormField, gform: &FormField) -> ScalarField {
    let g = &eta.grid;
    let det = gform.determinant();
    let mut out = vec![0.0; g.nodes];
    for i in 0..g.nodes {
        if !g.live[i] {
            continue;
        }
        out[i] = match g.dim {
            1 => (eta.comps[0][i] / gform.comps[0][i]).powi(2),
            _ => {
                // A = g^{-1} eta; |eta|^2 = tr(A A)
                let inv = [
                    gform.comps[2][i] / det[i],
                    -gform.comps[1][i] / det[i],
                    gform.comps[0][i] / det[i],
                ];
                let e = [eta.comps[0][i], eta.comps[1][i], eta.comps[2][i]];
                let a11 = inv[0] * e[0] + inv[1] * e[1];
                let a12 = inv[0] * e[1] + inv[1] * e[2];
                let a21 = inv[1] * e[0] + inv[2] * e[1];
                let a22 = inv[1] * e[1] + inv[2] * e[2];
                a11 * a11 + 2.0 * a12 * a21 + a22 * a22
            }
        };
    }
    ScalarField::new(g, out)
}

/// Builds a unit-norm harmonic deformation from class increments.
/// The norm is ‖η‖² = Σ_i ∫ |η_i|²_{Σθ} dV0 (the explicit Σθ metric
/// replaces ω₀; see the report manifest note).
pub fn make_deformation(
    metrics: &MetricTuple,
    increments: &[Vec<f64>],
) -> Result<HarmonicDeformation> {
    let bg = &metrics.decomposition.background;
    let n = metrics.n();
    if increments.len() != n {
        return Err(CkeError::ShapeMismatch("increment arity".into()));
    }
    let nm = bg.masters.len();
    for k in 0..nm {
        let s: f64 = increments.iter().map(|d| d[k]).sum();
        if s.abs() > 1e-10 {
            return Err(CkeError::SumMismatch(format!(
                "class increments on master '{}' sum to {s}",
                bg.masters[k].name
            )));
        }
    }
    let mut forms = Vec::with_capacity(n);
    let mut pots: Vec<ScalarField> = Vec::with_capacity(n);
    let mut any_pot = false;
    for i in 0..n {
        let (eta, u) = harmonic_representative(&increments[i], &metrics.forms[i], metrics, i)?;
        if u.sup_norm() > 1e-12 {
            any_pot = true;
        }
        forms.push(eta);
        pots.push(u);
    }
    // normalize
    let sum_theta = metrics.sum_form();
    let dv0 = metrics.dv0();
    let mut nrm2 = 0.0;
    for eta in &forms {
        let sq = norm2_wrt(eta, &sum_theta);
        nrm2 += integrate(&sq, &dv0);
    }
    let scale = 1.0 / nrm2.sqrt();
    let increments: Vec<Vec<f64>> = increments
        .iter()
        .map(|d| d.iter().map(|v| v * scale).collect())
        .collect();
    let forms: Vec<FormField> = forms.iter().map(|f| f.scale(scale)).collect();
    let potentials = if any_pot {
        Some(PotentialVector::new(
            pots.iter().map(|u| u.scale(scale)).collect(),
        ))
    } else {
        None
    };
    Ok(HarmonicDeformation {
        increments,
        forms,
        potentials,
        normalization: scale,
    })
}

/// Constant value of tr_θ η for a harmonic η (the cohomological pairing):
/// computed as the θ^n-mean of the trace of the closed master representative.
pub fn trace_constant(
    increment: &[f64],
    theta: &FormField,
    bg: &crate::background::ToricBackground,
) -> Result<f64> {
    let g = &theta.grid;
    let parts: Vec<(f64, &MasterPotential)> = increment
        .iter()
        .zip(&bg.masters)
        .map(|(c, m)| (*c, m))
        .collect();
    let eta0 = combined_form(g, &parts, None);
    let tr0 = trace(&eta0, theta)?;
    let dens = VolumeDensity::from_form(theta);
    Ok(integrate(&tr0, &dens) / dens.mass)
}

/// Basis of the deformation subspace with tr_{θ_i} η_i = 0 for all i:
/// solves the linear trace and class-sum conditions on increments, then
/// builds normalized harmonic deformations.
pub fn trace_free_basis(metrics: &MetricTuple) -> Result<Vec<HarmonicDeformation>> {
    let bg = &metrics.decomposition.background;
    let n = metrics.n();
    let nm = bg.masters.len();
    let dimv = n * nm;
    // rows: nm class-sum conditions + n trace conditions
    let mut a = Mat::<f64>::zeros(nm + n, dimv);
    for k in 0..nm {
        for i in 0..n {
            a[(k, i * nm + k)] = 1.0;
        }
    }
    for i in 0..n {
        for k in 0..nm {
            let mut unit = vec![0.0; nm];
            unit[k] = 1.0;
            let c = trace_constant(&unit, &metrics.forms[i], bg)?;
            a[(nm + i, i * nm + k)] = c;
        }
    }
    // null space from the SVD
    let svd = faer::linalg::solvers::Svd::new(a.as_ref())
        .map_err(|_| CkeError::SolverDiverged("svd of trace conditions".into()))?;
    let s = svd.S();
    let v = svd.V();
    let smax = (0..s.dim()).map(|i| s[i]).fold(0.0, f64::max);
    let mut basis = Vec::new();
    for col in 0..dimv {
        let sv = if col < s.dim() { s[col] } else { 0.0 };
        if sv <= 1e-10 * smax.max(1.0) {
            let incs: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..nm).map(|k| v[(i * nm + k, col)]).collect())
                .collect();
            basis.push(make_deformation(metrics, &incs)?);
        }
    }
    Ok(basis)
}

/// h_η: the zero-mean potential of Σ_j η_j (exact in the chart, since the
/// increments cancel and only the numeric harmonic corrections remain).
pub fn h_eta(eta: &HarmonicDeformation, dv0: &VolumeDensity) -> Result<ScalarField> {
    let nm = eta.increments[0].len();
    for k in 0..nm {
        let s: f64 = eta.increments.iter().map(|d| d[k]).sum();
        if s.abs() > 1e-10 {
            return Err(CkeError::NotExact);
        }
    }
    let g = &dv0.grid;
    let mut vals = vec![0.0; g.nodes];
    if let Some(pots) = &eta.potentials {
        for u in &pots.comps {
            for i in 0..g.nodes {
                vals[i] += u.values[i];
            }
        }
    }
    let f = ScalarField::new(g, vals);
    let mean = integrate(&f, dv0) / dv0.mass;
    Ok(ScalarField::new(
        g,
        f.values.iter().map(|v| v - mean).collect(),
    ))
}

/// I_η: component i is |η_i|²_{θ_i} minus its θ_i^n-mean.
pub fn i_eta(eta: &HarmonicDeformation, metrics: &MetricTuple) -> Result<PotentialVector> {
    let n = metrics.n();
    let mut comps = Vec::with_capacity(n);
    for i in 0..n {
        if let Err(node) = metrics.forms[i].check_positive() {
            return Err(CkeError::NotPositive { component: i, node });
        }
        let sq = norm2_wrt(&eta.forms[i], &metrics.forms[i]);
        let dens = VolumeDensity::from_form(&metrics.forms[i]);
        let mean = integrate(&sq, &dens) / dens.mass;
        comps.push(ScalarField::new(
            &metrics.grid,
            sq.values
                .iter()
                .zip(&metrics.grid.live)
                .map(|(v, l)| if *l { v - mean } else { 0.0 })
                .collect(),
        ));
    }
    Ok(PotentialVector::new(comps))
}
