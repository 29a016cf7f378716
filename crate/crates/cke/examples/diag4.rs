use cke::background::{find_background, Decomposition};
use cke::curvature::{moment_polynomial, MetricTuple};
use cke::grid::{ddbar, split, Grid, ScalarField};

fn main() {
    let bg = find_background("bl1p2").unwrap();
    let dec = Decomposition::scaled(&bg, &[1.0]).unwrap();
    let g = Grid::new(&bg, 48, None);
    let base = MetricTuple::from_parts(&dec, &g, dec.combos.clone(),
        vec![ScalarField::zeros(&g)]).unwrap();
    // single moment-poly term like the test's worst case
    let pert = moment_polynomial(&base, 0, &[(0.25, [2, 0]), (-0.25, [1, 1]), (0.25, [0, 2])]).scale(0.02);
    let h = ddbar(&pert);
    let det: Vec<f64> = base.forms[0].det.clone().unwrap();
    let mut worst = (0usize, f64::INFINITY);
    for i in 0..g.nodes {
        if !g.core[i] { continue; }
        let wxx = base.forms[0].comps[0][i] + h.comps[0][i];
        let wyy = base.forms[0].comps[2][i] + h.comps[2][i];
        let wxy = base.forms[0].comps[1][i] + h.comps[1][i];
        let d = wxx * wyy - wxy * wxy;
        let rel = d / det[i];
        if rel < worst.1 { worst = (i, rel); }
    }
    let (a, b) = split(worst.0, g.m, 2);
    println!("worst det ratio {:.3} at x=({:.1},{:.1}) dens={:.1e}", worst.1,
        g.x_axis[a], g.x_axis[b], g.ref_density[worst.0] / g.ref_density.iter().cloned().fold(0.0, f64::max));
    // hessian magnitudes there
    let i = worst.0;
    println!("base: {:.2e} {:.2e} {:.2e}; pert: {:.2e} {:.2e} {:.2e}",
        base.forms[0].comps[0][i], base.forms[0].comps[1][i], base.forms[0].comps[2][i],
        h.comps[0][i], h.comps[1][i], h.comps[2][i]);
}
