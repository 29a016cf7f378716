use cke::background::{find_background, Decomposition};
use cke::curvature::{facet_bump, MetricTuple};
use cke::grid::{ddbar, split, Grid, ScalarField};

fn main() {
    let bg = find_background("bl1p2").unwrap();
    let dec = Decomposition::scaled(&bg, &[1.0]).unwrap();
    let g = Grid::new(&bg, 48, None);
    let base = MetricTuple::from_parts(&dec, &g, dec.combos.clone(),
        vec![ScalarField::zeros(&g)]).unwrap();
    let pert = facet_bump(&base, 0).scale(0.05);
    println!("pert sup {:.3e}", pert.sup_norm());
    let h = ddbar(&pert);
    let det: Vec<f64> = base.forms[0].det.clone().unwrap();
    let mut worst = (0usize, f64::INFINITY);
    for i in 0..g.nodes {
        if !g.cone[i] { continue; }
        let wxx = base.forms[0].comps[0][i] + h.comps[0][i];
        let wyy = base.forms[0].comps[2][i] + h.comps[2][i];
        let wxy = base.forms[0].comps[1][i] + h.comps[1][i];
        let d = wxx * wyy - wxy * wxy;
        let rel = d / det[i];
        if rel < worst.1 { worst = (i, rel); }
    }
    let (a, b) = split(worst.0, g.m, 2);
    let i = worst.0;
    println!("worst det ratio {:.4} at x=({:.1},{:.1}) dens={:.1e}", worst.1,
        g.x_axis[a], g.x_axis[b], g.ref_density[i] / g.ref_density.iter().cloned().fold(0.0, f64::max));
    println!("base: {:.3e} {:.3e} {:.3e} det {:.3e}; pert-hess: {:.3e} {:.3e} {:.3e}",
        base.forms[0].comps[0][i], base.forms[0].comps[1][i], base.forms[0].comps[2][i], det[i],
        h.comps[0][i], h.comps[1][i], h.comps[2][i]);
    println!("pert value at node: {:.3e}", pert.values[i]);
}
