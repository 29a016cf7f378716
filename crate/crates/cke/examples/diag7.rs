use cke::background::{find_background, Decomposition};
use cke::curvature::{facet_bump, combined_form, MetricTuple};
use cke::grid::{ddbar, split, Grid, ScalarField};

fn main() {
    let bg = find_background("bl1p2").unwrap();
    let dec = Decomposition::scaled(&bg, &[1.0]).unwrap();
    let g = Grid::new(&bg, 48, None);
    let base = MetricTuple::from_parts(&dec, &g, dec.combos.clone(),
        vec![ScalarField::zeros(&g)]).unwrap();
    let pert = facet_bump(&base, 0).scale(0.05);
    let parts: Vec<_> = dec.combos[0].iter().zip(&bg.masters).map(|(c, m)| (*c, m)).collect();
    let form = combined_form(&g, &parts, Some(&pert));
    let node = 248usize;
    let (a, b) = split(node, g.m, 2);
    println!("node {} x=({:.2},{:.2})", node, g.x_axis[a], g.x_axis[b]);
    let h = ddbar(&pert);
    println!("pert hess there: {:.3e} {:.3e} {:.3e}", h.comps[0][node], h.comps[1][node], h.comps[2][node]);
    println!("comps: {:.6e} {:.6e} {:.6e}", form.comps[0][node], form.comps[1][node], form.comps[2][node]);
    // base analytic parts
    let e0 = bg.masters[0].eval(&g.node_point(node));
    let e1 = bg.masters[1].eval(&g.node_point(node));
    let hxx = e0.hess[0] + e1.hess[0];
    let hxy = e0.hess[1] + e1.hess[1];
    let hyy = e0.hess[2] + e1.hess[2];
    println!("analytic: {:.6e} {:.6e} {:.6e}", hxx, hxy, hyy);
    let d_analytic: f64 = form.det.as_ref().unwrap()[node];
    println!("stored det {:.3e}   violation {:?}", d_analytic, form.violation);
    let mixed = hxx*h.comps[2][node] + hyy*h.comps[0][node] - 2.0*hxy*h.comps[1][node];
    println!("mixed term {:.3e}", mixed);
}
