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
    let h = ddbar(&pert);
    let mut eta = 0.0f64;
    for c in &h.comps { for v in c { eta = eta.max(v.abs()); } }
    println!("numeric hess global max: {:.3e}, eta = {:.3e}", eta, eta*1e-4);
    if let Some(node) = form.violation {
        let (a, b) = split(node, g.m, 2);
        println!("violation node {} x=({:.2},{:.2})", node, g.x_axis[a], g.x_axis[b]);
        println!("pert hess: {:.3e} {:.3e} {:.3e}", h.comps[0][node], h.comps[1][node], h.comps[2][node]);
        println!("comps: {:.4e} {:.4e} {:.4e}", form.comps[0][node], form.comps[1][node], form.comps[2][node]);
    } else { println!("no violation"); }
}
