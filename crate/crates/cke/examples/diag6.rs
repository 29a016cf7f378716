use cke::background::{find_background, Decomposition};
use cke::curvature::{facet_bump, MetricTuple};
use cke::grid::{split, Grid, ScalarField};

fn main() {
    let bg = find_background("bl1p2").unwrap();
    let dec = Decomposition::scaled(&bg, &[1.0]).unwrap();
    let g = Grid::new(&bg, 48, None);
    let base = MetricTuple::from_parts(&dec, &g, dec.combos.clone(),
        vec![ScalarField::zeros(&g)]).unwrap();
    let pert = facet_bump(&base, 0).scale(0.05);
    match MetricTuple::from_parts(&dec, &g, dec.combos.clone(), vec![pert.clone()]) {
        Ok(mt) => {
            println!("ok, no violation; worst stored det min {:.3e}",
                mt.forms[0].det.as_ref().unwrap().iter().cloned().fold(f64::INFINITY, f64::min));
        }
        Err(e) => {
            println!("error: {e}");
        }
    }
    // find certified-violation nodes manually
    let form = cke::curvature::combined_form(&g,
        &dec.combos[0].iter().zip(&bg.masters).map(|(c, m)| (*c, m)).collect::<Vec<_>>(),
        Some(&pert));
    if let Some(node) = form.violation {
        let (a, b) = split(node, g.m, 2);
        println!("violation at node {} x=({:.2},{:.2}) dens {:.2e}", node,
            g.x_axis[a], g.x_axis[b],
            g.ref_density[node] / g.ref_density.iter().cloned().fold(0.0, f64::max));
        println!("comps: {:.4e} {:.4e} {:.4e}",
            form.comps[0][node], form.comps[1][node], form.comps[2][node]);
    }
}
// (run again with more detail via env var)
