use cke::background::{find_background, Decomposition};
use cke::curvature::{ricci_potential, MetricTuple};
use cke::grid::{ddbar, split, Grid, ScalarField};

fn main() {
    let bg = find_background("p1").unwrap();
    let dec = Decomposition::scaled(&bg, &[0.4, 0.6]).unwrap();
    let g = Grid::new(&bg, 64, None);
    let pert = ScalarField::from_fn(&g, |p| 0.03 * bg.masters[0].eval(p).hess[0] / 0.5);
    let mt = MetricTuple::from_parts(&dec, &g, dec.combos.clone(),
        vec![pert, ScalarField::zeros(&g)]).unwrap();
    let rp = ricci_potential(&mt).unwrap();
    let i = 0;
    let hf = ddbar(&rp.f.comps[i]);
    let det = mt.forms[i].det.clone().unwrap();
    let logdet = ScalarField::new(&g,
        det.iter().zip(&g.live).map(|(d, l)| if *l { d.ln() } else { 0.0 }).collect());
    let h_logdet = ddbar(&logdet);
    let mut worst = (0usize, 0.0f64);
    for idx in 0..g.nodes {
        if g.core[idx] {
            let sum_w: f64 = (0..2).map(|j| mt.forms[j].comps[0][idx]).sum();
            let lhs = hf.comps[0][idx];
            let rhs = -h_logdet.comps[0][idx] - sum_w;
            let e = (lhs - rhs).abs();
            if e > worst.1 { worst = (idx, e); }
        }
    }
    let (a, _) = split(worst.0, g.m, 1);
    println!("worst err {:.3e} at s={:.5} x={:.2}", worst.1, g.s[a], g.x_axis[a]);
    // error profile by |s| deciles
    for cut in [0.5, 0.8, 0.9, 0.95, 0.99] {
        let mut e = 0.0f64;
        for idx in 0..g.nodes {
            let (a, _) = split(idx, g.m, 1);
            if g.core[idx] && g.s[a].abs() < cut {
                let sum_w: f64 = (0..2).map(|j| mt.forms[j].comps[0][idx]).sum();
                let lhs = hf.comps[0][idx];
                let rhs = -h_logdet.comps[0][idx] - sum_w;
                e = e.max((lhs - rhs).abs());
            }
        }
        println!("  sup over |s|<{cut}: {e:.3e}");
    }
}
