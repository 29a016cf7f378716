use cke::background::{find_background, Decomposition};
use cke::curvature::{reference_metric_tuple, ricci_potential};
use cke::grid::{Grid, split};

fn main() {
    let bg = find_background("cp2").unwrap();
    let dec = Decomposition::scaled(&bg, &[0.2, 0.3, 0.5]).unwrap();
    for m in [32usize, 48, 64] {
        let g = Grid::new(&bg, m, None);
        let mt = reference_metric_tuple(&dec, &g).unwrap();
        let rp = ricci_potential(&mt).unwrap();
        println!("m={m} c={:.3} sup={:?} consts={:?}", g.stretch, rp.sup_norms, rp.constants);
        // where is the sup attained?
        let f = &rp.f.comps[0];
        let mut best = (0usize, 0.0f64);
        for i in 0..g.nodes {
            if g.core[i] && f.values[i].abs() > best.1 {
                best = (i, f.values[i].abs());
            }
        }
        let (a, b) = split(best.0, g.m, 2);
        println!("  max |f| at node s=({:.4},{:.4}) x=({:.2},{:.2}): {:.2e}",
            g.s[a], g.s[b], g.x_axis[a], g.x_axis[b], best.1);
        println!("  affine coef: {:?}", rp.affine[0]);
    }
}
