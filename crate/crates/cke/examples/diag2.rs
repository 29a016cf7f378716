use cke::background::{find_background, Decomposition};
use cke::curvature::MetricTuple;
use cke::grid::{Grid, ScalarField};
use cke::obstruction::{futaki_coupled, HolomorphicField};

fn main() {
    let bg = find_background("bl1p2").unwrap();
    let dec = Decomposition::scaled(&bg, &[1.0]).unwrap();
    for m in [32usize, 48, 64] {
        let g = Grid::new(&bg, m, None);
        let mt = MetricTuple::from_parts(&dec, &g, dec.combos.clone(),
            vec![ScalarField::zeros(&g)]).unwrap();
        let fx = futaki_coupled(&mt, &HolomorphicField::generator(2, 0)).unwrap();
        let fy = futaki_coupled(&mt, &HolomorphicField::generator(2, 1)).unwrap();
        println!("m={m}: fx={fx:.10} fy={fy:.10}  (expect 1/12 = {:.10})", 1.0/12.0);
    }
}
