use mfglab::grid::{Grid, ScalarField};
use mfglab::riesz::RieszOperator;
use mfglab::special::erf;

fn main() {
    let sigma = 0.8f64;
    for (hw, n) in [(4.0f64, 49usize), (5.0, 61), (4.0, 33)] {
        let g = Grid::new(3, hw, n).unwrap();
        let h = g.spacing();
        let norm = 1.0 / (sigma * sigma * 2.0 * std::f64::consts::PI).powf(1.5);
        let m = ScalarField::from_fn(g, |x| {
            let r2 = x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
            norm * (-0.5 * r2 / (sigma * sigma)).exp()
        });
        let op = RieszOperator::new(g, 2.0).unwrap();
        let phi = op.convolve(&m);
        let mut worst: f64 = 0.0;
        let mut worst_r = 0.0;
        for i in 0..g.node_count() {
            let r = g.radius(i);
            if r <= 3.0 * h {
                continue;
            }
            let exact = erf(r / (sigma * 2.0f64.sqrt())) / r;
            let rel = (phi.values[i] - exact).abs() / exact;
            if rel > worst {
                worst = rel;
                worst_r = r;
            }
        }
        println!("L={hw} n={n:3} h={h:.3}  worst rel={worst:.3e} at r={worst_r:.2}");
    }
}
