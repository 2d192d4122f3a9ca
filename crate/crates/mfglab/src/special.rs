//! Small special-function kernel shared by the solvers: the Bernoulli
//! function of exponential fitting, Epstein zeta values for the
//! singular-cell quadrature weight, Gaussian moments, and a Gauss-Legendre
//! rule for the few smooth auxiliary integrals computed at startup.

pub use statrs::function::erf::erf;
use statrs::function::gamma::{gamma, gamma_ur};

/// Bernoulli function B(z) = z / (e^z - 1), the building block of
/// exponential-fitting flux schemes. Continuous at 0 with B(0) = 1,
/// positive for all real z, and B(-z) = B(z) + z.
#[inline]
pub fn bernoulli(z: f64) -> f64 {
    if z.abs() < 1e-13 {
        // first-order Taylor; the quadratic term is below double precision
        1.0 - 0.5 * z
    } else {
        // exp_m1 keeps full accuracy for small |z| and the large-z limits
        // fall out naturally (z/inf = 0 upward, -z downward)
        z / z.exp_m1()
    }
}

/// Upper incomplete gamma Gamma(a, x) for a > 0.
fn upper_gamma(a: f64, x: f64) -> f64 {
    gamma_ur(a, x) * gamma(a)
}

/// Analytic continuation of the simple-cubic Epstein zeta function
/// Z_N(s) = sum over k in Z^N \ {0} of |k|^{-s}, evaluated for 0 < s < N
/// where the defining series diverges and the continuation is the finite
/// part left after subtracting the density background.
///
/// Uses the incomplete-gamma (theta-function) splitting: with
/// Lambda(s) = pi^{-s/2} Gamma(s/2) Z_N(s),
///
/// ```text
/// Lambda(s) = 2/(s-N) - 2/s
///   + sum_{k != 0} [ (pi|k|^2)^{-s/2}   Gamma(s/2,   pi|k|^2)
///                  + (pi|k|^2)^{-(N-s)/2} Gamma((N-s)/2, pi|k|^2) ]
/// ```
///
/// The lattice sum converges like exp(-pi |k|^2); truncation at |k|^2 <= 64
/// is far below double precision.
pub fn epstein_zeta(dim: usize, s: f64) -> f64 {
    assert!((1..=3).contains(&dim), "epstein_zeta supports dim 1..=3");
    let n = dim as f64;
    assert!(
        s > 0.0 && s < n,
        "epstein_zeta continuation range is 0 < s < N, got s={s}, N={n}"
    );
    let mut lattice = 0.0;
    let kmax: i64 = 8;
    let mut k = [0i64; 3];
    let ranges: Vec<i64> = (-kmax..=kmax).collect();
    let mut visit = |k: &[i64; 3]| {
        let q: i64 = k[..dim].iter().map(|&v| v * v).sum();
        if q == 0 || q > kmax * kmax {
            return;
        }
        let piq = std::f64::consts::PI * q as f64;
        lattice += piq.powf(-0.5 * s) * upper_gamma(0.5 * s, piq)
            + piq.powf(-0.5 * (n - s)) * upper_gamma(0.5 * (n - s), piq);
    };
    match dim {
        1 => {
            for &a in &ranges {
                k[0] = a;
                visit(&k);
            }
        }
        2 => {
            for &a in &ranges {
                for &b in &ranges {
                    k = [a, b, 0];
                    visit(&k);
                }
            }
        }
        _ => {
            for &a in &ranges {
                for &b in &ranges {
                    for &c in &ranges {
                        k = [a, b, c];
                        visit(&k);
                    }
                }
            }
        }
    }
    let lambda = 2.0 / (s - n) - 2.0 / s + lattice;
    std::f64::consts::PI.powf(0.5 * s) / gamma(0.5 * s) * lambda
}

/// Average of the Riesz kernel |y|^{alpha-N} over the grid cell
/// [-h/2, h/2]^N, times the cell volume h^N: the integral of the kernel
/// over one cell. Closed form in 1D; in higher dimensions the kernel's
/// exact scaling I(h) = h^alpha I(1) reduces the computation to one smooth
/// integral over the dyadic shell between nested unit cubes.
pub fn kernel_cell_integral(dim: usize, alpha: f64, h: f64) -> f64 {
    assert!(alpha > 0.0 && alpha < dim as f64);
    if dim == 1 {
        // 2 * integral_0^{h/2} y^{alpha-1} dy
        return 2.0 * (0.5 * h).powf(alpha) / alpha;
    }
    h.powf(alpha) * unit_cell_integral(dim, alpha)
}

/// integral over [-1/2,1/2]^N of |y|^{alpha-N} dy via the scaling identity
/// I = Shell / (1 - 2^{-alpha}), where Shell is the integral over the cube
/// minus its half-scale copy (a smooth region handled by tensor Gauss
/// quadrature on its 3^N - 1 rectangular pieces).
fn unit_cell_integral(dim: usize, alpha: f64) -> f64 {
    let (nodes, weights) = gauss_legendre(24);
    let intervals = [(-0.5, -0.25), (-0.25, 0.25), (0.25, 0.5)];
    let mut shell = 0.0;
    let piece_count = 3usize.pow(dim as u32);
    for piece in 0..piece_count {
        let mut choice = [0usize; 3];
        let mut rest = piece;
        for c in choice.iter_mut().take(dim) {
            *c = rest % 3;
            rest /= 3;
        }
        if choice[..dim].iter().all(|&c| c == 1) {
            continue; // the inner cube is handled by the scaling identity
        }
        shell += box_integral(dim, alpha, &choice, &intervals, &nodes, &weights);
    }
    shell / (1.0 - 2f64.powf(-alpha))
}

fn box_integral(
    dim: usize,
    alpha: f64,
    choice: &[usize; 3],
    intervals: &[(f64, f64); 3],
    nodes: &[f64],
    weights: &[f64],
) -> f64 {
    let q = nodes.len();
    let mut total = 0.0;
    let mut idx = vec![0usize; dim];
    loop {
        let mut w = 1.0;
        let mut r2 = 0.0;
        for d in 0..dim {
            let (a, b) = intervals[choice[d]];
            let mid = 0.5 * (a + b);
            let half = 0.5 * (b - a);
            let y = mid + half * nodes[idx[d]];
            w *= half * weights[idx[d]];
            r2 += y * y;
        }
        total += w * r2.powf(0.5 * (alpha - dim as f64));
        // odometer over the tensor indices
        let mut d = 0;
        loop {
            if d == dim {
                return total;
            }
            idx[d] += 1;
            if idx[d] < q {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

/// Gauss-Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Newton iteration from the Chebyshev-like initial guess
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Legendre polynomial P_n and its derivative at x.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// E|Y|^p for a standard Gaussian Y in R^N: 2^{p/2} Gamma((N+p)/2) / Gamma(N/2).
pub fn gaussian_radial_moment(dim: usize, p: f64) -> f64 {
    let n = dim as f64;
    2f64.powf(0.5 * p) * gamma(0.5 * (n + p)) / gamma(0.5 * n)
}
