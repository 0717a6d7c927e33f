//! Gauss-Legendre quadrature on intervals, rectangles and boxes.

/// Nodes and weights of the n-point Gauss-Legendre rule on [-1, 1],
/// computed by Newton iteration on the Legendre polynomial.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = (n + 1) / 2;
    for k in 0..m {
        // Chebyshev-based initial guess
        let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // evaluate P_n(x) and P_n'(x) by recurrence
            let mut p0 = 1.0;
            let mut p1 = x;
            for j in 2..=n {
                let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            let (p, pm1) = if n == 1 { (x, 1.0) } else { (p1, p0) };
            dp = n as f64 * (x * p - pm1) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[k] = -x;
        nodes[n - 1 - k] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[k] = w;
        weights[n - 1 - k] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

/// Integrate f over [a, b] with the n-point rule.
pub fn integrate_1d(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let (x, w) = gauss_legendre(n);
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut acc = 0.0;
    for k in 0..n {
        acc += w[k] * f(mid + half * x[k]);
    }
    acc * half
}

/// Integrate f over the axis-aligned box `[lo, hi]` restricted to the first
/// `dim` axes with a tensor rule of n points per axis.
pub fn integrate_box(
    f: &dyn Fn(&[f64; 3]) -> f64,
    lo: &[f64; 3],
    hi: &[f64; 3],
    dim: usize,
    n: usize,
) -> f64 {
    let (x, w) = gauss_legendre(n);
    let mut pt = [0.0f64; 3];
    let mut acc = 0.0;
    let mut jac = 1.0;
    for a in 0..dim {
        jac *= 0.5 * (hi[a] - lo[a]);
    }
    let map = |a: usize, t: f64| 0.5 * (lo[a] + hi[a]) + 0.5 * (hi[a] - lo[a]) * t;
    match dim {
        1 => {
            for i in 0..n {
                pt[0] = map(0, x[i]);
                acc += w[i] * f(&pt);
            }
        }
        2 => {
            for i in 0..n {
                pt[0] = map(0, x[i]);
                for j in 0..n {
                    pt[1] = map(1, x[j]);
                    acc += w[i] * w[j] * f(&pt);
                }
            }
        }
        3 => {
            for i in 0..n {
                pt[0] = map(0, x[i]);
                for j in 0..n {
                    pt[1] = map(1, x[j]);
                    for k in 0..n {
                        pt[2] = map(2, x[k]);
                        acc += w[i] * w[j] * w[k] * f(&pt);
                    }
                }
            }
        }
        _ => panic!("dim must be 1..=3"),
    }
    acc * jac
}

/// Integrate f over the (dim-1)-dimensional face of a box: the face is
/// normal to `axis` at coordinate `plane`, spanning `[lo, hi]` on the
/// remaining axes.
pub fn integrate_face(
    f: &dyn Fn(&[f64; 3]) -> f64,
    axis: usize,
    plane: f64,
    lo: &[f64; 3],
    hi: &[f64; 3],
    dim: usize,
    n: usize,
) -> f64 {
    let (x, w) = gauss_legendre(n);
    let others: Vec<usize> = (0..dim).filter(|&a| a != axis).collect();
    let mut pt = [0.0f64; 3];
    pt[axis] = plane;
    let map = |a: usize, t: f64| 0.5 * (lo[a] + hi[a]) + 0.5 * (hi[a] - lo[a]) * t;
    let mut jac = 1.0;
    for &a in &others {
        jac *= 0.5 * (hi[a] - lo[a]);
    }
    let mut acc = 0.0;
    match others.len() {
        1 => {
            let a = others[0];
            for i in 0..n {
                pt[a] = map(a, x[i]);
                acc += w[i] * f(&pt);
            }
        }
        2 => {
            let (a, b) = (others[0], others[1]);
            for i in 0..n {
                pt[a] = map(a, x[i]);
                for j in 0..n {
                    pt[b] = map(b, x[j]);
                    acc += w[i] * w[j] * f(&pt);
                }
            }
        }
        _ => panic!("face quadrature needs dim 2 or 3"),
    }
    acc * jac
}
