//! Gauss-Legendre rules on the unit interval.

use std::f64::consts::PI;

/// A one-dimensional quadrature rule on `[0, 1]`, nodes ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// `q`-point Gauss-Legendre rule mapped to `[0, 1]`; exact for degree `2q - 1`.
///
/// Roots of the Legendre polynomial are found by Newton iteration from the
/// Tricomi initial guesses.
pub fn gauss_legendre(q: usize) -> GaussRule {
    assert!(q >= 1, "a Gauss rule needs at least one point");
    let mut nodes = Vec::with_capacity(q);
    let mut weights = Vec::with_capacity(q);
    for i in 0..q {
        let mut x = (PI * (i as f64 + 0.75) / (q as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(q, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(q, x);
        if d != 0.0 {
            dp = d;
        }
        // x runs from near 1 downward; t = (1 - x)/2 ascends on [0, 1].
        nodes.push(0.5 * (1.0 - x));
        weights.push(1.0 / ((1.0 - x * x) * dp * dp));
    }
    GaussRule { nodes, weights }
}

fn legendre_with_derivative(q: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=q {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    if q == 0 {
        return (1.0, 0.0);
    }
    let d = q as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_one() {
        for q in 1..=8 {
            let rule = gauss_legendre(q);
            let s: f64 = rule.weights.iter().sum();
            assert!((s - 1.0).abs() < 1e-14, "q={q}: {s}");
        }
    }

    #[test]
    fn exact_for_degree_two_q_minus_one() {
        for q in 1..=6 {
            let rule = gauss_legendre(q);
            for deg in 0..(2 * q) {
                let approx: f64 = rule
                    .nodes
                    .iter()
                    .zip(&rule.weights)
                    .map(|(x, w)| w * x.powi(deg as i32))
                    .sum();
                let exact = 1.0 / (deg as f64 + 1.0);
                assert!((approx - exact).abs() < 1e-14, "q={q} deg={deg}");
            }
        }
    }

    #[test]
    fn two_point_nodes() {
        let rule = gauss_legendre(2);
        let off = 0.5 / 3f64.sqrt();
        assert!((rule.nodes[0] - (0.5 - off)).abs() < 1e-15);
        assert!((rule.nodes[1] - (0.5 + off)).abs() < 1e-15);
    }
}
