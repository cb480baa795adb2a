//! Limited-memory BFGS with Armijo backtracking.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub gtol: f64,
    pub max_iter: usize,
    pub c1: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            memory: 10,
            gtol: 1e-8,
            max_iter: 20_000,
            c1: 1e-4,
            backtrack: 0.5,
            max_backtracks: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIter,
    LineSearchFailure,
    NonFinite,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub initial_value: f64,
    pub grad_inf: f64,
    pub iterations: usize,
    pub termination: Termination,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Minimizes `f`, which writes the gradient into its second argument and
/// returns the value.
pub fn minimize<F>(mut f: F, x0: Vec<f64>, opts: &LbfgsOptions) -> LbfgsResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let initial_value = fx;
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut iterations = 0;
    if !fx.is_finite() || g.iter().any(|c| !c.is_finite()) {
        return LbfgsResult {
            grad_inf: inf_norm(&g),
            x,
            value: fx,
            initial_value,
            iterations,
            termination: Termination::NonFinite,
        };
    }
    let mut xn = vec![0.0; n];
    let mut gn = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut alpha = vec![0.0; opts.memory];
    let termination = loop {
        if inf_norm(&g) < opts.gtol {
            break Termination::Converged;
        }
        if iterations >= opts.max_iter {
            break Termination::MaxIter;
        }
        // Two-loop recursion.
        d.copy_from_slice(&g);
        for (idx, (s, y, rho)) in hist.iter().enumerate().rev() {
            let a = rho * dot(s, &d);
            alpha[idx] = a;
            for i in 0..n {
                d[i] -= a * y[i];
            }
        }
        if let Some((s, y, _)) = hist.back() {
            let gamma = dot(s, y) / dot(y, y);
            for v in d.iter_mut() {
                *v *= gamma;
            }
        }
        for (idx, (s, y, rho)) in hist.iter().enumerate() {
            let b = rho * dot(y, &d);
            for i in 0..n {
                d[i] += s[i] * (alpha[idx] - b);
            }
        }
        for v in d.iter_mut() {
            *v = -*v;
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            hist.clear();
            for i in 0..n {
                d[i] = -g[i];
            }
            slope = dot(&g, &d);
        }

        let mut accepted = false;
        let mut steepest_tried = hist.is_empty();
        loop {
            let mut t = if hist.is_empty() {
                (1.0 / inf_norm(&g)).min(1.0)
            } else {
                1.0
            };
            for _ in 0..opts.max_backtracks {
                for i in 0..n {
                    xn[i] = x[i] + t * d[i];
                }
                let fnew = f(&xn, &mut gn);
                let armijo = fnew <= fx + opts.c1 * t * slope && fnew < fx;
                // Below the rounding floor of f the Armijo test is blind; accept
                // steps that keep f flat and shrink the gradient instead.
                let floor = (fnew - fx).abs() <= 1e-14 * (1.0 + fx.abs())
                    && dot(&gn, &d).abs() <= -slope
                    && inf_norm(&gn) < inf_norm(&g);
                if fnew.is_finite() && (armijo || floor) {
                    accepted = true;
                    let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
                    let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
                    let sy = dot(&s, &y);
                    if sy > 1e-14 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
                        if hist.len() == opts.memory {
                            hist.pop_front();
                        }
                        hist.push_back((s, y, 1.0 / sy));
                    }
                    std::mem::swap(&mut x, &mut xn);
                    std::mem::swap(&mut g, &mut gn);
                    fx = fnew;
                    break;
                }
                t *= opts.backtrack;
            }
            if accepted || steepest_tried {
                break;
            }
            // Retry once from steepest descent.
            hist.clear();
            for i in 0..n {
                d[i] = -g[i];
            }
            slope = dot(&g, &d);
            steepest_tried = true;
        }
        if !accepted {
            break Termination::LineSearchFailure;
        }
        iterations += 1;
    };
    LbfgsResult {
        grad_inf: inf_norm(&g),
        x,
        value: fx,
        initial_value,
        iterations,
        termination,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let r = minimize(
            |x, g| {
                let (a, b) = (x[0], x[1]);
                g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
                g[1] = 200.0 * (b - a * a);
                (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
            },
            vec![-1.2, 1.0],
            &LbfgsOptions::default(),
        );
        assert_eq!(r.termination, Termination::Converged);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn already_optimal() {
        let r = minimize(
            |x, g| {
                g[0] = 2.0 * x[0];
                x[0] * x[0]
            },
            vec![0.0],
            &LbfgsOptions::default(),
        );
        assert_eq!(r.iterations, 0);
        assert_eq!(r.x, vec![0.0]);
    }
}
