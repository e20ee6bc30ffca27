use std::collections::VecDeque;

use crate::error::Result;

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub start_value: f64,
    pub steps: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Limited-memory BFGS ascent with Armijo backtracking. `f` returns the value
/// and gradient; a value of `-inf` marks an infeasible point and is always
/// rejected by the line search. The returned value is never below the start.
pub(crate) fn maximize<F>(mut f: F, x0: Vec<f64>, memory: usize, max_steps: usize, max_line_search: usize) -> Result<LbfgsOutcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    const C1: f64 = 1e-4;
    let (mut fx, mut g) = f(&x0)?;
    let start_value = fx;
    let mut x = x0;
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut steps = 0;
    if !fx.is_finite() {
        return Ok(LbfgsOutcome { x, value: fx, start_value, steps });
    }

    while steps < max_steps {
        let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if gmax == 0.0 {
            break;
        }
        // two-loop recursion on the ascent problem (minimizing -f)
        let mut q: Vec<f64> = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        let gamma = match hist.back() {
            Some((s, y, _)) => dot(s, y) / dot(y, y),
            None => 1.0 / gmax,
        };
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut dir = q;
        let mut slope = dot(&g, &dir);
        if !(slope > 0.0) {
            hist.clear();
            dir = g.iter().map(|v| v / gmax).collect();
            slope = dot(&g, &dir);
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..max_line_search {
            let xn: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + t * d).collect();
            let (fn_, gn) = f(&xn)?;
            if fn_.is_finite() && fn_ >= fx + C1 * t * slope && fn_ > fx {
                accepted = Some((xn, fn_, gn));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else { break };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        // gradient of -f
        let y: Vec<f64> = g.iter().zip(&gn).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if hist.len() == memory {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        let gain = fn_ - fx;
        x = xn;
        fx = fn_;
        g = gn;
        steps += 1;
        if gain <= 1e-12 * fx.abs().max(1.0) {
            break;
        }
    }
    Ok(LbfgsOutcome { x, value: fx, start_value, steps })
}
