//! Nelder–Mead simplex minimisation with box projection.

/// Outcome of one simplex run.
#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    /// Simplex diameter fell below the tolerance before the iteration cap.
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMead {
    /// Initial simplex edge along each coordinate.
    pub step: f64,
    /// Convergence threshold on the simplex diameter (max vertex distance
    /// from the best vertex, infinity norm).
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NelderMead {
    fn default() -> Self {
        Self { step: 0.5, tol: 1e-8, max_iter: 2000 }
    }
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for k in 0..x.len() {
        x[k] = x[k].clamp(lower[k], upper[k]);
    }
}

impl NelderMead {
    /// Minimises `f` from `x0` inside the box `[lower, upper]`. Non-finite
    /// objective values are treated as `+∞`.
    pub fn minimize<F: FnMut(&[f64]) -> f64>(&self, mut f: F, x0: &[f64], lower: &[f64], upper: &[f64]) -> Minimum {
        let n = x0.len();
        let mut eval = |x: &[f64]| {
            let v = f(x);
            if v.is_nan() {
                f64::INFINITY
            } else {
                v
            }
        };
        let mut start = x0.to_vec();
        project(&mut start, lower, upper);
        let mut simplex = vec![start.clone()];
        for k in 0..n {
            let mut v = start.clone();
            v[k] += self.step;
            if v[k] > upper[k] {
                v[k] = start[k] - self.step;
            }
            project(&mut v, lower, upper);
            simplex.push(v);
        }
        let mut values: Vec<f64> = simplex.iter().map(|v| eval(v)).collect();
        let mut iterations = 0;
        let mut converged = false;
        loop {
            // Stable sort keeps the earlier vertex first on ties.
            let mut order: Vec<usize> = (0..=n).collect();
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
            simplex = order.iter().map(|&i| simplex[i].clone()).collect();
            values = order.iter().map(|&i| values[i]).collect();

            let diameter = simplex[1..]
                .iter()
                .map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
                .fold(0.0, f64::max);
            if diameter < self.tol {
                converged = true;
                break;
            }
            if iterations >= self.max_iter {
                break;
            }
            iterations += 1;

            let mut centroid = vec![0.0; n];
            for v in &simplex[..n] {
                for k in 0..n {
                    centroid[k] += v[k] / n as f64;
                }
            }
            let towards = |t: f64, from: &[f64]| -> Vec<f64> {
                let mut x: Vec<f64> = (0..n).map(|k| centroid[k] + t * (from[k] - centroid[k])).collect();
                project(&mut x, lower, upper);
                x
            };
            let worst = simplex[n].clone();
            let reflected = towards(-1.0, &worst);
            let fr = eval(&reflected);
            if fr < values[0] {
                let expanded = towards(-2.0, &worst);
                let fe = eval(&expanded);
                if fe < fr {
                    simplex[n] = expanded;
                    values[n] = fe;
                } else {
                    simplex[n] = reflected;
                    values[n] = fr;
                }
                continue;
            }
            if fr < values[n - 1] {
                simplex[n] = reflected;
                values[n] = fr;
                continue;
            }
            let (contracted, fc) = if fr < values[n] {
                let c = towards(-0.5, &worst);
                let fc = eval(&c);
                (c, fc)
            } else {
                let c = towards(0.5, &worst);
                let fc = eval(&c);
                (c, fc)
            };
            if fc < fr.min(values[n]) {
                simplex[n] = contracted;
                values[n] = fc;
                continue;
            }
            let best = simplex[0].clone();
            for i in 1..=n {
                let mut x: Vec<f64> = (0..n).map(|k| best[k] + 0.5 * (simplex[i][k] - best[k])).collect();
                project(&mut x, lower, upper);
                values[i] = eval(&x);
                simplex[i] = x;
            }
        }
        Minimum { x: simplex[0].clone(), value: values[0], iterations, converged }
    }
}
