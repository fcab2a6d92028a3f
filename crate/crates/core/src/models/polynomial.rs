use nalgebra::{DMatrix, DVector};

/// Sparse polynomial in the mean parameters, as a list of monomials.
///
/// Expected log densities of Gaussian and exponential-family terms that are
/// multilinear across independent blocks take this form exactly, which gives
/// exact gradients and Hessians.
#[derive(Debug, Clone, Default)]
pub(crate) struct Polynomial {
    pub constant: f64,
    terms: Vec<(f64, Vec<usize>)>,
}

impl Polynomial {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, coef: f64, vars: &[usize]) {
        if coef != 0.0 {
            self.terms.push((coef, vars.to_vec()));
        }
    }

    fn product_except(m: &DVector<f64>, vars: &[usize], skip: &[usize]) -> f64 {
        vars.iter().enumerate().filter(|(p, _)| !skip.contains(p)).map(|(_, &i)| m[i]).product()
    }

    pub fn value(&self, m: &DVector<f64>) -> f64 {
        self.constant + self.terms.iter().map(|(c, v)| c * Self::product_except(m, v, &[])).sum::<f64>()
    }

    pub fn add_gradient(&self, m: &DVector<f64>, g: &mut DVector<f64>) {
        for (c, v) in &self.terms {
            for (p, &i) in v.iter().enumerate() {
                g[i] += c * Self::product_except(m, v, &[p]);
            }
        }
    }

    pub fn add_hessian(&self, m: &DVector<f64>, h: &mut DMatrix<f64>) {
        for (c, v) in &self.terms {
            for (p, &i) in v.iter().enumerate() {
                for (r, &j) in v.iter().enumerate() {
                    if p != r {
                        h[(i, j)] += c * Self::product_except(m, v, &[p, r]);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivatives_of_a_cubic() {
        // 2 + 3 x0 x1 x2 - x1^2
        let mut p = Polynomial::new();
        p.constant = 2.0;
        p.add(3.0, &[0, 1, 2]);
        p.add(-1.0, &[1, 1]);
        let m = DVector::from_vec(vec![1.5, -2.0, 0.5]);
        assert!((p.value(&m) - (2.0 + 3.0 * 1.5 * -2.0 * 0.5 - 4.0)).abs() < 1e-14);
        let mut g = DVector::zeros(3);
        p.add_gradient(&m, &mut g);
        assert_eq!(g.as_slice(), &[3.0 * -2.0 * 0.5, 3.0 * 1.5 * 0.5 + 4.0, 3.0 * 1.5 * -2.0]);
        let mut h = DMatrix::zeros(3, 3);
        p.add_hessian(&m, &mut h);
        assert_eq!(h[(1, 1)], -2.0);
        assert_eq!(h[(0, 1)], 1.5);
        assert_eq!(h[(1, 0)], 1.5);
        assert_eq!(h[(0, 2)], -6.0);
        assert_eq!(h[(1, 2)], 4.5);
        assert_eq!(h[(0, 0)], 0.0);
    }
}
