//! Basis functions ψ(t) on the unit interval and their design matrices.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// A family of `N` functions spanning the memory signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisFamily {
    /// Indicator functions of `N` equal boxes; the last box is closed on the right.
    Rectangular { size: usize },
    /// Gaussian bumps centred at `(j + 0.5) / N` with a shared width.
    GaussianRbf { size: usize, width: f64 },
}

impl BasisFamily {
    pub fn rectangular(size: usize) -> Result<Self> {
        let b = BasisFamily::Rectangular { size };
        b.validate()?;
        Ok(b)
    }

    /// Gaussian family; `width = None` selects `1 / N`.
    pub fn gaussian(size: usize, width: Option<f64>) -> Result<Self> {
        let width = width.unwrap_or(1.0 / size.max(1) as f64);
        let b = BasisFamily::GaussianRbf { size, width };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size() == 0 {
            return Err(invalid("basis size must be at least 1"));
        }
        if let BasisFamily::GaussianRbf { width, .. } = *self {
            if !(width > 0.0) || !width.is_finite() {
                return Err(invalid(format!("rbf width must be positive, got {width}")));
            }
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        match *self {
            BasisFamily::Rectangular { size } | BasisFamily::GaussianRbf { size, .. } => size,
        }
    }

    pub fn is_rectangular(&self) -> bool {
        matches!(self, BasisFamily::Rectangular { .. })
    }

    /// Index of the box containing `t` (rectangular families).
    pub(crate) fn box_index(size: usize, t: f64) -> usize {
        ((t * size as f64) as usize).min(size - 1)
    }

    /// ψ(t) as a vector of length `N`.
    pub fn eval_psi(&self, t: f64) -> Result<Vec<f64>> {
        check_domain(t)?;
        let mut out = vec![0.0; self.size()];
        self.fill_psi(t, &mut out);
        Ok(out)
    }

    /// Writes ψ(t) into `out`; `t` must already be in `[0, 1]`.
    pub(crate) fn fill_psi(&self, t: f64, out: &mut [f64]) {
        match *self {
            BasisFamily::Rectangular { size } => {
                out.fill(0.0);
                out[Self::box_index(size, t)] = 1.0;
            }
            BasisFamily::GaussianRbf { size, width } => {
                let denom = 2.0 * width * width;
                for (j, o) in out.iter_mut().enumerate() {
                    let mu = (j as f64 + 0.5) / size as f64;
                    let d = t - mu;
                    *o = (-d * d / denom).exp();
                }
            }
        }
    }

    /// `F = [ψ(t_1), …, ψ(t_L)]`, an `N × L` matrix.
    pub fn design_matrix(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        for &t in times {
            check_domain(t)?;
        }
        let n = self.size();
        let mut f = DMatrix::zeros(n, times.len());
        for (l, &t) in times.iter().enumerate() {
            self.fill_psi(t, f.column_mut(l).as_mut_slice());
        }
        Ok(f)
    }
}

impl Default for BasisFamily {
    fn default() -> Self {
        BasisFamily::Rectangular { size: 1024 }
    }
}

pub(crate) fn check_domain(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::OutOfDomain(t))
    }
}

/// Free-function form of [`BasisFamily::eval_psi`].
pub fn eval_psi(basis: &BasisFamily, t: f64) -> Result<Vec<f64>> {
    basis.eval_psi(t)
}

/// Free-function form of [`BasisFamily::design_matrix`].
pub fn design_matrix(basis: &BasisFamily, times: &[f64]) -> Result<DMatrix<f64>> {
    basis.design_matrix(times)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn rectangular_one_hot() {
        let b = BasisFamily::rectangular(4).unwrap();
        assert_eq!(b.eval_psi(0.3).unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(b.eval_psi(1.0).unwrap(), vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(b.eval_psi(0.0).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(b.eval_psi(0.25).unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn gaussian_direct_evaluation() {
        let b = BasisFamily::gaussian(2, Some(0.5)).unwrap();
        let psi = b.eval_psi(0.25).unwrap();
        assert_eq!(psi[0], 1.0);
        // (0.25 - 0.75)^2 / (2 * 0.25) = 0.5
        assert_abs_diff_eq!(psi[1], (-0.5f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn gaussian_default_width() {
        assert_eq!(
            BasisFamily::gaussian(8, None).unwrap(),
            BasisFamily::GaussianRbf {
                size: 8,
                width: 0.125
            }
        );
    }

    #[test]
    fn out_of_domain() {
        let b = BasisFamily::rectangular(4).unwrap();
        assert!(matches!(b.eval_psi(1.0001), Err(Error::OutOfDomain(_))));
        assert!(matches!(b.eval_psi(-0.1), Err(Error::OutOfDomain(_))));
        assert!(b.design_matrix(&[0.2, 1.5]).is_err());
        assert!(b.eval_psi(f64::NAN).is_err());
    }

    #[test]
    fn invalid_families() {
        assert!(BasisFamily::rectangular(0).is_err());
        assert!(BasisFamily::gaussian(3, Some(0.0)).is_err());
        assert!(BasisFamily::gaussian(3, Some(f64::NAN)).is_err());
    }

    #[test]
    fn design_matrix_examples() {
        let b = BasisFamily::rectangular(2).unwrap();
        assert_eq!(
            b.design_matrix(&[0.25, 0.75]).unwrap(),
            DMatrix::identity(2, 2)
        );
        assert_eq!(
            b.design_matrix(&[0.1, 0.2, 0.6]).unwrap(),
            DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 0.0, 0.0, 1.0])
        );
        let g = BasisFamily::gaussian(3, None).unwrap();
        let f = g.design_matrix(&[0.5]).unwrap();
        assert_eq!(f.column(0).as_slice(), g.eval_psi(0.5).unwrap().as_slice());
    }

    proptest! {
        #[test]
        fn rectangular_partition_of_unity(n in 1usize..300, t in 0.0f64..=1.0) {
            let psi = BasisFamily::rectangular(n).unwrap().eval_psi(t).unwrap();
            prop_assert_eq!(psi.iter().sum::<f64>(), 1.0);
            prop_assert_eq!(psi.iter().filter(|&&v| v == 1.0).count(), 1);
        }

        #[test]
        fn columns_match_psi(
            n in 1usize..40,
            mut times in proptest::collection::vec(0.0f64..=1.0, 1..30),
            gaussian in any::<bool>(),
        ) {
            times.sort_by(f64::total_cmp);
            let b = if gaussian { BasisFamily::gaussian(n, None).unwrap() } else { BasisFamily::rectangular(n).unwrap() };
            let f = b.design_matrix(&times).unwrap();
            for (l, &t) in times.iter().enumerate() {
                let psi = b.eval_psi(t).unwrap();
                for j in 0..n {
                    prop_assert_eq!(f[(j, l)].to_bits(), psi[j].to_bits());
                }
            }
            if !gaussian {
                let gram = &f * f.transpose();
                for i in 0..n {
                    for j in 0..n {
                        if i != j {
                            prop_assert_eq!(gram[(i, j)], 0.0);
                        }
                    }
                    let count = times.iter().filter(|&&t| BasisFamily::box_index(n, t) == i).count();
                    prop_assert_eq!(gram[(i, i)], count as f64);
                }
            } else if n < 20 {
                // wider families stay clear of underflow
                prop_assert!(f.iter().all(|&v| v > 0.0));
            }
        }
    }
}
