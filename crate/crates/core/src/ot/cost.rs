use rayon::prelude::*;

use super::OtError;
use crate::linalg::Matrix;

/// Per-neuron activation signatures: one row per neuron, one column per
/// calibration token.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix(Matrix);

impl ActivationMatrix {
    pub fn new(values: Matrix) -> Result<Self, OtError> {
        if values.cols() == 0 || values.rows() == 0 {
            return Err(OtError::EmptyActivations);
        }
        if !values.is_finite() {
            return Err(OtError::NonFinite);
        }
        Ok(Self(values))
    }

    /// Builds from token-major rows (`tokens × neurons`), the layout the
    /// forward pass produces.
    pub fn from_token_rows(token_rows: &Matrix) -> Result<Self, OtError> {
        Self::new(token_rows.transpose())
    }

    pub fn neurons(&self) -> usize {
        self.0.rows()
    }

    pub fn tokens(&self) -> usize {
        self.0.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.0
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }

    pub fn neuron(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    /// Subtracts each neuron's mean over tokens.
    pub fn centered(&self) -> Self {
        let mut m = self.0.clone();
        for i in 0..m.rows() {
            let row = m.row_mut(i);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            row.iter_mut().for_each(|v| *v -= mean);
        }
        Self(m)
    }
}

fn validate_support(support: &[usize], n: usize) -> Result<(), OtError> {
    let mut seen = vec![false; n];
    for &s in support {
        if s >= n {
            return Err(OtError::IndexOutOfRange { index: s, len: n });
        }
        if std::mem::replace(&mut seen[s], true) {
            return Err(OtError::DuplicateSupportIndex(s));
        }
    }
    Ok(())
}

/// Ground metric between every neuron and the selected support neurons:
/// `C[i][j] = ‖x_i − x_support[j]‖₁` over the token axis.
pub fn cost_matrix(acts: &ActivationMatrix, support: &[usize]) -> Result<Matrix, OtError> {
    let n = acts.neurons();
    validate_support(support, n)?;
    let k = support.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = acts.neuron(i);
            support
                .iter()
                .map(|&s| {
                    if s == i {
                        return 0.0;
                    }
                    xi.iter()
                        .zip(acts.neuron(s))
                        .map(|(a, b)| (a - b).abs())
                        .sum::<f64>()
                })
                .collect()
        })
        .collect();
    let mut data = Vec::with_capacity(n * k);
    rows.into_iter().for_each(|r| data.extend(r));
    Ok(Matrix::from_vec(n, k, data))
}
