use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Principal component projection of a data matrix.
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Rows are unit principal axes, ordered by descending singular value.
    pub components: Vec<Vec<f64>>,
    pub singular_values: Vec<f64>,
    /// n x k scores of the input rows.
    pub projection: Vec<Vec<f64>>,
}

/// Projects mean-centred rows of `x` onto their top `k` right singular vectors.
///
/// Each axis is oriented so that its first non-negligible coefficient is positive.
pub fn pca(x: &[Vec<f64>], k: usize) -> Result<Pca> {
    let n = x.len();
    if n < 2 {
        return Err(Error::Precondition(format!("PCA needs at least 2 rows, got {n}")));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("PCA rows differ in length".into()));
    }
    let limit = (n - 1).min(d);
    if k == 0 || k > limit {
        return Err(Error::Config(format!("k = {k} outside 1..={limit}")));
    }
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centred = DMatrix::from_fn(n, d, |i, j| x[i][j] - mean[j]);
    // nalgebra's iterative SVD returns inaccurate factors on some inputs, so
    // the decomposition goes through the symmetric eigenproblem of the
    // smaller Gram matrix instead
    let (eigenvalues, eigenvectors, wide) = if d <= n {
        let eig = (centred.transpose() * &centred).symmetric_eigen();
        (eig.eigenvalues, eig.eigenvectors, false)
    } else {
        let eig = (&centred * centred.transpose()).symmetric_eigen();
        (eig.eigenvalues, eig.eigenvectors, true)
    };
    let mut order: Vec<usize> = (0..eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eigenvalues[b].total_cmp(&eigenvalues[a]).then(a.cmp(&b)));
    let sigma_max = eigenvalues[order[0]].max(0.0).sqrt();

    let mut components = Vec::with_capacity(k);
    let mut singular_values = Vec::with_capacity(k);
    for &i in order.iter().take(k) {
        let sigma = eigenvalues[i].max(0.0).sqrt();
        let v = eigenvectors.column(i);
        let mut axis: Vec<f64> = if !wide {
            v.iter().copied().collect()
        } else if sigma > 1e-12 * sigma_max.max(1.0) {
            (0..d).map(|j| (0..n).map(|r| centred[(r, j)] * v[r]).sum::<f64>() / sigma).collect()
        } else {
            // no variance left along this direction; its scores are zero anyway
            vec![0.0; d]
        };
        if let Some(first) = axis.iter().find(|v| v.abs() > 1e-12) {
            if *first < 0.0 {
                axis.iter_mut().for_each(|v| *v = -*v);
            }
        }
        components.push(axis);
        singular_values.push(sigma);
    }
    let projection = (0..n)
        .map(|i| {
            components
                .iter()
                .map(|axis| axis.iter().enumerate().map(|(j, a)| a * centred[(i, j)]).sum())
                .collect()
        })
        .collect();
    Ok(Pca { mean, components, singular_values, projection })
}
