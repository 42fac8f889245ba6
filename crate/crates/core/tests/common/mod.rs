//! Shared helpers for integration tests.

/// Cyclic Jacobi eigendecomposition of a symmetric matrix, written
/// independently of the library's solver so the two can check each
/// other. Returns eigenvalues in non-increasing order and the matching
/// eigenvectors as columns (`vectors[i][j]` = component i of vector j).
pub fn jacobi_eigen(mut m: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = m.len();
    assert!(n > 0 && m.iter().all(|r| r.len() == n), "square input");
    let mut v = vec![vec![0.0f64; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..200 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(m[p][q].abs());
            }
        }
        if off < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let (mip, miq) = (m[i][p], m[i][q]);
                    m[i][p] = c * mip - s * miq;
                    m[i][q] = s * mip + c * miq;
                }
                for j in 0..n {
                    let (mpj, mqj) = (m[p][j], m[q][j]);
                    m[p][j] = c * mpj - s * mqj;
                    m[q][j] = s * mpj + c * mqj;
                }
                for i in 0..n {
                    let (vip, viq) = (v[i][p], v[i][q]);
                    v[i][p] = c * vip - s * viq;
                    v[i][q] = s * vip + c * viq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| m[b][b].partial_cmp(&m[a][a]).unwrap().then(a.cmp(&b)));
    let values: Vec<f64> = order.iter().map(|&j| m[j][j]).collect();
    let mut vectors = vec![vec![0.0f64; n]; n];
    for (out_j, &src_j) in order.iter().enumerate() {
        for i in 0..n {
            vectors[i][out_j] = v[i][src_j];
        }
    }
    (values, vectors)
}
