//! Top-r left singular vectors of a small dense matrix, via a cyclic Jacobi
//! eigendecomposition of G * G^T. Plenty for toy-scale gradients.

/// Returns a column-major (m x r) matrix of orthonormal columns spanning the
/// dominant left singular subspace of the row-major (m x n) input.
pub fn top_left_singular_vectors(g: &[f64], m: usize, n: usize, r: usize) -> Vec<f64> {
    assert!(r <= m);
    // S = G * G^T (m x m, symmetric).
    let mut s = vec![0.0; m * m];
    for i in 0..m {
        for j in i..m {
            let mut acc = 0.0;
            for k in 0..n {
                acc += g[i * n + k] * g[j * n + k];
            }
            s[i * m + j] = acc;
            s[j * m + i] = acc;
        }
    }
    // Jacobi rotations: V accumulates the eigenvectors.
    let mut v = vec![0.0; m * m];
    for i in 0..m {
        v[i * m + i] = 1.0;
    }
    let max_sweeps = 60;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for p in 0..m {
            for q in (p + 1)..m {
                off += s[p * m + q] * s[p * m + q];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frobenius(&s, m)) {
            break;
        }
        for p in 0..m {
            for q in (p + 1)..m {
                let apq = s[p * m + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = s[p * m + p];
                let aqq = s[q * m + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..m {
                    let skp = s[k * m + p];
                    let skq = s[k * m + q];
                    s[k * m + p] = c * skp - sn * skq;
                    s[k * m + q] = sn * skp + c * skq;
                }
                for k in 0..m {
                    let spk = s[p * m + k];
                    let sqk = s[q * m + k];
                    s[p * m + k] = c * spk - sn * sqk;
                    s[q * m + k] = sn * spk + c * sqk;
                }
                for k in 0..m {
                    let vkp = v[k * m + p];
                    let vkq = v[k * m + q];
                    v[k * m + p] = c * vkp - sn * vkq;
                    v[k * m + q] = sn * vkp + c * vkq;
                }
            }
        }
    }
    // Sort eigenpairs by eigenvalue, descending.
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        s[b * m + b]
            .partial_cmp(&s[a * m + a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut p_mat = vec![0.0; m * r];
    for (col, &src) in order.iter().take(r).enumerate() {
        for row in 0..m {
            p_mat[row * r + col] = v[row * m + src];
        }
    }
    p_mat
}

fn frobenius(s: &[f64], m: usize) -> f64 {
    s.iter().take(m * m).map(|x| x * x).sum::<f64>().sqrt()
}

/// Max deviation of P^T P from the identity.
pub fn orthonormality_error(p: &[f64], m: usize, r: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for a in 0..r {
        for b in 0..r {
            let mut acc = 0.0;
            for row in 0..m {
                acc += p[row * r + a] * p[row * r + b];
            }
            let target = if a == b { 1.0 } else { 0.0 };
            worst = worst.max((acc - target).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recovers_dominant_directions() {
        // G built from two known orthogonal directions with spread singular
        // values; the top-2 left vectors must span them.
        let (m, n) = (6, 8);
        let mut g = vec![0.0; m * n];
        let u1 = [1.0, 2.0, 3.0, -1.0, 0.5, 1.5];
        let u2 = [2.0, -1.0, 0.0, 1.0, -0.5, 0.25];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for j in 0..n {
            let a: f64 = rng.gen_range(-1.0..1.0);
            let b: f64 = rng.gen_range(-1.0..1.0);
            for i in 0..m {
                g[i * n + j] = 10.0 * a * u1[i] + 3.0 * b * u2[i];
            }
        }
        let p = top_left_singular_vectors(&g, m, n, 2);
        assert!(orthonormality_error(&p, m, 2) < 1e-10);
        // Every column of G lies in span(u1,u2); P must reproduce it:
        // G ~ P P^T G.
        for j in 0..n {
            for i in 0..m {
                let mut recon = 0.0;
                for c in 0..2 {
                    let mut coef = 0.0;
                    for k in 0..m {
                        coef += p[k * 2 + c] * g[k * n + j];
                    }
                    recon += p[i * 2 + c] * coef;
                }
                assert!((recon - g[i * n + j]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn full_rank_projection_is_orthonormal() {
        let (m, n) = (5, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g: Vec<f64> = (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = top_left_singular_vectors(&g, m, n, m);
        assert!(orthonormality_error(&p, m, m) < 1e-10);
    }
}
