//! Direct tridiagonal and block-tridiagonal elimination.

/// Solves a tridiagonal system in place (Thomas algorithm).
///
/// `lower[i]` couples row `i` to unknown `i-1` (`lower[0]` is ignored) and
/// `upper[i]` couples row `i` to unknown `i+1` (`upper[n-1]` is ignored). The
/// right-hand side is overwritten with the solution. Intended for diagonally
/// dominant systems; no pivoting.
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64]) {
    let n = diag.len();
    debug_assert!(lower.len() == n && upper.len() == n && rhs.len() == n);
    if n == 0 {
        return;
    }
    let mut c_prime = vec![0.0; n];
    let mut beta = diag[0];
    c_prime[0] = upper[0] / beta;
    rhs[0] /= beta;
    for i in 1..n {
        beta = diag[i] - lower[i] * c_prime[i - 1];
        c_prime[i] = upper[i] / beta;
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= c_prime[i] * rhs[i + 1];
    }
}

/// Dense block of size at most 3×3.
pub type Block = [[f64; 3]; 3];

pub const ZERO_BLOCK: Block = [[0.0; 3]; 3];

/// Block tridiagonal matrix with `m × m` blocks, `m ≤ 3`.
#[derive(Debug, Clone)]
pub struct BlockTridiagonal {
    pub m: usize,
    pub lower: Vec<Block>,
    pub diag: Vec<Block>,
    pub upper: Vec<Block>,
}

impl BlockTridiagonal {
    pub fn zeros(m: usize, n: usize) -> Self {
        assert!((1..=3).contains(&m), "block size must be 1, 2 or 3");
        Self {
            m,
            lower: vec![ZERO_BLOCK; n],
            diag: vec![ZERO_BLOCK; n],
            upper: vec![ZERO_BLOCK; n],
        }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// Solves `A x = rhs` where `rhs` is laid out node-major (`rhs[j*m + i]`).
    /// Returns `None` when a pivot block is singular.
    pub fn solve(&self, rhs: &[f64]) -> Option<Vec<f64>> {
        let m = self.m;
        let n = self.len();
        assert_eq!(rhs.len(), n * m);
        // Forward sweep: D'_j = D_j − L_j D'^{-1}_{j−1} U_{j−1}, r'_j likewise.
        let mut gamma: Vec<Block> = Vec::with_capacity(n); // D'^{-1}_j U_j
        let mut y = vec![0.0; n * m];
        let mut prev_y = [0.0; 3];
        for j in 0..n {
            let mut d = self.diag[j];
            let mut r = [0.0; 3];
            r[..m].copy_from_slice(&rhs[j * m..(j + 1) * m]);
            if j > 0 {
                let l = &self.lower[j];
                let g = &gamma[j - 1];
                for a in 0..m {
                    for b in 0..m {
                        let mut s = 0.0;
                        for c in 0..m {
                            s += l[a][c] * g[c][b];
                        }
                        d[a][b] -= s;
                    }
                    let mut s = 0.0;
                    for c in 0..m {
                        s += l[a][c] * prev_y[c];
                    }
                    r[a] -= s;
                }
            }
            let lu = Lu::factor(d, m)?;
            let yj = lu.solve(r);
            y[j * m..(j + 1) * m].copy_from_slice(&yj[..m]);
            prev_y = yj;
            let mut g = ZERO_BLOCK;
            for col in 0..m {
                let mut e = [0.0; 3];
                for row in 0..m {
                    e[row] = self.upper[j][row][col];
                }
                let s = lu.solve(e);
                for row in 0..m {
                    g[row][col] = s[row];
                }
            }
            gamma.push(g);
        }
        // Back substitution: x_j = y_j − γ_j x_{j+1}.
        for j in (0..n.saturating_sub(1)).rev() {
            for a in 0..m {
                let mut s = 0.0;
                for c in 0..m {
                    s += gamma[j][a][c] * y[(j + 1) * m + c];
                }
                y[j * m + a] -= s;
            }
        }
        Some(y)
    }

    /// `A x` for residual checks in tests.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let m = self.m;
        let n = self.len();
        let mut out = vec![0.0; n * m];
        for j in 0..n {
            for a in 0..m {
                let mut s = 0.0;
                for c in 0..m {
                    s += self.diag[j][a][c] * x[j * m + c];
                    if j > 0 {
                        s += self.lower[j][a][c] * x[(j - 1) * m + c];
                    }
                    if j + 1 < n {
                        s += self.upper[j][a][c] * x[(j + 1) * m + c];
                    }
                }
                out[j * m + a] = s;
            }
        }
        out
    }
}

/// LU factorization of a small block with partial pivoting.
struct Lu {
    m: usize,
    a: Block,
    perm: [usize; 3],
}

impl Lu {
    fn factor(mut a: Block, m: usize) -> Option<Self> {
        let mut perm = [0, 1, 2];
        let scale = a
            .iter()
            .take(m)
            .flat_map(|r| r.iter().take(m))
            .fold(0.0f64, |s, v| s.max(v.abs()));
        if scale == 0.0 || !scale.is_finite() {
            return None;
        }
        for col in 0..m {
            let pivot = (col..m)
                .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
                .unwrap();
            if a[pivot][col].abs() <= 1e-300 * scale.max(1.0) {
                return None;
            }
            a.swap(col, pivot);
            perm.swap(col, pivot);
            for row in col + 1..m {
                let f = a[row][col] / a[col][col];
                a[row][col] = f;
                for c in col + 1..m {
                    a[row][c] -= f * a[col][c];
                }
            }
        }
        Some(Self { m, a, perm })
    }

    fn solve(&self, b: [f64; 3]) -> [f64; 3] {
        let m = self.m;
        let mut x = [0.0; 3];
        for i in 0..m {
            x[i] = b[self.perm[i]];
        }
        for i in 0..m {
            for c in 0..i {
                x[i] -= self.a[i][c] * x[c];
            }
        }
        for i in (0..m).rev() {
            for c in i + 1..m {
                x[i] -= self.a[i][c] * x[c];
            }
            x[i] /= self.a[i][i];
        }
        x
    }
}
