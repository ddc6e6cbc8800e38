//! Sparse symmetric matrices on a fixed structural pattern, plus an LDL^T
//! factorization with a reverse Cuthill-McKee fill-reducing permutation.
//!
//! The Markov samplers refactor matrices with an unchanging sparsity
//! pattern thousands of times, so the symbolic analysis (permutation,
//! elimination tree, factor pattern) is done once and reused; each
//! `factor` call is purely numeric. Patterns are structural: an entry may
//! hold the value zero without being dropped, which is what keeps
//! conditional-independence statements exact.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::mathx::sample_std_normal;

/// Full symmetric sparsity pattern in compressed-column form. The diagonal
/// is always present and row indices are sorted within each column.
#[derive(Debug, Clone, PartialEq)]
pub struct Pattern {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
}

impl Pattern {
    /// Build from undirected edges; self-loops are implied.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Pattern {
        let mut adj: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for (i, j) in edges {
            assert!(i < n && j < n, "edge index out of range");
            if i != j {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut row_idx = Vec::new();
        col_ptr.push(0);
        for list in adj.iter_mut() {
            list.sort_unstable();
            list.dedup();
            row_idx.extend_from_slice(list);
            col_ptr.push(row_idx.len());
        }
        Pattern { n, col_ptr, row_idx }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    pub fn column(&self, j: usize) -> &[usize] {
        &self.row_idx[self.col_ptr[j]..self.col_ptr[j + 1]]
    }

    /// Position of entry (i, j) in the value array, if present.
    pub fn index_of(&self, i: usize, j: usize) -> Option<usize> {
        let col = self.column(j);
        col.binary_search(&i).ok().map(|k| self.col_ptr[j] + k)
    }

    /// Pattern whose entries connect nodes at graph distance <= 2.
    pub fn two_hop(&self) -> Pattern {
        let mut edges = Vec::new();
        for j in 0..self.n {
            for &k in self.column(j) {
                for &i in self.column(k) {
                    if i < j {
                        edges.push((i, j));
                    }
                }
            }
        }
        Pattern::from_edges(self.n, edges)
    }

    pub fn contains(&self, other: &Pattern) -> bool {
        (0..self.n).all(|j| {
            other
                .column(j)
                .iter()
                .all(|i| self.index_of(*i, j).is_some())
        })
    }
}

/// Symmetric matrix with values aligned to a shared `Pattern`. Both
/// triangles are stored, so `values[index_of(i,j)] == values[index_of(j,i)]`
/// must be kept in sync by writers; assembly goes through `add_sym`.
#[derive(Debug, Clone)]
pub struct SymSparse {
    pattern: Arc<Pattern>,
    values: Vec<f64>,
}

impl SymSparse {
    pub fn zeros(pattern: Arc<Pattern>) -> SymSparse {
        let nnz = pattern.nnz();
        SymSparse { pattern, values: vec![0.0; nnz] }
    }

    pub fn pattern(&self) -> &Arc<Pattern> {
        &self.pattern
    }

    pub fn n(&self) -> usize {
        self.pattern.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pattern.index_of(i, j).map_or(0.0, |p| self.values[p])
    }

    /// Accumulate into entry (i, j) and its mirror.
    pub fn add_sym(&mut self, i: usize, j: usize, v: f64) {
        let p = self
            .pattern
            .index_of(i, j)
            .unwrap_or_else(|| panic!("entry ({i},{j}) outside pattern"));
        self.values[p] += v;
        if i != j {
            let q = self.pattern.index_of(j, i).expect("pattern asymmetry");
            self.values[q] += v;
        }
    }

    pub fn scale(&mut self, a: f64) {
        for v in &mut self.values {
            *v *= a;
        }
    }

    /// self += a * other; both must share the pattern object.
    pub fn axpy(&mut self, a: f64, other: &SymSparse) {
        assert!(Arc::ptr_eq(&self.pattern, &other.pattern), "pattern mismatch");
        for (v, o) in self.values.iter_mut().zip(&other.values) {
            *v += a * o;
        }
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n());
        assert_eq!(y.len(), self.n());
        y.fill(0.0);
        for j in 0..self.n() {
            let xj = x[j];
            let (lo, hi) = (self.pattern.col_ptr[j], self.pattern.col_ptr[j + 1]);
            for p in lo..hi {
                y[self.pattern.row_idx[p]] += self.values[p] * xj;
            }
        }
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.bilinear(x, x)
    }

    /// x' A y.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut ay = vec![0.0; self.n()];
        self.matvec(y, &mut ay);
        x.iter().zip(&ay).map(|(a, b)| a * b).sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut m = DMatrix::zeros(n, n);
        for j in 0..n {
            let (lo, hi) = (self.pattern.col_ptr[j], self.pattern.col_ptr[j + 1]);
            for p in lo..hi {
                m[(self.pattern.row_idx[p], j)] = self.values[p];
            }
        }
        m
    }
}

/// Reverse Cuthill-McKee ordering. Deterministic: BFS roots are
/// pseudo-peripheral nodes found from the lowest-index minimum-degree node
/// of each component, and neighbors are visited by (degree, index).
pub fn reverse_cuthill_mckee(pattern: &Pattern) -> Vec<usize> {
    let n = pattern.n();
    let degree: Vec<usize> = (0..n).map(|j| pattern.column(j).len()).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);

    let bfs = |root: usize, visited: &mut Vec<bool>, out: &mut Vec<usize>| {
        let start = out.len();
        out.push(root);
        visited[root] = true;
        let mut head = start;
        while head < out.len() {
            let u = out[head];
            head += 1;
            let mut nbrs: Vec<usize> = pattern
                .column(u)
                .iter()
                .copied()
                .filter(|&v| v != u && !visited[v])
                .collect();
            nbrs.sort_unstable_by_key(|&v| (degree[v], v));
            for v in nbrs {
                if !visited[v] {
                    visited[v] = true;
                    out.push(v);
                }
            }
        }
    };

    while order.len() < n {
        let root0 = (0..n)
            .filter(|&i| !visited[i])
            .min_by_key(|&i| (degree[i], i))
            .unwrap();
        // One eccentricity-improving sweep toward a pseudo-peripheral node.
        let mut probe = Vec::new();
        let mut tmp_visited = visited.clone();
        bfs(root0, &mut tmp_visited, &mut probe);
        let far = *probe.last().unwrap();
        bfs(far, &mut visited, &mut order);
    }
    order.reverse();
    order
}

/// Symbolic analysis of an LDL^T factorization: permutation, permuted upper
/// pattern with a gather map into source values, elimination tree, and the
/// column structure of L.
#[derive(Debug)]
pub struct SymbolicFactor {
    n: usize,
    /// perm[k] = source index placed at permuted position k.
    perm: Vec<usize>,
    up_col_ptr: Vec<usize>,
    up_row_idx: Vec<usize>,
    /// For each permuted upper entry, its position in the source value array.
    src_index: Vec<usize>,
    parent: Vec<usize>,
    l_col_ptr: Vec<usize>,
}

impl SymbolicFactor {
    pub fn analyze(pattern: &Pattern, perm: Vec<usize>) -> SymbolicFactor {
        let n = pattern.n();
        assert_eq!(perm.len(), n);
        let mut iperm = vec![0usize; n];
        for (k, &p) in perm.iter().enumerate() {
            iperm[p] = k;
        }

        // Permuted upper-triangular pattern (row <= col), with source map.
        let mut cols: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for j in 0..n {
            let (lo, hi) = (pattern.col_ptr[j], pattern.col_ptr[j + 1]);
            for p in lo..hi {
                let i = pattern.row_idx[p];
                if i > j {
                    continue; // each unordered pair once
                }
                let (pi, pj) = (iperm[i], iperm[j]);
                let (r, c) = if pi <= pj { (pi, pj) } else { (pj, pi) };
                cols[c].push((r, p));
            }
        }
        let mut up_col_ptr = Vec::with_capacity(n + 1);
        let mut up_row_idx = Vec::new();
        let mut src_index = Vec::new();
        up_col_ptr.push(0);
        for col in cols.iter_mut() {
            col.sort_unstable();
            for &(r, p) in col.iter() {
                up_row_idx.push(r);
                src_index.push(p);
            }
            up_col_ptr.push(up_row_idx.len());
        }

        // Elimination tree (Liu) with path compression.
        let mut parent = vec![usize::MAX; n];
        let mut ancestor = vec![usize::MAX; n];
        for k in 0..n {
            for p in up_col_ptr[k]..up_col_ptr[k + 1] {
                let mut i = up_row_idx[p];
                while i != usize::MAX && i < k {
                    let next = ancestor[i];
                    ancestor[i] = k;
                    if next == usize::MAX {
                        parent[i] = k;
                    }
                    i = next;
                }
            }
        }

        // Column counts of L via the same row-subtree walks used numerically.
        let mut counts = vec![0usize; n];
        let mut flag = vec![usize::MAX; n];
        for k in 0..n {
            flag[k] = k;
            for p in up_col_ptr[k]..up_col_ptr[k + 1] {
                let mut i = up_row_idx[p];
                while i < k && flag[i] != k {
                    counts[i] += 1; // L[k, i] fill
                    flag[i] = k;
                    i = parent[i];
                }
            }
        }
        let mut l_col_ptr = Vec::with_capacity(n + 1);
        l_col_ptr.push(0);
        for j in 0..n {
            l_col_ptr.push(l_col_ptr[j] + counts[j]);
        }

        SymbolicFactor { n, perm, up_col_ptr, up_row_idx, src_index, parent, l_col_ptr }
    }

    /// Convenience: RCM ordering followed by analysis.
    pub fn analyze_rcm(pattern: &Pattern) -> SymbolicFactor {
        SymbolicFactor::analyze(pattern, reverse_cuthill_mckee(pattern))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Numeric LDL^T of `matrix`, which must live on the analyzed pattern.
    /// Fails with a not-positive-definite error if any pivot is <= 0.
    pub fn factor(&self, matrix: &SymSparse) -> Result<NumericFactor<'_>> {
        assert_eq!(matrix.n(), self.n, "dimension mismatch");
        let n = self.n;
        let src = matrix.values();
        let mut lx = vec![0.0; *self.l_col_ptr.last().unwrap()];
        let mut l_row = vec![0usize; lx.len()];
        let mut lnz = vec![0usize; n];
        let mut d = vec![0.0; n];
        let mut y = vec![0.0; n];
        let mut flag = vec![usize::MAX; n];
        let mut stack = vec![0usize; n];
        let mut pat = vec![0usize; n];

        for k in 0..n {
            let mut top = n;
            flag[k] = k;
            for p in self.up_col_ptr[k]..self.up_col_ptr[k + 1] {
                let mut i = self.up_row_idx[p];
                y[i] += src[self.src_index[p]];
                let mut len = 0;
                while i < k && flag[i] != k {
                    stack[len] = i;
                    len += 1;
                    flag[i] = k;
                    i = self.parent[i];
                }
                while len > 0 {
                    len -= 1;
                    top -= 1;
                    pat[top] = stack[len];
                }
            }
            d[k] = y[k];
            y[k] = 0.0;
            for s in top..n {
                let i = pat[s];
                let yi = y[i];
                y[i] = 0.0;
                let (lo, hi) = (self.l_col_ptr[i], self.l_col_ptr[i] + lnz[i]);
                for p in lo..hi {
                    y[l_row[p]] -= lx[p] * yi;
                }
                let lki = yi / d[i];
                d[k] -= lki * yi;
                l_row[hi] = k;
                lx[hi] = lki;
                lnz[i] += 1;
            }
            if !(d[k] > 0.0) {
                return Err(Error::NotPositiveDefinite(format!(
                    "pivot {k} of {n} is {}",
                    d[k]
                )));
            }
        }
        Ok(NumericFactor { sym: self, lx, l_row, d })
    }
}

/// L D L^T factor of a permuted SPD matrix; L is unit lower triangular.
pub struct NumericFactor<'a> {
    sym: &'a SymbolicFactor,
    lx: Vec<f64>,
    l_row: Vec<usize>,
    d: Vec<f64>,
}

impl NumericFactor<'_> {
    pub fn logdet(&self) -> f64 {
        self.d.iter().map(|v| v.ln()).sum()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.sym.n;
        assert_eq!(b.len(), n);
        let mut x = vec![0.0; n];
        for k in 0..n {
            x[k] = b[self.sym.perm[k]];
        }
        self.solve_permuted(&mut x);
        let mut out = vec![0.0; n];
        for k in 0..n {
            out[self.sym.perm[k]] = x[k];
        }
        out
    }

    fn solve_permuted(&self, x: &mut [f64]) {
        let n = self.sym.n;
        let cp = &self.sym.l_col_ptr;
        for j in 0..n {
            let xj = x[j];
            for p in cp[j]..cp[j + 1] {
                x[self.l_row[p]] -= self.lx[p] * xj;
            }
        }
        for j in 0..n {
            x[j] /= self.d[j];
        }
        for j in (0..n).rev() {
            let mut s = x[j];
            for p in cp[j]..cp[j + 1] {
                s -= self.lx[p] * x[self.l_row[p]];
            }
            x[j] = s;
        }
    }

    /// Draw x ~ N(0, A^{-1}) where A is the factored matrix.
    pub fn sample_zero_mean(&self, rng: &mut impl Rng) -> Vec<f64> {
        let n = self.sym.n;
        let cp = &self.sym.l_col_ptr;
        let mut v = vec![0.0; n];
        for k in 0..n {
            v[k] = sample_std_normal(rng) / self.d[k].sqrt();
        }
        for j in (0..n).rev() {
            let mut s = v[j];
            for p in cp[j]..cp[j + 1] {
                s -= self.lx[p] * v[self.l_row[p]];
            }
            v[j] = s;
        }
        let mut out = vec![0.0; n];
        for k in 0..n {
            out[self.sym.perm[k]] = v[k];
        }
        out
    }

    /// Draw x ~ N(A^{-1} linear, A^{-1}) reusing one factorization.
    pub fn sample_from_precision(&self, linear: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        let mut x = self.solve(linear);
        let noise = self.sample_zero_mean(rng);
        for (a, b) in x.iter_mut().zip(noise) {
            *a += b;
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bilinear_matches_dense() {
        let m = random_spd(12, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x: Vec<f64> = (0..12).map(|_| rng.gen::<f64>() - 0.5).collect();
        let y: Vec<f64> = (0..12).map(|_| rng.gen::<f64>() - 0.5).collect();
        let dense = m.to_dense();
        let want = (DVector::from_column_slice(&x).transpose()
            * dense
            * DVector::from_column_slice(&y))[(0, 0)];
        assert!((m.bilinear(&x, &y) - want).abs() < 1e-12);
        assert!((m.quad_form(&x) - m.bilinear(&x, &x)).abs() == 0.0);
    }

    fn random_spd(n: usize, seed: u64) -> SymSparse {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.gen::<f64>() < 0.15 {
                    edges.push((i, j));
                }
            }
        }
        let pattern = Arc::new(Pattern::from_edges(n, edges.iter().copied()));
        let mut m = SymSparse::zeros(pattern);
        for &(i, j) in &edges {
            m.add_sym(i, j, rng.gen::<f64>() - 0.5);
        }
        for i in 0..n {
            let rowsum: f64 = m.pattern.column(i).iter().map(|&j| m.get(i, j).abs()).sum();
            m.add_sym(i, i, rowsum + 1.0);
        }
        m
    }

    #[test]
    fn rcm_is_a_permutation_and_reduces_bandwidth() {
        // 10x10 grid graph in row-major order has bandwidth 10; RCM should
        // bring it near the grid width.
        let n = 100;
        let mut edges = Vec::new();
        for r in 0..10 {
            for c in 0..10 {
                let k = r * 10 + c;
                if c + 1 < 10 {
                    edges.push((k, k + 1));
                }
                if r + 1 < 10 {
                    edges.push((k, k + 10));
                }
            }
        }
        let pattern = Pattern::from_edges(n, edges);
        let perm = reverse_cuthill_mckee(&pattern);
        let mut seen = vec![false; n];
        for &p in &perm {
            assert!(!seen[p]);
            seen[p] = true;
        }
        let mut iperm = vec![0usize; n];
        for (k, &p) in perm.iter().enumerate() {
            iperm[p] = k;
        }
        let bw = (0..n)
            .flat_map(|j| pattern.column(j).iter().map(move |&i| (i, j)))
            .map(|(i, j)| (iperm[i] as i64 - iperm[j] as i64).unsigned_abs())
            .max()
            .unwrap();
        assert!(bw <= 14, "RCM bandwidth {bw}");
        assert_eq!(perm, reverse_cuthill_mckee(&pattern), "non-deterministic");
    }

    #[test]
    fn ldl_matches_dense_solve_and_logdet() {
        for seed in 0..5 {
            let m = random_spd(60, seed);
            let sym = SymbolicFactor::analyze_rcm(m.pattern());
            let f = sym.factor(&m).unwrap();
            let dense = m.to_dense();
            let chol = nalgebra::Cholesky::new(dense.clone()).unwrap();
            let b: Vec<f64> = (0..60).map(|i| (i as f64 * 0.7).sin()).collect();
            let x = f.solve(&b);
            let xd = chol.solve(&DVector::from_column_slice(&b));
            for i in 0..60 {
                assert!((x[i] - xd[i]).abs() < 1e-10, "solve mismatch at {i}");
            }
            let ld_dense = 2.0 * chol.l().diagonal().map(|v| v.ln()).sum();
            assert!((f.logdet() - ld_dense).abs() < 1e-8);
            // Multiply back: A x should reproduce b.
            let mut back = vec![0.0; 60];
            m.matvec(&x, &mut back);
            let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            let err = back
                .iter()
                .zip(&b)
                .map(|(a, c)| (a - c) * (a - c))
                .sum::<f64>()
                .sqrt();
            assert!(err <= 1e-8 * bnorm, "residual {err}");
        }
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let pattern = Arc::new(Pattern::from_edges(2, [(0, 1)]));
        let mut m = SymSparse::zeros(pattern);
        m.add_sym(0, 0, 1.0);
        m.add_sym(1, 1, 1.0);
        m.add_sym(0, 1, 2.0);
        let sym = SymbolicFactor::analyze_rcm(m.pattern());
        assert!(matches!(sym.factor(&m), Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn sampler_covariance_approaches_inverse() {
        let m = random_spd(12, 9);
        let sym = SymbolicFactor::analyze_rcm(m.pattern());
        let f = sym.factor(&m).unwrap();
        let cov_true = m.to_dense().try_inverse().unwrap();
        let n = 60_000;
        let mut acc = DMatrix::<f64>::zeros(12, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..n {
            let x = f.sample_zero_mean(&mut rng);
            let v = DVector::from_column_slice(&x);
            acc += &v * v.transpose();
        }
        acc /= n as f64;
        let scale = cov_true.diagonal().amax();
        assert!((acc - cov_true).amax() < 0.03 * scale);
    }

    #[test]
    fn two_hop_contains_one_hop() {
        let pattern = Pattern::from_edges(6, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)]);
        let two = pattern.two_hop();
        assert!(two.contains(&pattern));
        assert!(two.index_of(0, 2).is_some());
        assert!(two.index_of(0, 3).is_none());
    }
}
