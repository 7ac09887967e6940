//! Exact Gauss-Jordan elimination over the rationals.
//!
//! The right-hand sides are jets so that systems whose matrix is rational but
//! whose data depend polynomially on symbolic parameters can be solved without
//! leaving exact arithmetic.

use num_traits::{One, Zero};

use crate::jet::{GradedJet, Rational};

#[derive(Debug, Clone)]
pub struct ExactSolution {
    /// One value per column; free columns are set to zero.
    pub values: Vec<GradedJet>,
    /// `(row, column)` of each pivot, rows in their original numbering.
    pub pivots: Vec<(usize, usize)>,
    pub free_columns: Vec<usize>,
    /// Original rows reduced to `0 = r` with `r != 0`, with their residual.
    pub inconsistent: Vec<(usize, GradedJet)>,
}

impl ExactSolution {
    pub fn rank(&self) -> usize {
        self.pivots.len()
    }

    pub fn is_consistent(&self) -> bool {
        self.inconsistent.is_empty()
    }
}

/// Solves `a * x = rhs`. Columns are pivoted in their given order and rows
/// are searched top-down, so the choice of pivots (and therefore of free
/// columns) is fully determined by the ordering of the input.
pub fn solve(a: &[Vec<Rational>], rhs: &[GradedJet], zero: &GradedJet) -> ExactSolution {
    let rows = a.len();
    let cols = a.first().map_or(0, |r| r.len());
    let mut m: Vec<Vec<Rational>> = a.to_vec();
    let mut b: Vec<GradedJet> = rhs.to_vec();
    let mut order: Vec<usize> = (0..rows).collect();
    let mut pivots = Vec::new();
    let mut free_columns = Vec::new();
    let mut r = 0;
    for c in 0..cols {
        let Some(p) = (r..rows).find(|&i| !m[i][c].is_zero()) else {
            free_columns.push(c);
            continue;
        };
        m.swap(r, p);
        b.swap(r, p);
        order.swap(r, p);
        let inv = Rational::one() / &m[r][c];
        for x in m[r].iter_mut() {
            *x *= &inv;
        }
        b[r] = b[r].scale(&inv);
        let pivot = m[r].clone();
        for i in 0..rows {
            if i == r || m[i][c].is_zero() {
                continue;
            }
            let f = m[i][c].clone();
            for (x, p) in m[i].iter_mut().zip(&pivot) {
                if !p.is_zero() {
                    *x -= p * &f;
                }
            }
            b[i] = &b[i] - &b[r].scale(&f);
        }
        pivots.push((r, c));
        r += 1;
    }
    let mut values = vec![zero.clone(); cols];
    for &(row, col) in &pivots {
        values[col] = b[row].clone();
    }
    let inconsistent = (r..rows)
        .filter(|&i| !b[i].is_zero())
        .map(|i| (order[i], b[i].clone()))
        .collect();
    let pivots = pivots.into_iter().map(|(row, col)| (order[row], col)).collect();
    ExactSolution {
        values,
        pivots,
        free_columns,
        inconsistent,
    }
}

/// Inverse of a square rational matrix, or `None` if it is singular.
pub fn invert(a: &[Vec<Rational>]) -> Option<Vec<Vec<Rational>>> {
    let n = a.len();
    let mut m: Vec<Vec<Rational>> = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { Rational::one() } else { Rational::zero() }));
            r
        })
        .collect();
    for c in 0..n {
        let p = (c..n).find(|&i| !m[i][c].is_zero())?;
        m.swap(c, p);
        let inv = Rational::one() / &m[c][c];
        for x in m[c].iter_mut() {
            *x *= &inv;
        }
        let pivot = m[c].clone();
        for (i, row) in m.iter_mut().enumerate() {
            if i != c && !row[c].is_zero() {
                let f = row[c].clone();
                for (x, p) in row.iter_mut().zip(&pivot) {
                    *x -= p * &f;
                }
            }
        }
    }
    Some(m.into_iter().map(|r| r[n..].to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jet::{int, rat, JetSpace};

    #[test]
    fn underdetermined_sets_free_columns_to_zero() {
        let s = JetSpace::uniform(&["t"], 0);
        let z = GradedJet::zero(&s);
        // x0 + x1 = 2, x2 = 3
        let a = vec![
            vec![int(1), int(1), int(0)],
            vec![int(0), int(0), int(1)],
        ];
        let rhs = vec![GradedJet::constant(&s, int(2)), GradedJet::constant(&s, int(3))];
        let sol = solve(&a, &rhs, &z);
        assert_eq!(sol.free_columns, vec![1]);
        assert_eq!(sol.values[0].constant_term(), int(2));
        assert!(sol.values[1].is_zero());
        assert_eq!(sol.values[2].constant_term(), int(3));
        assert!(sol.is_consistent());
    }

    #[test]
    fn inconsistency_is_reported_with_original_row() {
        let s = JetSpace::uniform(&["t"], 0);
        let z = GradedJet::zero(&s);
        let a = vec![vec![int(0)], vec![int(1)], vec![int(2)]];
        let rhs = vec![
            GradedJet::constant(&s, int(5)),
            GradedJet::constant(&s, int(1)),
            GradedJet::constant(&s, int(2)),
        ];
        let sol = solve(&a, &rhs, &z);
        assert_eq!(sol.inconsistent.len(), 1);
        assert_eq!(sol.inconsistent[0].0, 0);
    }

    #[test]
    fn inverse() {
        let a = vec![vec![int(2), int(1)], vec![int(1), int(1)]];
        let inv = invert(&a).unwrap();
        assert_eq!(inv, vec![vec![int(1), int(-1)], vec![int(-1), int(2)]]);
        assert!(invert(&[vec![int(1), int(2)], vec![int(2), int(4)]]).is_none());
        assert_eq!(invert(&[vec![rat(1, 3)]]).unwrap(), vec![vec![int(3)]]);
    }
}
