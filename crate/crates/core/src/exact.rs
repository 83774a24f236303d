//! Small exact linear-algebra helpers over the rationals.

use num_rational::BigRational;
use num_traits::{One, Signed, Zero};

pub type Rat = BigRational;

/// Row-reduce in place and return the pivot columns.
pub fn row_reduce(rows: &mut Vec<Vec<Rat>>) -> Vec<usize> {
    let ncols = rows.first().map_or(0, |r| r.len());
    let mut pivots = Vec::new();
    let mut r = 0;
    for c in 0..ncols {
        if r == rows.len() {
            break;
        }
        let Some(p) = (r..rows.len()).find(|&i| !rows[i][c].is_zero()) else {
            continue;
        };
        rows.swap(r, p);
        let inv = Rat::one() / rows[r][c].clone();
        for x in rows[r].iter_mut() {
            *x = &*x * &inv;
        }
        for i in 0..rows.len() {
            if i != r && !rows[i][c].is_zero() {
                let f = rows[i][c].clone();
                for j in c..ncols {
                    let d = &f * &rows[r][j];
                    rows[i][j] -= d;
                }
            }
        }
        pivots.push(c);
        r += 1;
    }
    rows.truncate(r);
    pivots
}

pub fn rank(rows: &[Vec<Rat>]) -> usize {
    let mut m = rows.to_vec();
    row_reduce(&mut m).len()
}

/// Greedily pick unit vectors e_c (in the given order) that extend `span`
/// to a larger subspace. Returns the chosen coordinate indices.
///
/// The result is a basis of a complement of `span` inside Q^dim.
pub fn greedy_complement(span: &[Vec<Rat>], dim: usize, order: &[usize]) -> Vec<usize> {
    let mut basis: Vec<Vec<Rat>> = span.to_vec();
    let mut current = rank(&basis);
    row_reduce(&mut basis);
    let mut chosen = Vec::new();
    for &c in order {
        let mut e = vec![Rat::zero(); dim];
        e[c] = Rat::one();
        let mut trial = basis.clone();
        trial.push(e);
        let pivots = row_reduce(&mut trial);
        if pivots.len() > current {
            current = pivots.len();
            basis = trial;
            chosen.push(c);
        }
        if current == dim {
            break;
        }
    }
    chosen
}

/// Exponent vectors of all monomials of total degree `deg` in `nvars`
/// variables, lexicographically descending (Z0^deg first).
pub fn monomials(nvars: usize, deg: i64) -> Vec<Vec<u32>> {
    if deg < 0 {
        return Vec::new();
    }
    if nvars == 1 {
        return vec![vec![deg as u32]];
    }
    let mut out = Vec::new();
    for e0 in (0..=deg).rev() {
        for mut rest in monomials(nvars - 1, deg - e0) {
            let mut m = vec![e0 as u32];
            m.append(&mut rest);
            out.push(m);
        }
    }
    out
}

pub fn max_abs(xs: &[Rat]) -> Rat {
    xs.iter().map(|x| x.abs()).fold(Rat::zero(), |a, b| if b > a { b } else { a })
}
