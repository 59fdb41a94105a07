//! Bundled operators: gradients, higher gradients, symmetric and deviatoric
//! gradients, the Laplacian, divergence, the planar curl and rotated
//! gradient, current boundaries for `d <= 3`, and the diagonal-gradient
//! annihilator (which is not of constant rank).
//!
//! Symmetric tensors are stored by their upper triangle `(i <= j)`, row by
//! row. General matrices are stored row-major.

use nalgebra::DMatrix;

use crate::operator::{LinearOperator, MultiIndex, Term};

fn op(
    name: String,
    dim: usize,
    fin: usize,
    fout: usize,
    order: u32,
    terms: Vec<Term>,
) -> LinearOperator {
    LinearOperator::new(name, dim, fin, fout, order, terms).expect("gallery operators are valid")
}

/// Gradient `D` of `u: R^d -> R^m`, target `R^m (x) R^d` with index `i*d + p`.
pub fn gradient(dim: usize, m: usize) -> LinearOperator {
    let terms = (0..dim)
        .map(|p| {
            let mut a = DMatrix::zeros(m * dim, m);
            for i in 0..m {
                a[(i * dim + p, i)] = 1.0;
            }
            Term {
                alpha: MultiIndex::unit(dim, p),
                matrix: a,
            }
        })
        .collect();
    op(format!("gradient_d{dim}_m{m}"), dim, m, m * dim, 1, terms)
}

/// `k`-th gradient `D^k` of `u: R^d -> R^m`. The symmetric target is
/// indexed by multi-indices of modulus `k`, so component `(i, alpha)` holds
/// `d^alpha u_i`.
pub fn k_gradient(dim: usize, m: usize, k: u32) -> LinearOperator {
    let alphas = MultiIndex::all_of_order(dim, k);
    let na = alphas.len();
    let terms = alphas
        .iter()
        .enumerate()
        .map(|(ai, alpha)| {
            let mut a = DMatrix::zeros(m * na, m);
            for i in 0..m {
                a[(i * na + ai, i)] = 1.0;
            }
            Term {
                alpha: alpha.clone(),
                matrix: a,
            }
        })
        .collect();
    op(
        format!("k_gradient_d{dim}_m{m}_k{k}"),
        dim,
        m,
        m * na,
        k,
        terms,
    )
}

fn sym_index(dim: usize) -> Vec<(usize, usize)> {
    let mut idx = Vec::new();
    for i in 0..dim {
        for j in i..dim {
            idx.push((i, j));
        }
    }
    idx
}

/// Symmetric gradient `(Du + Du^T)/2`.
pub fn symmetric_gradient(dim: usize) -> LinearOperator {
    let idx = sym_index(dim);
    let terms = (0..dim)
        .map(|p| {
            let mut a = DMatrix::zeros(idx.len(), dim);
            for (row, &(i, j)) in idx.iter().enumerate() {
                if j == p {
                    a[(row, i)] += 0.5;
                }
                if i == p {
                    a[(row, j)] += 0.5;
                }
            }
            Term {
                alpha: MultiIndex::unit(dim, p),
                matrix: a,
            }
        })
        .collect();
    op(
        format!("symmetric_gradient_d{dim}"),
        dim,
        dim,
        idx.len(),
        1,
        terms,
    )
}

/// Planar compatibility operator `d22 e11 - 2 d12 e12 + d11 e22`, the
/// annihilator of the planar symmetric gradient.
pub fn saint_venant_2d() -> LinearOperator {
    let row = |v: [f64; 3]| DMatrix::from_row_slice(1, 3, &v);
    let terms = vec![
        Term {
            alpha: MultiIndex::new(vec![0, 2]),
            matrix: row([1.0, 0.0, 0.0]),
        },
        Term {
            alpha: MultiIndex::new(vec![1, 1]),
            matrix: row([0.0, -2.0, 0.0]),
        },
        Term {
            alpha: MultiIndex::new(vec![2, 0]),
            matrix: row([0.0, 0.0, 1.0]),
        },
    ];
    op("saint_venant_d2".into(), 2, 3, 1, 2, terms)
}

/// Deviatoric gradient `sym(Du) - div(u)/d I`, full `d x d` target.
pub fn deviatoric(dim: usize) -> LinearOperator {
    let terms = (0..dim)
        .map(|p| {
            let mut a = DMatrix::zeros(dim * dim, dim);
            for i in 0..dim {
                for j in 0..dim {
                    let row = i * dim + j;
                    if j == p {
                        a[(row, i)] += 0.5;
                    }
                    if i == p {
                        a[(row, j)] += 0.5;
                    }
                    if i == j {
                        a[(row, p)] -= 1.0 / dim as f64;
                    }
                }
            }
            Term {
                alpha: MultiIndex::unit(dim, p),
                matrix: a,
            }
        })
        .collect();
    op(format!("deviatoric_d{dim}"), dim, dim, dim * dim, 1, terms)
}

pub fn laplacian(dim: usize) -> LinearOperator {
    let terms = (0..dim)
        .map(|p| {
            let mut e = vec![0; dim];
            e[p] = 2;
            Term {
                alpha: MultiIndex::new(e),
                matrix: DMatrix::from_element(1, 1, 1.0),
            }
        })
        .collect();
    op(format!("laplacian_d{dim}"), dim, 1, 1, 2, terms)
}

pub fn divergence(dim: usize) -> LinearOperator {
    let terms = (0..dim)
        .map(|p| {
            let mut a = DMatrix::zeros(1, dim);
            a[(0, p)] = 1.0;
            Term {
                alpha: MultiIndex::unit(dim, p),
                matrix: a,
            }
        })
        .collect();
    op(format!("divergence_d{dim}"), dim, dim, 1, 1, terms)
}

/// `d1 w2 - d2 w1`.
pub fn curl_2d() -> LinearOperator {
    let terms = vec![
        Term {
            alpha: MultiIndex::unit(2, 0),
            matrix: DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
        },
        Term {
            alpha: MultiIndex::unit(2, 1),
            matrix: DMatrix::from_row_slice(1, 2, &[-1.0, 0.0]),
        },
    ];
    op("curl_d2".into(), 2, 2, 1, 1, terms)
}

/// `u -> (d2 u, -d1 u)`.
pub fn rotated_gradient_2d() -> LinearOperator {
    let terms = vec![
        Term {
            alpha: MultiIndex::unit(2, 1),
            matrix: DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
        },
        Term {
            alpha: MultiIndex::unit(2, 0),
            matrix: DMatrix::from_column_slice(2, 1, &[0.0, -1.0]),
        },
    ];
    op("rotated_gradient_d2".into(), 2, 1, 2, 1, terms)
}

/// `(w1, w2) -> (d2 w1, d1 w2)`; rank 1 on the axes and 2 elsewhere.
pub fn mueller_diagonal() -> LinearOperator {
    let terms = vec![
        Term {
            alpha: MultiIndex::unit(2, 1),
            matrix: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
        },
        Term {
            alpha: MultiIndex::unit(2, 0),
            matrix: DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]),
        },
    ];
    op("mueller_diagonal".into(), 2, 2, 2, 1, terms)
}

fn combinations(d: usize, m: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, d: usize, m: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == m {
            out.push(cur.clone());
            return;
        }
        for i in start..d {
            cur.push(i);
            rec(i + 1, d, m, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, d, m, &mut Vec::new(), &mut out);
    out
}

/// Boundary `d_m` of `m`-currents, `Lambda_m R^d -> Lambda_{m-1} R^d`,
/// acting through interior multiplication. Bases are increasing index
/// tuples. Only `d <= 3` is provided.
pub fn current_boundary(dim: usize, m: usize) -> Option<LinearOperator> {
    if !(1..=3).contains(&dim) || m == 0 || m > dim {
        return None;
    }
    let src = combinations(dim, m);
    let dst = combinations(dim, m - 1);
    let terms = (0..dim)
        .map(|p| {
            let mut a = DMatrix::zeros(dst.len(), src.len());
            for (col, tuple) in src.iter().enumerate() {
                if let Some(r) = tuple.iter().position(|&i| i == p) {
                    let mut rest = tuple.clone();
                    rest.remove(r);
                    let row = dst.iter().position(|t| *t == rest).expect("face exists");
                    a[(row, col)] = if r % 2 == 0 { 1.0 } else { -1.0 };
                }
            }
            Term {
                alpha: MultiIndex::unit(dim, p),
                matrix: a,
            }
        })
        .collect();
    Some(op(
        format!("boundary_d{dim}_m{m}"),
        dim,
        src.len(),
        dst.len(),
        1,
        terms,
    ))
}

/// Names accepted by [`by_name`].
pub const NAMES: &[&str] = &[
    "gradient1d",
    "gradient2d",
    "gradient3d",
    "gradient2d_m2",
    "hessian2d",
    "symmetric_gradient2d",
    "symmetric_gradient3d",
    "saint_venant2d",
    "deviatoric2d",
    "deviatoric3d",
    "laplacian2d",
    "laplacian3d",
    "divergence2d",
    "divergence3d",
    "curl2d",
    "rotated_gradient2d",
    "boundary_d2_m1",
    "boundary_d2_m2",
    "boundary_d3_m1",
    "boundary_d3_m2",
    "boundary_d3_m3",
    "mueller_diagonal",
];

pub fn by_name(name: &str) -> Option<LinearOperator> {
    let mut o = match name {
        "gradient1d" => gradient(1, 1),
        "gradient2d" => gradient(2, 1),
        "gradient3d" => gradient(3, 1),
        "gradient2d_m2" => gradient(2, 2),
        "hessian2d" => k_gradient(2, 1, 2),
        "symmetric_gradient2d" => symmetric_gradient(2),
        "symmetric_gradient3d" => symmetric_gradient(3),
        "saint_venant2d" => saint_venant_2d(),
        "deviatoric2d" => deviatoric(2),
        "deviatoric3d" => deviatoric(3),
        "laplacian2d" => laplacian(2),
        "laplacian3d" => laplacian(3),
        "divergence2d" => divergence(2),
        "divergence3d" => divergence(3),
        "curl2d" => curl_2d(),
        "rotated_gradient2d" => rotated_gradient_2d(),
        "mueller_diagonal" => mueller_diagonal(),
        other => {
            let rest = other.strip_prefix("boundary_d")?;
            let (d, m) = rest.split_once("_m")?;
            current_boundary(d.parse().ok()?, m.parse().ok()?)?
        }
    };
    // Gallery files carry the short name.
    o = LinearOperator::new(
        name,
        o.dim(),
        o.fiber_in(),
        o.fiber_out(),
        o.order(),
        o.terms().to_vec(),
    )
    .expect("renaming keeps validity");
    Some(o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::RANK_TOL;
    use crate::operator::{constant_rank_audit, exactness_check};

    #[test]
    fn every_name_resolves() {
        for n in NAMES {
            let o = by_name(n).unwrap_or_else(|| panic!("{n}"));
            assert_eq!(o.name(), *n);
        }
        assert!(by_name("boundary_d4_m1").is_none());
        assert!(by_name("nonsense").is_none());
    }

    #[test]
    fn symmetric_gradient_pairs_with_compatibility_operator() {
        let r = exactness_check(&saint_venant_2d(), &symmetric_gradient(2), 256, 1e-10).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn boundaries_compose_to_zero_and_are_exact() {
        for d in 2..=3 {
            for m in 2..=d {
                let outer = current_boundary(d, m - 1).unwrap();
                let inner = current_boundary(d, m).unwrap();
                let r = exactness_check(&outer, &inner, 128, 1e-10).unwrap();
                assert!(r.passed, "d={d} m={m}: {r:?}");
            }
        }
    }

    #[test]
    fn potentials_span_their_targets() {
        // Image cones of the potential gallery span the target space.
        for o in [
            gradient(2, 2),
            k_gradient(2, 1, 2),
            symmetric_gradient(3),
            deviatoric(2),
        ] {
            let mut vecs = Vec::new();
            for xi in crate::operator::sphere_samples(o.dim(), 64) {
                let svd = crate::linalg::Svd::new(&o.symbol_matrix(&xi));
                for col in svd.range(RANK_TOL).column_iter() {
                    vecs.push(col.iter().map(|z| z.re).collect::<Vec<_>>());
                    vecs.push(col.iter().map(|z| z.im).collect::<Vec<_>>());
                }
            }
            let span = crate::linalg::real_span_basis(&vecs, o.fiber_out(), 1e-8);
            let expected = if o.name().starts_with("deviatoric") {
                // trace-free symmetric matrices inside R^{d x d}
                o.dim() * (o.dim() + 1) / 2 - 1
            } else {
                o.fiber_out()
            };
            assert_eq!(span.len(), expected, "{}", o.name());
        }
    }

    #[test]
    fn boundary_wave_cones_span() {
        for d in 1..=3 {
            for m in 1..=d {
                let o = current_boundary(d, m).unwrap();
                let rep = constant_rank_audit(&o, 64, RANK_TOL).unwrap();
                assert!(rep.constant_rank, "{}", o.name());
                // e_I lies in the cone whenever some axis is missing from I.
                let expected = if m < d { o.fiber_in() } else { 0 };
                assert_eq!(rep.span_basis.len(), expected, "{}", o.name());
            }
        }
    }
}
