//! Dense reverse-mode differentiation over `f64` matrices, plus an
//! adaptive-moment optimizer and a finite-difference checker.

mod gradcheck;
mod optim;
mod tape;

pub use gradcheck::{check_gradients, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub use optim::Adam;
pub use tape::{normalize_rows, ContrastMasks, Gradients, Tape, Var};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Matrix = Array2<f64>;

/// Additive floor used inside norms and logarithms.
pub const EPS: f64 = 1e-12;

/// Cosine similarity between every row of `a` and every row of `b`.
pub fn cosine_similarity_matrix(tape: &Tape, a: Var, b: Var) -> Var {
    let an = tape.row_l2_normalize(a);
    let bn = tape.row_l2_normalize(b);
    let bt = tape.transpose(bn);
    tape.matmul(an, bt)
}

/// Squared Frobenius norm.
pub fn frobenius_sq(tape: &Tape, a: Var) -> Var {
    tape.sum(tape.square(a))
}

/// Glorot-uniform initialization.
pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

pub fn standard_normal(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Array2::from_shape_fn((rows, cols), |_| -> f64 { StandardNormal.sample(rng) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use ndarray::array;
    use sprs::TriMat;
    use std::rc::Rc;

    const H: f64 = 1e-6;
    const TOL: f64 = 1e-5;

    fn rand_mat(r: usize, c: usize, seed: u64) -> Matrix {
        standard_normal(r, c, &mut Stream::from_seed(seed))
    }

    fn check(params: &[Matrix], f: impl Fn(&Tape, &[Var]) -> Var) {
        let rep = check_gradients(params, H, f);
        assert!(rep.max_rel_error <= TOL, "{rep:?}");
        assert!(rep.entries_checked > 0);
    }

    // Projects an output onto a fixed random direction so every output entry
    // contributes to the scalar being differentiated.
    fn probe(t: &Tape, y: Var, seed: u64) -> Var {
        let (r, c) = t.shape(y);
        let w = t.constant(rand_mat(r, c, seed));
        t.sum(t.mul(y, w))
    }

    #[test]
    fn identity_matmul() {
        let t = Tape::new();
        let a = rand_mat(3, 4, 1);
        let i = t.constant(Array2::eye(3));
        let y = t.matmul(i, t.constant(a.clone()));
        assert_eq!(*t.value(y), a);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let t = Tape::new();
        let y = t.row_softmax(t.constant(Array2::from_elem((2, 5), 3.7)));
        assert!(t.value(y).iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn sum_and_half_square_gradients() {
        let x = rand_mat(3, 2, 2);
        let t = Tape::new();
        let v = t.param(x.clone());
        let s = t.sum(v);
        assert_eq!(t.backward(s).unwrap().wrt(v), Matrix::ones((3, 2)));

        let t = Tape::new();
        let v = t.param(x.clone());
        let l = t.scale(frobenius_sq(&t, v), 0.5);
        let g = t.backward(l).unwrap().wrt(v);
        assert!((g - &x).iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let t = Tape::new();
        let v = t.param(rand_mat(2, 2, 3));
        assert!(t.backward(v).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let t = Tape::new();
        let a = t.param(rand_mat(2, 2, 4));
        let c = t.constant(rand_mat(2, 2, 5));
        let l = t.sum(t.mul(a, c));
        let g = t.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert!(g.get(a).is_some());
    }

    #[test]
    fn grad_matmul_transpose_add_sub_mul() {
        check(&[rand_mat(3, 4, 10), rand_mat(4, 2, 11), rand_mat(3, 2, 12)], |t, v| {
            let ab = t.matmul(v[0], v[1]);
            let y = t.mul(t.sub(ab, v[2]), t.add(ab, v[2]));
            let z = t.transpose(y);
            probe(t, z, 13)
        });
    }

    fn masks(n: usize, damped: bool, seed: u64) -> Rc<ContrastMasks> {
        let r = rand_mat(n, n, seed);
        Rc::new(ContrastMasks {
            positive: Array2::from_shape_fn((n, n), |(i, j)| i == j || r[[i, j]] > 1.0),
            damping: damped.then(|| r.mapv(|v| 1.0 / (1.0 + v.exp()))),
        })
    }

    #[test]
    fn grad_info_nce_rows() {
        for damped in [false, true] {
            let m = masks(5, damped, 30);
            check(&[rand_mat(5, 5, 31)], |t, v| probe(t, t.info_nce_rows(v[0], Rc::clone(&m), 0.7), 32));
        }
    }

    #[test]
    fn info_nce_matches_composite_form() {
        let n = 6;
        let m = masks(n, true, 33);
        let s = rand_mat(n, n, 34);
        let tau = 0.6;
        let pos = m.positive.mapv(|b| if b { 1.0 } else { 0.0 });
        let t = Tape::new();
        let sv = t.param(s.clone());
        let fused = t.sum(t.info_nce_rows(sv, Rc::clone(&m), tau));

        let ct = Tape::new();
        let cv = ct.param(s);
        let p = ct.row_sum(ct.mul(ct.exp(ct.scale(cv, 1.0 / tau)), ct.constant(pos.clone())));
        let damped = ct.mul(cv, ct.constant(m.damping.clone().unwrap()));
        let q = ct.row_sum(ct.mul(ct.exp(ct.scale(damped, 1.0 / tau)), ct.constant(pos.mapv(|v| 1.0 - v))));
        let composite = ct.sum(ct.sub(ct.log(ct.add(p, q)), ct.log(p)));

        assert!((t.scalar_value(fused) - ct.scalar_value(composite)).abs() < 1e-12);
        let (gf, gc) = (t.backward(fused).unwrap().wrt(sv), ct.backward(composite).unwrap().wrt(cv));
        assert!((gf - gc).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn grad_add_row_scale_scale_by_element() {
        check(&[rand_mat(4, 3, 20), rand_mat(1, 3, 21), rand_mat(2, 2, 22)], |t, v| {
            let y = t.scale(t.add_row(v[0], v[1]), -1.7);
            let s = t.element(v[2], 1, 0);
            let z = t.scale_by(y, s);
            probe(t, z, 23)
        });
    }

    #[test]
    fn grad_smooth_unaries() {
        let x = rand_mat(3, 3, 30);
        check(&[x.clone()], |t, v| probe(t, t.exp(t.scale(v[0], 0.5)), 31));
        check(&[x.clone()], |t, v| probe(t, t.tanh(v[0]), 32));
        check(&[x.clone()], |t, v| probe(t, t.elu(v[0]), 33));
        check(&[x.clone()], |t, v| probe(t, t.softplus(v[0]), 34));
        check(&[x.clone()], |t, v| probe(t, t.square(v[0]), 35));
        let pos = x.mapv(|a| a.abs() + 0.5);
        check(&[pos], |t, v| probe(t, t.log(v[0]), 36));
    }

    #[test]
    fn grad_kinked_unaries_away_from_kinks() {
        let x = rand_mat(4, 4, 40).mapv(|a| if a.abs() < 0.05 { a + 0.2 } else { a });
        check(&[x.clone()], |t, v| probe(t, t.relu(v[0]), 41));
        check(&[x.clone()], |t, v| probe(t, t.abs(v[0]), 42));
        // keep |t| away from phi = 0.3
        let x = x.mapv(|a| if (a.abs() - 0.3).abs() < 0.05 { a * 1.5 } else { a });
        check(&[x, array![[0.3]]], |t, v| probe(t, t.soft_threshold(v[0], v[1]), 43));
    }

    #[test]
    fn soft_threshold_values() {
        let t = Tape::new();
        let y = t.soft_threshold(t.constant(array![[1.2, -1.2, 0.3, 0.0]]), t.scalar(0.5));
        let v = t.value(y);
        assert!((v[[0, 0]] - 0.7).abs() < 1e-15);
        assert!((v[[0, 1]] + 0.7).abs() < 1e-15);
        assert_eq!(v[[0, 2]], 0.0);
        assert_eq!(v[[0, 3]], 0.0);
    }

    #[test]
    fn grad_row_ops() {
        let x = rand_mat(4, 5, 50);
        check(&[x.clone()], |t, v| probe(t, t.row_softmax(v[0]), 51));
        check(&[x.clone()], |t, v| probe(t, t.row_l2_normalize(v[0]), 52));
        check(&[x.clone()], |t, v| probe(t, t.row_sum(v[0]), 53));
        check(&[x.clone()], |t, v| probe(t, t.col_mean(v[0]), 54));
        check(&[x.clone()], |t, v| t.mean(t.square(v[0])));
    }

    #[test]
    fn grad_cosine_concat_masked_select() {
        check(&[rand_mat(4, 3, 60), rand_mat(5, 3, 61)], |t, v| {
            probe(t, cosine_similarity_matrix(t, v[0], v[1]), 62)
        });
        check(&[rand_mat(3, 2, 63), rand_mat(3, 4, 64)], |t, v| {
            probe(t, t.concat_columns(&[v[0], v[1], v[0]]), 65)
        });
        let mask = Array2::from_shape_fn((3, 3), |(i, j)| i != j);
        check(&[rand_mat(3, 3, 66)], |t, v| probe(t, t.masked_select(v[0], &mask), 67));
    }

    #[test]
    fn masked_select_picks_off_diagonal() {
        let t = Tape::new();
        let a = t.constant(array![[1., 2.], [3., 4.]]);
        let mask = array![[false, true], [true, false]];
        assert_eq!(*t.value(t.masked_select(a, &mask)), array![[2.], [3.]]);
    }

    fn random_sparse(n: usize, seed: u64) -> sprs::CsMat<f64> {
        let mut rng = Stream::from_seed(seed);
        let mut tri = TriMat::new((n, n));
        for i in 0..n {
            for j in 0..n {
                if rng.gen_bool(0.1) {
                    tri.add_triplet(i, j, rng.gen_range(0.1..1.0));
                }
            }
        }
        tri.to_csr()
    }

    #[test]
    fn sparse_matmul_matches_dense() {
        let n = 60;
        let a = random_sparse(n, 70);
        let dense = a.to_dense();
        let x = rand_mat(n, 7, 71);
        let w = rand_mat(n, 7, 72);

        let t = Tape::new();
        let xv = t.param(x.clone());
        let y = t.sparse_matmul(Rc::new(a.clone()), xv);
        let l = t.sum(t.mul(y, t.constant(w.clone())));
        let ys = (*t.value(y)).clone();
        let gs = t.backward(l).unwrap().wrt(xv);

        let t = Tape::new();
        let xv = t.param(x);
        let y = t.matmul(t.constant(dense), xv);
        let l = t.sum(t.mul(y, t.constant(w)));
        let yd = (*t.value(y)).clone();
        let gd = t.backward(l).unwrap().wrt(xv);

        assert!((&ys - &yd).iter().all(|d| d.abs() <= 1e-12));
        assert!((&gs - &gd).iter().all(|d| d.abs() <= 1e-12));
        check(&[rand_mat(n, 2, 73)], |t, v| probe(t, t.sparse_matmul(Rc::new(a.clone()), v[0]), 74));
    }

    #[test]
    fn optimizer_run_is_bitwise_reproducible() {
        let run = || {
            let mut w = rand_mat(5, 3, 80);
            let x = rand_mat(8, 5, 81);
            let mut opt = Adam::new(0.01);
            for _ in 0..25 {
                let t = Tape::new();
                let wv = t.param(w.clone());
                let y = t.tanh(t.matmul(t.constant(x.clone()), wv));
                let l = frobenius_sq(&t, y);
                let g = t.backward(l).unwrap().wrt(wv);
                opt.step(&mut [&mut w], &[g]).unwrap();
            }
            w
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
