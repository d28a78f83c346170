//! Finite-difference verification of every differentiable tape op, each
//! checked through a scalar readout with non-uniform weights so no gradient
//! component hides behind symmetry. Step 1e-5, relative tolerance 1e-4;
//! inputs are constructed away from ReLU kinks and max ties.

mod common;

use common::{assert_grads_close, finite_diff_grad, wobble};
use gpdnn::linalg::Padding;
use gpdnn::tensor::numel_of;
use gpdnn::{Graph, Tensor, Var};

const FD_H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Run one gradient check: `build` maps parameter Vars to a scalar loss.
fn check(name: &str, shapes: &[&[usize]], x0: Vec<f64>, build: impl Fn(&Graph, &[Var]) -> gpdnn::Result<Var>) {
    let total: usize = shapes.iter().map(|s| numel_of(s)).sum();
    assert_eq!(x0.len(), total, "{}: bad initial point length", name);

    let split = |flat: &[f64]| -> Vec<Tensor> {
        let mut out = Vec::new();
        let mut off = 0;
        for s in shapes {
            let n = numel_of(s);
            out.push(Tensor::new(s, flat[off..off + n].to_vec()).unwrap());
            off += n;
        }
        out
    };

    let mut eval = |flat: &[f64]| -> f64 {
        let g = Graph::new();
        let vars: Vec<Var> = split(flat).into_iter().map(|t| g.var(t).unwrap()).collect();
        build(&g, &vars).unwrap().value().item().unwrap()
    };
    let numeric = finite_diff_grad(&mut eval, &x0, FD_H);

    let g = Graph::new();
    let vars: Vec<Var> = split(&x0).into_iter().map(|t| g.var(t).unwrap()).collect();
    let loss = build(&g, &vars).unwrap();
    let grads = g.backward(&loss).unwrap();
    let mut analytic = Vec::with_capacity(total);
    for v in &vars {
        analytic.extend_from_slice(grads.wrt_or_zeros(v).data());
    }
    assert_grads_close(&analytic, &numeric, TOL, name);
}

/// Weighted readout: sum(w .* y) with fixed pseudo-random weights.
fn readout(g: &Graph, y: &Var, seed: u64) -> gpdnn::Result<Var> {
    let shape = y.shape();
    let w = g.constant(Tensor::new(&shape, wobble(seed, numel_of(&shape))).unwrap())?;
    y.mul(&w)?.sum(None)
}

fn positive(seed: u64, n: usize) -> Vec<f64> {
    wobble(seed, n).into_iter().map(|v| 0.5 + 0.45 * v).collect()
}

/// Values bounded away from zero (for ReLU kinks and divisions).
fn off_zero(seed: u64, n: usize) -> Vec<f64> {
    wobble(seed, n)
        .into_iter()
        .map(|v| if v >= 0.0 { 0.2 + v } else { -0.2 + v })
        .collect()
}

#[test]
fn unary_elementwise_ops() {
    let shape: &[usize] = &[2, 3];
    let n = 6;
    let cases: Vec<(&str, Box<dyn Fn(&Var) -> gpdnn::Result<Var>>, Vec<f64>)> = vec![
        ("exp", Box::new(|x: &Var| x.exp()), wobble(1, n)),
        ("log", Box::new(|x: &Var| x.log()), positive(2, n)),
        ("relu", Box::new(|x: &Var| x.relu()), off_zero(3, n)),
        ("tanh", Box::new(|x: &Var| x.tanh()), wobble(4, n)),
        ("sigmoid", Box::new(|x: &Var| x.sigmoid()), wobble(5, n)),
        ("square", Box::new(|x: &Var| x.square()), wobble(6, n)),
        ("sqrt", Box::new(|x: &Var| x.sqrt()), positive(7, n)),
        ("normal_cdf", Box::new(|x: &Var| x.normal_cdf()), wobble(8, n)),
        ("affine", Box::new(|x: &Var| x.affine(-1.7, 0.3)), wobble(9, n)),
    ];
    for (name, f, x0) in cases {
        check(name, &[shape], x0, |g, vars| readout(g, &f(&vars[0])?, 99));
    }
}

#[test]
fn binary_ops_with_broadcasting() {
    // [2,3] against [3]: suffix broadcast
    for (name, f) in [
        ("add", (|a, b| Var::add(a, b)) as fn(&Var, &Var) -> gpdnn::Result<Var>),
        ("sub", Var::sub as fn(&Var, &Var) -> gpdnn::Result<Var>),
        ("mul", Var::mul as fn(&Var, &Var) -> gpdnn::Result<Var>),
        ("div", Var::div as fn(&Var, &Var) -> gpdnn::Result<Var>),
    ] {
        let mut x0 = wobble(10, 6);
        x0.extend(off_zero(11, 3));
        check(&format!("{}-suffix", name), &[&[2, 3], &[3]], x0, move |g, vars| {
            readout(g, &f(&vars[0], &vars[1])?, 98)
        });
        // [2,1] against [1,3]: both sides broadcast
        let mut x1 = wobble(12, 2);
        x1.extend(off_zero(13, 3));
        check(&format!("{}-outer", name), &[&[2, 1], &[1, 3]], x1, move |g, vars| {
            readout(g, &f(&vars[0], &vars[1])?, 97)
        });
        // scalar against [2,2]
        let mut x2 = off_zero(14, 1);
        x2.extend(off_zero(15, 4));
        check(&format!("{}-scalar", name), &[&[], &[2, 2]], x2, move |g, vars| {
            readout(g, &f(&vars[0], &vars[1])?, 96)
        });
    }
}

#[test]
fn matmul_transpose_reshape() {
    let mut x0 = wobble(20, 6);
    x0.extend(wobble(21, 12));
    check("matmul", &[&[2, 3], &[3, 4]], x0, |g, vars| {
        readout(g, &vars[0].matmul(&vars[1])?, 95)
    });

    let x1 = wobble(22, 6);
    check("transpose-chain", &[&[2, 3]], x1, |g, vars| {
        let y = vars[0].t()?.tanh()?.reshape(&[6])?;
        readout(g, &y, 94)
    });
}

#[test]
fn cholesky_backward_vs_finite_differences() {
    // A = M M^T + 2I is SPD for any M; perturbing M keeps the chain
    // differentiable and exercises the symmetrized gradient convention.
    let n = 5;
    let x0 = wobble(30, n * n);
    check("cholesky", &[&[n, n]], x0, move |g, vars| {
        let two_eye = g.constant(Tensor::eye(n).map(|v| 2.0 * v))?;
        let a = vars[0].matmul(&vars[0].t()?)?.add(&two_eye)?;
        let l = a.cholesky()?;
        readout(g, &l, 93)
    });
}

#[test]
fn cholesky_flows_through_downstream_solve() {
    let n = 4;
    let mut x0 = wobble(31, n * n);
    x0.extend(wobble(32, n * 2));
    check("cholesky+solve", &[&[n, n], &[n, 2]], x0, move |g, vars| {
        let eye = g.constant(Tensor::eye(n))?;
        let a = vars[0].matmul(&vars[0].t()?)?.add(&eye)?;
        let l = a.cholesky()?;
        let x = l.tri_solve(&vars[1], false)?;
        readout(g, &x, 92)
    });
}

#[test]
fn triangular_solve_both_modes() {
    // L = strict_lower(P) + exp(diag(P)) via mask constants keeps the factor
    // well-conditioned while every P entry stays a free parameter.
    let n = 4;
    for transpose in [false, true] {
        let mut x0 = wobble(33, n * n);
        x0.extend(wobble(34, n * 3));
        check(
            &format!("tri_solve-transpose={}", transpose),
            &[&[n, n], &[n, 3]],
            x0,
            move |g, vars| {
                let mut strict = Tensor::zeros(&[n, n]);
                for i in 0..n {
                    for j in 0..i {
                        strict.data_mut()[i * n + j] = 1.0;
                    }
                }
                let smask = g.constant(strict)?;
                let dmask = g.constant(Tensor::eye(n))?;
                let l = vars[0].mul(&smask)?.add(&vars[0].mul(&dmask)?.exp()?.mul(&dmask)?)?;
                let x = l.tri_solve(&vars[1], transpose)?;
                readout(g, &x, 91)
            },
        );
    }
}

#[test]
fn reductions_all_kinds() {
    let shape: &[usize] = &[2, 3, 2];
    let n = 12;
    for axis in [None, Some(0usize), Some(1), Some(2)] {
        check(&format!("sum-{:?}", axis), &[shape], wobble(40, n), move |g, vars| {
            readout(g, &vars[0].sum(axis)?, 90)
        });
        check(&format!("mean-{:?}", axis), &[shape], wobble(41, n), move |g, vars| {
            readout(g, &vars[0].mean(axis)?, 89)
        });
        // distinct values so the max never sits at a tie
        let xs: Vec<f64> = (0..n).map(|i| (i as f64) * 0.37 + wobble(42, n)[i] * 0.1).collect();
        check(&format!("max-{:?}", axis), &[shape], xs, move |g, vars| {
            readout(g, &vars[0].max(axis)?, 88)
        });
        check(&format!("prod-{:?}", axis), &[shape], off_zero(43, n), move |g, vars| {
            readout(g, &vars[0].prod(axis)?, 87)
        });
    }
}

#[test]
fn conv2d_wrt_all_inputs() {
    for pad in [Padding::Same, Padding::Valid] {
        let (b, h, w, cin, kh, kw, cout) = (2, 5, 4, 2, 3, 3, 3);
        let mut x0 = wobble(50, b * h * w * cin);
        x0.extend(wobble(51, kh * kw * cin * cout).iter().map(|v| v * 0.5));
        x0.extend(wobble(52, cout));
        check(
            &format!("conv2d-{:?}", pad),
            &[&[b, h, w, cin], &[kh, kw, cin, cout], &[cout]],
            x0,
            move |g, vars| readout(g, &vars[0].conv2d(&vars[1], &vars[2], pad)?, 86),
        );
    }
}

#[test]
fn maxpool_wrt_input() {
    for pad in [Padding::Same, Padding::Valid] {
        let (b, h, w, c) = (2, 5, 4, 2);
        let n = b * h * w * c;
        // strictly distinct entries: no ties inside any window
        let x0: Vec<f64> = (0..n).map(|i| (i as f64) * 0.11 + wobble(53, n)[i] * 0.01).collect();
        check(&format!("maxpool-{:?}", pad), &[&[b, h, w, c]], x0, move |g, vars| {
            readout(g, &vars[0].maxpool2d(pad)?, 85)
        });
    }
}

#[test]
fn structural_ops() {
    check("log_softmax", &[&[3, 4]], wobble(60, 12), |g, vars| {
        readout(g, &vars[0].log_softmax()?, 84)
    });

    check("gather_rows", &[&[3, 4]], wobble(61, 12), |g, vars| {
        readout(g, &vars[0].gather_rows(&[2, 0, 3])?, 83)
    });

    check("select_cols", &[&[3, 4]], wobble(62, 12), |g, vars| {
        readout(g, &vars[0].select_cols(&[3, 1])?, 82)
    });

    check("stack_cols", &[&[3], &[3]], wobble(63, 6), |g, vars| {
        let y = g.stack_cols(&[vars[0].clone(), vars[1].clone()])?;
        readout(g, &y, 81)
    });

    check("diag_embed", &[&[4]], wobble(64, 4), |g, vars| {
        readout(g, &vars[0].diag_embed()?, 80)
    });
}

#[test]
fn composite_mlp_cross_entropy() {
    let (b, din, hid, c) = (4, 3, 5, 3);
    let mut x0 = wobble(70, b * din);
    x0.extend(wobble(71, din * hid).iter().map(|v| v * 0.6));
    x0.extend(wobble(72, hid));
    x0.extend(wobble(73, hid * c).iter().map(|v| v * 0.6));
    x0.extend(wobble(74, c));
    let labels = [0usize, 2, 1, 2];
    check(
        "mlp-cross-entropy",
        &[&[b, din], &[din, hid], &[hid], &[hid, c], &[c]],
        x0,
        move |_, vars| {
            let h = vars[0].matmul(&vars[1])?.add(&vars[2])?.relu()?;
            let logits = h.matmul(&vars[3])?.add(&vars[4])?;
            let logp = logits.log_softmax()?;
            logp.gather_rows(&labels)?.mean(None)?.affine(-1.0, 0.0)
        },
    );
}

#[test]
fn robustmax_variational_expectation_chain() {
    use gpdnn::robustmax::{argmax_probs, variational_expectation, BetaVar};
    let (b, c) = (3, 4);
    let labels = [2usize, 0, 3];
    let mut x0 = wobble(100, b * c);
    x0.extend(wobble(101, b * c).iter().map(|v| v * 0.4)); // log-variances
    x0.push(-5.8); // beta logit
    check(
        "robustmax-varexp",
        &[&[b, c], &[b, c], &[]],
        x0,
        move |g, vars| {
            let var = vars[1].exp()?;
            let p = argmax_probs(&vars[0], &var, 12)?;
            let beta = BetaVar::Learnable(vars[2].clone());
            let ve = variational_expectation(g, &p, &beta, &labels)?;
            ve.sum(None)
        },
    );
}

#[test]
fn gp_marginals_and_kl_chain() {
    use gpdnn::gp::{GpVars, KernelKind};
    let (m, d, c, b) = (4usize, 3usize, 2usize, 3usize);
    let shapes: Vec<Vec<usize>> = vec![
        vec![m, d],       // z
        vec![m, c],       // vmean
        vec![m, m],       // l_strict class 0
        vec![m, m],       // l_strict class 1
        vec![m],          // l_logdiag class 0
        vec![m],          // l_logdiag class 1
        vec![],           // log_sf2
        vec![],           // log_len
        vec![],           // log_noise
        vec![b, d],       // features
    ];
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut x0 = Vec::new();
    for (i, s) in shapes.iter().enumerate() {
        x0.extend(wobble(110 + i as u64, numel_of(s)).iter().map(|v| v * 0.7));
    }
    check("gp-marginals-kl", &shape_refs, x0, move |g, vars| {
        let gp = GpVars {
            kind: KernelKind::Rbf,
            classes: c,
            z: vars[0].clone(),
            vmean: vars[1].clone(),
            l_strict: vec![vars[2].clone(), vars[3].clone()],
            l_logdiag: vec![vars[4].clone(), vars[5].clone()],
            log_sf2: vars[6].clone(),
            log_len: Some(vars[7].clone()),
            log_noise: vars[8].clone(),
        };
        let (mu, var) = gp.marginals(g, &vars[9])?;
        let kl = gp.kl(g)?;
        readout(g, &mu, 78)?.add(&readout(g, &var, 77)?)?.add(&kl)
    });
}

#[test]
fn dropout_with_fixed_mask() {
    use rand::SeedableRng;
    let x0 = wobble(75, 8);
    // same seed on every evaluation: the mask is a constant of the function
    check("dropout", &[&[2, 4]], x0, |g, vars| {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(7);
        let y = vars[0].dropout(0.5, &mut rng)?;
        readout(g, &y, 79)
    });
}
