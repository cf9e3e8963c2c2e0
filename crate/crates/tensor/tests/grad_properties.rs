//! Randomized finite-difference checks over every graph primitive, plus the
//! bit-exact replay property.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqsc_tensor::{grad_check, Graph, Tensor};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Data kept away from zero so kinked activations (|x|, leaky relu) see a
/// locally smooth function at the stencil points.
fn rand_tensor_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.1..1.5);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn every_primitive_passes_grad_check_100_trials() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0DE_B00C);
    let kinds = [
        "add", "sub", "mul", "neg", "scale", "add_rowvec", "matmul", "batch_matmul", "conv2d",
        "conv2d_transpose", "leaky_relu", "gelu", "tanh", "softplus", "abs", "log", "group_norm",
        "layer_norm", "softmax", "mean", "sum", "sum_sq", "reshape", "permute", "gather_rows",
        "cross_entropy_sum",
    ];
    for trial in 0..100u64 {
        let kind = kinds[trial as usize % kinds.len()];
        let rel = run_trial(kind, &mut rng);
        assert!(
            rel < TOL,
            "trial {trial} primitive {kind}: rel err {rel:.3e} >= {TOL:.0e}"
        );
    }
}

fn run_trial(kind: &str, rng: &mut ChaCha8Rng) -> f64 {
    match kind {
        "add" | "sub" | "mul" => {
            let shape = [rng.gen_range(1..4usize), rng.gen_range(1..6usize)];
            let x = rand_tensor(rng, &shape, -2.0, 2.0);
            let other = rand_tensor(rng, &shape, -2.0, 2.0);
            let op = kind.to_string();
            grad_check(
                move |g, xv| {
                    let o = g.constant(other.clone());
                    let y = match op.as_str() {
                        "add" => g.add(xv, o)?,
                        "sub" => g.sub(xv, o)?,
                        _ => g.mul(xv, o)?,
                    };
                    g.mean(y)
                },
                &x,
                EPS,
            )
            .unwrap()
        }
        "neg" => {
            let x = rand_tensor(rng, &[5], -2.0, 2.0);
            grad_check(
                |g, xv| {
                    let y = g.neg(xv)?;
                    g.sum(y)
                },
                &x,
                EPS,
            )
            .unwrap()
        }
        "scale" => {
            let c = rng.gen_range(-3.0..3.0);
            let x = rand_tensor(rng, &[4, 3], -2.0, 2.0);
            grad_check(
                move |g, xv| {
                    let y = g.scale(xv, c)?;
                    g.mean(y)
                },
                &x,
                EPS,
            )
            .unwrap()
        }
        "add_rowvec" => {
            let (r, d) = (rng.gen_range(1..5usize), rng.gen_range(1..6usize));
            let bias = rand_tensor(rng, &[d], -1.0, 1.0);
            let x = rand_tensor(rng, &[r, d], -1.0, 1.0);
            // alternate which side is checked
            if rng.gen_bool(0.5) {
                grad_check(
                    move |g, xv| {
                        let b = g.constant(bias.clone());
                        let y = g.add_rowvec(xv, b)?;
                        g.sum(y)
                    },
                    &x,
                    EPS,
                )
                .unwrap()
            } else {
                grad_check(
                    move |g, bv| {
                        let xc = g.constant(x.clone());
                        let y = g.add_rowvec(xc, bv)?;
                        g.sum(y)
                    },
                    &bias,
                    EPS,
                )
                .unwrap()
            }
        }
        "matmul" => {
            let (m, k, n) = (
                rng.gen_range(1..4usize),
                rng.gen_range(1..4usize),
                rng.gen_range(1..4usize),
            );
            let a = rand_tensor(rng, &[m, k], -1.0, 1.0);
            let b = rand_tensor(rng, &[k, n], -1.0, 1.0);
            if rng.gen_bool(0.5) {
                grad_check(
                    move |g, av| {
                        let bv = g.constant(b.clone());
                        let y = g.matmul(av, bv)?;
                        g.sum_sq(y)
                    },
                    &a,
                    EPS,
                )
                .unwrap()
            } else {
                grad_check(
                    move |g, bv| {
                        let av = g.constant(a.clone());
                        let y = g.matmul(av, bv)?;
                        g.sum_sq(y)
                    },
                    &b,
                    EPS,
                )
                .unwrap()
            }
        }
        "batch_matmul" => {
            let (bsz, m, k, n) = (2usize, 2usize, 3usize, 2usize);
            let tb = rng.gen_bool(0.5);
            let a = rand_tensor(rng, &[bsz, m, k], -1.0, 1.0);
            let b = if tb {
                rand_tensor(rng, &[bsz, n, k], -1.0, 1.0)
            } else {
                rand_tensor(rng, &[bsz, k, n], -1.0, 1.0)
            };
            grad_check(
                move |g, av| {
                    let bv = g.constant(b.clone());
                    let y = g.batch_matmul(av, bv, tb)?;
                    g.sum_sq(y)
                },
                &a,
                EPS,
            )
            .unwrap()
        }
        "conv2d" => {
            let cin = rng.gen_range(1..3usize);
            let cout = rng.gen_range(1..3usize);
            let hw = rng.gen_range(4..7usize);
            let stride = rng.gen_range(1..3usize);
            let x = rand_tensor(rng, &[cin, hw, hw], -1.0, 1.0);
            let w = rand_tensor(rng, &[cout, cin, 3, 3], -0.5, 0.5);
            let b = rand_tensor(rng, &[cout], -0.2, 0.2);
            if rng.gen_bool(0.5) {
                grad_check(
                    move |g, xv| {
                        let wv = g.constant(w.clone());
                        let bv = g.constant(b.clone());
                        let y = g.conv2d(xv, wv, Some(bv), stride, 1)?;
                        g.mean(y)
                    },
                    &x,
                    EPS,
                )
                .unwrap()
            } else {
                grad_check(
                    move |g, wv| {
                        let xv = g.constant(x.clone());
                        let bv = g.constant(b.clone());
                        let y = g.conv2d(xv, wv, Some(bv), stride, 1)?;
                        g.mean(y)
                    },
                    &w,
                    EPS,
                )
                .unwrap()
            }
        }
        "conv2d_transpose" => {
            let cin = rng.gen_range(1..3usize);
            let cout = rng.gen_range(1..3usize);
            let hw = rng.gen_range(2..5usize);
            let x = rand_tensor(rng, &[cin, hw, hw], -1.0, 1.0);
            let w = rand_tensor(rng, &[cin, cout, 4, 4], -0.5, 0.5);
            let b = rand_tensor(rng, &[cout], -0.2, 0.2);
            if rng.gen_bool(0.5) {
                grad_check(
                    move |g, xv| {
                        let wv = g.constant(w.clone());
                        let bv = g.constant(b.clone());
                        let y = g.conv2d_transpose(xv, wv, Some(bv), 2, 1)?;
                        g.mean(y)
                    },
                    &x,
                    EPS,
                )
                .unwrap()
            } else {
                grad_check(
                    move |g, wv| {
                        let xv = g.constant(x.clone());
                        let bv = g.constant(b.clone());
                        let y = g.conv2d_transpose(xv, wv, Some(bv), 2, 1)?;
                        g.mean(y)
                    },
                    &w,
                    EPS,
                )
                .unwrap()
            }
        }
        "leaky_relu" => {
            let x = rand_tensor_off_zero(rng, &[3, 4]);
            let slope = rng.gen_range(0.01..0.3);
            grad_check(
                move |g, xv| {
                    let y = g.leaky_relu(xv, slope)?;
                    g.sum(y)
                },
                &x,
                EPS,
            )
            .unwrap()
        }
        "gelu" => {
            let x = rand_tensor(rng, &[6], -2.0, 2.0);
            grad_check(
                |g, xv| {
                    let y = g.gelu(xv)?;
                    g.sum(y)
                },
                &x,
                EPS,
            )
            .unwrap()
        }
        "tanh" => {
            let x = rand_tensor(rng, &[5], -2.0, 2.0);
            grad_check(
                |g, xv| {
                    let y = g.tanh(xv)?;
                    g.sum(y)
                },
                &x,
                EPS,
            )
            .unwrap()
        }
        "softplus" => {
            let x = rand_tensor(rng, &[5], -3.0, 3.0);
            grad_check(
                |g, xv| {
                    let y = g.softplus(xv)?;
                    g.sum(y)
                },
                &x,
                EPS,
            )
            .unwrap()
        }
        "abs" => {
            let x = rand_tensor_off_zero(rng, &[7]);
            grad_check(
                |g, xv| {
                    let y = g.abs(xv)?;
                    g.mean(y)
                },
                &x,
                EPS,
            )
            .unwrap()
        }
        "log" => {
            let x = rand_tensor(rng, &[5], 0.4, 3.0);
            grad_check(
                |g, xv| {
                    let y = g.log(xv)?;
                    g.sum(y)
                },
                &x,
                EPS,
            )
            .unwrap()
        }
        "group_norm" => {
            let groups = rng.gen_range(1..3usize);
            let c = groups * rng.gen_range(1..3usize);
            let hw = rng.gen_range(2..4usize);
            let x = rand_tensor(rng, &[c, hw, hw], -2.0, 2.0);
            let gamma = rand_tensor(rng, &[c], 0.5, 1.5);
            let beta = rand_tensor(rng, &[c], -0.5, 0.5);
            let pick = rng.gen_range(0..3u8);
            match pick {
                0 => grad_check(
                    move |g, xv| {
                        let gv = g.constant(gamma.clone());
                        let bv = g.constant(beta.clone());
                        let y = g.group_norm(xv, gv, bv, groups, 1e-5)?;
                        g.sum_sq(y)
                    },
                    &x,
                    EPS,
                )
                .unwrap(),
                1 => grad_check(
                    move |g, gv| {
                        let xv = g.constant(x.clone());
                        let bv = g.constant(beta.clone());
                        let y = g.group_norm(xv, gv, bv, groups, 1e-5)?;
                        g.sum_sq(y)
                    },
                    &gamma,
                    EPS,
                )
                .unwrap(),
                _ => grad_check(
                    move |g, bv| {
                        let xv = g.constant(x.clone());
                        let gv = g.constant(gamma.clone());
                        let y = g.group_norm(xv, gv, bv, groups, 1e-5)?;
                        g.sum_sq(y)
                    },
                    &beta,
                    EPS,
                )
                .unwrap(),
            }
        }
        "layer_norm" => {
            let (r, d) = (rng.gen_range(1..4usize), rng.gen_range(2..6usize));
            let x = rand_tensor(rng, &[r, d], -2.0, 2.0);
            let gamma = rand_tensor(rng, &[d], 0.5, 1.5);
            let beta = rand_tensor(rng, &[d], -0.5, 0.5);
            grad_check(
                move |g, xv| {
                    let gv = g.constant(gamma.clone());
                    let bv = g.constant(beta.clone());
                    let y = g.layer_norm(xv, gv, bv, 1e-5)?;
                    g.sum_sq(y)
                },
                &x,
                EPS,
            )
            .unwrap()
        }
        "softmax" => {
            let (r, d) = (rng.gen_range(1..4usize), rng.gen_range(2..6usize));
            let x = rand_tensor(rng, &[r, d], -2.0, 2.0);
            let w = rand_tensor(rng, &[r, d], -1.0, 1.0);
            grad_check(
                move |g, xv| {
                    let y = g.softmax(xv)?;
                    let wv = g.constant(w.clone());
                    let z = g.mul(y, wv)?;
                    g.sum(z)
                },
                &x,
                EPS,
            )
            .unwrap()
        }
        "mean" => {
            let x = rand_tensor(rng, &[3, 3], -2.0, 2.0);
            grad_check(|g, xv| g.mean(xv), &x, EPS).unwrap()
        }
        "sum" => {
            let x = rand_tensor(rng, &[2, 5], -2.0, 2.0);
            grad_check(|g, xv| g.sum(xv), &x, EPS).unwrap()
        }
        "sum_sq" => {
            let x = rand_tensor(rng, &[6], -2.0, 2.0);
            grad_check(|g, xv| g.sum_sq(xv), &x, EPS).unwrap()
        }
        "reshape" => {
            let x = rand_tensor(rng, &[2, 6], -2.0, 2.0);
            let w = rand_tensor(rng, &[3, 4], -1.0, 1.0);
            grad_check(
                move |g, xv| {
                    let y = g.reshape(xv, &[3, 4])?;
                    let wv = g.constant(w.clone());
                    let z = g.mul(y, wv)?;
                    g.sum(z)
                },
                &x,
                EPS,
            )
            .unwrap()
        }
        "permute" => {
            let x = rand_tensor(rng, &[2, 3, 4], -2.0, 2.0);
            let w = rand_tensor(rng, &[4, 2, 3], -1.0, 1.0);
            grad_check(
                move |g, xv| {
                    let y = g.permute(xv, &[2, 0, 1])?;
                    let wv = g.constant(w.clone());
                    let z = g.mul(y, wv)?;
                    g.sum(z)
                },
                &x,
                EPS,
            )
            .unwrap()
        }
        "gather_rows" => {
            let l = rng.gen_range(3..8usize);
            let q = rng.gen_range(2..5usize);
            let table = rand_tensor(rng, &[l, q], -1.0, 1.0);
            let idx: Vec<usize> = (0..6).map(|_| rng.gen_range(0..l)).collect();
            grad_check(
                move |g, tv| {
                    let y = g.gather_rows(tv, &idx)?;
                    g.sum_sq(y)
                },
                &table,
                EPS,
            )
            .unwrap()
        }
        "cross_entropy_sum" => {
            let (p, l) = (rng.gen_range(1..4usize), rng.gen_range(2..8usize));
            let x = rand_tensor(rng, &[p, l], -2.0, 2.0);
            let targets: Vec<usize> = (0..p).map(|_| rng.gen_range(0..l)).collect();
            grad_check(
                move |g, xv| g.cross_entropy_sum(xv, &targets),
                &x,
                EPS,
            )
            .unwrap()
        }
        other => panic!("unknown primitive {other}"),
    }
}

#[test]
fn straight_through_gradient_is_exact_identity() {
    // The STE is non-smooth by construction (the stencil cannot see the value
    // substitution), so assert its contract directly instead of numerically.
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap(), true);
    let zc = g.constant(Tensor::new(vec![4], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
    let st = g.straight_through(x, zc).unwrap();
    let loss = g.sum_sq(st).unwrap();
    g.backward(loss).unwrap();
    // d sum_sq(st)/d st = 2*st_value = 2*zc, routed unchanged to x
    assert_eq!(g.grad(x).unwrap(), &[10.0, 12.0, 14.0, 16.0]);
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x = rand_tensor(&mut rng, &[2, 6, 6], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
        let gamma = Tensor::full(&[3], 1.0);
        let beta = Tensor::zeros(&[3]);
        let mut g = Graph::new();
        let xv = g.leaf(x, true);
        let wv = g.leaf(w, true);
        let gv = g.constant(gamma);
        let bv = g.constant(beta);
        let c = g.conv2d(xv, wv, None, 1, 1).unwrap();
        let n = g.group_norm(c, gv, bv, 1, 1e-5).unwrap();
        let a = g.gelu(n).unwrap();
        let loss = g.sum_sq(a).unwrap();
        g.backward(loss).unwrap();
        (
            g.value(loss).item(),
            g.grad(xv).unwrap().to_vec(),
            g.grad(wv).unwrap().to_vec(),
        )
    };
    let (l1, gx1, gw1) = run();
    let (l2, gx2, gw2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(
        gx1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        gx2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(
        gw1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        gw2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn conv_then_mean_grad_check_on_1x3x8x8() {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let x = rand_tensor(&mut rng, &[1, 3, 8, 8], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
    let b = rand_tensor(&mut rng, &[4], -0.1, 0.1);
    let rel = grad_check(
        move |g, xv| {
            let x3 = g.reshape(xv, &[3, 8, 8])?;
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            let y = g.conv2d(x3, wv, Some(bv), 1, 1)?;
            g.mean(y)
        },
        &x,
        EPS,
    )
    .unwrap();
    assert!(rel < 1e-4, "rel err {rel}");
}
