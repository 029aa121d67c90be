mod common;

use common::{leaf, max_abs_diff, rng};
use lldm_core::{Conv1dSpec, Conv2dSpec, Tensor};

fn t(v: &[f32], s: &[usize]) -> Tensor {
    Tensor::new(v.to_vec(), s).unwrap()
}

fn conv1d_oracle(x: &[f32], w: &[f32], bias: &[f32], (b, cin, l): (usize, usize, usize), (cout, k): (usize, usize), pad: usize) -> Vec<f32> {
    let ol = l + 2 * pad - k + 1;
    let mut out = vec![0.0f64; b * cout * ol];
    for bi in 0..b {
        for co in 0..cout {
            for o in 0..ol {
                let mut acc = bias[co] as f64;
                for ci in 0..cin {
                    for ki in 0..k {
                        let pos = o as isize + ki as isize - pad as isize;
                        if pos >= 0 && (pos as usize) < l {
                            acc += w[(co * cin + ci) * k + ki] as f64 * x[(bi * cin + ci) * l + pos as usize] as f64;
                        }
                    }
                }
                out[(bi * cout + co) * ol + o] = acc;
            }
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

#[test]
fn conv1d_matches_nested_loops() {
    let x = Tensor::randn(&[1, 2, 5], &mut rng(1));
    let w = Tensor::randn(&[3, 2, 3], &mut rng(2));
    let b = Tensor::randn(&[3], &mut rng(3));
    for pad in [0, 1] {
        let y = x.conv1d(&w, Some(&b), Conv1dSpec::padded(pad)).unwrap();
        let oracle = conv1d_oracle(&x.to_vec(), &w.to_vec(), &b.to_vec(), (1, 2, 5), (3, 3), pad);
        assert_eq!(y.shape(), &[1, 3, 5 + 2 * pad - 2]);
        assert!(max_abs_diff(&y.to_vec(), &oracle) < 1e-5);
    }
}

#[test]
fn strided_conv1d_matches_subsampled_oracle() {
    let x = Tensor::randn(&[2, 3, 16], &mut rng(4));
    let w = Tensor::randn(&[4, 3, 4], &mut rng(5));
    let zero = [0.0f32; 4];
    let spec = Conv1dSpec { stride: 2, padding: 1, ..Default::default() };
    let y = x.conv1d(&w, None, spec).unwrap();
    let dense = conv1d_oracle(&x.to_vec(), &w.to_vec(), &zero, (2, 3, 16), (4, 4), 1);
    let dense_len = 16 + 2 - 4 + 1;
    let ol = y.dim(2);
    assert_eq!(ol, (16 + 2 - 4) / 2 + 1);
    let mut expect = Vec::new();
    for row in dense.chunks(dense_len) {
        expect.extend((0..ol).map(|o| row[2 * o]));
    }
    assert!(max_abs_diff(&y.to_vec(), &expect) < 1e-5);
}

#[test]
fn conv2d_matches_nested_loops() {
    let (cin, cout, h, w, k) = (2, 3, 4, 4, 3);
    let x = Tensor::randn(&[1, cin, h, w], &mut rng(6));
    let wt = Tensor::randn(&[cout, cin, k, k], &mut rng(7));
    let bias = Tensor::randn(&[cout], &mut rng(8));
    let y = x.conv2d(&wt, Some(&bias), Conv2dSpec::padded(1, 1)).unwrap();
    let (xv, wv, bv) = (x.to_vec(), wt.to_vec(), bias.to_vec());
    let mut expect = vec![0.0f32; cout * h * w];
    for co in 0..cout {
        for i in 0..h {
            for j in 0..w {
                let mut acc = bv[co] as f64;
                for ci in 0..cin {
                    for ki in 0..k {
                        for kj in 0..k {
                            let (r, c) = (i as isize + ki as isize - 1, j as isize + kj as isize - 1);
                            if (0..h as isize).contains(&r) && (0..w as isize).contains(&c) {
                                acc += (wv[((co * cin + ci) * k + ki) * k + kj] * xv[(ci * h + r as usize) * w + c as usize]) as f64;
                            }
                        }
                    }
                }
                expect[(co * h + i) * w + j] = acc as f32;
            }
        }
    }
    assert_eq!(y.shape(), &[1, cout, h, w]);
    assert!(max_abs_diff(&y.to_vec(), &expect) < 1e-5);
}

#[test]
fn transposed_conv_duplicates_samples() {
    let x = t(&[3.0, -2.0], &[1, 1, 2]);
    let w = t(&[1.0, 1.0], &[1, 1, 2]);
    let y = x.conv_transpose1d(&w, None, Conv1dSpec { stride: 2, ..Default::default() }).unwrap();
    assert_eq!(y.to_vec(), vec![3.0, 3.0, -2.0, -2.0]);
    let x2 = t(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
    let w2 = Tensor::ones(&[1, 1, 2, 2]);
    let y2 = x2.conv_transpose2d(&w2, None, Conv2dSpec { stride: (2, 2), ..Default::default() }).unwrap();
    assert_eq!(y2.shape(), &[1, 1, 4, 4]);
    assert_eq!(
        y2.to_vec(),
        vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
    );
}

#[test]
fn depthwise_unit_kernel_is_identity() {
    let x = Tensor::randn(&[2, 3, 4, 5], &mut rng(9));
    let y = x.depthwise_conv2d(&Tensor::ones(&[3, 1, 1, 1]), None, Conv2dSpec::default()).unwrap();
    assert_eq!(y.to_vec(), x.to_vec());
}

#[test]
fn layer_norm_statistics() {
    let x = Tensor::randn(&[3, 4, 7], &mut rng(10)).scale(5.0).unwrap().add_scalar(2.0).unwrap();
    let y = x.layer_norm(&[1, 2], None, None, 1e-5).unwrap().to_vec();
    for row in y.chunks(28) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / 28.0;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 28.0;
        assert!(mean.abs() < 1e-5, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-5, "var {var}");
    }
    let c = Tensor::full(&[2, 6], 3.5).layer_norm(&[1], None, Some(&Tensor::zeros(&[6])), 1e-5).unwrap();
    assert!(c.to_vec().iter().all(|&v| v == 0.0));
}

#[test]
fn activations_and_reductions() {
    let z = Tensor::zeros(&[1]);
    assert_eq!(z.gelu().unwrap().to_vec(), vec![0.0]);
    assert_eq!(z.silu().unwrap().to_vec(), vec![0.0]);
    assert_eq!(z.tanh().unwrap().to_vec(), vec![0.0]);
    assert_eq!(z.elu_plus_one().unwrap().to_vec(), vec![1.0]);
    let x = Tensor::randn(&[3, 3], &mut rng(11));
    let eye = t(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]);
    assert_eq!(x.matmul(&eye).unwrap().to_vec(), x.to_vec());
    assert_eq!(x.drop_path(0.0, true, &mut rng(12)).unwrap().to_vec(), x.to_vec());
    let ab = t(&[1.5, -4.0], &[1, 1, 2]);
    assert_eq!(ab.interpolate_nearest(&[4]).unwrap().to_vec(), vec![1.5, 1.5, -4.0, -4.0]);
}

#[test]
fn backward_closed_forms() {
    let x = leaf(&[4], 13);
    x.sum_all().unwrap().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    let y = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
    y.square().unwrap().sum_all().unwrap().backward().unwrap();
    assert_eq!(y.grad().unwrap(), vec![2.0, 4.0]);
}

#[test]
fn gelu_gradient_at_half() {
    let x = Tensor::param(vec![0.5], &[1]).unwrap();
    x.gelu().unwrap().sum_all().unwrap().backward().unwrap();
    let g = x.grad().unwrap()[0] as f64;
    let gelu = |v: f64| 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2));
    let h = 1e-5;
    let fd = (gelu(0.5 + h) - gelu(0.5 - h)) / (2.0 * h);
    assert!(((g - fd) / fd).abs() < 1e-3, "{g} vs {fd}");
}

#[test]
fn backward_is_linear() {
    let x = leaf(&[2, 3, 8], 14);
    let w = Tensor::randn(&[3, 3, 3], &mut rng(15));
    let f = |x: &Tensor| x.conv1d(&w, None, Conv1dSpec::padded(1)).unwrap().tanh().unwrap().sum_all().unwrap();
    let g = |x: &Tensor| x.square().unwrap().mul(x).unwrap().mean_all().unwrap();
    let grad_of = |loss: Tensor| {
        x.zero_grad();
        loss.backward().unwrap();
        x.grad().unwrap()
    };
    let gf = grad_of(f(&x));
    let gg = grad_of(g(&x));
    let (a, b) = (1.7f32, -0.6f32);
    let combo = grad_of(f(&x).scale(a).unwrap().add(&g(&x).scale(b).unwrap()).unwrap());
    for i in 0..combo.len() {
        assert!((combo[i] - (a * gf[i] + b * gg[i])).abs() < 1e-6, "index {i}");
    }
}
