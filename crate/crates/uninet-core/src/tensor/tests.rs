//! Finite-difference verification of every tape op's backward pass.

use super::gradcheck::{check_coords, check_direction};
use super::tape_nn::PinholeProj;
use super::{Tape, Tensor, VarId};

const TOL: f64 = 1e-4;

fn pseudo(shape: &[usize], phase: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|i| ((i as f64) * 1.37 + phase).sin() * 0.9).collect();
    Tensor::new(shape.to_vec(), data)
}

fn weights_like(t: &Tensor) -> Tensor {
    let data: Vec<f64> = (0..t.numel()).map(|i| ((i as f64) * 0.73).cos() + 0.4).collect();
    Tensor::new(t.shape().to_vec(), data)
}

/// Wrap `build` into a scalar function of one input tensor: the op output is
/// contracted with fixed weights so the gradient is informative.
fn scalar_fn(
    build: impl Fn(&mut Tape, VarId) -> VarId,
) -> impl Fn(&Tensor) -> (f64, Tensor) {
    move |x: &Tensor| {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = build(&mut tape, xv);
        let w = tape.leaf(weights_like(tape.val(y)));
        let prod = tape.mul(y, w);
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss);
        (tape.val(loss).item(), grads.get_or_zeros(xv, x.shape()))
    }
}

fn spread_coords(n: usize, take: usize) -> Vec<usize> {
    (0..take.min(n)).map(|i| i * n / take.min(n)).collect()
}

fn check_op(name: &str, x0: &Tensor, build: impl Fn(&mut Tape, VarId) -> VarId) {
    let f = scalar_fn(build);
    let worst = check_coords(&f, x0, &spread_coords(x0.numel(), 12));
    assert!(worst < TOL, "{name}: coord grad rel err {worst}");
    let dir = pseudo(x0.shape(), 0.3);
    let derr = check_direction(&f, x0, &dir);
    assert!(derr < TOL, "{name}: directional grad rel err {derr}");
}

#[test]
fn elementwise_ops() {
    let x = pseudo(&[3, 4], 0.1);
    check_op("relu", &x, |t, v| t.relu(v));
    check_op("sigmoid", &x, |t, v| t.sigmoid(v));
    check_op("exp", &x, |t, v| t.exp(v));
    check_op("square", &x, |t, v| t.square(v));
    check_op("abs", &x, |t, v| t.abs(v));
    check_op("softplus", &x, |t, v| t.softplus(v));
    check_op("scale+add", &x, |t, v| {
        let a = t.scale(v, 1.7);
        t.add_scalar(a, 0.3)
    });
    let xp = x.map(|v| v.abs() + 0.5);
    check_op("ln", &xp, |t, v| t.ln(v));
    check_op("sqrt", &xp, |t, v| t.sqrt_floor(v));
}

#[test]
fn binary_and_reduction_ops() {
    let x = pseudo(&[4, 5], 0.2);
    check_op("mul-with-self-path", &x, |t, v| {
        let s = t.scale(v, 0.5);
        t.mul(v, s)
    });
    check_op("add-sub", &x, |t, v| {
        let a = t.scale(v, 2.0);
        let s = t.sub(a, v);
        t.add(s, v)
    });
    check_op("sum_rows", &x, |t, v| t.sum_rows(v));
    check_op("transpose", &x, |t, v| t.transpose(v));
    check_op("reshape", &x, |t, v| t.reshape(v, vec![2, 10]));
    check_op("select_rows", &x, |t, v| t.select_rows(v, &[2, 0, 2]));
    check_op("slice_cols", &x, |t, v| t.slice_cols(v, 1, 4));
    check_op("concat_cols", &x, |t, v| {
        let s = t.scale(v, 0.3);
        t.concat_cols(v, s)
    });
    check_op("mul_rows", &x, |t, v| {
        let s = t.sum_rows(v);
        t.mul_rows(v, s)
    });
}

#[test]
fn matmul_and_softmax_ops() {
    let x = pseudo(&[4, 6], 0.5);
    check_op("matmul", &x, |t, v| {
        let w = t.leaf(pseudo(&[6, 3], 0.9));
        t.matmul(v, w)
    });
    check_op("matmul-rhs", &x, |t, v| {
        let a = t.leaf(pseudo(&[3, 4], 1.1));
        t.matmul(a, v)
    });
    check_op("add_row_bias", &x, |t, v| {
        let b = t.leaf(pseudo(&[6], 0.7));
        t.add_row_bias(v, b)
    });
    check_op("softmax_rows", &x, |t, v| t.softmax_rows(v));
    check_op("log_softmax_rows", &x, |t, v| t.log_softmax_rows(v));
    let bias = pseudo(&[6], 1.3);
    let f = scalar_fn(|t, v| {
        let a = t.leaf(pseudo(&[4, 6], 0.5));
        t.add_row_bias(a, v)
    });
    let worst = check_coords(&f, &bias, &[0, 2, 5]);
    assert!(worst < TOL, "bias grad rel err {worst}");
}

#[test]
fn bin_centers_op() {
    // keep widths positive and normalized-ish; gradient formula is affine
    let x = Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]);
    check_op("bin_centers", &x, |t, v| t.bin_centers(v, 0.1, 130.0));
}

#[test]
fn conv_ops() {
    let x = pseudo(&[2, 6, 8], 0.1);
    for (stride, k, pad, name) in [(1, 3, 1, "conv3s1"), (2, 3, 1, "conv3s2"), (1, 1, 0, "conv1s1")] {
        check_op(name, &x, move |t, v| {
            let w = t.leaf(pseudo(&[3, 2, k, k], 0.4));
            let b = t.leaf(pseudo(&[3], 0.8));
            t.conv2d(v, w, b, stride, pad)
        });
        // weight gradient
        let w0 = pseudo(&[3, 2, k, k], 0.4);
        let f = scalar_fn(move |t, v| {
            let x = t.leaf(pseudo(&[2, 6, 8], 0.1));
            let b = t.leaf(pseudo(&[3], 0.8));
            t.conv2d(x, v, b, stride, pad)
        });
        let worst = check_coords(&f, &w0, &spread_coords(w0.numel(), 10));
        assert!(worst < TOL, "{name} weight grad rel err {worst}");
    }
}

#[test]
fn pool_and_resize_ops() {
    let x = pseudo(&[2, 4, 6], 0.3);
    check_op("maxpool2", &x, |t, v| t.maxpool2(v));
    check_op("upsample_nearest2", &x, |t, v| t.upsample_nearest2(v));
    check_op("upsample_bilinear", &x, |t, v| t.upsample_bilinear(v, 7, 11));
}

#[test]
fn layernorm_ops() {
    let x = pseudo(&[4, 3, 5], 0.2);
    check_op("layernorm_channels", &x, |t, v| {
        let g = t.leaf(pseudo(&[4], 0.6));
        let b = t.leaf(pseudo(&[4], 0.9));
        t.layernorm_channels(v, g, b)
    });
    let q = pseudo(&[5, 8], 0.4);
    check_op("layernorm_rows", &q, |t, v| {
        let g = t.leaf(pseudo(&[8], 0.6));
        let b = t.leaf(pseudo(&[8], 0.9));
        t.layernorm_rows(v, g, b)
    });
    // gamma/beta gradients
    let g0 = pseudo(&[4], 0.6);
    let f = scalar_fn(|t, v| {
        let x = t.leaf(pseudo(&[4, 3, 5], 0.2));
        let b = t.leaf(pseudo(&[4], 0.9));
        t.layernorm_channels(x, v, b)
    });
    let worst = check_coords(&f, &g0, &[0, 1, 2, 3]);
    assert!(worst < TOL, "ln gamma grad rel err {worst}");
}

fn test_proj() -> PinholeProj {
    PinholeProj { fx: 80.0, fy: 80.0, cx: 64.0, cy: 32.0, width: 128, height: 64 }
}

fn pyramid_tensors() -> [Tensor; 4] {
    [
        pseudo(&[3, 16, 32], 0.1),
        pseudo(&[3, 8, 16], 0.2),
        pseudo(&[3, 4, 8], 0.3),
        pseudo(&[3, 2, 4], 0.4),
    ]
}

#[test]
fn sample_pyramid_feature_grads() {
    let strides = [4, 8, 16, 32];
    // interior points only (kinks live on cell boundaries / view edges)
    let pts = Tensor::new(vec![3, 3], vec![20.3, 1.7, 0.4, 45.1, -6.3, -0.8, 9.7, 2.9, 1.1]);
    // gradient w.r.t. the points
    let f_pts = scalar_fn(move |t, v| {
        let lv = pyramid_tensors().map(|l| t.leaf(l));
        t.sample_pyramid(lv, v, test_proj(), strides)
    });
    let worst = check_coords(&f_pts, &pts, &(0..9).collect::<Vec<_>>());
    assert!(worst < TOL, "sample_pyramid point grad rel err {worst}");
    // gradient w.r.t. one level's features
    let l0 = pyramid_tensors()[0].clone();
    let f_feat = scalar_fn(move |t, v| {
        let rest = pyramid_tensors();
        let lv = [v, t.leaf(rest[1].clone()), t.leaf(rest[2].clone()), t.leaf(rest[3].clone())];
        let p = t.leaf(Tensor::new(vec![2, 3], vec![20.3, 1.7, 0.4, 9.7, 2.9, 1.1]));
        t.sample_pyramid(lv, p, test_proj(), strides)
    });
    let worst = check_coords(&f_feat, &l0, &spread_coords(l0.numel(), 16));
    assert!(worst < TOL, "sample_pyramid feature grad rel err {worst}");
}

#[test]
fn sample_pyramid_out_of_view_is_zero() {
    let mut tape = Tape::new();
    let lv = pyramid_tensors().map(|l| tape.leaf(l));
    // behind camera (x<=0) and far outside the frustum
    let pts = tape.leaf(Tensor::new(vec![2, 3], vec![0.0, 5.0, 0.0, 10.0, 200.0, 0.0]));
    let out = tape.sample_pyramid(lv, pts, test_proj(), [4, 8, 16, 32]);
    assert!(tape.val(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn sample_pyramid_constant_maps_give_four_g() {
    let mut tape = Tape::new();
    let g = [1.5, -0.25, 3.0];
    let lv = [
        tape.leaf(const_map(&g, 16, 32)),
        tape.leaf(const_map(&g, 8, 16)),
        tape.leaf(const_map(&g, 4, 8)),
        tape.leaf(const_map(&g, 2, 4)),
    ];
    let pts = tape.leaf(Tensor::new(vec![1, 3], vec![25.0, 2.0, 0.5]));
    let out = tape.sample_pyramid(lv, pts, test_proj(), [4, 8, 16, 32]);
    for (c, &gv) in g.iter().enumerate() {
        assert!((tape.val(out).data()[c] - 4.0 * gv).abs() < 1e-12);
    }
}

fn const_map(g: &[f64; 3], h: usize, w: usize) -> Tensor {
    let mut data = vec![0.0; 3 * h * w];
    for (c, &gv) in g.iter().enumerate() {
        for v in &mut data[c * h * w..(c + 1) * h * w] {
            *v = gv;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

#[test]
fn sample_pyramid_delta_at_cell_center() {
    // nonzero at exactly one grid cell of level 1 (stride 8); point projects
    // to that cell centre, so the value comes back exactly
    let proj = test_proj();
    let (cell_x, cell_y) = (7usize, 3usize);
    let mut l1 = Tensor::zeros(&[3, 8, 16]);
    for c in 0..3 {
        l1.data_mut()[c * 8 * 16 + cell_y * 16 + cell_x] = 2.0 + c as f64;
    }
    // pick the 3D point whose projection lands at image coords (8*cell_x, 8*cell_y)
    let u = (8 * cell_x) as f64;
    let v = (8 * cell_y) as f64;
    let depth = 20.0;
    let p = crate::scenegen::back_project(
        &crate::scenegen::CameraModel {
            fx: proj.fx,
            fy: proj.fy,
            cx: proj.cx,
            cy: proj.cy,
            width: proj.width,
            height: proj.height,
        },
        u,
        v,
        depth,
    );
    let mut tape = Tape::new();
    let lv = [
        tape.leaf(Tensor::zeros(&[3, 16, 32])),
        tape.leaf(l1),
        tape.leaf(Tensor::zeros(&[3, 4, 8])),
        tape.leaf(Tensor::zeros(&[3, 2, 4])),
    ];
    let pts = tape.leaf(Tensor::new(vec![1, 3], p.to_vec()));
    let out = tape.sample_pyramid(lv, pts, proj, [4, 8, 16, 32]);
    for c in 0..3 {
        assert!(
            (tape.val(out).data()[c] - (2.0 + c as f64)).abs() < 1e-9,
            "channel {c}: {}",
            tape.val(out).data()[c]
        );
    }
}

#[test]
fn composite_network_gradcheck() {
    // conv -> ln -> relu -> pool -> bilinear -> sum, through one graph
    let x = pseudo(&[3, 8, 8], 0.15);
    check_op("composite", &x, |t, v| {
        let w = t.leaf(pseudo(&[4, 3, 3, 3], 0.5));
        let b = t.leaf(pseudo(&[4], 0.2));
        let c = t.conv2d(v, w, b, 1, 1);
        let g = t.leaf(Tensor::full(&[4], 1.0));
        let be = t.leaf(Tensor::zeros(&[4]));
        let n = t.layernorm_channels(c, g, be);
        let r = t.relu(n);
        let p = t.maxpool2(r);
        t.upsample_bilinear(p, 5, 7)
    });
}
