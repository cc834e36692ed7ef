use super::*;
use crate::scenegen::CameraModel;
use crate::tensor::{gradcheck, Tape, Tensor};

fn camera_for(width: usize, height: usize) -> CameraModel {
    CameraModel {
        fx: 0.625 * width as f64,
        fy: 0.625 * width as f64,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        width,
        height,
    }
}

fn noise_image(width: usize, height: usize) -> Tensor {
    let data: Vec<f64> =
        (0..3 * width * height).map(|i| 0.5 + 0.4 * ((i as f64) * 0.61).sin()).collect();
    Tensor::new(vec![3, height, width], data)
}

#[test]
fn pyramid_shapes_p2p5() {
    let arch = ArchConfig::default();
    let bundle = init_bundle(&arch, &[], 1).unwrap();
    let mut net = Net::new(&bundle);
    let img = net.leaf(noise_image(320, 256));
    let pyr = backbone_fpn_forward(&mut net, img).unwrap();
    let expect = [(64usize, 80usize), (32, 40), (16, 20), (8, 10)];
    for (lvl, (h, w)) in pyr.levels.iter().zip(expect) {
        assert_eq!(net.tape.val(*lvl).shape(), &[64, h, w]);
    }
    assert_eq!(pyr.strides, [4, 8, 16, 32]);
}

#[test]
fn pyramid_shapes_p3p6() {
    let arch = ArchConfig { fpn_levels: FpnLevels::P3P6, ..ArchConfig::default() };
    let bundle = init_bundle(&arch, &[], 1).unwrap();
    let mut net = Net::new(&bundle);
    let img = net.leaf(noise_image(320, 256));
    let pyr = backbone_fpn_forward(&mut net, img).unwrap();
    let expect = [(32usize, 40usize), (16, 20), (8, 10), (4, 5)];
    for (lvl, (h, w)) in pyr.levels.iter().zip(expect) {
        assert_eq!(net.tape.val(*lvl).shape(), &[64, h, w]);
    }
    assert_eq!(pyr.strides, [8, 16, 32, 64]);
}

#[test]
fn indivisible_image_is_rejected() {
    let bundle = init_bundle(&ArchConfig::default(), &[], 1).unwrap();
    let mut net = Net::new(&bundle);
    let img = net.leaf(noise_image(320, 240));
    assert!(backbone_fpn_forward(&mut net, img).is_err());
}

#[test]
fn zero_weights_give_zero_features() {
    let mut bundle = init_bundle(&ArchConfig::default(), &[], 1).unwrap();
    for (_, t) in bundle.params.iter_mut() {
        *t = Tensor::zeros(t.shape());
    }
    let mut net = Net::new(&bundle);
    let img = net.leaf(noise_image(128, 64));
    let pyr = backbone_fpn_forward(&mut net, img).unwrap();
    for lvl in pyr.levels {
        assert!(net.tape.val(lvl).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn det_head_shapes_and_ranges() {
    let arch = ArchConfig::default();
    let bundle = init_bundle(&arch, &[Task::Det], 3).unwrap();
    let cam = camera_for(128, 64);
    let mut net = Net::new(&bundle);
    let img = net.leaf(noise_image(128, 64));
    let pyr = backbone_fpn_forward(&mut net, img).unwrap();
    let out = det_head_forward(&mut net, &pyr, &cam).unwrap();
    assert_eq!(net.tape.val(out.cls_logits).shape(), &[arch.det_queries, arch.class_count]);
    assert_eq!(net.tape.val(out.box_params).shape(), &[arch.det_queries, 8]);
    let dets = decode_detections(&arch, net.tape.val(out.cls_logits), net.tape.val(out.box_params));
    for d in &dets {
        assert!(arch.det_range.contains(d.bbox.center), "center outside range: {:?}", d.bbox.center);
        assert!(d.score > 0.0 && d.score < 1.0);
    }
}

#[test]
fn det_head_runs_under_both_fpn_modes() {
    for levels in [FpnLevels::P2P5, FpnLevels::P3P6] {
        let arch = ArchConfig { fpn_levels: levels, ..ArchConfig::default() };
        let bundle = init_bundle(&arch, &[Task::Det], 3).unwrap();
        let cam = camera_for(128, 64);
        let mut net = Net::new(&bundle);
        let img = net.leaf(noise_image(128, 64));
        let pyr = backbone_fpn_forward(&mut net, img).unwrap();
        let out = det_head_forward(&mut net, &pyr, &cam).unwrap();
        assert_eq!(net.tape.val(out.box_params).shape(), &[arch.det_queries, 8]);
    }
}

#[test]
fn zero_weight_refinement_keeps_initial_reference_points() {
    let arch = ArchConfig::default();
    let mut bundle = init_bundle(&arch, &[Task::Det], 7).unwrap();
    let initial: Vec<f64> = bundle
        .params
        .get("head.det.ref_logit")
        .unwrap()
        .data()
        .iter()
        .map(|&z| crate::tensor::sigmoid_scalar(z))
        .collect();
    // zero every det-head weight except the learned initial reference points
    let keep = "head.det.ref_logit".to_string();
    for (name, t) in bundle.params.iter_mut() {
        if name.starts_with("head.det.") && name != keep {
            *t = Tensor::zeros(t.shape());
        }
    }
    let cam = camera_for(128, 64);
    let mut net = Net::new(&bundle);
    let img = net.leaf(noise_image(128, 64));
    let pyr = backbone_fpn_forward(&mut net, img).unwrap();
    let out = det_head_forward(&mut net, &pyr, &cam).unwrap();
    for (a, b) in out.final_refs.data().iter().zip(initial.iter()) {
        assert!((a - b).abs() < 1e-12, "reference moved: {a} vs {b}");
    }
}

#[test]
fn seg_head_shapes_and_attention() {
    let arch = ArchConfig::default();
    let bundle = init_bundle(&arch, &[Task::Seg], 5).unwrap();
    let mut net = Net::new(&bundle);
    let img = net.leaf(noise_image(128, 64));
    let pyr = backbone_fpn_forward(&mut net, img).unwrap();
    let out = seg_head_forward(&mut net, &pyr).unwrap();
    assert_eq!(net.tape.val(out.cls_logits).shape(), &[arch.seg_queries, arch.class_count + 1]);
    assert_eq!(out.grid, (16, 32)); // 64/4 x 128/4
    assert_eq!(net.tape.val(out.mask_logits).shape(), &[arch.seg_queries, 16 * 32]);
    for attn in &out.attn {
        let (n, s) = (attn.shape()[0], attn.shape()[1]);
        for i in 0..n {
            let sum: f64 = attn.data()[i * s..(i + 1) * s].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "attention row sums to {sum}");
        }
    }
}

#[test]
fn depth_head_outputs_bounded() {
    let arch = ArchConfig::default();
    let bundle = init_bundle(&arch, &[Task::Depth], 5).unwrap();
    let mut net = Net::new(&bundle);
    let img = net.leaf(noise_image(128, 64));
    let pyr = backbone_fpn_forward(&mut net, img).unwrap();
    let out = depth_head_forward(&mut net, &pyr, (128, 64)).unwrap();
    let widths = net.tape.val(out.widths);
    assert!((widths.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
    let centers = net.tape.val(out.centers);
    for i in 1..centers.numel() {
        assert!(centers.data()[i] > centers.data()[i - 1]);
    }
    let probs = net.tape.val(out.probs);
    let (s, k) = (probs.shape()[0], probs.shape()[1]);
    for p in 0..s {
        let sum: f64 = probs.data()[p * k..(p + 1) * k].iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
    let map = net.tape.val(out.depth_map);
    assert_eq!(map.shape(), &[1, 64, 128]);
    let (lo, hi) = arch.depth_range;
    for &d in map.data() {
        assert!(d >= lo && d <= hi, "depth {d} outside [{lo},{hi}]");
    }
}

#[test]
fn uniform_bins_and_probabilities_give_midrange_depth() {
    // widths [0.5,0.5] over [0,120] -> centres [30,90]; uniform probs -> 60
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::new(vec![2], vec![0.5, 0.5]));
    let centers = tape.bin_centers(w, 0.0, 120.0);
    assert_eq!(tape.val(centers).data(), &[30.0, 90.0]);
    let probs = tape.leaf(Tensor::new(vec![4, 2], vec![0.5; 8]));
    let c = tape.reshape(centers, vec![2, 1]);
    let d = tape.matmul(probs, c);
    for &v in tape.val(d).data() {
        assert_eq!(v, 60.0);
    }
}

#[test]
fn forward_is_deterministic() {
    let arch = ArchConfig::default();
    let bundle = init_bundle(&arch, &[Task::Seg], 11).unwrap();
    let run = || {
        let mut net = Net::new(&bundle);
        let img = net.leaf(noise_image(128, 64));
        let pyr = backbone_fpn_forward(&mut net, img).unwrap();
        let out = seg_head_forward(&mut net, &pyr).unwrap();
        net.tape.val(out.mask_logits).clone()
    };
    assert_eq!(run(), run());
}

/// Full-network gradient check: the scalarized head output (sum) against
/// central differences, for every head, through backbone + FPN + head.
#[test]
fn head_gradients_match_finite_differences() {
    let arch = ArchConfig {
        widths: [8, 12, 16, 24],
        fpn_channels: 16,
        det_queries: 6,
        seg_queries: 5,
        depth_bins: 4,
        embed_dim: 16,
        ..ArchConfig::default()
    };
    let cam = camera_for(64, 64);
    let image = noise_image(64, 64);

    for task in Task::ALL {
        let bundle = init_bundle(&arch, &[task], 13).unwrap();
        let mut names: Vec<String> =
            bundle.params.names().map(|s| s.to_string()).collect();
        names.sort();

        let eval = |params: &ParamSet| -> (f64, indexmap::IndexMap<String, Tensor>) {
            let b = ModelBundle { arch: arch.clone(), params: params.clone(), meta: Default::default() };
            let mut net = Net::new(&b);
            let img = net.leaf(image.clone());
            let pyr = backbone_fpn_forward(&mut net, img).unwrap();
            // scalarize via means so the finite differences stay
            // well-conditioned (a raw sum over thousands of logits drowns
            // small per-parameter gradients in cancellation noise)
            let out_var = match task {
                Task::Det => {
                    let o = det_head_forward(&mut net, &pyr, &cam).unwrap();
                    let s1 = net.tape.mean_all(o.cls_logits);
                    let s2 = net.tape.mean_all(o.box_params);
                    net.tape.add(s1, s2)
                }
                Task::Seg => {
                    let o = seg_head_forward(&mut net, &pyr).unwrap();
                    let s1 = net.tape.mean_all(o.cls_logits);
                    let s2 = net.tape.mean_all(o.mask_logits);
                    net.tape.add(s1, s2)
                }
                Task::Depth => {
                    let o = depth_head_forward(&mut net, &pyr, (64, 64)).unwrap();
                    net.tape.mean_all(o.depth_map)
                }
            };
            let grads = net.tape.backward(out_var);
            (net.tape.val(out_var).item(), net.param_grads(&grads))
        };

        let (_, grads) = eval(&bundle.params);
        let mut checked = 0usize;
        let mut worst: f64 = 0.0;
        for (ni, name) in names.iter().enumerate() {
            let t0 = bundle.params.get(name).unwrap().clone();
            let n = t0.numel();
            // two spread coordinates per tensor
            for &ci in &[ni % n, (ni * 7 + n / 2) % n] {
                let h = 1e-5 * t0.data()[ci].abs().max(1.0);
                let mut pp = bundle.params.clone();
                let mut tp = t0.clone();
                tp.data_mut()[ci] += h;
                pp.insert(name.clone(), tp);
                let fp = eval(&pp).0;
                let mut pm = bundle.params.clone();
                let mut tm = t0.clone();
                tm.data_mut()[ci] -= h;
                pm.insert(name.clone(), tm);
                let fm = eval(&pm).0;
                let fd = (fp - fm) / (2.0 * h);
                let an = grads.get(name).map(|g| g.data()[ci]).unwrap_or(0.0);
                let err = gradcheck::rel_err(an, fd);
                if err > worst {
                    worst = err;
                    if err > 1e-4 {
                        eprintln!("{task} {name}[{ci}]: analytic {an} vs fd {fd}");
                    }
                }
                checked += 1;
            }
        }
        assert!(checked > 2 * names.len() - 1);
        assert!(worst < 1e-4, "{task}: worst param-grad rel err {worst}");
    }
}
