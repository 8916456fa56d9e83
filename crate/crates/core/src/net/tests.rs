use super::*;
use crate::autodiff::Tape;
use crate::seed;
use crate::tensor::Tensor;
use crate::Error;

fn toy(depth: usize, hw: usize) -> ArchitectureSpec {
    let mut s = ArchitectureSpec::toy_conv(depth, vec![3, hw, hw], 10);
    s.preset = Preset::ToyConv { depth, narrow: 4, wide: 6 };
    s
}

fn images(n: usize, shape: &[usize], role: &str) -> Tensor {
    let mut dims = vec![n];
    dims.extend_from_slice(shape);
    Tensor::randn(&dims, &mut seed::rng(5, role))
}

fn conv_widths(c: &Component) -> Vec<usize> {
    c.body
        .iter()
        .filter_map(|l| match l {
            Layer::Conv2d { weight, .. } => Some(c.params[*weight].value.shape()[0]),
            _ => None,
        })
        .collect()
}

fn pools(layers: &[Layer]) -> usize {
    layers.iter().filter(|l| matches!(l, Layer::MaxPool2d { .. })).count()
}

#[test]
fn toy_conv_three_components_layout() {
    let m = build(&ArchitectureSpec::toy_conv(3, vec![3, 32, 32], 10), 1).unwrap();
    assert_eq!(m.len(), 3);
    let widths: Vec<_> = m.components.iter().map(conv_widths).collect();
    assert_eq!(widths, vec![vec![32], vec![64], vec![64]]);
    let pooled: Vec<_> = m.components.iter().map(|c| pools(&c.body)).collect();
    assert_eq!(pooled, vec![0, 1, 1]);
    assert!(matches!(m.components[2].body.last(), Some(Layer::Linear { .. })));
    for c in &m.components[..2] {
        let head = c.head.as_ref().unwrap();
        let linears = head.iter().filter(|l| matches!(l, Layer::Linear { .. })).count();
        assert_eq!(linears, 1);
        assert_eq!(head.len(), 2, "flatten + linear");
    }
    assert!(m.components[2].is_final());
    assert_eq!(m.components[0].output_shape, vec![32, 32, 32]);
    assert_eq!(m.components[1].output_shape, vec![64, 31, 31]);
    assert_eq!(m.components[2].output_shape, vec![10]);
}

#[test]
fn toy_conv_ten_components_repeat_narrow_block() {
    let m = build(&ArchitectureSpec::toy_conv(10, vec![3, 8, 8], 10), 1).unwrap();
    assert_eq!(m.len(), 10);
    for c in &m.components[..8] {
        assert_eq!(conv_widths(c), vec![32]);
        assert_eq!(pools(&c.body), 0);
    }
    let indices: Vec<_> = m.components.iter().map(|c| c.index).collect();
    assert_eq!(indices, (1..=10).collect::<Vec<_>>());
}

#[test]
fn rebuild_is_deterministic() {
    let spec = ArchitectureSpec::mlp(vec![4, 4, 4], 3, 2);
    let a = build(&spec, 9).unwrap();
    let b = build(&spec, 9).unwrap();
    assert_eq!(a.len(), 3);
    assert_eq!(a, b);
    assert_eq!(a.num_params(), b.num_params());
    // 3*4+4, 4*4+4, 4*4+4 + task 4*2+2, plus three 4->2 aux heads minus the final one.
    assert_eq!(a.num_params(), 16 + 20 + 20 + 10 + 2 * 10);
    let c = build(&spec, 10).unwrap();
    assert_ne!(a.components[0].params[0].value, c.components[0].params[0].value);
}

#[test]
fn body_and_head_params_are_disjoint() {
    let m = build(&ArchitectureSpec::resnet_lite(vec![3, 6, 6], 4), 2).unwrap();
    let mut ids: Vec<&str> = m.params().map(|p| p.id.as_str()).collect();
    let total = ids.len();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), total);
    for c in &m.components {
        assert!(c.params[c.body_range()].iter().all(|p| p.id.contains(".body.")));
        assert!(c.params[c.head_range()].iter().all(|p| p.id.contains(".head.")));
    }
}

#[test]
fn toy_conv_forward_shapes_follow_shape_calculus() {
    let (d, hw) = (6, 7);
    let m = build(&toy(d, hw), 3).unwrap();
    let x = images(4, &[3, hw, hw], "x");
    let mut tape = Tape::new();
    let pass = m.forward(&mut tape, &x, Mode::Train).unwrap();
    // Same-padded 3x3 convs keep H, W; each 2x2 stride-1 pool removes one row and column.
    let mut expected = Vec::new();
    let mut side = hw;
    for k in 1..=d {
        if k + 2 <= d {
            expected.push(vec![4, 4, side, side]);
        } else {
            side -= 1;
            expected.push(vec![4, 6, side, side]);
        }
    }
    *expected.last_mut().unwrap() = vec![4, 10];
    let got: Vec<_> = pass.activations.iter().map(|&a| tape.shape(a).to_vec()).collect();
    assert_eq!(got, expected);
    for &l in &pass.logits {
        assert_eq!(tape.shape(l), [4, 10]);
    }
}

#[test]
fn detached_activations_are_bitwise_equal() {
    let m = build(&toy(4, 5), 3).unwrap();
    let x = images(3, &[3, 5, 5], "x");
    let mut tape = Tape::new();
    let pass = m.forward(&mut tape, &x, Mode::Train).unwrap();
    for (&a, &d) in pass.activations.iter().zip(&pass.detached) {
        assert_eq!(tape.value(a), tape.value(d));
    }
}

#[test]
fn single_component_equals_plain_stack() {
    let m = build(&ArchitectureSpec::mlp(vec![5], 3, 4), 1).unwrap();
    let x = images(6, &[3], "x");
    let mut tape = Tape::new();
    let pass = m.forward(&mut tape, &x, Mode::Train).unwrap();
    let c = &m.components[0];
    let (w1, b1, w2, b2) = (&c.params[0].value, &c.params[1].value, &c.params[2].value, &c.params[3].value);
    // Hand-rolled relu(x W1 + b1) W2 + b2.
    let mut want = vec![0.0; 6 * 4];
    for r in 0..6 {
        let mut h = [0.0; 5];
        for (j, hj) in h.iter_mut().enumerate() {
            let mut acc = 0.0;
            for i in 0..3 {
                acc += x.data()[r * 3 + i] * w1.data()[i * 5 + j];
            }
            *hj = (acc + b1.data()[j]).max(0.0);
        }
        for o in 0..4 {
            let mut acc = 0.0;
            for j in 0..5 {
                acc += h[j] * w2.data()[j * 4 + o];
            }
            want[r * 4 + o] = acc + b2.data()[o];
        }
    }
    let got = tape.value(pass.logits[0]).data();
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-12);
    }
}

/// Evaluates every body as one flat layer list with shared parameter/buffer indices.
fn unpartitioned_logits(m: &PartitionedModel, x: &Tensor, mode: Mode) -> Tensor {
    let mut layers = Vec::new();
    let mut params = Vec::new();
    let mut buffers = Vec::new();
    for c in &m.components {
        let (p, b) = (params.len(), buffers.len());
        for l in &c.body {
            let mut l = l.clone();
            l.shift(p, b);
            layers.push(l);
        }
        params.extend(c.params.iter().map(|p| p.value.clone()));
        buffers.extend(c.buffers.iter().cloned());
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let vars: Vec<_> = params.into_iter().map(|p| tape.leaf(p)).collect();
    let mut log = StatsLog::new();
    let out = super::layer::forward_layers(&layers, &mut tape, xv, &vars, &buffers, mode, &mut log).unwrap();
    tape.value(out).clone()
}

#[test]
fn partition_is_transparent() {
    let specs = [toy(5, 6), ArchitectureSpec::mlp(vec![7, 5, 3], 4, 3), {
        let mut s = ArchitectureSpec::resnet_lite(vec![2, 5, 5], 3);
        s.preset = Preset::ResnetLite { blocks: 3, width: 4 };
        s.aux_head = AuxHead::ConvHead { first: 3, second: 2 };
        s
    }];
    for spec in &specs {
        let m = build(spec, 11).unwrap();
        let x = images(3, &spec.input_shape, "t");
        for mode in [Mode::Train, Mode::Eval] {
            let mut tape = Tape::new();
            let pass = m.forward(&mut tape, &x, mode).unwrap();
            let flat = unpartitioned_logits(&m, &x, mode);
            assert_eq!(tape.value(*pass.logits.last().unwrap()), &flat, "{spec}");
            assert_eq!(m.predict(&x, mode).unwrap(), flat);
        }
    }
}

#[test]
fn task_loss_matches_unpartitioned_copy() {
    let m = build(&toy(4, 5), 21).unwrap();
    let x = images(5, &[3, 5, 5], "x");
    let targets = [0, 3, 9, 1, 1];
    let mut tape = Tape::new();
    let pass = m.forward(&mut tape, &x, Mode::Train).unwrap();
    let losses = component_losses(&mut tape, &pass.logits, &targets).unwrap();
    let flat = unpartitioned_logits(&m, &x, Mode::Train);
    let mut t2 = Tape::new();
    let l = t2.leaf(flat);
    let ce = t2.softmax_cross_entropy(l, &targets).unwrap();
    assert_eq!(tape.value(*losses.last().unwrap()).item(), t2.value(ce).item());
}

#[test]
fn identical_or_uniform_logits_give_equal_losses() {
    let mut tape = Tape::new();
    let shared = tape.leaf(Tensor::randn(&[4, 10], &mut seed::rng(0, "l")));
    let losses = component_losses(&mut tape, &[shared; 3], &[1, 2, 3, 4]).unwrap();
    let v: Vec<f64> = losses.iter().map(|&l| tape.value(l).item()).collect();
    assert!(v.iter().all(|&x| x == v[0]));

    let uniform = tape.leaf(Tensor::zeros(&[4, 10]));
    let losses = component_losses(&mut tape, &[uniform; 4], &[0, 5, 9, 2]).unwrap();
    for l in losses {
        assert!((tape.value(l).item() - 10f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn heads_are_isolated() {
    let m = build(&toy(4, 5), 8).unwrap();
    let x = images(4, &[3, 5, 5], "x");
    let mut tape = Tape::new();
    let pass = m.forward(&mut tape, &x, Mode::Train).unwrap();
    let losses = component_losses(&mut tape, &pass.logits, &[1, 2, 3, 4]).unwrap();
    for (k, &loss) in losses.iter().enumerate() {
        for (j, c) in m.components.iter().enumerate() {
            let head: Vec<_> = pass.params[j][c.head_range()].to_vec();
            let grads = tape.grad(loss, &head).unwrap();
            for g in grads {
                if j == k {
                    assert!(g.max_abs() > 0.0);
                } else {
                    assert_eq!(g.max_abs(), 0.0, "loss {k} leaked into head {j}");
                }
            }
        }
    }
}

#[test]
fn wrong_input_shape_names_component() {
    let m = build(&toy(3, 5), 0).unwrap();
    let mut tape = Tape::new();
    let err = m.forward(&mut tape, &images(2, &[3, 6, 5], "x"), Mode::Train).unwrap_err();
    assert!(matches!(err, Error::Dimension { .. }));
    assert!(err.to_string().contains("component 1"), "{err}");
}

#[test]
fn invalid_specs_are_rejected() {
    let cases = [
        (toy(2, 5), "depth >= 3"),
        (toy(4, 2), "H, W >= 3"),
        (ArchitectureSpec::mlp(vec![], 3, 2), "at least one"),
        (ArchitectureSpec::mlp(vec![3], 3, 1), "num_classes"),
        (ArchitectureSpec::toy_conv(3, vec![12], 10), "[C, H, W]"),
    ];
    for (spec, needle) in cases {
        let err = build(&spec, 0).unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains(needle), "{err}");
    }
}

#[test]
fn spec_text_round_trips() {
    let specs = [
        toy(6, 16),
        ArchitectureSpec::mlp(vec![8, 4], 2, 3),
        ArchitectureSpec::resnet_lite(vec![3, 32, 32], 10),
    ];
    for s in specs {
        let text = s.to_string();
        assert_eq!(text.parse::<ArchitectureSpec>().unwrap(), s, "{text}");
    }
    assert_eq!(
        "toy-conv(3) input=3x32x32 classes=10".parse::<ArchitectureSpec>().unwrap(),
        ArchitectureSpec::toy_conv(3, vec![3, 32, 32], 10)
    );
    assert!("toy-conv(3".parse::<Preset>().is_err());
    assert!("mlp()".parse::<Preset>().is_err());
}

#[test]
fn blocks_align_to_top() {
    assert_eq!(group_blocks(4, 2), vec![(1, 2), (3, 4)]);
    assert_eq!(group_blocks(5, 2), vec![(1, 1), (2, 3), (4, 5)]);
    assert_eq!(group_blocks(3, 5), vec![(1, 3)]);
    assert_eq!(group_blocks(3, 1), vec![(1, 1), (2, 2), (3, 3)]);
}

#[test]
fn merging_preserves_every_kept_output() {
    let m = build(&toy(6, 5), 4).unwrap();
    let merged = m.merged(2).unwrap();
    assert_eq!(merged.len(), 3);
    let x = images(3, &[3, 5, 5], "x");
    let (mut t1, mut t2) = (Tape::new(), Tape::new());
    let a = m.forward(&mut t1, &x, Mode::Train).unwrap();
    let b = merged.forward(&mut t2, &x, Mode::Train).unwrap();
    for (i, top) in [1usize, 3, 5].into_iter().enumerate() {
        assert_eq!(t1.value(a.logits[top]), t2.value(b.logits[i]));
        assert_eq!(t1.value(a.activations[top]), t2.value(b.activations[i]));
    }
}

#[test]
fn running_stats_track_batches() {
    let mut m = build(&ArchitectureSpec::toy_conv(3, vec![1, 3, 3], 2), 0).unwrap();
    let x = images(4, &[1, 3, 3], "x");
    let mut tape = Tape::new();
    let pass = m.forward(&mut tape, &x, Mode::Train).unwrap();
    let s = &pass.stats[0][0].1;
    m.apply_stats(&pass.stats);
    let buf = &m.components[0].buffers[0];
    let n = s.count as f64;
    for c in 0..buf.mean.len() {
        assert!((buf.mean[c] - 0.1 * s.mean[c]).abs() < 1e-15);
        assert!((buf.var[c] - (0.9 + 0.1 * s.var[c] * n / (n - 1.0))).abs() < 1e-15);
    }
}
