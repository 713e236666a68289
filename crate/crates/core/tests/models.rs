mod common;

use std::rc::Rc;

use mpresnet::analysis::{op_params, Conventions, Traced, Tracer};
use mpresnet::blocks::{basic_block, deconv_block, stem, BlockParams};
use mpresnet::exec::{InferExec, Mode};
use mpresnet::models::{
    branch_conv_counts, build_fcn_baseline, build_mp_resnet, forward, param_specs, read_checkpoint,
    write_checkpoint, Model, ModelConfig,
};
use mpresnet::tensor::Tensor;
use mpresnet::Error;

/// Trace `f` on a shape-only executor and initialise the parameters it declares.
fn params_for(dims: [usize; 4], seed: u64, f: impl Fn(&mut Tracer, &Traced) -> mpresnet::Result<Traced>) -> BlockParams<f64> {
    let mut t = Tracer::new();
    let x = t.input(dims);
    f(&mut t, &x).unwrap();
    BlockParams::initialize(&t.into_param_specs(), seed).unwrap()
}

fn random_tensor(dims: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = common::rng(seed);
    let n = dims.iter().product();
    Tensor::new(dims, common::random_vec(&mut r, n)).unwrap()
}

fn traced_param_total(dims: [usize; 4], f: impl Fn(&mut Tracer, &Traced) -> mpresnet::Result<Traced>) -> (u64, [usize; 4]) {
    let mut t = Tracer::new();
    let x = t.input(dims);
    let y = f(&mut t, &x).unwrap();
    let c = Conventions::default();
    (t.ops().iter().map(|op| op_params(op, &c)).sum(), y.dims)
}

#[test]
fn stem_quarters_resolution() {
    let params = params_for([1, 4, 64, 64], 1, |e, x| stem(e, x, 64));
    let x = Rc::new(random_tensor(&[1, 4, 64, 64], 2));
    let y = stem(&mut InferExec::new(&params), &x, 64).unwrap();
    assert_eq!(y.shape(), &[1, 64, 16, 16]);
}

#[test]
fn stem_parameter_count() {
    let (p, dims) = traced_param_total([1, 4, 64, 64], |e, x| stem(e, x, 64));
    assert_eq!(p, 7 * 7 * 4 * 64 + 2 * 64);
    assert_eq!(dims, [1, 64, 16, 16]);
}

#[test]
fn stem_rejects_indivisible_extents() {
    let params = params_for([1, 4, 64, 64], 1, |e, x| stem(e, x, 8));
    let x = Rc::new(random_tensor(&[1, 4, 48, 64], 2));
    let err = stem(&mut InferExec::new(&params), &x, 8).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn zero_residual_block_is_relu() {
    let mut params = params_for([2, 8, 8, 8], 3, |e, x| basic_block(e, "b", x, 8, 1, 1));
    for p in params.iter_mut().filter(|p| p.name.ends_with("conv2.weight")) {
        p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let x = Rc::new(random_tensor(&[2, 8, 8, 8], 4));
    let y = basic_block(&mut InferExec::new(&params), "b", &x, 8, 1, 1).unwrap();
    // Eval BN with unit running variance scales by 1/sqrt(1 + eps).
    for (a, b) in y.data().iter().zip(x.data()) {
        assert!((a - b.max(0.0)).abs() < 1e-5);
    }
}

#[test]
fn strided_block_halves_extents() {
    let params = params_for([1, 8, 16, 12], 5, |e, x| basic_block(e, "b", x, 16, 2, 1));
    let x = Rc::new(random_tensor(&[1, 8, 16, 12], 6));
    let y = basic_block(&mut InferExec::new(&params), "b", &x, 16, 2, 1).unwrap();
    assert_eq!(y.shape(), &[1, 16, 8, 6]);
    assert!(params.get("b.downsample.conv.weight").is_some());
}

#[test]
fn basic_block_parameter_count() {
    let (p, _) = traced_param_total([1, 64, 8, 8], |e, x| basic_block(e, "b", x, 64, 1, 1));
    assert_eq!(p, 2 * (3 * 3 * 64 * 64) + 2 * (2 * 64));
    assert_eq!(p, 73_984);
}

#[test]
fn deconv_block_shape_and_count() {
    let (p, dims) = traced_param_total([1, 512, 16, 16], |e, x| deconv_block(e, "d", x, 256));
    assert_eq!(dims, [1, 256, 32, 32]);
    let conv = 512 * 128 + 3 * 3 * 128 * 128 + 128 * 256;
    assert_eq!(conv, 245_760);
    assert_eq!(p, conv + 2 * 128 + 2 * 128 + 2 * 256);
}

#[test]
fn deconv_block_with_zero_expand_outputs_zero() {
    let mut params = params_for([1, 16, 4, 4], 7, |e, x| deconv_block(e, "d", x, 8));
    let w = params.get_mut("d.expand.conv.weight").unwrap();
    w.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let x = Rc::new(random_tensor(&[1, 16, 4, 4], 8));
    let y = deconv_block(&mut InferExec::new(&params), "d", &x, 8).unwrap();
    assert_eq!(y.shape(), &[1, 8, 8, 8]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn deconv_block_requires_width_divisible_by_four() {
    let mut t = Tracer::new();
    let x = t.input([1, 18, 4, 4]);
    assert!(matches!(deconv_block(&mut t, "d", &x, 8), Err(Error::Config(_))));
}

#[test]
fn reference_topology_at_512() {
    let cfg = ModelConfig::mp_resnet();
    let mut t = Tracer::new();
    let x = t.input([1, 4, 512, 512]);
    let out = forward(&mut t, &cfg, &x).unwrap();
    assert_eq!(out.logits.dims, [1, 6, 512, 512]);
    assert_eq!(out.trunk.dims[2..], [64, 64]);
    let extents: Vec<_> = out.branches.iter().map(|b| [b.dims[2], b.dims[3]]).collect();
    assert_eq!(extents, vec![[64, 64], [32, 32], [16, 16]]);
}

#[test]
fn fcn_keeps_output_stride_eight() {
    let cfg = ModelConfig::fcn_baseline();
    let mut t = Tracer::new();
    let x = t.input([1, 4, 512, 512]);
    let out = forward(&mut t, &cfg, &x).unwrap();
    assert_eq!(out.logits.dims, [1, 6, 512, 512]);
    assert_eq!(out.branches[0].dims, [1, 512, 64, 64]);
}

#[test]
fn tiny_models_produce_full_resolution_logits() {
    for cfg in [ModelConfig::tiny_mp_resnet(), ModelConfig::tiny_fcn_baseline()] {
        let mut m = Model::<f32>::build(&cfg, 3).unwrap();
        m.set_mode(Mode::Eval);
        let x = random_tensor(&[1, 4, 64, 64], 9).cast();
        let out = m.forward_all(&x).unwrap();
        assert_eq!(out.logits.shape(), &[1, 6, 64, 64]);
        assert!(out.logits.all_finite());
    }
    let mut m = Model::<f32>::build(&ModelConfig::tiny_mp_resnet(), 3).unwrap();
    m.set_mode(Mode::Eval);
    let out = m.forward_all(&random_tensor(&[1, 4, 64, 64], 9).cast()).unwrap();
    let extents: Vec<_> = out.branches.iter().map(|b| b.shape()[2]).collect();
    assert_eq!(extents, vec![8, 4, 2]);
}

#[test]
fn branches_have_equal_depth() {
    for cfg in [ModelConfig::tiny_mp_resnet(), ModelConfig::mp_resnet()] {
        let specs = param_specs(&cfg).unwrap();
        let counts: Vec<usize> = (0..3)
            .map(|i| {
                let prefix = format!("branch{i}.");
                specs
                    .iter()
                    .filter(|s| s.name.starts_with(&prefix))
                    .filter(|s| s.name.ends_with("conv1.weight") || s.name.ends_with("conv2.weight"))
                    .count()
            })
            .collect();
        let expected = 2 * (cfg.stage_blocks[2] + cfg.stage_blocks[3]);
        assert_eq!(counts, vec![expected; 3]);
    }
    let m = Model::<f32>::build(&ModelConfig::tiny_mp_resnet(), 0).unwrap();
    let counts = branch_conv_counts(&m);
    assert!(counts.iter().all(|&c| c == counts[0]));
}

#[test]
fn seeded_initialisation_is_deterministic() {
    let cfg = ModelConfig::tiny_mp_resnet();
    let a = Model::<f32>::build(&cfg, 11).unwrap();
    let b = Model::<f32>::build(&cfg, 11).unwrap();
    let c = Model::<f32>::build(&cfg, 12).unwrap();
    let bits = |m: &Model<f32>| -> Vec<u32> { m.params().iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())).collect() };
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn parameter_names_follow_config() {
    let cfg = ModelConfig::tiny_mp_resnet();
    let m = Model::<f32>::build(&cfg, 0).unwrap();
    let built: Vec<&str> = m.params().names().collect();
    let declared: Vec<String> = param_specs(&cfg).unwrap().into_iter().map(|s| s.name).collect();
    assert_eq!(built, declared);
    let rebuilt = Model::<f32>::build(m.config(), 1).unwrap();
    assert!(rebuilt.params().names().eq(m.params().names()));
    assert!(built.contains(&"branch2.stage4.block0.downsample.conv.weight"));
    assert!(built.contains(&"decoder.deconv2.up.conv.weight"));
}

#[test]
fn baseline_shares_the_shallow_encoder() {
    let mp = Model::<f32>::build(&ModelConfig::tiny_mp_resnet(), 5).unwrap();
    let fcn = Model::<f32>::build(&ModelConfig::tiny_fcn_baseline(), 5).unwrap();
    let shallow = |m: &Model<f32>| -> Vec<(String, Vec<f32>)> {
        m.params()
            .iter()
            .filter(|p| ["stem.", "stage1.", "stage2."].iter().any(|s| p.name.starts_with(s)))
            .map(|p| (p.name.clone(), p.value.data().to_vec()))
            .collect()
    };
    let (a, b) = (shallow(&mp), shallow(&fcn));
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn eval_forward_is_idempotent_and_batch_independent() {
    let mut m = Model::<f32>::build(&ModelConfig::tiny_mp_resnet(), 2).unwrap();
    m.set_mode(Mode::Eval);
    let a = random_tensor(&[1, 4, 32, 32], 20).cast::<f32>();
    let b = random_tensor(&[1, 4, 32, 32], 21).cast::<f32>();
    let ab = Tensor::new(&[2, 4, 32, 32], [a.data(), b.data()].concat()).unwrap();
    let ba = Tensor::new(&[2, 4, 32, 32], [b.data(), a.data()].concat()).unwrap();
    let y1 = m.forward_segment(&ab).unwrap();
    let y2 = m.forward_segment(&ab).unwrap();
    assert_eq!(y1.data(), y2.data());
    let y3 = m.forward_segment(&ba).unwrap();
    let half = y1.numel() / 2;
    assert_eq!(&y1.data()[..half], &y3.data()[half..]);
    assert_eq!(&y1.data()[half..], &y3.data()[..half]);
}

#[test]
fn train_forward_updates_running_statistics() {
    let mut m = Model::<f32>::build(&ModelConfig::tiny_fcn_baseline(), 2).unwrap();
    let before = m.params().value("stem.bn.running_mean").unwrap().clone();
    let x = random_tensor(&[2, 4, 32, 32], 22).cast::<f32>();
    m.forward_segment(&x).unwrap();
    assert_ne!(m.params().value("stem.bn.running_mean").unwrap().data(), before.data());
    m.set_mode(Mode::Eval);
    let snapshot = m.params().value("stem.bn.running_mean").unwrap().clone();
    m.forward_segment(&x).unwrap();
    assert_eq!(m.params().value("stem.bn.running_mean").unwrap().data(), snapshot.data());
}

#[test]
fn forward_rejects_bad_inputs() {
    let mut m = Model::<f32>::build(&ModelConfig::tiny_mp_resnet(), 2).unwrap();
    m.set_mode(Mode::Eval);
    let wrong_channels = Tensor::<f32>::zeros(&[1, 3, 32, 32]);
    assert!(matches!(m.forward_segment(&wrong_channels), Err(Error::Shape { .. })));
    let wrong_extent = Tensor::<f32>::zeros(&[1, 4, 40, 32]);
    assert!(matches!(m.forward_segment(&wrong_extent), Err(Error::Config(_))));
}

#[test]
fn variant_mismatch_is_a_config_error() {
    assert!(matches!(build_mp_resnet::<f32>(&ModelConfig::fcn_baseline(), 0), Err(Error::Config(_))));
    assert!(matches!(build_fcn_baseline::<f32>(&ModelConfig::tiny_mp_resnet(), 0), Err(Error::Config(_))));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut m = Model::<f32>::build(&ModelConfig::tiny_mp_resnet(), 8).unwrap();
    // Move running statistics away from their initial values first.
    m.forward_segment(&random_tensor(&[2, 4, 32, 32], 30).cast()).unwrap();
    m.set_mode(Mode::Eval);
    let mut bytes = Vec::new();
    write_checkpoint(&m, &mut bytes).unwrap();
    assert_eq!(&bytes[..8], b"MPRSNET1");
    let mut loaded: Model<f32> = read_checkpoint(&bytes).unwrap();
    assert_eq!(loaded.config(), m.config());
    let x = random_tensor(&[1, 4, 32, 32], 31).cast();
    let a = m.forward_segment(&x).unwrap();
    let b = loaded.forward_segment(&x).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    mpresnet::models::save_checkpoint(&m, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    let reloaded: Model<f32> = mpresnet::models::load_checkpoint(&path).unwrap();
    assert_eq!(reloaded.params().len(), m.params().len());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let m = Model::<f32>::build(&ModelConfig::tiny_fcn_baseline(), 8).unwrap();
    let mut bytes = Vec::new();
    write_checkpoint(&m, &mut bytes).unwrap();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(read_checkpoint::<f32>(&bad), Err(Error::BadMagic { offset: 0, .. })));

    let cut = &bytes[..bytes.len() - 3];
    match read_checkpoint::<f32>(cut) {
        Err(Error::Truncated { expected, actual }) => {
            assert_eq!(actual, cut.len() as u64);
            assert!(expected > actual);
        }
        other => panic!("expected truncation error, got {other:?}"),
    }

    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(read_checkpoint::<f32>(&long), Err(Error::Parse(_))));
}
