use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use repvgg::winograd::{winograd_conv3x3, winograd_conv3x3_counted};
use repvgg::{
    block_forward_deploy, block_forward_train, convert_block, convert_model, forward, instantiate, trainer,
    ConvParams, ModelSpec, RepVggBlock, Tensor4,
};

fn block_case() -> impl Strategy<Value = (usize, usize, usize, usize, bool, usize, u64)> {
    (
        prop::sample::select(vec![1usize, 2, 4]),
        1usize..4,
        1usize..4,
        prop::sample::select(vec![1usize, 2]),
        any::<bool>(),
        3usize..12,
        any::<u64>(),
    )
        .prop_map(|(g, a, b, stride, same, size, seed)| {
            let c_in = g * a;
            let c_out = if same { c_in } else { g * (a + b) };
            (c_in, c_out, stride, g, same, size, seed)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn converted_block_matches_branches(case in block_case()) {
        let (c_in, c_out, stride, groups, _, size, seed) = case;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = RepVggBlock::<f64>::random(&mut rng, c_in, c_out, stride, groups).unwrap();
        prop_assert_eq!(block.has_identity(), stride == 1 && c_in == c_out);
        let x = Tensor4::random_uniform([2, c_in, size, size + 1], -2.0, 2.0, seed ^ 1);
        let fused = convert_block(&block).unwrap();
        let a = block_forward_train(&block, &x).unwrap();
        let b = block_forward_deploy(fused.conv(), &x).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-10);

        let block32 = RepVggBlock::<f32>::random(&mut ChaCha8Rng::seed_from_u64(seed), c_in, c_out, stride, groups).unwrap();
        let x32 = x.cast::<f32>();
        let a = block_forward_train(&block32, &x32).unwrap();
        let b = block_forward_deploy(convert_block(&block32).unwrap().conv(), &x32).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-4);
    }

    #[test]
    fn winograd_matches_direct(
        groups in prop::sample::select(vec![1usize, 2, 3]),
        cin_g in 1usize..5,
        cout_g in 1usize..5,
        h in 1usize..13,
        w in 1usize..13,
        padding in 0usize..2,
        bias in any::<bool>(),
        seed in any::<u64>(),
    ) {
        prop_assume!(h + 2 * padding >= 3 && w + 2 * padding >= 3);
        let (c_in, c_out) = (cin_g * groups, cout_g * groups);
        let kernel = Tensor4::<f32>::random_uniform([c_out, cin_g, 3, 3], -1.0, 1.0, seed);
        let bias = bias.then(|| (0..c_out).map(|i| i as f32 * 0.1 - 0.2).collect());
        let p = ConvParams::new(kernel, bias, 1, padding, groups).unwrap();
        let x = Tensor4::random_uniform([2, c_in, h, w], -1.0, 1.0, seed ^ 7);
        let direct = repvgg::tensor::conv2d_reference(&x, &p).unwrap();
        let (wino, muls) = winograd_conv3x3_counted(&x, &p).unwrap();
        prop_assert!(wino.max_abs_diff(&direct).unwrap() <= 1e-4);
        prop_assert!(winograd_conv3x3(&x, &p).unwrap().max_abs_diff(&wino).unwrap() <= 1e-5);
        let [_, _, oh, ow] = direct.shape();
        let tiles = (2 * oh.div_ceil(2) * ow.div_ceil(2)) as u64;
        prop_assert_eq!(muls, tiles * 16 * (c_out * cin_g) as u64);
    }

    #[test]
    fn converted_models_agree(seed in any::<u64>(), groups in prop::sample::select(vec![1usize, 2, 4])) {
        let spec = ModelSpec::custom("prop", vec![1, 2, 2], vec![8, 8, 16], groups, vec![3, 5], 5, 3).unwrap();
        let mut m = instantiate::<f64>(&spec, seed);
        trainer::calibrate_bn(&mut m, &Tensor4::random_uniform([4, 3, 16, 16], -1.0, 1.0, seed)).unwrap();
        let d = convert_model(&m).unwrap();
        prop_assert_eq!(d.num_params() as u64, repvgg::analysis::count_params(&spec, repvgg::Mode::Deploy));
        let x = Tensor4::random_uniform([2, 3, 16, 20], -1.0, 1.0, seed ^ 3);
        prop_assert!(forward(&m, &x).unwrap().max_abs_diff(&forward(&d, &x).unwrap()).unwrap() <= 1e-10);
    }
}
