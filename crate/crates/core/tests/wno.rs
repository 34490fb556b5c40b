use gpo_core::grid::{Boundary, GridFunction};
use gpo_core::tensor::{Tape, Tensor};
use gpo_core::wavelet::{dwt, idwt, WaveletBasis};
use gpo_core::wno::{
    forward_on_tape, input_tensor, latents, spectral_conv, wno_forward, Activation, ParamVars, Plan, WnoConfig,
    WnoParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn smooth_field(n: usize, seed: u64) -> GridFunction {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modes: Vec<(f64, f64)> = (1..=4)
        .map(|k| {
            let amp = rng.random_range(-1.0..1.0) / (k * k) as f64;
            (amp, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    GridFunction::from_fn(vec![n], vec![1.0], Boundary::Periodic, |x| {
        modes
            .iter()
            .enumerate()
            .map(|(k, (a, ph))| a * (2.0 * std::f64::consts::PI * (k + 1) as f64 * x[0] + ph).sin())
            .sum()
    })
    .unwrap()
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

fn zero_biases(p: &mut WnoParams) {
    for b in [&mut p.lift_b, &mut p.proj_b] {
        *b = Tensor::zeros(b.shape());
    }
    for l in &mut p.layers {
        l.bias = Tensor::zeros(l.bias.shape());
    }
}

#[test]
fn zero_input_with_zero_biases_gives_zero_latent() {
    let cfg = WnoConfig {
        grid_coords: false,
        width: 8,
        layers: 2,
        ..WnoConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut p = WnoParams::init(&cfg, 1, &[64], &mut rng).unwrap();
    let zero = GridFunction::unit(vec![64], Boundary::Periodic, vec![0.0; 64]).unwrap();
    let with_bias = wno_forward(&zero, &p, &cfg).unwrap();
    assert!(with_bias.values().iter().any(|&v| v != 0.0));
    zero_biases(&mut p);
    let out = wno_forward(&zero, &p, &cfg).unwrap();
    assert!(out.values().iter().all(|&v| v == 0.0));
    assert_eq!(out.channels(), cfg.latent_channels);
}

fn conv(v: &Tensor, mix: &Tensor, basis: WaveletBasis, plan: &Plan) -> Tensor {
    let mut tape = Tape::new();
    let vv = tape.constant(v.clone());
    let mv = tape.constant(mix.clone());
    let out = spectral_conv(&mut tape, vv, mv, basis, plan).unwrap();
    tape.value(out).clone()
}

fn identity_mix(positions: usize, w: usize) -> Tensor {
    let mut data = vec![0.0; positions * w * w];
    for p in 0..positions {
        for i in 0..w {
            data[p * w * w + i * w + i] = 1.0;
        }
    }
    Tensor::new(vec![positions, w, w], data).unwrap()
}

#[test]
fn spectral_conv_identity_zero_and_linearity() {
    let cfg = WnoConfig {
        levels: 1,
        ..WnoConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = 3;
    let v: Vec<f64> = (0..2 * w * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
    let v = Tensor::new(vec![2, w, 32], v).unwrap();
    let plan = Plan::new(&cfg, &[16], &[32]).unwrap();
    for basis in WaveletBasis::all() {
        let out = conv(&v, &identity_mix(32, w), basis, &plan);
        assert!(out.max_abs_diff(&v).unwrap() < 1e-10);
        let zero = conv(&v, &Tensor::zeros(&[32, w, w]), basis, &plan);
        assert!(zero.data().iter().all(|&x| x == 0.0));
    }

    let plan = Plan::new(&WnoConfig { levels: 2, ..cfg }, &[8], &[32]).unwrap();
    let mix: Vec<f64> = (0..16 * w * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mix = Tensor::new(vec![16, w, w], mix).unwrap();
    let u: Vec<f64> = (0..2 * w * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
    let u = Tensor::new(vec![2, w, 32], u).unwrap();
    let combo: Vec<f64> = v.data().iter().zip(u.data()).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
    let combo = Tensor::new(vec![2, w, 32], combo).unwrap();
    let (cv, cu, cc) = (
        conv(&v, &mix, WaveletBasis::Db4, &plan),
        conv(&u, &mix, WaveletBasis::Db4, &plan),
        conv(&combo, &mix, WaveletBasis::Db4, &plan),
    );
    for i in 0..cc.len() {
        assert!((cc.data()[i] - (2.0 * cv.data()[i] - 0.5 * cu.data()[i])).abs() < 1e-10);
    }
}

#[test]
fn single_linear_layer_is_a_low_pass_projection() {
    let n = 64;
    let cfg = WnoConfig {
        width: 2,
        layers: 1,
        levels: 2,
        latent_channels: 2,
        grid_coords: true,
        activation: Activation::Linear,
        basis: WaveletBasis::Db4,
        ..WnoConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut p = WnoParams::init(&cfg, 1, &[n], &mut rng).unwrap();
    zero_biases(&mut p);
    p.lift_w = identity_mix(1, 2).reshape(vec![2, 2]).unwrap();
    p.proj_w = p.lift_w.clone();
    p.layers[0].bypass = Tensor::zeros(&[2, 2]);
    // Ones on the approximation band, zeros on the retained detail band.
    let c = n / 4;
    let mut mix = identity_mix(2 * c, 2).into_data();
    for v in &mut mix[c * 4..] {
        *v = 0.0;
    }
    p.layers[0].mix = Tensor::new(vec![2 * c, 2, 2], mix).unwrap();

    let field = smooth_field(n, 3);
    let out = wno_forward(&field, &p, &cfg).unwrap();
    let coords: Vec<f64> = field.coordinates().into_iter().map(|c| c[0]).collect();
    for (ch, signal) in [field.values().to_vec(), coords].iter().enumerate() {
        let mut co = dwt(signal, &[n], WaveletBasis::Db4, 2).unwrap();
        for band in co.details.iter_mut().flatten() {
            band.fill(0.0);
        }
        let oracle = idwt(&co).unwrap();
        let got = out.channel(ch);
        let err = got.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "channel {ch}: {err}");
    }
}

#[test]
fn gradients_of_two_layer_operator_match_finite_differences() {
    let cfg = WnoConfig {
        width: 4,
        layers: 2,
        levels: 2,
        latent_channels: 3,
        basis: WaveletBasis::Db4,
        ..WnoConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = WnoParams::init(&cfg, 1, &[16], &mut rng).unwrap();
    let fields = [smooth_field(16, 5), smooth_field(16, 6)];
    let refs: Vec<&GridFunction> = fields.iter().collect();
    let x = input_tensor(&cfg, &refs).unwrap();
    let plan = Plan::new(&cfg, &params.coarse_dims, &[16]).unwrap();
    let weights: Vec<f64> = (0..2 * 3 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let weights = Tensor::new(vec![2, 3, 16], weights).unwrap();

    let eval = |p: &WnoParams| -> (f64, Vec<Tensor>) {
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, p, true);
        let xin = tape.constant(x.clone());
        let out = forward_on_tape(&mut tape, &cfg, &vars, xin, &plan).unwrap();
        let w = tape.constant(weights.clone());
        let sq = tape.mul(out, out).unwrap();
        let prod = tape.mul(sq, w).unwrap();
        let s = tape.sum(prod).unwrap();
        let g = tape.backward(s).unwrap();
        let grads = vars.all().iter().map(|&v| g.get(v).unwrap().clone()).collect();
        (tape.value(s).data()[0], grads)
    };
    let (_, grads) = eval(&params);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, g) in grads.iter().enumerate() {
        for i in 0..g.len() {
            let bump = |d: f64| {
                let mut ts: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
                let mut data = ts[k].clone().into_data();
                data[i] += d;
                ts[k] = Tensor::new(ts[k].shape().to_vec(), data).unwrap();
                WnoParams::from_tensors(params.coarse_dims.clone(), params.in_channels, ts).unwrap()
            };
            let fd = (eval(&bump(h)).0 - eval(&bump(-h)).0) / (2.0 * h);
            let rel = (fd - g.data()[i]).abs() / fd.abs().max(1e-4);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn finer_resolution_reproduces_coarse_latents() {
    let cfg = WnoConfig {
        width: 16,
        layers: 2,
        levels: 3,
        ..WnoConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = WnoParams::init(&cfg, 1, &[128], &mut rng).unwrap();
    for seed in 0..5 {
        let coarse = smooth_field(128, 100 + seed);
        let fine = smooth_field(256, 100 + seed);
        let lc = wno_forward(&coarse, &params, &cfg).unwrap();
        let lf = wno_forward(&fine, &params, &cfg).unwrap().restrict(&[128]).unwrap();
        let rel = rel_l2(lf.values(), lc.values());
        assert!(rel < 0.1, "seed {seed}: {rel}");
    }
    let same = wno_forward(&smooth_field(128, 1), &params, &cfg).unwrap();
    let again = latents(&cfg, &params, &[&smooth_field(128, 1)]).unwrap();
    assert_eq!(same.values(), again[0].as_slice());
}

#[test]
fn constant_input_stays_constant_with_position_shared_weights() {
    let cfg = WnoConfig {
        width: 4,
        layers: 2,
        levels: 2,
        latent_channels: 3,
        grid_coords: false,
        ..WnoConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut params = WnoParams::init(&cfg, 1, &[32], &mut rng).unwrap();
    for layer in &mut params.layers {
        let s = layer.mix.shape().to_vec();
        let block = layer.mix.data()[..16].to_vec();
        let data = (0..s[0]).flat_map(|_| block.clone()).collect();
        layer.mix = Tensor::new(s, data).unwrap();
    }
    for n in [32, 64, 128] {
        let input = GridFunction::unit(vec![n], Boundary::Periodic, vec![0.7; n]).unwrap();
        let out = wno_forward(&input, &params, &cfg).unwrap();
        for c in 0..3 {
            let ch = out.channel(c);
            assert!(ch.iter().all(|v| (v - ch[0]).abs() < 1e-10), "n={n} c={c}");
        }
    }
}

#[test]
fn parameter_count_is_resolution_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let coarse = WnoConfig {
        levels: 3,
        ..WnoConfig::default()
    };
    let fine = WnoConfig {
        levels: 4,
        ..WnoConfig::default()
    };
    let a = WnoParams::init(&coarse, 1, &[128], &mut rng).unwrap();
    let b = WnoParams::init(&fine, 1, &[256], &mut rng).unwrap();
    assert_eq!(a.coarse_dims, b.coarse_dims);
    assert_eq!(a.parameter_count(), b.parameter_count());
}

#[test]
fn incompatible_resolutions_are_rejected() {
    let cfg = WnoConfig::default();
    assert!(Plan::new(&cfg, &[16], &[128]).is_ok());
    assert_eq!(Plan::new(&cfg, &[16], &[256]).unwrap().levels, 4);
    assert!(Plan::new(&cfg, &[16], &[192]).is_err());
    assert!(Plan::new(&cfg, &[16], &[100]).is_err());
    let padded = WnoConfig {
        pad: true,
        levels: 2,
        ..cfg
    };
    let plan = Plan::new(&padded, &[8, 8], &[58, 58]).unwrap();
    assert_eq!(plan.padded, vec![64, 64]);
    assert_eq!(plan.levels, 3);
}

#[test]
fn padded_two_dimensional_forward_runs_at_both_resolutions() {
    let cfg = WnoConfig {
        width: 4,
        layers: 2,
        levels: 2,
        latent_channels: 2,
        pad: true,
        basis: WaveletBasis::Haar,
        ..WnoConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let params = WnoParams::init(&cfg, 1, &[29, 29], &mut rng).unwrap();
    assert_eq!(params.coarse_dims, vec![8, 8]);
    let f = |x: &[f64]| (3.0 * x[0]).sin() * x[1];
    for n in [29, 58] {
        let input = GridFunction::from_fn(vec![n, n], vec![1.0, 1.0], Boundary::Dirichlet, f).unwrap();
        let out = wno_forward(&input, &params, &cfg).unwrap();
        assert_eq!(out.dims(), &[n, n]);
        assert!(out.values().iter().all(|v| v.is_finite()));
    }
}
