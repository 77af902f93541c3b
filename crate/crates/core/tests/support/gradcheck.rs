//! Central finite-difference checks of every hand-written backward pass.
//!
//! Each check draws `INSTANCES` seeded random instances. The error for a tensor is
//! `|a - n| / (|a| + |n|)` over the whole tensor (Euclidean norms), with `a`
//! the analytic and `n` the numerical gradient; it must stay below 1e-4.

use ndarray::{Array, Array2, Array3, ArrayD, Dimension, IxDyn, ShapeBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use velocorr::models::{
    AcousticConfig, AcousticModel, CorrectionConfig, CorrectionModel, FeatureConfig, VelocityModel,
};
use velocorr::nn::{
    masked_bce, relu, relu_backward, sigmoid, sigmoid_backward, AvgPoolFreq, BiLstm, Conv2d, Linear, Lstm,
    Parameterized, Reduction,
};

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-4;
pub const INSTANCES: u64 = 20;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x6772_6164 ^ seed)
}

fn random<Sh: ShapeBuilder>(rng: &mut ChaCha8Rng, shape: Sh, lo: f64, hi: f64) -> Array<f64, Sh::Dim> {
    Array::from_shape_simple_fn(shape, || rng.random_range(lo..hi))
}

fn rel_err(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>) -> f64 {
    let diff = (analytic - numeric).mapv(|v| v * v).sum().sqrt();
    let scale = analytic.mapv(|v| v * v).sum().sqrt() + numeric.mapv(|v| v * v).sum().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Numerical gradient of `f` with respect to `x`.
fn numeric<D: Dimension>(x: &Array<f64, D>, f: impl Fn(&Array<f64, D>) -> f64) -> ArrayD<f64> {
    let mut probe = x.clone();
    let mut out = ArrayD::zeros(IxDyn(x.shape()));
    for (i, o) in out.iter_mut().enumerate() {
        let orig = probe.as_slice_memory_order().expect("standard layout")[i];
        probe.as_slice_memory_order_mut().unwrap()[i] = orig + EPS;
        let up = f(&probe);
        probe.as_slice_memory_order_mut().unwrap()[i] = orig - EPS;
        let down = f(&probe);
        probe.as_slice_memory_order_mut().unwrap()[i] = orig;
        *o = (up - down) / (2.0 * EPS);
    }
    out
}

/// Compares every parameter tensor of `analytic` with finite differences of
/// `loss` around `model`.
fn check_params<P: Parameterized<f64> + Clone>(
    what: &str,
    model: &P,
    analytic: &P,
    loss: impl Fn(&P) -> f64,
) -> Result<(), String> {
    let grads = analytic.to_owned_params();
    let mut probe = model.clone();
    for (k, (name, a)) in grads.iter().enumerate() {
        let mut n = ArrayD::zeros(a.raw_dim());
        for (i, slot) in n.iter_mut().enumerate() {
            let orig = model.params()[k].1.iter().nth(i).copied().unwrap();
            let set = |p: &mut P, v: f64| *p.params_mut()[k].1.iter_mut().nth(i).unwrap() = v;
            set(&mut probe, orig + EPS);
            let up = loss(&probe);
            set(&mut probe, orig - EPS);
            let down = loss(&probe);
            set(&mut probe, orig);
            *slot = (up - down) / (2.0 * EPS);
        }
        let e = rel_err(a, &n);
        if !(e < TOL) {
            return Err(format!("{what}: parameter {name} relative error {e:e}"));
        }
    }
    Ok(())
}

fn check_input<D: Dimension>(
    what: &str,
    analytic: &Array<f64, D>,
    x: &Array<f64, D>,
    f: impl Fn(&Array<f64, D>) -> f64,
) -> Result<(), String> {
    let n = numeric(x, f);
    let e = rel_err(&analytic.clone().into_dyn(), &n);
    if e < TOL {
        Ok(())
    } else {
        Err(format!("{what}: input relative error {e:e}"))
    }
}

/// Weighted sum of an output; its gradient is the weight array.
fn project<D: Dimension>(y: &Array<f64, D>, w: &Array<f64, D>) -> f64 {
    (y * w).sum()
}

pub fn linear() -> Result<(), String> {
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let (t, i, o) = (r.random_range(1..6), r.random_range(1..7), r.random_range(1..6));
        let layer = Linear::<f64>::init(i, o, &mut r);
        let x = random(&mut r, (t, i), -2.0, 2.0);
        let w = random(&mut r, (t, o), -1.0, 1.0);
        let (_, cache) = layer.forward(&x).unwrap();
        let (dx, dp) = layer.backward(&cache, &w).unwrap();
        check_input("linear", &dx, &x, |x| project(&layer.forward(x).unwrap().0, &w))?;
        check_params("linear", &layer, &dp, |p| project(&p.forward(&x).unwrap().0, &w))?;
    }
    Ok(())
}

pub fn sigmoid_and_relu() -> Result<(), String> {
    for seed in 0..INSTANCES {
        let mut r = rng(100 + seed);
        let shape = (r.random_range(1..5usize), r.random_range(1..5usize));
        let x: Array2<f64> = random(&mut r, shape, -4.0, 4.0);
        let w = random(&mut r, x.raw_dim(), -1.0, 1.0);
        let dx = sigmoid_backward(&sigmoid(&x), &w).unwrap();
        check_input("sigmoid", &dx, &x, |x| project(&sigmoid(x), &w))?;
        // Keep inputs away from the kink at zero.
        let xr = x.mapv(|v| if v.abs() < 0.1 { v + 0.2 } else { v });
        let dr = relu_backward(&xr, &w).unwrap();
        check_input("relu", &dr, &xr, |x| project(&relu(x), &w))?;
    }
    Ok(())
}

pub fn conv2d_and_pooling() -> Result<(), String> {
    for seed in 0..INSTANCES {
        let mut r = rng(200 + seed);
        let (ci, co) = (r.random_range(1..3), r.random_range(1..4));
        let k = [1, 3, 5][r.random_range(0..3)];
        let (h, wd) = (r.random_range(1..6), r.random_range(2..7));
        let layer = Conv2d::<f64>::init(ci, co, k, &mut r);
        let x: Array3<f64> = random(&mut r, (ci, h, wd), -1.0, 1.0);
        let w = random(&mut r, (co, h, wd / 2), -1.0, 1.0);
        let f = |l: &Conv2d<f64>, x: &Array3<f64>| project(&AvgPoolFreq::forward(&l.forward(x).unwrap().0), &w);
        let (_, cache) = layer.forward(&x).unwrap();
        let g = AvgPoolFreq::backward(wd, &w).unwrap();
        let (dx, dp) = layer.backward(&cache, &g).unwrap();
        check_input("conv2d", &dx, &x, |x| f(&layer, x))?;
        check_params("conv2d", &layer, &dp, |p| f(p, &x))?;
    }
    Ok(())
}

pub fn lstm_both_directions() -> Result<(), String> {
    for seed in 0..INSTANCES {
        let mut r = rng(300 + seed);
        let (t, i, h) = (r.random_range(1..7), r.random_range(1..5), r.random_range(1..4));
        let reverse = seed % 2 == 1;
        let layer = Lstm::<f64>::init(i, h, &mut r);
        // Sparse inputs exercise the sparse projection path too.
        let x = random(&mut r, (t, i), -1.5, 1.5).mapv(|v| if v.abs() < 0.9 { 0.0 } else { v });
        let w = random(&mut r, (t, h), -1.0, 1.0);
        let (_, cache) = layer.forward(&x, reverse).unwrap();
        let (dx, dp) = layer.backward(&cache, &w).unwrap();
        check_input("lstm", &dx, &x, |x| project(&layer.forward(x, reverse).unwrap().0, &w))?;
        check_params("lstm", &layer, &dp, |p| project(&p.forward(&x, reverse).unwrap().0, &w))?;
        if layer.backward_params(&cache, &w).unwrap() != dp {
            return Err("lstm: parameter-only backward disagrees".into());
        }
    }
    Ok(())
}

pub fn bilstm() -> Result<(), String> {
    for seed in 0..INSTANCES {
        let mut r = rng(400 + seed);
        let (t, i, h) = (r.random_range(1..7), r.random_range(1..5), r.random_range(1..4));
        let layer = BiLstm::<f64>::init(i, h, &mut r);
        let x = random(&mut r, (t, i), -1.5, 1.5);
        let w = random(&mut r, (t, 2 * h), -1.0, 1.0);
        let (_, cache) = layer.forward(&x).unwrap();
        let (dx, dp) = layer.backward(&cache, &w).unwrap();
        check_input("bilstm", &dx, &x, |x| project(&layer.forward(x).unwrap().0, &w))?;
        check_params("bilstm", &layer, &dp, |p| project(&p.forward(&x).unwrap().0, &w))?;
    }
    Ok(())
}

pub fn masked_bce_both_reductions() -> Result<(), String> {
    for seed in 0..INSTANCES {
        let mut r = rng(500 + seed);
        let shape = (r.random_range(1..6), r.random_range(1..6));
        let pred: Array2<f64> = random(&mut r, shape, 0.05, 0.95);
        let target = random(&mut r, shape, 0.0, 1.0);
        let mask = Array2::from_shape_simple_fn(shape, || u8::from(r.random_bool(0.5)));
        for red in [Reduction::Sum, Reduction::Mean] {
            let (_, g) = masked_bce(&pred, &target, &mask, red).unwrap();
            check_input("masked_bce", &g, &pred, |p| masked_bce(p, &target, &mask, red).unwrap().0)?;
            if !g.iter().zip(&mask).all(|(g, &m)| m == 1 || *g == 0.0) {
                return Err("masked_bce: gradient leaks outside the mask".into());
            }
        }
    }
    Ok(())
}

pub fn correction_model_end_to_end() -> Result<(), String> {
    for seed in 0..INSTANCES {
        let mut r = rng(600 + seed);
        let features = FeatureConfig::TABLE_ROWS[seed as usize % 6];
        let cfg = CorrectionConfig {
            features,
            hidden: 2,
            keys: 3,
        };
        let model = CorrectionModel::<f64>::init(cfg, &mut r);
        let t = r.random_range(1..5);
        let x = random(&mut r, (t, model.input_width()), 0.0, 1.0);
        let target = random(&mut r, (t, 3), 0.0, 1.0);
        let mask = Array2::from_shape_simple_fn((t, 3), || u8::from(r.random_bool(0.6)));
        let (_, g) = model.loss_and_grad(&x, &target, &mask, Reduction::Sum).unwrap();
        check_params("correction", &model, &g, |m| {
            m.loss_and_grad(&x, &target, &mask, Reduction::Sum).unwrap().0
        })?;
    }
    Ok(())
}

/// Smallest |pre-activation| over the conv stack, recomputed here from the
/// public layers. Finite differences are only valid away from ReLU kinks.
fn relu_margin(model: &AcousticModel<f64>, mel: &Array2<f64>) -> f64 {
    let c = &model.config;
    let mut x = mel.mapv(|v| (v - c.input_offset) * c.input_scale).insert_axis(ndarray::Axis(0));
    let mut margin = f64::INFINITY;
    for conv in &model.convs {
        let (y, _) = conv.forward(&x).unwrap();
        margin = y.iter().fold(margin, |m, v| m.min(v.abs()));
        x = AvgPoolFreq::forward(&relu(&y));
    }
    margin
}

pub fn acoustic_model_end_to_end() -> Result<(), String> {
    let cfg = AcousticConfig {
        mel_bins: 8,
        channels: vec![2, 2],
        kernel: 3,
        hidden: 2,
        keys: 3,
        ..AcousticConfig::default()
    };
    let mut checked = 0;
    let mut r = rng(700);
    while checked < INSTANCES {
        let mut model = AcousticModel::<f64>::init(cfg.clone(), &mut r).unwrap();
        // Zero-initialized biases put dead-input rows exactly on the kink.
        for conv in &mut model.convs {
            conv.bias.mapv_inplace(|_| r.random_range(-0.5..0.5));
        }
        let t = r.random_range(1..4);
        let x = random(&mut r, (t, 8), -20.0, 0.0);
        if relu_margin(&model, &x) < 1e-2 {
            continue;
        }
        let target = random(&mut r, (t, 3), 0.0, 1.0);
        let mask = Array2::from_shape_simple_fn((t, 3), || u8::from(r.random_bool(0.6)));
        let (_, g) = model.loss_and_grad(&x, &target, &mask, Reduction::Sum).unwrap();
        check_params("acoustic", &model, &g, |m| {
            m.loss_and_grad(&x, &target, &mask, Reduction::Sum).unwrap().0
        })?;
        checked += 1;
    }
    Ok(())
}

/// Every check, in order, with its name.
pub const ALL: [(&str, fn() -> Result<(), String>); 8] = [
    ("linear", linear),
    ("sigmoid/relu", sigmoid_and_relu),
    ("conv2d+pool", conv2d_and_pooling),
    ("lstm", lstm_both_directions),
    ("bilstm", bilstm),
    ("masked bce", masked_bce_both_reductions),
    ("correction model", correction_model_end_to_end),
    ("acoustic model", acoustic_model_end_to_end),
];
