use std::path::Path;

use difftrack_autodiff::layers::uniform;
use difftrack_autodiff::{
    grad_check, grad_check_params, seeded_rng, AdError, BiGru, Conv2d, ConvBlock, Dense, Graph, Gru, ParamStore,
    SelfAttention, Tensor, Var,
};
use difftrack_core::geometry::DoaVector;
use difftrack_core::hnet::{Hnet, HnetConfig};
use difftrack_core::localizer::{batch_loss, Localizer, LocalizerConfig, Objective};
use difftrack_core::loss::{
    activity_loss, combined_loss, distance_tensor, dmota_loss, dmotp_loss, FpMode, FrameBatch, LossWeights,
};

use crate::{ensure, Verdict};

const OP_TOLERANCE: f64 = 1e-4;
const END_TO_END_TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-5;

fn rand(shape: &[usize], seed: u64) -> Tensor {
    uniform(&mut seeded_rng(seed), shape, 1.0)
}

/// Random values kept away from a kink at zero.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut t = rand(shape, seed);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v = 0.05f64.copysign(*v);
        }
    }
    t
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    let t = rand(shape, seed);
    Tensor::new(shape, t.data().iter().map(|v| 1.5 + v).collect()).unwrap()
}

fn probs(shape: &[usize], seed: u64) -> Tensor {
    let t = rand(shape, seed);
    Tensor::new(shape, t.data().iter().map(|v| 0.5 + 0.4 * v).collect()).unwrap()
}

/// Weighted sum so every output entry sees a different upstream gradient.
fn reduce(g: &mut Graph, v: Var) -> difftrack_autodiff::Result<Var> {
    let shape = g.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(&shape, (0..n).map(|k| 0.3 + 0.7 * ((k * 37 % 11) as f64) / 11.0).collect())?;
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> difftrack_autodiff::Result<Var>>;

fn op_cases() -> Vec<(&'static str, Vec<Tensor>, OpFn)> {
    let a = || rand(&[3, 4], 1);
    let c = || rand(&[3, 4], 3);
    let t3 = || rand(&[2, 3, 4], 11);
    vec![
        ("matmul", vec![a(), rand(&[4, 2], 2)], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("transpose", vec![a()], Box::new(|g, v| g.transpose(v[0]))),
        ("add", vec![a(), c()], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![a(), c()], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", vec![a(), c()], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("div", vec![a(), positive(&[3, 4], 4)], Box::new(|g, v| g.div(v[0], v[1]))),
        ("add_bias", vec![a(), rand(&[4], 5)], Box::new(|g, v| g.add_bias(v[0], v[1]))),
        ("mul_col", vec![a(), rand(&[3, 1], 6)], Box::new(|g, v| g.mul_col(v[0], v[1]))),
        ("scale", vec![a()], Box::new(|g, v| Ok(g.scale(v[0], -2.5)))),
        ("add_scalar", vec![a()], Box::new(|g, v| Ok(g.add_scalar(v[0], 0.7)))),
        ("sigmoid", vec![a()], Box::new(|g, v| Ok(g.sigmoid(v[0])))),
        ("tanh", vec![a()], Box::new(|g, v| Ok(g.tanh(v[0])))),
        ("relu", vec![away_from_zero(&[3, 4], 7)], Box::new(|g, v| Ok(g.relu(v[0])))),
        ("abs", vec![away_from_zero(&[3, 4], 8)], Box::new(|g, v| Ok(g.abs(v[0])))),
        ("sqrt", vec![positive(&[3, 4], 9)], Box::new(|g, v| Ok(g.sqrt(v[0])))),
        ("clamp_min", vec![away_from_zero(&[3, 4], 10)], Box::new(|g, v| Ok(g.clamp_min(v[0], 0.0)))),
        ("reshape", vec![t3()], Box::new(|g, v| g.reshape(v[0], &[6, 4]))),
        ("concat", vec![t3(), rand(&[2, 2, 4], 12)], Box::new(|g, v| g.concat(&[v[0], v[1]], 1))),
        ("slice", vec![t3()], Box::new(|g, v| g.slice(v[0], 2, 1, 2))),
        ("permute", vec![t3()], Box::new(|g, v| g.permute(v[0], &[2, 0, 1]))),
        ("flip", vec![t3()], Box::new(|g, v| g.flip(v[0], 1))),
        ("softmax", vec![t3()], Box::new(|g, v| g.softmax(v[0], 2))),
        ("max_reduce", vec![t3()], Box::new(|g, v| g.max_reduce(v[0], 1))),
        ("sum_axis", vec![t3()], Box::new(|g, v| g.sum_axis(v[0], 0))),
        ("sum", vec![a()], Box::new(|g, v| Ok(g.sum(v[0])))),
        ("mean", vec![a()], Box::new(|g, v| Ok(g.mean(v[0])))),
        ("conv2d", vec![rand(&[2, 5, 4], 13), rand(&[3, 2, 3, 3], 14), rand(&[3], 15)], Box::new(|g, v| g.conv2d(v[0], v[1], v[2]))),
        ("max_pool2d", vec![rand(&[2, 4, 6], 16)], Box::new(|g, v| g.max_pool2d(v[0], 2, 3))),
        (
            "bce",
            vec![probs(&[2, 3], 17)],
            Box::new(|g, v| {
                let t = g.constant(Tensor::new(&[2, 3], vec![0.0, 1.0, 1.0, 0.0, 0.3, 1.0])?);
                g.bce(v[0], t, 1e-7)
            }),
        ),
    ]
}

fn layer_cases() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let param_check = |store: &ParamStore, f: &dyn Fn(&mut Graph, &ParamStore) -> difftrack_autodiff::Result<Var>| {
        grad_check_params(|g, s| f(g, s).and_then(|y| reduce(g, y)), store, STEP).unwrap_or(f64::INFINITY)
    };

    let mut s = ParamStore::new();
    let dense = Dense::new(&mut s, "d", 4, 3, &mut seeded_rng(20));
    let x = rand(&[5, 4], 21);
    out.push(("dense", param_check(&s, &|g, s| {
        let xv = g.constant(x.clone());
        dense.forward(g, s, xv)
    })));

    let mut s = ParamStore::new();
    let gru = Gru::new(&mut s, "gru", 3, 4, &mut seeded_rng(22));
    let x = rand(&[5, 3], 23);
    out.push(("gru", param_check(&s, &|g, s| {
        let xv = g.constant(x.clone());
        gru.forward_seq(g, s, xv)
    })));

    let mut s = ParamStore::new();
    let bi = BiGru::new(&mut s, "bi", 3, 4, &mut seeded_rng(24));
    let x = rand(&[4, 3], 25);
    out.push(("bigru", param_check(&s, &|g, s| {
        let xv = g.constant(x.clone());
        bi.forward_seq(g, s, xv)
    })));

    let mut s = ParamStore::new();
    let att = SelfAttention::new(&mut s, "att", 3, &mut seeded_rng(26));
    let x = rand(&[4, 3], 27);
    out.push(("attention", param_check(&s, &|g, s| {
        let xv = g.constant(x.clone());
        Ok(att.forward_seq(g, s, xv)?.0)
    })));

    let mut s = ParamStore::new();
    let block = ConvBlock { conv: Conv2d::new(&mut s, "c", 2, 3, (3, 3), &mut seeded_rng(28)), pool: (2, 2) };
    let x = rand(&[2, 6, 8], 29);
    out.push(("conv_block", param_check(&s, &|g, s| {
        let xv = g.constant(x.clone());
        block.forward(g, s, xv)
    })));
    out
}

fn loss_case() -> f64 {
    let (a, b) = (DoaVector::from_az_el_deg(20.0, 5.0), DoaVector::from_az_el_deg(-80.0, 30.0));
    let refs = vec![vec![(0, a)], vec![(0, a), (1, b)], vec![(1, b)]];
    let batch = FrameBatch::new(2, refs, vec![2, 2, 2], vec![3]).unwrap();
    let inputs = [rand(&[3, 6], 30), probs(&[3, 2, 2], 31), probs(&[3, 2], 32)];
    grad_check(
        |g, v| {
            let d = distance_tensor(g, &batch, v[0]).map_err(|e| AdError::Shape(e.to_string()))?;
            let p = dmotp_loss(g, &batch, d, v[1]).map_err(|e| AdError::Shape(e.to_string()))?;
            let m = dmota_loss(g, &batch, v[1], v[2], 1.0, FpMode::ActivityGated)
                .map_err(|e| AdError::Shape(e.to_string()))?;
            let target = Tensor::new(&[3, 2], vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0])?;
            let act = activity_loss(g, v[2], &target).map_err(|e| AdError::Shape(e.to_string()))?;
            combined_loss(g, LossWeights::FULL, p, m.loss, act).map_err(|e| AdError::Shape(e.to_string()))
        },
        &inputs,
        STEP,
    )
    .unwrap_or(f64::INFINITY)
}

/// Localizer, frozen association network and combined loss on two label frames.
fn end_to_end() -> f64 {
    let mut store = ParamStore::new();
    let model = Localizer::new(&mut store, LocalizerConfig { width: 2, ..LocalizerConfig::default() }, 3);
    let mut hstore = ParamStore::new();
    let hnet = Hnet::new(&mut hstore, HnetConfig { hidden: 6, ..HnetConfig::default() }, 4);
    hstore.set_frozen(true);
    let x = uniform(&mut seeded_rng(9), &[7, 10, 64], 1.0);
    let refs = vec![
        vec![(0, DoaVector::from_az_el_deg(30.0, 10.0))],
        vec![(0, DoaVector::from_az_el_deg(32.0, 10.0)), (1, DoaVector::from_az_el_deg(-100.0, -20.0))],
    ];
    grad_check_params(
        |g, s| {
            let xv = g.constant(x.clone());
            let l = batch_loss(g, &model, s, Some((&hnet, &hstore)), Objective::tracking(LossWeights::FULL), &[(
                xv,
                refs.as_slice(),
            )])
            .map_err(|e| AdError::Shape(e.to_string()))?;
            Ok(l.total)
        },
        &store,
        1e-6,
    )
    .unwrap_or(f64::INFINITY)
}

pub fn gradient_suite(_: &Path) -> Verdict {
    let mut worst = (String::new(), 0.0f64);
    let mut count = 0;
    let mut note = |name: &str, err: f64| -> Result<(), String> {
        count += 1;
        if err >= worst.1 {
            worst = (name.to_string(), err);
        }
        ensure(err < OP_TOLERANCE, || format!("{name}: relative error {err:.2e} exceeds {OP_TOLERANCE:e}"))
    };
    for (name, inputs, f) in op_cases() {
        let err = grad_check(|g, v| f(g, v).and_then(|y| reduce(g, y)), &inputs, STEP).unwrap_or(f64::INFINITY);
        note(name, err)?;
    }
    for (name, err) in layer_cases() {
        note(name, err)?;
    }
    note("tracking losses", loss_case())?;
    let e2e = end_to_end();
    ensure(e2e < END_TO_END_TOLERANCE, || format!("end-to-end relative error {e2e:.2e}"))?;
    Ok(format!(
        "{count} ops and layers below {OP_TOLERANCE:e} (worst {} {:.1e}), end-to-end {e2e:.1e} below {END_TO_END_TOLERANCE:e}",
        worst.0, worst.1
    ))
}
