//! The finite-difference check bodies, shared between the per-op suite and
//! the acceptance gate so both run the identical assertions.

use super::{fd_check, ramp, weighted_sum};
use tmkt::losses::{
    compose_loss, linear_cka, mag_loss, mrp_loss, rda_loss, tet_loss, LossGates, RdaRegularizer,
};
use tmkt::snn::{lif_step, StreamOutput};
use tmkt::tensor::{Graph, SpikeForward, Tensor, Var};

const H: f64 = 1e-5;
const OP_TOL: f64 = 1e-4;
const COMPOSITE_TOL: f64 = 1e-3;

pub fn binary_elementwise_ops() {
    let a = ramp(vec![2, 3], 0.3);
    let b = ramp(vec![2, 3], 1.1);
    // keep divisors away from zero
    let b_pos = Tensor::new(vec![2, 3], b.data.iter().map(|x| x + 2.0).collect());
    fd_check("add", &[a.clone(), b.clone()], H, OP_TOL, |g, v| {
        let r = g.add(v[0], v[1]).unwrap();
        weighted_sum(g, r)
    });
    fd_check("sub", &[a.clone(), b.clone()], H, OP_TOL, |g, v| {
        let r = g.sub(v[0], v[1]).unwrap();
        weighted_sum(g, r)
    });
    fd_check("mul", &[a.clone(), b.clone()], H, OP_TOL, |g, v| {
        let r = g.mul(v[0], v[1]).unwrap();
        weighted_sum(g, r)
    });
    fd_check("div", &[a, b_pos], H, OP_TOL, |g, v| {
        let r = g.div(v[0], v[1]).unwrap();
        weighted_sum(g, r)
    });
}

pub fn binary_ops_with_scalar_operand() {
    let a = ramp(vec![2, 3], 0.5);
    let s = Tensor::new(vec![1], vec![0.7]);
    for (name, op) in [
        ("add-scalar-rhs", 0usize),
        ("sub-scalar-rhs", 1),
        ("mul-scalar-rhs", 2),
        ("div-scalar-rhs", 3),
    ] {
        fd_check(name, &[a.clone(), s.clone()], H, OP_TOL, move |g, v| {
            let r = match op {
                0 => g.add(v[0], v[1]),
                1 => g.sub(v[0], v[1]),
                2 => g.mul(v[0], v[1]),
                _ => g.div(v[0], v[1]),
            }
            .unwrap();
            weighted_sum(g, r)
        });
    }
    // scalar on the left exercises the mirrored accumulation path
    fd_check("sub-scalar-lhs", &[s, a], H, OP_TOL, |g, v| {
        let r = g.sub(v[0], v[1]).unwrap();
        weighted_sum(g, r)
    });
}

pub fn constant_scalar_ops() {
    let a = ramp(vec![4], 0.2);
    let a_pos = Tensor::new(vec![4], a.data.iter().map(|x| x + 1.5).collect());
    fd_check("add_scalar", &[a.clone()], H, OP_TOL, |g, v| {
        let r = g.add_scalar(v[0], 0.31);
        weighted_sum(g, r)
    });
    fd_check("sub_scalar", &[a.clone()], H, OP_TOL, |g, v| {
        let r = g.sub_scalar(v[0], 1.7);
        weighted_sum(g, r)
    });
    fd_check("mul_scalar", &[a.clone()], H, OP_TOL, |g, v| {
        let r = g.mul_scalar(v[0], -2.5);
        weighted_sum(g, r)
    });
    fd_check("div_scalar", &[a.clone()], H, OP_TOL, |g, v| {
        let r = g.div_scalar(v[0], 3.0);
        weighted_sum(g, r)
    });
    fd_check("scalar_sub", &[a], H, OP_TOL, |g, v| {
        let r = g.scalar_sub(1.0, v[0]);
        weighted_sum(g, r)
    });
    fd_check("scalar_div", &[a_pos.clone()], H, OP_TOL, |g, v| {
        let r = g.scalar_div(2.0, v[0]);
        weighted_sum(g, r)
    });
    fd_check("powf", &[a_pos], H, OP_TOL, |g, v| {
        let r = g.powf(v[0], 2.5);
        weighted_sum(g, r)
    });
}

pub fn unary_ops() {
    let a = ramp(vec![2, 3], 0.9);
    let a_pos = Tensor::new(vec![2, 3], a.data.iter().map(|x| x + 1.5).collect());
    // keep relu inputs off its kink at zero
    let a_off = Tensor::new(
        vec![2, 3],
        a.data
            .iter()
            .map(|&x| if x.abs() < 0.2 { x + 0.4 } else { x })
            .collect(),
    );
    fd_check("neg", &[a.clone()], H, OP_TOL, |g, v| {
        let r = g.neg(v[0]);
        weighted_sum(g, r)
    });
    fd_check("exp", &[a.clone()], H, OP_TOL, |g, v| {
        let r = g.exp(v[0]);
        weighted_sum(g, r)
    });
    fd_check("log", &[a_pos], H, OP_TOL, |g, v| {
        let r = g.log(v[0]);
        weighted_sum(g, r)
    });
    fd_check("sigmoid", &[a], H, OP_TOL, |g, v| {
        let r = g.sigmoid(v[0]);
        weighted_sum(g, r)
    });
    fd_check("relu", &[a_off], H, OP_TOL, |g, v| {
        let r = g.relu(v[0]);
        weighted_sum(g, r)
    });
}

pub fn linear_algebra_ops() {
    let a = ramp(vec![2, 3], 0.1);
    let b = ramp(vec![3, 4], 0.8);
    let bias = ramp(vec![3], 1.7);
    fd_check("matmul", &[a.clone(), b], H, OP_TOL, |g, v| {
        let r = g.matmul(v[0], v[1]).unwrap();
        weighted_sum(g, r)
    });
    fd_check("transpose", &[a.clone()], H, OP_TOL, |g, v| {
        let r = g.transpose(v[0]).unwrap();
        weighted_sum(g, r)
    });
    fd_check("add_bias", &[a.clone(), bias], H, OP_TOL, |g, v| {
        let r = g.add_bias(v[0], v[1]).unwrap();
        weighted_sum(g, r)
    });
    fd_check("reshape", &[a.clone()], H, OP_TOL, |g, v| {
        let r = g.reshape(v[0], vec![3, 2]).unwrap();
        weighted_sum(g, r)
    });
    fd_check("frobenius_norm", &[a], H, OP_TOL, |g, v| {
        g.frobenius_norm(v[0])
    });
}

pub fn conv2d_stride_and_padding() {
    let x = ramp(vec![2, 2, 4, 4], 0.4);
    let w = ramp(vec![3, 2, 3, 3], 1.3);
    fd_check("conv2d s1 p1", &[x.clone(), w.clone()], H, OP_TOL, |g, v| {
        let r = g.conv2d(v[0], v[1], 1, 1).unwrap();
        weighted_sum(g, r)
    });
    fd_check("conv2d s2 p1", &[x.clone(), w.clone()], H, OP_TOL, |g, v| {
        let r = g.conv2d(v[0], v[1], 2, 1).unwrap();
        weighted_sum(g, r)
    });
    fd_check("conv2d s1 p0", &[x, w], H, OP_TOL, |g, v| {
        let r = g.conv2d(v[0], v[1], 1, 0).unwrap();
        weighted_sum(g, r)
    });
}

pub fn reduction_ops() {
    let a = ramp(vec![3, 4], 0.6);
    fd_check("sum_all", &[a.clone()], H, OP_TOL, |g, v| g.sum_all(v[0]));
    fd_check("mean_all", &[a.clone()], H, OP_TOL, |g, v| g.mean_all(v[0]));
    for axis in 0..2 {
        fd_check(&format!("sum_axis {axis}"), &[a.clone()], H, OP_TOL, move |g, v| {
            let r = g.sum_axis(v[0], axis).unwrap();
            weighted_sum(g, r)
        });
        fd_check(&format!("mean_axis {axis}"), &[a.clone()], H, OP_TOL, move |g, v| {
            let r = g.mean_axis(v[0], axis).unwrap();
            weighted_sum(g, r)
        });
    }
    // distinct entries keep the max selection stable under perturbation
    let distinct = Tensor::new(vec![2, 3], vec![3.0, 1.0, 2.0, -1.0, 0.5, -2.0]);
    for axis in 0..2 {
        fd_check(&format!("max_axis {axis}"), &[distinct.clone()], H, OP_TOL, move |g, v| {
            let r = g.max_axis(v[0], axis).unwrap();
            weighted_sum(g, r)
        });
    }
}

pub fn selection_and_classification_ops() {
    let a = ramp(vec![4], 0.25);
    fd_check("select", &[a], H, OP_TOL, |g, v| g.select(v[0], 2).unwrap());
    let logits = ramp(vec![3, 5], 0.7);
    fd_check("cross_entropy", &[logits], H, OP_TOL, |g, v| {
        g.cross_entropy(v[0], &[2, 0, 4]).unwrap()
    });
}

pub fn spike_ramp_profile() {
    // width 1: elements sit inside the window or clearly outside it, away
    // from the kinks at +/-1
    let v = Tensor::new(vec![5], vec![-2.0, -0.6, 0.0, 0.6, 1.5]);
    fd_check("spike ramp", &[v], H, OP_TOL, |g, vars| {
        let r = g.spike(vars[0], 1.0, SpikeForward::Ramp);
        weighted_sum(g, r)
    });
}

pub fn loss_functions() {
    let l0 = ramp(vec![3, 4], 0.2);
    let l1 = ramp(vec![3, 4], 1.9);
    fd_check("tet_loss", &[l0.clone(), l1.clone()], H, OP_TOL, |g, v| {
        tet_loss(g, v, &[0, 3, 1]).unwrap()
    });
    let fa = ramp(vec![4, 3], 0.45);
    let fb = ramp(vec![4, 3], 2.2);
    fd_check("linear_cka", &[fa.clone(), fb.clone()], H, OP_TOL, |g, v| {
        linear_cka(g, v[0], v[1]).unwrap()
    });
    let theta = Tensor::new(vec![2], vec![0.2, -0.4]);
    let fa2 = ramp(vec![4, 3], 1.0);
    let fb2 = ramp(vec![4, 3], 2.7);
    let el0 = ramp(vec![4, 4], 0.65);
    let el1 = ramp(vec![4, 4], 1.55);
    for reg in [RdaRegularizer::PerStepCe, RdaRegularizer::ConstantTet] {
        fd_check(
            &format!("rda_loss {reg}"),
            &[theta.clone(), fa.clone(), fb.clone(), fa2.clone(), fb2.clone(), el0.clone(), el1.clone()],
            H,
            OP_TOL,
            move |g, v| {
                rda_loss(g, v[0], &[v[1], v[3]], &[v[2], v[4]], &[v[5], v[6]], &[0, 3, 1, 2], reg)
                    .unwrap()
            },
        );
    }
    let m0 = ramp(vec![3, 2], 0.55);
    let m1 = ramp(vec![3, 2], 1.35);
    fd_check("mag_loss", &[m0, m1], H, OP_TOL, |g, v| {
        mag_loss(g, v, &[vec![1, 1, 0], vec![0, 1, 0]]).unwrap()
    });
    let r0 = ramp(vec![3, 1], 0.15);
    let r1 = ramp(vec![3, 1], 1.85);
    fd_check("mrp_loss", &[r0, r1], H, OP_TOL, |g, v| {
        mrp_loss(g, v, &[0.25, 0.5, 1.0]).unwrap()
    });
}

/// Two-step, two-layer spiking network built from the same primitives the
/// trainer uses, pushed through the full gated objective.
#[allow(clippy::too_many_arguments)]
fn mini_stream(
    g: &mut Graph<f64>,
    frames: &[Tensor<f64>],
    conv_w: Var,
    fc_w: Var,
    heads: &[(Var, Var); 4],
    tau: f64,
    v_th: f64,
    width: f64,
) -> StreamOutput {
    let t_len = frames.len();
    let n = frames[0].shape[0];
    let mut out = StreamOutput {
        features: vec![],
        potentials: vec![],
        class_mixed: vec![],
        class_event: vec![],
        mag: vec![],
        mrp: vec![],
    };
    let mut conv_carry: Option<Var> = None;
    let mut fc_carry: Option<Var> = None;
    for f in frames {
        let x = g.constant(f.clone());
        let pre = g.conv2d(x, conv_w, 2, 1).unwrap();
        let cc = conv_carry
            .unwrap_or_else(|| g.constant(Tensor::zeros(g.value(pre).shape.clone())));
        let step = lif_step(g, cc, pre, tau, v_th, width, SpikeForward::Ramp).unwrap();
        conv_carry = Some(step.carry);
        let flat_dim: usize = g.value(step.spike).shape[1..].iter().product();
        let flat = g.reshape(step.spike, vec![n, flat_dim]).unwrap();
        let fc_pre = g.matmul(flat, fc_w).unwrap();
        let fcc = fc_carry
            .unwrap_or_else(|| g.constant(Tensor::zeros(g.value(fc_pre).shape.clone())));
        let fc_step = lif_step(g, fcc, fc_pre, tau, v_th, width, SpikeForward::Ramp).unwrap();
        fc_carry = Some(fc_step.carry);
        let feat = fc_step.spike;
        out.features.push(feat);
        out.potentials.push(fc_step.carry);
        let head = |g: &mut Graph<f64>, (w, b): (Var, Var)| {
            let z = g.matmul(feat, w).unwrap();
            g.add_bias(z, b).unwrap()
        };
        out.class_mixed.push(head(g, heads[0]));
        out.class_event.push(head(g, heads[1]));
        out.mag.push(head(g, heads[2]));
        out.mrp.push(head(g, heads[3]));
    }
    let _ = t_len;
    out
}

pub fn composite_network_through_total_objective() {
    // width 4 keeps every membrane well inside the linear spike window, so
    // there is no kink for the finite differences to trip over
    let (tau, v_th, width) = (0.5, 0.3, 4.0);
    let t_len = 2;
    let frames_mixed: Vec<Tensor<f64>> =
        (0..t_len).map(|t| ramp(vec![2, 1, 5, 5], 0.3 + t as f64)).collect();
    let frames_event: Vec<Tensor<f64>> =
        (0..t_len).map(|t| ramp(vec![2, 1, 5, 5], 1.7 + t as f64)).collect();

    let scale = |t: Tensor<f64>, s: f64| {
        Tensor::new(t.shape.clone(), t.data.iter().map(|x| x * s).collect())
    };
    let inputs = vec![
        scale(ramp(vec![3, 1, 3, 3], 0.11), 0.5), // conv w
        scale(ramp(vec![27, 4], 0.71), 0.4),      // fc w
        scale(ramp(vec![4, 3], 1.21), 0.6),       // mixed head w
        ramp(vec![3], 0.9),                       // mixed head b
        scale(ramp(vec![4, 3], 2.01), 0.6),       // event head w
        ramp(vec![3], 1.4),                       // event head b
        scale(ramp(vec![4, 2], 0.31), 0.6),       // mag head w
        ramp(vec![2], 2.2),                       // mag head b
        scale(ramp(vec![4, 1], 1.61), 0.6),       // mrp head w
        ramp(vec![1], 0.5),                       // mrp head b
        Tensor::new(vec![2], vec![0.3, -0.2]),    // theta
    ];

    fd_check("composite objective", &inputs, H, COMPOSITE_TOL, |g, v| {
        let heads = [(v[2], v[3]), (v[4], v[5]), (v[6], v[7]), (v[8], v[9])];
        let mixed = mini_stream(g, &frames_mixed, v[0], v[1], &heads, tau, v_th, width);
        let event = mini_stream(g, &frames_event, v[0], v[1], &heads, tau, v_th, width);
        let gates = LossGates {
            tsm: true,
            mag: true,
            mrp: true,
            rda: true,
        };
        let bd = compose_loss(
            g,
            Some(&mixed),
            &event,
            Some(v[10]),
            &[0, 2],
            &[vec![1, 1], vec![0, 1]],
            &[0.5, 1.0],
            gates,
            0.5,
            RdaRegularizer::PerStepCe,
        )
        .unwrap();
        bd.total
    });
}

pub const ALL: &[(&str, fn())] = &[
    ("binary_elementwise_ops", binary_elementwise_ops as fn()),
    ("binary_ops_with_scalar_operand", binary_ops_with_scalar_operand as fn()),
    ("constant_scalar_ops", constant_scalar_ops as fn()),
    ("unary_ops", unary_ops as fn()),
    ("linear_algebra_ops", linear_algebra_ops as fn()),
    ("conv2d_stride_and_padding", conv2d_stride_and_padding as fn()),
    ("reduction_ops", reduction_ops as fn()),
    ("selection_and_classification_ops", selection_and_classification_ops as fn()),
    ("spike_ramp_profile", spike_ramp_profile as fn()),
    ("loss_functions", loss_functions as fn()),
    ("composite_network_through_total_objective", composite_network_through_total_objective as fn()),
];
