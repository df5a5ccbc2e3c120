//! Leaky integrate-and-fire dynamics and the two reference architectures.
//!
//! Membrane update per step, with `tau` leaking the carried potential:
//! `u_t = tau * u_carry + I_t`, spike `s_t = H(u_t - v_th)` (a potential
//! exactly at threshold fires), hard reset `u_next = u_t * (1 - s_t)`.
//! The step nonlinearity backpropagates through the rectangular surrogate.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, SpikeForward, Tensor, Var};

/// Neuron constants shared by every spiking layer of a network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LIFParams {
    /// membrane leak factor applied to the carried potential
    pub tau: f32,
    /// firing threshold
    pub v_th: f32,
    /// half-width of the rectangular surrogate window
    pub surrogate_width: f32,
}

impl Default for LIFParams {
    fn default() -> Self {
        LIFParams {
            tau: 0.5,
            v_th: 1.0,
            surrogate_width: 1.0,
        }
    }
}

impl LIFParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::BadField("tau"));
        }
        if !(self.v_th > 0.0) {
            return Err(Error::BadField("v_th"));
        }
        if !(self.surrogate_width > 0.0) {
            return Err(Error::BadField("surrogate_width"));
        }
        Ok(())
    }
}

/// Graph nodes produced by one membrane update.
pub struct LifStep {
    /// charged potential before reset
    pub u: Var,
    /// binary spike output
    pub spike: Var,
    /// potential carried to the next step
    pub carry: Var,
}

/// One LIF update on the tape: charge, fire, reset.
pub fn lif_step<F: Scalar>(
    g: &mut Graph<F>,
    u_carry: Var,
    input: Var,
    tau: F,
    v_th: F,
    width: F,
    forward: SpikeForward,
) -> Result<LifStep> {
    let decayed = g.mul_scalar(u_carry, tau);
    let u = g.add(decayed, input)?;
    let v = g.sub_scalar(u, v_th);
    let spike = g.spike(v, width, forward);
    let keep = g.scalar_sub(F::ONE, spike);
    let carry = g.mul(u, keep)?;
    Ok(LifStep { u, spike, carry })
}

/// Network topology selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    ScnnSmall,
    VggLite,
}

impl Arch {
    /// Penultimate feature width this profile ships with.
    pub fn default_hidden(&self) -> usize {
        match self {
            Arch::ScnnSmall => 64,
            Arch::VggLite => 128,
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scnn_small" => Ok(Arch::ScnnSmall),
            "vgg_lite" => Ok(Arch::VggLite),
            other => Err(Error::UnknownArch(other.to_string())),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Arch::ScnnSmall => write!(f, "scnn_small"),
            Arch::VggLite => write!(f, "vgg_lite"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NetworkSpec {
    pub arch: Arch,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub hidden: usize,
    pub time_steps: usize,
    pub lif: LIFParams,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        self.lif.validate()?;
        if self.classes < 2 {
            return Err(Error::BadField("classes"));
        }
        if self.hidden == 0 {
            return Err(Error::BadField("hidden"));
        }
        if self.time_steps == 0 {
            return Err(Error::BadField("time_steps"));
        }
        if self.in_channels == 0 {
            return Err(Error::BadField("in_channels"));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::BadField("input size"));
        }
        Ok(())
    }
}

fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Conv stack description per architecture: (out_channels, stride).
/// All kernels are 3x3 with padding 1.
fn conv_plan(arch: Arch) -> &'static [(usize, usize)] {
    match arch {
        Arch::ScnnSmall => &[(8, 2), (16, 2)],
        Arch::VggLite => &[(16, 1), (16, 2), (32, 1), (32, 2)],
    }
}

/// A spiking classifier with one feature trunk and four linear read-outs:
/// class logits for the mixed stream, class logits for the event stream,
/// a two-way source-modality head, and a scalar mix-ratio head.
pub struct Network {
    pub spec: NetworkSpec,
    /// named tensors in a stable build order; the checkpoint and optimizer
    /// both rely on this ordering
    pub params: Vec<(String, Tensor<f32>)>,
    flat_dim: usize,
}

/// Graph handles for every parameter, installed once per tape so both
/// forward streams share the same weight nodes.
pub struct ParamVars {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        self.vars[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    pub fn ordered(&self) -> &[Var] {
        &self.vars
    }
}

/// Per-step outputs of one forward pass over a frame sequence.
pub struct StreamOutput {
    /// penultimate spike features feeding the read-outs, `[N, hidden]`
    pub features: Vec<Var>,
    /// penultimate post-reset membrane potentials, `[N, hidden]`; real-valued
    /// and sub-threshold by construction, used for feature alignment
    pub potentials: Vec<Var>,
    /// class logits from the mixed-stream head, `[N, classes]`
    pub class_mixed: Vec<Var>,
    /// class logits from the event-stream head, `[N, classes]`
    pub class_event: Vec<Var>,
    /// source-modality logits, `[N, 2]` (class 1 = appearance)
    pub mag: Vec<Var>,
    /// raw mix-ratio read-out before the sigmoid, `[N, 1]`
    pub mrp: Vec<Var>,
}

/// Init gain for convolution and hidden layers, calibrated so that the
/// example workloads start with sparse but live firing in every layer.
const TRUNK_INIT_GAIN: f32 = 4.0;

pub fn build_network<R: Rng>(spec: &NetworkSpec, rng: &mut R) -> Result<Network> {
    spec.validate()?;
    let mut params: Vec<(String, Tensor<f32>)> = Vec::new();

    let uniform = |shape: Vec<usize>, fan_in: usize, gain: f32, rng: &mut R| {
        let bound = gain * (6.0 / fan_in as f64).sqrt() as f32;
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor::new(shape, data).with_grad()
    };

    // Spiking layers need a hotter start than sigmoid-era scaling gives:
    // with unit-interval inputs and a fixed firing threshold, plain Xavier
    // leaves every membrane far below threshold, no layer ever spikes, and
    // the rectangular surrogate window starves the whole stack of gradient.
    // The trunk gain lifts initial membranes into the active band around
    // the threshold; read-out heads stay at the classic scale.
    let trunk = TRUNK_INIT_GAIN;

    let mut c_in = spec.in_channels;
    let (mut h, mut w) = (spec.height, spec.width);
    for (i, &(c_out, stride)) in conv_plan(spec.arch).iter().enumerate() {
        let name = format!("conv{}.w", i + 1);
        let t = uniform(vec![c_out, c_in, 3, 3], c_in * 9, trunk, rng);
        params.push((name, t));
        h = conv_out(h, 3, stride, 1);
        w = conv_out(w, 3, stride, 1);
        c_in = c_out;
    }
    let flat_dim = c_in * h * w;
    if flat_dim == 0 {
        return Err(Error::BadField("input size"));
    }
    params.push(("fc.w".into(), uniform(vec![flat_dim, spec.hidden], flat_dim, trunk, rng)));

    let head = |name: &str, out: usize, rng: &mut R, params: &mut Vec<(String, Tensor<f32>)>| {
        let w = uniform(vec![spec.hidden, out], spec.hidden, 1.0, rng);
        params.push((format!("{name}.w"), w));
        params.push((format!("{name}.b"), Tensor::zeros(vec![out]).with_grad()));
    };
    head("head_mixed", spec.classes, rng, &mut params);
    head("head_event", spec.classes, rng, &mut params);
    head("head_mag", 2, rng, &mut params);
    head("head_mrp", 1, rng, &mut params);

    Ok(Network {
        spec: spec.clone(),
        params,
        flat_dim,
    })
}

impl Network {
    /// Install every parameter on the tape.
    pub fn bind(&self, g: &mut Graph<f32>) -> ParamVars {
        let mut vars = Vec::with_capacity(self.params.len());
        let mut index = HashMap::with_capacity(self.params.len());
        for (i, (name, t)) in self.params.iter().enumerate() {
            vars.push(g.param(t.clone()));
            index.insert(name.clone(), i);
        }
        ParamVars { vars, index }
    }

    /// Copy gradients accumulated on the tape back into the stored tensors.
    pub fn pull_grads(&mut self, g: &Graph<f32>, vars: &ParamVars) {
        for ((_, t), &v) in self.params.iter_mut().zip(vars.ordered()) {
            let src = g.grad(v).expect("bound parameter lost its gradient");
            match &mut t.grad {
                Some(dst) => {
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                None => t.grad = Some(src.to_vec()),
            }
        }
    }

    /// Run the trunk plus all four heads over a `time_steps`-long frame
    /// sequence. Each element of `frames` is an `[N, C, H, W]` node.
    pub fn forward(
        &self,
        g: &mut Graph<f32>,
        vars: &ParamVars,
        frames: &[Var],
    ) -> Result<StreamOutput> {
        let t_len = self.spec.time_steps;
        if frames.len() != t_len {
            return Err(Error::StepCountMismatch {
                expected: t_len,
                got: frames.len(),
            });
        }
        let first = g.value(frames[0]).shape.clone();
        if first.len() != 4
            || first[1] != self.spec.in_channels
            || first[2] != self.spec.height
            || first[3] != self.spec.width
        {
            return Err(Error::ShapeMismatch {
                op: "network input",
                lhs: first,
                rhs: vec![
                    0,
                    self.spec.in_channels,
                    self.spec.height,
                    self.spec.width,
                ],
            });
        }
        let n = first[0];
        let lif = self.spec.lif;
        let plan = conv_plan(self.spec.arch);

        // membrane carry per spiking site: one per conv, one for the fc
        let mut carries: Vec<Option<Var>> = vec![None; plan.len() + 1];
        let mut out = StreamOutput {
            features: Vec::with_capacity(t_len),
            potentials: Vec::with_capacity(t_len),
            class_mixed: Vec::with_capacity(t_len),
            class_event: Vec::with_capacity(t_len),
            mag: Vec::with_capacity(t_len),
            mrp: Vec::with_capacity(t_len),
        };

        for (t, &frame) in frames.iter().enumerate() {
            let shape = &g.value(frame).shape;
            if shape[0] != n || shape[1..] != first[1..] {
                return Err(Error::ShapeMismatch {
                    op: "network input",
                    lhs: shape.clone(),
                    rhs: first.clone(),
                });
            }
            let _ = t;
            let mut x = frame;
            for (site, &(_, stride)) in plan.iter().enumerate() {
                let w = vars.get(&format!("conv{}.w", site + 1));
                let z = g.conv2d(x, w, stride, 1)?;
                let carry = match carries[site] {
                    Some(c) => c,
                    None => g.constant(Tensor::zeros(g.value(z).shape.clone())),
                };
                let step = lif_step(
                    g,
                    carry,
                    z,
                    lif.tau,
                    lif.v_th,
                    lif.surrogate_width,
                    SpikeForward::Threshold,
                )?;
                carries[site] = Some(step.carry);
                x = step.spike;
            }
            let flat = g.reshape(x, vec![n, self.flat_dim])?;
            let z = g.matmul(flat, vars.get("fc.w"))?;
            let site = plan.len();
            let carry = match carries[site] {
                Some(c) => c,
                None => g.constant(Tensor::zeros(vec![n, self.spec.hidden])),
            };
            let step = lif_step(
                g,
                carry,
                z,
                lif.tau,
                lif.v_th,
                lif.surrogate_width,
                SpikeForward::Threshold,
            )?;
            carries[site] = Some(step.carry);
            let feat = step.spike;

            let read_out = |g: &mut Graph<f32>, head: &str| -> Result<Var> {
                let z = g.matmul(feat, vars.get(&format!("{head}.w")))?;
                g.add_bias(z, vars.get(&format!("{head}.b")))
            };
            let cm = read_out(g, "head_mixed")?;
            let ce = read_out(g, "head_event")?;
            let mg = read_out(g, "head_mag")?;
            let mr = read_out(g, "head_mrp")?;

            out.features.push(feat);
            out.potentials.push(step.carry);
            out.class_mixed.push(cm);
            out.class_event.push(ce);
            out.mag.push(mg);
            out.mrp.push(mr);
        }
        Ok(out)
    }

    /// Human-readable parameter inventory.
    pub fn manifest(&self) -> String {
        let mut s = String::new();
        let mut total = 0usize;
        for (name, t) in &self.params {
            let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            s.push_str(&format!("{name} [{}] {}\n", dims.join("x"), t.numel()));
            total += t.numel();
        }
        s.push_str(&format!("total {total}\n"));
        s
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in &mut self.params {
            t.zero_grad();
        }
    }

    /// Replace weights with a loaded parameter list; names and shapes must
    /// match the built network exactly.
    pub fn load_params(&mut self, loaded: Vec<(String, Tensor<f32>)>) -> Result<()> {
        if loaded.len() != self.params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "expected {} parameters, file has {}",
                self.params.len(),
                loaded.len()
            )));
        }
        for ((name, t), (lname, lt)) in self.params.iter_mut().zip(loaded) {
            if *name != lname {
                return Err(Error::CheckpointMismatch(format!(
                    "parameter order mismatch: expected {name}, file has {lname}"
                )));
            }
            if t.shape != lt.shape {
                return Err(Error::CheckpointMismatch(format!(
                    "shape mismatch for {name}: {:?} vs {:?}",
                    t.shape, lt.shape
                )));
            }
            t.data = lt.data;
        }
        Ok(())
    }
}
