//! Training objectives: temporal classification, feature alignment, and
//! the two mixing-supervision heads.
//!
//! The composite loss is assembled from independently gated arms so
//! ablations are configuration changes, not code paths: a mixed-stream
//! classification term, a gated alignment term (or a plain event-stream
//! classification term when alignment is off), a per-step source-modality
//! term, and a mix-ratio regression term.

use crate::error::{Error, Result};
use crate::snn::StreamOutput;
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Mean over time steps of the per-step softmax cross-entropy.
pub fn tet_loss<F: Scalar>(g: &mut Graph<F>, logits: &[Var], targets: &[usize]) -> Result<Var> {
    if logits.is_empty() {
        return Err(Error::EmptyInput("tet_loss"));
    }
    let mut acc = g.cross_entropy(logits[0], targets)?;
    for &l in &logits[1..] {
        let ce = g.cross_entropy(l, targets)?;
        acc = g.add(acc, ce)?;
    }
    Ok(g.div_scalar(acc, F::from_f64(logits.len() as f64)))
}

/// Linear centered-kernel alignment between two `[n, d]` feature matrices.
///
/// Columns are mean-centered, then
/// `cka = |B'ᵀA'|²_F / (|A'ᵀA'|_F |B'ᵀB'|_F)`.
/// Invariant to isotropic scaling and orthogonal rotation of either input;
/// returns a constant 0 when either centered matrix vanishes (a single row,
/// or features identical across the batch).
pub fn linear_cka<F: Scalar>(g: &mut Graph<F>, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (g.value(a).shape.clone(), g.value(b).shape.clone());
    if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
        return Err(Error::ShapeMismatch {
            op: "linear_cka",
            lhs: sa,
            rhs: sb,
        });
    }
    let center = |g: &mut Graph<F>, x: Var| -> Result<Var> {
        let m = g.mean_axis(x, 0)?;
        let neg = g.neg(m);
        g.add_bias(x, neg)
    };
    let a_c = center(g, a)?;
    let b_c = center(g, b)?;
    let degenerate = |g: &Graph<F>, v: Var| g.value(v).data.iter().all(|&x| x == F::ZERO);
    if degenerate(g, a_c) || degenerate(g, b_c) {
        return Ok(g.scalar_const(F::ZERO));
    }
    let b_t = g.transpose(b_c)?;
    let cross = g.matmul(b_t, a_c)?;
    let cross_sq = g.mul(cross, cross)?;
    let num = g.sum_all(cross_sq);
    let a_t = g.transpose(a_c)?;
    let gram_a = g.matmul(a_t, a_c)?;
    let fa = g.frobenius_norm(gram_a);
    let b_t2 = g.transpose(b_c)?;
    let gram_b = g.matmul(b_t2, b_c)?;
    let fb = g.frobenius_norm(gram_b);
    let denom = g.mul(fa, fb)?;
    g.div(num, denom)
}

/// What balances the alignment pressure inside the gated term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RdaRegularizer {
    /// that step's own event-stream cross-entropy (default)
    PerStepCe,
    /// the whole-sequence event-stream loss, constant across steps
    ConstantTet,
}

impl std::str::FromStr for RdaRegularizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_step_ce" => Ok(RdaRegularizer::PerStepCe),
            "constant_tet" => Ok(RdaRegularizer::ConstantTet),
            _ => Err(Error::BadField("rda_regularizer_mode")),
        }
    }
}

/// Gated domain alignment over the per-step penultimate features.
///
/// Each step blends `1 - cka` against a classification regularizer with a
/// learned gate `sigmoid(theta_t)`; the result is averaged over steps.
/// `theta` is the only place those gates appear, so they receive gradient
/// exclusively from this term.
pub fn rda_loss<F: Scalar>(
    g: &mut Graph<F>,
    theta: Var,
    feats_mixed: &[Var],
    feats_event: &[Var],
    event_logits: &[Var],
    targets: &[usize],
    reg: RdaRegularizer,
) -> Result<Var> {
    let t_len = feats_mixed.len();
    if t_len == 0 {
        return Err(Error::EmptyInput("rda_loss"));
    }
    if feats_event.len() != t_len || event_logits.len() != t_len {
        return Err(Error::StepCountMismatch {
            expected: t_len,
            got: feats_event.len().min(event_logits.len()),
        });
    }
    if g.value(theta).shape != vec![t_len] {
        return Err(Error::ShapeMismatch {
            op: "rda_loss theta",
            lhs: g.value(theta).shape.clone(),
            rhs: vec![t_len],
        });
    }
    let constant_reg = match reg {
        RdaRegularizer::ConstantTet => Some(tet_loss(g, event_logits, targets)?),
        RdaRegularizer::PerStepCe => None,
    };
    let mut acc: Option<Var> = None;
    for t in 0..t_len {
        let theta_t = g.select(theta, t)?;
        let gate = g.sigmoid(theta_t);
        let cka = linear_cka(g, feats_mixed[t], feats_event[t])?;
        let align = g.scalar_sub(F::ONE, cka);
        let reg_t = match constant_reg {
            Some(v) => v,
            None => g.cross_entropy(event_logits[t], targets)?,
        };
        let open = g.mul(gate, align)?;
        let closed_gate = g.scalar_sub(F::ONE, gate);
        let closed = g.mul(closed_gate, reg_t)?;
        let term = g.add(open, closed)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(g.div_scalar(acc.unwrap(), F::from_f64(t_len as f64)))
}

/// Per-step source-modality supervision: mean over steps of the two-way
/// cross-entropy against each sample's appearance/event step label.
pub fn mag_loss<F: Scalar>(
    g: &mut Graph<F>,
    mag_logits: &[Var],
    step_targets: &[Vec<usize>],
) -> Result<Var> {
    if mag_logits.is_empty() {
        return Err(Error::EmptyInput("mag_loss"));
    }
    if step_targets.len() != mag_logits.len() {
        return Err(Error::StepCountMismatch {
            expected: mag_logits.len(),
            got: step_targets.len(),
        });
    }
    let mut acc: Option<Var> = None;
    for (t, &l) in mag_logits.iter().enumerate() {
        let ce = g.cross_entropy(l, &step_targets[t])?;
        acc = Some(match acc {
            Some(a) => g.add(a, ce)?,
            None => ce,
        });
    }
    Ok(g.div_scalar(acc.unwrap(), F::from_f64(mag_logits.len() as f64)))
}

/// Mix-ratio regression: squared error between the time-averaged sigmoid
/// read-out and each sample's appearance fraction.
pub fn mrp_loss<F: Scalar>(g: &mut Graph<F>, mrp_raw: &[Var], fractions: &[F]) -> Result<Var> {
    if mrp_raw.is_empty() {
        return Err(Error::EmptyInput("mrp_loss"));
    }
    let n = fractions.len();
    for &r in mrp_raw {
        let s = &g.value(r).shape;
        if *s != vec![n, 1] {
            return Err(Error::ShapeMismatch {
                op: "mrp_loss",
                lhs: s.clone(),
                rhs: vec![n, 1],
            });
        }
    }
    let mut acc: Option<Var> = None;
    for &r in mrp_raw {
        let s = g.sigmoid(r);
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    let zhat = g.div_scalar(acc.unwrap(), F::from_f64(mrp_raw.len() as f64));
    let target = g.constant(Tensor::new(vec![n, 1], fractions.to_vec()));
    let diff = g.sub(zhat, target)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean_all(sq))
}

impl std::fmt::Display for RdaRegularizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            RdaRegularizer::PerStepCe => "per_step_ce",
            RdaRegularizer::ConstantTet => "constant_tet",
        };
        write!(f, "{s}")
    }
}

/// Which loss arms participate in the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossGates {
    pub tsm: bool,
    pub mag: bool,
    pub mrp: bool,
    pub rda: bool,
}

/// Scalar values of each computed arm plus the node to backpropagate.
pub struct LossBreakdown<F> {
    pub total: Var,
    pub total_value: F,
    pub cls_mixed: Option<F>,
    pub cls_event: Option<F>,
    pub rda: Option<F>,
    pub mag: Option<F>,
    pub mrp: Option<F>,
}

fn check_finite<F: Scalar>(g: &Graph<F>, v: Var, component: &'static str) -> Result<F> {
    let x = g.value(v).item();
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFiniteLoss { component })
    }
}

/// Assemble the training objective for one batch.
///
/// With every gate off this is plain event-stream temporal classification.
/// The alignment arm replaces the plain event term and is weighted by
/// `lambda`; the mixing arms require the mixed stream.
#[allow(clippy::too_many_arguments)]
pub fn compose_loss<F: Scalar>(
    g: &mut Graph<F>,
    mixed: Option<&StreamOutput>,
    event: &StreamOutput,
    theta: Option<Var>,
    targets: &[usize],
    step_targets: &[Vec<usize>],
    fractions: &[F],
    gates: LossGates,
    lambda: F,
    reg: RdaRegularizer,
) -> Result<LossBreakdown<F>> {
    let need_mixed = || mixed.ok_or(Error::BadField("mixed stream"));
    let mut terms: Vec<Var> = Vec::new();
    let (mut cls_mixed, mut cls_event, mut rda, mut mag, mut mrp) = (None, None, None, None, None);

    if gates.tsm {
        let m = need_mixed()?;
        let v = tet_loss(g, &m.class_mixed, targets)?;
        cls_mixed = Some(check_finite(g, v, "cls_mixed")?);
        terms.push(v);
    }
    if gates.rda {
        let m = need_mixed()?;
        let th = theta.ok_or(Error::BadField("theta"))?;
        let v = rda_loss(
            g,
            th,
            &m.potentials,
            &event.potentials,
            &event.class_event,
            targets,
            reg,
        )?;
        rda = Some(check_finite(g, v, "rda")?);
        terms.push(g.mul_scalar(v, lambda));
    } else {
        let v = tet_loss(g, &event.class_event, targets)?;
        cls_event = Some(check_finite(g, v, "cls_event")?);
        terms.push(v);
    }
    if gates.mag {
        let m = need_mixed()?;
        let v = mag_loss(g, &m.mag, step_targets)?;
        mag = Some(check_finite(g, v, "mag")?);
        terms.push(v);
    }
    if gates.mrp {
        let m = need_mixed()?;
        let v = mrp_loss(g, &m.mrp, fractions)?;
        mrp = Some(check_finite(g, v, "mrp")?);
        terms.push(v);
    }

    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    let total_value = check_finite(g, total, "total")?;
    Ok(LossBreakdown {
        total,
        total_value,
        cls_mixed,
        cls_event,
        rda,
        mag,
        mrp,
    })
}
