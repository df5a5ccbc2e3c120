//! Dual-stream training loop, evaluation, and model checkpointing.
//!
//! Every batch pairs each event sequence with a same-class appearance
//! sequence, splices the two at a sampled replacement point, and runs both
//! the spliced stream and the raw event stream through the shared trunk.
//! Only the event head is evaluated; the other arms exist to shape the
//! representation it reads from.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::data::{load_dataset, make_pair_batches, stack_step, Dataset};
use crate::error::{Error, Result};
use crate::losses::compose_loss;
use crate::mixup::{
    fixed_replacement_point, mix_sequences, sample_replacement_point, schedule_ratio,
    solve_replacement_prob, MixupPolicy,
};
use crate::snn::{build_network, Arch, LIFParams, Network, NetworkSpec, StreamOutput};
use crate::tensor::{
    cosine_lr, load_checkpoint, save_checkpoint, Graph, Optimizer, Tensor, Var,
};

/// Name of the pseudo-parameter that makes a saved model self-describing.
const META_KEY: &str = "meta.spec";
/// Name under which the per-step gate parameters are saved.
const THETA_KEY: &str = "theta";

/// One epoch's logged state. Loss fields are `None` when the matching arm
/// is switched off, so a log line also documents the run's shape.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub cls_mixed: Option<f32>,
    pub cls_event: Option<f32>,
    pub rda: Option<f32>,
    pub mag: Option<f32>,
    pub mrp: Option<f32>,
    pub total: f32,
    pub train_acc: f32,
    pub test_acc: f32,
    pub mean_gate: Option<f32>,
    /// seconds spent in the epoch; reported on stdout but kept out of the
    /// log file so reruns of the same seed stay byte-identical
    pub wall_secs: f64,
}

fn fmt_opt(x: Option<f32>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

fn parse_opt(field: &str) -> Result<Option<f32>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse()
        .map(Some)
        .map_err(|_| Error::Config(format!("bad metrics field: {field}")))
}

impl EpochMetrics {
    pub fn csv_header() -> &'static str {
        "epoch,cls_mixed,cls_event,rda,mag,mrp,total,train_acc,test_acc,mean_gate"
    }

    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.6},{:.6},{:.6},{}",
            self.epoch,
            fmt_opt(self.cls_mixed),
            fmt_opt(self.cls_event),
            fmt_opt(self.rda),
            fmt_opt(self.mag),
            fmt_opt(self.mrp),
            self.total,
            self.train_acc,
            self.test_acc,
            fmt_opt(self.mean_gate),
        )
    }

    /// Inverse of [`EpochMetrics::to_csv_line`]; wall time is not logged,
    /// so it comes back as zero.
    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(Error::Config(format!(
                "metrics line has {} fields, expected 10",
                fields.len()
            )));
        }
        let req = |s: &str| -> Result<f32> {
            s.parse()
                .map_err(|_| Error::Config(format!("bad metrics field: {s}")))
        };
        Ok(EpochMetrics {
            epoch: fields[0]
                .parse()
                .map_err(|_| Error::Config(format!("bad epoch field: {}", fields[0])))?,
            cls_mixed: parse_opt(fields[1])?,
            cls_event: parse_opt(fields[2])?,
            rda: parse_opt(fields[3])?,
            mag: parse_opt(fields[4])?,
            mrp: parse_opt(fields[5])?,
            total: req(fields[6])?,
            train_acc: req(fields[7])?,
            test_acc: req(fields[8])?,
            mean_gate: parse_opt(fields[9])?,
            wall_secs: 0.0,
        })
    }
}

/// What a finished run leaves behind.
#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// Accuracy plus per-class confusion counts (`confusion[truth][pred]`).
pub struct EvalReport {
    pub total: usize,
    pub correct: usize,
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn accuracy(&self) -> f32 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f32 / self.total as f32
        }
    }
}

fn arch_id(arch: Arch) -> f32 {
    match arch {
        Arch::ScnnSmall => 0.0,
        Arch::VggLite => 1.0,
    }
}

fn arch_from_id(id: f32) -> Result<Arch> {
    match id as u32 {
        0 => Ok(Arch::ScnnSmall),
        1 => Ok(Arch::VggLite),
        _ => Err(Error::CheckpointMismatch(format!("unknown arch id {id}"))),
    }
}

/// Serializes the network, the gate vector, and a small header tensor that
/// lets [`load_model`] rebuild the exact architecture without a config file.
pub fn save_model(path: &Path, net: &Network, theta: &Tensor<f32>) -> Result<()> {
    let s = &net.spec;
    let meta = Tensor::new(
        vec![10],
        vec![
            arch_id(s.arch),
            s.in_channels as f32,
            s.height as f32,
            s.width as f32,
            s.classes as f32,
            s.hidden as f32,
            s.time_steps as f32,
            s.lif.tau,
            s.lif.v_th,
            s.lif.surrogate_width,
        ],
    );
    let mut entries: Vec<(String, Tensor<f32>)> = Vec::with_capacity(net.params.len() + 2);
    entries.push((META_KEY.to_string(), meta));
    for (name, t) in &net.params {
        entries.push((name.clone(), Tensor::new(t.shape.clone(), t.data.clone())));
    }
    entries.push((THETA_KEY.to_string(), Tensor::new(theta.shape.clone(), theta.data.clone())));
    save_checkpoint(path, &entries)
}

/// Rebuilds the network and gate vector saved by [`save_model`].
pub fn load_model(path: &Path) -> Result<(Network, Tensor<f32>)> {
    let mut entries = load_checkpoint(path)?;
    if entries.len() < 3 || entries[0].0 != META_KEY {
        return Err(Error::CheckpointMismatch(format!(
            "missing {META_KEY} header"
        )));
    }
    let (_, meta) = entries.remove(0);
    if meta.data.len() != 10 {
        return Err(Error::CheckpointMismatch(format!(
            "{META_KEY} holds {} values, expected 10",
            meta.data.len()
        )));
    }
    let spec = NetworkSpec {
        arch: arch_from_id(meta.data[0])?,
        in_channels: meta.data[1] as usize,
        height: meta.data[2] as usize,
        width: meta.data[3] as usize,
        classes: meta.data[4] as usize,
        hidden: meta.data[5] as usize,
        time_steps: meta.data[6] as usize,
        lif: LIFParams {
            tau: meta.data[7],
            v_th: meta.data[8],
            surrogate_width: meta.data[9],
        },
    };
    let (theta_key, theta) = entries.pop().expect("length checked above");
    if theta_key != THETA_KEY {
        return Err(Error::CheckpointMismatch(format!(
            "missing {THETA_KEY} entry"
        )));
    }
    if theta.shape != vec![spec.time_steps] {
        return Err(Error::CheckpointMismatch(format!(
            "{THETA_KEY} has shape {:?}, expected [{}]",
            theta.shape, spec.time_steps
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = build_network(&spec, &mut rng)?;
    net.load_params(entries)?;
    Ok((net, theta))
}

/// Time-averaged event-head predictions for the batch behind `logits`.
fn averaged_argmax(g: &Graph<f32>, logits: &[Var]) -> Vec<usize> {
    let shape = g.value(logits[0]).shape.clone();
    let mut avg = vec![0.0f32; shape.iter().product()];
    for &l in logits {
        for (a, &v) in avg.iter_mut().zip(&g.value(l).data) {
            *a += v;
        }
    }
    let scale = 1.0 / logits.len() as f32;
    avg.iter_mut().for_each(|a| *a *= scale);
    Tensor::new(shape, avg).argmax_last_axis()
}

fn mean_gate_of(theta: &Tensor<f32>) -> f32 {
    let sum: f32 = theta
        .data
        .iter()
        .map(|&t| 1.0 / (1.0 + (-t).exp()))
        .sum();
    sum / theta.data.len() as f32
}

/// Caches `p` per distinct scheduled ratio so the solver runs once per
/// ratio value instead of once per batch.
struct ProbCache {
    by_ratio: HashMap<u64, f64>,
}

impl ProbCache {
    fn new() -> Self {
        ProbCache {
            by_ratio: HashMap::new(),
        }
    }

    fn get(&mut self, t: usize, ratio: f64, cfg: &TrainConfig) -> Result<f64> {
        if let Some(&p) = self.by_ratio.get(&ratio.to_bits()) {
            return Ok(p);
        }
        let p = solve_replacement_prob(t, ratio, cfg.expectation_mode)?;
        self.by_ratio.insert(ratio.to_bits(), p);
        Ok(p)
    }
}

/// Runs the configured training loop and writes `metrics.csv` plus
/// `model.tmkt` under the output directory.
pub fn run_training(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_set = load_dataset(&cfg.data_dir.join("train"))?;
    let test_set = load_dataset(&cfg.data_dir.join("test"))?;
    let (dt, dc, dh, dw) = train_set.dims;
    if dt != cfg.t {
        return Err(Error::StepCountMismatch {
            expected: cfg.t,
            got: dt,
        });
    }
    if test_set.dims != train_set.dims || test_set.n_classes != train_set.n_classes {
        return Err(Error::Config(
            "train and test splits disagree on shape or class count".to_string(),
        ));
    }

    let spec = NetworkSpec {
        arch: cfg.arch,
        in_channels: dc,
        height: dh,
        width: dw,
        classes: train_set.n_classes,
        hidden: cfg.arch.default_hidden(),
        time_steps: cfg.t,
        lif: cfg.lif,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = build_network(&spec, &mut rng)?;
    let mut theta = Tensor::zeros(vec![cfg.t]).with_grad();
    let mut optimizer = Optimizer::new(cfg.optimizer);
    let gates = cfg.gates();

    // With redrawing disabled each event sample keeps one replacement point
    // for the whole run, drawn from the base ratio; schedules only make
    // sense with fresh draws.
    let frozen_t_star: Option<Vec<usize>> = if cfg.fresh_t_star || !gates.tsm {
        None
    } else {
        let mut by_event = vec![0usize; train_set.samples.len()];
        if cfg.schedule_kind == MixupPolicy::Fixed {
            let t_star = fixed_replacement_point(cfg.t, cfg.r_m)?;
            for &e in &train_set.event_indices {
                by_event[e] = t_star;
            }
        } else {
            let p = solve_replacement_prob(cfg.t, cfg.r_m, cfg.expectation_mode)?;
            for &e in &train_set.event_indices {
                by_event[e] = sample_replacement_point(p, cfg.t, &mut rng)?;
            }
        }
        Some(by_event)
    };

    std::fs::create_dir_all(&cfg.out_dir)?;
    let metrics_path = cfg.out_dir.join("metrics.csv");
    let checkpoint_path = cfg.out_dir.join("model.tmkt");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    writeln!(log, "{}", EpochMetrics::csv_header())?;

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut p_cache = ProbCache::new();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        optimizer.set_lr(cosine_lr(cfg.optimizer.lr, epoch, cfg.epochs));
        let batches = make_pair_batches(&train_set, cfg.batch_size, &mut rng)?;
        let n_batches = batches.len();

        let mut sums: [f64; 6] = [0.0; 6];
        let mut present = [false; 5];
        let mut seen = 0usize;
        let mut correct = 0usize;

        for (batch_idx, pairs) in batches.iter().enumerate() {
            let outcome = train_batch(
                cfg,
                &train_set,
                &mut net,
                &mut theta,
                &mut optimizer,
                &mut p_cache,
                frozen_t_star.as_deref(),
                pairs,
                epoch,
                batch_idx,
                n_batches,
                &mut rng,
            );
            let stats = outcome.map_err(|e| Error::Abort {
                epoch,
                batch: batch_idx,
                source: Box::new(e),
            })?;
            let n = pairs.len() as f64;
            let opts = [
                stats.cls_mixed,
                stats.cls_event,
                stats.rda,
                stats.mag,
                stats.mrp,
            ];
            for (i, o) in opts.iter().enumerate() {
                if let Some(v) = o {
                    sums[i] += *v as f64 * n;
                    present[i] = true;
                }
            }
            sums[5] += stats.total as f64 * n;
            seen += pairs.len();
            correct += stats.correct;
        }

        let mean = |i: usize| -> Option<f32> {
            present[i].then(|| (sums[i] / seen as f64) as f32)
        };
        let eval = evaluate(&net, &test_set, cfg.batch_size)?;
        let mean_gate = gates.rda.then(|| mean_gate_of(&theta));
        if let Some(g) = mean_gate {
            assert!(
                g.is_finite() && g > 0.0 && g < 1.0,
                "gate mean left (0, 1): {g}"
            );
        }
        let m = EpochMetrics {
            epoch,
            cls_mixed: mean(0),
            cls_event: mean(1),
            rda: mean(2),
            mag: mean(3),
            mrp: mean(4),
            total: (sums[5] / seen as f64) as f32,
            train_acc: correct as f32 / seen as f32,
            test_acc: eval.accuracy(),
            mean_gate,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        writeln!(log, "{}", m.to_csv_line())?;
        log.flush()?;
        println!(
            "epoch {:>3}  total {:.4}  train_acc {:.3}  test_acc {:.3}  wall {:.2}s",
            m.epoch, m.total, m.train_acc, m.test_acc, m.wall_secs
        );
        history.push(m);
    }

    save_model(&checkpoint_path, &net, &theta)?;
    Ok(TrainOutcome {
        metrics: history,
        metrics_path,
        checkpoint_path,
    })
}

/// Per-batch loss values plus how many event-head predictions were right.
struct BatchStats {
    cls_mixed: Option<f32>,
    cls_event: Option<f32>,
    rda: Option<f32>,
    mag: Option<f32>,
    mrp: Option<f32>,
    total: f32,
    correct: usize,
}

#[allow(clippy::too_many_arguments)]
fn train_batch(
    cfg: &TrainConfig,
    train_set: &Dataset,
    net: &mut Network,
    theta: &mut Tensor<f32>,
    optimizer: &mut Optimizer,
    p_cache: &mut ProbCache,
    frozen_t_star: Option<&[usize]>,
    pairs: &[(usize, usize)],
    epoch: usize,
    batch_idx: usize,
    n_batches: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BatchStats> {
    let t_len = cfg.t;
    let gates = cfg.gates();
    let targets: Vec<usize> = pairs
        .iter()
        .map(|&(ev, _)| train_set.samples[ev].class as usize)
        .collect();

    // Mixed-stream ingredients. Sampling happens even when frozen points
    // are in play only for pairs without a frozen draw (none in practice).
    let mut mixed_frames: Vec<Tensor<f32>> = Vec::new();
    let mut fractions: Vec<f32> = Vec::new();
    let mut step_targets: Vec<Vec<usize>> = vec![Vec::new(); t_len];
    if gates.tsm {
        let ratio = schedule_ratio(
            cfg.schedule_kind,
            cfg.r_m,
            epoch,
            cfg.epochs,
            batch_idx,
            n_batches,
        )?;
        for &(ev, ap) in pairs {
            let t_star = if let Some(frozen) = frozen_t_star {
                frozen[ev]
            } else if cfg.schedule_kind == MixupPolicy::Fixed {
                fixed_replacement_point(t_len, ratio)?
            } else {
                let p = p_cache.get(t_len, ratio, cfg)?;
                sample_replacement_point(p, t_len, rng)?
            };
            let mixed = mix_sequences(
                &train_set.samples[ap].frames,
                &train_set.samples[ev].frames,
                t_star,
            )?;
            for (t, &lab) in mixed.step_labels.iter().enumerate() {
                step_targets[t].push(lab as usize);
            }
            fractions.push(mixed.mix_fraction);
            mixed_frames.push(mixed.frames);
        }
    }

    let mut g: Graph<f32> = Graph::new();
    let vars = net.bind(&mut g);
    let theta_var = gates.rda.then(|| g.param(theta.clone()));

    let event_seqs: Vec<&Tensor<f32>> = pairs
        .iter()
        .map(|&(ev, _)| &train_set.samples[ev].frames)
        .collect();
    let event_out = forward_stream(&mut g, net, &vars, &event_seqs, t_len)?;
    let mixed_out = if gates.tsm {
        let refs: Vec<&Tensor<f32>> = mixed_frames.iter().collect();
        Some(forward_stream(&mut g, net, &vars, &refs, t_len)?)
    } else {
        None
    };

    let breakdown = compose_loss(
        &mut g,
        mixed_out.as_ref(),
        &event_out,
        theta_var,
        &targets,
        &step_targets,
        &fractions,
        gates,
        cfg.lambda,
        cfg.rda_regularizer_mode,
    )?;

    let predictions = averaged_argmax(&g, &event_out.class_event);
    let correct = predictions
        .iter()
        .zip(&targets)
        .filter(|(p, t)| p == t)
        .count();

    g.backward(breakdown.total)?;
    net.pull_grads(&g, &vars);
    if let Some(tv) = theta_var {
        let src = g.grad(tv).expect("theta lost its gradient");
        let dst = theta.grad.as_mut().expect("theta allocated with grad");
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }

    let mut slots: Vec<(String, &mut Tensor<f32>)> = net
        .params
        .iter_mut()
        .map(|(n, t)| (n.clone(), t))
        .collect();
    slots.push((THETA_KEY.to_string(), theta));
    optimizer.step(&mut slots)?;

    Ok(BatchStats {
        cls_mixed: breakdown.cls_mixed,
        cls_event: breakdown.cls_event,
        rda: breakdown.rda,
        mag: breakdown.mag,
        mrp: breakdown.mrp,
        total: breakdown.total_value,
        correct,
    })
}

/// Pushes one stream's `[T, C, H, W]` sequences through the network as a
/// batch of per-step `[N, C, H, W]` constants.
fn forward_stream(
    g: &mut Graph<f32>,
    net: &Network,
    vars: &crate::snn::ParamVars,
    seqs: &[&Tensor<f32>],
    t_len: usize,
) -> Result<StreamOutput> {
    let frames: Vec<Var> = (0..t_len)
        .map(|t| stack_step(seqs, t).map(|f| g.constant(f)))
        .collect::<Result<_>>()?;
    net.forward(g, vars, &frames)
}

/// Event-head accuracy and confusion counts over a split's event samples.
pub fn evaluate(net: &Network, ds: &Dataset, batch_size: usize) -> Result<EvalReport> {
    let classes = net.spec.classes;
    if ds.n_classes != classes {
        return Err(Error::CheckpointMismatch(format!(
            "model has {classes} classes, dataset has {}",
            ds.n_classes
        )));
    }
    let (dt, dc, dh, dw) = ds.dims;
    if dt != net.spec.time_steps
        || dc != net.spec.in_channels
        || dh != net.spec.height
        || dw != net.spec.width
    {
        return Err(Error::ShapeMismatch {
            op: "evaluate",
            lhs: vec![dt, dc, dh, dw],
            rhs: vec![
                net.spec.time_steps,
                net.spec.in_channels,
                net.spec.height,
                net.spec.width,
            ],
        });
    }
    let mut report = EvalReport {
        total: 0,
        correct: 0,
        confusion: vec![vec![0; classes]; classes],
    };
    for chunk in ds.event_indices.chunks(batch_size.max(1)) {
        let seqs: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &ds.samples[i].frames).collect();
        let mut g: Graph<f32> = Graph::new();
        let vars = net.bind(&mut g);
        let out = forward_stream(&mut g, net, &vars, &seqs, dt)?;
        let preds = averaged_argmax(&g, &out.class_event);
        for (&idx, &pred) in chunk.iter().zip(&preds) {
            let truth = ds.samples[idx].class as usize;
            report.confusion[truth][pred] += 1;
            report.total += 1;
            if truth == pred {
                report.correct += 1;
            }
        }
    }
    Ok(report)
}

/// Loads a saved model and scores it on one split of a dataset directory.
pub fn run_eval(ckpt: &Path, data_dir: &Path, split: &str) -> Result<EvalReport> {
    let (net, _theta) = load_model(ckpt)?;
    let ds = load_dataset(&data_dir.join(split))?;
    evaluate(&net, &ds, 32)
}
