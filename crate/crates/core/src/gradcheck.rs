//! Finite-difference verification of the analytic gradients.
//!
//! Each check draws random small instances, differentiates a scalar loss
//! by reverse mode, and compares against central differences. Instances
//! that land within a tolerance band of a non-differentiable point (ReLU,
//! hinge, smooth-L1 knee) are redrawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{finite_difference_gradient, relative_error, Graph, OpKind, Var};
use crate::detector::{detection_loss, encode_box, generate_anchors, match_anchors, AnchorConfig, Assignment, DetLossConfig};
use crate::error::Result;
use crate::geometry::{critical_points, gather_critical, scale_box, BBox, NUM_CRITICAL};
use crate::losses::{impa_loss, lesion_prototype, lskd_loss, soften, PointMask, Projection};
use crate::tensor::DenseArray;

pub const EPSILON: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
/// Channel count of the loss-level instances.
pub const CHANNELS: usize = 8;
pub const MAX_BATCH: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> DenseArray {
    DenseArray::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
}

/// Relative error of the gradient of `loss` with respect to input `k`.
fn compare<F>(inputs: &[DenseArray], k: usize, loss: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let out = loss(&mut g, &vars)?;
    g.backward(out)?;
    let analytic = g.grad(vars[k]);
    let eval = |probe: &DenseArray| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, x)| g.constant(if i == k { probe.clone() } else { x.clone() }))
            .collect();
        let out = loss(&mut g, &vars).expect("instance evaluates");
        g.value(out).item()
    };
    let numeric = finite_difference_gradient(eval, &inputs[k], EPSILON)?;
    Ok(relative_error(&analytic, &numeric))
}

struct LskdInstance {
    features: DenseArray,
    weight: DenseArray,
    bias: DenseArray,
    teacher: DenseArray,
    boxes: Vec<Vec<BBox>>,
    tau: f64,
    mask: PointMask,
}

const LSKD_STRIDE: usize = 8;
const LSKD_GRID: usize = 6;

fn random_box(rng: &mut ChaCha8Rng, extent: f64, min: f64, max: f64) -> BBox {
    let w = rng.random_range(min..max);
    let h = rng.random_range(min..max);
    let x = rng.random_range(0.0..extent - w);
    let y = rng.random_range(0.0..extent - h);
    BBox::new(x, y, x + w, y + h)
}

fn lskd_instance(rng: &mut ChaCha8Rng) -> LskdInstance {
    let b = rng.random_range(1..=MAX_BATCH);
    let extent = (LSKD_STRIDE * LSKD_GRID) as f64;
    let boxes = (0..b)
        .map(|_| (0..rng.random_range(1..=2)).map(|_| random_box(rng, extent, 8.0, 30.0)).collect())
        .collect();
    let teacher_logits = normal(rng, &[CHANNELS, NUM_CRITICAL], 1.0);
    let teacher = {
        let mut g = Graph::new();
        let t = g.constant(teacher_logits);
        let s = g.softmax(t, 0).expect("softmax");
        g.value(s).clone()
    };
    let eye = DenseArray::from_fn(&[CHANNELS, CHANNELS], |i| if i / CHANNELS == i % CHANNELS { 1.0 } else { 0.0 });
    let mut weight = normal(rng, &[CHANNELS, CHANNELS], 0.3);
    weight.add_assign(&eye);
    let mask = loop {
        let bits: [bool; NUM_CRITICAL] = std::array::from_fn(|_| rng.random_bool(0.6));
        if let Ok(m) = PointMask::new(bits) {
            break m;
        }
    };
    LskdInstance {
        features: normal(rng, &[b, CHANNELS, LSKD_GRID, LSKD_GRID], 1.0),
        weight,
        bias: normal(rng, &[CHANNELS], 0.2),
        teacher,
        boxes,
        tau: [0.5, 1.0, 4.0, 16.0][rng.random_range(0..4)],
        mask,
    }
}

/// `vars` = features, weight, bias.
fn lskd_graph(g: &mut Graph, vars: &[Var], inst: &LskdInstance) -> Result<Var> {
    let lesions = inst
        .boxes
        .iter()
        .enumerate()
        .map(|(i, bs)| {
            bs.iter()
                .map(|b| gather_critical(g, vars[0], i, &critical_points(&scale_box(b, LSKD_STRIDE, LSKD_GRID, LSKD_GRID))))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let proto = lesion_prototype(g, &lesions)?;
    let student = soften(g, proto, inst.tau, Some(Projection { weight: vars[1], bias: vars[2] }))?;
    let teacher = g.constant(inst.teacher.clone());
    lskd_loss(g, teacher, student, &inst.mask.as_array())
}

struct ImpaInstance {
    critical: DenseArray,
    background: DenseArray,
}

/// Per-image `D × 9` slices of a `[B, D, 9]` leaf.
fn split_rows(g: &mut Graph, x: Var) -> Result<Vec<Var>> {
    let b = g.value(x).shape()[0];
    let per = CHANNELS * NUM_CRITICAL;
    (0..b).map(|i| g.gather(x, (i * per..(i + 1) * per).collect(), &[CHANNELS, NUM_CRITICAL])).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Lesion and background rows sharing a common direction with random
/// signs, so every cross cosine stays clear of the hinge at zero.
fn impa_instance(rng: &mut ChaCha8Rng, min_batch: usize) -> ImpaInstance {
    let per = CHANNELS * NUM_CRITICAL;
    loop {
        let b = rng.random_range(min_batch..=MAX_BATCH);
        let shared = normal(rng, &[per], 1.0);
        let row = |rng: &mut ChaCha8Rng, sign: f64| -> Vec<f64> {
            shared.data().iter().map(|s| sign * s + 0.8 * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let crit: Vec<Vec<f64>> = (0..b).map(|_| row(rng, 1.0)).collect();
        let back: Vec<Vec<f64>> = (0..b)
            .map(|_| {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                row(rng, sign)
            })
            .collect();
        let clear = crit.iter().all(|c| back.iter().all(|n| cosine(c, n).abs() > 0.05));
        if clear {
            return ImpaInstance {
                critical: DenseArray::new(vec![b, CHANNELS, NUM_CRITICAL], crit.concat()).expect("shape"),
                background: DenseArray::new(vec![b, CHANNELS, NUM_CRITICAL], back.concat()).expect("shape"),
            };
        }
    }
}

enum ImpaTerm {
    Pos,
    Neg,
}

fn impa_graph(g: &mut Graph, vars: &[Var], term: &ImpaTerm) -> Result<Var> {
    let c = split_rows(g, vars[0])?;
    let n = split_rows(g, vars[1])?;
    let terms = impa_loss(g, &c, &n)?;
    Ok(match term {
        ImpaTerm::Pos => terms.pos,
        ImpaTerm::Neg => terms.neg,
    })
}

struct DetInstance {
    cls: DenseArray,
    reg: DenseArray,
    anchors: Vec<BBox>,
    gt: Vec<Vec<BBox>>,
}

const DET_GRID: usize = 4;
const DET_STRIDE: usize = 8;

fn det_anchor_config() -> AnchorConfig {
    AnchorConfig { sizes: vec![8.0, 16.0], ratios: vec![0.5, 1.0, 2.0], stride: DET_STRIDE }
}

/// Smooth-L1 inputs of positive anchors stay away from the knee at `±β`.
fn det_instance(rng: &mut ChaCha8Rng) -> DetInstance {
    let cfg = DetLossConfig::default();
    let acfg = det_anchor_config();
    let a = acfg.per_cell();
    let anchors = generate_anchors(&acfg, DET_GRID, DET_GRID);
    let hw = DET_GRID * DET_GRID;
    let extent = (DET_GRID * DET_STRIDE) as f64;
    loop {
        let b = rng.random_range(1..=MAX_BATCH);
        let gt: Vec<Vec<BBox>> = (0..b)
            .map(|_| (0..rng.random_range(0..=2)).map(|_| random_box(rng, extent, 6.0, 20.0)).collect())
            .collect();
        let cls = normal(rng, &[b, a, DET_GRID, DET_GRID], 2.0);
        let reg = normal(rng, &[b, 4 * a, DET_GRID, DET_GRID], 0.5);
        let mut clear = true;
        for (i, boxes) in gt.iter().enumerate() {
            for (j, asg) in match_anchors(&anchors, boxes, &cfg).iter().enumerate() {
                if let Assignment::Positive(k) = *asg {
                    let target = encode_box(&boxes[k], &anchors[j]);
                    let (t, cell) = (j / hw, j % hw);
                    for (c, tv) in target.iter().enumerate() {
                        let d = reg.data()[i * 4 * a * hw + (4 * t + c) * hw + cell] - tv;
                        clear &= (d.abs() - cfg.smooth_l1_beta).abs() > 1e-2;
                    }
                }
            }
        }
        if clear {
            return DetInstance { cls, reg, anchors, gt };
        }
    }
}

enum DetTerm {
    Focal,
    SmoothL1,
}

fn det_graph(g: &mut Graph, vars: &[Var], inst: &DetInstance, term: &DetTerm) -> Result<Var> {
    let loss = detection_loss(g, vars[0], vars[1], &inst.anchors, &inst.gt, &DetLossConfig::default())?;
    Ok(match term {
        DetTerm::Focal => loss.cls,
        DetTerm::SmoothL1 => loss.reg,
    })
}

fn run_check(name: &str, instances: usize, mut one: impl FnMut() -> Result<f64>) -> Result<GradCheck> {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        worst = worst.max(one()?);
    }
    Ok(GradCheck { name: name.to_string(), instances, max_rel_error: worst })
}

/// Gradient checks of every loss term, `instances` random instances each.
pub fn loss_checks(instances: usize, seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, k) in [("lskd/student_features", 0), ("lskd/projection_weight", 1), ("lskd/projection_bias", 2)] {
        out.push(run_check(name, instances, || {
            let inst = lskd_instance(&mut rng);
            compare(&[inst.features.clone(), inst.weight.clone(), inst.bias.clone()], k, |g, v| lskd_graph(g, v, &inst))
        })?);
    }
    out.push(run_check("impa/pos", instances, || {
        let inst = impa_instance(&mut rng, 2);
        compare(&[inst.critical, inst.background], 0, |g, v| impa_graph(g, v, &ImpaTerm::Pos))
    })?);
    for (name, k) in [("impa/neg_critical", 0), ("impa/neg_background", 1)] {
        out.push(run_check(name, instances, || {
            let inst = impa_instance(&mut rng, 1);
            compare(&[inst.critical, inst.background], k, |g, v| impa_graph(g, v, &ImpaTerm::Neg))
        })?);
    }
    for (name, k, term) in [("det/focal", 0, DetTerm::Focal), ("det/smooth_l1", 1, DetTerm::SmoothL1)] {
        out.push(run_check(name, instances, || {
            let inst = det_instance(&mut rng);
            compare(&[inst.cls.clone(), inst.reg.clone()], k, |g, v| det_graph(g, v, &inst, &term))
        })?);
    }
    Ok(out)
}

/// Inputs kept at least `gap` away from every point in `kinks`.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], std: f64, kinks: &[f64], gap: f64) -> DenseArray {
    DenseArray::from_fn(shape, |_| loop {
        let v: f64 = std * rng.sample::<f64, _>(StandardNormal);
        if kinks.iter().all(|k| (v - k).abs() > gap) {
            break v;
        }
    })
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> DenseArray {
    DenseArray::from_fn(shape, |_| rng.random_range(0.3..2.0))
}

type OpBuild = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// A random instance of `kind`: its inputs and the op applied to them.
fn op_instance(kind: OpKind, rng: &mut ChaCha8Rng) -> (Vec<DenseArray>, OpBuild) {
    let n = |rng: &mut ChaCha8Rng, shape: &[usize]| normal(rng, shape, 1.0);
    match kind {
        OpKind::Add => (vec![n(rng, &[3, 4]), n(rng, &[3, 4])], Box::new(|g, v| g.add(v[0], v[1]))),
        OpKind::Sub => (vec![n(rng, &[3, 4]), n(rng, &[3, 4])], Box::new(|g, v| g.sub(v[0], v[1]))),
        OpKind::Mul => (vec![n(rng, &[3, 4]), n(rng, &[3, 4])], Box::new(|g, v| g.mul(v[0], v[1]))),
        OpKind::Div => (vec![n(rng, &[3, 4]), positive(rng, &[3, 4])], Box::new(|g, v| g.div(v[0], v[1]))),
        OpKind::Scale => (vec![n(rng, &[5])], Box::new(|g, v| Ok(g.scale(v[0], -1.7)))),
        OpKind::AddScalar => (vec![n(rng, &[5])], Box::new(|g, v| Ok(g.add_scalar(v[0], 0.3)))),
        OpKind::MatMul => {
            if rng.random_bool(0.5) {
                (vec![n(rng, &[3, 4]), n(rng, &[4, 2])], Box::new(|g, v| g.matmul(v[0], v[1])))
            } else {
                (vec![n(rng, &[3, 4]), n(rng, &[2, 4])], Box::new(|g, v| g.matmul_nt(v[0], v[1])))
            }
        }
        OpKind::Conv2d => {
            let stride = rng.random_range(1..=2);
            let pad = rng.random_range(0..=1);
            (
                vec![n(rng, &[2, 2, 5, 5]), n(rng, &[3, 2, 3, 3])],
                Box::new(move |g, v| g.conv2d(v[0], v[1], stride, pad)),
            )
        }
        OpKind::AddBroadcast => (vec![n(rng, &[2, 3, 4]), n(rng, &[3])], Box::new(|g, v| g.add_broadcast(v[0], v[1], 1))),
        OpKind::MulBroadcast => (vec![n(rng, &[2, 3, 4]), n(rng, &[3, 4])], Box::new(|g, v| g.mul_broadcast(v[0], v[1], 1))),
        OpKind::Relu => (vec![away_from(rng, &[12], 1.0, &[0.0], 0.01)], Box::new(|g, v| Ok(g.relu(v[0])))),
        OpKind::Sigmoid => (vec![n(rng, &[6])], Box::new(|g, v| Ok(g.sigmoid(v[0])))),
        OpKind::Log => (vec![positive(rng, &[6])], Box::new(|g, v| Ok(g.log(v[0])))),
        OpKind::Exp => (vec![n(rng, &[6])], Box::new(|g, v| Ok(g.exp(v[0])))),
        OpKind::LogSigmoid => (vec![normal(rng, &[6], 3.0)], Box::new(|g, v| Ok(g.log_sigmoid(v[0])))),
        OpKind::PowConst => {
            let p = [2.0, -1.0, 0.5, 3.0][rng.random_range(0..4)];
            (vec![positive(rng, &[6])], Box::new(move |g, v| Ok(g.pow_const(v[0], p))))
        }
        OpKind::MaxConst => (vec![away_from(rng, &[12], 1.0, &[0.2], 0.01)], Box::new(|g, v| Ok(g.max_const(v[0], 0.2)))),
        OpKind::SmoothL1 => {
            let beta = 0.5;
            (vec![away_from(rng, &[12], 1.0, &[-beta, beta], 0.01)], Box::new(move |g, v| Ok(g.smooth_l1(v[0], beta))))
        }
        OpKind::Softmax => {
            let axis = rng.random_range(0..3);
            (vec![normal(rng, &[2, 3, 4], 2.0)], Box::new(move |g, v| g.softmax(v[0], axis)))
        }
        OpKind::Sum => (vec![n(rng, &[2, 3, 4])], Box::new(|g, v| g.sum(v[0], &[0, 2]))),
        OpKind::Mean => (vec![n(rng, &[2, 3, 4])], Box::new(|g, v| g.mean(v[0], &[1]))),
        OpKind::Gather => {
            let idx: Vec<usize> = (0..8).map(|_| rng.random_range(0..6)).collect();
            (vec![n(rng, &[6])], Box::new(move |g, v| g.gather(v[0], idx.clone(), &[2, 4])))
        }
        OpKind::Concat => (vec![n(rng, &[2, 3]), n(rng, &[2, 1])], Box::new(|g, v| g.concat(&[v[0], v[1]], 1))),
        OpKind::Reshape => (vec![n(rng, &[2, 6])], Box::new(|g, v| g.reshape(v[0], &[3, 4]))),
        OpKind::L2Norm => (vec![n(rng, &[3, 5])], Box::new(|g, v| g.l2_norm(v[0], 1))),
    }
}

/// Per-operation checks: the op output contracted with fixed random
/// weights, differentiated with respect to every input.
pub fn op_checks(instances: usize, seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for kind in OpKind::ALL {
        let check = run_check(&format!("op/{kind:?}"), instances, || {
            let (inputs, build) = op_instance(kind, &mut rng);
            let out_shape = {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
                let o = build(&mut g, &vars)?;
                g.value(o).shape().to_vec()
            };
            let weights = normal(&mut rng, &out_shape, 1.0);
            let mut worst = 0.0f64;
            for k in 0..inputs.len() {
                let err = compare(&inputs, k, |g, v| {
                    let o = build(g, v)?;
                    let w = g.constant(weights.clone());
                    let p = g.mul(o, w)?;
                    Ok(g.sum_all(p))
                })?;
                worst = worst.max(err);
            }
            Ok(worst)
        })?;
        out.push(check);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_differentiates_correctly() {
        for c in op_checks(5, 11).unwrap() {
            assert!(c.passed(), "{c:?}");
        }
    }

    #[test]
    fn loss_checks_smoke() {
        let checks = loss_checks(3, 5).unwrap();
        assert_eq!(checks.len(), 8);
        for c in checks {
            assert!(c.passed(), "{c:?}");
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // sum(x²) checked against a graph computing sum(x³)/1.5 has the
        // same value at x = 1.5 but a different gradient.
        let x = DenseArray::filled(&[3], 1.5);
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let c = g.pow_const(v, 3.0);
        let s = g.sum_all(c);
        let s = g.scale(s, 1.0 / 1.5);
        g.backward(s).unwrap();
        let numeric = finite_difference_gradient(|p| p.data().iter().map(|a| a * a).sum(), &x, EPSILON).unwrap();
        assert!(relative_error(&g.grad(v), &numeric) > TOLERANCE);
    }
}
