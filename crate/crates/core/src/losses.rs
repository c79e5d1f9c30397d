//! Lesion-level distillation losses.
//!
//! The student is pulled towards the teacher through batch-averaged lesion
//! prototypes: every lesion contributes a `D × 9` matrix of features taken at
//! its critical points, the matrices are averaged per image and then over the
//! batch, softened with a temperature softmax over the channel axis, and
//! compared with a KL divergence. The teacher itself is trained with an
//! alignment loss that pulls lesion features of different images together
//! while pushing them away from background features.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{PointRole, NUM_CRITICAL};
use crate::tensor::DenseArray;

/// Subset of the nine critical-point roles that take part in distillation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PointMask([bool; NUM_CRITICAL]);

impl PointMask {
    pub const ALL: PointMask = PointMask([true; NUM_CRITICAL]);

    pub fn new(active: [bool; NUM_CRITICAL]) -> Result<Self> {
        if active.iter().any(|&a| a) {
            Ok(Self(active))
        } else {
            Err(Error::InvalidArgument("point mask must keep at least one point".into()))
        }
    }

    pub fn from_roles(center: bool, corners: bool, sides: bool) -> Result<Self> {
        let mut active = [false; NUM_CRITICAL];
        for role in PointRole::ORDER {
            active[role.index()] = match role {
                PointRole::Center => center,
                r if r.is_corner() => corners,
                _ => sides,
            };
        }
        Self::new(active)
    }

    pub fn is_active(&self, column: usize) -> bool {
        self.0[column]
    }

    pub fn as_array(&self) -> [bool; NUM_CRITICAL] {
        self.0
    }

    fn groups(&self) -> Option<(bool, bool, bool)> {
        let pick = |f: fn(PointRole) -> bool| {
            let vals: Vec<bool> = PointRole::ORDER.iter().filter(|r| f(**r)).map(|r| self.0[r.index()]).collect();
            if vals.iter().all(|&v| v) {
                Some(true)
            } else if vals.iter().all(|&v| !v) {
                Some(false)
            } else {
                None
            }
        };
        Some((pick(|r| r == PointRole::Center)?, pick(PointRole::is_corner)?, pick(PointRole::is_side_midpoint)?))
    }
}

impl Default for PointMask {
    fn default() -> Self {
        Self::ALL
    }
}

/// `C`, `E` (corners) and `S` (side midpoints) joined with `+`, e.g. `C+E+S`.
impl FromStr for PointMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(bits) = s.strip_prefix("mask:") {
            let mut active = [false; NUM_CRITICAL];
            if bits.len() != NUM_CRITICAL {
                return Err(Error::InvalidArgument(format!("point mask {s:?} needs {NUM_CRITICAL} bits")));
            }
            for (slot, ch) in active.iter_mut().zip(bits.chars()) {
                *slot = match ch {
                    '1' => true,
                    '0' => false,
                    _ => return Err(Error::InvalidArgument(format!("bad bit {ch:?} in point mask {s:?}"))),
                };
            }
            return Self::new(active);
        }
        let (mut c, mut e, mut sides) = (false, false, false);
        for part in s.split('+').map(str::trim) {
            match part {
                "C" => c = true,
                "E" => e = true,
                "S" => sides = true,
                other => return Err(Error::InvalidArgument(format!("unknown point group {other:?} in {s:?}"))),
            }
        }
        Self::from_roles(c, e, sides)
    }
}

impl fmt::Display for PointMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.groups() {
            Some((c, e, s)) => {
                let parts: Vec<&str> = [(c, "C"), (e, "E"), (s, "S")].iter().filter(|p| p.0).map(|p| p.1).collect();
                write!(f, "{}", parts.join("+"))
            }
            None => {
                let bits: String = self.0.iter().map(|&b| if b { '1' } else { '0' }).collect();
                write!(f, "mask:{bits}")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub point_mask: PointMask,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { tau: 4.0, alpha: 2.0, beta: 2.0, point_mask: PointMask::ALL }
    }
}

/// Graph handles for the learnable channel projection `W·e[:, j] + b`.
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    pub weight: Var,
    pub bias: Var,
}

/// Identity weight and zero bias for a `dim`-channel projection.
pub fn identity_projection(dim: usize) -> (DenseArray, DenseArray) {
    let w = DenseArray::from_fn(&[dim, dim], |i| if i / dim == i % dim { 1.0 } else { 0.0 });
    (w, DenseArray::zeros(&[dim]))
}

/// Batch prototype: mean over images of the per-image mean over lesions.
///
/// `batch[i]` holds the `D × K` critical matrices of image `i`.
pub fn lesion_prototype(graph: &mut Graph, batch: &[Vec<Var>]) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("lesion_prototype: empty batch".into()));
    }
    let mut per_image = Vec::with_capacity(batch.len());
    for (i, lesions) in batch.iter().enumerate() {
        if lesions.is_empty() {
            return Err(Error::InvalidArgument(format!("lesion_prototype: image {i} has no lesions")));
        }
        per_image.push(mean_of(graph, lesions)?);
    }
    mean_of(graph, &per_image)
}

/// Elementwise mean of equally shaped nodes.
pub fn mean_of(graph: &mut Graph, items: &[Var]) -> Result<Var> {
    let (&first, rest) = items
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("mean of zero items".into()))?;
    let mut acc = first;
    for &v in rest {
        acc = graph.add(acc, v)?;
    }
    Ok(if items.len() == 1 { acc } else { graph.scale(acc, 1.0 / items.len() as f64) })
}

/// Temperature softmax over the channel axis of a `D × K` prototype, after
/// the optional column-wise projection.
pub fn soften(graph: &mut Graph, proto: Var, tau: f64, projection: Option<Projection>) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let mut x = proto;
    if let Some(p) = projection {
        x = graph.matmul(p.weight, x)?;
        x = graph.add_broadcast(x, p.bias, 0)?;
    }
    let x = graph.scale(x, 1.0 / tau);
    graph.softmax(x, 0)
}

/// `(1/D) Σ_i Σ_j t[i,j] · ln(t[i,j] / s[i,j])` over the masked columns.
///
/// The teacher side is always treated as a constant.
pub fn lskd_loss(graph: &mut Graph, teacher: Var, student: Var, mask: &[bool]) -> Result<Var> {
    let t = graph.value(teacher).clone();
    let s_shape = graph.value(student).shape().to_vec();
    if t.shape() != s_shape.as_slice() || t.rank() != 2 {
        return Err(Error::Shape(format!(
            "lskd_loss: teacher {:?} and student {s_shape:?} must be equal 2-D shapes",
            t.shape()
        )));
    }
    let (d, k) = (t.shape()[0], t.shape()[1]);
    if mask.len() != k {
        return Err(Error::Shape(format!("lskd_loss: mask of {} columns for {k}-column prototypes", mask.len())));
    }
    let weights = DenseArray::from_fn(&[d, k], |i| if mask[i % k] { t.data()[i] } else { 0.0 });
    let log_t = t.map(f64::ln);
    let w = graph.constant(weights);
    let lt = graph.constant(log_t);
    let ls = graph.log(student);
    let diff = graph.sub(lt, ls)?;
    let terms = graph.mul(w, diff)?;
    let total = graph.sum_all(terms);
    Ok(graph.scale(total, 1.0 / d as f64))
}

#[derive(Debug, Clone, Copy)]
pub struct ImpaTerms {
    pub pos: Var,
    pub neg: Var,
    pub total: Var,
}

/// Floor on vector norms in cosine similarities; an all-zero vector has
/// zero similarity to everything.
pub const COSINE_EPS: f64 = 1e-8;

/// Row-normalized `[B, len]` stack of the flattened inputs.
fn unit_rows(graph: &mut Graph, items: &[Var]) -> Result<Var> {
    let rows = items
        .iter()
        .map(|&v| {
            let len = graph.value(v).len();
            graph.reshape(v, &[1, len])
        })
        .collect::<Result<Vec<_>>>()?;
    let stacked = graph.concat(&rows, 0)?;
    let norms = graph.l2_norm(stacked, 1)?;
    let norms = graph.max_const(norms, COSINE_EPS);
    let inv = graph.pow_const(norms, -1.0);
    graph.mul_broadcast(stacked, inv, 0)
}

/// Cosine alignment among per-image critical features plus a hinge on
/// critical/background cosine similarity, averaged over all `B²` pairs.
pub fn impa_loss(graph: &mut Graph, critical: &[Var], noncritical: &[Var]) -> Result<ImpaTerms> {
    if critical.is_empty() || critical.len() != noncritical.len() {
        return Err(Error::InvalidArgument(format!(
            "impa_loss: need equal non-empty batches, got {} critical and {} background",
            critical.len(),
            noncritical.len()
        )));
    }
    let fc = unit_rows(graph, critical)?;
    let fnc = unit_rows(graph, noncritical)?;
    if graph.value(fc).shape() != graph.value(fnc).shape() {
        return Err(Error::Shape("impa_loss: critical and background matrices differ in shape".into()));
    }
    // Diagonal pairs contribute exactly zero to the positive term.
    let b = critical.len();
    let pairs = (b * b) as f64;
    let pos = if b == 1 {
        graph.constant(DenseArray::scalar(0.0))
    } else {
        let cos_cc = graph.matmul_nt(fc, fc)?;
        let off: Vec<usize> = (0..b * b).filter(|k| k / b != k % b).collect();
        let cos_off = graph.gather(cos_cc, off, &[b * b - b])?;
        let sum = graph.sum_all(cos_off);
        let scaled = graph.scale(sum, -1.0 / pairs);
        graph.add_scalar(scaled, (b * b - b) as f64 / pairs)
    };
    let cos_cn = graph.matmul_nt(fc, fnc)?;
    let hinge = graph.max_const(cos_cn, 0.0);
    let neg = graph.mean_all(hinge);
    let total = graph.add(pos, neg)?;
    Ok(ImpaTerms { pos, neg, total })
}

/// `l_det + weight · l_aux`; the student objective with `alpha`, the teacher
/// objective with `beta`.
pub fn weighted_sum(graph: &mut Graph, l_det: Var, l_aux: Var, weight: f64) -> Result<Var> {
    let scaled = graph.scale(l_aux, weight);
    graph.add(l_det, scaled)
}

pub fn combined_student_loss(graph: &mut Graph, l_det: Var, l_lskd: Var, alpha: f64) -> Result<Var> {
    weighted_sum(graph, l_det, l_lskd, alpha)
}

pub fn combined_teacher_loss(graph: &mut Graph, l_det: Var, l_impa: Var, beta: f64) -> Result<Var> {
    weighted_sum(graph, l_det, l_impa, beta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn konst(g: &mut Graph, shape: &[usize], data: &[f64]) -> Var {
        g.constant(DenseArray::new(shape.to_vec(), data.to_vec()).unwrap())
    }

    #[test]
    fn prototype_of_two_images() {
        let mut g = Graph::new();
        let a = g.constant(DenseArray::filled(&[4, 9], 1.0));
        let b = g.constant(DenseArray::filled(&[4, 9], 3.0));
        let p = lesion_prototype(&mut g, &[vec![a], vec![b]]).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 2.0));
        let p = lesion_prototype(&mut g, &[vec![a]]).unwrap();
        assert_eq!(g.value(p), g.value(a));
        assert!(lesion_prototype(&mut g, &[vec![a], vec![]]).is_err());
    }

    #[test]
    fn soften_examples() {
        let mut g = Graph::new();
        let x = konst(&mut g, &[2, 1], &[0.0, 0.0]);
        let s = soften(&mut g, x, 3.0, None).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
        let x = konst(&mut g, &[2, 1], &[4.0, 0.0]);
        let s = soften(&mut g, x, 4.0, None).unwrap();
        let v = g.value(s).data();
        assert!((v[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((v[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert!(soften(&mut g, x, 0.0, None).is_err());
    }

    #[test]
    fn lskd_hand_value() {
        let mut g = Graph::new();
        let t = konst(&mut g, &[2, 1], &[0.75, 0.25]);
        let s = konst(&mut g, &[2, 1], &[0.5, 0.5]);
        let l = lskd_loss(&mut g, t, s, &[true]).unwrap();
        let expected = 0.5 * (0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln());
        assert!((g.value(l).item() - expected).abs() < 1e-15);
        assert!((expected - 0.06541).abs() < 1e-5);
        let l = lskd_loss(&mut g, t, t, &[true]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn masked_columns_contribute_nothing() {
        let mut g = Graph::new();
        let t = konst(&mut g, &[2, 2], &[0.75, 0.5, 0.25, 0.5]);
        let s = konst(&mut g, &[2, 2], &[0.5, 0.9, 0.5, 0.1]);
        let only_first = lskd_loss(&mut g, t, s, &[true, false]).unwrap();
        let expected = 0.5 * (0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln());
        assert!((g.value(only_first).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn impa_single_image_and_orthogonal_pairs() {
        let mut g = Graph::new();
        let c = konst(&mut g, &[2, 1], &[1.0, 2.0]);
        let n = konst(&mut g, &[2, 1], &[-2.0, 1.0]);
        let terms = impa_loss(&mut g, &[c], &[n]).unwrap();
        assert_eq!(g.value(terms.pos).item(), 0.0);
        assert!(g.value(terms.neg).item().abs() < 1e-15);

        let c1 = konst(&mut g, &[2, 1], &[1.0, 0.0]);
        let c2 = konst(&mut g, &[2, 1], &[0.0, 3.0]);
        let n1 = konst(&mut g, &[2, 1], &[-1.0, 0.0]);
        let terms = impa_loss(&mut g, &[c1, c2], &[n1, n1]).unwrap();
        assert!((g.value(terms.pos).item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn impa_zero_vectors_have_zero_similarity() {
        let mut g = Graph::new();
        let c = g.leaf(DenseArray::new(vec![2, 1], vec![0.0, 0.0]).unwrap());
        let c2 = konst(&mut g, &[2, 1], &[0.0, 1.0]);
        let n = konst(&mut g, &[2, 1], &[1.0, 0.0]);
        let terms = impa_loss(&mut g, &[c, c2], &[n, n]).unwrap();
        // off-diagonal pairs: cos(0, c2) = 0 twice
        assert_eq!(g.value(terms.pos).item(), 0.5);
        assert_eq!(g.value(terms.neg).item(), 0.0);
        g.backward(terms.total).unwrap();
        assert!(g.grad(c).is_finite());
    }

    #[test]
    fn combined_losses() {
        let mut g = Graph::new();
        let det = g.constant(DenseArray::scalar(0.5));
        let kd = g.constant(DenseArray::scalar(0.1));
        let l = combined_student_loss(&mut g, det, kd, 2.0).unwrap();
        assert!((g.value(l).item() - 0.7).abs() < 1e-15);
        let l = combined_student_loss(&mut g, det, kd, 0.0).unwrap();
        assert_eq!(g.value(l).item(), 0.5);
        let det = g.constant(DenseArray::scalar(1.0));
        let al = g.constant(DenseArray::scalar(0.25));
        let l = combined_teacher_loss(&mut g, det, al, 2.0).unwrap();
        assert_eq!(g.value(l).item(), 1.5);
    }

    #[test]
    fn point_mask_parsing() {
        assert_eq!("C+E+S".parse::<PointMask>().unwrap(), PointMask::ALL);
        let c = "C".parse::<PointMask>().unwrap();
        assert!(c.is_active(0) && (1..9).all(|i| !c.is_active(i)));
        let ce = "C+E".parse::<PointMask>().unwrap();
        assert_eq!(ce.as_array(), [true, true, true, true, true, false, false, false, false]);
        assert_eq!(ce.to_string(), "C+E");
        assert_eq!("S+C".parse::<PointMask>().unwrap().to_string(), "C+S");
        assert!("X".parse::<PointMask>().is_err());
        assert!(PointMask::new([false; 9]).is_err());
        let odd = PointMask::new([false, true, false, false, false, false, false, false, true]).unwrap();
        assert_eq!(odd.to_string(), "mask:010000001");
        assert_eq!(odd.to_string().parse::<PointMask>().unwrap(), odd);
        assert!("mask:0101".parse::<PointMask>().is_err());
    }
}
