//! Exact identities of the distillation losses on random instances.

use comoto_core::autodiff::Graph;
use comoto_core::losses::{impa_loss, lskd_loss, soften};
use comoto_core::tensor::DenseArray;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const TEMPERATURES: [f64; 4] = [0.5, 1.0, 4.0, 16.0];
const D: usize = 8;
const POINTS: usize = 9;

#[derive(Debug)]
pub struct IdentityReport {
    pub name: &'static str,
    pub instances: usize,
    /// Largest deviation from the identity seen.
    pub worst: f64,
    pub tolerance: f64,
}

impl IdentityReport {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> DenseArray {
    DenseArray::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

fn softened(proto: &DenseArray, tau: f64) -> DenseArray {
    let mut g = Graph::new();
    let p = g.constant(proto.clone());
    let s = soften(&mut g, p, tau, None).expect("soften");
    g.value(s).clone()
}

fn lskd(teacher: &DenseArray, student: &DenseArray) -> f64 {
    let mut g = Graph::new();
    let t = g.constant(teacher.clone());
    let s = g.constant(student.clone());
    let l = lskd_loss(&mut g, t, s, &[true; POINTS]).expect("lskd");
    g.value(l).item()
}

fn worst_of(name: &'static str, instances: usize, tolerance: f64, mut one: impl FnMut() -> f64) -> IdentityReport {
    let worst = (0..instances).map(|_| one()).fold(0.0, f64::max);
    IdentityReport { name, instances, worst, tolerance }
}

/// Zero on identical softened prototypes; strictly positive once they
/// differ by more than 1e-9 anywhere. The reported deviation is the
/// loss on equal inputs, or infinity if a distinct pair scores zero.
pub fn lskd_zero_iff_equal(instances: usize, rng: &mut ChaCha8Rng) -> IdentityReport {
    worst_of("lskd zero iff prototypes equal", instances, 1e-12, || {
        let tau = TEMPERATURES[rng.random_range(0..TEMPERATURES.len())];
        let raw = normal(rng, &[D, POINTS]);
        let t = softened(&raw, tau);
        let same = lskd(&t, &t).abs();
        let other = if rng.random_bool(0.5) {
            normal(rng, &[D, POINTS])
        } else {
            // a single nudged logit
            let mut r = raw.clone();
            r.data_mut()[rng.random_range(0..D * POINTS)] += rng.random_range(1e-3..1.0);
            r
        };
        let s = softened(&other, tau);
        let differs = t.max_abs_diff(&s) > 1e-9;
        if differs && lskd(&t, &s) <= 0.0 {
            f64::INFINITY
        } else {
            same
        }
    })
}

fn impa_terms(critical: &[DenseArray], background: &[DenseArray]) -> (f64, f64) {
    let mut g = Graph::new();
    let c: Vec<_> = critical.iter().map(|x| g.constant(x.clone())).collect();
    let n: Vec<_> = background.iter().map(|x| g.constant(x.clone())).collect();
    let terms = impa_loss(&mut g, &c, &n).expect("impa");
    (g.value(terms.pos).item(), g.value(terms.neg).item())
}

pub fn pos_zero_single_image(instances: usize, rng: &mut ChaCha8Rng) -> IdentityReport {
    worst_of("alignment positive term zero for one image", instances, 0.0, || {
        let (pos, _) = impa_terms(&[normal(rng, &[D, POINTS])], &[normal(rng, &[D, POINTS])]);
        pos.abs()
    })
}

/// Lesion and background vectors on disjoint channel sets.
pub fn neg_zero_orthogonal(instances: usize, rng: &mut ChaCha8Rng) -> IdentityReport {
    worst_of("alignment negative term zero under orthogonality", instances, 0.0, || {
        let b = rng.random_range(1..=4);
        let split = rng.random_range(1..D);
        let masked = |rng: &mut ChaCha8Rng, lesion: bool| {
            let mut x = normal(rng, &[D, POINTS]);
            for (i, v) in x.data_mut().iter_mut().enumerate() {
                if (i / POINTS < split) != lesion {
                    *v = 0.0;
                }
            }
            x
        };
        let crit: Vec<DenseArray> = (0..b).map(|_| masked(rng, true)).collect();
        let back: Vec<DenseArray> = (0..b).map(|_| masked(rng, false)).collect();
        impa_terms(&crit, &back).1.abs()
    })
}

pub fn columns_sum_to_one(instances: usize, rng: &mut ChaCha8Rng) -> IdentityReport {
    worst_of("softened columns sum to one", instances, 1e-9, || {
        let tau = if rng.random_bool(0.5) { TEMPERATURES[rng.random_range(0..4)] } else { rng.random_range(0.1..32.0) };
        let mut raw = normal(rng, &[D, POINTS]);
        raw.data_mut().iter_mut().for_each(|v| *v *= 5.0);
        let s = softened(&raw, tau);
        (0..POINTS)
            .map(|j| ((0..D).map(|i| s.data()[i * POINTS + j]).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    })
}

fn column_argmax(x: &DenseArray) -> Vec<usize> {
    (0..POINTS)
        .map(|j| (0..D).max_by(|&a, &b| x.data()[a * POINTS + j].total_cmp(&x.data()[b * POINTS + j])).unwrap())
        .collect()
}

/// Deviation is the number of columns whose argmax moved.
pub fn argmax_invariant(instances: usize, rng: &mut ChaCha8Rng) -> IdentityReport {
    worst_of("column argmax invariant under temperature", instances, 0.0, || {
        let raw = normal(rng, &[D, POINTS]);
        let want = column_argmax(&raw);
        TEMPERATURES
            .iter()
            .map(|&tau| column_argmax(&softened(&raw, tau)).iter().zip(&want).filter(|(a, b)| a != b).count() as f64)
            .fold(0.0, f64::max)
    })
}

pub fn run_all(instances: usize, seed: u64) -> Vec<IdentityReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        lskd_zero_iff_equal(instances, &mut rng),
        pos_zero_single_image(instances, &mut rng),
        neg_zero_orthogonal(instances, &mut rng),
        columns_sum_to_one(instances, &mut rng),
        argmax_invariant(instances, &mut rng),
    ]
}
