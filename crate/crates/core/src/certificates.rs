//! Lower bounds on the smallest label-changing perturbation.
//!
//! For a margin `f > 0` with gradient norm `g` and curvature bound `K` over a
//! radius-`R` ball, the second-order bound is
//! `max_R min{R, f / (g + R·K/2)}`; the first-order bound replaces the
//! denominator by the largest gradient norm over the ball.

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::models::{margin_graph_pairs, Scorer};
use crate::opnorm::{estimate_opnorm_rows, OpNormProbe};
use crate::rng;
use crate::tensor::{Lp, Tensor};

/// Fixed-point rounds for the sampled-ball curvature estimate.
pub const MAX_BALL_ROUNDS: usize = 10;
pub const BALL_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimalR {
    pub r_star: f64,
    /// `f64::INFINITY` when the margin is constant (`g = K = 0`).
    pub bound: f64,
}

/// Maximizer of `min{R, f/(g + R·K/2)}` over `R > 0`.
///
/// The first branch increases and the second decreases in `R`, so the
/// optimum sits at their intersection `R² K/2 + R g − f = 0`.
pub fn optimal_r(f: f64, g: f64, k: f64) -> OptimalR {
    if f <= 0.0 {
        return OptimalR {
            r_star: 0.0,
            bound: 0.0,
        };
    }
    if k > 0.0 {
        // (−g + √(g² + 2Kf)) / K, written to avoid cancellation when g² ≫ Kf
        let r = 2.0 * f / (g + (g * g + 2.0 * k * f).sqrt());
        return OptimalR { r_star: r, bound: r };
    }
    if g > 0.0 {
        let r = f / g;
        OptimalR { r_star: r, bound: r }
    } else {
        OptimalR {
            r_star: f64::INFINITY,
            bound: f64::INFINITY,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    First,
    Second,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CertMode {
    Point,
    SampledBall { samples: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Soundness {
    /// Curvature (or gradient) bound is exact for this model class.
    Exact,
    /// Ball maxima are estimated from samples and can be too small.
    Heuristic,
}

fn ser_bound<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("unbounded")
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassBound {
    pub class: usize,
    /// `f_t(x) − f_j(x)`.
    pub margin: f64,
    pub grad_norm: f64,
    /// Curvature estimate (second order) or ball gradient maximum (first order).
    #[serde(serialize_with = "ser_bound")]
    pub k_est: f64,
    #[serde(serialize_with = "ser_bound")]
    pub r_star: f64,
    #[serde(serialize_with = "ser_bound")]
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Certificate {
    pub sample: usize,
    pub label: Option<usize>,
    pub predicted: usize,
    pub order: Order,
    pub mode: CertMode,
    pub q: Lp,
    pub components: Vec<ClassBound>,
    #[serde(serialize_with = "ser_bound")]
    pub bound: f64,
    pub soundness: Soundness,
}

impl Certificate {
    pub fn is_unbounded(&self) -> bool {
        self.bound.is_infinite()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CertOptions {
    pub mode: CertMode,
    /// Dual norm of the perturbation norm; second order needs `q = 2`.
    pub q: Lp,
    pub probe: OpNormProbe,
    pub seed: u64,
}

impl Default for CertOptions {
    fn default() -> Self {
        CertOptions {
            mode: CertMode::Point,
            q: Lp::L2,
            probe: OpNormProbe::evaluation(200, 0),
            seed: 0,
        }
    }
}

/// Margins, their gradient norms and the rows `(t, j)` for one sample.
struct Local {
    predicted: usize,
    classes: Vec<usize>,
    margins: Vec<f64>,
    grad_norms: Vec<f64>,
}

fn stack_rows(x: &Tensor, n: usize) -> Result<Tensor> {
    Tensor::stack(&vec![x.clone(); n])
}

fn local(scorer: &dyn Scorer, x: &Tensor, q: Lp) -> Result<Local> {
    let logits = crate::models::score(scorer, x)?;
    let t = logits.argmax();
    let classes: Vec<usize> = (0..scorer.num_classes()).filter(|&j| j != t).collect();
    let pairs: Vec<(usize, usize)> = classes.iter().map(|&j| (t, j)).collect();
    let mut mg = margin_graph_pairs(scorer, &stack_rows(x, pairs.len())?, &pairs)?;
    let margins = mg.row_margins()?.into_data();
    let g = mg.graph.gradient(mg.output, &[mg.x])?.remove(0);
    let d = mg.sample_dim();
    let grad_norms = (0..pairs.len())
        .map(|r| q.norm(&g.data()[r * d..(r + 1) * d]))
        .collect();
    Ok(Local {
        predicted: t,
        classes,
        margins,
        grad_norms,
    })
}

/// Uniform draws from the unit ℓ_p ball (`p = 2` or `∞`), `[m, d]`.
fn unit_ball_samples(m: usize, d: usize, p: Lp, seed: u64, key: u64) -> Vec<Vec<f64>> {
    use rand::Rng;
    let mut r = rng::stream(seed, &[key, 0xba11]);
    (0..m)
        .map(|_| match p {
            Lp::LInf => (0..d).map(|_| r.random_range(-1.0..=1.0)).collect(),
            _ => {
                let dir = rng::unit_direction(&mut r, &[d], Lp::L2);
                let u: f64 = r.random();
                let s = u.powf(1.0 / d as f64);
                dir.data().iter().map(|v| v * s).collect()
            }
        })
        .collect()
}

/// Per-class operator-norm estimates at `points` (each shaped like `x`), maximized over points.
fn max_curvature(
    scorer: &dyn Scorer,
    points: &[Tensor],
    t: usize,
    classes: &[usize],
    probe: &OpNormProbe,
) -> Result<Vec<f64>> {
    let mut rows = Vec::with_capacity(points.len() * classes.len());
    let mut pairs = Vec::with_capacity(rows.capacity());
    let mut keys = Vec::with_capacity(rows.capacity());
    for (m, p) in points.iter().enumerate() {
        for &j in classes {
            rows.push(p.clone());
            pairs.push((t, j));
            keys.push((m * scorer.num_classes() + j) as u64);
        }
    }
    let mut mg = margin_graph_pairs(scorer, &Tensor::stack(&rows)?, &pairs)?;
    let est = estimate_opnorm_rows(&mut mg, probe, &keys)?;
    let mut out = vec![0.0f64; classes.len()];
    for (r, e) in est.iter().enumerate() {
        let c = r % classes.len();
        out[c] = out[c].max(e.value);
    }
    Ok(out)
}

fn shifted(x: &Tensor, unit: &[f64], radius: f64) -> Tensor {
    let mut p = x.clone();
    for (v, u) in p.data_mut().iter_mut().zip(unit) {
        *v += radius * u;
    }
    p
}

fn misclassified(
    sample: usize,
    label: Option<usize>,
    loc: &Local,
    order: Order,
    opts: &CertOptions,
) -> Option<Certificate> {
    match label {
        Some(y) if y != loc.predicted => Some(Certificate {
            sample,
            label,
            predicted: loc.predicted,
            order,
            mode: opts.mode,
            q: opts.q,
            components: Vec::new(),
            bound: 0.0,
            soundness: Soundness::Exact,
        }),
        _ => None,
    }
}

fn finish(
    sample: usize,
    label: Option<usize>,
    loc: &Local,
    order: Order,
    opts: &CertOptions,
    components: Vec<ClassBound>,
    exact: bool,
) -> Certificate {
    let bound = components.iter().map(|c| c.bound).fold(f64::INFINITY, f64::min);
    Certificate {
        sample,
        label,
        predicted: loc.predicted,
        order,
        mode: opts.mode,
        q: opts.q,
        components,
        bound,
        soundness: if exact { Soundness::Exact } else { Soundness::Heuristic },
    }
}

/// Curvature-aware bound `min_j max_R min{R, f_j/(‖∇f_j‖ + R·K_j/2)}` at `x`.
///
/// A `label` that differs from the prediction yields bound 0.
pub fn second_order_certificate(
    scorer: &dyn Scorer,
    x: &Tensor,
    sample: usize,
    label: Option<usize>,
    opts: &CertOptions,
) -> Result<Certificate> {
    if opts.q != Lp::L2 {
        return Err(Error::UnsupportedNorm("second-order certificates need q = 2"));
    }
    let loc = local(scorer, x, opts.q)?;
    if let Some(c) = misclassified(sample, label, &loc, Order::Second, opts) {
        return Ok(c);
    }
    let t = loc.predicted;
    let probe = OpNormProbe {
        seed: opts.probe.seed ^ sample as u64,
        ..opts.probe
    };
    let mut k = max_curvature(scorer, std::slice::from_ref(x), t, &loc.classes, &probe)?;
    let solve = |k: &[f64]| -> Vec<OptimalR> {
        (0..loc.classes.len())
            .map(|c| optimal_r(loc.margins[c], loc.grad_norms[c], k[c]))
            .collect()
    };
    let mut opt = solve(&k);
    if let CertMode::SampledBall { samples } = opts.mode {
        let d = x.len();
        let unit = unit_ball_samples(samples, d, Lp::L2, opts.seed, sample as u64);
        let k_point = k.clone();
        for _ in 0..MAX_BALL_ROUNDS {
            let radius = opt
                .iter()
                .map(|o| o.r_star)
                .filter(|r| r.is_finite())
                .fold(0.0f64, f64::max);
            if radius == 0.0 {
                break;
            }
            let points: Vec<Tensor> = unit.iter().map(|u| shifted(x, u, radius)).collect();
            let k_ball = max_curvature(scorer, &points, t, &loc.classes, &probe)?;
            k = k_point.iter().zip(&k_ball).map(|(a, b)| a.max(*b)).collect();
            let next = solve(&k);
            let change = next
                .iter()
                .zip(&opt)
                .map(|(a, b)| {
                    if a.r_star == b.r_star {
                        0.0
                    } else {
                        (a.r_star - b.r_star).abs()
                    }
                })
                .fold(0.0f64, f64::max);
            opt = next;
            if change < BALL_TOLERANCE {
                break;
            }
        }
    }
    let components = (0..loc.classes.len())
        .map(|c| ClassBound {
            class: loc.classes[c],
            margin: loc.margins[c],
            grad_norm: loc.grad_norms[c],
            k_est: k[c],
            r_star: opt[c].r_star,
            bound: opt[c].bound,
        })
        .collect();
    Ok(finish(
        sample,
        label,
        &loc,
        Order::Second,
        opts,
        components,
        scorer.constant_hessian(),
    ))
}

/// Gradient-only bound `min_j max_R min{R, f_j / max_{‖γ‖≤R} ‖∇f_j(x+γ)‖_q}`.
///
/// Point mode uses the gradient at `x`; sampled-ball mode bisects on `R`
/// using the largest gradient norm over fixed unit-ball samples scaled by `R`.
pub fn first_order_certificate(
    scorer: &dyn Scorer,
    x: &Tensor,
    sample: usize,
    label: Option<usize>,
    opts: &CertOptions,
) -> Result<Certificate> {
    let loc = local(scorer, x, opts.q)?;
    if let Some(c) = misclassified(sample, label, &loc, Order::First, opts) {
        return Ok(c);
    }
    let n = loc.classes.len();
    let mut components = Vec::with_capacity(n);
    match opts.mode {
        CertMode::Point => {
            for c in 0..n {
                let o = optimal_r(loc.margins[c], loc.grad_norms[c], 0.0);
                components.push(ClassBound {
                    class: loc.classes[c],
                    margin: loc.margins[c],
                    grad_norm: loc.grad_norms[c],
                    k_est: loc.grad_norms[c],
                    r_star: o.r_star,
                    bound: o.bound,
                });
            }
        }
        CertMode::SampledBall { samples } => {
            let p = opts.q.dual();
            let unit = unit_ball_samples(samples, x.len(), p, opts.seed, sample as u64);
            let pairs: Vec<(usize, usize)> = (0..=samples)
                .flat_map(|_| loc.classes.iter().map(|&j| (loc.predicted, j)))
                .collect();
            let mut mg = margin_graph_pairs(scorer, &stack_rows(x, pairs.len())?, &pairs)?;
            let grads = mg.graph.grad(mg.output, &[mg.x])?[0];
            let d = x.len();
            let mut ball_max = |radius: f64| -> Result<Vec<f64>> {
                let mut rows = Vec::with_capacity(pairs.len());
                rows.push(x.clone());
                rows.extend(unit.iter().map(|u| shifted(x, u, radius)));
                let mut data = Vec::with_capacity(pairs.len() * d);
                for r in &rows {
                    for _ in 0..n {
                        data.extend_from_slice(r.data());
                    }
                }
                let mut shape = vec![pairs.len()];
                shape.extend_from_slice(x.shape());
                mg.bind_inputs(&Tensor::new(shape, data)?)?;
                let g = mg.graph.value(grads)?;
                let mut out = vec![0.0f64; n];
                for r in 0..pairs.len() {
                    out[r % n] = out[r % n].max(opts.q.norm(&g.data()[r * d..(r + 1) * d]));
                }
                Ok(out)
            };
            for c in 0..n {
                let f = loc.margins[c];
                let mut comp = ClassBound {
                    class: loc.classes[c],
                    margin: f,
                    grad_norm: loc.grad_norms[c],
                    k_est: loc.grad_norms[c],
                    r_star: 0.0,
                    bound: 0.0,
                };
                if f > 0.0 {
                    // h(R) = R·G_R − f changes sign at the optimum
                    let mut hi = if loc.grad_norms[c] > 0.0 {
                        f / loc.grad_norms[c]
                    } else {
                        1.0
                    };
                    let mut g_hi = ball_max(hi)?[c];
                    let mut grow = 0;
                    while hi * g_hi < f && grow < 60 {
                        hi *= 2.0;
                        g_hi = ball_max(hi)?[c];
                        grow += 1;
                    }
                    if hi * g_hi < f {
                        comp.r_star = f64::INFINITY;
                        comp.bound = f64::INFINITY;
                        comp.k_est = g_hi;
                    } else {
                        let (mut lo, mut g_lo) = (0.0, loc.grad_norms[c]);
                        for _ in 0..60 {
                            if hi - lo <= 1e-12 * hi {
                                break;
                            }
                            let mid = 0.5 * (lo + hi);
                            let g_mid = ball_max(mid)?[c];
                            if mid * g_mid < f {
                                lo = mid;
                                g_lo = g_mid;
                            } else {
                                hi = mid;
                            }
                        }
                        comp.r_star = lo;
                        comp.bound = lo;
                        comp.k_est = g_lo;
                    }
                }
                components.push(comp);
            }
        }
    }
    Ok(finish(
        sample,
        label,
        &loc,
        Order::First,
        opts,
        components,
        scorer.affine(),
    ))
}

/// Mean and median of the finite bounds, with the count of unbounded ones.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CertSummary {
    pub n_samples: usize,
    pub mean_bound: f64,
    pub median_bound: f64,
    pub unbounded: usize,
}

pub fn summarize(certs: &[Certificate]) -> CertSummary {
    let mut finite: Vec<f64> = certs.iter().map(|c| c.bound).filter(|b| b.is_finite()).collect();
    finite.sort_by(f64::total_cmp);
    let n = finite.len();
    let median = match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => finite[n / 2],
        _ => 0.5 * (finite[n / 2 - 1] + finite[n / 2]),
    };
    CertSummary {
        n_samples: certs.len(),
        mean_bound: if n == 0 {
            f64::NAN
        } else {
            finite.iter().sum::<f64>() / n as f64
        },
        median_bound: median,
        unbounded: certs.len() - n,
    }
}
