//! Input-Hessian operator norm `max_{‖v‖_p = 1} ‖H v‖_q` by projected gradient ascent.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::models::MarginGraph;
use crate::rng;
use crate::tensor::{Lp, Tensor};

const UNIT_TOLERANCE: f64 = 1e-9;

/// Ascent settings. The direction norm `p` is the dual of `q`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpNormProbe {
    /// Iterations `T` per start.
    pub steps: usize,
    /// Step size `o`.
    pub step_size: f64,
    pub q: Lp,
    /// Random starts.
    pub starts: usize,
    /// Also start from the normalized input gradient.
    pub gradient_start: bool,
    pub seed: u64,
}

impl Default for OpNormProbe {
    fn default() -> Self {
        OpNormProbe {
            steps: 10,
            step_size: 0.1,
            q: Lp::L2,
            starts: 1,
            gradient_start: false,
            seed: 0,
        }
    }
}

impl OpNormProbe {
    /// Evaluation setting: five random starts plus the gradient direction.
    pub fn evaluation(steps: usize, seed: u64) -> Self {
        OpNormProbe {
            steps,
            starts: 5,
            gradient_start: true,
            seed,
            ..Self::default()
        }
    }

    pub fn p(&self) -> Lp {
        self.q.dual()
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps", "need at least one ascent iteration"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config("step_size", "must be a positive finite number"));
        }
        if self.starts == 0 && !self.gradient_start {
            return Err(Error::config("starts", "need at least one start"));
        }
        if self.q != Lp::L2 {
            return Err(Error::UnsupportedNorm(
                "gradient ascent on ‖Hv‖_q is only differentiable for q = 2",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpNormEstimate {
    /// `‖H v*‖_q`.
    pub value: f64,
    /// Maximizing unit direction, shaped like one input sample.
    pub v_star: Tensor,
    pub iterations_used: usize,
    /// No direction produced nonzero curvature (locally linear margin).
    pub degenerate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HgEstimate {
    pub value: f64,
    /// The input gradient vanished, so no direction was defined.
    pub degenerate: bool,
}

/// Curvature subgraph for a row-separable scalar `output` of a batched input `x`.
///
/// `hv` holds `H_i v_i` per row and `norms` its row-wise ℓ2 norms; `ascent`
/// is `∇_V Σ_i ‖H_i v_i‖₂`, whose row `i` is `∇_{v_i}‖H_i v_i‖₂`.
#[derive(Clone, Copy, Debug)]
pub struct CurvatureNodes {
    pub v: NodeId,
    pub grad: NodeId,
    pub hv: NodeId,
    pub norms: NodeId,
    pub ascent: NodeId,
    pub rows: usize,
    pub dim: usize,
}

impl CurvatureNodes {
    pub fn build(g: &mut Graph, output: NodeId, x: NodeId) -> Result<Self> {
        let rows = g.shape(x)[0];
        let dim = g.numel(x) / rows.max(1);
        let h = g.hvp_nodes(output, x)?;
        let flat = g.reshape(h.hv, &[rows, dim])?;
        let norms = g.norm_last(flat)?;
        let total = g.sum(norms)?;
        let ascent = g.grad(total, &[h.v])?[0];
        Ok(CurvatureNodes {
            v: h.v,
            grad: h.grad,
            hv: h.hv,
            norms,
            ascent,
            rows,
            dim,
        })
    }

    /// Row-wise `‖H_i v_i‖_q` for directions `v`.
    pub fn eval_norms(&self, g: &mut Graph, v: &Tensor, q: Lp) -> Result<Vec<f64>> {
        g.bind(self.v, v.clone())?;
        if q == Lp::L2 {
            return Ok(g.value(self.norms)?.data().to_vec());
        }
        let hv = g.value(self.hv)?;
        Ok((0..self.rows)
            .map(|r| q.norm(&hv.data()[r * self.dim..(r + 1) * self.dim]))
            .collect())
    }

    /// Fixed-step ascent `v ← (v + o ∇_v‖Hv‖₂) / ‖·‖₂` from `v0`, tracking the best iterate per row.
    pub fn ascend(&self, g: &mut Graph, v0: Tensor, steps: usize, step_size: f64) -> Result<Ascent> {
        let d = self.dim;
        let mut v = v0;
        let mut best = vec![f64::NEG_INFINITY; self.rows];
        let mut v_best = v.clone();
        let mut last = Vec::new();
        let mut updates = 0;
        for t in 0..=steps {
            g.bind(self.v, v.clone())?;
            let norms = g.value(self.norms)?.data().to_vec();
            if norms.iter().any(|n| !n.is_finite()) {
                return Err(Error::Divergence(
                    "non-finite Hessian-vector product during operator-norm ascent".into(),
                ));
            }
            for (r, &n) in norms.iter().enumerate() {
                if n > best[r] {
                    best[r] = n;
                    v_best.data_mut()[r * d..(r + 1) * d].copy_from_slice(&v.data()[r * d..(r + 1) * d]);
                }
            }
            last = norms;
            if t == steps {
                break;
            }
            let step = g.value(self.ascent)?.clone();
            let prev = v.clone();
            v.axpy(step_size, &step)?;
            for r in 0..self.rows {
                let row = &mut v.data_mut()[r * d..(r + 1) * d];
                if Lp::L2.normalize(row) == 0.0 {
                    row.copy_from_slice(&prev.data()[r * d..(r + 1) * d]);
                }
            }
            updates += 1;
        }
        Ok(Ascent {
            best,
            v_best,
            last,
            v_last: v,
            updates,
        })
    }
}

/// Result of [`CurvatureNodes::ascend`]; `v_*` tensors have the batched input shape.
#[derive(Clone, Debug)]
pub struct Ascent {
    pub best: Vec<f64>,
    pub v_best: Tensor,
    pub last: Vec<f64>,
    pub v_last: Tensor,
    /// Ascent-and-renormalize updates applied.
    pub updates: usize,
}

fn batched(margin: &MarginGraph, v: &Tensor) -> Result<Tensor> {
    let mut shape = vec![margin.batch];
    shape.extend(margin.sample_shape());
    if v.len() != margin.batch * margin.sample_dim() {
        return Err(Error::shape(
            "direction",
            format!("direction {:?} does not match input {:?}", v.shape(), shape),
        ));
    }
    v.clone().reshape(&shape)
}

fn check_unit_rows(v: &Tensor, rows: usize, p: Lp) -> Result<()> {
    let d = v.len() / rows.max(1);
    for r in 0..rows {
        let n = p.norm(&v.data()[r * d..(r + 1) * d]);
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::config(
                "v",
                format!("direction row {r} has {p}-norm {n}, expected 1"),
            ));
        }
    }
    Ok(())
}

/// `‖H v‖_q` for one sample, using a single Hessian-vector product.
pub fn g_eval(margin: &mut MarginGraph, v: &Tensor, q: Lp) -> Result<f64> {
    if margin.batch != 1 {
        return Err(Error::shape("g_eval", "single-sample margin graph required"));
    }
    Ok(g_eval_rows(margin, v, q)?[0])
}

/// Row-wise `‖H_i v_i‖_q`; `v` has the batched input shape.
pub fn g_eval_rows(margin: &mut MarginGraph, v: &Tensor, q: Lp) -> Result<Vec<f64>> {
    let v = batched(margin, v)?;
    check_unit_rows(&v, margin.batch, q.dual())?;
    let nodes = CurvatureNodes::build(&mut margin.graph, margin.output, margin.x)?;
    nodes.eval_norms(&mut margin.graph, &v, q)
}

/// Operator-norm estimate for a single-sample margin graph.
pub fn estimate_opnorm(margin: &mut MarginGraph, probe: &OpNormProbe) -> Result<OpNormEstimate> {
    if margin.batch != 1 {
        return Err(Error::shape("estimate_opnorm", "single-sample margin graph required"));
    }
    Ok(estimate_opnorm_rows(margin, probe, &[0])?.remove(0))
}

/// Per-row operator-norm estimates. `row_keys[i]` seeds row `i`'s random
/// starts, so a row's result does not depend on what it is batched with.
pub fn estimate_opnorm_rows(
    margin: &mut MarginGraph,
    probe: &OpNormProbe,
    row_keys: &[u64],
) -> Result<Vec<OpNormEstimate>> {
    probe.validate()?;
    if row_keys.len() != margin.batch {
        return Err(Error::shape("estimate_opnorm", "one row key per batch row required"));
    }
    let nodes = CurvatureNodes::build(&mut margin.graph, margin.output, margin.x)?;
    let sample_shape = margin.sample_shape();
    let mut batch_shape = vec![margin.batch];
    batch_shape.extend_from_slice(&sample_shape);
    let d = nodes.dim;

    let random_start = |start: usize| -> Tensor {
        let rows: Vec<Tensor> = row_keys
            .iter()
            .map(|&key| {
                let mut r = rng::stream(probe.seed, &[key, start as u64]);
                rng::unit_direction(&mut r, &[d], Lp::L2)
            })
            .collect();
        Tensor::stack(&rows)
            .and_then(|t| t.reshape(&batch_shape))
            .expect("row shapes agree")
    };

    let mut inits = Vec::new();
    if probe.gradient_start {
        let grad = margin.graph.value(nodes.grad)?.clone();
        let mut init = random_start(probe.starts);
        for r in 0..margin.batch {
            let mut row = grad.data()[r * d..(r + 1) * d].to_vec();
            if Lp::L2.normalize(&mut row) > 0.0 {
                init.data_mut()[r * d..(r + 1) * d].copy_from_slice(&row);
            }
        }
        inits.push(init);
    }
    inits.extend((0..probe.starts).map(random_start));

    let mut best = vec![f64::NEG_INFINITY; margin.batch];
    let mut v_best = Tensor::zeros(&batch_shape);
    for init in inits {
        let run = nodes.ascend(&mut margin.graph, init, probe.steps, probe.step_size)?;
        for r in 0..margin.batch {
            if run.best[r] > best[r] {
                best[r] = run.best[r];
                v_best.data_mut()[r * d..(r + 1) * d].copy_from_slice(&run.v_best.data()[r * d..(r + 1) * d]);
            }
        }
    }
    Ok((0..margin.batch)
        .map(|r| OpNormEstimate {
            value: best[r],
            v_star: Tensor::new(sample_shape.clone(), v_best.data()[r * d..(r + 1) * d].to_vec())
                .expect("row length matches sample shape"),
            iterations_used: probe.steps,
            degenerate: best[r] == 0.0,
        })
        .collect())
}

/// `‖H ĝ‖_q` with `ĝ = ∇f / ‖∇f‖_p`, for a single-sample margin graph.
pub fn hg_estimate(margin: &mut MarginGraph, q: Lp) -> Result<HgEstimate> {
    if margin.batch != 1 {
        return Err(Error::shape("hg_estimate", "single-sample margin graph required"));
    }
    Ok(hg_estimate_rows(margin, q)?[0])
}

pub fn hg_estimate_rows(margin: &mut MarginGraph, q: Lp) -> Result<Vec<HgEstimate>> {
    let nodes = CurvatureNodes::build(&mut margin.graph, margin.output, margin.x)?;
    let d = nodes.dim;
    let mut dirs = margin.graph.value(nodes.grad)?.clone();
    let mut zero = vec![false; margin.batch];
    for (r, z) in zero.iter_mut().enumerate() {
        *z = q.dual().normalize(&mut dirs.data_mut()[r * d..(r + 1) * d]) == 0.0;
    }
    let values = nodes.eval_norms(&mut margin.graph, &dirs, q)?;
    Ok(values
        .into_iter()
        .zip(zero)
        .map(|(value, degenerate)| HgEstimate {
            value: if degenerate { 0.0 } else { value },
            degenerate,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_mlp, margin_graph, QuadraticScorer, Scorer};
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn diag(d: &[f64]) -> Tensor {
        let n = d.len();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            a[i * n + i] = d[i];
        }
        Tensor::matrix(n, n, a).unwrap()
    }

    fn quad_margin(a: Tensor, b: Vec<f64>, x: Vec<f64>) -> MarginGraph {
        let q = QuadraticScorer::new(a, Tensor::vector(b), 0.0).unwrap();
        margin_graph(&q, &Tensor::vector(x), 0, 1).unwrap()
    }

    fn spectral_radius(a: &Tensor) -> f64 {
        let n = a.shape()[0];
        let m = DMatrix::from_row_slice(n, n, a.data());
        m.symmetric_eigenvalues().iter().fold(0.0f64, |acc, e| acc.max(e.abs()))
    }

    /// Symmetric matrix `Q diag(eigs) Qᵀ` with a random orthogonal `Q`.
    fn with_spectrum(eigs: &[f64], seed: u64) -> Tensor {
        let n = eigs.len();
        let mut r = rng::stream(seed, &[]);
        let g = rng::normal(&mut r, &[n, n]);
        let qr = DMatrix::from_row_slice(n, n, g.data()).qr();
        let q = qr.q();
        let a = &q * DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(eigs)) * q.transpose();
        let a = (&a + a.transpose()) * 0.5;
        Tensor::matrix(n, n, a.transpose().as_slice().to_vec()).unwrap()
    }

    #[test]
    fn g_eval_examples() {
        let mut m = quad_margin(diag(&[3.0, -5.0, 1.0]), vec![0.0; 3], vec![0.2, 0.1, -0.3]);
        assert!((g_eval(&mut m, &Tensor::vector(vec![0.0, 1.0, 0.0]), Lp::L2).unwrap() - 5.0).abs() < 1e-12);

        let lin = QuadraticScorer::linear(vec![1.0, -2.0], 0.5);
        let mut m = margin_graph(&lin, &Tensor::vector(vec![0.3, 0.4]), 0, 1).unwrap();
        assert_eq!(g_eval(&mut m, &Tensor::vector(vec![0.6, 0.8]), Lp::L2).unwrap(), 0.0);

        let s = 0.5f64.sqrt();
        let mut m = quad_margin(diag(&[2.0, 4.0]), vec![0.0; 2], vec![0.0, 0.0]);
        let g = g_eval(&mut m, &Tensor::vector(vec![s, s]), Lp::L2).unwrap();
        assert!((g - 10f64.sqrt()).abs() < 1e-12);
        // ℓ∞ output norm pairs with ℓ1-normalized directions
        let g = g_eval(&mut m, &Tensor::vector(vec![0.5, -0.5]), Lp::LInf).unwrap();
        assert!((g - 2.0).abs() < 1e-12);
        assert!(g_eval(&mut m, &Tensor::vector(vec![1.0, 1.0]), Lp::L2).is_err());
    }

    #[test]
    fn ascent_requires_q_two_and_valid_probe() {
        let mut m = quad_margin(diag(&[2.0, 4.0]), vec![0.0; 2], vec![0.0, 0.0]);
        for probe in [
            OpNormProbe {
                q: Lp::LInf,
                ..Default::default()
            },
            OpNormProbe {
                steps: 0,
                ..Default::default()
            },
            OpNormProbe {
                step_size: -0.1,
                ..Default::default()
            },
        ] {
            assert!(estimate_opnorm(&mut m, &probe).is_err());
        }
    }

    #[test]
    fn estimate_on_known_diagonal() {
        let mut m = quad_margin(diag(&[3.0, -5.0, 1.0]), vec![0.0; 3], vec![0.0; 3]);
        let est = estimate_opnorm(
            &mut m,
            &OpNormProbe {
                steps: 50,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((est.value - 5.0).abs() < 1e-6, "{}", est.value);
        assert!((est.v_star.norm(Lp::L2) - 1.0).abs() < 1e-12);
        assert_eq!(est.iterations_used, 50);
        assert!(!est.degenerate);
    }

    #[test]
    fn linear_margin_is_degenerate_zero() {
        let lin = QuadraticScorer::linear(vec![1.0, -2.0, 0.5], 0.0);
        let mut m = margin_graph(&lin, &Tensor::vector(vec![0.3, 0.4, 0.0]), 0, 1).unwrap();
        let est = estimate_opnorm(&mut m, &OpNormProbe::evaluation(10, 1)).unwrap();
        assert_eq!(est.value, 0.0);
        assert!(est.degenerate);
    }

    #[test]
    fn hg_examples() {
        // ∇f(0) = b = (0, 1) picks the smaller eigenvalue
        let mut m = quad_margin(diag(&[2.0, 1.0]), vec![0.0, 1.0], vec![0.0, 0.0]);
        let hg = hg_estimate(&mut m, Lp::L2).unwrap();
        assert!((hg.value - 1.0).abs() < 1e-12 && !hg.degenerate);
        let est = estimate_opnorm(&mut m, &OpNormProbe::evaluation(50, 0)).unwrap();
        assert!((est.value - 2.0).abs() < 1e-6);

        let mut m = quad_margin(diag(&[1.5; 4]), vec![0.3, -1.0, 0.2, 0.7], vec![0.1; 4]);
        assert!((hg_estimate(&mut m, Lp::L2).unwrap().value - 1.5).abs() < 1e-12);

        let mut m = quad_margin(diag(&[2.0, 1.0]), vec![0.0, 0.0], vec![0.0, 0.0]);
        let hg = hg_estimate(&mut m, Lp::L2).unwrap();
        assert_eq!(hg.value, 0.0);
        assert!(hg.degenerate);
    }

    #[test]
    fn ascent_direction_matches_two_stacked_hvps() {
        for seed in 0..5 {
            let a = with_spectrum(&[4.0, -2.5, 1.0, 0.3, -0.7], seed);
            let mut m = quad_margin(a, vec![0.1; 5], vec![0.2; 5]);
            let nodes = CurvatureNodes::build(&mut m.graph, m.output, m.x).unwrap();
            let mut r = rng::stream(seed, &[9]);
            let v = rng::unit_direction(&mut r, &[1, 5], Lp::L2);
            m.graph.bind(nodes.v, v.clone()).unwrap();
            let got = m.graph.value(nodes.ascent).unwrap().clone();
            let hv = m.graph.hvp(m.output, m.x, &v).unwrap();
            let hhv = m.graph.hvp(m.output, m.x, &hv).unwrap();
            let want = hhv.scale(1.0 / hv.norm(Lp::L2));
            assert!(got.sub(&want).unwrap().max_abs() <= 1e-8);
        }
    }

    #[test]
    fn matches_eigen_oracle_on_random_quadratics() {
        for seed in 0..10 {
            let mut r = rng::stream(seed, &[1]);
            let d = 4 + (seed as usize % 5) * 12;
            let eigs: Vec<f64> = rng::normal(&mut r, &[d]).data().iter().map(|e| 3.0 * e).collect();
            let a = with_spectrum(&eigs, seed);
            let truth = spectral_radius(&a);
            let mut m = quad_margin(a, vec![0.0; d], vec![0.0; d]);
            let est = estimate_opnorm(&mut m, &OpNormProbe::evaluation(400, seed)).unwrap();
            assert!(est.value <= truth * (1.0 + 1e-12));
            assert!(
                (truth - est.value) / truth < 1e-3,
                "d={d} est={} truth={truth}",
                est.value
            );
        }
    }

    #[test]
    fn small_mlp_matches_explicit_hessian() {
        let mut model = build_mlp(&[10], &[16], 3, 5).unwrap();
        // sharpen the network so curvature is O(1) rather than vanishing at init
        let theta = model.theta().scale(2.0);
        model.set_theta(theta).unwrap();
        let x = Tensor::vector((0..10).map(|i| 0.1 * i as f64 - 0.4).collect());
        let mut m = margin_graph(&model, &x, 0, 1).unwrap();
        let h = m.graph.explicit_hessian(m.output, m.x, 64).unwrap();
        let truth = spectral_radius(&h.reshape(&[10, 10]).unwrap());
        let est = estimate_opnorm(&mut m, &OpNormProbe::evaluation(200, 3)).unwrap();
        assert!(
            (truth - est.value).abs() / truth < 1e-3,
            "est {} truth {truth}",
            est.value
        );
    }

    #[test]
    fn batched_rows_match_single_rows() {
        let model = build_mlp(&[4], &[8], 3, 2).unwrap();
        let xs = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let pairs = [(0, 1), (2, 0), (1, 2)];
        let mut mg = crate::models::margin_graph_pairs(&model, &xs, &pairs).unwrap();
        let probe = OpNormProbe::evaluation(20, 4);
        let rows = estimate_opnorm_rows(&mut mg, &probe, &[10, 11, 12]).unwrap();
        for (r, &(t, j)) in pairs.iter().enumerate() {
            let mut single = margin_graph(&model, &xs.row(r), t, j).unwrap();
            let one = estimate_opnorm_rows(&mut single, &probe, &[10 + r as u64]).unwrap();
            assert!((one[0].value - rows[r].value).abs() < 1e-12);
        }
        assert_eq!(model.num_classes(), 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn dominates_gradient_direction(seed in 0u64..1000, d in 2usize..8) {
            let mut r = rng::stream(seed, &[2]);
            let eigs: Vec<f64> = rng::normal(&mut r, &[d]).data().to_vec();
            let a = with_spectrum(&eigs, seed);
            let b = rng::normal(&mut r, &[d]).into_data();
            let x = rng::normal(&mut r, &[d]).into_data();
            let mut m = quad_margin(a, b, x);
            let hg = hg_estimate(&mut m, Lp::L2).unwrap();
            let est = estimate_opnorm(&mut m, &OpNormProbe::evaluation(10, seed)).unwrap();
            prop_assert!(est.value >= hg.value - 1e-8);
        }

        #[test]
        fn scale_equivariant(seed in 0u64..1000, c in 0.5f64..10.0) {
            let a = with_spectrum(&[2.0, -1.0, 0.5], seed);
            let probe = OpNormProbe::evaluation(400, seed);
            let base = estimate_opnorm(&mut quad_margin(a.clone(), vec![0.0; 3], vec![0.0; 3]), &probe).unwrap();
            let scaled = estimate_opnorm(&mut quad_margin(a.scale(c), vec![0.0; 3], vec![0.0; 3]), &probe).unwrap();
            prop_assert!((scaled.value - c * base.value).abs() <= 1e-6 * c * base.value);
        }
    }
}
