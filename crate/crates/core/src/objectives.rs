//! Self-supervised losses: NT-Xent, debiased entropic Sinkhorn divergence,
//! their hybrid, and the dual-path/cross-modal composition used in
//! pretraining.

use auscult_tensor::{Axis, Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    /// L1 row-marginal violation that ends iteration early; 0 runs all iterations.
    pub marginal_tol: f64,
    pub debiased: bool,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            max_iters: 200,
            marginal_tol: 1e-6,
            debiased: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub temperature: f64,
    /// Weight of the Wasserstein term in the hybrid.
    pub alpha: f64,
    pub sinkhorn: SinkhornConfig,
    /// Weights of the within-1D, within-2D and cross-modal terms.
    pub weights: (f64, f64, f64),
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            alpha: 0.3,
            sinkhorn: SinkhornConfig::default(),
            weights: (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return invalid("loss config", "temperature must be positive");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return invalid("loss config", "alpha outside [0, 1]");
        }
        if !(self.sinkhorn.epsilon > 0.0) || self.sinkhorn.max_iters == 0 {
            return invalid("loss config", "sinkhorn epsilon and max_iters must be positive");
        }
        let (a, b, c) = self.weights;
        if a < 0.0 || b < 0.0 || c < 0.0 {
            return invalid("loss config", "composition weights must be non-negative");
        }
        Ok(())
    }
}

fn rows_match<T: Scalar>(op: &'static str, g: &Graph<T>, za: Var, zb: Var) -> Result<(usize, usize)> {
    let (sa, sb) = (g.shape(za), g.shape(zb));
    match (sa, sb) {
        ([n, d], [m, e]) if n == m && d == e && *n > 0 => Ok((*n, *d)),
        ([0, _], _) | (_, [0, _]) => invalid(op, "empty batch"),
        _ => invalid(op, format!("mismatched batches {sa:?} and {sb:?}")),
    }
}

/// Mean over all 2N anchors of −log softmax of the positive among the other
/// 2N−1 cosine similarities divided by τ.
pub fn ntxent<T: Scalar>(g: &mut Graph<T>, za: Var, zb: Var, tau: f64) -> Result<Var> {
    let (n, _) = rows_match("ntxent", g, za, zb)?;
    let z = g.concat(&[za, zb], 0)?;
    let z = g.l2_normalize_rows(z)?;
    let zt = g.transpose(z)?;
    let sim = g.matmul(z, zt)?;
    let sim = g.scale(sim, T::lit(1.0 / tau));
    let m = 2 * n;
    let mask = g.constant(Tensor::from_fn(&[m, m], |k| {
        if k / m == k % m {
            T::neg_infinity()
        } else {
            T::zero()
        }
    }));
    let logits = g.add(sim, mask)?;
    let lse = g.logsumexp(logits, Axis::Cols)?;
    let idx: Vec<usize> = (0..m).map(|i| (i + n) % m).collect();
    let pos = g.pick(logits, &idx)?;
    let per = g.sub(lse, pos)?;
    Ok(g.mean_all(per))
}

/// Result of a log-domain Sinkhorn solve.
#[derive(Debug, Clone, PartialEq)]
pub struct OtSolution {
    /// Dual objective ⟨a, f⟩ + ⟨b, g⟩.
    pub cost: f64,
    pub iters: usize,
    pub converged: bool,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
}

fn lse(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn on an `m × n` row-major cost with marginals `a`, `b`,
/// starting from zero potentials. Each iteration updates f then g; the
/// row-marginal violation is checked after every iteration.
pub fn sinkhorn_solve(cost: &[f64], a: &[f64], b: &[f64], cfg: &SinkhornConfig) -> OtSolution {
    let (m, n) = (a.len(), b.len());
    let eps = cfg.epsilon;
    let neg = -1.0 / eps;
    let mc: Vec<f64> = cost.iter().map(|c| c * neg).collect();
    let (la, lb): (Vec<f64>, Vec<f64>) = (a.iter().map(|v| v.ln()).collect(), b.iter().map(|v| v.ln()).collect());
    let mut f = vec![0.0; m];
    let mut g = vec![0.0; n];
    let mut iters = 0;
    let mut converged = false;
    while iters < cfg.max_iters {
        for i in 0..m {
            let row = &mc[i * n..(i + 1) * n];
            f[i] = -eps * lse((0..n).map(|j| row[j] + (g[j] / eps + lb[j])));
        }
        for j in 0..n {
            g[j] = -eps * lse((0..m).map(|i| mc[i * n + j] + (f[i] / eps + la[i])));
        }
        iters += 1;
        let viol: f64 = (0..m)
            .map(|i| {
                let r: f64 = (0..n)
                    .map(|j| (mc[i * n + j] + f[i] / eps + g[j] / eps + la[i] + lb[j]).exp())
                    .sum();
                (r - a[i]).abs()
            })
            .sum();
        if viol < cfg.marginal_tol {
            converged = true;
            break;
        }
    }
    let cost = a.iter().zip(&f).map(|(x, y)| x * y).sum::<f64>() + b.iter().zip(&g).map(|(x, y)| x * y).sum::<f64>();
    OtSolution {
        cost,
        iters,
        converged,
        f,
        g,
    }
}

fn normalize_rows(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}

pub fn sq_euclid_cost(x: &[Vec<f64>], y: &[Vec<f64>]) -> Vec<f64> {
    x.iter()
        .flat_map(|a| y.iter().map(move |b| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()))
        .collect()
}

/// Entropic OT between uniform empirical measures on raw point sets.
pub fn entropic_ot(x: &[Vec<f64>], y: &[Vec<f64>], cfg: &SinkhornConfig) -> OtSolution {
    let a = vec![1.0 / x.len() as f64; x.len()];
    let b = vec![1.0 / y.len() as f64; y.len()];
    sinkhorn_solve(&sq_euclid_cost(x, y), &a, &b, cfg)
}

/// Sinkhorn divergence between row sets after L2 normalization, computed
/// directly on arrays. Debiased unless configured otherwise.
pub fn sinkhorn_divergence(x: &[Vec<f64>], y: &[Vec<f64>], cfg: &SinkhornConfig) -> f64 {
    sinkhorn_divergence_raw(&normalize_rows(x), &normalize_rows(y), cfg)
}

/// As [`sinkhorn_divergence`] but on the points as given.
pub fn sinkhorn_divergence_raw(x: &[Vec<f64>], y: &[Vec<f64>], cfg: &SinkhornConfig) -> f64 {
    let xy = entropic_ot(x, y, cfg).cost;
    if !cfg.debiased {
        return xy;
    }
    xy - 0.5 * entropic_ot(x, x, cfg).cost - 0.5 * entropic_ot(y, y, cfg).cost
}

fn to_rows<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let d = t.shape()[1];
    t.data()
        .chunks(d)
        .map(|r| r.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect())
        .collect()
}

/// OT_ε(μ_x, μ_y) on the graph, unrolling exactly as many iterations as the
/// array solver needs on the current values.
fn ot_graph<T: Scalar>(g: &mut Graph<T>, x: Var, y: Var, cfg: &SinkhornConfig) -> Result<Var> {
    let (m, n) = (g.shape(x)[0], g.shape(y)[0]);
    let eps = cfg.epsilon;
    let c = g.sqdist(x, y)?;
    let a_vals = vec![1.0 / m as f64; m];
    let b_vals = vec![1.0 / n as f64; n];
    let cost_vals: Vec<f64> = g.value(c).data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    let iters = sinkhorn_solve(&cost_vals, &a_vals, &b_vals, cfg).iters;

    let mc = g.scale(c, T::lit(-1.0 / eps));
    let la = g.constant(Tensor::full(&[m], T::lit((1.0 / m as f64).ln())));
    let lb = g.constant(Tensor::full(&[n], T::lit((1.0 / n as f64).ln())));
    let mut gp = g.constant(Tensor::zeros(&[n]));
    let mut fp = g.constant(Tensor::zeros(&[m]));
    for _ in 0..iters {
        let gs = g.scale(gp, T::lit(1.0 / eps));
        let gs = g.add(gs, lb)?;
        let s = g.add_row(mc, gs)?;
        let l = g.logsumexp(s, Axis::Cols)?;
        fp = g.scale(l, T::lit(-eps));
        let fs = g.scale(fp, T::lit(1.0 / eps));
        let fs = g.add(fs, la)?;
        let s = g.add_col(mc, fs)?;
        let l = g.logsumexp(s, Axis::Rows)?;
        gp = g.scale(l, T::lit(-eps));
    }
    let af = g.sum_all(fp);
    let af = g.scale(af, T::lit(1.0 / m as f64));
    let bg = g.sum_all(gp);
    let bg = g.scale(bg, T::lit(1.0 / n as f64));
    Ok(g.add(af, bg)?)
}

/// Debiased Sinkhorn divergence between the L2-normalized rows of `za` and
/// `zb`, differentiated through the unrolled iterations.
pub fn sinkhorn_w2<T: Scalar>(g: &mut Graph<T>, za: Var, zb: Var, cfg: &SinkhornConfig) -> Result<Var> {
    let (sa, sb) = (g.shape(za).to_vec(), g.shape(zb).to_vec());
    if sa.len() != 2 || sb.len() != 2 || sa[0] == 0 || sb[0] == 0 || sa[1] != sb[1] {
        return invalid("sinkhorn_w2", format!("bad batches {sa:?} and {sb:?}"));
    }
    let x = g.l2_normalize_rows(za)?;
    let y = g.l2_normalize_rows(zb)?;
    let xy = ot_graph(g, x, y, cfg)?;
    if !cfg.debiased {
        return Ok(xy);
    }
    let xx = ot_graph(g, x, x, cfg)?;
    let yy = ot_graph(g, y, y, cfg)?;
    let s = g.add(xx, yy)?;
    let s = g.scale(s, T::lit(0.5));
    Ok(g.sub(xy, s)?)
}

/// Graph nodes of one hybrid term. Components whose weight is zero are not
/// built and read as the constant 0.
#[derive(Debug, Clone, Copy)]
pub struct HybridTerm {
    pub total: Var,
    pub ntxent: Var,
    pub wasserstein: Var,
}

pub fn hybrid<T: Scalar>(g: &mut Graph<T>, za: Var, zb: Var, cfg: &LossConfig) -> Result<HybridTerm> {
    rows_match("hybrid", g, za, zb)?;
    let zero = || Tensor::scalar(T::zero());
    let nt = if cfg.alpha < 1.0 {
        ntxent(g, za, zb, cfg.temperature)?
    } else {
        g.constant(zero())
    };
    let w = if cfg.alpha > 0.0 {
        sinkhorn_w2(g, za, zb, &cfg.sinkhorn)?
    } else {
        g.constant(zero())
    };
    let total = if cfg.alpha == 0.0 {
        nt
    } else if cfg.alpha == 1.0 {
        w
    } else {
        let a = g.scale(w, T::lit(cfg.alpha));
        let b = g.scale(nt, T::lit(1.0 - cfg.alpha));
        g.add(a, b)?
    };
    Ok(HybridTerm {
        total,
        ntxent: nt,
        wasserstein: w,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<V> {
    pub total: V,
    pub ntxent: V,
    pub wasserstein: V,
    pub term_1d: V,
    pub term_2d: V,
    pub term_cross: V,
}

impl LossBreakdown<Var> {
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> LossBreakdown<f64> {
        let v = |x: Var| g.value(x).item().to_f64().unwrap_or(f64::NAN);
        LossBreakdown {
            total: v(self.total),
            ntxent: v(self.ntxent),
            wasserstein: v(self.wasserstein),
            term_1d: v(self.term_1d),
            term_2d: v(self.term_2d),
            term_cross: v(self.term_cross),
        }
    }
}

fn weighted_sum<T: Scalar>(g: &mut Graph<T>, parts: &[(f64, Var)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(w, v) in parts {
        let s = g.scale(v, T::lit(w));
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    Ok(acc.unwrap_or_else(|| g.constant(Tensor::scalar(T::zero()))))
}

/// total = w₁·H(z1a, z1b) + w₂·H(z2a, z2b) + w_c·½[H(z1a, z2a) + H(z1b, z2b)],
/// with H the hybrid term. Zero-weighted terms are skipped; the spectrogram
/// pair may be absent only when w₂ = w_c = 0.
pub fn pretrain_objective<T: Scalar>(
    g: &mut Graph<T>,
    z1a: Var,
    z1b: Var,
    z2: Option<(Var, Var)>,
    cfg: &LossConfig,
) -> Result<LossBreakdown<Var>> {
    let (w1, w2, wc) = cfg.weights;
    rows_match("pretrain_objective", g, z1a, z1b)?;
    if z2.is_none() && (w2 > 0.0 || wc > 0.0) {
        return invalid("pretrain_objective", "spectrogram embeddings required by non-zero weights");
    }
    let zero = g.constant(Tensor::scalar(T::zero()));
    let empty = HybridTerm {
        total: zero,
        ntxent: zero,
        wasserstein: zero,
    };
    let h1 = if w1 > 0.0 { hybrid(g, z1a, z1b, cfg)? } else { empty };
    let (h2, hca, hcb) = match z2 {
        Some((z2a, z2b)) => {
            rows_match("pretrain_objective", g, z1a, z2a)?;
            rows_match("pretrain_objective", g, z2a, z2b)?;
            let h2 = if w2 > 0.0 { hybrid(g, z2a, z2b, cfg)? } else { empty };
            let (ca, cb) = if wc > 0.0 {
                (hybrid(g, z1a, z2a, cfg)?, hybrid(g, z1b, z2b, cfg)?)
            } else {
                (empty, empty)
            };
            (h2, ca, cb)
        }
        None => (empty, empty, empty),
    };
    let pick = |f: fn(&HybridTerm) -> Var| [(w1, f(&h1)), (w2, f(&h2)), (0.5 * wc, f(&hca)), (0.5 * wc, f(&hcb))];
    let active = |parts: [(f64, Var); 4]| parts.into_iter().filter(|(w, _)| *w > 0.0).collect::<Vec<_>>();
    let total = weighted_sum(g, &active(pick(|h| h.total)))?;
    let ntx = weighted_sum(g, &active(pick(|h| h.ntxent)))?;
    let was = weighted_sum(g, &active(pick(|h| h.wasserstein)))?;
    let cross = weighted_sum(g, &[(0.5, hca.total), (0.5, hcb.total)])?;
    Ok(LossBreakdown {
        total,
        ntxent: ntx,
        wasserstein: was,
        term_1d: h1.total,
        term_2d: h2.total,
        term_cross: cross,
    })
}

/// Convenience: evaluates a loss builder on constant inputs in f64.
pub fn eval_rows(rows: &[&[Vec<f64>]], build: impl FnOnce(&mut Graph<f64>, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::<f64>::eval();
    let vars: Vec<Var> = rows
        .iter()
        .map(|r| {
            let d = r.first().map_or(0, |x| x.len());
            let t = Tensor::new(&[r.len(), d], r.iter().flatten().copied().collect()).expect("rectangular rows");
            g.constant(t)
        })
        .collect();
    let out = build(&mut g, &vars)?;
    Ok(g.value(out).item())
}

pub fn rows_of<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    to_rows(t)
}
