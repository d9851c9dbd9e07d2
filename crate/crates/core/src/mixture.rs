//! Latent class mixture of simulated class-conditional likelihoods.
//!
//! Two evaluation paths exist. The reference functions
//! ([`class_conditional_sim_likelihood`], [`person_likelihood`],
//! [`total_loglik`]) compose the structural, measurement and choice
//! functions literally. [`Evaluator`] runs a fused kernel that streams over
//! draws once per respondent and class, accumulating the analytic gradient of
//! the log-likelihood together with its value.

use std::sync::Arc;

use rayon::prelude::*;

use crate::choice::{self, Coef, CovariateSource};
use crate::data::dataset::{Dataset, Respondent};
use crate::distributions::{
    compensated_sum, log_sum_exp, softmax, std_normal_interval, std_normal_pdf, CompensatedSum, PROB_FLOOR,
};
use crate::error::{Error, Result};
use crate::measurement::measurement_loglik;
use crate::params::{ClassIndex, ClassParams, CoefIndex, MembershipParams, ParamLayout, ParameterSet};
use crate::quasirandom::DrawSet;
use crate::structural::{latent_mean, latent_mean_into, realize_latents};

/// Membership terms with the intercept prepended when enabled.
pub fn membership_terms(z: &[f64], params: &MembershipParams) -> Vec<f64> {
    let mut t = Vec::with_capacity(z.len() + 1);
    if params.intercept {
        t.push(1.0);
    }
    t.extend_from_slice(z);
    t
}

/// softmax(0, γ₂ᵀz, …, γ_Qᵀz).
pub fn membership_probs(z: &[f64], params: &MembershipParams) -> Vec<f64> {
    let t = membership_terms(z, params);
    let mut u = Vec::with_capacity(params.gamma.len() + 1);
    u.push(0.0);
    for g in &params.gamma {
        u.push(g.iter().zip(&t).map(|(a, b)| a * b).sum());
    }
    softmax(&u)
}

/// Draw-averaged likelihood in log space for one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassLikelihood {
    pub log_value: f64,
    /// Indicator cells and choice probabilities floored at `PROB_FLOOR`.
    pub floored: usize,
}

fn check_draws(draws: &DrawSet, n: usize, dims: usize) -> Result<()> {
    if n >= draws.n_respondents() {
        return Err(Error::DrawCache(format!(
            "respondent {n} has no draws ({} respondents covered)",
            draws.n_respondents()
        )));
    }
    if draws.dims() < dims {
        return Err(Error::DrawCache(format!("draws cover {} dims but {dims} are needed", draws.dims())));
    }
    Ok(())
}

/// ln[(1/R)·Σ_r exp(choice loglik + measurement loglik)] for respondent `n`
/// of the draw set, computed from the per-module functions.
pub fn class_conditional_log_likelihood(
    respondent: &Respondent,
    n: usize,
    class: &ClassParams,
    draws: &DrawSet,
    drop_missing: bool,
) -> Result<ClassLikelihood> {
    let g = class.structural.n_latent();
    let p = class.choice.random_count();
    check_draws(draws, n, g + p)?;
    let mean = latent_mean(&respondent.x, &class.structural);
    let mut terms = Vec::with_capacity(draws.draws());
    let mut floored = 0;
    for r in 0..draws.draws() {
        let d = draws.draw(n, r);
        let latent = realize_latents(&mean, &class.structural.psi, &d[..g])?;
        let coefs = choice::realize_coefs(&class.choice, &d[g..g + p])?;
        let c = choice::panel_loglik_given_draw(respondent, &latent, &coefs, &class.choice);
        let m = measurement_loglik(&respondent.indicators, &latent, &class.measurement, drop_missing)?;
        floored += c.floored + m.floored;
        terms.push(c.value + m.value);
    }
    Ok(ClassLikelihood {
        log_value: log_sum_exp(&terms) - (draws.draws() as f64).ln(),
        floored,
    })
}

/// Simulated class-conditional likelihood in linear space.
pub fn class_conditional_sim_likelihood(
    respondent: &Respondent,
    n: usize,
    q: usize,
    theta: &ParameterSet,
    draws: &DrawSet,
    drop_missing: bool,
) -> Result<f64> {
    let class = theta
        .classes
        .get(q)
        .ok_or_else(|| Error::InvalidArgument(format!("class {q} out of range")))?;
    Ok(class_conditional_log_likelihood(respondent, n, class, draws, drop_missing)?
        .log_value
        .exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersonLikelihood {
    /// Simulated L_n.
    pub value: f64,
    pub log_value: f64,
    /// π_nq.
    pub prior: Vec<f64>,
    /// ln L_n|q.
    pub class_log_lik: Vec<f64>,
    pub floored: usize,
}

impl PersonLikelihood {
    /// π_nq·L_n|q / L_n, or the prior when every class term vanishes.
    pub fn posterior(&self) -> Vec<f64> {
        posterior_from_logs(&self.prior, &self.class_log_lik)
    }
}

/// Bayes rule in log space; falls back to the prior when all terms vanish.
pub fn posterior_from_logs(prior: &[f64], class_log_lik: &[f64]) -> Vec<f64> {
    let lw: Vec<f64> = prior.iter().zip(class_log_lik).map(|(p, l)| p.ln() + l).collect();
    let total = log_sum_exp(&lw);
    if !total.is_finite() {
        return prior.to_vec();
    }
    lw.iter().map(|v| (v - total).exp()).collect()
}

pub fn person_likelihood(
    respondent: &Respondent,
    n: usize,
    theta: &ParameterSet,
    draws: &DrawSet,
    drop_missing: bool,
) -> Result<PersonLikelihood> {
    let prior = membership_probs(&respondent.z, &theta.membership);
    let mut class_log_lik = Vec::with_capacity(theta.classes.len());
    let mut floored = 0;
    for class in &theta.classes {
        let c = class_conditional_log_likelihood(respondent, n, class, draws, drop_missing)?;
        class_log_lik.push(c.log_value);
        floored += c.floored;
    }
    let lw: Vec<f64> = prior.iter().zip(&class_log_lik).map(|(p, l)| p.ln() + l).collect();
    let log_value = log_sum_exp(&lw);
    Ok(PersonLikelihood {
        value: log_value.exp(),
        log_value,
        prior,
        class_log_lik,
        floored,
    })
}

pub fn posterior_membership(
    respondent: &Respondent,
    n: usize,
    theta: &ParameterSet,
    draws: &DrawSet,
    drop_missing: bool,
) -> Result<Vec<f64>> {
    Ok(person_likelihood(respondent, n, theta, draws, drop_missing)?.posterior())
}

/// Σ_n ln L_n in respondent order with compensated summation.
pub fn total_loglik(dataset: &Dataset, theta: &ParameterSet, draws: &DrawSet, drop_missing: bool) -> Result<f64> {
    let per: Vec<f64> = dataset
        .respondents
        .iter()
        .enumerate()
        .map(|(n, r)| person_likelihood(r, n, theta, draws, drop_missing).map(|p| p.log_value))
        .collect::<Result<_>>()?;
    Ok(compensated_sum(per))
}

/// What an [`Evaluator`] computes besides the log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalRequest {
    pub gradient: bool,
    /// Per-respondent gradients (for BHHH).
    pub scores: bool,
    /// Include the indicator block; off gives the choice-only likelihood.
    pub measurement: bool,
}

impl EvalRequest {
    pub const VALUE: EvalRequest = EvalRequest {
        gradient: false,
        scores: false,
        measurement: true,
    };
    pub const GRADIENT: EvalRequest = EvalRequest {
        gradient: true,
        scores: false,
        measurement: true,
    };
    pub const SCORES: EvalRequest = EvalRequest {
        gradient: true,
        scores: true,
        measurement: true,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loglik: f64,
    /// Gradient with respect to the packed free vector, when requested.
    pub gradient: Vec<f64>,
    /// Per-respondent packed gradients, when requested.
    pub scores: Vec<Vec<f64>>,
    pub person_loglik: Vec<f64>,
    pub posterior: Vec<Vec<f64>>,
    /// Respondents whose likelihood fell below `PROB_FLOOR`.
    pub underflow: usize,
    /// Floored indicator cells and choice probabilities over all draws.
    pub floored: usize,
}

impl Evaluation {
    /// Index and value of the smallest finite-or-not person log-likelihood.
    pub fn worst_person(&self) -> Option<(usize, f64)> {
        self.person_loglik
            .iter()
            .enumerate()
            .fold(None, |acc: Option<(usize, f64)>, (i, &v)| match acc {
                Some((_, b)) if !(v < b) && v.is_finite() => acc,
                _ => Some((i, v)),
            })
    }
}

struct PersonResult {
    loglik: f64,
    posterior: Vec<f64>,
    grad: Vec<f64>,
    floored: usize,
}

#[derive(Default)]
struct Scratch {
    mu: Vec<f64>,
    xs: Vec<f64>,
    ax: Vec<f64>,
    beta: Vec<f64>,
    vals: Vec<f64>,
    gr: Vec<f64>,
    gv: Vec<f64>,
    sr: Vec<f64>,
    srv: Vec<f64>,
    v: Vec<f64>,
    sqrt_psi: Vec<f64>,
    svals: Vec<f64>,
    resp_k: Vec<usize>,
    scen_k: Vec<usize>,
    chosen: Vec<bool>,
}

fn resize(v: &mut Vec<f64>, n: usize) {
    v.clear();
    v.resize(n, 0.0);
}

/// Fused likelihood and gradient evaluation over a fixed dataset and draw set.
pub struct Evaluator<'a> {
    layout: &'a ParamLayout,
    data: &'a Dataset,
    draws: &'a DrawSet,
    drop_missing: bool,
    /// Entry range `[start, end)` owned by each class.
    ranges: Vec<(usize, usize)>,
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl<'a> Evaluator<'a> {
    pub fn new(layout: &'a ParamLayout, data: &'a Dataset, draws: &'a DrawSet, drop_missing: bool) -> Result<Self> {
        let template = layout.neutral();
        let g = template.classes.first().map_or(0, |c| c.structural.n_latent());
        let dims = g + template.classes.iter().map(|c| c.choice.random_count()).max().unwrap_or(0);
        if draws.n_respondents() < data.n_respondents() {
            return Err(Error::DrawCache(format!(
                "draws cover {} respondents, dataset has {}",
                draws.n_respondents(),
                data.n_respondents()
            )));
        }
        if draws.dims() < dims {
            return Err(Error::DrawCache(format!("draws cover {} dims but {dims} are needed", draws.dims())));
        }
        if !drop_missing {
            for r in &data.respondents {
                if r.indicators.iter().any(Option::is_none) {
                    return Err(Error::InvalidArgument(format!(
                        "respondent {} has missing indicators and drop_missing_indicators is off",
                        r.id
                    )));
                }
            }
        }
        let mut ranges = vec![(usize::MAX, 0); layout.n_classes()];
        for (i, e) in layout.entries.iter().enumerate() {
            let r = &mut ranges[e.class - 1];
            r.0 = r.0.min(i);
            r.1 = r.1.max(i + 1);
        }
        for r in &mut ranges {
            if r.0 == usize::MAX {
                *r = (0, 0);
            }
        }
        Ok(Evaluator {
            layout,
            data,
            draws,
            drop_missing,
            ranges,
            pool: None,
        })
    }

    /// Runs per-respondent work on a dedicated pool of `threads` workers.
    pub fn with_threads(mut self, threads: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        self.pool = Some(Arc::new(pool));
        Ok(self)
    }

    pub fn layout(&self) -> &ParamLayout {
        self.layout
    }

    pub fn dataset(&self) -> &Dataset {
        self.data
    }

    pub fn draws(&self) -> &DrawSet {
        self.draws
    }

    /// Evaluates at a packed free vector.
    pub fn evaluate(&self, free: &[f64], req: EvalRequest) -> Result<Evaluation> {
        let raw = self.layout.raw_all(free)?;
        let nat = self.layout.from_raw(&raw);
        let theta = self.layout.build(&nat)?;
        self.evaluate_inner(&theta, req, Some((&nat, &raw)))
    }

    /// Evaluates at θ directly; gradients are returned with respect to the
    /// natural values of all entries.
    pub fn evaluate_theta(&self, theta: &ParameterSet, req: EvalRequest) -> Result<Evaluation> {
        self.evaluate_inner(theta, req, None)
    }

    fn evaluate_inner(&self, theta: &ParameterSet, req: EvalRequest, chain: Option<(&[f64], &[f64])>) -> Result<Evaluation> {
        let n = self.data.n_respondents();
        let run = || -> Vec<PersonResult> {
            (0..n)
                .into_par_iter()
                .map_init(Scratch::default, |s, i| self.person(i, theta, req, s))
                .collect()
        };
        let results = match &self.pool {
            Some(pool) => pool.install(run),
            None => run(),
        };
        let mut total = CompensatedSum::new();
        let k_all = self.layout.n_entries();
        let mut grad_nat = vec![CompensatedSum::new(); if req.gradient { k_all } else { 0 }];
        let mut underflow = 0;
        let mut floored = 0;
        for r in &results {
            total.add(r.loglik);
            if r.loglik < PROB_FLOOR.ln() {
                underflow += 1;
            }
            floored += r.floored;
            if req.gradient {
                for (acc, g) in grad_nat.iter_mut().zip(&r.grad) {
                    acc.add(*g);
                }
            }
        }
        let grad_nat: Vec<f64> = grad_nat.iter().map(CompensatedSum::value).collect();
        let to_out = |g: &[f64]| match chain {
            Some((nat, raw)) => self.layout.chain_gradient(nat, raw, g),
            None => g.to_vec(),
        };
        let gradient = if req.gradient { to_out(&grad_nat) } else { Vec::new() };
        let scores = if req.scores {
            results.iter().map(|r| to_out(&r.grad)).collect()
        } else {
            Vec::new()
        };
        Ok(Evaluation {
            loglik: total.value(),
            gradient,
            scores,
            person_loglik: results.iter().map(|r| r.loglik).collect(),
            posterior: results.into_iter().map(|r| r.posterior).collect(),
            underflow,
            floored,
        })
    }

    fn person(&self, n: usize, theta: &ParameterSet, req: EvalRequest, s: &mut Scratch) -> PersonResult {
        let resp = &self.data.respondents[n];
        let q_count = theta.classes.len();
        let prior = membership_probs(&resp.z, &theta.membership);
        let k_all = self.layout.n_entries();
        let mut grad = if req.gradient { vec![0.0; k_all] } else { Vec::new() };
        let mut class_ll = Vec::with_capacity(q_count);
        let mut floored = 0;
        for q in 0..q_count {
            let (start, end) = self.ranges[q];
            let local = if req.gradient { &mut grad[start..end] } else { &mut [][..] };
            let (ll, f) = class_kernel(
                &theta.classes[q],
                &self.layout.class_index[q],
                start,
                resp,
                self.draws.respondent(n),
                self.draws.dims(),
                self.draws.draws(),
                req,
                s,
                local,
            );
            class_ll.push(ll);
            floored += f;
        }
        let lw: Vec<f64> = prior.iter().zip(&class_ll).map(|(p, l)| p.ln() + l).collect();
        let loglik = log_sum_exp(&lw);
        let posterior = if loglik.is_finite() {
            lw.iter().map(|v| (v - loglik).exp()).collect::<Vec<f64>>()
        } else {
            prior.clone()
        };
        if req.gradient {
            for q in 0..q_count {
                let (start, end) = self.ranges[q];
                for g in &mut grad[start..end] {
                    *g *= posterior[q];
                }
            }
            let terms = membership_terms(&resp.z, &theta.membership);
            for q in 1..q_count {
                let d = posterior[q] - prior[q];
                for (&e, t) in self.layout.class_index[q].gamma.iter().zip(&terms) {
                    grad[e] += d * t;
                }
            }
        }
        PersonResult {
            loglik,
            posterior,
            grad,
            floored,
        }
    }

    pub fn drop_missing(&self) -> bool {
        self.drop_missing
    }
}

#[inline]
fn pdf_or_zero(x: f64) -> f64 {
    if x.is_finite() {
        std_normal_pdf(x)
    } else {
        0.0
    }
}

/// Streams the draws of one respondent for one class. Returns ln L_n|q and
/// the floored count; when a gradient is requested, `grad` (the class's
/// entry range) receives ∇ ln L_n|q with respect to natural values.
#[allow(clippy::too_many_arguments)]
fn class_kernel(
    cp: &ClassParams,
    ci: &ClassIndex,
    off: usize,
    resp: &Respondent,
    draws: &[f64],
    dims: usize,
    r_count: usize,
    req: EvalRequest,
    s: &mut Scratch,
    grad: &mut [f64],
) -> (f64, usize) {
    let g_count = cp.structural.n_latent();
    let ch = &cp.choice;
    let n_alt = ch.alternatives.len();
    let k_cov = ch.sources.len();
    let t_count = resp.scenarios.len();
    let kq = grad.len();
    let want_grad = req.gradient;
    let floor = PROB_FLOOR.ln();
    let diag = cp.structural.psi.is_diagonal();
    let chol = cp.structural.psi.cholesky();

    resize(&mut s.mu, g_count);
    latent_mean_into(&resp.x, &cp.structural, &mut s.mu);
    resize(&mut s.sqrt_psi, g_count);
    for g in 0..g_count {
        s.sqrt_psi[g] = chol[(g, g)];
    }
    if n_alt == 1 {
        // respondent covariates in `vals[k]`, scenario attributes in `svals`
        s.resp_k.clear();
        s.scen_k.clear();
        resize(&mut s.vals, k_cov);
        for (k, src) in ch.sources.iter().enumerate() {
            match src {
                CovariateSource::Respondent(i) => {
                    s.resp_k.push(k);
                    s.vals[k] = resp.x[*i];
                }
                CovariateSource::Scenario(_) => s.scen_k.push(k),
            }
        }
        let ks = s.scen_k.len();
        resize(&mut s.svals, t_count * ks);
        s.chosen.clear();
        for (t, sc) in resp.scenarios.iter().enumerate() {
            for (i, &k) in s.scen_k.iter().enumerate() {
                s.svals[t * ks + i] = ch.sources[k].value(&resp.x, sc);
            }
            s.chosen.push(sc.chosen == 1);
        }
    } else {
        resize(&mut s.vals, t_count * k_cov);
        for (t, sc) in resp.scenarios.iter().enumerate() {
            for (k, src) in ch.sources.iter().enumerate() {
                s.vals[t * k_cov + k] = src.value(&resp.x, sc);
            }
        }
    }
    resize(&mut s.xs, g_count);
    resize(&mut s.ax, g_count);
    resize(&mut s.beta, n_alt * k_cov);
    resize(&mut s.gr, kq);
    resize(&mut s.gv, kq);
    resize(&mut s.sr, n_alt);
    resize(&mut s.srv, n_alt * k_cov);
    resize(&mut s.v, n_alt + 1);
    let p_count = ch.random_count();
    let uses_draws = g_count > 0 || p_count > 0;
    let draws_used = if uses_draws { r_count } else { 1 };

    let mut m = f64::NEG_INFINITY;
    let mut ssum = 0.0;
    let mut floored = 0;
    for r in 0..draws_used {
        let d = if dims > 0 { &draws[r * dims..(r + 1) * dims] } else { &[][..] };
        if want_grad {
            s.gr.iter_mut().for_each(|x| *x = 0.0);
            s.ax.iter_mut().for_each(|x| *x = 0.0);
        }
        // latent realization
        if diag {
            for g in 0..g_count {
                s.xs[g] = s.mu[g] + s.sqrt_psi[g] * d[g];
            }
        } else {
            for g in 0..g_count {
                let mut v = s.mu[g];
                for j in 0..=g {
                    v += chol[(g, j)] * d[j];
                }
                s.xs[g] = v;
            }
        }
        let mut ll = 0.0;

        // measurement block; cells are multiplied and flushed to the log
        // before the running product can underflow
        if req.measurement {
            let mut prod = 1.0f64;
            let mp = &cp.measurement;
            for (h, resp_h) in resp.indicators.iter().enumerate() {
                let Some(cat) = resp_h else { continue };
                let cat = *cat as usize;
                let g = mp.latent_of[h];
                let sd = mp.error_sd[h];
                let prop = mp.loadings[h] * s.xs[g] + mp.intercepts[h];
                let (lo, hi) = mp.cell_bounds(h, cat);
                let a = (hi - prop) / sd;
                let b = (lo - prop) / sd;
                let cell = std_normal_interval(b, a);
                if cell < PROB_FLOOR {
                    ll += floor;
                    floored += 1;
                    continue;
                }
                prod *= cell;
                if prod < 1e-250 {
                    ll += prod.ln();
                    prod = 1.0;
                }
                if want_grad {
                    let pa = pdf_or_zero(a);
                    let pb = pdf_or_zero(b);
                    let inv = 1.0 / (sd * cell);
                    let dprop = -(pa - pb) * inv;
                    if let Some(e) = ci.loading[h] {
                        s.gr[e - off] += dprop * s.xs[g];
                    }
                    if let Some(e) = ci.intercept[h] {
                        s.gr[e - off] += dprop;
                    }
                    s.ax[g] += dprop * mp.loadings[h];
                    let th = &ci.thresholds[h];
                    if cat <= th.len() {
                        s.gr[th[cat - 1] - off] += pa * inv;
                    }
                    if cat >= 2 {
                        s.gr[th[cat - 2] - off] -= pb * inv;
                    }
                    if let Some(e) = ci.error_sd[h] {
                        let ta = if a.is_finite() { a * pa } else { 0.0 };
                        let tb = if b.is_finite() { b * pb } else { 0.0 };
                        s.gr[e - off] += (tb - ta) * inv;
                    }
                }
            }
            ll += prod.ln();
        }

        // realized coefficients
        let mut p = 0;
        for (j, alt) in ch.alternatives.iter().enumerate() {
            for (k, c) in alt.coefs.iter().enumerate() {
                s.beta[j * k_cov + k] = match c {
                    Coef::Fixed(b) => *b,
                    Coef::Normal { mean, sd } => {
                        p += 1;
                        mean + sd * d[g_count + p - 1]
                    }
                };
            }
        }

        // choice block
        if want_grad {
            s.sr.iter_mut().for_each(|x| *x = 0.0);
            s.srv.iter_mut().for_each(|x| *x = 0.0);
        }
        let mut denom = 1.0f64;
        if n_alt == 1 {
            // Binary fast path. The respondent-level part of the utility is
            // formed once per draw; ln P = min(d, 0) − ln(1 + e^{−|v|}) with
            // the second terms gathered as a product of factors in [1, 2].
            let alt = &ch.alternatives[0];
            let mut c = alt.asc;
            for &k in &s.resp_k {
                c += s.beta[k] * s.vals[k];
            }
            for (l, gam) in ch.latent_index.iter().zip(&alt.latent_coefs) {
                c += gam * s.xs[*l];
            }
            let ks = s.scen_k.len();
            let mut sum_res = 0.0;
            for t in 0..t_count {
                if denom > 1e250 {
                    ll -= denom.ln();
                    denom = 1.0;
                }
                let sv = &s.svals[t * ks..(t + 1) * ks];
                let mut v = c;
                for (i, &k) in s.scen_k.iter().enumerate() {
                    v += s.beta[k] * sv[i];
                }
                let chosen = s.chosen[t];
                let dd = if chosen { v } else { -v };
                if dd < floor {
                    ll += floor;
                    floored += 1;
                    continue;
                }
                let e = (-v.abs()).exp();
                ll += dd.min(0.0);
                denom *= 1.0 + e;
                if want_grad {
                    let p1 = if v >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
                    let res = if chosen { 1.0 - p1 } else { -p1 };
                    sum_res += res;
                    for (i, &k) in s.scen_k.iter().enumerate() {
                        s.srv[k] += res * sv[i];
                    }
                }
            }
            if want_grad {
                s.sr[0] = sum_res;
                for &k in &s.resp_k {
                    s.srv[k] = sum_res * s.vals[k];
                }
            }
        } else {
            for (t, sc) in resp.scenarios.iter().enumerate() {
                let vals = &s.vals[t * k_cov..(t + 1) * k_cov];
                s.v[0] = 0.0;
                for (j, alt) in ch.alternatives.iter().enumerate() {
                    let mut u = alt.asc;
                    for k in 0..k_cov {
                        u += s.beta[j * k_cov + k] * vals[k];
                    }
                    for (l, gam) in ch.latent_index.iter().zip(&alt.latent_coefs) {
                        u += gam * s.xs[*l];
                    }
                    s.v[j + 1] = u;
                }
                let chosen = sc.chosen;
                let mx = s.v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in s.v.iter() {
                    z += (v - mx).exp();
                }
                let lz = mx + z.ln();
                let lp = s.v[chosen] - lz;
                if lp < floor {
                    ll += floor;
                    floored += 1;
                    continue;
                }
                ll += lp;
                if want_grad {
                    for j in 0..n_alt {
                        let pj = (s.v[j + 1] - lz).exp();
                        let res = if chosen == j + 1 { 1.0 - pj } else { -pj };
                        s.sr[j] += res;
                        for k in 0..k_cov {
                            s.srv[j * k_cov + k] += res * vals[k];
                        }
                    }
                }
            }
        }

        ll -= denom.ln();

        if want_grad {
            let mut p = 0;
            for j in 0..n_alt {
                s.gr[ci.asc[j] - off] += s.sr[j];
                for k in 0..k_cov {
                    match ci.coef[j][k] {
                        CoefIndex::Fixed(e) => s.gr[e - off] += s.srv[j * k_cov + k],
                        CoefIndex::Random { mean, sd } => {
                            p += 1;
                            s.gr[mean - off] += s.srv[j * k_cov + k];
                            s.gr[sd - off] += s.srv[j * k_cov + k] * d[g_count + p - 1];
                        }
                    }
                }
                let alt = &ch.alternatives[j];
                for (li, &l) in ch.latent_index.iter().enumerate() {
                    s.gr[ci.latent_coef[j][li] - off] += s.sr[j] * s.xs[l];
                    s.ax[l] += s.sr[j] * alt.latent_coefs[li];
                }
            }
            // structural chain through the latent realization
            for g in 0..g_count {
                let a = s.ax[g];
                for (&e, &k) in ci.lambda[g].iter().zip(&cp.structural.covariates[g]) {
                    s.gr[e - off] += a * resp.x[k];
                }
                if diag {
                    if let Some(e) = ci.psi[g] {
                        s.gr[e - off] += a * d[g] / (2.0 * s.sqrt_psi[g]);
                    }
                } else if !ci.chol.is_empty() {
                    for j in 0..=g {
                        s.gr[ci.chol[g][j] - off] += a * d[j];
                    }
                }
            }
        }

        // streaming log-sum-exp
        if r == 0 {
            m = ll;
            ssum = 1.0;
            if want_grad {
                s.gv.copy_from_slice(&s.gr);
            }
        } else if ll > m {
            let f = (m - ll).exp();
            ssum = ssum * f + 1.0;
            if want_grad {
                for (a, b) in s.gv.iter_mut().zip(&s.gr) {
                    *a = *a * f + b;
                }
            }
            m = ll;
        } else {
            let w = (ll - m).exp();
            ssum += w;
            if want_grad {
                for (a, b) in s.gv.iter_mut().zip(&s.gr) {
                    *a += w * b;
                }
            }
        }
    }
    if want_grad {
        for (g, v) in grad.iter_mut().zip(&s.gv) {
            *g = v / ssum;
        }
    }
    let log_value = if uses_draws {
        m + ssum.ln() - (r_count as f64).ln()
    } else {
        m
    };
    (log_value, floored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::spec::ModelSpec;
    use crate::quasirandom::build_draws;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    const SPEC: &str = r#"
classes = 2
membership_covariates = ["student"]
explanatory_covariates = ["age", "student"]
scenario_attributes = ["wt", "tt"]

[[latent]]
name = "safety"
structural_covariates = ["age"]
indicators = [{ name = "S1", categories = 3 }, { name = "S2", categories = 4 }]

[utility]
covariates = ["wt", "tt", "age"]
latent = ["safety"]
random = ["wt", "tt"]
"#;

    fn respondent(k: usize) -> Respondent {
        let f = k as f64;
        Respondent {
            id: format!("r{k}"),
            z: vec![(k % 2) as f64],
            x: vec![(f * 0.37).sin(), (k % 2) as f64],
            indicators: vec![Some((k % 3) as i64 + 1), Some((k % 4) as i64 + 1)],
            scenarios: (0..5)
                .map(|t| crate::data::dataset::ChoiceScenario {
                    attributes: vec![1.0 + ((t + k) % 5) as f64, 1.0 + ((2 * t + k) % 5) as f64],
                    chosen: (t * 7 + k) % 3 % 2,
                })
                .collect(),
        }
    }

    fn fixture(n: usize) -> (ModelSpec, ParamLayout, Dataset) {
        let spec = ModelSpec::from_toml_str(SPEC).unwrap();
        let layout = ParamLayout::new(&spec).unwrap();
        let data = Dataset {
            respondents: (0..n).map(respondent).collect(),
            meta: crate::data::dataset::DatasetMeta::for_spec(&spec),
        };
        (spec, layout, data)
    }

    fn point(layout: &ParamLayout, seed: u64) -> Vec<f64> {
        (0..layout.n_free())
            .map(|i| (((i as u64 + 3) * (seed + 11) * 2654435761) % 1000) as f64 / 1000.0 - 0.5)
            .collect()
    }

    #[test]
    fn membership_examples() {
        let m = MembershipParams { intercept: true, gamma: vec![vec![0.0], vec![0.0]] };
        for p in membership_probs(&[], &m) {
            assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-15);
        }
        let m = MembershipParams { intercept: true, gamma: vec![vec![0.397]] };
        let p = membership_probs(&[], &m);
        assert_abs_diff_eq!(p[0], 0.402, epsilon = 1e-3);
        assert_abs_diff_eq!(p[1], 0.598, epsilon = 1e-3);
        let m = MembershipParams { intercept: true, gamma: vec![vec![1e6]] };
        assert_eq!(membership_probs(&[], &m), vec![0.0, 1.0]);
    }

    #[test]
    fn posterior_examples() {
        let post = posterior_from_logs(&[0.5, 0.5], &[0.2f64.ln(), 0.1f64.ln()]);
        assert_abs_diff_eq!(post[0], 2.0 / 3.0, epsilon = 1e-14);
        let post = posterior_from_logs(&[0.3, 0.7], &[-4.0, -4.0]);
        assert_abs_diff_eq!(post[0], 0.3, epsilon = 1e-14);
        let post = posterior_from_logs(&[1.0, 0.0], &[-9.0, -1.0]);
        assert_eq!(post, vec![1.0, 0.0]);
        let post = posterior_from_logs(&[0.4, 0.6], &[f64::NEG_INFINITY, f64::NEG_INFINITY]);
        assert_eq!(post, vec![0.4, 0.6]);
    }

    #[test]
    fn single_draw_product() {
        // one binary scenario at V = 0 and one indicator with cells 1/4, 1/2, 1/4
        let spec = ModelSpec::from_toml_str(
            r#"
classes = 1
draws = 1
[[latent]]
name = "a"
indicators = [{ name = "I", categories = 2 }]
[utility]
"#,
        )
        .unwrap();
        let layout = ParamLayout::new(&spec).unwrap();
        let mut named = BTreeMap::new();
        named.insert("class1.structural.a.psi".to_string(), 1e-300);
        let theta = layout.from_named(&named).unwrap();
        let r = Respondent {
            id: "x".into(),
            z: vec![],
            x: vec![],
            indicators: vec![Some(1)],
            scenarios: vec![
                crate::data::dataset::ChoiceScenario { attributes: vec![], chosen: 1 },
            ],
        };
        let draws = build_draws(1, 1, 1, 10, None).unwrap();
        let l = class_conditional_sim_likelihood(&r, 0, 0, &theta, &draws, false).unwrap();
        // ln 0.5 + ln Φ(0) = ln 0.25
        assert_abs_diff_eq!(l, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn fused_kernel_matches_reference_composition() {
        let (_, layout, data) = fixture(12);
        let draws = build_draws(12, 50, 3, 10, None).unwrap();
        let eval = Evaluator::new(&layout, &data, &draws, false).unwrap();
        for seed in 0..3 {
            let free = point(&layout, seed);
            let theta = layout.unpack(&free).unwrap();
            let fused = eval.evaluate(&free, EvalRequest::VALUE).unwrap();
            let reference = total_loglik(&data, &theta, &draws, false).unwrap();
            assert_abs_diff_eq!(fused.loglik, reference, epsilon = 1e-10);
            for (n, r) in data.respondents.iter().enumerate() {
                let post = posterior_membership(r, n, &theta, &draws, false).unwrap();
                for (a, b) in post.iter().zip(&fused.posterior[n]) {
                    assert_abs_diff_eq!(a, b, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let (_, layout, data) = fixture(8);
        let draws = build_draws(8, 40, 3, 10, None).unwrap();
        let eval = Evaluator::new(&layout, &data, &draws, false).unwrap();
        let free = point(&layout, 5);
        let g = eval.evaluate(&free, EvalRequest::GRADIENT).unwrap().gradient;
        for i in 0..free.len() {
            let h = 1e-5;
            let mut a = free.clone();
            a[i] += h;
            let mut b = free.clone();
            b[i] -= h;
            let fd = (eval.evaluate(&a, EvalRequest::VALUE).unwrap().loglik
                - eval.evaluate(&b, EvalRequest::VALUE).unwrap().loglik)
                / (2.0 * h);
            assert!(
                (fd - g[i]).abs() <= 1e-6 * g[i].abs().max(1.0),
                "{}: analytic {} vs numeric {}",
                layout.free_names()[i],
                g[i],
                fd
            );
        }
    }

    #[test]
    fn scores_sum_to_gradient_and_threads_do_not_matter() {
        let (_, layout, data) = fixture(9);
        let draws = build_draws(9, 20, 3, 10, None).unwrap();
        let free = point(&layout, 2);
        let one = Evaluator::new(&layout, &data, &draws, false).unwrap().with_threads(1).unwrap();
        let three = Evaluator::new(&layout, &data, &draws, false).unwrap().with_threads(3).unwrap();
        let a = one.evaluate(&free, EvalRequest::SCORES).unwrap();
        let b = three.evaluate(&free, EvalRequest::SCORES).unwrap();
        assert_eq!(a, b);
        for i in 0..free.len() {
            let s: f64 = a.scores.iter().map(|v| v[i]).sum();
            assert_abs_diff_eq!(s, a.gradient[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn halves_add_up() {
        let (_, layout, data) = fixture(10);
        let draws = build_draws(10, 20, 3, 10, None).unwrap();
        let theta = layout.unpack(&point(&layout, 1)).unwrap();
        let whole = total_loglik(&data, &theta, &draws, false).unwrap();
        let first = total_loglik(&data.subset(0..5), &theta, &draws, false).unwrap();
        let second: f64 = (5..10)
            .map(|n| person_likelihood(&data.respondents[n], n, &theta, &draws, false).unwrap().log_value)
            .sum();
        assert_abs_diff_eq!(whole, first + second, epsilon = 1e-9);
    }

    proptest! {
        #[test]
        fn class_probabilities_sum_to_one(g in prop::collection::vec(-30.0f64..30.0, 1..10), z in -3.0f64..3.0) {
            let m = MembershipParams { intercept: true, gamma: g.iter().map(|v| vec![*v, -v / 2.0]).collect() };
            let p = membership_probs(&[z], &m);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let ll: Vec<f64> = (0..p.len()).map(|i| -(i as f64) * z.abs()).collect();
            let post = posterior_from_logs(&p, &ll);
            prop_assert!((post.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
