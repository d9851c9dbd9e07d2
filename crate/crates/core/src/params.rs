//! The full parameter set θ and its mapping to an unconstrained vector.
//!
//! Every estimable quantity is an *entry* of the [`ParamLayout`] with a
//! stable name such as `class2.choice.wt.sd`. Identification constraints
//! (reference loadings, class-1 membership) never appear as entries. Entries
//! named in the model's `[fixed]` table stay at their given value and are
//! excluded from the free vector.
//!
//! Unconstrained coordinates: standard deviations and variances are
//! log-transformed; thresholds within a group are packed as the first cut
//! point followed by log gaps.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::choice::{AlternativeUtility, ChoiceParams, Coef, CovariateSource};
use crate::data::spec::{CovarianceKind, ModelSpec};
use crate::distributions::Covariance;
use crate::error::{Error, Result};
use crate::measurement::MeasurementParams;
use crate::structural::StructuralParams;

#[derive(Debug, Clone, PartialEq)]
pub struct MembershipParams {
    pub intercept: bool,
    /// One row per class 2..=Q over the membership terms (intercept first).
    pub gamma: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassParams {
    pub structural: StructuralParams,
    pub measurement: MeasurementParams,
    pub choice: ChoiceParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub membership: MembershipParams,
    pub classes: Vec<ClassParams>,
}

impl ParameterSet {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn check(&self) -> Result<()> {
        if self.membership.gamma.len() + 1 != self.classes.len() {
            return Err(Error::dimension("membership classes", self.classes.len() - 1, self.membership.gamma.len()));
        }
        for c in &self.classes {
            c.structural.check()?;
            c.measurement.check()?;
            c.choice.check()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Block {
    Membership,
    Structural,
    Measurement,
    Choice,
}

impl Block {
    pub fn as_str(self) -> &'static str {
        match self {
            Block::Membership => "membership",
            Block::Structural => "structural",
            Block::Measurement => "measurement",
            Block::Choice => "choice",
        }
    }
}

/// Location of an entry inside [`ParameterSet`]; all class indices zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Gamma { class: usize, term: usize },
    Lambda { class: usize, latent: usize, cov: usize },
    PsiVariance { class: usize, latent: usize },
    Cholesky { class: usize, row: usize, col: usize },
    Loading { class: usize, indicator: usize },
    Intercept { class: usize, indicator: usize },
    ErrorSd { class: usize, indicator: usize },
    Threshold { class: usize, group: usize, m: usize },
    Asc { class: usize, alt: usize },
    Coef { class: usize, alt: usize, cov: usize },
    CoefMean { class: usize, alt: usize, cov: usize },
    CoefSd { class: usize, alt: usize, cov: usize },
    LatentCoef { class: usize, alt: usize, latent: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Identity,
    Log,
    /// Position `pos` within threshold group `group` (see `ParamLayout::groups`).
    Threshold { group: usize, pos: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub block: Block,
    /// One-based class label.
    pub class: usize,
    pub slot: Slot,
    pub transform: Transform,
    pub free: bool,
}

/// Gradient targets for the random or fixed coefficient of one covariate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoefIndex {
    Fixed(usize),
    Random { mean: usize, sd: usize },
}

/// Entry indices of one class, laid out like the class parameters so the
/// likelihood kernel can scatter gradients without name lookups.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassIndex {
    pub gamma: Vec<usize>,
    pub lambda: Vec<Vec<usize>>,
    pub psi: Vec<Option<usize>>,
    /// Row-major lower triangle for full covariance, `chol[i][j]` with j ≤ i.
    pub chol: Vec<Vec<usize>>,
    pub loading: Vec<Option<usize>>,
    pub intercept: Vec<Option<usize>>,
    pub error_sd: Vec<Option<usize>>,
    pub thresholds: Vec<Vec<usize>>,
    pub asc: Vec<usize>,
    pub coef: Vec<Vec<CoefIndex>>,
    pub latent_coef: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub class_index: Vec<ClassIndex>,
    /// Entry indices of every threshold group in cut-point order.
    pub groups: Vec<Vec<usize>>,
    /// Indices of free entries in packing order.
    pub free: Vec<usize>,
    /// Natural values of non-free entries.
    fixed_values: Vec<f64>,
    /// Group index of each indicator, per class.
    indicator_group: Vec<Vec<usize>>,
    template: ParameterSet,
    full_covariance: bool,
}

fn class_prefix(q: usize) -> String {
    format!("class{}", q + 1)
}

impl ParamLayout {
    pub fn new(spec: &ModelSpec) -> Result<ParamLayout> {
        spec.check()?;
        let full_cov = spec.options.structural_covariance == CovarianceKind::Full;
        if full_cov && spec.options.fix_latent_variance {
            return Err(Error::Spec(
                "fix_latent_variance is only available with a diagonal structural covariance".into(),
            ));
        }
        let inds = spec.indicators();
        let g_count = spec.n_latent();
        let terms = spec.membership_terms();
        let explanatory = &spec.explanatory_covariates;
        let pos_x = |name: &str| explanatory.iter().position(|c| c == name);
        let shared = spec.options.shared_thresholds;
        let fix_var = spec.options.fix_latent_variance;

        let mut entries: Vec<ParamEntry> = Vec::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut class_index = Vec::new();
        let mut indicator_group = Vec::new();
        let mut classes = Vec::new();

        let push = |entries: &mut Vec<ParamEntry>, name: String, block, q: usize, slot, transform| {
            entries.push(ParamEntry {
                name,
                block,
                class: q + 1,
                slot,
                transform,
                free: true,
            });
            entries.len() - 1
        };

        for q in 0..spec.classes {
            let pre = class_prefix(q);
            let mut idx = ClassIndex::default();
            if q > 0 {
                for (t, term) in terms.iter().enumerate() {
                    idx.gamma.push(push(
                        &mut entries,
                        format!("{pre}.membership.{term}"),
                        Block::Membership,
                        q,
                        Slot::Gamma { class: q, term: t },
                        Transform::Identity,
                    ));
                }
            }

            // structural
            let mut covariates = Vec::new();
            for (g, lat) in spec.latent.iter().enumerate() {
                let mut row = Vec::new();
                let mut cols = Vec::new();
                for (k, c) in lat.structural_covariates.iter().enumerate() {
                    cols.push(pos_x(c).expect("checked by spec"));
                    row.push(push(
                        &mut entries,
                        format!("{pre}.structural.{}.{c}", lat.name),
                        Block::Structural,
                        q,
                        Slot::Lambda { class: q, latent: g, cov: k },
                        Transform::Identity,
                    ));
                }
                covariates.push(cols);
                idx.lambda.push(row);
            }
            if full_cov {
                for i in 0..g_count {
                    let mut row = Vec::new();
                    for j in 0..=i {
                        row.push(push(
                            &mut entries,
                            format!("{pre}.structural.chol.{}.{}", spec.latent[i].name, spec.latent[j].name),
                            Block::Structural,
                            q,
                            Slot::Cholesky { class: q, row: i, col: j },
                            if i == j { Transform::Log } else { Transform::Identity },
                        ));
                    }
                    idx.chol.push(row);
                }
                idx.psi = vec![None; g_count];
            } else {
                for (g, lat) in spec.latent.iter().enumerate() {
                    idx.psi.push(if fix_var {
                        None
                    } else {
                        Some(push(
                            &mut entries,
                            format!("{pre}.structural.{}.psi", lat.name),
                            Block::Structural,
                            q,
                            Slot::PsiVariance { class: q, latent: g },
                            Transform::Log,
                        ))
                    });
                }
            }

            // measurement
            let mut ind_group = Vec::new();
            let mut group_names: Vec<(String, u32)> = Vec::new();
            let mut group_of_latent = vec![usize::MAX; g_count];
            for ind in &inds {
                let gi = if shared {
                    if group_of_latent[ind.latent] == usize::MAX {
                        group_of_latent[ind.latent] = group_names.len();
                        group_names.push((spec.latent[ind.latent].name.clone(), ind.categories));
                    }
                    group_of_latent[ind.latent]
                } else {
                    group_names.push((ind.name.clone(), ind.categories));
                    group_names.len() - 1
                };
                ind_group.push(gi);
            }
            for (h, ind) in inds.iter().enumerate() {
                let base = format!("{pre}.measurement.{}", ind.name);
                let free_loading = fix_var || !ind.is_reference;
                idx.loading.push(free_loading.then(|| {
                    push(
                        &mut entries,
                        format!("{base}.loading"),
                        Block::Measurement,
                        q,
                        Slot::Loading { class: q, indicator: h },
                        Transform::Identity,
                    )
                }));
                let free_intercept = shared && !ind.is_reference;
                idx.intercept.push(free_intercept.then(|| {
                    push(
                        &mut entries,
                        format!("{base}.intercept"),
                        Block::Measurement,
                        q,
                        Slot::Intercept { class: q, indicator: h },
                        Transform::Identity,
                    )
                }));
                let free_sd = spec.options.free_error_sd && !ind.is_reference;
                idx.error_sd.push(free_sd.then(|| {
                    push(
                        &mut entries,
                        format!("{base}.error_sd"),
                        Block::Measurement,
                        q,
                        Slot::ErrorSd { class: q, indicator: h },
                        Transform::Log,
                    )
                }));
            }
            let first_group = groups.len();
            for (gi, (gname, cats)) in group_names.iter().enumerate() {
                let mut members = Vec::new();
                for m in 0..(*cats as usize - 1) {
                    members.push(push(
                        &mut entries,
                        format!("{pre}.measurement.{gname}.tau{}", m + 1),
                        Block::Measurement,
                        q,
                        Slot::Threshold { class: q, group: gi, m },
                        Transform::Threshold {
                            group: first_group + gi,
                            pos: m,
                        },
                    ));
                }
                groups.push(members);
            }
            idx.thresholds = ind_group.iter().map(|&gi| groups[first_group + gi].clone()).collect();

            // choice
            let terms_q = spec.class_utility(q);
            let sources: Vec<CovariateSource> = terms_q
                .covariates
                .iter()
                .map(|c| match spec.scenario_attributes.iter().position(|a| a == c) {
                    Some(a) => CovariateSource::Scenario(a),
                    None => CovariateSource::Respondent(pos_x(c).expect("checked by spec")),
                })
                .collect();
            let latent_index: Vec<usize> = terms_q
                .latent
                .iter()
                .map(|l| spec.latent_index(l).expect("checked by spec"))
                .collect();
            let mut alternatives = Vec::new();
            for j in 0..spec.alternatives - 1 {
                let cpre = if spec.alternatives > 2 {
                    format!("{pre}.choice.alt{}", j + 1)
                } else {
                    format!("{pre}.choice")
                };
                idx.asc.push(push(
                    &mut entries,
                    format!("{cpre}.asc"),
                    Block::Choice,
                    q,
                    Slot::Asc { class: q, alt: j },
                    Transform::Identity,
                ));
                let mut coef_idx = Vec::new();
                let mut coefs = Vec::new();
                for (k, c) in terms_q.covariates.iter().enumerate() {
                    if terms_q.random.contains(c) {
                        let mean = push(
                            &mut entries,
                            format!("{cpre}.{c}.mean"),
                            Block::Choice,
                            q,
                            Slot::CoefMean { class: q, alt: j, cov: k },
                            Transform::Identity,
                        );
                        let sd = push(
                            &mut entries,
                            format!("{cpre}.{c}.sd"),
                            Block::Choice,
                            q,
                            Slot::CoefSd { class: q, alt: j, cov: k },
                            Transform::Log,
                        );
                        coef_idx.push(CoefIndex::Random { mean, sd });
                        coefs.push(Coef::Normal { mean: 0.0, sd: 1.0 });
                    } else {
                        coef_idx.push(CoefIndex::Fixed(push(
                            &mut entries,
                            format!("{cpre}.{c}"),
                            Block::Choice,
                            q,
                            Slot::Coef { class: q, alt: j, cov: k },
                            Transform::Identity,
                        )));
                        coefs.push(Coef::Fixed(0.0));
                    }
                }
                let mut lat_idx = Vec::new();
                for (l, name) in terms_q.latent.iter().enumerate() {
                    lat_idx.push(push(
                        &mut entries,
                        format!("{cpre}.latent.{name}"),
                        Block::Choice,
                        q,
                        Slot::LatentCoef { class: q, alt: j, latent: l },
                        Transform::Identity,
                    ));
                }
                idx.coef.push(coef_idx);
                idx.latent_coef.push(lat_idx);
                alternatives.push(AlternativeUtility {
                    asc: 0.0,
                    coefs,
                    latent_coefs: vec![0.0; latent_index.len()],
                });
            }

            let lambda = covariates.iter().map(|c| vec![0.0; c.len()]).collect();
            classes.push(ClassParams {
                structural: StructuralParams {
                    covariates,
                    lambda,
                    psi: Covariance::identity(g_count),
                },
                measurement: MeasurementParams {
                    latent_of: inds.iter().map(|i| i.latent).collect(),
                    loadings: vec![1.0; inds.len()],
                    intercepts: vec![0.0; inds.len()],
                    error_sd: vec![1.0; inds.len()],
                    thresholds: inds
                        .iter()
                        .map(|i| default_thresholds(i.categories as usize))
                        .collect(),
                },
                choice: ChoiceParams {
                    sources,
                    latent_index,
                    alternatives,
                },
            });
            class_index.push(idx);
            indicator_group.push(ind_group);
        }

        let template = ParameterSet {
            membership: MembershipParams {
                intercept: spec.membership_intercept,
                gamma: vec![vec![0.0; terms.len()]; spec.classes - 1],
            },
            classes,
        };
        let mut layout = ParamLayout {
            free: Vec::new(),
            fixed_values: vec![0.0; entries.len()],
            entries,
            class_index,
            groups,
            indicator_group,
            template,
            full_covariance: full_cov,
        };
        layout.fixed_values = layout.natural_values(&layout.neutral())?;
        let by_name: BTreeMap<String, usize> = layout
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
        for (name, value) in &spec.fixed {
            let i = *by_name
                .get(name)
                .ok_or_else(|| Error::Spec(format!("[fixed] names unknown parameter `{name}`")))?;
            layout.entries[i].free = false;
            layout.fixed_values[i] = *value;
        }
        for g in &layout.groups {
            let fixed = g.iter().filter(|&&i| !layout.entries[i].free).count();
            if fixed != 0 && fixed != g.len() {
                return Err(Error::Spec(format!(
                    "threshold group containing `{}` must be fixed entirely or not at all",
                    layout.entries[g[0]].name
                )));
            }
        }
        layout.free = (0..layout.entries.len())
            .filter(|&i| layout.entries[i].free)
            .collect();
        // validate fixed values by building once
        layout.build(&layout.fixed_values)?;
        Ok(layout)
    }

    pub fn n_entries(&self) -> usize {
        self.entries.len()
    }

    pub fn n_free(&self) -> usize {
        self.free.len()
    }

    pub fn n_classes(&self) -> usize {
        self.template.classes.len()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    pub fn free_names(&self) -> Vec<String> {
        self.free.iter().map(|&i| self.entries[i].name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn full_covariance(&self) -> bool {
        self.full_covariance
    }

    /// γ = 0, Λ = 0, Ψ = I, unit loadings and error sds, zero intercepts,
    /// evenly spaced thresholds, zero choice coefficients and unit sds.
    pub fn neutral(&self) -> ParameterSet {
        self.template.clone()
    }

    /// Natural values of all entries, read from `theta`.
    pub fn natural_values(&self, theta: &ParameterSet) -> Result<Vec<f64>> {
        if theta.classes.len() != self.template.classes.len() {
            return Err(Error::dimension("classes", self.template.classes.len(), theta.classes.len()));
        }
        let mut out = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let v = match e.slot {
                Slot::Gamma { class, term } => theta.membership.gamma[class - 1][term],
                Slot::Lambda { class, latent, cov } => theta.classes[class].structural.lambda[latent][cov],
                Slot::PsiVariance { class, latent } => theta.classes[class].structural.psi.variance(latent),
                Slot::Cholesky { class, row, col } => theta.classes[class].structural.psi.cholesky()[(row, col)],
                Slot::Loading { class, indicator } => theta.classes[class].measurement.loadings[indicator],
                Slot::Intercept { class, indicator } => theta.classes[class].measurement.intercepts[indicator],
                Slot::ErrorSd { class, indicator } => theta.classes[class].measurement.error_sd[indicator],
                Slot::Threshold { class, group, m } => {
                    let h = self.indicator_group[class]
                        .iter()
                        .position(|&g| g == group)
                        .expect("every group has an indicator");
                    theta.classes[class].measurement.thresholds[h][m]
                }
                Slot::Asc { class, alt } => theta.classes[class].choice.alternatives[alt].asc,
                Slot::Coef { class, alt, cov } => match theta.classes[class].choice.alternatives[alt].coefs[cov] {
                    Coef::Fixed(b) => b,
                    Coef::Normal { mean, .. } => mean,
                },
                Slot::CoefMean { class, alt, cov } => match theta.classes[class].choice.alternatives[alt].coefs[cov] {
                    Coef::Fixed(b) => b,
                    Coef::Normal { mean, .. } => mean,
                },
                Slot::CoefSd { class, alt, cov } => match theta.classes[class].choice.alternatives[alt].coefs[cov] {
                    Coef::Fixed(_) => 0.0,
                    Coef::Normal { sd, .. } => sd,
                },
                Slot::LatentCoef { class, alt, latent } => {
                    theta.classes[class].choice.alternatives[alt].latent_coefs[latent]
                }
            };
            out.push(v);
        }
        Ok(out)
    }

    /// Builds θ from natural values of all entries. Fails on invalid values
    /// (non-positive variances, unordered thresholds).
    pub fn build(&self, nat: &[f64]) -> Result<ParameterSet> {
        let theta = self.build_unchecked(nat)?;
        for c in &theta.classes {
            c.measurement.check()?;
        }
        Ok(theta)
    }

    /// As [`build`](Self::build) but only the covariance is validated, so a
    /// zero random-coefficient sd is accepted.
    pub fn build_unchecked(&self, nat: &[f64]) -> Result<ParameterSet> {
        if nat.len() != self.entries.len() {
            return Err(Error::dimension("natural parameter vector", self.entries.len(), nat.len()));
        }
        let mut theta = self.template.clone();
        let g_count = self.template.classes.first().map_or(0, |c| c.structural.n_latent());
        let mut psi_diag = vec![vec![1.0; g_count]; theta.classes.len()];
        let mut chol = vec![DMatrix::<f64>::identity(g_count, g_count); theta.classes.len()];
        for (e, &v) in self.entries.iter().zip(nat) {
            match e.slot {
                Slot::Gamma { class, term } => theta.membership.gamma[class - 1][term] = v,
                Slot::Lambda { class, latent, cov } => theta.classes[class].structural.lambda[latent][cov] = v,
                Slot::PsiVariance { class, latent } => psi_diag[class][latent] = v,
                Slot::Cholesky { class, row, col } => chol[class][(row, col)] = v,
                Slot::Loading { class, indicator } => theta.classes[class].measurement.loadings[indicator] = v,
                Slot::Intercept { class, indicator } => theta.classes[class].measurement.intercepts[indicator] = v,
                Slot::ErrorSd { class, indicator } => theta.classes[class].measurement.error_sd[indicator] = v,
                Slot::Threshold { class, group, m } => {
                    for (h, &g) in self.indicator_group[class].iter().enumerate() {
                        if g == group {
                            theta.classes[class].measurement.thresholds[h][m] = v;
                        }
                    }
                }
                Slot::Asc { class, alt } => theta.classes[class].choice.alternatives[alt].asc = v,
                Slot::Coef { class, alt, cov } => {
                    theta.classes[class].choice.alternatives[alt].coefs[cov] = Coef::Fixed(v)
                }
                Slot::CoefMean { class, alt, cov } => {
                    if let Coef::Normal { mean, .. } = &mut theta.classes[class].choice.alternatives[alt].coefs[cov] {
                        *mean = v;
                    }
                }
                Slot::CoefSd { class, alt, cov } => {
                    if let Coef::Normal { sd, .. } = &mut theta.classes[class].choice.alternatives[alt].coefs[cov] {
                        *sd = v;
                    }
                }
                Slot::LatentCoef { class, alt, latent } => {
                    theta.classes[class].choice.alternatives[alt].latent_coefs[latent] = v
                }
            }
        }
        for (q, c) in theta.classes.iter_mut().enumerate() {
            c.structural.psi = if self.full_covariance {
                Covariance::from_cholesky(chol[q].clone())?
            } else {
                Covariance::diagonal(&psi_diag[q])?
            };
        }
        Ok(theta)
    }

    /// Natural → unconstrained coordinates for all entries.
    pub fn to_raw(&self, nat: &[f64]) -> Result<Vec<f64>> {
        let mut raw = vec![0.0; nat.len()];
        for (i, e) in self.entries.iter().enumerate() {
            raw[i] = match e.transform {
                Transform::Identity => nat[i],
                Transform::Log => {
                    if !(nat[i] > 0.0) {
                        return Err(Error::InvalidArgument(format!("`{}` = {} must be positive", e.name, nat[i])));
                    }
                    nat[i].ln()
                }
                Transform::Threshold { group, pos } => {
                    if pos == 0 {
                        nat[i]
                    } else {
                        let prev = nat[self.groups[group][pos - 1]];
                        let gap = nat[i] - prev;
                        if !(gap > 0.0) {
                            return Err(Error::InvalidArgument(format!(
                                "`{}` = {} does not exceed the previous threshold {prev}",
                                e.name, nat[i]
                            )));
                        }
                        gap.ln()
                    }
                }
            };
        }
        Ok(raw)
    }

    /// Unconstrained → natural coordinates for all entries.
    pub fn from_raw(&self, raw: &[f64]) -> Vec<f64> {
        let mut nat = vec![0.0; raw.len()];
        for (i, e) in self.entries.iter().enumerate() {
            nat[i] = match e.transform {
                Transform::Identity => raw[i],
                Transform::Log => raw[i].exp(),
                Transform::Threshold { .. } => 0.0,
            };
        }
        for g in &self.groups {
            let mut acc = 0.0;
            for (pos, &i) in g.iter().enumerate() {
                acc = if pos == 0 { raw[i] } else { acc + raw[i].exp() };
                nat[i] = acc;
            }
        }
        nat
    }

    /// Raw coordinates of all entries with free ones taken from `free`.
    pub fn raw_all(&self, free: &[f64]) -> Result<Vec<f64>> {
        if free.len() != self.free.len() {
            return Err(Error::dimension("packed parameter vector", self.free.len(), free.len()));
        }
        let mut raw = self.to_raw(&self.fixed_values)?;
        for (&i, &v) in self.free.iter().zip(free) {
            raw[i] = v;
        }
        Ok(raw)
    }

    pub fn pack(&self, theta: &ParameterSet) -> Result<Vec<f64>> {
        let raw = self.to_raw(&self.natural_values(theta)?)?;
        Ok(self.free.iter().map(|&i| raw[i]).collect())
    }

    pub fn unpack(&self, free: &[f64]) -> Result<ParameterSet> {
        self.build(&self.from_raw(&self.raw_all(free)?))
    }

    /// Natural values of all entries implied by a packed vector.
    pub fn natural_from_packed(&self, free: &[f64]) -> Result<Vec<f64>> {
        Ok(self.from_raw(&self.raw_all(free)?))
    }

    /// Chains a gradient with respect to the natural values of all entries
    /// into a gradient with respect to the packed free coordinates.
    pub fn chain_gradient(&self, nat: &[f64], raw: &[f64], grad_nat: &[f64]) -> Vec<f64> {
        let mut g_raw = grad_nat.to_vec();
        for (i, e) in self.entries.iter().enumerate() {
            if e.transform == Transform::Log {
                g_raw[i] = grad_nat[i] * nat[i];
            }
        }
        for g in &self.groups {
            let mut tail = 0.0;
            for pos in (0..g.len()).rev() {
                tail += grad_nat[g[pos]];
                g_raw[g[pos]] = if pos == 0 { tail } else { tail * raw[g[pos]].exp() };
            }
        }
        self.free.iter().map(|&i| g_raw[i]).collect()
    }

    /// ∂ natural(free entries) / ∂ packed, a square matrix over free entries.
    pub fn jacobian(&self, free: &[f64]) -> Result<DMatrix<f64>> {
        let raw = self.raw_all(free)?;
        let nat = self.from_raw(&raw);
        let k = self.free.len();
        let mut pos_of = vec![usize::MAX; self.entries.len()];
        for (p, &i) in self.free.iter().enumerate() {
            pos_of[i] = p;
        }
        let mut jac = DMatrix::zeros(k, k);
        for (p, &i) in self.free.iter().enumerate() {
            match self.entries[i].transform {
                Transform::Identity => jac[(p, p)] = 1.0,
                Transform::Log => jac[(p, p)] = nat[i],
                Transform::Threshold { group, pos } => {
                    for (k2, &j) in self.groups[group][..=pos].iter().enumerate() {
                        let col = pos_of[j];
                        jac[(p, col)] = if k2 == 0 { 1.0 } else { raw[j].exp() };
                    }
                }
            }
        }
        Ok(jac)
    }

    /// θ from a name → natural value map; unnamed entries keep the neutral
    /// (or spec-fixed) value.
    pub fn from_named(&self, values: &BTreeMap<String, f64>) -> Result<ParameterSet> {
        let mut nat = self.fixed_values.clone();
        for (name, v) in values {
            let i = self
                .index_of(name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
            nat[i] = *v;
        }
        self.build_unchecked(&nat).and_then(|t| {
            for c in &t.classes {
                c.measurement.check()?;
            }
            Ok(t)
        })
    }

    /// Copies the fixed values into `theta`, leaving free entries as is.
    pub fn apply_fixed(&self, theta: &ParameterSet) -> Result<ParameterSet> {
        let mut nat = self.natural_values(theta)?;
        for (i, e) in self.entries.iter().enumerate() {
            if !e.free {
                nat[i] = self.fixed_values[i];
            }
        }
        self.build(&nat)
    }
}

/// Evenly spaced cut points on [-1.5, 1.5] for `categories` cells.
fn default_thresholds(categories: usize) -> Vec<f64> {
    let n = categories - 1;
    if n == 1 {
        return vec![0.0];
    }
    (0..n)
        .map(|m| -1.5 + 3.0 * m as f64 / (n - 1) as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SPEC: &str = r#"
classes = 2
membership_covariates = ["student"]
explanatory_covariates = ["age", "student"]
scenario_attributes = ["wt", "tt"]

[[latent]]
name = "safety"
structural_covariates = ["age"]
indicators = [{ name = "S1", categories = 3 }, { name = "S2", categories = 3 }, { name = "S3", categories = 4 }]

[utility]
covariates = ["wt", "tt", "age"]
latent = ["safety"]
random = ["wt"]
"#;

    fn layout() -> ParamLayout {
        ParamLayout::new(&ModelSpec::from_toml_str(SPEC).unwrap()).unwrap()
    }

    #[test]
    fn names_follow_blocks() {
        let l = layout();
        let names = l.names();
        assert!(names.contains(&"class2.membership.intercept".to_string()));
        assert!(names.contains(&"class2.membership.student".to_string()));
        assert!(!names.iter().any(|n| n.starts_with("class1.membership")));
        assert!(names.contains(&"class1.structural.safety.age".to_string()));
        assert!(names.contains(&"class1.structural.safety.psi".to_string()));
        assert!(!names.contains(&"class1.measurement.S1.loading".to_string()));
        assert!(names.contains(&"class1.measurement.S2.loading".to_string()));
        assert!(names.contains(&"class1.measurement.S3.tau3".to_string()));
        assert!(names.contains(&"class2.choice.wt.sd".to_string()));
        assert!(names.contains(&"class2.choice.tt".to_string()));
        assert!(names.contains(&"class2.choice.latent.safety".to_string()));
        // per class: lambda, psi, 2 loadings, 2+2+3 thresholds, asc, mean and sd, tt, age, latent
        assert_eq!(l.n_entries(), 2 + 2 * 17);
        assert_eq!(l.n_free(), l.n_entries());
    }

    #[test]
    fn known_packings() {
        let l = layout();
        let mut named = BTreeMap::new();
        named.insert("class1.measurement.S1.tau1".to_string(), -1.0);
        named.insert("class1.measurement.S1.tau2".to_string(), 1.0);
        named.insert("class1.choice.wt.sd".to_string(), 1.0);
        let theta = l.from_named(&named).unwrap();
        let packed = l.pack(&theta).unwrap();
        let at = |name: &str| packed[l.free.iter().position(|&i| l.entries[i].name == name).unwrap()];
        assert_eq!(at("class1.measurement.S1.tau1"), -1.0);
        assert!((at("class1.measurement.S1.tau2") - 2f64.ln()).abs() < 1e-15);
        assert_eq!(at("class1.choice.wt.sd"), 0.0);
        assert!(l.unpack(&packed[1..]).is_err());
    }

    #[test]
    fn fixed_entries_leave_the_free_vector() {
        let mut spec = ModelSpec::from_toml_str(SPEC).unwrap();
        spec.fixed.insert("class1.choice.tt".into(), 0.25);
        let l = ParamLayout::new(&spec).unwrap();
        assert_eq!(l.n_free(), l.n_entries() - 1);
        let theta = l.unpack(&l.pack(&l.neutral()).unwrap()).unwrap();
        assert_eq!(theta.classes[0].choice.alternatives[0].coefs[1], Coef::Fixed(0.25));
        spec.fixed.insert("class1.nothing".into(), 0.0);
        assert!(ParamLayout::new(&spec).is_err());
        let mut spec = ModelSpec::from_toml_str(SPEC).unwrap();
        spec.fixed.insert("class1.measurement.S1.tau1".into(), -3.0);
        assert!(ParamLayout::new(&spec).is_err());
    }

    #[test]
    fn shared_thresholds_and_fixed_variance() {
        let mut spec = ModelSpec::from_toml_str(SPEC).unwrap();
        spec.latent[0].indicators[2].categories = 3;
        spec.options.shared_thresholds = true;
        spec.options.free_error_sd = true;
        spec.options.fix_latent_variance = true;
        let l = ParamLayout::new(&spec).unwrap();
        let names = l.names();
        assert!(names.contains(&"class1.measurement.safety.tau2".to_string()));
        assert!(names.contains(&"class1.measurement.S1.loading".to_string()));
        assert!(names.contains(&"class1.measurement.S2.intercept".to_string()));
        assert!(names.contains(&"class1.measurement.S2.error_sd".to_string()));
        assert!(!names.contains(&"class1.structural.safety.psi".to_string()));
        let mut named = BTreeMap::new();
        named.insert("class1.measurement.safety.tau1".to_string(), -0.3);
        let theta = l.from_named(&named).unwrap();
        for h in 0..3 {
            assert_eq!(theta.classes[0].measurement.thresholds[h][0], -0.3);
        }
    }

    #[test]
    fn full_covariance_uses_cholesky_entries() {
        let mut spec = ModelSpec::from_toml_str(SPEC).unwrap();
        spec.latent.push(crate::data::spec::LatentSpec {
            name: "comfort".into(),
            structural_covariates: vec![],
            indicators: vec![crate::data::spec::IndicatorSpec { name: "C1".into(), categories: 3 }],
            reference: None,
        });
        spec.options.structural_covariance = CovarianceKind::Full;
        let l = ParamLayout::new(&spec).unwrap();
        assert!(l.index_of("class1.structural.chol.comfort.safety").is_some());
        let mut named = BTreeMap::new();
        named.insert("class1.structural.chol.comfort.safety".to_string(), 0.5);
        named.insert("class1.structural.chol.safety.safety".to_string(), 2.0);
        let theta = l.from_named(&named).unwrap();
        let m = theta.classes[0].structural.psi.matrix();
        assert!((m[(0, 0)] - 4.0).abs() < 1e-14 && (m[(1, 0)] - 1.0).abs() < 1e-14 && (m[(1, 1)] - 1.25).abs() < 1e-14);
        let packed = l.pack(&theta).unwrap();
        let back = l.natural_values(&l.unpack(&packed).unwrap()).unwrap();
        for (a, b) in back.iter().zip(l.natural_values(&theta).unwrap()) {
            assert!((a - b).abs() <= 1e-14 * b.abs().max(1.0));
        }
    }

    #[test]
    fn chain_rule_matches_jacobian() {
        let l = layout();
        let free: Vec<f64> = (0..l.n_free()).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
        let raw = l.raw_all(&free).unwrap();
        let nat = l.from_raw(&raw);
        let g: Vec<f64> = (0..l.n_entries()).map(|i| ((i * 13 % 7) as f64 - 3.0) / 4.0).collect();
        let chained = l.chain_gradient(&nat, &raw, &g);
        let jac = l.jacobian(&free).unwrap();
        let gf: Vec<f64> = l.free.iter().map(|&i| g[i]).collect();
        for c in 0..l.n_free() {
            let expect: f64 = (0..l.n_free()).map(|r| jac[(r, c)] * gf[r]).sum();
            assert!((chained[c] - expect).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn pack_unpack_roundtrip(seed in prop::collection::vec(-2.0f64..2.0, 36)) {
            let l = layout();
            let theta = l.unpack(&seed[..l.n_free()]).unwrap();
            let again = l.unpack(&l.pack(&theta).unwrap()).unwrap();
            let a = l.natural_values(&theta).unwrap();
            let b = l.natural_values(&again).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-14 * x.abs().max(1.0));
            }
        }
    }
}
