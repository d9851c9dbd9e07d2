//! Scale reliability and validity: Cronbach's α, AVE, composite reliability
//! and the Fornell–Larcker discriminant-validity check.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::data::dataset::Dataset;
use crate::data::spec::ModelSpec;
use crate::error::{Error, Result};

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Cronbach's α of an `N × k` item matrix (rows are respondents), using
/// sample variances with an `N − 1` denominator.
pub fn cronbach_alpha(items: &[Vec<f64>]) -> Result<f64> {
    let n = items.len();
    if n < 2 {
        return Err(Error::InvalidArgument("cronbach alpha needs at least 2 rows".into()));
    }
    let k = items[0].len();
    if k < 2 {
        return Err(Error::InvalidArgument("cronbach alpha needs at least 2 items".into()));
    }
    if let Some(row) = items.iter().find(|r| r.len() != k) {
        return Err(Error::dimension("item row", k, row.len()));
    }
    let item_var: f64 = (0..k)
        .map(|j| sample_var(&items.iter().map(|r| r[j]).collect::<Vec<_>>()))
        .sum();
    let totals: Vec<f64> = items.iter().map(|r| r.iter().sum()).collect();
    let total_var = sample_var(&totals);
    if !(total_var > 0.0) {
        return Err(Error::InvalidArgument("total score has zero variance".into()));
    }
    let k = k as f64;
    Ok(k / (k - 1.0) * (1.0 - item_var / total_var))
}

/// Average variance extracted and composite reliability from standardized
/// loadings.
pub fn construct_reliability(std_loadings: &[f64]) -> Result<(f64, f64)> {
    if std_loadings.is_empty() {
        return Err(Error::InvalidArgument("no loadings".into()));
    }
    let n = std_loadings.len() as f64;
    let ave = std_loadings.iter().map(|l| l * l).sum::<f64>() / n;
    let sum: f64 = std_loadings.iter().sum();
    let unique: f64 = std_loadings.iter().map(|l| 1.0 - l * l).sum();
    let cr = sum * sum / (sum * sum + unique);
    Ok((ave, cr))
}

/// `pass[i][j]` holds when √AVE_i exceeds |corr_ij|; the diagonal passes.
pub fn fornell_larcker(ave: &[f64], correlation: &DMatrix<f64>) -> Vec<Vec<bool>> {
    let c = ave.len();
    (0..c)
        .map(|i| {
            (0..c)
                .map(|j| i == j || ave[i].sqrt() > correlation[(i, j)].abs())
                .collect()
        })
        .collect()
}

/// Loadings of the first principal component of an item correlation matrix,
/// signed so they sum positive. Used when no fitted model is available.
pub fn principal_component_loadings(items: &[Vec<f64>]) -> Result<Vec<f64>> {
    let k = items.first().map_or(0, Vec::len);
    if items.len() < 2 || k == 0 {
        return Err(Error::InvalidArgument("need at least 2 rows and 1 item".into()));
    }
    let cols: Vec<Vec<f64>> = (0..k).map(|j| items.iter().map(|r| r[j]).collect()).collect();
    let corr = DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { pearson(&cols[i], &cols[j]) });
    if corr.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("an item has zero variance".into()));
    }
    let eig = SymmetricEigen::new(corr);
    let (top, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if *v > best.1 { (i, *v) } else { best });
    let v = eig.eigenvectors.column(top);
    let scale = eig.eigenvalues[top].max(0.0).sqrt();
    let sign = if v.iter().sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
    Ok(v.iter().map(|x| sign * scale * x).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemStat {
    pub construct: String,
    pub item: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityReport {
    pub constructs: Vec<String>,
    pub items: Vec<ItemStat>,
    pub alpha: Vec<f64>,
    pub ave: Vec<f64>,
    pub cr: Vec<f64>,
    pub sqrt_ave: Vec<f64>,
    pub correlation: DMatrix<f64>,
    pub fornell_larcker_pass: Vec<Vec<bool>>,
}

/// Builds the report for every latent construct in `spec`. When
/// `std_loadings` is `None`, first-principal-component loadings stand in for
/// model-implied standardized loadings.
pub fn reliability_report(
    dataset: &Dataset,
    spec: &ModelSpec,
    std_loadings: Option<&[Vec<f64>]>,
) -> Result<ReliabilityReport> {
    let inds = spec.indicators();
    let mut constructs = Vec::new();
    let mut items = Vec::new();
    let mut alpha = Vec::new();
    let mut ave = Vec::new();
    let mut cr = Vec::new();
    let mut scores = Vec::new();
    for (g, lat) in spec.latent.iter().enumerate() {
        constructs.push(lat.name.clone());
        let cols: Vec<usize> = (0..inds.len()).filter(|&h| inds[h].latent == g).collect();
        // complete cases for this construct
        let rows: Vec<Vec<f64>> = dataset
            .respondents
            .iter()
            .filter_map(|r| {
                cols.iter()
                    .map(|&h| r.indicators[h].map(|v| v as f64))
                    .collect::<Option<Vec<f64>>>()
            })
            .collect();
        if rows.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "construct `{}` has fewer than 2 complete responses",
                lat.name
            )));
        }
        for (j, &h) in cols.iter().enumerate() {
            let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            items.push(ItemStat {
                construct: lat.name.clone(),
                item: inds[h].name.clone(),
                mean: mean(&col),
                sd: sample_var(&col).sqrt(),
            });
        }
        alpha.push(if cols.len() >= 2 { cronbach_alpha(&rows)? } else { f64::NAN });
        let loadings = match std_loadings {
            Some(l) => l[g].clone(),
            None => principal_component_loadings(&rows)?,
        };
        let (a, c) = construct_reliability(&loadings)?;
        ave.push(a);
        cr.push(c);
        scores.push(
            dataset
                .respondents
                .iter()
                .map(|r| {
                    let vals: Vec<f64> = cols.iter().filter_map(|&h| r.indicators[h].map(|v| v as f64)).collect();
                    if vals.is_empty() { f64::NAN } else { mean(&vals) }
                })
                .collect::<Vec<f64>>(),
        );
    }
    let c = constructs.len();
    let correlation = DMatrix::from_fn(c, c, |i, j| {
        if i == j {
            1.0
        } else {
            let (a, b): (Vec<f64>, Vec<f64>) = scores[i]
                .iter()
                .zip(&scores[j])
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .map(|(x, y)| (*x, *y))
                .unzip();
            pearson(&a, &b)
        }
    });
    let sqrt_ave = ave.iter().map(|a| a.sqrt()).collect();
    let fornell_larcker_pass = fornell_larcker(&ave, &correlation);
    Ok(ReliabilityReport {
        constructs,
        items,
        alpha,
        ave,
        cr,
        sqrt_ave,
        correlation,
        fornell_larcker_pass,
    })
}

fn fmt3(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.3}")
    } else {
        String::new()
    }
}

impl ReliabilityReport {
    /// Writes `scale_items.csv`, `validity.csv` and `fornell_larcker.csv`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut out = String::from("construct,item,mean,sd,alpha\n");
        for (g, name) in self.constructs.iter().enumerate() {
            out.push_str(&format!("{name},,,,{}\n", fmt3(self.alpha[g])));
            for it in self.items.iter().filter(|i| &i.construct == name) {
                out.push_str(&format!("{name},{},{:.2},{:.2},\n", it.item, it.mean, it.sd));
            }
        }
        write_file(&dir.join("scale_items.csv"), &out)?;

        let c = self.constructs.len();
        let mut out = String::from("construct");
        for name in &self.constructs {
            out.push(',');
            out.push_str(name);
        }
        out.push_str(",CR\n");
        for i in 0..c {
            out.push_str(&self.constructs[i]);
            for j in 0..c {
                out.push(',');
                if j < i {
                    out.push_str(&fmt3(self.correlation[(i, j)]));
                } else if j == i {
                    out.push_str(&fmt3(self.ave[i]));
                }
            }
            out.push_str(&format!(",{}\n", fmt3(self.cr[i])));
        }
        out.push_str("sqrt_ave");
        for v in &self.sqrt_ave {
            out.push_str(&format!(",{}", fmt3(*v)));
        }
        out.push_str(",\n");
        write_file(&dir.join("validity.csv"), &out)?;

        let mut out = String::from("construct");
        for name in &self.constructs {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for i in 0..c {
            out.push_str(&self.constructs[i]);
            for j in 0..c {
                out.push_str(if self.fornell_larcker_pass[i][j] { ",pass" } else { ",fail" });
            }
            out.push('\n');
        }
        write_file(&dir.join("fornell_larcker.csv"), &out)
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn columns_to_rows(cols: &[Vec<f64>]) -> Vec<Vec<f64>> {
        (0..cols[0].len()).map(|i| cols.iter().map(|c| c[i]).collect()).collect()
    }

    #[test]
    fn alpha_closed_form_examples() {
        let u = [1.0, -1.0, 1.0, -1.0];
        let w = [1.0, 1.0, -1.0, -1.0];
        let b: Vec<f64> = u.iter().zip(&w).map(|(u, w)| (u + 3f64.sqrt() * w) / 2.0).collect();
        let rows = columns_to_rows(&[u.to_vec(), b]);
        assert_abs_diff_eq!(cronbach_alpha(&rows).unwrap(), 2.0 / 3.0, epsilon = 1e-12);

        let rows = columns_to_rows(&[u.to_vec(), u.to_vec(), u.to_vec()]);
        assert_abs_diff_eq!(cronbach_alpha(&rows).unwrap(), 1.0, epsilon = 1e-12);

        let rows = columns_to_rows(&[u.to_vec(), w.to_vec()]);
        assert_abs_diff_eq!(cronbach_alpha(&rows).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn alpha_errors() {
        assert!(cronbach_alpha(&[vec![1.0, 2.0]]).is_err());
        assert!(cronbach_alpha(&[vec![1.0], vec![2.0]]).is_err());
        assert!(cronbach_alpha(&[vec![1.0, 1.0], vec![1.0, 1.0]]).is_err());
    }

    #[test]
    fn ave_and_cr_examples() {
        let (ave, cr) = construct_reliability(&[0.8, 0.8, 0.8]).unwrap();
        assert_abs_diff_eq!(ave, 0.64, epsilon = 1e-12);
        assert_abs_diff_eq!(cr, 5.76 / (5.76 + 1.08), epsilon = 1e-12);
        assert_abs_diff_eq!(cr, 0.842, epsilon = 1e-3);
        let near = 1.0 - 1e-9;
        let (ave, cr) = construct_reliability(&[near, near]).unwrap();
        assert!((1.0 - ave) < 1e-8 && (1.0 - cr) < 1e-8);
        assert!(construct_reliability(&[]).is_err());
        assert_abs_diff_eq!(0.596f64.sqrt(), 0.772, epsilon = 1e-3);
    }

    #[test]
    fn fornell_larcker_examples() {
        let corr = DMatrix::from_row_slice(2, 2, &[1.0, 0.461, 0.461, 1.0]);
        assert!(fornell_larcker(&[0.596, 0.600], &corr)[0][1]);
        let corr = DMatrix::from_row_slice(2, 2, &[1.0, 0.9, 0.9, 1.0]);
        let pass = fornell_larcker(&[0.25, 0.25], &corr);
        assert!(!pass[0][1] && pass[0][0]);
        let id = DMatrix::<f64>::identity(3, 3);
        assert!(fornell_larcker(&[0.01, 0.2, 0.3], &id).iter().flatten().all(|p| *p));
    }

    proptest! {
        #[test]
        fn alpha_invariant_to_shift_and_joint_scale(
            data in prop::collection::vec(prop::collection::vec(1.0f64..5.0, 3), 5..30),
            shift in -10.0f64..10.0,
            item in 0usize..3,
            scale in 0.1f64..10.0,
        ) {
            let Ok(base) = cronbach_alpha(&data) else { return Ok(()); };
            let shifted: Vec<Vec<f64>> = data.iter().map(|r| {
                let mut r = r.clone();
                r[item] += shift;
                r
            }).collect();
            let scaled: Vec<Vec<f64>> = data.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
            prop_assert!((cronbach_alpha(&shifted).unwrap() - base).abs() < 1e-9 * base.abs().max(1.0));
            prop_assert!((cronbach_alpha(&scaled).unwrap() - base).abs() < 1e-9 * base.abs().max(1.0));
        }

        #[test]
        fn ave_is_mean_square(l in prop::collection::vec(-0.99f64..0.99, 1..10)) {
            let (ave, _) = construct_reliability(&l).unwrap();
            let mut acc = 0.0;
            for v in &l {
                acc += v.powi(2);
            }
            prop_assert!((ave - acc / l.len() as f64).abs() <= 1e-14);
            prop_assert!((0.0..=1.0).contains(&ave));
        }
    }
}
