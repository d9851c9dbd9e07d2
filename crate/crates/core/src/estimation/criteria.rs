//! Information criteria and choice-fit statistics.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitCriteria {
    pub ll: f64,
    pub aic: f64,
    pub bic: f64,
    /// Consistent AIC, −2ll + k(ln n + 1).
    pub caic: f64,
    /// Small-sample corrected AIC; infinite when n − k − 1 ≤ 0.
    pub aicc: f64,
    pub hqic: f64,
    /// Log-likelihood entering the likelihood-ratio test and ρ².
    pub ll_choice: f64,
    pub ll_null: f64,
    /// 2(ll_choice − ll_null).
    pub lr_vs_null: f64,
    pub mcfadden_rho2_adj: f64,
    pub k_params: usize,
    pub n_units: usize,
}

/// Criteria with a single log-likelihood used for both the information
/// criteria and the comparison with the null model.
pub fn fit_criteria(ll: f64, ll_null: f64, k: usize, n: usize) -> FitCriteria {
    fit_criteria_split(ll, ll, ll_null, k, n)
}

/// Criteria where the information criteria use the joint `ll` and the
/// likelihood-ratio statistic and ρ² use `ll_choice`.
pub fn fit_criteria_split(ll: f64, ll_choice: f64, ll_null: f64, k: usize, n: usize) -> FitCriteria {
    let kf = k as f64;
    let nf = n as f64;
    let dev = -2.0 * ll;
    let aic = dev + 2.0 * kf;
    let aicc = if nf - kf - 1.0 > 0.0 {
        aic + 2.0 * kf * (kf + 1.0) / (nf - kf - 1.0)
    } else {
        f64::INFINITY
    };
    FitCriteria {
        ll,
        aic,
        bic: dev + kf * nf.ln(),
        caic: dev + kf * (nf.ln() + 1.0),
        aicc,
        hqic: dev + 2.0 * kf * nf.ln().ln(),
        ll_choice,
        ll_null,
        lr_vs_null: 2.0 * (ll_choice - ll_null),
        mcfadden_rho2_adj: 1.0 - (ll_choice - kf) / ll_null,
        k_params: k,
        n_units: n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_example() {
        let c = fit_criteria(-100.0, -150.0, 5, 200);
        assert!((c.aic - 210.0).abs() < 1e-12);
        assert!((c.bic - 226.49).abs() < 5e-3);
        assert!((c.hqic - (200.0 + 10.0 * 200f64.ln().ln())).abs() < 1e-12);
        assert!((c.hqic - 216.674).abs() < 1e-3);
        assert!((c.caic - (c.bic + 5.0)).abs() < 1e-12);
        assert!((c.lr_vs_null - 100.0).abs() < 1e-12);
    }

    #[test]
    fn zero_parameters() {
        let c = fit_criteria(-80.0, -80.0, 0, 50);
        for v in [c.aic, c.bic, c.caic, c.hqic, c.aicc] {
            assert_eq!(v, 160.0);
        }
        assert_eq!(c.mcfadden_rho2_adj, 0.0);
    }

    #[test]
    fn aicc_is_infinite_when_undefined() {
        assert!(fit_criteria(-10.0, -12.0, 9, 10).aicc.is_infinite());
    }

    proptest! {
        #[test]
        fn matches_direct_formulas(ll in -1e4f64..-1.0, k in 1usize..60, n in 2usize..10_000) {
            let null = ll * 1.5;
            let c = fit_criteria(ll, null, k, n);
            let (kf, nf) = (k as f64, n as f64);
            prop_assert!((c.aic - (-2.0 * ll + 2.0 * kf)).abs() <= 1e-12 * c.aic.abs().max(1.0));
            prop_assert!((c.bic - (-2.0 * ll + kf * nf.ln())).abs() <= 1e-12 * c.bic.abs().max(1.0));
            prop_assert!((c.caic - (-2.0 * ll + kf * (nf.ln() + 1.0))).abs() <= 1e-12 * c.caic.abs().max(1.0));
            prop_assert!((c.hqic - (-2.0 * ll + 2.0 * kf * nf.ln().ln())).abs() <= 1e-12 * c.hqic.abs().max(1.0));
            prop_assert!((c.mcfadden_rho2_adj - (1.0 - (ll - kf) / null)).abs() <= 1e-12);
        }
    }
}
