use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

/// 97.5% quantile of the standard normal distribution.
pub const Z_975: f64 = 1.959_963_984_540_054;

/// Two-sided p-value of a standard-normal test statistic.
pub fn normal_two_sided_p(z: f64) -> f64 {
    if !z.is_finite() {
        return if z.is_nan() { f64::NAN } else { 0.0 };
    }
    let std_normal = Normal::standard();
    (2.0 * std_normal.sf(z.abs())).min(1.0)
}

/// Upper-tail probability of a chi-square statistic.
pub fn chi_square_sf(statistic: f64, df: f64) -> f64 {
    if df <= 0.0 || statistic.is_nan() {
        return f64::NAN;
    }
    if statistic <= 0.0 {
        return 1.0;
    }
    ChiSquared::new(df).map(|d| d.sf(statistic)).unwrap_or(f64::NAN)
}
