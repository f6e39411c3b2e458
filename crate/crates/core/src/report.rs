//! Text rendering of pooled tables and model fits.
//!
//! Numbers follow the journal convention of dropping the leading zero of
//! values bounded by one (`.34`, `-.11`); p-values below .001 print as `<.001`.

use std::fmt::Write as _;
use std::io::Write;

use crate::error::{Error, Result};
use crate::meta::{PooledCell, PooledTable};
use crate::pooledmatrix::{check_positive_definite, Definiteness, PooledMatrix};
use crate::sem::FitResult;

pub const MISSING: &str = "—";

/// Fixed decimals with the leading zero removed; negative zero prints unsigned.
pub fn bounded(x: f64, decimals: usize) -> String {
    let s = format!("{:.*}", decimals, x);
    let s = if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    };
    if let Some(rest) = s.strip_prefix("0.") {
        format!(".{rest}")
    } else if let Some(rest) = s.strip_prefix("-0.") {
        format!("-.{rest}")
    } else {
        s
    }
}

/// `=.035` or `<.001`.
pub fn p_value(p: f64) -> String {
    if p.is_nan() {
        format!("={MISSING}")
    } else if p < 0.001 {
        "<.001".to_string()
    } else {
        format!("={}", bounded(p, 3))
    }
}

/// `.035` or `<.001`, for table columns.
pub fn p_column(p: f64) -> String {
    p_value(p).trim_start_matches('=').to_string()
}

/// `.34 (p=.001) [.14; .52] k=7`
pub fn pooled_cell(cell: &PooledCell) -> String {
    format!(
        "{} (p{}) [{}; {}] k={}",
        bounded(cell.r, 2),
        p_value(cell.p_z),
        bounded(cell.ci_r.0, 2),
        bounded(cell.ci_r.1, 2),
        cell.k
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Markdown,
    Plain,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markdown" | "md" => Ok(Format::Markdown),
            "plain" | "text" | "txt" => Ok(Format::Plain),
            other => Err(Error::Config(format!("unknown report format `{other}` (markdown or plain)"))),
        }
    }
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Markdown => "md",
            Format::Plain => "txt",
        }
    }
}

/// Renders rows as a Markdown table or as aligned plain text.
fn table(format: Format, header: &[String], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    match format {
        Format::Markdown => {
            let _ = writeln!(out, "| {} |", header.join(" | "));
            let _ = writeln!(out, "|{}", header.iter().map(|_| "---|").collect::<String>());
            for row in rows {
                let _ = writeln!(out, "| {} |", row.join(" | "));
            }
        }
        Format::Plain => {
            let cols = header.len();
            let width: Vec<usize> = (0..cols)
                .map(|c| {
                    std::iter::once(&header[c])
                        .chain(rows.iter().map(|r| &r[c]))
                        .map(|s| s.chars().count())
                        .max()
                        .unwrap_or(0)
                })
                .collect();
            let line = |cells: &[String]| {
                cells
                    .iter()
                    .zip(&width)
                    .map(|(s, w)| format!("{s:<w$}"))
                    .collect::<Vec<_>>()
                    .join("  ")
                    .trim_end()
                    .to_string()
            };
            let _ = writeln!(out, "{}", line(header));
            let _ = writeln!(out, "{}", width.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
            for row in rows {
                let _ = writeln!(out, "{}", line(row));
            }
        }
    }
    out
}

fn heading(format: Format, level: usize, text: &str) -> String {
    match format {
        Format::Markdown => format!("{} {text}\n\n", "#".repeat(level)),
        Format::Plain => {
            let under = if level <= 1 { '=' } else { '-' };
            format!("{text}\n{}\n\n", under.to_string().repeat(text.chars().count()))
        }
    }
}

/// Lower-triangular table of pooled cells in the table's variable order.
pub fn pooled_table(table: &PooledTable, format: Format) -> String {
    let vars = table.variables();
    let mut header = vec![String::new()];
    header.extend(vars[..vars.len().saturating_sub(1)].iter().cloned());
    let rows: Vec<Vec<String>> = vars
        .iter()
        .enumerate()
        .skip(1)
        .map(|(i, row)| {
            let mut cells = vec![row.clone()];
            for (j, col) in vars[..vars.len() - 1].iter().enumerate() {
                cells.push(if j < i {
                    table.get(row, col).map(pooled_cell).unwrap_or_else(|| MISSING.to_string())
                } else {
                    String::new()
                });
            }
            cells
        })
        .collect();
    table_or_empty(format, &header, &rows)
}

fn table_or_empty(format: Format, header: &[String], rows: &[Vec<String>]) -> String {
    if rows.is_empty() {
        format!("{MISSING}\n")
    } else {
        table(format, header, rows)
    }
}

pub fn write_pooled_cells_csv<W: Write>(table: &PooledTable, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let e = |err: csv::Error| Error::Domain(format!("writing CSV: {err}"));
    w.write_record([
        "var_a", "var_b", "k", "n_total", "r", "ci_lower", "ci_upper", "theta_z", "se_theta", "z", "p", "tau2", "q", "p_q", "i2", "h2",
    ])
    .map_err(e)?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_else(|| "NA".into());
    for pair in table.display_pairs() {
        let Some(c) = table.cells().get(&pair) else { continue };
        w.write_record([
            pair.first().to_string(),
            pair.second().to_string(),
            c.k.to_string(),
            c.n_total.to_string(),
            c.r.to_string(),
            c.ci_r.0.to_string(),
            c.ci_r.1.to_string(),
            c.theta_z.to_string(),
            c.se_theta.to_string(),
            c.z_stat.to_string(),
            c.p_z.to_string(),
            c.tau2.to_string(),
            c.q.to_string(),
            opt(c.p_q),
            opt(c.i2),
            opt(c.h2),
        ])
        .map_err(e)?;
    }
    w.flush().map_err(|err| Error::Domain(format!("writing CSV: {err}")))
}

pub fn write_forest_csv<W: Write>(table: &PooledTable, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let e = |err: csv::Error| Error::Domain(format!("writing CSV: {err}"));
    w.write_record(["var_a", "var_b", "study_id", "n", "r", "ci_lower", "ci_upper", "weight_pct"])
        .map_err(e)?;
    for row in table.forest_rows() {
        w.write_record([
            row.pair.first().to_string(),
            row.pair.second().to_string(),
            row.study_id,
            row.n.to_string(),
            row.r.to_string(),
            row.ci_lower.to_string(),
            row.ci_upper.to_string(),
            row.weight.to_string(),
        ])
        .map_err(e)?;
    }
    w.flush().map_err(|err| Error::Domain(format!("writing CSV: {err}")))
}

/// Harmonic-mean sample size and definiteness of a variable set.
pub fn matrix_summary(m: &PooledMatrix) -> String {
    let check = check_positive_definite(&m.r_matrix);
    let verdict = match check.verdict {
        Definiteness::PositiveDefinite => "positive definite",
        Definiteness::NearSingular => "near-singular",
        Definiteness::NotPositiveDefinite => "NOT positive definite",
    };
    let mut s = format!(
        "{}: n={} (harmonic mean {:.2}, arithmetic mean {:.2}); {verdict}",
        m.variables.join(", "),
        m.n_for_fit(),
        m.n_harmonic,
        m.n_arithmetic()
    );
    if !check.min_eigenvalue.is_nan() {
        let _ = write!(s, ", smallest eigenvalue {:.4}", check.min_eigenvalue);
    }
    if !m.missing_pairs.is_empty() {
        let _ = write!(
            s,
            "; missing pairs: {}",
            m.missing_pairs.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
        );
    }
    s
}

fn opt_bounded(x: Option<f64>, decimals: usize) -> String {
    x.map(|v| bounded(v, decimals)).unwrap_or_else(|| MISSING.to_string())
}

/// One model's estimates, R², Wald tests, fit indices and indirect effects.
pub fn model_section(fit: &FitResult, spec_text: &str, format: Format) -> String {
    let mut out = heading(format, 3, &fit.model);
    let _ = writeln!(out, "n={} ({} variables)\n", fit.n_used, fit.variables.len());
    for line in spec_text.lines() {
        let _ = writeln!(out, "    {line}");
    }
    out.push('\n');
    for w in &fit.warnings {
        let _ = writeln!(out, "WARNING: {w}\n");
    }

    let rows: Vec<Vec<String>> = fit
        .coefficients
        .iter()
        .map(|c| {
            vec![
                format!("{} -> {}", c.from, c.to),
                bounded(c.estimate, 3),
                bounded(c.se, 3),
                format!("{:.2}", c.z),
                p_column(c.p),
            ]
        })
        .collect();
    out.push_str(&table(format, &strings(&["path", "beta", "se", "z", "p"]), &rows));
    out.push('\n');

    let r2: Vec<Vec<String>> = fit
        .r2
        .iter()
        .map(|(v, r)| {
            let w = fit.wald_for(v);
            vec![
                v.clone(),
                bounded(*r, 3),
                w.map(|w| format!("{:.2}", w.statistic)).unwrap_or_default(),
                w.map(|w| w.df.to_string()).unwrap_or_default(),
                w.map(|w| p_column(w.p)).unwrap_or_default(),
            ]
        })
        .collect();
    out.push_str(&table(format, &strings(&["dependent", "R2", "Wald", "df", "p"]), &r2));
    out.push('\n');

    let ix = &fit.indices;
    if ix.saturated() {
        let _ = writeln!(
            out,
            "Fit: saturated (df=0, chi2={:.2}); CFI, TLI and RMSEA are undefined and the fit is perfect by construction.\n",
            ix.chi2
        );
    } else {
        let _ = writeln!(
            out,
            "Fit: chi2={:.2}, df={}, p{}, CFI={}, TLI={}, RMSEA={}, SRMR={}, AIC={:.1}, BIC={:.1}\n",
            ix.chi2,
            ix.df,
            ix.p_chi2.map(p_value).unwrap_or_else(|| MISSING.into()),
            opt_bounded(ix.cfi, 3),
            opt_bounded(ix.tli, 3),
            opt_bounded(ix.rmsea, 3),
            bounded(ix.srmr, 3),
            ix.aic,
            ix.bic
        );
    }

    if !fit.effects.paths.is_empty() {
        let rows: Vec<Vec<String>> = fit
            .effects
            .paths
            .iter()
            .map(|p| {
                vec![
                    format!("{} -> {} -> {}", p.from, p.via, p.to),
                    bounded(p.estimate, 3),
                    bounded(p.se, 3),
                    p_column(p.p),
                ]
            })
            .collect();
        out.push_str(&table(format, &strings(&["indirect path", "beta", "se", "p"]), &rows));
        out.push('\n');
        let rows: Vec<Vec<String>> = fit
            .effects
            .totals
            .iter()
            .map(|t| {
                let i = fit.variables.iter().position(|v| *v == t.to).unwrap_or(0);
                let j = fit.variables.iter().position(|v| *v == t.from).unwrap_or(0);
                vec![
                    format!("{} -> {}", t.from, t.to),
                    bounded(fit.effects.matrices.direct[(i, j)], 3),
                    bounded(t.estimate, 3),
                    bounded(fit.effects.matrices.total[(i, j)], 3),
                    p_column(t.p),
                ]
            })
            .collect();
        out.push_str(&table(
            format,
            &strings(&["effect", "direct", "indirect", "total", "p (indirect)"]),
            &rows,
        ));
        out.push('\n');
    }
    out
}

/// Models ranked by AIC, with the BIC rank alongside.
pub fn comparison_table(fits: &[&FitResult], format: Format) -> String {
    let mut order: Vec<&FitResult> = fits.to_vec();
    order.sort_by(|a, b| a.indices.aic.total_cmp(&b.indices.aic).then_with(|| a.model.cmp(&b.model)));
    let mut by_bic: Vec<&str> = fits.iter().map(|f| f.model.as_str()).collect();
    by_bic.sort_by(|a, b| {
        let fa = fits.iter().find(|f| f.model == *a).map(|f| f.indices.bic).unwrap_or(f64::NAN);
        let fb = fits.iter().find(|f| f.model == *b).map(|f| f.indices.bic).unwrap_or(f64::NAN);
        fa.total_cmp(&fb).then_with(|| a.cmp(b))
    });
    let rows: Vec<Vec<String>> = order
        .iter()
        .map(|f| {
            let ix = &f.indices;
            vec![
                f.model.clone(),
                f.n_used.to_string(),
                ix.df.to_string(),
                format!("{:.2}", ix.chi2),
                if ix.saturated() {
                    "saturated".to_string()
                } else {
                    opt_bounded(ix.cfi, 3)
                },
                opt_bounded(ix.tli, 3),
                opt_bounded(ix.rmsea, 3),
                bounded(ix.srmr, 3),
                format!("{:.1}", ix.aic),
                format!("{:.1}", ix.bic),
                (by_bic.iter().position(|m| *m == f.model).unwrap_or(0) + 1).to_string(),
            ]
        })
        .collect();
    table_or_empty(
        format,
        &strings(&["model", "n", "df", "chi2", "CFI", "TLI", "RMSEA", "SRMR", "AIC", "BIC", "BIC rank"]),
        &rows,
    )
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// A pooled scheme ready for the consolidated report.
pub struct SchemeReport<'a> {
    pub name: &'a str,
    pub table: &'a PooledTable,
    /// Variable sets whose harmonic means are reported, one per fitted variable set.
    pub matrices: Vec<PooledMatrix>,
    pub fits: Vec<(&'a FitResult, &'a str)>,
}

pub fn full_report(title: &str, schemes: &[SchemeReport<'_>], format: Format) -> String {
    let mut out = heading(format, 1, title);
    for scheme in schemes {
        out.push_str(&heading(format, 2, &format!("Pooled correlations: {}", scheme.name)));
        out.push_str("Random-effects estimates back-transformed to r, with p-value, 95% interval and study count.\n\n");
        out.push_str(&pooled_table(scheme.table, format));
        out.push('\n');
        let missing = scheme.table.missing_pairs();
        if !missing.is_empty() {
            let _ = writeln!(
                out,
                "No studies for: {}\n",
                missing.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
            );
        }
        if !scheme.matrices.is_empty() {
            out.push_str(&heading(format, 3, "Sample sizes for model fitting"));
            for m in &scheme.matrices {
                let _ = writeln!(out, "- {}", matrix_summary(m));
            }
            out.push('\n');
        }
        if !scheme.fits.is_empty() {
            out.push_str(&heading(format, 2, &format!("Path models: {}", scheme.name)));
            for (fit, spec) in &scheme.fits {
                out.push_str(&model_section(fit, spec, format));
            }
            out.push_str(&heading(format, 3, "Model comparison (sorted by AIC)"));
            let fits: Vec<&FitResult> = scheme.fits.iter().map(|(f, _)| *f).collect();
            out.push_str(&comparison_table(&fits, format));
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta::{pool_cell, EffectPoint};

    #[test]
    fn number_formatting() {
        assert_eq!(bounded(0.3421, 2), ".34");
        assert_eq!(bounded(-0.1099, 2), "-.11");
        assert_eq!(bounded(-0.001, 2), ".00");
        assert_eq!(bounded(1.5, 1), "1.5");
        assert_eq!(bounded(0.485_9, 3), ".486");
        assert_eq!(p_value(0.0004), "<.001");
        assert_eq!(p_value(0.035), "=.035");
        assert_eq!(p_value(0.1), "=.100");
    }

    #[test]
    fn cell_text() {
        let pts = [
            (0.632, 300),
            (0.187, 522),
            (0.640, 203),
            (0.046, 72),
            (0.048, 2065),
            (0.354, 211),
            (0.324, 904),
        ]
        .iter()
        .enumerate()
        .map(|(i, &(r, n))| EffectPoint::from_correlation(format!("s{i}"), r, n).unwrap())
        .collect::<Vec<_>>();
        assert_eq!(pooled_cell(&pool_cell(&pts).unwrap()), ".34 (p=.001) [.14; .52] k=7");
    }

    #[test]
    fn plain_table_alignment() {
        let t = table(Format::Plain, &strings(&["a", "bb"]), &[strings(&["xxx", "y"])]);
        assert_eq!(t, "a    bb\n---  --\nxxx  y\n");
    }
}
