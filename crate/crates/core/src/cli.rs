//! Command-line front end: `pool`, `fit` and `report`.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::dataset::{load_dataset, ClusterMap, Dataset};
use crate::error::Error;
use crate::meta::PooledTable;
use crate::pipeline::pool_dataset;
use crate::pooledmatrix::{assemble_partial, read_labelled_matrix, PooledMatrix};
use crate::report::{self, Format, SchemeReport};
use crate::sem::{fit, FitOptions, FitResult, PathModelSpec};

#[derive(Debug, Parser)]
#[command(
    name = "masem",
    version,
    about = "Pool study correlations and fit path models to the pooled matrix"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pool correlations per variable pair and write the pooled table and matrix.
    Pool(PoolArgs),
    /// Fit path models to a pooled matrix.
    Fit(FitArgs),
    /// Run the whole pipeline from a TOML config and write one report.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Markdown,
    Plain,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Markdown => Format::Markdown,
            FormatArg::Plain => Format::Plain,
        }
    }
}

#[derive(Debug, Args)]
pub struct PoolArgs {
    #[arg(long)]
    pub studies: PathBuf,
    #[arg(long)]
    pub correlations: PathBuf,
    #[arg(long)]
    pub cluster: PathBuf,
    /// Comma-separated canonical variables, in display order.
    #[arg(long)]
    pub vars: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "markdown")]
    pub format: FormatArg,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Labelled correlation matrix CSV.
    #[arg(long, conflicts_with_all = ["from_pool", "studies"], requires = "sample_size")]
    pub matrix: Option<PathBuf>,
    /// Labelled matrix of per-cell cumulative sample sizes.
    #[arg(long, group = "sample_size", requires = "matrix")]
    pub n_matrix: Option<PathBuf>,
    /// One sample size for every cell.
    #[arg(long, group = "sample_size", requires = "matrix")]
    pub n: Option<f64>,
    /// Output directory of a previous `pool` run.
    #[arg(long, conflicts_with = "studies")]
    pub from_pool: Option<PathBuf>,
    #[arg(long, requires_all = ["correlations", "cluster"])]
    pub studies: Option<PathBuf>,
    #[arg(long, requires = "studies")]
    pub correlations: Option<PathBuf>,
    #[arg(long, requires = "studies")]
    pub cluster: Option<PathBuf>,
    /// Variables to pool when fitting from raw data; defaults to the models' variables.
    #[arg(long, requires = "studies")]
    pub vars: Option<String>,
    /// Model spec file; repeat for several models.
    #[arg(long = "model", required = true)]
    pub models: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Fit a non-positive-definite matrix after eigenvalue clipping.
    #[arg(long)]
    pub pd_repair: bool,
    #[arg(long, value_enum, default_value = "markdown")]
    pub format: FormatArg,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub config: PathBuf,
}

/// Bad invocation detected after argument parsing.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Pool(args) => cmd_pool(&args),
        Command::Fit(args) => cmd_fit(&args),
        Command::Report(args) => cmd_report(&args),
    }
}

fn parse_vars(list: &str) -> anyhow::Result<Vec<String>> {
    let vars: Vec<String> = list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    if vars.is_empty() {
        return Err(UsageError("--vars needs at least one variable".into()).into());
    }
    let mut seen = BTreeSet::new();
    for v in &vars {
        if !seen.insert(v) {
            return Err(UsageError(format!("variable {v} listed twice in --vars")).into());
        }
    }
    Ok(vars)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create_file(path: &Path) -> anyhow::Result<fs::File> {
    fs::File::create(path).with_context(|| format!("writing {}", path.display()))
}

fn load_inputs(studies: &Path, correlations: &Path, cluster: &Path) -> anyhow::Result<(Dataset, ClusterMap)> {
    let data = load_dataset(studies, correlations)?;
    let map = ClusterMap::load(cluster)?;
    Ok((data, map))
}

fn warn_missing(table: &PooledTable) {
    let missing = table.missing_pairs();
    if !missing.is_empty() {
        eprintln!(
            "warning: no studies for {}",
            missing.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
        );
    }
}

pub fn cmd_pool(args: &PoolArgs) -> anyhow::Result<()> {
    let vars = parse_vars(&args.vars)?;
    let format = Format::from(args.format);
    let (data, cluster) = load_inputs(&args.studies, &args.correlations, &args.cluster)?;
    let table = pool_dataset(&data, &cluster, &vars)?;
    warn_missing(&table);
    let matrix = assemble_partial(&table, &vars)?;

    create_dir(&args.out)?;
    let text = report::pooled_table(&table, format);
    write_file(&args.out.join(format!("pooled_table.{}", format.extension())), &text)?;
    report::write_pooled_cells_csv(&table, create_file(&args.out.join("pooled_cells.csv"))?)?;
    report::write_forest_csv(&table, create_file(&args.out.join("forest.csv"))?)?;
    matrix.write_matrix_csv(create_file(&args.out.join("pooled_matrix.csv"))?)?;
    matrix.write_n_csv(create_file(&args.out.join("pooled_n.csv"))?)?;

    let mut stdout = std::io::stdout().lock();
    write!(stdout, "{text}")?;
    writeln!(stdout, "\n{}", report::matrix_summary(&matrix))?;
    Ok(())
}

fn read_matrix(path: &Path) -> anyhow::Result<(Vec<String>, nalgebra::DMatrix<f64>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(read_labelled_matrix(file, &path.display().to_string())?)
}

fn matrix_from_files(matrix: &Path, n_matrix: Option<&Path>, n: Option<f64>) -> anyhow::Result<PooledMatrix> {
    let (vars, r) = read_matrix(matrix)?;
    let m = match (n_matrix, n) {
        (Some(path), _) => {
            let (n_vars, n_cells) = read_matrix(path)?;
            if n_vars != vars {
                bail!("{} and {} label different variables", matrix.display(), path.display());
            }
            PooledMatrix::from_parts(vars, r, n_cells)?
        }
        (None, Some(n)) => PooledMatrix::from_correlations(vars, r, n)?,
        (None, None) => return Err(UsageError("--matrix needs --n-matrix or --n".into()).into()),
    };
    Ok(m)
}

fn load_models(paths: &[PathBuf]) -> anyhow::Result<Vec<PathModelSpec>> {
    let mut names = BTreeSet::new();
    let mut specs = Vec::new();
    for path in paths {
        let spec = PathModelSpec::load(path)?;
        if !names.insert(spec.name().to_string()) {
            bail!("two models are named {} (names come from file stems)", spec.name());
        }
        specs.push(spec);
    }
    Ok(specs)
}

fn fit_all(specs: &[PathModelSpec], matrix: &PooledMatrix, pd_repair: bool) -> anyhow::Result<Vec<FitResult>> {
    let opts = FitOptions {
        pd_repair,
        ..FitOptions::default()
    };
    specs
        .iter()
        .map(|spec| {
            let result = fit(spec, matrix, &opts).with_context(|| format!("fitting {}", spec.name()))?;
            for w in &result.warnings {
                eprintln!("WARNING [{}]: {w}", result.model);
            }
            Ok(result)
        })
        .collect()
}

fn write_fit_csvs(dir: &Path, fits: &[FitResult]) -> anyhow::Result<()> {
    let mut coef = csv::Writer::from_writer(create_file(&dir.join("coefficients.csv"))?);
    coef.write_record(["model", "from", "to", "estimate", "se", "z", "p", "unstandardized"])?;
    let mut idx = csv::Writer::from_writer(create_file(&dir.join("fit_indices.csv"))?);
    idx.write_record(["model", "n", "df", "chi2", "p_chi2", "cfi", "tli", "rmsea", "srmr", "aic", "bic"])?;
    let mut eff = csv::Writer::from_writer(create_file(&dir.join("indirect_effects.csv"))?);
    eff.write_record(["model", "from", "via", "to", "estimate", "se", "p"])?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_else(|| "NA".into());
    for f in fits {
        for c in &f.coefficients {
            coef.write_record([
                f.model.clone(),
                c.from.clone(),
                c.to.clone(),
                c.estimate.to_string(),
                c.se.to_string(),
                c.z.to_string(),
                c.p.to_string(),
                c.unstandardized.to_string(),
            ])?;
        }
        let ix = &f.indices;
        idx.write_record([
            f.model.clone(),
            f.n_used.to_string(),
            ix.df.to_string(),
            ix.chi2.to_string(),
            opt(ix.p_chi2),
            opt(ix.cfi),
            opt(ix.tli),
            opt(ix.rmsea),
            ix.srmr.to_string(),
            ix.aic.to_string(),
            ix.bic.to_string(),
        ])?;
        for p in &f.effects.paths {
            eff.write_record([
                f.model.clone(),
                p.from.clone(),
                p.via.clone(),
                p.to.clone(),
                p.estimate.to_string(),
                p.se.to_string(),
                p.p.to_string(),
            ])?;
        }
    }
    coef.flush()?;
    idx.flush()?;
    eff.flush()?;
    Ok(())
}

pub fn cmd_fit(args: &FitArgs) -> anyhow::Result<()> {
    let format = Format::from(args.format);
    let specs = load_models(&args.models)?;
    let matrix = if let Some(m) = &args.matrix {
        matrix_from_files(m, args.n_matrix.as_deref(), args.n)?
    } else if let Some(dir) = &args.from_pool {
        matrix_from_files(&dir.join("pooled_matrix.csv"), Some(&dir.join("pooled_n.csv")), None)?
    } else if let (Some(s), Some(c), Some(k)) = (&args.studies, &args.correlations, &args.cluster) {
        let (data, cluster) = load_inputs(s, c, k)?;
        let vars = match &args.vars {
            Some(list) => parse_vars(list)?,
            None => {
                let wanted: BTreeSet<String> = specs.iter().flat_map(|s| s.variables()).collect();
                cluster.variables().iter().filter(|v| wanted.contains(*v)).cloned().collect()
            }
        };
        let table = pool_dataset(&data, &cluster, &vars)?;
        assemble_partial(&table, &vars)?
    } else {
        return Err(UsageError("fit needs --matrix, --from-pool or --studies/--correlations/--cluster".into()).into());
    };

    let fits = fit_all(&specs, &matrix, args.pd_repair)?;
    create_dir(&args.out)?;
    for (fit, spec) in fits.iter().zip(&specs) {
        let text = report::model_section(fit, &spec.to_string(), format);
        write_file(&args.out.join(format!("{}.{}", fit.model, format.extension())), &text)?;
    }
    let refs: Vec<&FitResult> = fits.iter().collect();
    let comparison = report::comparison_table(&refs, format);
    write_file(&args.out.join(format!("comparison.{}", format.extension())), &comparison)?;
    write_fit_csvs(&args.out, &fits)?;
    print!("{comparison}");
    Ok(())
}

/// Contents of a `report --config` file. Relative paths resolve against the
/// config file's directory.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub title: Option<String>,
    pub studies: PathBuf,
    #[serde(default)]
    pub pd_repair: bool,
    pub format: Option<String>,
    /// Report destination; standard output when absent.
    pub output: Option<PathBuf>,
    #[serde(rename = "scheme")]
    pub schemes: Vec<SchemeConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeConfig {
    pub name: Option<String>,
    pub correlations: PathBuf,
    pub cluster: PathBuf,
    pub variables: Vec<String>,
    #[serde(default)]
    pub models: Vec<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.studies);
        if let Some(out) = self.output.as_mut() {
            fix(out);
        }
        for s in &mut self.schemes {
            fix(&mut s.correlations);
            fix(&mut s.cluster);
            s.models.iter_mut().for_each(fix);
        }
    }

    fn validate(&self) -> anyhow::Result<()> {
        if self.schemes.is_empty() {
            bail!(Error::Config("config needs at least one [[scheme]]".into()));
        }
        let mut files = vec![&self.studies];
        for s in &self.schemes {
            if s.variables.is_empty() {
                bail!(Error::Config("scheme with an empty variable list".into()));
            }
            files.push(&s.correlations);
            files.push(&s.cluster);
            files.extend(&s.models);
        }
        for f in files {
            if !f.is_file() {
                bail!(Error::Config(format!("{} does not exist", f.display())));
            }
        }
        Ok(())
    }
}

/// Builds the consolidated report text for a config.
pub fn build_report(cfg: &RunConfig) -> anyhow::Result<String> {
    let format: Format = match &cfg.format {
        Some(f) => f.parse()?,
        None => Format::Markdown,
    };
    struct Computed {
        name: String,
        table: PooledTable,
        matrices: Vec<PooledMatrix>,
        fits: Vec<(FitResult, String)>,
    }
    let mut computed = Vec::new();
    for scheme in &cfg.schemes {
        let (data, cluster) = load_inputs(&cfg.studies, &scheme.correlations, &scheme.cluster)?;
        let name = scheme.name.clone().unwrap_or_else(|| cluster.scheme_name().to_string());
        let table = pool_dataset(&data, &cluster, &scheme.variables).with_context(|| format!("pooling {name}"))?;
        let matrix = assemble_partial(&table, &scheme.variables)?;
        let specs = load_models(&scheme.models)?;
        let fits = fit_all(&specs, &matrix, cfg.pd_repair)?;
        let mut matrices: Vec<PooledMatrix> = Vec::new();
        for f in &fits {
            if !matrices.iter().any(|m| m.variables == f.variables) {
                matrices.push(matrix.subset(&f.variables)?);
            }
        }
        computed.push(Computed {
            name,
            table,
            matrices,
            fits: fits.into_iter().zip(specs.iter().map(ToString::to_string)).collect(),
        });
    }
    let schemes: Vec<SchemeReport<'_>> = computed
        .iter()
        .map(|c| SchemeReport {
            name: &c.name,
            table: &c.table,
            matrices: c.matrices.clone(),
            fits: c.fits.iter().map(|(f, s)| (f, s.as_str())).collect(),
        })
        .collect();
    let title = cfg.title.as_deref().unwrap_or("MASEM report");
    Ok(report::full_report(title, &schemes, format))
}

pub fn cmd_report(args: &ReportArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let text = build_report(&cfg)?;
    match &cfg.output {
        Some(path) => {
            if let Some(dir) = path.parent() {
                create_dir(dir)?;
            }
            write_file(path, &text)?;
            eprintln!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}
