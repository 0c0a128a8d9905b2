//! `pseudopanel` command-line front end.
//!
//! Exit codes: 0 success, 2 invalid input or configuration, 3 numerical
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use pseudopanel::data::{load_csv, PanelTable, RoleSchema, VariableRole};
use pseudopanel::demand::{elasticity_from_fit, shadow_price_elasticity, EvalPoint, GoodElasticity};
use pseudopanel::diagnostics::{dfbetas_filter, hausman};
use pseudopanel::estimators::{
    estimate, CorrectionKind, EstimatorOptions, FdCovariance, TransformKind, WithinMode,
};
use pseudopanel::iv::{iv_estimate, FirstStageSummary, InstrumentSet, IvSpec, QuadraticRule};
use pseudopanel::mc::{generate, run_study, SimulationConfig};
use pseudopanel::pseudo::{
    aggregate, assign_cohorts, cell_report, subsample_of, AggregateOptions, CohortScheme, Weighting, COHORT_COLUMN,
    SUBSAMPLE_COLUMN,
};
use pseudopanel::regress::{ModelSpec, INTERCEPT};
use pseudopanel::report::{to_json_string, FitReport};

#[derive(Debug, Parser)]
#[command(name = "pseudopanel", version, about = "Panel and pseudo-panel demand estimation")]
struct Cli {
    /// Seed for sub-sampling and simulation.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Main output file (stdout when omitted).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress informational messages on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Group a household panel into a cohort pseudo-panel.
    Group(GroupArgs),
    /// Fit an estimator (or the full estimator grid).
    Estimate(EstimateArgs),
    /// Run a Monte Carlo study.
    Simulate(SimulateArgs),
    /// Hausman test between two saved fits.
    Hausman(HausmanArgs),
    /// Income elasticity of a shadow price.
    ShadowPrice(ShadowPriceArgs),
    /// Expenditure elasticity from a saved fit.
    Elasticity(ElasticityArgs),
    /// DFBETAS outlier flags for an OLS fit.
    Filter(FilterArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum WeightingArg {
    Income,
    Equal,
}

impl From<WeightingArg> for Weighting {
    fn from(w: WeightingArg) -> Self {
        match w {
            WeightingArg::Income => Weighting::IncomeShare,
            WeightingArg::Equal => Weighting::Equal,
        }
    }
}

#[derive(Debug, Args)]
struct GroupingArgs {
    /// Cohort scheme JSON (default: six age bands on column `age`).
    #[arg(long)]
    scheme: Option<PathBuf>,
    /// Split units into K random sub-samples, one per wave residue.
    #[arg(long)]
    split: Option<u32>,
    #[arg(long, value_enum, default_value_t = WeightingArg::Income)]
    weighting: WeightingArg,
    /// Level outlay column for income-share weights.
    #[arg(long)]
    outlay: Option<String>,
    #[arg(long, default_value_t = 30)]
    min_cell_size: usize,
    #[arg(long)]
    require_balanced: bool,
}

#[derive(Debug, Args)]
struct GroupArgs {
    #[arg(long)]
    input: PathBuf,
    /// Role schema JSON (`{"column": "role"}`).
    #[arg(long)]
    schema: PathBuf,
    #[command(flatten)]
    grouping: GroupingArgs,
    /// Cell report JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[arg(long)]
    input: PathBuf,
    /// Role schema of the input. Without it the input must be a grouped CSV
    /// written by `group`.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Group the input on the fly with this cohort scheme.
    #[arg(long)]
    group: bool,
    #[command(flatten)]
    grouping: GroupingArgs,
    #[arg(long)]
    dependent: String,
    #[arg(long, value_delimiter = ',', required = true)]
    regressors: Vec<String>,
    #[arg(long)]
    no_intercept: bool,
    #[arg(long)]
    wave_dummies: bool,
    /// between | within | fd | cs
    #[arg(long, default_value = "within")]
    estimator: String,
    /// none | approx | exact | false
    #[arg(long, default_value = "none")]
    correction: String,
    /// demean | system
    #[arg(long, default_value = "demean")]
    within_mode: String,
    /// sur | cluster
    #[arg(long, default_value = "sur")]
    fd_cov: String,
    /// Instrument the endogenous regressor.
    #[arg(long)]
    iv: bool,
    #[arg(long, value_delimiter = ',')]
    instruments: Vec<String>,
    /// Endogenous regressor (default: the first regressor).
    #[arg(long)]
    endogenous: Option<String>,
    /// Squared endogenous regressor column.
    #[arg(long)]
    quadratic: Option<String>,
    /// Instrument the squared term with squared instruments instead of
    /// squaring the fitted value.
    #[arg(long)]
    separate_square: bool,
    /// Run every estimator with and without instruments.
    #[arg(long)]
    all: bool,
    /// Write the expenditure elasticity of the fit to this file.
    #[arg(long)]
    elasticity: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Simulation JSON (`{"dgp": {...}, "study": {...}}`); defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Write the first replication's data set as CSV.
    #[arg(long)]
    emit_data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct HausmanArgs {
    /// Fit JSON of the estimator that is efficient under the null (e.g. between).
    #[arg(long)]
    fit_a: PathBuf,
    /// Fit JSON of the estimator that is consistent under the alternative (e.g. within).
    #[arg(long)]
    fit_b: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    subset: Vec<String>,
    /// Restrict V to the subset before inverting (biased; for comparison).
    #[arg(long)]
    naive: bool,
}

#[derive(Debug, Args)]
struct ShadowPriceArgs {
    #[arg(long, allow_hyphen_values = true)]
    cs: f64,
    #[arg(long, allow_hyphen_values = true)]
    ts: f64,
    /// Direct price elasticity γ_ii.
    #[arg(long, allow_hyphen_values = true, conflicts_with = "frisch")]
    gamma: Option<f64>,
    /// Set γ_ii to half the time-series income effect (the default when
    /// `--gamma` is absent).
    #[arg(long)]
    frisch: bool,
    #[arg(long)]
    good: Option<String>,
}

#[derive(Debug, Args)]
struct ElasticityArgs {
    #[arg(long)]
    fit: PathBuf,
    /// Evaluate at the sample means recorded in the fit (default).
    #[arg(long)]
    at_means: bool,
    /// Share (dependent variable) name; inferred from the fit when omitted.
    #[arg(long)]
    share: Option<String>,
    /// Log outlay coefficient name (default: the first non-intercept term).
    #[arg(long)]
    ly: Option<String>,
    /// Quadratic log outlay coefficient name.
    #[arg(long)]
    ly2: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    e_p: f64,
    #[arg(long, allow_hyphen_values = true)]
    ln_y: Option<f64>,
    #[arg(long)]
    w_bar: Option<f64>,
}

#[derive(Debug, Args)]
struct FilterArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    dependent: String,
    #[arg(long, value_delimiter = ',', required = true)]
    regressors: Vec<String>,
    /// Use the 2/√n threshold (the only rule offered).
    #[arg(long)]
    threshold_auto: bool,
    /// Write the retained rows as CSV.
    #[arg(long)]
    retained: Option<PathBuf>,
}

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn from_core(op: &str, e: pseudopanel::Error) -> Self {
        Self {
            code: if e.is_numerical() { 3 } else { 2 },
            message: format!("{op}: {e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

trait Context<T> {
    fn op(self, op: &str) -> CliResult<T>;
}

impl<T> Context<T> for pseudopanel::Result<T> {
    fn op(self, op: &str) -> CliResult<T> {
        self.map_err(|e| CliError::from_core(op, e))
    }
}

impl<T> Context<T> for std::io::Result<T> {
    fn op(self, op: &str) -> CliResult<T> {
        self.map_err(|e| CliError::config(format!("{op}: {e}")))
    }
}

struct Io {
    out: Option<PathBuf>,
    quiet: bool,
}

impl Io {
    fn emit(&self, text: &str) -> CliResult<()> {
        match &self.out {
            Some(p) => std::fs::write(p, text).op(&format!("writing {}", p.display())),
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }

    fn info(&self, msg: &str) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).op(&format!("writing {}", path.display()))
}

fn read_file(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).op(&format!("reading {}", path.display()))
}

fn json<T: Serialize>(v: &T) -> CliResult<String> {
    to_json_string(v).op("serialising output")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let io = Io {
        out: cli.out.clone(),
        quiet: cli.quiet,
    };
    let result = match cli.command {
        Command::Group(a) => cmd_group(&a, cli.seed, &io),
        Command::Estimate(a) => cmd_estimate(&a, cli.seed, &io),
        Command::Simulate(a) => cmd_simulate(&a, cli.seed, &io),
        Command::Hausman(a) => cmd_hausman(&a, &io),
        Command::ShadowPrice(a) => cmd_shadow_price(&a, &io),
        Command::Elasticity(a) => cmd_elasticity(&a, &io),
        Command::Filter(a) => cmd_filter(&a, &io),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn load_scheme(g: &GroupingArgs) -> CliResult<CohortScheme> {
    let mut scheme = match &g.scheme {
        Some(p) => CohortScheme::from_json_str(&read_file(p)?).op("cohort scheme")?,
        None => CohortScheme::default(),
    };
    if let Some(k) = g.split {
        scheme = scheme.with_split(k);
    }
    Ok(scheme)
}

fn aggregate_options(g: &GroupingArgs) -> AggregateOptions {
    AggregateOptions {
        weighting: g.weighting.into(),
        outlay_column: g.outlay.clone(),
        min_cell_size: g.min_cell_size,
        require_balanced: g.require_balanced,
    }
}

fn group_table(
    table: &PanelTable,
    g: &GroupingArgs,
    seed: u64,
) -> CliResult<pseudopanel::pseudo::PseudoPanel> {
    // A table that already carries cohort labels is grouped on them unless a
    // scheme is given explicitly.
    let keyed = if g.scheme.is_none() && table.has_column(COHORT_COLUMN) {
        let mut t = table.clone();
        if let Some(k) = g.split {
            if k == 0 {
                return Err(CliError::config("--split must be positive"));
            }
            let subs = t.unit_ids().iter().map(|u| subsample_of(u, seed, k).to_string()).collect();
            t.add_labels(SUBSAMPLE_COLUMN, subs).op("group")?;
        }
        t
    } else {
        assign_cohorts(table, &load_scheme(g)?, seed).op("group")?
    };
    aggregate(&keyed, &aggregate_options(g)).op("group")
}

fn cmd_group(a: &GroupArgs, seed: u64, io: &Io) -> CliResult<()> {
    let schema = RoleSchema::load(&a.schema).op("schema")?;
    let table = load_csv(&a.input, &schema).op("load")?;
    let pp = group_table(&table, &a.grouping, seed)?;
    let mut buf = Vec::new();
    pp.write_csv(&mut buf).op("group")?;
    io.emit(&String::from_utf8_lossy(&buf))?;
    let report = cell_report(&pp, a.grouping.min_cell_size);
    io.info(&format!(
        "{} cells over {} keys; {} below {} members",
        report.n_cells,
        report.keys.len(),
        report.under_threshold,
        report.threshold
    ));
    if let Some(p) = &a.report {
        write_file(p, &json(&report)?)?;
    }
    Ok(())
}

/// Schema of a grouped CSV written by `group`: every column except `key` and
/// `wave` is numeric.
fn grouped_schema(path: &Path) -> CliResult<RoleSchema> {
    let text = read_file(path)?;
    let header = text.lines().next().ok_or_else(|| CliError::config("empty input file"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let unit = pseudopanel::pseudo::KEY_COLUMN;
    let wave = pseudopanel::pseudo::WAVE_COLUMN;
    if !cols.contains(&unit) || !cols.contains(&wave) {
        return Err(CliError::config(
            "input has no key/wave columns; pass --schema for a household panel",
        ));
    }
    let mut schema = RoleSchema::new(unit, wave);
    for c in cols.into_iter().filter(|c| *c != unit && *c != wave) {
        schema = schema.with(c, VariableRole::Regressor);
    }
    Ok(schema)
}

fn load_estimation_table(a: &EstimateArgs, seed: u64) -> CliResult<PanelTable> {
    match &a.schema {
        Some(s) => {
            let schema = RoleSchema::load(s).op("schema")?;
            let table = load_csv(&a.input, &schema).op("load")?;
            if a.group {
                group_table(&table, &a.grouping, seed)?.to_table().op("group")
            } else {
                Ok(table)
            }
        }
        None => {
            if a.group {
                return Err(CliError::config("--group needs --schema for the household panel"));
            }
            let schema = grouped_schema(&a.input)?;
            load_csv(&a.input, &schema).op("load")
        }
    }
}

fn parse<T>(r: pseudopanel::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::config(e.to_string()))
}

#[derive(Debug, Serialize)]
struct GridRow {
    estimator: TransformKind,
    iv: bool,
    target: String,
    coef: Option<f64>,
    se: Option<f64>,
    error: Option<String>,
    fit: Option<FitReport>,
}

#[derive(Debug, Serialize)]
struct GridReport {
    correction: CorrectionKind,
    rows: Vec<GridRow>,
}

#[derive(Debug, Serialize)]
struct IvReport<'a> {
    fit: &'a FitReport,
    first_stages: &'a [FirstStageSummary],
    fd_relevance_f: Option<f64>,
    warnings: &'a [String],
}

fn cmd_estimate(a: &EstimateArgs, seed: u64, io: &Io) -> CliResult<()> {
    let kind = parse(TransformKind::parse(&a.estimator))?;
    let correction = parse(CorrectionKind::parse(&a.correction))?;
    let opts = EstimatorOptions {
        correction: Some(correction),
        within_mode: parse(WithinMode::parse(&a.within_mode))?,
        fd_covariance: parse(FdCovariance::parse(&a.fd_cov))?,
        ..EstimatorOptions::default()
    };
    if a.iv && a.instruments.is_empty() {
        return Err(CliError::config("--iv requires --instruments"));
    }
    if a.all && a.instruments.is_empty() {
        return Err(CliError::config("--all requires --instruments for the instrumented column"));
    }
    let mut spec = ModelSpec::new(a.dependent.clone(), a.regressors.iter().cloned());
    if a.no_intercept {
        spec = spec.without_intercept();
    }
    if a.wave_dummies {
        spec = spec.with_wave_dummies();
    }
    let target = a.endogenous.clone().unwrap_or_else(|| a.regressors[0].clone());
    if !a.regressors.contains(&target) {
        return Err(CliError::config(format!("endogenous `{target}` is not a regressor")));
    }
    let iv_spec = (!a.instruments.is_empty()).then(|| {
        let mut s = IvSpec::new(InstrumentSet::new(target.clone(), a.instruments.iter().cloned()));
        if let Some(q) = &a.quadratic {
            let rule = if a.separate_square { QuadraticRule::SeparateInstrument } else { QuadraticRule::SquareOfFitted };
            s = s.with_quadratic(q.clone(), rule);
        }
        s
    });
    if let Some(s) = &iv_spec {
        s.set.validate(&spec).op("instruments")?;
    }
    let table = load_estimation_table(a, seed)?;

    if a.all {
        let iv_spec = iv_spec.as_ref().expect("checked above");
        let mut rows = Vec::new();
        for k in TransformKind::ALL {
            for instrumented in [false, true] {
                let res = if instrumented {
                    iv_estimate(k, &spec, &table, iv_spec, &opts).map(|f| f.fit)
                } else {
                    estimate(k, &spec, &table, &opts)
                };
                rows.push(match res {
                    Ok(f) => GridRow {
                        estimator: k,
                        iv: instrumented,
                        target: target.clone(),
                        coef: f.coef_of(&target),
                        se: f.se_of(&target),
                        error: None,
                        fit: Some(FitReport::from(&f)),
                    },
                    Err(e) => GridRow {
                        estimator: k,
                        iv: instrumented,
                        target: target.clone(),
                        coef: None,
                        se: None,
                        error: Some(e.to_string()),
                        fit: None,
                    },
                });
            }
        }
        let failed = rows.iter().filter(|r| r.error.is_some()).count();
        io.info(&format!("{} grid cells, {failed} failed", rows.len()));
        return io.emit(&json(&GridReport { correction, rows })?);
    }

    let op = format!("estimate {}/{}", kind.as_str(), correction.as_str());
    let (fit, text) = if a.iv {
        let iv_fit = iv_estimate(kind, &spec, &table, iv_spec.as_ref().expect("checked above"), &opts).op(&op)?;
        for w in &iv_fit.warnings {
            io.info(&format!("warning: {w}"));
        }
        let report = FitReport::from(&iv_fit.fit);
        let text = json(&IvReport {
            fit: &report,
            first_stages: &iv_fit.first_stages,
            fd_relevance_f: iv_fit.fd_relevance_f,
            warnings: &iv_fit.warnings,
        })?;
        (iv_fit.fit, text)
    } else {
        let fit = estimate(kind, &spec, &table, &opts).op(&op)?;
        let text = json(&FitReport::from(&fit))?;
        (fit, text)
    };
    io.emit(&text)?;
    if let Some(p) = &a.elasticity {
        let e = elasticity_from_fit(&fit, &a.dependent, &target, a.quadratic.as_deref(), 1.0).op("elasticity")?;
        write_file(p, &json(&e)?)?;
    }
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs, seed: u64, io: &Io) -> CliResult<()> {
    let mut cfg = match &a.config {
        Some(p) => SimulationConfig::from_json_str(&read_file(p)?).op("simulation config")?,
        None => SimulationConfig::default(),
    };
    cfg.dgp.seed = seed;
    if let Some(p) = &a.emit_data {
        let t = generate(&cfg.dgp).op("simulate")?;
        let mut buf = Vec::new();
        t.write_csv(&mut buf).op("simulate")?;
        write_file(p, &String::from_utf8_lossy(&buf))?;
    }
    let report = run_study(&cfg.dgp, &cfg.study, a.reps).op("simulate")?;
    if !report.failures.is_empty() {
        io.info(&format!("{} estimates failed; see the JSON report", report.failures.len()));
    }
    let mut buf = Vec::new();
    report.write_csv(&mut buf).op("simulate")?;
    io.emit(&String::from_utf8_lossy(&buf))?;
    if let Some(p) = &a.json {
        write_file(p, &report.to_json_string().op("simulate")?)?;
    }
    Ok(())
}

/// Reads a fit written by `estimate`, either a bare fit or the IV wrapper.
fn read_fit(path: &Path) -> CliResult<pseudopanel::regress::FitResult> {
    let text = read_file(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let inner = value.get("fit").cloned().unwrap_or(value);
    let report: FitReport =
        serde_json::from_value(inner).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    report.to_fit().op("fit file")
}

fn cmd_hausman(a: &HausmanArgs, io: &Io) -> CliResult<()> {
    let fa = read_fit(&a.fit_a)?;
    let fb = read_fit(&a.fit_b)?;
    let h = hausman(&fa, &fb, &a.subset, a.naive).op("hausman")?;
    if h.v_psd_repaired {
        io.info("warning: V = V_a + V_b was not positive definite; eigenvalues clipped");
    }
    io.emit(&json(&h)?)
}

fn cmd_shadow_price(a: &ShadowPriceArgs, io: &Io) -> CliResult<()> {
    let gamma = if a.frisch { None } else { a.gamma };
    let mut r = shadow_price_elasticity(a.cs, a.ts, gamma).op("shadow-price")?;
    r.good = a.good.clone();
    io.emit(&json(&r)?)
}

fn cmd_elasticity(a: &ElasticityArgs, io: &Io) -> CliResult<()> {
    let fit = read_fit(&a.fit)?;
    let share = match &a.share {
        Some(s) => s.clone(),
        None => fit
            .means
            .keys()
            .find(|k| !fit.names.contains(k))
            .cloned()
            .ok_or_else(|| CliError::config("cannot infer the share column; pass --share"))?,
    };
    let ly = match &a.ly {
        Some(s) => s.clone(),
        None => fit
            .names
            .iter()
            .find(|n| *n != INTERCEPT)
            .cloned()
            .ok_or_else(|| CliError::config("fit has no slope coefficient"))?,
    };
    let mut e: GoodElasticity = elasticity_from_fit(&fit, &share, &ly, a.ly2.as_deref(), a.e_p).op("elasticity")?;
    let at = EvalPoint {
        ln_y: a.ln_y,
        w_bar: a.w_bar,
    };
    if !a.at_means && (at.ln_y.is_some() || at.w_bar.is_some()) {
        e.ln_y = at.ln_y.unwrap_or(e.ln_y);
        e.w_bar = at.w_bar.unwrap_or(e.w_bar);
        e.expenditure_elasticity = pseudopanel::demand::expenditure_elasticity(e.b, e.c, e.e_p, e.w_bar, e.ln_y, a.ly2.is_some())
            .op("elasticity")?;
    }
    io.emit(&json(&e)?)
}

fn cmd_filter(a: &FilterArgs, io: &Io) -> CliResult<()> {
    let schema = RoleSchema::load(&a.schema).op("schema")?;
    let table = load_csv(&a.input, &schema).op("load")?;
    let spec = ModelSpec::new(a.dependent.clone(), a.regressors.iter().cloned());
    let res = dfbetas_filter(&spec, &table).op("filter")?;
    io.info(&format!(
        "{} of {} rows flagged (threshold {:.6})",
        res.flagged.len(),
        res.flagged.len() + res.retained.len(),
        res.threshold
    ));
    if let Some(p) = &a.retained {
        let mut buf = Vec::new();
        table.select_rows(&res.retained).write_csv(&mut buf).op("filter")?;
        write_file(p, &String::from_utf8_lossy(&buf))?;
    }
    io.emit(&json(&res)?)
}
