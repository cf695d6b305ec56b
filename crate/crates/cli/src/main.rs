//! `mbfmri`: phantom simulation, model-based fitting, diagnostics,
//! normalization and population inference from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
//! Failures print a JSON object `{"error", "message", "exit_code"}` on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use mbfmri::fit::{dw_peak_densities, fit_field};
use mbfmri::io::{self, RunConfig};
use mbfmri::lattice::{LatticeRegion, ScalarField};
use mbfmri::meta::{
    covariate_design, fit_meta, forest_funnel_data, meta_field, normalize_to_ati, reference_field, EffectField,
    MetaOptions, SubjectSummary,
};
use mbfmri::phantom::{mc_bias, mc_type1, simulate_session, PhantomSpec};
use mbfmri::weights::DivergenceMap;
use mbfmri::Point3;

#[derive(Parser)]
#[command(name = "mbfmri", version, about = "Model-based estimation of task-FMRI effects")]
struct Cli {
    /// Worker threads (default: the config's `threads`, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a session from a phantom spec.
    Phantom(PhantomArgs),
    /// Fit the signal model at every masked lattice point.
    Fit(FitArgs),
    /// Residual diagnostics.
    #[command(subcommand)]
    Diagnose(Diagnose),
    /// Normalize subject fields to units above template intensity.
    Ati(AtiArgs),
    /// Random-effects meta-regression across subjects.
    Meta(MetaArgs),
    /// Monte Carlo checks on phantoms.
    #[command(subcommand)]
    Mc(Mc),
}

#[derive(Args)]
struct PhantomArgs {
    /// Phantom spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Output directory for session.nii, session.json, truth.json and template.nii.
    #[arg(long)]
    out: PathBuf,
    /// Noise seed; overrides the spec's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Subject id; overrides the spec's `subject_id`.
    #[arg(long)]
    subject: Option<String>,
}

#[derive(Args)]
struct FitArgs {
    /// Session directory (session.nii + session.json).
    #[arg(long)]
    session: PathBuf,
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for the field.
    #[arg(long)]
    out: PathBuf,
    /// Template volume, for `from_template` lattices and template masks.
    #[arg(long)]
    template: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Diagnose {
    /// Durbin–Watson values stratified by t-field quantile.
    Dw {
        /// Field directory written by `fit`.
        #[arg(long)]
        field: PathBuf,
        /// Comma-separated quantile levels; 0 keeps every point.
        #[arg(long, value_delimiter = ',', default_value = "0,0.99,0.999,0.9999")]
        thetas: Vec<f64>,
        /// Output CSV (theta, dw).
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct AtiArgs {
    /// Field directories written by `fit`.
    #[arg(long, num_args = 1.., required = true)]
    fields: Vec<PathBuf>,
    /// Template volume on the fields' lattice.
    #[arg(long)]
    template: PathBuf,
    /// Run configuration; its kernel smooths the template.
    #[arg(long)]
    config: PathBuf,
    /// Output directory: mu.nii plus one effect field per subject.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetaArgs {
    /// Subject field directories (from `fit` or `ati`).
    #[arg(long, num_args = 1.., required = true)]
    fields: Vec<PathBuf>,
    /// CSV with header `subject_id,<covariate>...`; every column enters the model.
    #[arg(long)]
    covariates: Option<PathBuf>,
    /// Covariate ordering the forest rows (default: the first covariate).
    #[arg(long)]
    order_by: Option<String>,
    /// Standard-space point `x,y,z` for the forest/funnel tables.
    #[arg(long, value_parser = parse_point)]
    at: Option<Point3>,
    /// Fit the population model at every masked lattice point.
    #[arg(long)]
    lattice: bool,
    /// Run configuration (heterogeneity estimator, KH truncation).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Mc {
    /// Rejection rate of the task test on a null phantom.
    Type1 {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 2000)]
        reps: usize,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Probe points `x,y,z;x,y,z;...` in standard space.
        #[arg(long, value_parser = parse_points, default_value = "0,0,0")]
        probes: Points,
        /// Comma-separated factors applied to the kernel bandwidth, one scheme each.
        #[arg(long, value_delimiter = ',', default_value = "1")]
        h_factors: Vec<f64>,
        /// Report path (JSON); stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Empirical bias against the certified bound.
    Bias {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 500)]
        reps: usize,
        /// Probe point `x,y,z`; must be a voxel centre in standard space.
        #[arg(long, value_parser = parse_point)]
        probe: Point3,
        /// Ball radii (mm) offered as witness regions.
        #[arg(long, value_delimiter = ',', default_value = "3,6,9,12")]
        radii: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone)]
struct Points(Vec<Point3>);

fn parse_point(s: &str) -> Result<Point3, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x, y, z] if v.iter().all(|c| c.is_finite()) => Ok(Point3::new(x, y, z)),
        _ => Err(format!("expected x,y,z, got {s:?}")),
    }
}

fn parse_points(s: &str) -> Result<Points, String> {
    s.split(';').map(parse_point).collect::<Result<_, _>>().map(Points)
}

enum Failure {
    Usage(String),
    Data(String, String),
    Numerical(String, String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(..) => 2,
            Failure::Numerical(..) => 3,
        }
    }
}

impl From<mbfmri::Error> for Failure {
    fn from(e: mbfmri::Error) -> Self {
        use mbfmri::phantom::McError;
        use mbfmri::Error as E;
        // innermost variant name, e.g. `SidecarMismatch` for `Io(SidecarMismatch { .. })`
        let debug = format!("{e:?}");
        let kind = debug
            .split(['(', ')', ' ', '{'])
            .filter(|t| !t.is_empty())
            .nth(1)
            .filter(|t| t.chars().next().is_some_and(char::is_uppercase))
            .or_else(|| debug.split(['(', ' ', '{']).next())
            .unwrap_or("Error")
            .to_owned();
        match e {
            E::MonteCarlo(McError::Fit(_) | McError::Certification(_)) => Failure::Numerical(kind, e.to_string()),
            E::Fit(_) | E::FitField(_) | E::Meta(_) | E::Diagnostic(_) => Failure::Numerical(kind, e.to_string()),
            _ => Failure::Data(kind, e.to_string()),
        }
    }
}

macro_rules! impl_from {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                mbfmri::Error::from(e).into()
            }
        }
    )*};
}

impl_from!(
    io::IoError,
    mbfmri::phantom::PhantomError,
    mbfmri::phantom::McError,
    mbfmri::fit::FitFieldError,
    mbfmri::fit::DiagnosticError,
    mbfmri::meta::MetaError,
    mbfmri::weights::WeightError,
    mbfmri::lattice::LatticeError
);

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            return report(Failure::Usage(e.to_string()));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> ExitCode {
    let code = f.code();
    let (kind, message) = match f {
        Failure::Usage(m) => ("Usage".to_owned(), m),
        Failure::Data(k, m) | Failure::Numerical(k, m) => (k, m),
    };
    eprintln!("{}", json!({"error": kind, "message": message.trim_end(), "exit_code": code}));
    ExitCode::from(code)
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Failure::from(io::IoError::Io {
            path: path.to_owned(),
            source: e,
        })
    })?;
    Ok(RunConfig::from_json(&text)?)
}

fn run(cli: Cli) -> Outcome {
    // The config's thread count applies when the flag is absent.
    let config_threads = match &cli.command {
        Command::Fit(a) => load_config(&a.config)?.threads,
        Command::Ati(a) => load_config(&a.config)?.threads,
        Command::Meta(MetaArgs { config: Some(c), .. }) => load_config(c)?.threads,
        Command::Mc(Mc::Type1 { config, .. } | Mc::Bias { config, .. }) => load_config(config)?.threads,
        _ => None,
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads.or(config_threads) {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Failure::Usage(format!("cannot start thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Phantom(a) => phantom(a),
        Command::Fit(a) => fit(a),
        Command::Diagnose(Diagnose::Dw { field, thetas, out }) => diagnose_dw(&field, &thetas, &out),
        Command::Ati(a) => ati(a),
        Command::Meta(a) => meta(a),
        Command::Mc(m) => mc(m),
    })
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn phantom(a: PhantomArgs) -> Outcome {
    let mut spec: PhantomSpec = io::read_json(&a.spec)?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(id) = a.subject {
        spec.subject_id = id;
    }
    let (session, truth) = simulate_session(&spec, spec.seed)?;
    io::write_session(&a.out, &session, Some(format!("grey_scale {}", spec.grey_scale)))?;
    io::write_json(&a.out.join("truth.json"), &spec)?;
    // α on the voxel lattice carried into standard space
    let g = &spec.grid;
    let [nx, ny] = g.in_plane_shape();
    let origin = spec.psi.inverse().apply(&g.voxel_center(0, 0, 0));
    let lattice = mbfmri::lattice::Lattice::new(origin.coords.into(), g.voxel_size(), [nx, ny, g.slice_count()])?;
    let template = ScalarField::from_fn(lattice, |p| truth.alpha(p));
    io::write_scalar_field(&a.out.join("template.nii"), &template)?;
    print_json(&json!({
        "subject_id": session.subject_id(),
        "cycles": session.cycles(),
        "out": a.out,
    }));
    Ok(())
}

fn fit(a: FitArgs) -> Outcome {
    let config = load_config(&a.config)?;
    let session = io::read_session_dir(&a.session, config.grubbs_alpha)?;
    let template = a.template.as_deref().map(io::read_scalar_field).transpose()?;
    let lattice = config.lattice(template.as_ref())?;
    let mask = config.mask(&lattice, template.as_ref())?;
    let scheme = config.scheme()?;
    let field = fit_field(
        &session,
        &lattice,
        &mask,
        &scheme,
        &config.model,
        session.psi(),
        config.fit_options(),
    )?;
    io::write_param_field(&a.out, &field, session.subject_id())?;
    let mut summary = serde_json::to_value(io::summarize(&field)).expect("serializable");
    summary["subject_id"] = json!(session.subject_id());
    summary["excluded_cycles"] = json!(session.excluded_cycles());
    io::write_json(&a.out.join("summary.json"), &summary)?;
    print_json(&summary);
    Ok(())
}

fn diagnose_dw(field: &Path, thetas: &[f64], out: &Path) -> Outcome {
    if let Some(t) = thetas.iter().find(|t| !(0.0..1.0).contains(*t)) {
        return Err(Failure::Usage(format!("theta {t} outside [0, 1)")));
    }
    let (f, _) = io::read_param_field(field)?;
    let strata = dw_peak_densities(&f, thetas)?;
    io::write_dw_strata(out, thetas, &strata)?;
    let rows: Vec<_> = thetas
        .iter()
        .zip(&strata)
        .map(|(t, s)| {
            let mean = if s.is_empty() { f64::NAN } else { s.iter().sum::<f64>() / s.len() as f64 };
            json!({"theta": t, "count": s.len(), "mean": mean})
        })
        .collect();
    print_json(&json!(rows));
    Ok(())
}

fn ati(a: AtiArgs) -> Outcome {
    let config = load_config(&a.config)?;
    let template = io::read_scalar_field(&a.template)?;
    let fields = a
        .fields
        .iter()
        .map(|p| io::read_param_field(p))
        .collect::<Result<Vec<_>, _>>()?;
    let mut mask = LatticeRegion::empty(template.lattice());
    for (f, _) in &fields {
        if f.lattice != *template.lattice() {
            return Err(Failure::Data(
                "LatticeMismatch".into(),
                "template and field lattices differ".into(),
            ));
        }
        for i in f.mask.indices() {
            mask.insert(i);
        }
    }
    let mu = reference_field(&template, &mask, &config.scheme()?)?;
    std::fs::create_dir_all(&a.out).map_err(|e| {
        Failure::from(io::IoError::Io {
            path: a.out.clone(),
            source: e,
        })
    })?;
    io::write_scalar_field(&a.out.join("mu.nii"), &mu)?;
    let mut written = Vec::new();
    for (k, (f, id)) in fields.iter().enumerate() {
        let norm = normalize_to_ati(f, &mu, id.clone())?;
        let name = if id.is_empty() || fields[..k].iter().any(|(_, other)| other == id) {
            format!("subject_{k}")
        } else {
            id.clone()
        };
        let dir = a.out.join(&name);
        io::write_effect_field(&dir, &norm)?;
        let flagged = norm.points.iter().filter(|p| matches!(p, Some(Err(_)))).count();
        written.push(json!({"subject_id": id, "dir": dir, "flagged": flagged}));
    }
    print_json(&json!(written));
    Ok(())
}

fn meta(a: MetaArgs) -> Outcome {
    if a.at.is_none() && !a.lattice {
        return Err(Failure::Usage("give --at x,y,z and/or --lattice".into()));
    }
    let options = match &a.config {
        Some(c) => load_config(c)?.meta_options(),
        None => MetaOptions::default(),
    };
    let fields: Vec<EffectField> = a
        .fields
        .iter()
        .map(|p| io::read_effect_field(p))
        .collect::<Result<_, _>>()?;
    let k = fields.len();
    let (names, columns) = match &a.covariates {
        Some(path) => {
            let cov = io::read_covariates(path)?;
            let rows = fields
                .iter()
                .map(|f| {
                    cov.get(&f.subject_id).map(<[f64]>::to_vec).ok_or_else(|| {
                        Failure::Data("MissingCovariates".into(), format!("no covariates for subject {:?}", f.subject_id))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            let columns: Vec<Vec<f64>> = (0..cov.names.len()).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
            (cov.names, columns)
        }
        None => (Vec::new(), Vec::new()),
    };
    let x = covariate_design(k, &columns)?;
    std::fs::create_dir_all(&a.out).map_err(|e| {
        Failure::from(io::IoError::Io {
            path: a.out.clone(),
            source: e,
        })
    })?;
    let mut report = json!({"subjects": k, "covariates": names});
    if a.lattice {
        let mf = meta_field(&fields, &x, &options)?;
        io::write_meta_field(&a.out, &mf, &names)?;
        report["argmax_t_adjusted"] = json!(mf.argmax_t(0).map(|i| {
            let p = mf.lattice.point(i);
            json!({"index": i, "point": [p.x, p.y, p.z]})
        }));
    }
    if let Some(at) = a.at {
        let lattice = fields[0].lattice;
        let i = lattice.nearest(&at).ok_or_else(|| {
            Failure::Data("OutsideLattice".into(), format!("point {at} lies outside the field lattice"))
        })?;
        let order_col = match &a.order_by {
            Some(n) => Some(names.iter().position(|c| c == n).ok_or_else(|| {
                Failure::Usage(format!("--order-by {n:?} is not a covariate column"))
            })?),
            None => (!names.is_empty()).then_some(0),
        };
        let subjects = fields
            .iter()
            .enumerate()
            .map(|(s, f)| {
                let e = f.effect(i).ok_or_else(|| {
                    Failure::Numerical(
                        "MissingSubject".into(),
                        format!("subject {:?} has no estimate at lattice point {i}", f.subject_id),
                    )
                })?;
                Ok(SubjectSummary {
                    subject_id: f.subject_id.clone(),
                    covariate: order_col.map_or(s as f64, |c| columns[c][s]),
                    point: e.into(),
                })
            })
            .collect::<Result<Vec<_>, Failure>>()?;
        let points: Vec<_> = subjects.iter().map(|s| s.point).collect();
        let fit = match fit_meta(&points, &x, &options) {
            Ok(m) => Some(m),
            Err(mbfmri::meta::MetaError::Degenerate { .. }) => None,
            Err(e) => return Err(e.into()),
        };
        let table = forest_funnel_data(&subjects, fit.as_ref())?;
        io::write_forest(&a.out.join("forest.csv"), &table)?;
        io::write_funnel(&a.out.join("funnel.csv"), &table.funnel())?;
        let p = lattice.point(i);
        let point = json!({"index": i, "point": [p.x, p.y, p.z], "meta_disabled": table.meta_disabled, "fit": fit});
        io::write_json(&a.out.join("meta_point.json"), &point)?;
        report["at"] = point;
    }
    print_json(&report);
    Ok(())
}

fn mc(m: Mc) -> Outcome {
    let (report, out) = match m {
        Mc::Type1 {
            spec,
            config,
            reps,
            alpha,
            probes,
            h_factors,
            out,
        } => {
            let spec: PhantomSpec = io::read_json(&spec)?;
            let config = load_config(&config)?;
            let base = config.scheme()?;
            let schemes = h_factors
                .iter()
                .map(|f| {
                    let h = base.divergence.euclidean_bandwidth().expect("config schemes are Euclidean");
                    let mut s = base.clone();
                    s.divergence = DivergenceMap::scaled_euclidean(h * f)?;
                    s.cutoff_mm *= f;
                    Ok(s)
                })
                .collect::<Result<Vec<_>, mbfmri::weights::WeightError>>()?;
            let r = mc_type1(&spec, &schemes, &config.model, config.fit_options(), &probes.0, reps, alpha)?;
            (json!({"h_factors": h_factors, "report": r}), out)
        }
        Mc::Bias {
            spec,
            config,
            reps,
            probe,
            radii,
            out,
        } => {
            let spec: PhantomSpec = io::read_json(&spec)?;
            let config = load_config(&config)?;
            let r = mc_bias(&spec, &config.scheme()?, &config.model, config.fit_options(), &probe, reps, &radii)?;
            (serde_json::to_value(r).expect("serializable"), out)
        }
    };
    match out {
        Some(p) => io::write_json(&p, &report)?,
        None => print_json(&report),
    }
    Ok(())
}
