mod report;

use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use binmix::bootstrap::{bootstrap_ci, Scheme};
use binmix::data::{sha256_hex, MBOVIS_CSV};
use binmix::ecm::{fit_best, DEFAULT_SEED};
use binmix::selection::{forward_search, DEFAULT_K_MAX};
use binmix::simulation::{
    run_design, summaries_table, summaries_to_csv, FitPolicy, SimulationDesign,
};
use binmix::{
    fitted_values, load_dataset_from_reader, Dataset, DesignSpec, Error, FitConfig, Result,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use report::*;

#[derive(Parser)]
#[command(
    name = "binmix",
    version,
    about = "Mixture regression for binomial counts with unknown sizes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit with fixed numbers of support points.
    Fit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 1)]
        k1: usize,
        #[arg(long, default_value_t = 1)]
        k2: usize,
        /// Also write per-row y, group mean and fitted mean as CSV.
        #[arg(long, value_name = "PATH")]
        emit_fitted: Option<PathBuf>,
    },
    /// Choose (K1, K2) by BIC with the forward search.
    Select {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = DEFAULT_K_MAX)]
        k_max: usize,
    },
    /// Bootstrap standard errors and percentile intervals for the coefficients.
    Bootstrap {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Without --k1/--k2 the support sizes are chosen by BIC first.
        #[arg(long, requires = "k2")]
        k1: Option<usize>,
        #[arg(long, requires = "k1")]
        k2: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_K_MAX)]
        k_max: usize,
        #[arg(long = "B", default_value_t = 200)]
        b: usize,
        #[arg(long, value_enum, default_value_t = SchemeArg::Parametric)]
        scheme: SchemeArg,
    },
    /// Monte Carlo study over the eight simulation settings.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated setting numbers (1-8).
        #[arg(long, value_delimiter = ',', default_values_t = 1..=8)]
        settings: Vec<usize>,
        #[arg(long, default_value_t = 50)]
        samples: usize,
        /// Choose (K1, K2) by BIC for every sample instead of using the generating sizes.
        #[arg(long)]
        select: bool,
        #[arg(long, default_value_t = DEFAULT_K_MAX)]
        k_max: usize,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Worker threads for bootstrap and simulation (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// ECM iteration cap.
    #[arg(long)]
    max_iter: Option<usize>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args)]
struct DataArgs {
    /// CSV file with a header row; the bundled M. bovis data when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    response: Option<String>,
    /// Comma-separated numeric covariate columns.
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    /// Categorical column expanded into indicators.
    #[arg(long)]
    factor: Option<String>,
    /// Reference level of --factor.
    #[arg(long)]
    reference: Option<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
    Table,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Parametric,
    Nonparametric,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Parametric => Scheme::Parametric,
            SchemeArg::Nonparametric => Scheme::Nonparametric,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = ErrorReport {
                error: ErrorBody {
                    kind: e.kind(),
                    message: e.to_string(),
                },
            };
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("error report serializes")
            );
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 1 })
        }
    }
}

impl Common {
    fn fit_config(&self) -> Result<FitConfig> {
        let mut config = FitConfig {
            seed: self.seed,
            ..FitConfig::default()
        };
        if let Some(n) = self.max_iter {
            config.max_iterations = n;
        }
        config.validate()?;
        Ok(config)
    }

    fn init_threads(&self) -> Result<()> {
        if let Some(n) = self.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
        }
        Ok(())
    }

    fn write(&self, text: &str) -> Result<()> {
        match &self.out {
            Some(path) => std::fs::write(path, text)?,
            None => std::io::stdout().write_all(text.as_bytes())?,
        }
        Ok(())
    }

    fn emit<T: Serialize>(
        &self,
        command: &'static str,
        config: FitConfig,
        model: Option<ModelSpec>,
        result: T,
    ) -> Result<()> {
        if self.format != Format::Json {
            return Err(Error::InvalidInput(format!("'{command}' only writes JSON")));
        }
        let envelope = Envelope {
            command,
            seed: self.seed,
            config,
            model,
            result,
            metadata: Metadata::now(),
        };
        let mut text = serde_json::to_string_pretty(&envelope)?;
        text.push('\n');
        self.write(&text)
    }
}

impl DataArgs {
    fn load(&self) -> Result<(Dataset, ModelSpec)> {
        let bytes = match &self.input {
            Some(path) => std::fs::read(path)?,
            None => MBOVIS_CSV.as_bytes().to_vec(),
        };
        let spec = self.design_spec()?;
        let data = load_dataset_from_reader(bytes.as_slice(), &spec)?;
        let model = ModelSpec {
            input: match &self.input {
                Some(p) => p.display().to_string(),
                None => "bundled:mbovis".into(),
            },
            input_sha256: sha256_hex(&bytes),
            response: spec.response,
            factor: spec.factor,
            reference: spec.reference,
            covariates: data.covariate_names().to_vec(),
            n_obs: data.len(),
            link: "logistic",
        };
        Ok((data, model))
    }

    fn design_spec(&self) -> Result<DesignSpec> {
        let no_design =
            self.response.is_none() && self.covariates.is_empty() && self.factor.is_none();
        if self.input.is_none() && no_design {
            let mut spec = DesignSpec::mbovis();
            if self.reference.is_some() {
                spec.reference = self.reference.clone();
            }
            return Ok(spec);
        }
        let response = self
            .response
            .clone()
            .ok_or_else(|| Error::InvalidInput("--response is required with --input".into()))?;
        Ok(DesignSpec {
            response,
            covariates: self.covariates.clone(),
            factor: self.factor.clone(),
            reference: self.reference.clone(),
        })
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Fit {
            common,
            data,
            k1,
            k2,
            emit_fitted,
        } => {
            let config = common.fit_config()?;
            let (data, model) = data.load()?;
            let f = fit_best(&data, k1, k2, &config)?;
            if let Some(path) = emit_fitted {
                std::fs::write(path, fitted_csv(&data, &f.params)?)?;
            }
            common.emit("fit", config, Some(model), FitReport::new(&data, &f))
        }
        Command::Select {
            common,
            data,
            k_max,
        } => {
            let config = common.fit_config()?;
            let (data, model) = data.load()?;
            let sel = forward_search(&data, &config, k_max)?;
            let report = SelectReport {
                k_max,
                selected: sel.selected,
                fit: FitReport::new(&data, &sel.selected_fit),
                grid: sel.grid,
            };
            common.emit("select", config, Some(model), report)
        }
        Command::Bootstrap {
            common,
            data,
            k1,
            k2,
            k_max,
            b,
            scheme,
        } => {
            common.init_threads()?;
            let config = common.fit_config()?;
            let (data, model) = data.load()?;
            let f = match (k1, k2) {
                (Some(k1), Some(k2)) => fit_best(&data, k1, k2, &config)?,
                _ => forward_search(&data, &config, k_max)?.selected_fit,
            };
            let boot = bootstrap_ci(&data, &f, scheme.into(), b, &config, common.seed)?;
            common.emit(
                "bootstrap",
                config,
                Some(model),
                BootstrapReport::new(&data, &f, boot),
            )
        }
        Command::Simulate {
            common,
            settings,
            samples,
            select,
            k_max,
        } => {
            common.init_threads()?;
            let config = common.fit_config()?;
            let policy = if select {
                FitPolicy::Select { k_max }
            } else {
                FitPolicy::TrueK
            };
            let summaries = run_design(
                &SimulationDesign::default(),
                &settings,
                samples,
                &config,
                common.seed,
                policy,
            )?;
            match common.format {
                Format::Csv => common.write(&summaries_to_csv(&summaries)?),
                Format::Table => common.write(&summaries_table(&summaries)),
                Format::Json => common.emit(
                    "simulate",
                    config,
                    None,
                    SimulateReport {
                        samples,
                        policy,
                        settings: summaries,
                    },
                ),
            }
        }
    }
}

/// Rows are grouped by factor level when there is one, otherwise by identical covariates.
fn fitted_csv(data: &Dataset, params: &binmix::ModelParams) -> Result<String> {
    let keys: Vec<String> = match data.labels() {
        Some(labels) => labels.to_vec(),
        None => data
            .rows()
            .map(|r| {
                r.iter()
                    .map(|v| v.to_bits().to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect(),
    };
    let mut sums: HashMap<&str, (f64, usize)> = HashMap::new();
    for (k, &y) in keys.iter().zip(data.y()) {
        let e = sums.entry(k).or_default();
        e.0 += y as f64;
        e.1 += 1;
    }
    let fitted = fitted_values(data, params);
    let mut w = csv::Writer::from_writer(Vec::new());
    let with_group = data.labels().is_some();
    if with_group {
        w.write_record(["group", "y", "group_mean", "fitted"])?;
    } else {
        w.write_record(["y", "group_mean", "fitted"])?;
    }
    for ((k, &y), yhat) in keys.iter().zip(data.y()).zip(&fitted) {
        let (s, n) = sums[k.as_str()];
        let mut rec = Vec::with_capacity(4);
        if with_group {
            rec.push(k.clone());
        }
        rec.extend([y.to_string(), (s / n as f64).to_string(), yhat.to_string()]);
        w.write_record(&rec)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
