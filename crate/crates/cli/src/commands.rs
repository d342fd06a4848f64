//! The four subcommands. Each returns the text it prints on stdout.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use jmls_core::em::{e_step, write_trace_csv};
use jmls_core::io::{read_dataset, read_model, write_dataset_csv, write_model};
use jmls_core::model::{default_frequency_grid, frequency_response, match_modes};
use jmls_core::smoother::write_moments_csv;
use jmls_core::{run_em, run_filter, simulate, Convention, Dataset, InputLaw, JmlsError, JmlsModel};
use log::info;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub fn load_model(path: &Path, convention: Option<Convention>) -> CliResult<JmlsModel> {
    let mut model = read_model(path).map_err(|e| CliError::file(path, e))?;
    if let Some(c) = convention {
        model.convention = c;
    }
    model.check().map_err(|e| CliError::file(path, e))?;
    Ok(model)
}

pub fn load_dataset(path: &Path) -> CliResult<Dataset> {
    read_dataset(path).map_err(|e| CliError::file(path, e))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::file(path, e))
}

fn finish(path: &Path, mut out: BufWriter<File>) -> CliResult<()> {
    out.flush().map_err(|e| CliError::file(path, e))
}

/// Input law from `normal`, `zero` or the path of a dataset CSV whose
/// input columns are replayed.
pub fn parse_input_law(spec: &str, steps: usize) -> CliResult<InputLaw> {
    match spec {
        "normal" => Ok(InputLaw::StandardNormal),
        "zero" => Ok(InputLaw::Zero),
        path => {
            let data = load_dataset(Path::new(path))?;
            if data.len() < steps {
                return Err(CliError::Config(format!("{path}: {} input rows, {steps} needed", data.len())));
            }
            Ok(InputLaw::Given(data.u[..steps].to_vec()))
        }
    }
}

pub struct SimulateSettings {
    pub model: PathBuf,
    pub steps: usize,
    pub seed: u64,
    pub input: String,
    pub convention: Option<Convention>,
    /// Standard output when absent.
    pub out: Option<PathBuf>,
}

pub fn cmd_simulate(s: &SimulateSettings) -> CliResult<String> {
    if s.steps == 0 {
        return Err(CliError::Config("steps must be at least 1".into()));
    }
    let model = load_model(&s.model, s.convention)?;
    let law = parse_input_law(&s.input, s.steps)?;
    let data = simulate(&model, &law, s.steps, s.seed)?;
    let mut text = Vec::new();
    write_dataset_csv(&mut text, &data).map_err(JmlsError::from)?;
    match &s.out {
        Some(path) => {
            let mut f = create(path)?;
            f.write_all(&text).map_err(|e| CliError::file(path, e))?;
            finish(path, f)?;
            Ok(format!("wrote {} steps to {}\n", s.steps, path.display()))
        }
        None => Ok(String::from_utf8(text).expect("dataset CSV is ASCII")),
    }
}

fn float_list(v: &[f64]) -> String {
    let items: Vec<String> = v.iter().map(|x| format!("{x:.16e}")).collect();
    format!("[{}]", items.join(", "))
}

/// Runs EM and writes `model.json`, `trace.csv` and `report.toml` (plus
/// `moments.csv` when asked) into the output directory.
pub fn cmd_identify(cfg: &RunConfig, export_moments: bool) -> CliResult<String> {
    let model = load_model(&cfg.model, cfg.convention)?;
    let data = load_dataset(&cfg.dataset)?;
    data.check_against(&model).map_err(|e| CliError::file(&cfg.dataset, e))?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::file(&cfg.output_dir, e))?;
    info!("identifying {} modes from {} steps", model.num_modes(), data.len());

    let result = run_em(&model, &data, &cfg.em)?;

    let model_path = cfg.output_dir.join("model.json");
    write_model(&model_path, &result.model).map_err(|e| CliError::file(&model_path, e))?;
    let trace_path = cfg.output_dir.join("trace.csv");
    let mut trace = create(&trace_path)?;
    write_trace_csv(&mut trace, &result.iterates).map_err(|e| CliError::file(&trace_path, e))?;
    finish(&trace_path, trace)?;

    let initial = result.iterates.first().map_or(f64::NAN, |it| it.loglik);
    let counts = result.iterates.last().map(|it| it.counts.clone()).unwrap_or_default();
    let mut report = String::new();
    writeln!(report, "iterations = {}", result.iterates.len()).unwrap();
    writeln!(report, "converged = {}", result.converged).unwrap();
    writeln!(report, "initial_loglik = {initial:.16e}").unwrap();
    writeln!(report, "final_loglik = {:.16e}", result.final_loglik).unwrap();
    writeln!(report, "mode_counts = {}", float_list(&counts)).unwrap();
    let transition_enabled = result.iterates.iter().position(|it| it.transition_enabled);
    if let Some(it) = transition_enabled {
        writeln!(report, "transition_enabled_at = {it}").unwrap();
    }
    let report_path = cfg.output_dir.join("report.toml");
    std::fs::write(&report_path, &report).map_err(|e| CliError::file(&report_path, e))?;

    if export_moments {
        let e = e_step(&result.model, &data, &cfg.em)?;
        let path = cfg.output_dir.join("moments.csv");
        let mut f = create(&path)?;
        write_moments_csv(&mut f, &e.joint).map_err(|err| CliError::file(&path, err))?;
        finish(&path, f)?;
    }
    Ok(report)
}

/// Prints the log-likelihood; optionally writes `k,loglik,cumulative`.
pub fn cmd_loglik(model: &Path, dataset: &Path, budget: usize, convention: Option<Convention>, out: Option<&Path>) -> CliResult<String> {
    let model = load_model(model, convention)?;
    let data = load_dataset(dataset)?;
    data.check_against(&model).map_err(|e| CliError::file(dataset, e))?;
    let filter = run_filter(&model, &data, budget)?;
    if let Some(path) = out {
        let mut f = create(path)?;
        let mut total = 0.0;
        let mut body = String::from("k,loglik,cumulative\n");
        for (k, l) in filter.step_loglik.iter().enumerate() {
            total += l;
            writeln!(body, "{},{l:.16e},{total:.16e}", k + 1).unwrap();
        }
        f.write_all(body.as_bytes()).map_err(|e| CliError::file(path, e))?;
        finish(path, f)?;
    }
    Ok(format!("{:.16e}\n", filter.log_likelihood))
}

/// Matches the modes of `model` to those of `reference` by Bode magnitude
/// error; optionally writes plot data
/// `omega,reference_mode,model_mode,output,input,reference_mag,model_mag`.
pub fn cmd_bode(model: &Path, reference: &Path, points: usize, out: Option<&Path>) -> CliResult<String> {
    if points == 0 {
        return Err(CliError::Config("points must be at least 1".into()));
    }
    let est = load_model(model, None)?;
    let truth = load_model(reference, None)?;
    let grid = default_frequency_grid(points);
    let m = match_modes(&est, &truth, &grid)?;
    if let Some(path) = out {
        let mut body = String::from("omega,reference_mode,model_mode,output,input,reference_mag,model_mag\n");
        for (zt, &ze) in m.mapping.iter().enumerate() {
            let ht = frequency_response(&truth.modes[zt], &grid);
            let he = frequency_response(&est.modes[ze], &grid);
            for (w, (a, b)) in grid.iter().zip(ht.iter().zip(&he)) {
                for r in 0..a.nrows() {
                    for c in 0..a.ncols() {
                        writeln!(body, "{w:.16e},{},{},{},{},{:.16e},{:.16e}", zt + 1, ze + 1, r + 1, c + 1, a[(r, c)].norm(), b[(r, c)].norm())
                            .unwrap();
                    }
                }
            }
        }
        let mut f = create(path)?;
        f.write_all(body.as_bytes()).map_err(|e| CliError::file(path, e))?;
        finish(path, f)?;
    }
    let mapping: Vec<String> = m.mapping.iter().map(|z| (z + 1).to_string()).collect();
    Ok(format!(
        "mapping = [{}]\nper_mode_error = {}\ntotal_error = {:.16e}\n",
        mapping.join(", "),
        float_list(&m.per_mode_error),
        m.total_error
    ))
}
