//! `cva`: batch front end for the counterfactual voting adjustment.
//!
//! Exit codes: 0 ok, 2 community too small, 3 fit did not converge (model
//! still written), 64 usage, 65 bad input data, 66 unreadable input,
//! 73 output cannot be written.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use cva_core::bias::{map_coordinates, profile_community, BiasProfile};
use cva_core::config::{load_fit_config, load_sim_config};
use cva_core::counterfactual::{
    counterfactual_curve, estimate_quality, fit_power_law, Aggregate, ContextPopulation, CurveStatus, LengthHandling,
    Mood, PopulationMode,
};
use cva_core::evaluation::{evaluate, winrates, EvalConfig, EvaluationReport, CVA};
use cva_core::ingest::{apply_filters, load_labels, parse_dump, FilterStatus};
use cva_core::model::CommunityModel;
use cva_core::simulator::{generate, scaled_truth, toy_scenario, ToyScenario};
use cva_core::trainer::{fit, fit_prefixes, FitConfig};
use cva_core::trajectory::{load_jsonl, reconstruct_all, write_jsonl, QuestionTrajectory};
use cva_core::CvaError;
use log::info;
use serde::Serialize;

const EXIT_TOO_SMALL: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;
const EXIT_USAGE: u8 = 64;
const EXIT_DATA: u8 = 65;
const EXIT_NO_INPUT: u8 = 66;
const EXIT_CANT_CREATE: u8 = 73;

#[derive(Parser)]
#[command(name = "cva", version, about = "Counterfactual voting adjustment for helpfulness votes")]
struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum QualityMode {
    Mean,
    PerTimeSum,
}

#[derive(Subcommand)]
enum Command {
    /// Turn a StackExchange dump into trajectory JSONL.
    Ingest {
        #[arg(long)]
        posts: PathBuf,
        #[arg(long)]
        votes: PathBuf,
        #[arg(long)]
        posthistory: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        min_answers: usize,
        #[arg(long, default_value_t = 100)]
        min_questions: usize,
        #[arg(long)]
        reject_log: Option<PathBuf>,
    },
    /// Fit the vote model.
    Fit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Hold beta fixed; `--freeze-beta 0` gives the no-position ablation.
        #[arg(long, allow_negative_numbers = true)]
        freeze_beta: Option<f64>,
        #[arg(long)]
        l2_weight: Option<f64>,
    },
    /// Debiased quality per answer.
    Quality {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "mean")]
        mode: QualityMode,
        #[arg(long, default_value = "false", action = clap::ArgAction::Set)]
        integrate_length: bool,
        /// Seed for subsampling large context populations.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a semi-synthetic community with known quality.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Refit a toy scenario on growing prefixes.
    Toy {
        #[arg(long, value_parser = ["1a", "1b", "2"])]
        scenario: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Position sensitivity and herding degree of one community.
    Profile {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to the input file stem.
        #[arg(long)]
        community: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Place communities on the herding/position map.
    Map {
        #[arg(long, num_args = 1.., required = true)]
        profiles: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Vote probability by rank under each mood, with power-law fits.
    Counterfactual {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 10)]
        ranks: u32,
        #[arg(long)]
        out: PathBuf,
        /// Power-law fits as JSON; printed to stdout when omitted.
        #[arg(long)]
        fits: Option<PathBuf>,
    },
    /// Compare vote difference, CVA and the ablation against labels.
    Evaluate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        ablation: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Win rates of CVA over the baselines across community reports.
    Winrates {
        #[arg(long, num_args = 1.., required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

struct Failure {
    code: u8,
    message: String,
}

type Outcome = Result<u8, Failure>;

impl From<CvaError> for Failure {
    fn from(e: CvaError) -> Self {
        let code = match e {
            CvaError::Io { .. } => EXIT_NO_INPUT,
            _ => EXIT_DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| Failure {
        code: EXIT_CANT_CREATE,
        message: format!("{}: {e}", path.display()),
    })
}

fn write_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_CANT_CREATE,
        message: format!("{}: {e}", path.display()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| write_failure(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| write_failure(path, e))?;
    write_text(path, &(text + "\n"))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| CvaError::io(path, e).into())
}

fn load_model(path: &Path) -> Result<CommunityModel, Failure> {
    CommunityModel::from_json(&read_text(path)?).map_err(|e| Failure {
        code: EXIT_DATA,
        message: format!("{}: {e}", path.display()),
    })
}

fn load_trajectories(path: &Path) -> Result<Vec<QuestionTrajectory>, Failure> {
    Ok(reconstruct_all(&load_jsonl(path)?)?)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, Failure> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn finish_csv(path: &Path, mut w: csv::Writer<BufWriter<File>>) -> Result<(), Failure> {
    w.flush().map_err(|e| write_failure(path, e))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Ingest {
            posts,
            votes,
            posthistory,
            out,
            min_answers,
            min_questions,
            reject_log,
        } => {
            let dump = parse_dump(&posts, &votes, &posthistory)?;
            if let Some(path) = reject_log {
                let log: String = dump.rejects.iter().map(|r| format!("{r}\n")).collect();
                write_text(&path, &log)?;
            }
            let n_rejects = dump.rejects.len();
            let outcome = apply_filters(dump.questions, min_answers, min_questions);
            let mut w = create(&out)?;
            write_jsonl(&mut w, &outcome.trajectories).map_err(|e| write_failure(&out, e))?;
            w.flush().map_err(|e| write_failure(&out, e))?;
            let r = &outcome.report;
            eprintln!(
                "questions in {} out {}; dropped closed {} locked {} too-few-answers {}; post-acceptance votes {}; rejected rows {n_rejects}",
                r.questions_in, r.questions_out, r.closed, r.locked, r.too_few_answers, r.post_acceptance_votes
            );
            if outcome.status == FilterStatus::TooSmall {
                eprintln!("community too small: {} questions < {min_questions}", r.questions_out);
                return Ok(EXIT_TOO_SMALL);
            }
            Ok(0)
        }

        Command::Fit {
            input,
            config,
            out,
            freeze_beta,
            l2_weight,
        } => {
            let mut cfg = match config {
                Some(path) => load_fit_config(&path)?,
                None => FitConfig::default(),
            };
            if freeze_beta.is_some() {
                cfg.freeze_beta = freeze_beta;
            }
            if let Some(w) = l2_weight {
                if !(w >= 0.0) {
                    return Err(Failure {
                        code: EXIT_USAGE,
                        message: "--l2-weight must be >= 0".into(),
                    });
                }
                cfg.l2_weight = w;
            }
            let trajs = load_trajectories(&input)?;
            let model = fit(&trajs, &cfg)?;
            write_text(&out, &(model.to_json()? + "\n"))?;
            let m = &model.fit_meta;
            eprintln!(
                "lambda {:.6} beta {:.6}; {} answers, {} events, {} iterations, gradient {:.2e}",
                model.lambda,
                model.beta,
                model.n_answers(),
                m.n_events,
                m.iterations,
                m.final_grad_norm
            );
            if !m.converged {
                eprintln!("fit did not converge; model written and flagged");
                return Ok(EXIT_NOT_CONVERGED);
            }
            Ok(0)
        }

        Command::Quality {
            model,
            input,
            mode,
            integrate_length,
            seed,
            out,
        } => {
            let model = load_model(&model)?;
            let trajs = load_trajectories(&input)?;
            let (pop_mode, aggregate) = match mode {
                QualityMode::Mean => (PopulationMode::Global, Aggregate::Mean),
                QualityMode::PerTimeSum => (PopulationMode::PerTime, Aggregate::PerTimeSum),
            };
            let length = if integrate_length {
                LengthHandling::Integrated
            } else {
                LengthHandling::Fixed
            };
            let population = ContextPopulation::from_trajectories(&trajs, pop_mode, seed)?;
            let estimates = estimate_quality(&model, &trajs, &population, aggregate, length);
            let mut w = csv_writer(&out)?;
            let wf = |e| write_failure(&out, e);
            w.write_record(["question_id", "answer_id", "q", "Q_hat"]).map_err(wf)?;
            for e in &estimates {
                w.write_record([
                    e.question_id.clone(),
                    e.answer_id.clone(),
                    e.q.to_string(),
                    e.q_hat.to_string(),
                ])
                .map_err(wf)?;
            }
            finish_csv(&out, w)?;
            info!("{} answers scored", estimates.len());
            Ok(0)
        }

        Command::Simulate { config, out, truth } => {
            let cfg = match config {
                Some(path) => load_sim_config(&path)?,
                None => Default::default(),
            };
            let sim = generate(&cfg)?;
            let mut w = create(&out)?;
            write_jsonl(&mut w, &sim.trajectories).map_err(|e| write_failure(&out, e))?;
            w.flush().map_err(|e| write_failure(&out, e))?;
            let mut tw = csv_writer(&truth)?;
            let wf = |e| write_failure(&truth, e);
            tw.write_record(["answer_id", "score", "source"]).map_err(wf)?;
            for (id, score) in scaled_truth(&sim.truth) {
                tw.write_record([id, score.to_string(), "synthetic_truth".to_string()])
                    .map_err(wf)?;
            }
            finish_csv(&truth, tw)?;
            let n_events: usize = sim.trajectories.iter().map(|t| t.events.len()).sum();
            eprintln!(
                "{} questions, {} answers, {n_events} votes, alpha {}",
                sim.trajectories.len(),
                sim.truth.len(),
                sim.alpha
            );
            Ok(0)
        }

        Command::Toy { scenario, out } => {
            let scenario = ToyScenario::parse(&scenario)?;
            let mut w = csv_writer(&out)?;
            let wf = |e| write_failure(&out, e);
            w.write_record(["tick", "question_id", "answer_id", "q", "lambda", "beta"])
                .map_err(wf)?;
            for traj in toy_scenario(scenario) {
                let fits = fit_prefixes(std::slice::from_ref(&traj), &FitConfig::default(), &scenario.ticks())?;
                for (tick, model) in &fits {
                    for a in &traj.answers {
                        let Some(q) = model.quality(&traj.question_id, &a.answer_id) else {
                            continue;
                        };
                        w.write_record([
                            tick.to_string(),
                            traj.question_id.clone(),
                            a.answer_id.clone(),
                            format!("{q:.6}"),
                            format!("{:.6}", model.lambda),
                            format!("{:.6}", model.beta),
                        ])
                        .map_err(wf)?;
                    }
                }
            }
            finish_csv(&out, w)?;
            Ok(0)
        }

        Command::Profile {
            model,
            input,
            community,
            out,
        } => {
            let name = community.unwrap_or_else(|| stem(&input));
            let model = load_model(&model)?;
            let trajs = load_trajectories(&input)?;
            let profile = profile_community(&name, &model, &trajs)?;
            write_json(&out, &profile)?;
            Ok(0)
        }

        Command::Map { profiles, out } => {
            let mut loaded = Vec::new();
            for path in &profiles {
                let p: BiasProfile = serde_json::from_str(&read_text(path)?).map_err(|e| Failure {
                    code: EXIT_DATA,
                    message: format!("{}: {e}", path.display()),
                })?;
                loaded.push(p);
            }
            let map = map_coordinates(&loaded)?;
            map.write_csv(create(&out)?).map_err(|e| write_failure(&out, e))?;
            Ok(0)
        }

        Command::Counterfactual {
            model,
            input,
            ranks,
            out,
            fits,
        } => {
            let model = load_model(&model)?;
            let trajs = load_trajectories(&input)?;
            let mut w = csv_writer(&out)?;
            let wf = |e| write_failure(&out, e);
            w.write_record(["rank", "mood", "p"]).map_err(wf)?;
            let mut power_laws = serde_json::Map::new();
            for mood in Mood::ALL {
                let curve = counterfactual_curve(&model, &trajs, ranks, mood)?;
                if curve.status == CurveStatus::NoQualifyingAnswers {
                    eprintln!("mood {}: no qualifying answers", mood.as_str());
                    power_laws.insert(mood.as_str().into(), serde_json::Value::Null);
                    continue;
                }
                for (rank, p) in &curve.points {
                    w.write_record([rank.to_string(), mood.as_str().to_string(), p.to_string()])
                        .map_err(wf)?;
                }
                let fit = fit_power_law(&curve.points)?;
                power_laws.insert(
                    mood.as_str().into(),
                    serde_json::json!({ "b": fit.b, "c": fit.c, "sse": fit.sse, "n_answers": curve.n_answers }),
                );
            }
            finish_csv(&out, w)?;
            let fits_json = serde_json::Value::Object(power_laws);
            match fits {
                Some(path) => write_json(&path, &fits_json)?,
                None => println!("{}", serde_json::to_string_pretty(&fits_json).unwrap_or_default()),
            }
            Ok(0)
        }

        Command::Evaluate {
            input,
            model,
            ablation,
            labels,
            seed,
            out,
        } => {
            let trajs = load_trajectories(&input)?;
            let model = load_model(&model)?;
            let ablation = load_model(&ablation)?;
            let labels = load_labels(&labels)?;
            for r in &labels.rejects {
                eprintln!("{r}");
            }
            let config = EvalConfig {
                seed,
                ..EvalConfig::default()
            };
            let report = evaluate(&trajs, &model, &ablation, &labels.scores(), &config)?;
            write_json(&out, &report)?;
            for (name, s) in &report.rankers {
                eprintln!("{name:<22} tau {:.4} residual {:.3}", s.mean_tau, s.residual_sum);
            }
            for (base, p) in &report.p_values {
                eprintln!("{CVA} vs {base}: p(tau) {:.4} p(residual) {:.4}", p.tau.p_value, p.residual.p_value);
            }
            Ok(0)
        }

        Command::Winrates { reports, out } => {
            let mut loaded = Vec::new();
            for path in &reports {
                let r: EvaluationReport = serde_json::from_str(&read_text(path)?).map_err(|e| Failure {
                    code: EXIT_DATA,
                    message: format!("{}: {e}", path.display()),
                })?;
                loaded.push((stem(path), r));
            }
            let table = winrates(&loaded)?;
            table.write_csv(create(&out)?).map_err(|e| write_failure(&out, e))?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("cannot size worker pool: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
