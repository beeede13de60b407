use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use treematch::cohort::write_cohort;
use treematch::hypotree::{allocate_alpha, derive_constraints, AllocationPolicy, ExposureTree};
use treematch::pipeline::{run_study, StudyConfig, StudyInputs, StudyReport};
use treematch::report::{self, Format};
use treematch::simharness::{generate_cohort, monte_carlo, SimulationSpec, SyntheticDgp};

#[derive(Parser)]
#[command(name = "treematch", version, about = "Matched observational studies over a tree of exposure definitions")]
struct Cli {
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured family-wise level.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Text)]
    format: OutputFormat,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputFormat {
    Text,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    KPlusOne,
    MaxMin,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full study and write the report.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Directory for report.json and report.txt; stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the level constraints and per-node levels for a tree.
    Allocate {
        /// Tree file; the default seven-node tree otherwise.
        #[arg(long)]
        tree: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Policy::KPlusOne)]
        policy: Policy,
    },
    /// Print per-k diagnostics and matched sets for each node.
    Match {
        #[arg(long)]
        config: PathBuf,
        /// Restrict output to one node.
        #[arg(long)]
        node: Option<String>,
    },
    /// Print balance tables for each matched node.
    Balance {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        node: Option<String>,
    },
    /// Print per-node test results for every outcome.
    Test {
        #[arg(long)]
        config: PathBuf,
    },
    /// Monte Carlo validation on a synthetic generator.
    Simulate {
        #[arg(long)]
        dgp: PathBuf,
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Write one synthetic cohort as a delimited file.
    Generate {
        #[arg(long)]
        dgp: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match &cli.command {
        Command::Run { config, out: dir } => {
            let report = study(&cli, config)?;
            match dir {
                Some(dir) => {
                    report::emit_report(&report, dir).with_context(|| format!("writing report to {}", dir.display()))?
                }
                None => out.write_all(report::render(&report, format(&cli))?.as_bytes())?,
            }
        }
        Command::Allocate { tree, policy } => {
            let tree = load_tree(tree.as_deref())?;
            let policy = match policy {
                Policy::KPlusOne => AllocationPolicy::KPlusOne,
                Policy::MaxMin => AllocationPolicy::MaxMin,
            };
            let constraints = derive_constraints(&tree)?;
            let allocation = allocate_alpha(&constraints, tree.len(), cli.alpha.unwrap_or(0.05), policy)?;
            match cli.format {
                OutputFormat::Json => writeln!(out, "{}", serde_json::to_string_pretty(&allocation)?)?,
                OutputFormat::Text => {
                    writeln!(out, "constraints")?;
                    for c in &allocation.constraints {
                        let labels: Vec<&str> = c.iter().map(|&v| tree.node(v).label.as_str()).collect();
                        writeln!(out, "  {{{}}}  sum {:.6}", labels.join(", "), allocation.constraint_sum(c))?;
                    }
                    writeln!(out, "levels ({policy}, alpha = {})", allocation.alpha)?;
                    for n in tree.nodes() {
                        writeln!(out, "  {}\t{:.6}", n.label, allocation.level(n.id))?;
                    }
                }
            }
        }
        Command::Match { config, node } => {
            let (report, inputs) = study_with_inputs(&cli, config)?;
            for n in selected(&report, node.as_deref())? {
                writeln!(out, "# node: {}", n.label)?;
                writeln!(out, "k,feasible,total_distance,n_weak,max_asd")?;
                for c in &n.candidates {
                    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
                    writeln!(
                        out,
                        "{},{},{},{},{}",
                        c.k,
                        c.feasible,
                        opt(c.total_distance),
                        c.n_weak.map(|v| v.to_string()).unwrap_or_default(),
                        opt(c.max_asd)
                    )?;
                }
                match &n.matched {
                    Some(m) => {
                        writeln!(out, "# chosen k = {}, total distance {:.6}", m.k, m.total_distance)?;
                        out.write_all(m.to_delimited(|u| inputs.cohort.subjects[u].id.clone(), ',').as_bytes())?;
                    }
                    None => writeln!(out, "# no match")?,
                }
            }
        }
        Command::Balance { config, node } => {
            let report = study(&cli, config)?;
            for n in selected(&report, node.as_deref())? {
                writeln!(out, "# node: {}", n.label)?;
                match &n.balance {
                    Some(b) => out.write_all(b.to_delimited(',').as_bytes())?,
                    None => writeln!(out, "# not matched")?,
                }
            }
        }
        Command::Test { config } => {
            let report = study(&cli, config)?;
            if let OutputFormat::Json = cli.format {
                writeln!(out, "{}", serde_json::to_string_pretty(&report.outcomes)?)?;
                return Ok(());
            }
            writeln!(out, "outcome,role,node,tau0,level,deviate,p,lower,upper,estimate,decision")?;
            for o in &report.outcomes {
                for (n, t) in report.nodes.iter().zip(&o.nodes) {
                    let role = serde_json::to_value(o.role)?;
                    let role = role.as_str().unwrap_or_default();
                    match &t.result {
                        Some(r) => writeln!(
                            out,
                            "{},{role},{},{},{:.6},{:.4},{:.6},{:.4},{:.4},{:.4},{}",
                            o.name,
                            n.label,
                            r.tau0,
                            r.level,
                            r.deviate,
                            r.pvalue,
                            r.lower,
                            r.upper,
                            r.estimate,
                            t.status.short()
                        )?,
                        None => writeln!(out, "{},{role},{},,,,,,,,{}", o.name, n.label, t.status.short())?,
                    }
                }
            }
        }
        Command::Simulate { dgp, reps } => {
            let spec = load_simulation(dgp)?;
            let mut settings = spec.study.clone();
            if let Some(a) = cli.alpha {
                settings.alpha = a;
            }
            let tree = match &spec.tree {
                Some(p) => load_tree(Some(&relative_to(dgp, p)))?,
                None => ExposureTree::paper_default(),
            };
            let reps = reps.unwrap_or(spec.reps);
            let seed = cli.seed.unwrap_or(spec.seed);
            let summary = monte_carlo(&spec.dgp, &tree, &settings, reps, seed)?;
            match cli.format {
                OutputFormat::Json => writeln!(out, "{}", serde_json::to_string_pretty(&summary)?)?,
                OutputFormat::Text => out.write_all(summary.to_text().as_bytes())?,
            }
        }
        Command::Generate { dgp, out: path } => {
            let spec = load_simulation(dgp)?;
            let tree = match &spec.tree {
                Some(p) => load_tree(Some(&relative_to(dgp, p)))?,
                None => ExposureTree::paper_default(),
            };
            let dgp = SyntheticDgp { seed: cli.seed.unwrap_or(spec.dgp.seed), ..spec.dgp };
            let cohort = generate_cohort(&dgp, &tree)?;
            let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
            write_cohort(&cohort, file, b',')?;
        }
    }
    out.flush()?;
    Ok(())
}

fn format(cli: &Cli) -> Format {
    match cli.format {
        OutputFormat::Text => Format::Text,
        OutputFormat::Json => Format::Json,
    }
}

fn relative_to(file: &Path, p: &Path) -> PathBuf {
    file.parent().unwrap_or(Path::new(".")).join(p)
}

fn load_tree(path: Option<&Path>) -> Result<ExposureTree> {
    match path {
        None => Ok(ExposureTree::paper_default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading tree {}", p.display()))?;
            Ok(ExposureTree::from_toml(&text)?)
        }
    }
}

fn load_simulation(path: &Path) -> Result<SimulationSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    SimulationSpec::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
}

fn study_with_inputs(cli: &Cli, config: &Path) -> Result<(StudyReport, StudyInputs)> {
    let (mut cfg, inputs) = StudyConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    if let Some(s) = cli.seed {
        cfg.settings.seed = s;
    }
    if let Some(a) = cli.alpha {
        cfg.settings.alpha = a;
    }
    let report = run_study(&inputs, &cfg.settings)?;
    Ok((report, inputs))
}

fn study(cli: &Cli, config: &Path) -> Result<StudyReport> {
    Ok(study_with_inputs(cli, config)?.0)
}

fn selected<'a>(report: &'a StudyReport, node: Option<&str>) -> Result<Vec<&'a treematch::pipeline::NodeReport>> {
    match node {
        None => Ok(report.nodes.iter().collect()),
        Some(label) => match report.nodes.iter().find(|n| n.label == label) {
            Some(n) => Ok(vec![n]),
            None => bail!("no node labelled `{label}`"),
        },
    }
}
