//! The `selenc` command line. Lives in the library so tests can drive it.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand_core::OsRng;

use selenc_core::attack::{self, AttackConfig, CurvePoint, MaskPolicy, ToyTask};
use selenc_core::dp;
use selenc_core::he::{self, KeyConfig, KeyPair, SecretContext};
use selenc_core::model::{self, ModelShape};
use selenc_core::shamir::ShareConfig;

use crate::bench::{self, BenchConfig};
use crate::config::{BackendChoice, ConfigError, ExperimentSpec, DEFAULT_EXPANSION};
use crate::keyfile::{self, KeyFileError};
use crate::protocol::{self, mask_id, ProtocolError};
use crate::report::{Cell, Format, Provenance, Table};

#[derive(Debug, Parser)]
#[command(name = "selenc", version, about = "Federated averaging with selectively encrypted parameters")]
pub struct Cli {
    /// Overrides the config seed. Without it, keygen draws fresh OS randomness.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// csv or json-lines
    #[arg(long, global = true, default_value = "csv")]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a Paillier key pair, optionally split into threshold shares.
    Keygen {
        #[arg(long, default_value_t = 2048)]
        bits: u32,
        /// `n:k`, e.g. `5:3`: write n shares instead of the secret key.
        #[arg(long)]
        threshold: Option<String>,
        /// Key directory; defaults to --out-dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-client and aggregated sensitivity maps at the initial model.
    Sensitivity(ConfigArg),
    /// Agree on the encryption mask.
    Mask {
        #[command(flatten)]
        config: ConfigArg,
        /// Overrides `mask_ratio`.
        #[arg(long)]
        p: Option<f64>,
    },
    /// Run the federated rounds.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Record wall-clock timings (makes output nondeterministic).
        #[arg(long)]
        timings: bool,
    },
    /// Monte Carlo privacy budgets of random and selective noising.
    Budget {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        b: f64,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5,0.7,0.9")]
        p: Vec<f64>,
        /// random, selective or both
        #[arg(long, default_value = "both")]
        policy: String,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
    },
    /// Gradient inversion against selective and random masks on toy tasks.
    Attack {
        /// TOML with any of the keys below; flags take precedence.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        opts: AttackOpts,
    },
    /// Time encryption, aggregation and decryption.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "1000,10000")]
        model_params: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,1")]
        ratios: Vec<f64>,
        /// paillier or mock
        #[arg(long, default_value = "paillier")]
        backend: String,
        #[arg(long, default_value_t = 2048)]
        bits: u32,
        #[arg(long, default_value_t = DEFAULT_EXPANSION)]
        expansion_ratio: f64,
        #[arg(long, default_value_t = 5)]
        repeat: usize,
    },
}

#[derive(Debug, Clone, Default, Args, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackOpts {
    /// selective, random or both [default: both]
    #[arg(long)]
    pub policy: Option<String>,
    /// [default: 0,0.1,...,1]
    #[arg(long, value_delimiter = ',')]
    pub p_grid: Option<Vec<f64>>,
    /// Number of toy tasks; task seeds start at --seed [default: 20]
    #[arg(long)]
    pub seeds: Option<u64>,
    /// [default: 300]
    #[arg(long)]
    pub iters: Option<usize>,
    /// [default: 10]
    #[arg(long)]
    pub restarts: Option<usize>,
    /// [default: 0.1]
    #[arg(long)]
    pub lr: Option<f64>,
    /// [default: 1e-4]
    #[arg(long)]
    pub fd_step: Option<f64>,
}

impl AttackOpts {
    /// `self` where set, else `base`.
    fn or(self, base: AttackOpts) -> AttackOpts {
        AttackOpts {
            policy: self.policy.or(base.policy),
            p_grid: self.p_grid.or(base.p_grid),
            seeds: self.seeds.or(base.seeds),
            iters: self.iters.or(base.iters),
            restarts: self.restarts.or(base.restarts),
            lr: self.lr.or(base.lr),
            fd_step: self.fd_step.or(base.fd_step),
        }
    }
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Keys(#[from] KeyFileError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    He(#[from] he::HeError),
    #[error(transparent)]
    Attack(#[from] attack::AttackError),
    #[error(transparent)]
    Dp(#[from] dp::DpError),
    #[error(transparent)]
    Share(#[from] selenc_core::shamir::ShareError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Usage(_) => "usage",
            CliError::Keys(_) | CliError::Share(_) => "keys",
            CliError::Protocol(_) => "protocol",
            CliError::He(_) => "crypto",
            CliError::Attack(_) => "attack",
            CliError::Dp(_) => "dp",
            CliError::Io { .. } => "io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    /// One-line JSON for stderr.
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

/// Parse `args` (program name first) and run. Returns the text for stdout.
pub fn run_from<I, T>(args: I) -> Result<String, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    use clap::error::ErrorKind;
    match Cli::try_parse_from(args) {
        Ok(cli) => run(&cli),
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => Ok(e.to_string()),
        Err(e) => Err(CliError::Usage(e.to_string())),
    }
}

pub fn run(cli: &Cli) -> Result<String, CliError> {
    std::fs::create_dir_all(&cli.out_dir).map_err(io(&cli.out_dir))?;
    match &cli.command {
        Command::Keygen { bits, threshold, out } => keygen(cli, *bits, threshold.as_deref(), out.as_deref()),
        Command::Sensitivity(c) => sensitivity(cli, &c.config),
        Command::Mask { config, p } => mask(cli, config, *p),
        Command::Train { config, timings } => train(cli, &config.config, *timings),
        Command::Budget { n, b, p, policy, trials } => budget(cli, *n, *b, p, policy, *trials),
        Command::Attack { config, opts } => {
            let from_file = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(path).map_err(io(path))?;
                    toml::from_str(&text).map_err(|e| ConfigError::Parse(format!("{}: {}", path.display(), e.message())))?
                }
                None => AttackOpts::default(),
            };
            attack_cmd(cli, opts.clone().or(from_file))
        }
        Command::Bench { model_params, ratios, backend, bits, expansion_ratio, repeat } => {
            let cfg = BenchConfig { params: model_params.clone(), ratios: ratios.clone(), repeat: *repeat, seed: cli.seed.unwrap_or(0) };
            bench_cmd(cli, &cfg, backend, *bits, *expansion_ratio)
        }
    }
}

fn write(cli: &Cli, table: &Table, stem: &str, prov: &Provenance) -> Result<PathBuf, CliError> {
    table.write(&cli.out_dir, stem, cli.format, prov).map_err(io(&cli.out_dir))
}

fn load_spec(cli: &Cli, path: &Path) -> Result<ExperimentSpec, CliError> {
    let spec = ExperimentSpec::load(path)?;
    Ok(match cli.seed {
        Some(seed) => spec.with_seed(seed),
        None => spec,
    })
}

fn provenance(spec: &ExperimentSpec) -> Provenance {
    Provenance::new(spec.config_hash.clone(), spec.seed())
}

/// Provenance for commands without a config file: hash of the arguments.
fn arg_provenance(cli: &Cli) -> Provenance {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(format!("{:?}", cli.command).as_bytes());
    Provenance::new(hex::encode(digest), cli.seed.unwrap_or(0))
}

/// Keys for a run: mock, loaded from `key.dir`, or derived from the seed.
pub fn load_keys(spec: &ExperimentSpec) -> Result<SecretContext, CliError> {
    match spec.backend {
        BackendChoice::Mock => Ok(SecretContext::mock(spec.key_cfg, spec.expansion_ratio)?),
        BackendChoice::Paillier => match &spec.raw.key.dir {
            Some(dir) => {
                let sk = keyfile::read_secret(&spec.base_dir.join(dir))?;
                let bits = sk.public_key().bits();
                if bits != u64::from(spec.key_cfg.security_bits) {
                    return Err(ConfigError::Invalid {
                        key: "key.security_bits",
                        msg: format!("{} but the key in {} has {bits} bits", spec.key_cfg.security_bits, dir.display()),
                    }
                    .into());
                }
                Ok(SecretContext::from_secret_key(spec.key_cfg, sk)?)
            }
            None => Ok(SecretContext::paillier(spec.key_cfg, he::keygen(&spec.key_cfg, spec.seed())?)?),
        },
    }
}

fn layer_of(shape: &ModelShape, i: usize) -> usize {
    (0..shape.layers().len()).find(|&l| shape.layer_range(l).contains(&i)).expect("index in range")
}

fn keygen(cli: &Cli, bits: u32, threshold: Option<&str>, out_dir: Option<&Path>) -> Result<String, CliError> {
    let dir = out_dir.unwrap_or(&cli.out_dir);
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let shares = threshold
        .map(|t| {
            let (n, k) = t
                .split_once(':')
                .and_then(|(n, k)| Some((n.trim().parse().ok()?, k.trim().parse().ok()?)))
                .ok_or_else(|| CliError::Usage(format!("--threshold {t:?}: expected n:k")))?;
            ShareConfig::new(n, k).map_err(|e| CliError::Usage(format!("--threshold {t}: {e}")))
        })
        .transpose()?;
    let cfg = KeyConfig::default().with_security_bits(bits);
    cfg.validate().map_err(|e| CliError::Usage(format!("--bits: {e}")))?;
    let keys: KeyPair = match cli.seed {
        Some(seed) => he::keygen(&cfg, seed)?,
        None => he::paillier::keygen(bits, &mut OsRng)?,
    };
    let mut out = format!("key {} ({bits} bits)\n", keyfile::fingerprint(&keys.public));
    let public = keyfile::write_public(dir, &keys.public)?;
    out += &format!("wrote {}\n", public.display());
    match shares {
        Some(sc) => {
            let share_seed = match cli.seed {
                Some(seed) => seed,
                None => rand_core::RngCore::next_u64(&mut OsRng),
            };
            for path in keyfile::write_shares(dir, &keys, sc, share_seed)? {
                out += &format!("wrote {}\n", path.display());
            }
            out += &format!("any {} of {} shares reconstruct the secret key\n", sc.k, sc.n);
        }
        None => out += &format!("wrote {}\n", keyfile::write_secret(dir, &keys)?.display()),
    }
    Ok(out)
}

fn sensitivity(cli: &Cli, path: &Path) -> Result<String, CliError> {
    let spec = load_spec(cli, path)?;
    let datasets = spec.datasets()?;
    let keys = load_keys(&spec)?;
    // any ratio strictly inside (0, 1) runs the encrypted aggregation
    let mut round = spec.round.clone();
    round.mask_ratio = 0.5;
    let plan = protocol::mask_plan(&round, &spec.shape, &datasets, &keys)?;

    let mut columns = vec!["index".to_string(), "layer".into(), "aggregate".into()];
    columns.extend(plan.local.iter().map(|(id, _)| format!("client_{id}")));
    let mut table = Table { columns, rows: Vec::new() };
    for i in 0..spec.shape.total_params() {
        let mut row: Vec<Cell> = vec![i.into(), layer_of(&spec.shape, i).into(), plan.aggregate[i].into()];
        row.extend(plan.local.iter().map(|(_, m)| Cell::from(m[i])));
        table.push(row);
    }
    let file = write(cli, &table, "sensitivity", &provenance(&spec))?;
    let max = plan.aggregate.iter().copied().fold(0.0, f64::max);
    Ok(format!("{} parameters, max aggregated score {max}\nwrote {}\n", plan.aggregate.len(), file.display()))
}

fn mask(cli: &Cli, config: &ConfigArg, p: Option<f64>) -> Result<String, CliError> {
    let mut spec = load_spec(cli, &config.config)?;
    if let Some(p) = p {
        if !(0.0..=1.0).contains(&p) {
            return Err(ConfigError::Invalid { key: "mask_ratio", msg: format!("--p {p} is outside [0, 1]") }.into());
        }
        spec.round.mask_ratio = p;
    }
    let datasets = spec.datasets()?;
    let keys = load_keys(&spec)?;
    let plan = protocol::mask_plan(&spec.round, &spec.shape, &datasets, &keys)?;

    let mut table = Table::new(&["index", "layer", "encrypted", "score"]);
    for i in 0..plan.mask.len() {
        table.push(vec![
            i.into(),
            layer_of(&spec.shape, i).into(),
            usize::from(plan.mask.contains(i)).into(),
            plan.aggregate.get(i).copied().into(),
        ]);
    }
    let file = write(cli, &table, "mask", &provenance(&spec))?;
    let bin = cli.out_dir.join("mask.bin");
    std::fs::write(&bin, plan.mask.to_bytes()).map_err(io(&bin))?;
    Ok(format!(
        "encrypting {} of {} parameters (p = {}), mask id {:016x}\nwrote {}\nwrote {}\n",
        plan.mask.encrypted_count(),
        plan.mask.len(),
        spec.round.mask_ratio,
        mask_id(&plan.mask),
        file.display(),
        bin.display()
    ))
}

/// Files written by `train`.
pub const TRAIN_OUTPUTS: [&str; 3] = ["metrics", "model", "budget"];

fn train(cli: &Cli, path: &Path, timings: bool) -> Result<String, CliError> {
    let mut spec = load_spec(cli, path)?;
    spec.round.timings = timings;
    let datasets = spec.datasets()?;
    let started = std::time::Instant::now();
    let keys = load_keys(&spec)?;
    let out = protocol::run_protocol(&spec.round, &spec.shape, &datasets, &keys)?;
    let wall = started.elapsed().as_secs_f64();
    let prov = provenance(&spec);

    let mut metrics = Table::new(&[
        "round", "client", "phase", "bytes_up", "bytes_down", "enc_ms", "agg_ms", "dec_ms", "train_ms", "epsilon_round",
        "epsilon_total",
    ]);
    for m in &out.metrics {
        metrics.push(vec![
            m.round.into(),
            m.client.into(),
            m.phase.into(),
            m.bytes_up.into(),
            m.bytes_down.into(),
            m.enc_ms.into(),
            m.agg_ms.into(),
            m.dec_ms.into(),
            m.train_ms.into(),
            m.epsilon_round.into(),
            m.epsilon_total.into(),
        ]);
    }
    let metrics_file = write(cli, &metrics, TRAIN_OUTPUTS[0], &prov)?;

    let mut model_table = Table::new(&["index", "layer", "encrypted", "value"]);
    for (i, v) in out.final_model.iter().enumerate() {
        model_table.push(vec![
            i.into(),
            layer_of(&spec.shape, i).into(),
            usize::from(out.mask.contains(i)).into(),
            (*v).into(),
        ]);
    }
    let model_file = write(cli, &model_table, TRAIN_OUTPUTS[1], &prov)?;

    let mut budget = Table::new(&["round", "epsilon_round", "epsilon_total", "dp", "b"]);
    for m in out.metrics.iter().filter(|m| m.phase == "aggregate") {
        budget.push(vec![
            m.round.into(),
            m.epsilon_round.into(),
            m.epsilon_total.into(),
            usize::from(spec.round.dp.is_some()).into(),
            spec.round.dp.map(|d| d.b).into(),
        ]);
    }
    let budget_file = write(cli, &budget, TRAIN_OUTPUTS[2], &prov)?;

    let total: usize = datasets.iter().map(|d| d.len()).sum();
    let mut loss = 0.0;
    for d in &datasets {
        let (l, _) = model::loss_and_grad(&out.final_model, &spec.shape, d, spec.round.loss).map_err(ProtocolError::from)?;
        loss += l * d.len() as f64 / total as f64;
    }
    let bytes_up: u64 = out.metrics.iter().map(|m| m.bytes_up).sum();
    let bytes_down: u64 = out.metrics.iter().map(|m| m.bytes_down).sum();
    Ok(format!(
        "summary\n\
         rounds {}  clients {}  params {}  encrypted {} (p = {})\n\
         bytes up {bytes_up}  bytes down {bytes_down}  total {}\n\
         wall time {wall:.3} s\n\
         epsilon total {}\n\
         final training loss {loss}\n\
         wrote {}\nwrote {}\nwrote {}\n",
        spec.round.rounds,
        spec.round.n_clients,
        out.final_model.len(),
        out.mask.encrypted_count(),
        spec.round.mask_ratio,
        bytes_up + bytes_down,
        out.epsilon_total,
        metrics_file.display(),
        model_file.display(),
        budget_file.display(),
    ))
}

fn budget(cli: &Cli, n: usize, b: f64, ps: &[f64], policy: &str, trials: usize) -> Result<String, CliError> {
    let (random, selective) = match policy {
        "both" => (true, true),
        "random" => (true, false),
        "selective" => (false, true),
        other => return Err(CliError::Usage(format!("--policy {other:?}: expected random, selective or both"))),
    };
    let seed = cli.seed.unwrap_or(0);
    let mut table =
        Table::new(&["p", "policy", "n", "b", "trials", "epsilon_all", "epsilon", "ratio_to_j", "ratio_se", "expected_ratio"]);
    let mut out = String::from("p      policy     ratio_to_J  expected\n");
    for &p in ps {
        let e = dp::expected_budgets(n, b, p, trials, seed)?;
        let mut rows = Vec::new();
        if random {
            rows.push(("random", e.random_mean, e.random_ratio, 1.0 - p));
        }
        if selective {
            rows.push(("selective", e.selective_mean, e.selective_ratio, (1.0 - p) * (1.0 - p)));
        }
        for (name, eps, ratio, expected) in rows {
            table.push(vec![
                p.into(),
                name.into(),
                n.into(),
                b.into(),
                trials.into(),
                e.j.into(),
                eps.into(),
                ratio.mean.into(),
                ratio.std_err.into(),
                expected.into(),
            ]);
            out += &format!("{p:<6} {name:<10} {:<11.4} {expected:.4}\n", ratio.mean);
        }
    }
    let file = write(cli, &table, "budget", &arg_provenance(cli))?;
    out += &format!("wrote {}\n", file.display());
    Ok(out)
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        (xs[m - 1] + xs[m]) / 2.0
    }
}

const DEFAULT_P_GRID: [f64; 11] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

fn attack_cmd(cli: &Cli, opts: AttackOpts) -> Result<String, CliError> {
    let policies = match opts.policy.as_deref().unwrap_or("both") {
        "both" => vec![MaskPolicy::Selective, MaskPolicy::Random],
        "selective" => vec![MaskPolicy::Selective],
        "random" => vec![MaskPolicy::Random],
        other => return Err(CliError::Usage(format!("policy {other:?}: expected selective, random or both"))),
    };
    let p_grid = opts.p_grid.unwrap_or_else(|| DEFAULT_P_GRID.to_vec());
    let seeds = opts.seeds.unwrap_or(20);
    if seeds == 0 || p_grid.is_empty() {
        return Err(CliError::Usage("need at least one seed and one ratio".into()));
    }
    let defaults = AttackConfig::default();
    let cfg = AttackConfig {
        iters: opts.iters.unwrap_or(defaults.iters),
        restarts: opts.restarts.unwrap_or(defaults.restarts),
        lr: opts.lr.unwrap_or(defaults.lr),
        fd_step: opts.fd_step.unwrap_or(defaults.fd_step),
        ..defaults
    };

    let first = cli.seed.unwrap_or(0);
    let mut runs = Table::new(&["policy", "p", "seed", "restart", "iters", "match_loss", "mse", "draw", "selected"]);
    // [policy][p] -> per-seed MSE
    let mut mses: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); p_grid.len()]; policies.len()];
    let mut taus = Vec::new();
    let mut defeat: Vec<Vec<f64>> = vec![Vec::new(); policies.len()];
    for task_seed in first..first + seeds {
        let task = ToyTask::new(task_seed);
        let tau = attack::random_guess_threshold(&task.x, 1000, cfg.restarts, 0.25, task_seed);
        taus.push(tau);
        let cfg = AttackConfig { seed: task_seed, ..cfg };
        for (k, policy) in policies.iter().enumerate() {
            let curve: Vec<CurvePoint> = task.curve(&p_grid, *policy, &cfg)?;
            for (i, pt) in curve.iter().enumerate() {
                mses[k][i].push(pt.best_mse);
                for (draw, r) in pt.runs.iter().enumerate() {
                    for restart in 0..r.per_restart_mse.len() {
                        runs.push(vec![
                            policy.name().into(),
                            pt.p.into(),
                            task_seed.into(),
                            restart.into(),
                            cfg.iters.into(),
                            r.per_restart_loss[restart].into(),
                            r.per_restart_mse[restart].into(),
                            draw.into(),
                            usize::from(restart == r.selected_restart).into(),
                        ]);
                    }
                }
            }
            defeat[k].push(attack::defeat_ratio(&curve, tau).unwrap_or(f64::INFINITY));
        }
    }
    let prov = arg_provenance(cli);
    let runs_file = write(cli, &runs, "attack_runs", &prov)?;

    let mut columns = vec!["p".to_string()];
    for policy in &policies {
        columns.push(format!("{}_median_mse", policy.name()));
        columns.push(format!("{}_mean_mse", policy.name()));
    }
    columns.push("tau_median".into());
    let mut curve = Table { columns, rows: Vec::new() };
    let tau_median = median(&mut taus);
    let mut out = String::from("defense curve (median best MSE over task seeds)\n");
    out += &format!("{:<6}", "p");
    for policy in &policies {
        out += &format!(" {:<12}", policy.name());
    }
    out += "\n";
    for (i, p) in p_grid.iter().enumerate() {
        let mut row: Vec<Cell> = vec![(*p).into()];
        out += &format!("{p:<6}");
        for per_policy in mses.iter_mut() {
            let xs = &mut per_policy[i];
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let med = median(xs);
            row.push(med.into());
            row.push(mean.into());
            out += &format!(" {med:<12.5}");
        }
        row.push(tau_median.into());
        curve.push(row);
        out += "\n";
    }
    out += &format!("tau (median over seeds) {tau_median:.5}\n");
    for (k, policy) in policies.iter().enumerate() {
        let d = median(&mut defeat[k]);
        out += &format!(
            "{}: median defeat ratio {}\n",
            policy.name(),
            if d.is_finite() { d.to_string() } else { "none".into() }
        );
    }
    let curve_file = write(cli, &curve, "defense_curve", &prov)?;
    out += &format!("wrote {}\nwrote {}\n", runs_file.display(), curve_file.display());
    Ok(out)
}

fn bench_cmd(cli: &Cli, cfg: &BenchConfig, backend: &str, bits: u32, expansion: f64) -> Result<String, CliError> {
    let key_cfg = KeyConfig::default().with_security_bits(bits);
    key_cfg.validate().map_err(|e| CliError::Usage(format!("--bits: {e}")))?;
    let keys = match backend {
        "mock" => SecretContext::mock(key_cfg, expansion)?,
        "paillier" => SecretContext::paillier(key_cfg, he::keygen(&key_cfg, cfg.seed)?)?,
        other => return Err(CliError::Usage(format!("--backend {other:?}: expected paillier or mock"))),
    };
    if let Some(r) = cfg.ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(CliError::Usage(format!("--ratios: {r} is outside [0, 1]")));
    }
    let rows = bench::run(&keys, cfg)?;
    let mut table = Table::new(&[
        "backend", "params", "ratio", "encrypted", "bytes", "ciphertext_bytes", "enc_ms_median", "enc_ms_iqr",
        "agg_ms_median", "agg_ms_iqr", "dec_ms_median", "dec_ms_iqr",
    ]);
    let mut out = String::from("params  ratio  bytes        enc ms     agg ms     dec ms\n");
    for r in &rows {
        table.push(vec![
            backend.into(),
            r.params.into(),
            r.ratio.into(),
            r.encrypted.into(),
            r.bytes.into(),
            r.ciphertext_bytes.into(),
            r.enc_ms.median.into(),
            r.enc_ms.iqr.into(),
            r.agg_ms.median.into(),
            r.agg_ms.iqr.into(),
            r.dec_ms.median.into(),
            r.dec_ms.iqr.into(),
        ]);
        out += &format!(
            "{:<7} {:<6} {:<12} {:<10.3} {:<10.3} {:.3}\n",
            r.params, r.ratio, r.bytes, r.enc_ms.median, r.agg_ms.median, r.dec_ms.median
        );
    }
    let file = write(cli, &table, "bench", &arg_provenance(cli))?;
    out += &format!("wrote {}\n", file.display());
    Ok(out)
}
