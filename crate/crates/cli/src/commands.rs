//! Implementations of the six subcommands.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;

use vflr_core::ahe::{generate_keypair, PrivateKey};
use vflr_core::cluster::ClusterBackend;
use vflr_core::data::{
    self, fit_standardizer, load_shard, vertical_split, Dataset, FeatureMatrix, Standardizer,
    VerticalDataset,
};
use vflr_core::lr;
use vflr_core::protocol::{
    run_duplex, run_party_a, run_party_b, ATrainResult, BTrainResult, PartyA, PartyB, RngSource,
    SerialBackend, TrainConfig, WeightInit,
};
use vflr_core::security::{
    attack_recover_residuals, attack_unmasked_gradients, audit_run, relative_l2_error, SIGN_EPS,
};
use vflr_core::transport::{connect, TcpHost};
use vflr_core::PartyRole;

use crate::files;
use crate::{
    AnalyzeArgs, AttackArgs, AttackKind, CliError, Cmd, EvaluateArgs, KeygenArgs, Role, SplitArgs,
    Switch, TrainArgs,
};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(30);
const ACCEPT_TIMEOUT: Duration = Duration::from_secs(120);

pub fn run(cmd: Cmd) -> Result<u8, CliError> {
    match cmd {
        Cmd::Keygen(args) => cmd_keygen(args),
        Cmd::SplitData(args) => cmd_split(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Evaluate(args) => cmd_evaluate(args),
        Cmd::AnalyzeSecurity(args) => cmd_analyze(args),
        Cmd::AttackDemo(args) => cmd_attack(args),
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

// ---------------------------------------------------------------------------
// keygen

fn cmd_keygen(args: KeygenArgs) -> Result<u8, CliError> {
    fs::create_dir_all(&args.out_dir)?;
    let mut rng = RngSource::new(args.seed, 0xA);
    let (public, private) = generate_keypair(args.bits, &mut rng)?;
    let pk_path = args.out_dir.join("public_key.json");
    let sk_path = args.out_dir.join("private_key.json");
    files::save_public_key(&pk_path, &public)?;
    files::save_private_key(&sk_path, &private)?;
    println!("public key:  {}", pk_path.display());
    println!("private key: {} (owner-only)", sk_path.display());
    Ok(0)
}

// ---------------------------------------------------------------------------
// split-data

fn load_source(path: &Path) -> Result<Dataset, CliError> {
    let is_csv = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("csv"))
        .unwrap_or(false);
    Ok(if is_csv {
        data::load_dense_csv(path)?
    } else {
        data::load_libsvm(path)?
    })
}

fn save_shard(dir: &Path, stem: &str, shard: &VerticalDataset) -> Result<PathBuf, CliError> {
    let (ext, save): (&str, fn(&Path, &VerticalDataset) -> _) = if shard.features.is_sparse() {
        ("libsvm", |p, s| data::save_libsvm(p, s))
    } else {
        ("csv", |p, s| data::save_dense_csv(p, s))
    };
    let path = dir.join(format!("{stem}.{ext}"));
    save(&path, shard)?;
    Ok(path)
}

fn cmd_split(args: SplitArgs) -> Result<u8, CliError> {
    let source = load_source(&args.input)?;
    let (a, b, manifest) = vertical_split(&source, args.m_a, args.seed)?;
    fs::create_dir_all(&args.out_dir)?;
    let a_path = save_shard(&args.out_dir, "shard_a", &a)?;
    let b_path = save_shard(&args.out_dir, "shard_b", &b)?;
    files::write_report(&args.out_dir.join("manifest.json"), &manifest)?;
    println!(
        "split {} rows: A {} columns + labels -> {}",
        manifest.n,
        manifest.m_a,
        a_path.display()
    );
    println!(
        "               B {} columns          -> {}",
        manifest.m_b,
        b_path.display()
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// train

/// JSON config file: every field optional, flags override.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    workers: Option<usize>,
    eta: Option<f64>,
    max_iterations: Option<u64>,
    tolerance: Option<f64>,
    key_bits: Option<u32>,
    fraction_bits: Option<u32>,
    coeff_fraction_bits: Option<u32>,
    mask_bound: Option<u32>,
    seed: Option<u64>,
    masking: Option<bool>,
    standardize: Option<bool>,
}

#[derive(Debug)]
struct Resolved {
    cfg: TrainConfig,
    workers: usize,
    standardize: bool,
}

fn resolve_train(args: &TrainArgs) -> Result<Resolved, CliError> {
    let file: ConfigFile = match &args.config {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| CliError::Runtime(format!("config {}: {e}", path.display())))?,
        None => ConfigFile::default(),
    };
    let defaults = TrainConfig::default();
    let masking = args
        .masking
        .map(Switch::as_bool)
        .or(file.masking)
        .unwrap_or(defaults.masking);
    if !masking && !args.allow_unsafe {
        return Err(CliError::Leakage(
            "masking off hands party B's gradients to A in the clear; \
             pass --unsafe to accept that"
                .into(),
        ));
    }
    let seed = args.seed.or(file.seed);
    let cfg = TrainConfig {
        eta: args.eta.or(file.eta).unwrap_or(defaults.eta),
        max_iterations: args
            .max_iterations
            .or(file.max_iterations)
            .unwrap_or(defaults.max_iterations),
        tolerance: args
            .tolerance
            .or(file.tolerance)
            .unwrap_or(defaults.tolerance),
        fraction_bits: args
            .fraction_bits
            .or(file.fraction_bits)
            .unwrap_or(defaults.fraction_bits),
        coeff_fraction_bits: args
            .coeff_fraction_bits
            .or(file.coeff_fraction_bits)
            .unwrap_or(defaults.coeff_fraction_bits),
        mask_bound_log2: args
            .mask_bound
            .or(file.mask_bound)
            .unwrap_or(defaults.mask_bound_log2),
        masking,
        allow_unsafe_dims: args.allow_unsafe,
        trace_auc: args.trace_auc,
        seed,
        key_bits: args.key_bits.or(file.key_bits).unwrap_or(defaults.key_bits),
        ..defaults
    };
    cfg.validate()?;
    let workers = args.workers.or(file.workers).unwrap_or(1);
    if workers == 0 {
        return Err(usage("--workers must be at least 1"));
    }
    let standardize = args
        .standardize
        .map(Switch::as_bool)
        .or(file.standardize)
        .unwrap_or(false);
    Ok(Resolved {
        cfg,
        workers,
        standardize,
    })
}

fn load_run_key(dir: &Path) -> Result<PrivateKey, CliError> {
    let private = files::load_private_key(&dir.join("private_key.json"))?;
    // catch mixed-up key directories before they poison a whole run
    let pk_path = dir.join("public_key.json");
    if pk_path.exists() {
        let public = files::load_public_key(&pk_path)?;
        if public.n() != private.public().n() {
            return Err(CliError::Runtime(format!(
                "key directory {}: public_key.json does not match private_key.json",
                dir.display()
            )));
        }
    }
    Ok(private)
}

/// Party A with either a fresh keypair (drawn from the run's randomness)
/// or the one `keygen` wrote.
fn build_party_a_serial(
    cfg: &TrainConfig,
    features: FeatureMatrix,
    labels: Vec<u8>,
    keys: Option<&Path>,
) -> Result<PartyA<SerialBackend>, CliError> {
    match keys {
        None => Ok(PartyA::new_serial(cfg.clone(), features, labels)?),
        Some(dir) => {
            let private = load_run_key(dir)?;
            let rng = RngSource::new(cfg.seed, 0xA);
            let backend = SerialBackend::for_party_a(features, private, rng);
            Ok(PartyA::new(cfg.clone(), backend, labels)?)
        }
    }
}

fn build_party_a_cluster(
    cfg: &TrainConfig,
    features: &FeatureMatrix,
    labels: Vec<u8>,
    workers: usize,
    keys: Option<&Path>,
) -> Result<PartyA<ClusterBackend>, CliError> {
    match keys {
        None => Ok(PartyA::<ClusterBackend>::new_cluster(
            cfg.clone(),
            features,
            labels,
            workers,
        )?),
        Some(dir) => {
            let private = load_run_key(dir)?;
            let backend =
                ClusterBackend::for_party_a(features, private, workers, cfg.kernel, cfg.seed)?;
            Ok(PartyA::new(cfg.clone(), backend, labels)?)
        }
    }
}

/// Standardizes in place when requested; returns the transform for the
/// model header so evaluation can replay it.
fn maybe_standardize(
    shard: &mut VerticalDataset,
    on: bool,
) -> Result<Option<Standardizer>, CliError> {
    if !on {
        return Ok(None);
    }
    let st = fit_standardizer(&shard.features);
    st.apply(&mut shard.features)?;
    Ok(Some(st))
}

fn write_a_artifacts(
    out_dir: &Path,
    result: &ATrainResult,
    st: Option<&Standardizer>,
) -> Result<(), CliError> {
    files::save_model(&out_dir.join("model_a.bin"), "a", &result.model, st)?;
    files::write_trace(&out_dir.join("trace.csv"), &result.trace)?;
    Ok(())
}

fn write_b_artifacts(
    out_dir: &Path,
    result: &BTrainResult,
    st: Option<&Standardizer>,
) -> Result<(), CliError> {
    files::save_model(&out_dir.join("model_b.bin"), "b", &result.model, st)?;
    Ok(())
}

fn describe_stop(result_iterations: u64, stop: &Option<vflr_core::protocol::StopReason>) -> String {
    match stop {
        Some(reason) => format!("{result_iterations} iterations ({reason:?})"),
        None => format!("{result_iterations} iterations"),
    }
}

fn cmd_train(args: TrainArgs) -> Result<u8, CliError> {
    let resolved = resolve_train(&args)?;
    fs::create_dir_all(&args.out_dir)?;
    match args.role {
        Role::Duplex => train_duplex(&args, resolved),
        Role::A => train_role_a(&args, resolved),
        Role::B => train_role_b(&args, resolved),
    }
}

fn train_duplex(args: &TrainArgs, r: Resolved) -> Result<u8, CliError> {
    let (Some(path_a), Some(path_b)) = (&args.data_a, &args.data_b) else {
        return Err(usage("duplex mode needs --data-a and --data-b"));
    };
    let mut shard_a = load_shard(path_a, PartyRole::A)?;
    let mut shard_b = load_shard(path_b, PartyRole::B)?;
    if shard_a.rows() != shard_b.rows() {
        return Err(CliError::Runtime(format!(
            "shards disagree on rows: A has {}, B has {}",
            shard_a.rows(),
            shard_b.rows()
        )));
    }
    let st_a = maybe_standardize(&mut shard_a, r.standardize)?;
    let st_b = maybe_standardize(&mut shard_b, r.standardize)?;
    let labels = shard_a.labels.clone().expect("validated A shard");

    let n = shard_a.rows();
    let (m_a, m_b) = (shard_a.cols(), shard_b.cols());
    let keys = args.keys.as_deref();
    let (ra, rb) = if r.workers == 1 {
        let a = build_party_a_serial(&r.cfg, shard_a.features, labels, keys)?;
        let b = PartyB::new_serial(r.cfg.clone(), shard_b.features)?;
        let (ra, rb, _) = run_duplex(a, b)?;
        (ra, rb)
    } else {
        let a = build_party_a_cluster(&r.cfg, &shard_a.features, labels, r.workers, keys)?;
        let b = PartyB::<ClusterBackend>::new_cluster(r.cfg.clone(), &shard_b.features, r.workers)?;
        let (ra, rb, _) = run_duplex(a, b)?;
        (ra, rb)
    };

    write_a_artifacts(&args.out_dir, &ra, st_a.as_ref())?;
    write_b_artifacts(&args.out_dir, &rb, st_b.as_ref())?;
    let report = audit_run(n, m_a, m_b, ra.trace.len(), r.cfg.masking);
    files::write_report(&args.out_dir.join("leakage_report.json"), &report)?;
    for w in report.warnings() {
        eprintln!("leakage warning: {w}");
    }
    let last_loss = ra.trace.last().map(|t| t.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} (final loss {last_loss:.6}); artifacts in {}",
        describe_stop(ra.model.iteration, &ra.stop),
        args.out_dir.display()
    );
    Ok(0)
}

fn train_role_a(args: &TrainArgs, r: Resolved) -> Result<u8, CliError> {
    let path = args
        .data
        .as_ref()
        .ok_or_else(|| usage("role a needs --data"))?;
    let peer = args
        .peer
        .as_ref()
        .ok_or_else(|| usage("role a needs --peer"))?;
    let mut shard = load_shard(path, PartyRole::A)?;
    let st = maybe_standardize(&mut shard, r.standardize)?;
    let labels = shard.labels.clone().expect("validated A shard");
    let n = shard.rows();
    let m_a = shard.cols();

    let mut ch = connect(peer.as_str(), CONNECT_TIMEOUT)?;
    let keys = args.keys.as_deref();
    let ra = if r.workers == 1 {
        let mut a = build_party_a_serial(&r.cfg, shard.features, labels, keys)?;
        run_party_a(&mut a, &mut ch, None)?;
        a.into_result()
    } else {
        let mut a =
            build_party_a_cluster(&r.cfg, &shard.features, labels, r.workers, keys)?;
        run_party_a(&mut a, &mut ch, None)?;
        a.into_result()
    };

    write_a_artifacts(&args.out_dir, &ra, st.as_ref())?;
    // A learned B's width from the gradient frames, so the audit is complete.
    let m_b = ra.peer_cols.unwrap_or(0);
    let report = audit_run(n, m_a, m_b, ra.trace.len(), r.cfg.masking);
    files::write_report(&args.out_dir.join("leakage_report.json"), &report)?;
    for w in report.warnings() {
        eprintln!("leakage warning: {w}");
    }
    println!(
        "trained {}; artifacts in {}",
        describe_stop(ra.model.iteration, &ra.stop),
        args.out_dir.display()
    );
    Ok(0)
}

fn train_role_b(args: &TrainArgs, r: Resolved) -> Result<u8, CliError> {
    let path = args
        .data
        .as_ref()
        .ok_or_else(|| usage("role b needs --data"))?;
    let listen = args
        .listen
        .as_ref()
        .ok_or_else(|| usage("role b needs --listen"))?;
    if args.keys.is_some() {
        return Err(usage("role b never holds the private key; drop --keys"));
    }
    let shard = load_shard(path, PartyRole::B)?;
    let n = shard.rows();
    let m_b = shard.cols();
    let mut shard = shard;
    let st = maybe_standardize(&mut shard, r.standardize)?;

    // Build the party before going on the network: the leakage gate must
    // refuse bad shapes without ever accepting a connection.
    let rb = if r.workers == 1 {
        let mut b = PartyB::new_serial(r.cfg.clone(), shard.features)?;
        let mut host = TcpHost::bind(listen.as_str())?;
        println!("listening on {}", host.local_addr()?);
        let mut ch = host.accept_session(ACCEPT_TIMEOUT)?;
        run_party_b(&mut b, &mut ch, None)?;
        b.into_result()
    } else {
        let mut b = PartyB::<ClusterBackend>::new_cluster(r.cfg.clone(), &shard.features, r.workers)?;
        let mut host = TcpHost::bind(listen.as_str())?;
        println!("listening on {}", host.local_addr()?);
        let mut ch = host.accept_session(ACCEPT_TIMEOUT)?;
        run_party_b(&mut b, &mut ch, None)?;
        b.into_result()
    };

    write_b_artifacts(&args.out_dir, &rb, st.as_ref())?;
    // B cannot see A's width; 0 marks it unknown in the report.
    let report = audit_run(n, 0, m_b, rb.model.iteration as usize, r.cfg.masking);
    files::write_report(&args.out_dir.join("leakage_report.json"), &report)?;
    for w in report.warnings() {
        eprintln!("leakage warning: {w}");
    }
    println!(
        "trained {}; artifacts in {}",
        describe_stop(rb.model.iteration, &rb.stop),
        args.out_dir.display()
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// evaluate

fn scored_metrics(
    model_a: &lr::PartyModel,
    model_b: &lr::PartyModel,
    st_a: Option<&Standardizer>,
    st_b: Option<&Standardizer>,
    path_a: &Path,
    path_b: &Path,
) -> Result<(f64, f64), CliError> {
    let mut shard_a = load_shard(path_a, PartyRole::A)?;
    let mut shard_b = load_shard(path_b, PartyRole::B)?;
    if shard_a.rows() != shard_b.rows() {
        return Err(CliError::Runtime(format!(
            "shards disagree on rows: A has {}, B has {}",
            shard_a.rows(),
            shard_b.rows()
        )));
    }
    if let Some(st) = st_a {
        st.apply(&mut shard_a.features)?;
    }
    if let Some(st) = st_b {
        st.apply(&mut shard_b.features)?;
    }
    let za = lr::partial_scores(model_a, &shard_a.features, 0..shard_a.rows())?;
    let zb = lr::partial_scores(model_b, &shard_b.features, 0..shard_b.rows())?;
    let scores = lr::combine_scores(&za, &zb)?;
    let labels = shard_a.labels.expect("validated A shard");
    Ok((lr::auc(&scores, &labels)?, lr::log_loss(&scores, &labels)?))
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<u8, CliError> {
    let (header_a, model_a) = files::load_model(&args.model_a)?;
    let (header_b, model_b) = files::load_model(&args.model_b)?;
    if header_a.role != "a" || header_b.role != "b" {
        return Err(CliError::Runtime(format!(
            "model roles are {}/{}, expected a/b",
            header_a.role, header_b.role
        )));
    }
    let (train_auc, train_log_loss) = scored_metrics(
        &model_a,
        &model_b,
        header_a.standardizer.as_ref(),
        header_b.standardizer.as_ref(),
        &args.data_a,
        &args.data_b,
    )?;
    println!("train: auc {train_auc:.4}  log-loss {train_log_loss:.4}");
    let test = match (&args.test_data_a, &args.test_data_b) {
        (Some(ta), Some(tb)) => {
            let (auc, ll) = scored_metrics(
                &model_a,
                &model_b,
                header_a.standardizer.as_ref(),
                header_b.standardizer.as_ref(),
                ta,
                tb,
            )?;
            println!("test:  auc {auc:.4}  log-loss {ll:.4}");
            Some((auc, ll))
        }
        (None, None) => None,
        _ => return Err(usage("--test-data-a and --test-data-b go together")),
    };
    let metrics = files::Metrics {
        train_auc,
        train_log_loss,
        test_auc: test.map(|t| t.0),
        test_log_loss: test.map(|t| t.1),
    };
    files::write_report(&args.out, &metrics)?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// analyze-security

fn cmd_analyze(args: AnalyzeArgs) -> Result<u8, CliError> {
    if args.n == 0 || args.m_b == 0 {
        return Err(usage("--n and --m-b must be positive"));
    }
    let report = audit_run(args.n, args.m_a, args.m_b, args.rounds, args.masking.as_bool());
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(path) = &args.out {
        files::write_report(path, &report)?;
    }
    let warnings = report.warnings();
    if warnings.is_empty() {
        return Ok(0);
    }
    for w in warnings {
        eprintln!("leakage warning: {w}");
    }
    Ok(3)
}

// ---------------------------------------------------------------------------
// attack-demo

/// Generates a labeled instance and vertically splits it 2 / m_b.
fn demo_instance(
    n: usize,
    m_b: usize,
    seed: u64,
) -> Result<(VerticalDataset, VerticalDataset), CliError> {
    let source = data::gen_blobs(n, 2 + m_b, seed);
    let (a, b, _) = vertical_split(&source, 2, None)?;
    Ok((a, b))
}

fn demo_cfg(seed: u64, iterations: u64, masking: bool) -> TrainConfig {
    TrainConfig {
        eta: 1.5,
        max_iterations: iterations,
        tolerance: 0.0,
        masking,
        allow_unsafe_dims: true,
        record_history: true,
        seed: Some(seed),
        init: WeightInit::SeededUniform { seed },
        ..TrainConfig::default()
    }
}

fn run_recorded(
    cfg: TrainConfig,
    shard_a: VerticalDataset,
    shard_b: &VerticalDataset,
) -> Result<(ATrainResult, BTrainResult), CliError> {
    let labels = shard_a.labels.clone().expect("generated with labels");
    let a = PartyA::new_serial(cfg.clone(), shard_a.features, labels)?;
    let b = PartyB::new_serial(cfg, shard_b.features.clone())?;
    let (ra, rb, _) = run_duplex(a, b)?;
    Ok((ra, rb))
}

fn residual_demo(args: &AttackArgs) -> Result<u8, CliError> {
    let n = args.n.unwrap_or(5);
    let m_b = args.m.unwrap_or(8);
    if m_b < n {
        return Err(usage(format!(
            "residual recovery needs m >= n, got n={n} m={m_b}"
        )));
    }
    let (shard_a, shard_b) = demo_instance(n, m_b, args.seed)?;
    let labels = shard_a.labels.clone().expect("generated with labels");
    let cfg = demo_cfg(args.seed, args.rounds.unwrap_or(3), true);
    let (ra, rb) = run_recorded(cfg, shard_a, &shard_b)?;

    let last_a = ra.history.last().expect("recorded history");
    let last_b = rb.history.last().expect("recorded history");
    // B's view: its own shard and the unblinded gradient A decrypted for it.
    let recovered = attack_recover_residuals(&shard_b.features, &last_b.gradient_b, n)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let rel = relative_l2_error(&recovered.residuals, &last_a.residuals);
    let decided: Vec<usize> = (0..n)
        .filter(|&i| last_a.residuals[i].abs() > SIGN_EPS)
        .collect();
    let hits = decided
        .iter()
        .filter(|&&i| recovered.labels[i] == Some(labels[i]))
        .count();
    println!("instance: n={n} rows, party B holds m={m_b} features (m >= n)");
    println!("residuals recovered with relative error {rel:.2e}");
    println!("labels recovered: {hits}/{} decidable rows", decided.len());
    if rel > 1e-6 || hits != decided.len() {
        return Err(CliError::Runtime(format!(
            "attack underperformed: error {rel:.2e}, labels {hits}/{}",
            decided.len()
        )));
    }
    Ok(0)
}

fn unmasked_demo(args: &AttackArgs) -> Result<u8, CliError> {
    let n = args.n.unwrap_or(6);
    let m_b = args.m.unwrap_or(3);
    let rounds = args.rounds.unwrap_or(10);
    if (rounds as usize) < n {
        return Err(usage(format!(
            "feature recovery needs at least n={n} rounds, got {rounds}"
        )));
    }
    let masking = args.masking.map(Switch::as_bool).unwrap_or(false);
    let (shard_a, shard_b) = demo_instance(n, m_b, args.seed)?;
    let cfg = demo_cfg(args.seed, rounds, masking);
    let (ra, _) = run_recorded(cfg, shard_a, &shard_b)?;

    // A's view: the residuals it encrypted and the step-5 values it decrypted.
    let residuals: Vec<Vec<f64>> = ra.history.iter().map(|h| h.residuals.clone()).collect();
    let observed: Vec<Vec<f64>> = ra
        .history
        .iter()
        .map(|h| h.masked_gradient_b.clone())
        .collect();
    let recovered = attack_unmasked_gradients(&residuals, &observed, n)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let est = dense_data(&recovered.features);
    let truth = dense_data(&shard_b.features);
    let rel = relative_l2_error(&est, &truth);
    println!(
        "instance: n={n} rows, m={m_b} party-B features, {rounds} rounds, masking {}",
        if masking { "on" } else { "off" }
    );
    println!("feature matrix recovered with relative error {rel:.2e}");
    if masking {
        if rel < 1e-2 {
            return Err(CliError::Runtime(format!(
                "masks failed to hide the features: error {rel:.2e}"
            )));
        }
        println!("attack defeated: the masks bury the gradients (expected)");
    } else {
        if rel > 1e-6 {
            return Err(CliError::Runtime(format!(
                "attack underperformed: error {rel:.2e}"
            )));
        }
        println!("party B's features are fully exposed without masking");
    }
    Ok(0)
}

fn dense_data(features: &vflr_core::data::FeatureMatrix) -> Vec<f64> {
    let mut out = vec![0.0; features.rows() * features.cols()];
    for i in 0..features.rows() {
        features.for_each_in_row(i, |j, x| out[i * features.cols() + j] = x);
    }
    out
}

fn cmd_attack(args: AttackArgs) -> Result<u8, CliError> {
    match args.kind {
        AttackKind::Residuals => residual_demo(&args),
        AttackKind::Unmasked => unmasked_demo(&args),
    }
}
