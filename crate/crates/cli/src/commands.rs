use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use distok::codec::{read_text, write_text};
use distok::config::{digest, RunConfig};
use distok::lab::{
    diversity_score, eval_distributions, evaluate_suite, fuse_pair, generate_from_distribution, label_token,
    run_ablation, sample_unconditional, EvalReport, SamplerKind, EVAL_SUITE_SIZE,
};
use distok::model::DistokModel;
use distok::pool::{load_pool, save_pool, ConceptPool, POOL_EXTENSION};
use distok::trainer::{metrics_line, run_training_with};
use distok::verify::{all_passed, pipeline_checks, primitive_checks, worst, NamedCheck, SuiteOptions};
use distok::world::{ClassDistribution, TokenVector, World};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::CliError;
use crate::manifest::RunManifest;
use crate::names::Names;

pub const WORLD_FILE: &str = "world.json";
pub const MODEL_FILE: &str = "model.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPLAY_FILE: &str = "replay.json";

type Result<T> = std::result::Result<T, CliError>;

pub fn pool_file() -> String {
    format!("concepts.{POOL_EXTENSION}")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> distok::Error + '_ {
    move |source| distok::Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value).map_err(distok::Error::from)?;
    text.push('\n');
    Ok(text)
}

/// Writes JSON to `out` if given, otherwise to stdout.
fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = to_json(value)?;
    match out {
        Some(path) => write_text(path, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    Ok(())
}

/// The config as written, for digests, and the config with its world file
/// resolved against the config's directory.
fn load_config(path: &Path) -> Result<(RunConfig, RunConfig)> {
    let raw = RunConfig::from_json(&read_text(path)?)?;
    Ok((raw, RunConfig::load(path)?))
}

pub fn init_world(config: &Path, out: &Path) -> Result<()> {
    let start = Instant::now();
    let (raw, cfg) = load_config(config)?;
    let world = cfg.world()?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    world.save(out)?;
    eprintln!(
        "world: {} known concepts, token dim {}",
        world.num_known(),
        world.token_dim()
    );
    let mut manifest = RunManifest::new("init-world", digest(&raw)?);
    manifest.artifact("world", out);
    emit(&manifest.finish(start), None)
}

pub fn train(config: &Path, out_dir: &Path) -> Result<()> {
    let start = Instant::now();
    let (raw, cfg) = load_config(config)?;
    let world = cfg.world()?;
    create_dir(out_dir)?;
    let paths = |name: &str| out_dir.join(name);
    let (world_path, config_path, metrics_path) = (paths(WORLD_FILE), paths(CONFIG_FILE), paths(METRICS_FILE));
    world.save(&world_path)?;
    write_text(&config_path, &raw.to_json()?)?;

    let file = fs::File::create(&metrics_path).map_err(io_err(&metrics_path))?;
    let mut metrics = BufWriter::new(file);
    let outcome = run_training_with(&world, &cfg.model, &cfg.train, |record| {
        writeln!(metrics, "{}", metrics_line(record)?).map_err(io_err(&metrics_path))
    });
    metrics.flush().map_err(io_err(&metrics_path))?;
    let outcome = match outcome {
        Ok(o) => o,
        Err(distok::Error::Diverged { step, reason, replay }) => {
            let replay_path = paths(REPLAY_FILE);
            let bundle = replay.map_or_else(|| serde_json::json!({ "step": step, "reason": reason }), |b| *b);
            write_text(&replay_path, &to_json(&bundle)?)?;
            return Err(CliError::Diverged {
                source: distok::Error::Diverged {
                    step,
                    reason,
                    replay: None,
                },
                replay: replay_path,
            });
        }
        Err(e) => return Err(e.into()),
    };

    let model_path = paths(MODEL_FILE);
    let pool_path = paths(&pool_file());
    outcome.model.save(&model_path)?;
    save_pool(&outcome.pool, &pool_path)?;
    match outcome.log.last() {
        Some(last) => eprintln!(
            "trained {} steps: total loss {:.5} (mix {}, consistency {}, reg {:.5}), {} novel concepts",
            outcome.log.len(),
            last.loss.total,
            last.loss.mix.map_or("-".into(), |v| format!("{v:.5}")),
            last.loss.cst.map_or("-".into(), |v| format!("{v:.5}")),
            last.loss.reg,
            outcome.pool.novel_count()
        ),
        None => eprintln!("no training steps; checkpoint holds the initialization"),
    }

    let mut manifest = RunManifest::new("train", digest(&raw)?);
    manifest.artifact("world", &world_path);
    manifest.artifact("model", &model_path);
    manifest.artifact("pool", &pool_path);
    manifest.artifact("metrics", &metrics_path);
    manifest.artifact("config", &config_path);
    let manifest_path = paths(MANIFEST_FILE);
    manifest.artifact("manifest", &manifest_path);
    let manifest = manifest.finish(start);
    write_text(&manifest_path, &to_json(&manifest)?)?;
    emit(&manifest, None)
}

/// Artifacts written by `train`.
pub struct ModelDir {
    pub world: World,
    pub model: DistokModel,
    pub pool: ConceptPool,
    pub config: RunConfig,
    pub digest: String,
}

impl ModelDir {
    pub fn load(dir: &Path) -> Result<Self> {
        let world = World::load(&dir.join(WORLD_FILE))?;
        let model = DistokModel::load(&dir.join(MODEL_FILE))?;
        let (pool, warnings) = load_pool(&dir.join(pool_file()))?;
        for w in warnings {
            log::warn!("{w}");
        }
        pool.check_against(&world)?;
        let config = RunConfig::from_json(&read_text(&dir.join(CONFIG_FILE))?)?;
        let digest = digest(&config)?;
        Ok(Self {
            world,
            model,
            pool,
            config,
            digest,
        })
    }
}

#[derive(Serialize)]
struct Mass {
    concept: String,
    probability: f64,
}

#[derive(Serialize)]
struct Generated {
    token: Vec<f64>,
    argmax: String,
    distribution: Vec<Mass>,
}

fn describe(dir: &ModelDir, names: &Names, token: &TokenVector) -> Result<Generated> {
    let label = label_token(&dir.world, token)?;
    let dense = label.to_dense(dir.world.num_known())?;
    Ok(Generated {
        token: token.as_slice().to_vec(),
        argmax: names.name(label.argmax()).to_string(),
        distribution: dense
            .into_iter()
            .enumerate()
            .map(|(id, probability)| Mass {
                concept: names.name(id).to_string(),
                probability,
            })
            .collect(),
    })
}

#[derive(Serialize)]
struct FuseOutput {
    pair: [String; 2],
    #[serde(flatten)]
    generated: Generated,
}

pub fn fuse(model_dir: &Path, pair: &str, aliases: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let dir = ModelDir::load(model_dir)?;
    let names = Names::load(&dir.pool, aliases)?;
    let (a, b) = names.parse_pair(pair)?;
    let token = fuse_pair(&dir.model, &dir.pool, a, b)?;
    let generated = describe(&dir, &names, &token)?;
    eprintln!("{} + {} -> mostly {}", names.name(a), names.name(b), generated.argmax);
    emit(
        &FuseOutput {
            pair: [names.name(a).to_string(), names.name(b).to_string()],
            generated,
        },
        out,
    )
}

#[derive(Serialize)]
struct GenOutput {
    input: String,
    #[serde(flatten)]
    generated: Generated,
}

pub fn gen_dist(model_dir: &Path, dist: &str, aliases: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let dir = ModelDir::load(model_dir)?;
    let names = Names::load(&dir.pool, aliases)?;
    let p = names.parse_distribution(dist)?;
    let token = generate_from_distribution(&dir.world, &dir.model, &p)?;
    let generated = describe(&dir, &names, &token)?;
    eprintln!("{} -> mostly {}", names.format_distribution(&p), generated.argmax);
    emit(
        &GenOutput {
            input: names.format_distribution(&p),
            generated,
        },
        out,
    )
}

#[derive(Serialize)]
struct SampleOutput {
    kind: SamplerKind,
    seed: u64,
    clip_rate: f64,
    diversity: Option<f64>,
    samples: Vec<Generated>,
}

pub fn sample(model_dir: &Path, kind: &str, count: usize, seed: Option<u64>, out: Option<&Path>) -> Result<()> {
    let kind: SamplerKind = kind.parse()?;
    let dir = ModelDir::load(model_dir)?;
    let names = Names::load(&dir.pool, None)?;
    let seed = seed.unwrap_or(dir.config.train.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let drawn = sample_unconditional(&dir.model, kind, count, &mut rng)?;
    let diversity = if drawn.tokens.len() >= 2 {
        Some(diversity_score(&drawn.tokens)?)
    } else {
        None
    };
    let samples = drawn
        .tokens
        .iter()
        .map(|t| describe(&dir, &names, t))
        .collect::<Result<Vec<_>>>()?;
    eprintln!(
        "{count} {kind:?} samples, clip rate {:.4}, diversity {}",
        drawn.clip_rate,
        diversity.map_or("-".into(), |d| format!("{d:.4}"))
    );
    emit(
        &SampleOutput {
            kind,
            seed,
            clip_rate: drawn.clip_rate,
            diversity,
            samples,
        },
        out,
    )
}

/// `builtin` or a file with one `name:weight,...` distribution per line.
fn load_suite(suite: &str, dir: &ModelDir, names: &Names) -> Result<Vec<ClassDistribution>> {
    if suite == "builtin" {
        return Ok(eval_distributions(
            dir.world.num_known(),
            EVAL_SUITE_SIZE,
            dir.config.train.seed,
        )?);
    }
    let text = read_text(Path::new(suite))?;
    let suite: Vec<ClassDistribution> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| names.parse_distribution(l))
        .collect::<Result<_>>()?;
    if suite.is_empty() {
        return Err(CliError::Usage("suite file has no distributions".into()));
    }
    Ok(suite)
}

pub fn eval_kl(model_dir: &Path, suite: &str, aliases: Option<&Path>, out_dir: &Path) -> Result<()> {
    let start = Instant::now();
    let dir = ModelDir::load(model_dir)?;
    let names = Names::load(&dir.pool, aliases)?;
    let dists = load_suite(suite, &dir, &names)?;
    let kl = evaluate_suite(&dir.world, &dir.model, &dists)?;
    let report = EvalReport::new(
        kl.clone(),
        vec![dir.config.train.seed],
        BTreeMap::from([("run".to_string(), dir.digest.clone())]),
    );
    eprintln!(
        "KL over {} distributions: mean {:.5}, median {:.5}, std {:.5}",
        kl.len(),
        report.mean,
        report.median,
        report.std
    );
    create_dir(out_dir)?;
    let json_path = out_dir.join("eval.json");
    let csv_path = out_dir.join("eval.csv");
    write_text(&json_path, &to_json(&report)?)?;
    let mut csv = String::from("index,distribution,kl\n");
    for (i, (p, v)) in dists.iter().zip(&kl).enumerate() {
        csv.push_str(&format!("{i},\"{}\",{v:e}\n", names.format_distribution(p)));
    }
    write_text(&csv_path, &csv)?;
    let mut manifest = RunManifest::new("eval-kl", dir.digest);
    manifest.artifact("report", &json_path);
    manifest.artifact("csv", &csv_path);
    emit(&manifest.finish(start), None)
}

pub fn ablate(config: &Path, seeds: &[u64], out_dir: &Path) -> Result<()> {
    let start = Instant::now();
    let (raw, cfg) = load_config(config)?;
    let world = cfg.world()?;
    let report = run_ablation(&world, &cfg.model, &cfg.train, seeds)?;
    for r in &report.rows {
        eprintln!(
            "seed {}: KL with consistency {:.5}, without {:.5}",
            r.seed, r.kl_full, r.kl_no_cst
        );
    }
    eprintln!(
        "paired means: with consistency {:.5}, without {:.5}, difference {:+.5}; {}/{} seeds favour consistency",
        report.full.mean,
        report.no_cst.mean,
        report.mean_diff,
        report.seeds_favouring_full,
        report.rows.len()
    );
    create_dir(out_dir)?;
    let json_path = out_dir.join("ablation.json");
    let csv_path = out_dir.join("ablation.csv");
    write_text(&json_path, &to_json(&report)?)?;
    report.write_csv(&csv_path)?;
    let mut manifest = RunManifest::new("ablate", digest(&raw)?);
    manifest.artifact("report", &json_path);
    manifest.artifact("csv", &csv_path);
    emit(&manifest.finish(start), None)
}

#[derive(Serialize)]
struct GradCheckOutput<'a> {
    passed: bool,
    pipeline: &'a [NamedCheck],
    primitives: &'a [NamedCheck],
}

pub fn gradcheck(config: &Path, fault_scale: Option<f64>) -> Result<()> {
    let (_, cfg) = load_config(config)?;
    let world = cfg.world()?;
    let model = DistokModel::new(cfg.model.clone())?;
    let opts = SuiteOptions { fault_scale };
    let pipeline = pipeline_checks(&world, &model, cfg.train.seed, opts)?;
    let primitives = primitive_checks(cfg.train.seed, opts)?;
    let passed = all_passed(&pipeline) && all_passed(&primitives);
    for c in pipeline.iter().chain(&primitives) {
        eprintln!(
            "{} {}: max relative error {:.3e} over {} parameters",
            if c.report.passed { "ok  " } else { "FAIL" },
            c.name,
            c.report.max_rel_error,
            c.report.checked
        );
    }
    emit(
        &GradCheckOutput {
            passed,
            pipeline: &pipeline,
            primitives: &primitives,
        },
        None,
    )?;
    if passed {
        return Ok(());
    }
    let failing: Vec<NamedCheck> = pipeline
        .into_iter()
        .chain(primitives)
        .filter(|c| !c.report.passed)
        .collect();
    let w = worst(&failing).expect("at least one failing check");
    Err(CliError::GradCheck(format!(
        "worst is {} at parameter {}: analytic {:e}, numeric {:e}, relative error {:.3e} (tolerance {:e})",
        w.name,
        w.report.worst_index.map_or("-".into(), |i| i.to_string()),
        w.report.worst_analytic,
        w.report.worst_numeric,
        w.report.max_rel_error,
        w.report.tolerance
    )))
}

pub fn default_world_path(out_dir: &Path) -> PathBuf {
    out_dir.join(WORLD_FILE)
}
