//! Scenario-driven commands behind the `trojankey` binary.
//!
//! Every command reads one TOML scenario ([`ScenarioConfig`]) and writes its
//! outputs into the output directory. Each output embeds the effective
//! config, the scenario seed and the SHA-256 of the victim model file, so
//! replaying the embedded config reproduces it byte for byte.

mod config;
mod selftest;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{AttackContext, AttackMode, ScenarioSpec, TrojanKeyResult};
use crate::data::{accuracy, gen_blobs, load_idx, split, train_victim, Dataset};
use crate::eval::{
    lock_model, mapping_sweep, per_class_accuracy, select_live_neurons, targeted_experiment, untargeted_experiment,
    ClassDeltaReport, MappingSweepReport, TriggerDistributionReport,
};
use crate::locking::{KeyVector, PointLockScheme};
use crate::net::{model_hash, read_model, write_model, KeyMode, VictimModel};
use crate::{Error, Result};

pub use config::{
    data_root, AttackSection, BlobsSource, DatasetSection, EvalSection, Experiment, Format, IdxSource, LockSection,
    OutputSection, ScenarioConfig, VictimSection, DATA_DIR_ENV,
};
pub use selftest::{cmd_selftest, Check, SelftestReport};

pub const VICTIM_FILE: &str = "victim.tknn";
pub const METRICS_FILE: &str = "victim_metrics";
pub const RESULT_FILE: &str = "attack_result";
pub const REPORT_FILE: &str = "eval_report";

/// Process exit code for an error: 2 for configuration, parse and I/O
/// problems, 3 for training failure, 4 for attack preconditions.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Training(_) => 3,
        Error::Attack(_) => 4,
        Error::Config(_) | Error::Input(_) | Error::Parse { .. } | Error::Io { .. } => 2,
    }
}

/// Command-line overrides shared by every command.
#[derive(Clone, Debug, Default)]
pub struct Options {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// A loaded scenario with overrides applied.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub config: ScenarioConfig,
    /// Directory of the config file; relative paths in it resolve here.
    pub base: PathBuf,
}

impl Scenario {
    pub fn load(opts: &Options) -> Result<Self> {
        let mut config = ScenarioConfig::load(&opts.config)?;
        if let Some(seed) = opts.seed {
            config.seed = seed;
        }
        config.attack.spec.seed = config.seed;
        if let Some(out) = &opts.out {
            config.output.dir = std::path::absolute(out).map_err(|e| Error::io(out, e))?;
        }
        config.validate()?;
        let base = opts
            .config
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Ok(Scenario { config, base })
    }

    fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base.join(path)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.config.output.dir)
    }

    pub fn model_path(&self) -> PathBuf {
        match &self.config.victim.model {
            Some(p) => self.resolve(p),
            None => self.out_dir().join(VICTIM_FILE),
        }
    }

    /// `(train, test)` for the configured source.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        if let Some(idx) = &self.config.dataset.idx {
            let root = data_root(&self.base);
            let at = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { root.join(p) };
            let train = load_idx(at(&idx.train_images), at(&idx.train_labels))?;
            let test = load_idx(at(&idx.test_images), at(&idx.test_labels))?;
            let classes = train.class_count().max(test.class_count());
            return Ok((with_classes(train, classes)?, with_classes(test, classes)?));
        }
        let b = self.config.dataset.blobs.as_ref().expect("validated dataset source");
        let all = gen_blobs(b.seed, b.classes, b.dim, b.per_class, b.spread)?;
        split(&all, b.test_fraction, b.seed)
    }

    fn victim(&self) -> Result<(VictimModel, String)> {
        let path = self.model_path();
        let model = read_model(&path)?;
        let hash = model_hash(&model);
        Ok((model, hash))
    }

    /// Bind the configured neurons of `model`, calibrating on `train`.
    pub fn lock(&self, model: &VictimModel, train: &Dataset) -> Result<(VictimModel, LockInfo)> {
        let setup = &self.config.lock.setup;
        let neurons = match &self.config.lock.neurons {
            Some(list) => list.clone(),
            None => select_live_neurons(
                model,
                train,
                setup,
                self.config.lock.neuron_count.unwrap_or(1),
                self.config.seed,
            )?,
        };
        let locked = lock_model(model, train, setup, &neurons, self.config.seed)?;
        let scheme = locked.scheme().expect("one binding attached").clone();
        Ok((locked, LockInfo { neurons, scheme }))
    }
}

fn with_classes(data: Dataset, classes: usize) -> Result<Dataset> {
    if data.class_count() == classes {
        return Ok(data);
    }
    Dataset::new(data.features().clone(), data.labels().to_vec(), classes)
}

/// Where the lock ended up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LockInfo {
    pub neurons: Vec<usize>,
    pub scheme: PointLockScheme,
}

/// Wrapper shared by every output document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub kind: String,
    pub seed: u64,
    pub model_hash: String,
    pub config: ScenarioConfig,
    #[serde(flatten)]
    pub payload: T,
}

fn write_outputs<T: Serialize>(
    scenario: &Scenario,
    stem: &str,
    envelope: &Envelope<T>,
    text: impl Fn() -> String,
) -> Result<Vec<PathBuf>> {
    let dir = scenario.out_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut written = Vec::new();
    for format in &scenario.config.output.formats {
        let (path, body) = match format {
            Format::Json => {
                let mut body = serde_json::to_string_pretty(envelope)
                    .map_err(|e| Error::Input(format!("cannot serialise {stem}: {e}")))?;
                body.push('\n');
                (dir.join(format!("{stem}.json")), body)
            }
            Format::Text => {
                let config = toml::to_string(&envelope.config)
                    .map_err(|e| Error::Input(format!("cannot serialise config: {e}")))?;
                let body = format!(
                    "{}\nseed {}\nmodel sha256 {}\n\n{}\n[config]\n{}",
                    envelope.kind,
                    envelope.seed,
                    envelope.model_hash,
                    text(),
                    config
                );
                (dir.join(format!("{stem}.txt")), body)
            }
        };
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VictimMetrics {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub per_class_test_accuracy: Vec<Option<f64>>,
}

/// Train the victim, write the model file and its accuracy summary.
pub fn cmd_victim_train(opts: &Options) -> Result<Envelope<VictimMetrics>> {
    let scenario = Scenario::load(opts)?;
    let (train, test) = scenario.datasets()?;
    let model = train_victim(&train, &scenario.config.victim.train)?;
    let path = scenario.out_dir().join(VICTIM_FILE);
    let dir = scenario.out_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_model(&model, &path)?;
    let metrics = VictimMetrics {
        train_accuracy: accuracy(&model, &train, &KeyMode::Unlocked)?,
        test_accuracy: accuracy(&model, &test, &KeyMode::Unlocked)?,
        per_class_test_accuracy: per_class_accuracy(&model, &KeyMode::Unlocked, &test)?,
    };
    let envelope = Envelope {
        kind: "victim-train".into(),
        seed: scenario.config.seed,
        model_hash: model_hash(&model),
        config: scenario.config.clone(),
        payload: metrics,
    };
    write_outputs(&scenario, METRICS_FILE, &envelope, || {
        let m = &envelope.payload;
        let mut t = format!("train accuracy {}\ntest accuracy  {}\n", m.train_accuracy, m.test_accuracy);
        for (c, a) in m.per_class_test_accuracy.iter().enumerate() {
            t += &format!("class {c:>3}  {}\n", a.map_or("undef".to_string(), |v| v.to_string()));
        }
        t
    })?;
    Ok(envelope)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackOutput {
    pub lock: LockInfo,
    pub result: TrojanKeyResult,
    /// Present when refinement ran: the hill-climbed key and its loss.
    pub refined: Option<(KeyVector, f64)>,
    /// Present when brute force ran: the exhaustive optimum and its loss.
    pub brute_force: Option<(KeyVector, f64)>,
}

/// Lock the victim, search for a trojan key and write the result.
pub fn cmd_attack(opts: &Options) -> Result<Envelope<AttackOutput>> {
    let scenario = Scenario::load(opts)?;
    let cfg = &scenario.config;
    let (model, hash) = scenario.victim()?;
    let (train, _) = scenario.datasets()?;
    let (locked, lock) = scenario.lock(&model, &train)?;
    let spec = cfg.scenario_spec();
    if cfg.attack.brute_force && lock.scheme.key_width_bits > cfg.attack.brute_force_limit {
        return Err(Error::Config(format!(
            "refusing brute force over 2^{} keys: key width {} exceeds brute_force_limit {}",
            lock.scheme.key_width_bits, lock.scheme.key_width_bits, cfg.attack.brute_force_limit
        )));
    }
    let ctx = AttackContext::new(&locked, &train, &spec)?;
    let mut result = if cfg.attack.zeroth_order {
        ctx.zeroth_order_search()?
    } else {
        ctx.search()?
    };
    let refined = match cfg.attack.refine_radius {
        Some(radius) => {
            let key = ctx.refine_discrete(result.trojan_key, radius)?;
            Some((key, ctx.hard_loss(key.code)))
        }
        None => None,
    };
    let brute_force = if cfg.attack.brute_force {
        let limit = cfg.attack.brute_force_limit;
        result.brute_force_rank = Some(ctx.brute_force_rank(result.trojan_key, limit)?);
        Some(ctx.brute_force_best_key(limit)?)
    } else {
        None
    };
    let envelope = Envelope {
        kind: "attack".into(),
        seed: cfg.seed,
        model_hash: hash,
        config: cfg.clone(),
        payload: AttackOutput {
            lock,
            result,
            refined,
            brute_force,
        },
    };
    write_outputs(&scenario, RESULT_FILE, &envelope, || attack_text(&envelope.payload))?;
    Ok(envelope)
}

fn attack_text(out: &AttackOutput) -> String {
    let r = &out.result;
    let mut t = format!(
        "neurons {:?}\ncorrect key {}\nquant range [{}, {}]\ntrojan key {}\nloss {}\ninit loss {}\nfinal kappa {}\nkeys evaluated {}\n",
        out.lock.neurons,
        out.lock.scheme.correct_key,
        out.lock.scheme.quant_lo,
        out.lock.scheme.quant_hi,
        r.trojan_key.code,
        r.loss,
        r.init_loss,
        r.final_kappa,
        r.keys_evaluated
    );
    if let Some(rank) = r.brute_force_rank {
        t += &format!("brute force rank {rank}\n");
    }
    if let Some((k, l)) = out.brute_force {
        t += &format!("brute force best {} loss {l}\n", k.code);
    }
    if let Some((k, l)) = out.refined {
        t += &format!("refined {} loss {l}\n", k.code);
    }
    t += "\nstep  best loss\n";
    for (step, loss) in &r.loss_trace {
        t += &format!("{step:>6}  {loss}\n");
    }
    t
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub untargeted: Option<ClassDeltaReport>,
    pub targeted: Option<TriggerDistributionReport>,
    pub sweep: Option<MappingSweepReport>,
}

/// Evaluate a stored attack result on the test split.
pub fn cmd_eval(opts: &Options, result_file: Option<&Path>) -> Result<Envelope<EvalOutput>> {
    let scenario = Scenario::load(opts)?;
    let cfg = &scenario.config;
    let result_path = match result_file {
        Some(p) => p.to_path_buf(),
        None => scenario.out_dir().join(format!("{RESULT_FILE}.json")),
    };
    let text = std::fs::read_to_string(&result_path).map_err(|e| Error::io(&result_path, e))?;
    let stored: Envelope<AttackOutput> = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: not an attack result: {e}", result_path.display())))?;
    let (model, hash) = scenario.victim()?;
    if stored.model_hash != hash {
        return Err(Error::Config(format!(
            "{} was produced for model {}, but the configured model is {hash}",
            result_path.display(),
            stored.model_hash
        )));
    }
    let (train, test) = scenario.datasets()?;
    let (locked, lock) = scenario.lock(&model, &train)?;
    if lock != stored.payload.lock {
        return Err(Error::Config(
            "the configured lock differs from the one the attack result was produced with".into(),
        ));
    }
    let result = &stored.payload.result;
    let mut out = EvalOutput::default();
    for experiment in &cfg.eval.experiments {
        match experiment {
            Experiment::Untargeted => out.untargeted = Some(untargeted_experiment(&locked, &test, result)?),
            Experiment::Targeted => out.targeted = Some(targeted_experiment(&locked, &test, result)?),
            Experiment::Sweep => {
                out.sweep = Some(mapping_sweep(
                    &model,
                    &train,
                    &test,
                    &cfg.lock.setup,
                    &cfg.eval.sweep_m,
                    &ScenarioSpec {
                        mode: AttackMode::Untargeted,
                        ..result.spec.clone()
                    },
                    cfg.seed,
                )?)
            }
        }
    }
    let envelope = Envelope {
        kind: "eval".into(),
        seed: cfg.seed,
        model_hash: hash,
        config: cfg.clone(),
        payload: out,
    };
    write_outputs(&scenario, REPORT_FILE, &envelope, || {
        let p = &envelope.payload;
        [
            p.untargeted.as_ref().map(ClassDeltaReport::to_text),
            p.targeted.as_ref().map(TriggerDistributionReport::to_text),
            p.sweep.as_ref().map(MappingSweepReport::to_text),
        ]
        .into_iter()
        .flatten()
        .collect::<Vec<_>>()
        .join("\n")
    })?;
    Ok(envelope)
}
