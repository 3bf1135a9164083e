use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cbt_core::calibration::Calibration;
use cbt_core::dataset::{Dataset, LabeledImage};
use cbt_core::fixtures::{
    build_fixture_model, default_oracle_model, synthetic_dataset, SyntheticSpec,
};
use cbt_core::metrics::{evaluate, format_table};
use cbt_core::{Error, EvalReport, ExitPolicy, MultiExitNet, PolicyRegistry};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, DEFAULT_ALPHAS};

fn content_id(bytes: &[u8]) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(bytes)))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn check_alpha_beta(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < beta && beta <= 1.0) {
        return Err(Error::Config(format!(
            "need 0 < alpha < beta <= 1, got alpha={alpha} beta={beta}"
        ))
        .into());
    }
    Ok(())
}

/// A model and a dataset that fit together, plus their content ids.
struct Inputs {
    net: MultiExitNet,
    images: Vec<LabeledImage>,
    model_id: String,
    dataset_id: String,
    model_name: String,
}

impl Inputs {
    fn load(cfg: &RunConfig) -> Result<Self> {
        let model_path = cfg.model_path()?;
        let model_bytes = read(model_path)?;
        let net = MultiExitNet::from_eenw(&model_bytes)
            .with_context(|| format!("loading {}", model_path.display()))?;
        let data_path = cfg.dataset_path()?;
        let data_bytes = read(data_path)?;
        let data = Dataset::from_eesd(&data_bytes)
            .with_context(|| format!("loading {}", data_path.display()))?;

        let mc = net.config();
        if mc.input_channels != 3 {
            return Err(Error::Config(format!(
                "model expects {} input channels, datasets are RGB",
                mc.input_channels
            ))
            .into());
        }
        if mc.num_classes != data.num_classes {
            return Err(Error::Config(format!(
                "model has {} classes, dataset has {}",
                mc.num_classes, data.num_classes
            ))
            .into());
        }
        data.validate_labels(cfg.ignore_label())?;
        Ok(Self {
            model_name: model_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            net,
            images: data.labeled_images(),
            model_id: content_id(&model_bytes),
            dataset_id: content_id(&data_bytes),
        })
    }

    fn ignore(&self, cfg: &RunConfig) -> Option<usize> {
        cfg.ignore_label().map(usize::from)
    }

    /// The run's resolved config with the ids of everything it read.
    fn provenance(&self, cfg: &RunConfig, extra: Option<(&str, String)>) -> Value {
        let mut inputs = json!({ "model": self.model_id, "dataset": self.dataset_id });
        if let Some((k, v)) = extra {
            inputs[k] = Value::String(v);
        }
        let mut v = serde_json::to_value(cfg.resolved()).expect("run config serializes");
        v["inputs"] = inputs;
        v
    }

    fn evaluate(
        &self,
        cfg: &RunConfig,
        policy: &dyn ExitPolicy,
        policy_file: Option<&Path>,
    ) -> Result<EvalReport> {
        policy.validate(self.net.config().num_classes)?;
        let mut report = evaluate(
            &self.net,
            &self.images,
            policy,
            self.ignore(cfg),
            &self.model_id,
            &self.dataset_id,
        )?;
        let extra = match policy_file {
            Some(p) => Some(("policy_file", content_id(&read(p)?))),
            None => None,
        };
        report.run = self.provenance(cfg, extra);
        Ok(report)
    }
}

fn write_report(report: &EvalReport, json_path: &Path) -> Result<()> {
    write(json_path, report.to_json())?;
    write(&json_path.with_extension("csv"), report.to_csv())
}

/// The file behind a `name:path` policy spec, if the argument is one.
fn policy_file(spec: &str) -> Option<PathBuf> {
    let (_, arg) = spec.split_once(':')?;
    let p = PathBuf::from(arg);
    p.is_file().then_some(p)
}

pub fn generate_fixtures(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.seed.unwrap_or(0);
    let model_config = cfg.model_config.unwrap_or_default();
    let shape = cfg.data_shape.unwrap_or_default();
    let out = cfg.out_or("fixtures");

    let fixture = build_fixture_model(seed, model_config)?;
    let oracle = default_oracle_model()?;
    let data = synthetic_dataset(&SyntheticSpec {
        num_images: shape.num_images,
        height: shape.height,
        width: shape.width,
        num_classes: model_config.num_classes,
        seed,
    })?;
    data.validate_labels(None)?;

    let files = [
        ("fixture.eenw", fixture.to_eenw()),
        ("oracle.eenw", oracle.to_eenw()),
        ("dataset.eesd", data.to_eesd()),
    ];
    let mut ids = serde_json::Map::new();
    for (name, bytes) in &files {
        write(&out.join(name), bytes)?;
        ids.insert(name.to_string(), Value::String(content_id(bytes)));
    }
    let manifest = json!({
        "seed": seed,
        "model_config": model_config,
        "data_shape": shape,
        "files": ids,
    });
    write(
        &out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )
}

pub fn calibrate(cfg: &RunConfig) -> Result<()> {
    let alpha = cfg
        .alpha
        .ok_or_else(|| Error::Config("--alpha is required (flag or config file)".into()))?;
    let beta = cfg.beta();
    check_alpha_beta(alpha, beta)?;
    let inputs = Inputs::load(cfg)?;
    let cal = Calibration::run(&inputs.net, &inputs.images, inputs.ignore(cfg))?;
    let thresholds = cal.thresholds(alpha, beta)?;

    let out = cfg.out_or("thresholds.json");
    write(&out, thresholds.to_json())?;
    let mut diag = cal.diagnostics_json();
    diag["run"] = inputs.provenance(cfg, None);
    write(
        &out.with_extension("diagnostics.json"),
        serde_json::to_string_pretty(&diag)? + "\n",
    )?;
    println!("thresholds: {:?}", thresholds.values());
    Ok(())
}

pub fn evaluate_cmd(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.policy_spec()?;
    let policy = PolicyRegistry::with_builtins().create(spec)?;
    let inputs = Inputs::load(cfg)?;
    let report = inputs.evaluate(cfg, policy.as_ref(), policy_file(spec).as_deref())?;
    write_report(&report, &cfg.out_or("report.json"))?;
    print!(
        "{}",
        format_table(std::slice::from_ref(&report), &inputs.model_name)
    );
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One row per (policy, exit).
pub fn sweep_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from("policy,exit,miou,gflops\n");
    for r in reports {
        for e in &r.exits {
            writeln!(
                s,
                "{},{},{},{}",
                csv_field(&r.policy),
                e.exit,
                e.miou,
                e.gflops
            )
            .unwrap();
        }
    }
    s
}

pub fn sweep(cfg: &RunConfig) -> Result<()> {
    let beta = cfg.beta();
    let mut alphas: Vec<f64> = Vec::new();
    for a in cfg
        .alphas
        .clone()
        .unwrap_or_else(|| DEFAULT_ALPHAS.to_vec())
    {
        check_alpha_beta(a, beta)?;
        if !alphas.contains(&a) {
            alphas.push(a);
        }
    }
    if alphas.is_empty() {
        return Err(Error::Config("sweep needs at least one alpha".into()).into());
    }
    let out = cfg.out_or("sweep");
    let registry = PolicyRegistry::with_builtins();
    let inputs = Inputs::load(cfg)?;

    // Gaps do not depend on alpha, so one dataset pass serves every run.
    let cal = Calibration::run(&inputs.net, &inputs.images, inputs.ignore(cfg))?;
    let mut diag = cal.diagnostics_json();
    diag["run"] = inputs.provenance(cfg, None);
    write(
        &out.join("diagnostics.json"),
        serde_json::to_string_pretty(&diag)? + "\n",
    )?;

    let mut reports = Vec::with_capacity(alphas.len() + 1);
    let baseline = format!("uniform:{beta}");
    let run = RunConfig {
        policy: Some(baseline.clone()),
        ..cfg.clone()
    };
    let report = inputs.evaluate(&run, registry.create(&baseline)?.as_ref(), None)?;
    write_report(&report, &out.join(format!("report_uniform_{beta}.json")))?;
    reports.push(report);

    for alpha in alphas {
        let path = out.join(format!("thresholds_alpha_{alpha}.json"));
        write(&path, cal.thresholds(alpha, beta)?.to_json())?;
        let spec = format!("cbt:{}", path.display());
        let run = RunConfig {
            alpha: Some(alpha),
            policy: Some(spec.clone()),
            ..cfg.clone()
        };
        let report = inputs.evaluate(&run, registry.create(&spec)?.as_ref(), Some(&path))?;
        write_report(&report, &out.join(format!("report_cbt_alpha_{alpha}.json")))?;
        reports.push(report);
    }

    write(&out.join("sweep.csv"), sweep_csv(&reports))?;
    let table = format_table(&reports, &inputs.model_name);
    write(&out.join("table.md"), &table)?;
    print!("{table}");
    Ok(())
}
