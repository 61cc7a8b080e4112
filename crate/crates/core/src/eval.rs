//! Evaluation protocols: fixed-grid sweeps, bimodal levels, random
//! hyper-parameter attacks, local attacks, and feature export.
//!
//! All attacks at evaluation time are white-box against the evaluated
//! model: FGSM-family perturbations use the true label and that model's
//! own gradients. Sweep points and samples are independent, so evaluation
//! parallelizes over samples with per-sample random streams; accuracies
//! are identical for any thread count.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attack::{
    apply_attack, fgsm_attack, gn_attack, AttackFamily, AttackSpec, LocalAxis, FGSM_GRID, GN_GRID,
};
use crate::config::{emit_kv, parse_kv};
use crate::data::CsiDataset;
use crate::error::{Error, Result};
use crate::model::HarModel;

/// Accuracy matrix for one attack family: one entry per grid setting plus
/// their arithmetic mean.
#[derive(Debug, Clone)]
pub struct SweepReport {
    pub family: AttackFamily,
    pub defense_label: String,
    /// Column labels, e.g. the swept weight values or `level N`.
    pub settings: Vec<String>,
    /// Full per-setting specs, sufficient to replay the sweep.
    pub specs: Vec<AttackSpec>,
    /// Fraction correct per setting, aligned with `settings`.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub seed: u64,
    pub runtime_secs: f64,
}

fn arithmetic_mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn pct(v: f64) -> String {
    format!("{:.1}", v * 100.0)
}

impl SweepReport {
    /// Table-style CSV: `Method,<settings...>,Mean` with percentages.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("Method");
        for s in &self.settings {
            out.push(',');
            out.push_str(s);
        }
        out.push_str(",Mean\n");
        out.push_str(&self.defense_label);
        for a in &self.accuracies {
            out.push(',');
            out.push_str(&pct(*a));
        }
        out.push(',');
        out.push_str(&pct(self.mean));
        out.push('\n');
        out
    }

    /// Machine-readable sidecar with full precision, specs, and seed.
    pub fn to_sidecar(&self) -> String {
        let mut pairs: Vec<(String, String)> = vec![
            ("kind".into(), "sweep".into()),
            ("family".into(), self.family.name().into()),
            ("defense".into(), self.defense_label.clone()),
            ("seed".into(), self.seed.to_string()),
            ("settings".into(), self.settings.join(";")),
        ];
        for (i, spec) in self.specs.iter().enumerate() {
            for (k, v) in parse_kv(&spec.to_kv()).expect("spec kv is well-formed") {
                pairs.push((format!("spec{i}.{k}"), v));
            }
        }
        for (i, a) in self.accuracies.iter().enumerate() {
            pairs.push((format!("acc{i}"), format!("{a}")));
        }
        pairs.push(("mean".into(), format!("{}", self.mean)));
        emit_kv(pairs.iter().map(|(k, v)| (k.as_str(), v.clone())))
    }
}

/// Accuracy of the model on unperturbed data.
pub fn evaluate_clean(model: &HarModel, test_set: &CsiDataset) -> Result<f64> {
    if test_set.is_empty() {
        return Err(Error::Config("empty test set".into()));
    }
    let correct: usize = test_set
        .samples
        .par_iter()
        .map(|sample| {
            let pred = model.predict(&sample.values)?;
            Ok(usize::from(pred[0] == sample.label))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(correct as f64 / test_set.len() as f64)
}

/// Perturb every test sample per the spec, classify, and return the
/// fraction correct. The model and dataset are left untouched.
pub fn evaluate_under_attack(
    model: &HarModel,
    test_set: &CsiDataset,
    spec: &AttackSpec,
) -> Result<f64> {
    if test_set.is_empty() {
        return Err(Error::Config("empty test set".into()));
    }
    let correct: usize = test_set
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            let adv = apply_attack(spec, &sample.values, sample.label, Some(model), i as u64)?;
            let pred = model.predict(&adv)?;
            Ok(usize::from(pred[0] == sample.label))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(correct as f64 / test_set.len() as f64)
}

fn specs_for_grid(family: AttackFamily, grid: &[f64], seed: u64) -> Result<Vec<(String, AttackSpec)>> {
    match family {
        AttackFamily::Gn => Ok(grid
            .iter()
            .map(|&tau| (format!("{tau}"), AttackSpec::gn(tau, seed)))
            .collect()),
        AttackFamily::Fgsm => Ok(grid
            .iter()
            .map(|&eps| {
                let mut s = AttackSpec::fgsm(eps);
                s.rng_seed = seed;
                (format!("{eps}"), s)
            })
            .collect()),
        AttackFamily::Bimodal => grid
            .iter()
            .map(|&level| {
                let level = level as usize;
                Ok((
                    format!("level {level}"),
                    AttackSpec::bimodal_level(level, seed)?,
                ))
            })
            .collect(),
        AttackFamily::Antenna | AttackFamily::Subcarrier => {
            let axis = if family == AttackFamily::Antenna {
                LocalAxis::Antenna
            } else {
                LocalAxis::Subcarrier
            };
            Ok(grid
                .iter()
                .map(|&eps| (format!("{eps}"), AttackSpec::local(axis, eps, None, seed)))
                .collect())
        }
    }
}

/// Default grid for a family: the GN weights, the FGSM weights, or the
/// bimodal level indices.
pub fn default_grid(family: AttackFamily) -> Vec<f64> {
    match family {
        AttackFamily::Gn => GN_GRID.to_vec(),
        AttackFamily::Fgsm | AttackFamily::Antenna | AttackFamily::Subcarrier => {
            FGSM_GRID.to_vec()
        }
        AttackFamily::Bimodal => (0..7).map(|i| i as f64).collect(),
    }
}

/// Evaluate one attack family over a grid of settings.
pub fn run_sweep(
    model: &HarModel,
    test_set: &CsiDataset,
    family: AttackFamily,
    grid: Option<&[f64]>,
    defense_label: &str,
    seed: u64,
) -> Result<SweepReport> {
    let grid: Vec<f64> = match grid {
        Some(g) if !g.is_empty() => g.to_vec(),
        Some(_) => return Err(Error::Config("empty sweep grid".into())),
        None => default_grid(family),
    };
    let start = Instant::now();
    let labeled_specs = specs_for_grid(family, &grid, seed)?;
    let mut settings = Vec::new();
    let mut specs = Vec::new();
    let mut accuracies = Vec::new();
    for (label, spec) in labeled_specs {
        accuracies.push(evaluate_under_attack(model, test_set, &spec)?);
        settings.push(label);
        specs.push(spec);
    }
    let mean = arithmetic_mean(&accuracies);
    Ok(SweepReport {
        family,
        defense_label: defense_label.to_string(),
        settings,
        specs,
        accuracies,
        mean,
        seed,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

/// Local-attack sweep over an epsilon grid, with per-sample random targets
/// unless a fixed index is given.
pub fn run_local_attack_eval(
    model: &HarModel,
    test_set: &CsiDataset,
    axis: LocalAxis,
    grid: Option<&[f64]>,
    target_index: Option<usize>,
    defense_label: &str,
    seed: u64,
) -> Result<SweepReport> {
    let grid: Vec<f64> = match grid {
        Some(g) if !g.is_empty() => g.to_vec(),
        Some(_) => return Err(Error::Config("empty sweep grid".into())),
        None => FGSM_GRID.to_vec(),
    };
    let family = match axis {
        LocalAxis::Antenna => AttackFamily::Antenna,
        LocalAxis::Subcarrier => AttackFamily::Subcarrier,
    };
    let start = Instant::now();
    let mut settings = Vec::new();
    let mut specs = Vec::new();
    let mut accuracies = Vec::new();
    for &eps in &grid {
        let spec = AttackSpec::local(axis, eps, target_index, seed);
        accuracies.push(evaluate_under_attack(model, test_set, &spec)?);
        settings.push(format!("{eps}"));
        specs.push(spec);
    }
    let mean = arithmetic_mean(&accuracies);
    Ok(SweepReport {
        family,
        defense_label: defense_label.to_string(),
        settings,
        specs,
        accuracies,
        mean,
        seed,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

/// Re-run the sweep recorded in a sidecar and check it reproduces the
/// stored accuracies exactly. Returns the recomputed report.
pub fn replay_sweep(
    model: &HarModel,
    test_set: &CsiDataset,
    sidecar: &str,
) -> Result<SweepReport> {
    let map = parse_kv(sidecar)?;
    if map.get("kind").map(String::as_str) != Some("sweep") {
        return Err(Error::Config("sidecar is not a sweep record".into()));
    }
    let family = AttackFamily::from_name(
        map.get("family")
            .ok_or_else(|| Error::Config("sidecar missing family".into()))?,
    )?;
    let defense = map.get("defense").cloned().unwrap_or_default();
    let seed: u64 = map
        .get("seed")
        .and_then(|s| s.parse().ok())
        .unwrap_or_default();
    let settings: Vec<String> = map
        .get("settings")
        .map(|s| s.split(';').map(str::to_string).collect())
        .unwrap_or_default();

    let mut specs = Vec::new();
    let mut stored = Vec::new();
    for i in 0.. {
        let prefix = format!("spec{i}.");
        let sub: BTreeMap<String, String> = map
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(&prefix)
                    .map(|suffix| (suffix.to_string(), v.clone()))
            })
            .collect();
        if sub.is_empty() {
            break;
        }
        let text = emit_kv(sub.iter().map(|(k, v)| (k.as_str(), v.clone())));
        specs.push(AttackSpec::from_kv(&text)?);
        let acc: f64 = map
            .get(&format!("acc{i}"))
            .ok_or_else(|| Error::Config(format!("sidecar missing acc{i}")))?
            .parse()
            .map_err(|_| Error::Config(format!("sidecar acc{i} unparsable")))?;
        stored.push(acc);
    }
    if specs.is_empty() {
        return Err(Error::Config("sidecar has no attack specs".into()));
    }

    let start = Instant::now();
    let mut accuracies = Vec::new();
    for (spec, &expected) in specs.iter().zip(&stored) {
        let acc = evaluate_under_attack(model, test_set, spec)?;
        if acc != expected {
            return Err(Error::contract(
                "replay_sweep",
                format!("replayed accuracy {acc} differs from recorded {expected}"),
            ));
        }
        accuracies.push(acc);
    }
    let mean = arithmetic_mean(&accuracies);
    Ok(SweepReport {
        family,
        defense_label: defense,
        settings,
        specs,
        accuracies,
        mean,
        seed,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

/// Per-run accuracies under the random-hyper-parameter protocol.
#[derive(Debug, Clone)]
pub struct RandomAttackReport {
    pub family: AttackFamily,
    pub defense_label: String,
    pub runs: Vec<f64>,
    pub mean: f64,
    pub seed: u64,
}

impl RandomAttackReport {
    /// Table-style CSV: `Method,Run 1..Run N,Mean`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("Method");
        for i in 1..=self.runs.len() {
            out.push_str(&format!(",Run {i}"));
        }
        out.push_str(",Mean\n");
        out.push_str(&self.defense_label);
        for r in &self.runs {
            out.push(',');
            out.push_str(&pct(*r));
        }
        out.push(',');
        out.push_str(&pct(self.mean));
        out.push('\n');
        out
    }
}

/// Random-attack evaluation: for each run, every sample is attacked with
/// fresh `tau ~ U(0,2)` and/or `epsilon ~ U(0,0.3)` drawn per application.
pub fn run_random_attack_eval(
    model: &HarModel,
    test_set: &CsiDataset,
    family: AttackFamily,
    runs: usize,
    defense_label: &str,
    seed: u64,
) -> Result<RandomAttackReport> {
    if runs == 0 {
        return Err(Error::Config("need at least one run".into()));
    }
    if test_set.is_empty() {
        return Err(Error::Config("empty test set".into()));
    }
    let mut run_accuracies = Vec::with_capacity(runs);
    for run in 0..runs {
        let correct: usize = test_set
            .samples
            .par_iter()
            .enumerate()
            .map(|(i, sample)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(((run as u64) << 32) | i as u64);
                let adv = random_attack_sample(model, &sample.values, sample.label, family, &mut rng)?;
                let pred = model.predict(&adv)?;
                Ok(usize::from(pred[0] == sample.label))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum();
        run_accuracies.push(correct as f64 / test_set.len() as f64);
    }
    let mean = arithmetic_mean(&run_accuracies);
    Ok(RandomAttackReport {
        family,
        defense_label: defense_label.to_string(),
        runs: run_accuracies,
        mean,
        seed,
    })
}

fn random_attack_sample(
    model: &HarModel,
    x: &crate::tensor::Tensor,
    label: usize,
    family: AttackFamily,
    rng: &mut ChaCha8Rng,
) -> Result<crate::tensor::Tensor> {
    match family {
        AttackFamily::Gn => {
            let tau = rng.gen_range(0.0..2.0);
            Ok(gn_attack(x, tau, rng))
        }
        AttackFamily::Fgsm => {
            let eps = rng.gen_range(0.0..0.3);
            fgsm_attack(x, label, model, eps)
        }
        AttackFamily::Bimodal => {
            let tau = rng.gen_range(0.0..2.0);
            let eps = rng.gen_range(0.0..0.3);
            let adv = fgsm_attack(x, label, model, eps)?;
            Ok(gn_attack(&adv, tau, rng))
        }
        other => Err(Error::Config(format!(
            "random protocol is defined for gn/fgsm/bimodal, not {}",
            other.name()
        ))),
    }
}

/// Write penultimate-layer activations plus labels as CSV
/// (`f0..f{W-1},label`).
pub fn export_features(model: &HarModel, dataset: &CsiDataset, path: &Path) -> Result<()> {
    let width = model.feature_width();
    let mut out = String::new();
    for i in 0..width {
        out.push_str(&format!("f{i},"));
    }
    out.push_str("label\n");
    for sample in &dataset.samples {
        let features = model.features(&sample.values)?;
        for v in features.data() {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{}\n", sample.label));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Merge single-row sweep CSVs with identical headers into one table.
pub fn merge_report_csvs(inputs: &[String]) -> Result<String> {
    let mut header: Option<String> = None;
    let mut rows = Vec::new();
    for text in inputs {
        let mut lines = text.lines();
        let h = lines
            .next()
            .ok_or_else(|| Error::Config("empty report csv".into()))?;
        match &header {
            None => header = Some(h.to_string()),
            Some(existing) if existing == h => {}
            Some(existing) => {
                return Err(Error::Config(format!(
                    "report headers differ: {existing:?} vs {h:?}"
                )))
            }
        }
        rows.extend(lines.map(str::to_string));
    }
    let mut out = header.ok_or_else(|| Error::Config("no report csvs given".into()))?;
    out.push('\n');
    for row in rows {
        out.push_str(&row);
        out.push('\n');
    }
    Ok(out)
}
