//! Adversarial example generators.
//!
//! Four families: Gaussian-noise (black-box), FGSM (white-box), the bimodal
//! cascade of both, and local FGSM variants restricted to one antenna plane
//! or one subcarrier row. All generators are pure functions of the input,
//! the spec, and the seed; the input tensor itself is never modified.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{emit_kv, get_parsed, parse_kv};
use crate::error::{Error, Result};
use crate::model::HarModel;
use crate::tensor::{Tape, Tensor};

/// Gaussian-noise weights swept in the fixed-grid protocol.
pub const GN_GRID: [f64; 7] = [0.0, 0.1, 0.2, 0.3, 0.5, 1.0, 2.0];
/// FGSM weights swept in the fixed-grid protocol.
pub const FGSM_GRID: [f64; 7] = [0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3];
/// Number of bimodal levels (index-paired entries of the two grids).
pub const BIMODAL_LEVELS: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackFamily {
    Gn,
    Fgsm,
    Bimodal,
    Antenna,
    Subcarrier,
}

impl AttackFamily {
    pub fn name(&self) -> &'static str {
        match self {
            AttackFamily::Gn => "gn",
            AttackFamily::Fgsm => "fgsm",
            AttackFamily::Bimodal => "bimodal",
            AttackFamily::Antenna => "antenna",
            AttackFamily::Subcarrier => "subcarrier",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "gn" => Ok(AttackFamily::Gn),
            "fgsm" => Ok(AttackFamily::Fgsm),
            "bimodal" => Ok(AttackFamily::Bimodal),
            "antenna" => Ok(AttackFamily::Antenna),
            "subcarrier" => Ok(AttackFamily::Subcarrier),
            other => Err(Error::Config(format!("unknown attack family {other:?}"))),
        }
    }

    /// True when the attack needs model gradients (white-box).
    pub fn is_white_box(&self) -> bool {
        !matches!(self, AttackFamily::Gn)
    }
}

/// Axis of a local attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalAxis {
    Antenna,
    Subcarrier,
}

/// An attack family with its hyper-parameters and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackSpec {
    pub family: AttackFamily,
    pub tau: f64,
    pub epsilon: f64,
    /// Bimodal level; sets `tau`/`epsilon` from the index-paired grids.
    pub level: Option<usize>,
    /// Fixed antenna/subcarrier for local attacks; `None` draws one per
    /// sample from the seeded stream.
    pub target_index: Option<usize>,
    pub rng_seed: u64,
}

impl AttackSpec {
    pub fn gn(tau: f64, rng_seed: u64) -> Self {
        AttackSpec {
            family: AttackFamily::Gn,
            tau,
            epsilon: 0.0,
            level: None,
            target_index: None,
            rng_seed,
        }
    }

    pub fn fgsm(epsilon: f64) -> Self {
        AttackSpec {
            family: AttackFamily::Fgsm,
            tau: 0.0,
            epsilon,
            level: None,
            target_index: None,
            rng_seed: 0,
        }
    }

    pub fn bimodal(tau: f64, epsilon: f64, rng_seed: u64) -> Self {
        AttackSpec {
            family: AttackFamily::Bimodal,
            tau,
            epsilon,
            level: None,
            target_index: None,
            rng_seed,
        }
    }

    /// Bimodal attack at a numbered level: `(tau, epsilon)` taken from the
    /// two grids paired by index.
    pub fn bimodal_level(level: usize, rng_seed: u64) -> Result<Self> {
        if level >= BIMODAL_LEVELS {
            return Err(Error::Index {
                op: "bimodal_level",
                index: level,
                extent: BIMODAL_LEVELS,
            });
        }
        Ok(AttackSpec {
            family: AttackFamily::Bimodal,
            tau: GN_GRID[level],
            epsilon: FGSM_GRID[level],
            level: Some(level),
            target_index: None,
            rng_seed,
        })
    }

    pub fn local(axis: LocalAxis, epsilon: f64, target_index: Option<usize>, rng_seed: u64) -> Self {
        AttackSpec {
            family: match axis {
                LocalAxis::Antenna => AttackFamily::Antenna,
                LocalAxis::Subcarrier => AttackFamily::Subcarrier,
            },
            tau: 0.0,
            epsilon,
            level: None,
            target_index,
            rng_seed,
        }
    }

    /// Check hyper-parameter invariants against a sample shape `[A, S, T]`.
    pub fn validate(&self, sample_shape: [usize; 3]) -> Result<()> {
        if self.tau < 0.0 || self.epsilon < 0.0 {
            return Err(Error::Config(format!(
                "attack weights must be non-negative (tau={}, epsilon={})",
                self.tau, self.epsilon
            )));
        }
        if let Some(level) = self.level {
            if level >= BIMODAL_LEVELS {
                return Err(Error::Index {
                    op: "attack_spec",
                    index: level,
                    extent: BIMODAL_LEVELS,
                });
            }
        }
        if let Some(t) = self.target_index {
            let extent = match self.family {
                AttackFamily::Antenna => sample_shape[0],
                AttackFamily::Subcarrier => sample_shape[1],
                _ => return Ok(()),
            };
            if t >= extent {
                return Err(Error::Index {
                    op: "attack_spec",
                    index: t,
                    extent,
                });
            }
        }
        Ok(())
    }

    /// Flat `key=value` serialization.
    pub fn to_kv(&self) -> String {
        let mut pairs: Vec<(&str, String)> = vec![("family", self.family.name().to_string())];
        match self.family {
            AttackFamily::Gn => pairs.push(("tau", self.tau.to_string())),
            AttackFamily::Fgsm => pairs.push(("epsilon", self.epsilon.to_string())),
            AttackFamily::Bimodal => {
                pairs.push(("tau", self.tau.to_string()));
                pairs.push(("epsilon", self.epsilon.to_string()));
                if let Some(level) = self.level {
                    pairs.push(("level", level.to_string()));
                }
            }
            AttackFamily::Antenna | AttackFamily::Subcarrier => {
                pairs.push(("epsilon", self.epsilon.to_string()));
                if let Some(t) = self.target_index {
                    pairs.push(("target_index", t.to_string()));
                }
            }
        }
        pairs.push(("rng_seed", self.rng_seed.to_string()));
        emit_kv(pairs.into_iter())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let map = parse_kv(text)?;
        let family = AttackFamily::from_name(
            map.get("family")
                .ok_or_else(|| Error::Config("missing key \"family\"".into()))?,
        )?;
        let tau = map.get("tau").map(|_| get_parsed(&map, "tau")).transpose()?;
        let epsilon = map
            .get("epsilon")
            .map(|_| get_parsed(&map, "epsilon"))
            .transpose()?;
        let level: Option<usize> = map
            .get("level")
            .map(|_| get_parsed(&map, "level"))
            .transpose()?;
        let target_index = map
            .get("target_index")
            .map(|_| get_parsed(&map, "target_index"))
            .transpose()?;
        let rng_seed = if map.contains_key("rng_seed") {
            get_parsed(&map, "rng_seed")?
        } else {
            0
        };

        let spec = match family {
            AttackFamily::Gn => AttackSpec {
                family,
                tau: tau.ok_or_else(|| Error::Config("gn attack requires tau".into()))?,
                epsilon: 0.0,
                level: None,
                target_index: None,
                rng_seed,
            },
            AttackFamily::Fgsm => AttackSpec {
                family,
                tau: 0.0,
                epsilon: epsilon
                    .ok_or_else(|| Error::Config("fgsm attack requires epsilon".into()))?,
                level: None,
                target_index: None,
                rng_seed,
            },
            AttackFamily::Bimodal => match level {
                Some(l) => {
                    let mut s = AttackSpec::bimodal_level(l, rng_seed)?;
                    // Explicit weights override the level pairing.
                    if let Some(t) = tau {
                        s.tau = t;
                    }
                    if let Some(e) = epsilon {
                        s.epsilon = e;
                    }
                    s
                }
                None => AttackSpec {
                    family,
                    tau: tau.ok_or_else(|| {
                        Error::Config("bimodal attack requires level or (tau, epsilon)".into())
                    })?,
                    epsilon: epsilon.ok_or_else(|| {
                        Error::Config("bimodal attack requires level or (tau, epsilon)".into())
                    })?,
                    level: None,
                    target_index: None,
                    rng_seed,
                },
            },
            AttackFamily::Antenna | AttackFamily::Subcarrier => AttackSpec {
                family,
                tau: 0.0,
                epsilon: epsilon
                    .ok_or_else(|| Error::Config("local attack requires epsilon".into()))?,
                level: None,
                target_index,
                rng_seed,
            },
        };
        Ok(spec)
    }

    /// Per-sample random stream: same spec and sample index always produce
    /// the same draws regardless of evaluation order.
    pub fn sample_rng(&self, sample_index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_stream(sample_index);
        rng
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of the cross-entropy loss w.r.t. the input sample.
fn input_gradient(x: &Tensor, label: usize, model: &HarModel) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone().with_grad());
    let staged = model.stage(&mut tape, false);
    let out = model.forward_staged(&mut tape, &staged, input)?;
    let probs = tape.softmax(out.logits)?;
    let labels = vec![label; probs_rows(&tape, probs)];
    let loss = tape.cross_entropy(probs, &labels)?;
    let grads = tape.backward(loss)?;
    grads
        .get(input)
        .map(|g| g.to_vec())
        .ok_or_else(|| Error::contract("fgsm_attack", "input gradient unavailable"))
}

fn probs_rows(tape: &Tape, id: crate::tensor::TensorId) -> usize {
    match *tape.shape(id) {
        [_k] => 1,
        [b, _k] => b,
        _ => 1,
    }
}

/// Black-box Gaussian-noise attack: `x + tau * n`, `n ~ N(0, 1)` i.i.d.
///
/// Needs no model access. `tau = 0` returns the input bit-for-bit.
pub fn gn_attack(x: &Tensor, tau: f64, rng: &mut impl Rng) -> Tensor {
    if tau == 0.0 {
        return x.clone();
    }
    let data = x
        .data()
        .iter()
        .map(|&v| v + tau * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("noise addition preserves shape")
}

/// White-box FGSM attack: `x + epsilon * sign(∇_x L_ce(x, y))`.
///
/// `sign(0) = 0`, so zero-gradient coordinates and `epsilon = 0` leave the
/// input untouched. Every output element is `x`, `x + epsilon`, or
/// `x - epsilon` exactly.
pub fn fgsm_attack(x: &Tensor, label: usize, model: &HarModel, epsilon: f64) -> Result<Tensor> {
    if epsilon == 0.0 {
        return Ok(x.clone());
    }
    let grad = input_gradient(x, label, model)?;
    let data = x
        .data()
        .iter()
        .zip(&grad)
        .map(|(&v, &g)| v + epsilon * sign(g))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Bimodal cascade: FGSM first (gradient taken at the original input), then
/// Gaussian noise superposed. `tau = 0` degenerates to FGSM bit-for-bit.
pub fn bimodal_attack(
    x: &Tensor,
    label: usize,
    model: &HarModel,
    tau: f64,
    epsilon: f64,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let adv = fgsm_attack(x, label, model, epsilon)?;
    Ok(gn_attack(&adv, tau, rng))
}

/// FGSM restricted to one antenna plane (`1×S×T`) or one subcarrier row
/// (`A×1×T`); every other element equals the input exactly.
pub fn local_attack(
    x: &Tensor,
    label: usize,
    model: &HarModel,
    epsilon: f64,
    axis: LocalAxis,
    target_index: usize,
) -> Result<Tensor> {
    let [a, s, t] = match *x.shape() {
        [a, s, t] => [a, s, t],
        ref other => {
            return Err(Error::dimension(
                "local_attack",
                format!("expected [A,S,T] sample, got {other:?}"),
            ))
        }
    };
    let extent = match axis {
        LocalAxis::Antenna => a,
        LocalAxis::Subcarrier => s,
    };
    if target_index >= extent {
        return Err(Error::Index {
            op: "local_attack",
            index: target_index,
            extent,
        });
    }
    if epsilon == 0.0 {
        return Ok(x.clone());
    }

    let grad = input_gradient(x, label, model)?;
    let mut data = x.data().to_vec();
    match axis {
        LocalAxis::Antenna => {
            let base = target_index * s * t;
            for i in base..base + s * t {
                data[i] += epsilon * sign(grad[i]);
            }
        }
        LocalAxis::Subcarrier => {
            for ai in 0..a {
                let base = ai * s * t + target_index * t;
                for i in base..base + t {
                    data[i] += epsilon * sign(grad[i]);
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), data)
}

/// Dispatch an [`AttackSpec`] on one sample. White-box families require the
/// model; `sample_index` selects the per-sample random stream and, for local
/// attacks without a fixed target, the attacked plane or row.
pub fn apply_attack(
    spec: &AttackSpec,
    x: &Tensor,
    label: usize,
    model: Option<&HarModel>,
    sample_index: u64,
) -> Result<Tensor> {
    let shape = match *x.shape() {
        [a, s, t] => [a, s, t],
        ref other => {
            return Err(Error::dimension(
                "apply_attack",
                format!("expected [A,S,T] sample, got {other:?}"),
            ))
        }
    };
    spec.validate(shape)?;
    let need_model = || {
        model.ok_or_else(|| {
            Error::contract("apply_attack", format!("{} attack needs a model", spec.family.name()))
        })
    };
    match spec.family {
        AttackFamily::Gn => {
            let mut rng = spec.sample_rng(sample_index);
            Ok(gn_attack(x, spec.tau, &mut rng))
        }
        AttackFamily::Fgsm => fgsm_attack(x, label, need_model()?, spec.epsilon),
        AttackFamily::Bimodal => {
            let mut rng = spec.sample_rng(sample_index);
            bimodal_attack(x, label, need_model()?, spec.tau, spec.epsilon, &mut rng)
        }
        AttackFamily::Antenna | AttackFamily::Subcarrier => {
            let axis = if spec.family == AttackFamily::Antenna {
                LocalAxis::Antenna
            } else {
                LocalAxis::Subcarrier
            };
            let extent = match axis {
                LocalAxis::Antenna => shape[0],
                LocalAxis::Subcarrier => shape[1],
            };
            let target = match spec.target_index {
                Some(t) => t,
                None => spec.sample_rng(sample_index).gen_range(0..extent),
            };
            local_attack(x, label, need_model()?, spec.epsilon, axis, target)
        }
    }
}
