//! Label pruning and the side-by-side evaluation of every model variant.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapt::{predict_with_evidence, AdaptConfig, AdaptationTrace, Evidence};
use crate::autodiff::{argmax, Tensor};
use crate::error::{Error, Result};
use crate::model::{MtlNetwork, WeightSnapshot};
use crate::synthbench::{compute_metrics, MetricKind, MetricsReport};

/// Classes permitted by an instance's tags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagSet {
    allowed: Vec<bool>,
    background_always_allowed: bool,
}

impl TagSet {
    pub fn new(
        n_classes: usize,
        allowed: impl IntoIterator<Item = usize>,
        background_always_allowed: bool,
    ) -> Result<Self> {
        let mut mask = vec![false; n_classes];
        for c in allowed {
            if c >= n_classes {
                return Err(Error::Tags(format!("class {c} out of range for {n_classes} classes")));
            }
            mask[c] = true;
        }
        if background_always_allowed {
            if n_classes == 0 {
                return Err(Error::Tags("no background class to allow".into()));
            }
            mask[0] = true;
        }
        if !mask.contains(&true) {
            return Err(Error::Tags("tag set allows no class".into()));
        }
        Ok(Self {
            allowed: mask,
            background_always_allowed,
        })
    }

    /// Every class allowed.
    pub fn all(n_classes: usize) -> Result<Self> {
        Self::new(n_classes, 0..n_classes, false)
    }

    pub fn n_classes(&self) -> usize {
        self.allowed.len()
    }

    pub fn allows(&self, class: usize) -> bool {
        self.allowed.get(class).copied().unwrap_or(false)
    }

    pub fn background_always_allowed(&self) -> bool {
        self.background_always_allowed
    }

    pub fn allowed(&self) -> impl Iterator<Item = usize> + '_ {
        self.allowed.iter().enumerate().filter(|(_, a)| **a).map(|(c, _)| c)
    }
}

/// Zeroes the probability of every class the tags exclude, row by row.
///
/// Rows are not renormalised. A row left with no mass puts 1 on the
/// background class.
pub fn prune(probs: &Tensor, tags: &TagSet) -> Result<Tensor> {
    let (rows, c) = probs.dims2()?;
    if c != tags.n_classes() {
        return Err(Error::Tags(format!(
            "tag set covers {} classes, probabilities have {c}",
            tags.n_classes()
        )));
    }
    let mut data = probs.data().to_vec();
    for r in 0..rows {
        let row = &mut data[r * c..(r + 1) * c];
        for (k, p) in row.iter_mut().enumerate() {
            if !tags.allows(k) {
                *p = 0.0;
            }
        }
        if row.iter().all(|p| *p == 0.0) {
            row[0] = 1.0;
        }
    }
    Ok(Tensor::new(probs.shape().to_vec(), data)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    PrimaryOnly,
    Mtl,
    MtlPrune,
    BpEs,
    BpEsPrune,
    BpL2,
    BpL2Prune,
}

/// The regularisation recipe of an adapting variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdaptKind {
    EarlyStop,
    TwoNorm,
}

/// One step of a variant's per-instance pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Restore,
    Adapt(AdaptKind),
    Forward,
    Prune,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::PrimaryOnly,
        Variant::Mtl,
        Variant::MtlPrune,
        Variant::BpEs,
        Variant::BpEsPrune,
        Variant::BpL2,
        Variant::BpL2Prune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::PrimaryOnly => "primary-only",
            Variant::Mtl => "mtl",
            Variant::MtlPrune => "mtl+prune",
            Variant::BpEs => "bp-es",
            Variant::BpEsPrune => "bp-es+prune",
            Variant::BpL2 => "bp-l2",
            Variant::BpL2Prune => "bp-l2+prune",
        }
    }

    pub fn adapt_kind(self) -> Option<AdaptKind> {
        match self {
            Variant::BpEs | Variant::BpEsPrune => Some(AdaptKind::EarlyStop),
            Variant::BpL2 | Variant::BpL2Prune => Some(AdaptKind::TwoNorm),
            _ => None,
        }
    }

    pub fn prunes(self) -> bool {
        matches!(self, Variant::MtlPrune | Variant::BpEsPrune | Variant::BpL2Prune)
    }

    /// Whether the variant consumes instance evidence (tags or adaptation).
    pub fn uses_evidence(self) -> bool {
        self.prunes() || self.adapt_kind().is_some()
    }

    pub fn stages(self) -> Vec<Stage> {
        let mut s = Vec::with_capacity(4);
        if let Some(kind) = self.adapt_kind() {
            s.push(Stage::Restore);
            s.push(Stage::Adapt(kind));
        }
        s.push(Stage::Forward);
        if self.prunes() {
            s.push(Stage::Prune);
        }
        s
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.name().to_string()
    }
}

/// One test item as seen by the evaluator.
#[derive(Debug, Clone)]
pub struct EvalInstance {
    pub id: usize,
    pub x: Vec<f64>,
    /// Ground truth, one label per cell (one entry for classification).
    pub y: Vec<usize>,
    pub evidence: Evidence,
    pub tags: TagSet,
}

/// Trained networks the variants draw on.
#[derive(Debug, Clone, Copy)]
pub struct Models<'a> {
    /// Multi-task network and its trained weights.
    pub mtl: &'a MtlNetwork,
    pub snapshot: &'a WeightSnapshot,
    /// Network trained on the primary task alone; required for the primary-only row.
    pub primary_only: Option<&'a MtlNetwork>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub early_stop: AdaptConfig,
    pub two_norm: AdaptConfig,
    pub kind: MetricKind,
    /// Predictions whose winning probability falls below this count as
    /// abstentions for precision/recall.
    pub confidence_threshold: f64,
    pub workers: usize,
}

/// Per-instance output of one variant.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceResult {
    pub id: usize,
    pub labels: Vec<usize>,
    pub confidence: Vec<f64>,
    pub trace: Option<AdaptationTrace>,
    /// Stages actually executed, in order.
    pub stages: Vec<Stage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantResult {
    pub variant: Variant,
    pub report: MetricsReport,
    pub instances: Vec<InstanceResult>,
}

fn labels_and_confidence(probs: &Tensor) -> Result<(Vec<usize>, Vec<f64>)> {
    let (rows, c) = probs.dims2()?;
    let mut labels = Vec::with_capacity(rows);
    let mut conf = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &probs.data()[r * c..(r + 1) * c];
        let k = argmax(row);
        labels.push(k);
        conf.push(row[k]);
    }
    Ok((labels, conf))
}

struct Worker {
    mtl: MtlNetwork,
    primary_only: Option<MtlNetwork>,
}

impl Worker {
    fn run(
        &mut self,
        inst: &EvalInstance,
        variants: &[Variant],
        snap: &WeightSnapshot,
        settings: &EvalSettings,
    ) -> Result<Vec<InstanceResult>> {
        let x = Tensor::new(vec![1, inst.x.len()], inst.x.clone())?;
        // Outputs shared between the plain and pruned form of a variant.
        let mut base: Option<Tensor> = None;
        let mut adapted: [Option<(Tensor, AdaptationTrace)>; 2] = [None, None];
        let mut out = Vec::with_capacity(variants.len());

        for &variant in variants {
            let mut stages = Vec::new();
            let (probs, trace) = match variant.adapt_kind() {
                None if variant == Variant::PrimaryOnly => {
                    let net = self
                        .primary_only
                        .as_ref()
                        .ok_or_else(|| Error::Config("primary-only variant needs a primary-only network".into()))?;
                    stages.push(Stage::Forward);
                    (net.forward(&x)?.primary, None)
                }
                None => {
                    if base.is_none() {
                        base = Some(self.mtl.forward(&x)?.primary);
                    }
                    stages.push(Stage::Forward);
                    (base.clone().unwrap_or_else(|| unreachable!()), None)
                }
                Some(kind) => {
                    let (slot, cfg) = match kind {
                        AdaptKind::EarlyStop => (0, &settings.early_stop),
                        AdaptKind::TwoNorm => (1, &settings.two_norm),
                    };
                    if adapted[slot].is_none() {
                        adapted[slot] = Some(predict_with_evidence(
                            &mut self.mtl,
                            &inst.x,
                            &inst.evidence,
                            snap,
                            cfg,
                        )?);
                    }
                    stages.extend([Stage::Restore, Stage::Adapt(kind), Stage::Forward]);
                    let (p, t) = adapted[slot].clone().unwrap_or_else(|| unreachable!());
                    (p, Some(t))
                }
            };
            let probs = if variant.prunes() {
                stages.push(Stage::Prune);
                prune(&probs, &inst.tags)?
            } else {
                probs
            };
            let (labels, confidence) = labels_and_confidence(&probs)?;
            out.push(InstanceResult {
                id: inst.id,
                labels,
                confidence,
                trace,
                stages,
            });
        }
        Ok(out)
    }
}

/// Runs every requested variant on every instance and scores it.
///
/// Instances are split into contiguous chunks, one per worker; each worker
/// owns clones of the networks. Results are merged in instance order, so the
/// output does not depend on the worker count.
pub fn evaluate_variants(
    models: Models<'_>,
    instances: &[EvalInstance],
    variants: &[Variant],
    settings: &EvalSettings,
) -> Result<Vec<VariantResult>> {
    models.mtl.check_snapshot(models.snapshot)?;
    if variants.contains(&Variant::PrimaryOnly) && models.primary_only.is_none() {
        return Err(Error::Config(
            "primary-only variant needs a primary-only network".into(),
        ));
    }
    let n_classes = models.mtl.topology().primary_output.n_classes();
    let workers = settings.workers.max(1).min(instances.len().max(1));
    let chunk = instances.len().div_ceil(workers).max(1);

    let per_chunk: Vec<Result<Vec<Vec<InstanceResult>>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = instances
            .chunks(chunk)
            .map(|part| {
                let mut worker = Worker {
                    mtl: models.mtl.clone(),
                    primary_only: models.primary_only.cloned(),
                };
                scope.spawn(move || {
                    worker.mtl.restore(models.snapshot)?;
                    part.iter()
                        .map(|inst| worker.run(inst, variants, models.snapshot, settings))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Contract("evaluation worker panicked".into())))
            })
            .collect()
    });

    let mut per_variant: Vec<Vec<InstanceResult>> = vec![Vec::with_capacity(instances.len()); variants.len()];
    for chunk in per_chunk {
        for inst in chunk? {
            for (slot, r) in per_variant.iter_mut().zip(inst) {
                slot.push(r);
            }
        }
    }

    let targets: Vec<Vec<usize>> = instances.iter().map(|i| i.y.clone()).collect();
    variants
        .iter()
        .zip(per_variant)
        .map(|(&variant, results)| {
            let preds: Vec<Vec<usize>> = results.iter().map(|r| r.labels.clone()).collect();
            let conf: Vec<Vec<f64>> = results.iter().map(|r| r.confidence.clone()).collect();
            let report = compute_metrics(
                &preds,
                &targets,
                n_classes,
                settings.kind,
                Some((&conf, settings.confidence_threshold)),
            )?;
            Ok(VariantResult {
                variant,
                report,
                instances: results,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn all_tags_is_identity() {
        let p = Tensor::new(vec![2, 3], vec![0.5, 0.3, 0.2, 0.1, 0.1, 0.8]).unwrap();
        assert_eq!(prune(&p, &TagSet::all(3).unwrap()).unwrap(), p);
    }

    #[test]
    fn hand_case_moves_argmax() {
        let tags = TagSet::new(3, [1, 2], false).unwrap();
        let out = prune(&row(&[0.5, 0.3, 0.2]), &tags).unwrap();
        assert_eq!(out.data(), &[0.0, 0.3, 0.2]);
        assert_eq!(argmax(out.data()), 1);
    }

    #[test]
    fn empty_row_falls_back_to_background() {
        let tags = TagSet::new(3, [2], false).unwrap();
        let out = prune(&row(&[0.6, 0.4, 0.0]), &tags).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn tag_errors() {
        assert!(TagSet::new(3, [3], true).is_err());
        assert!(TagSet::new(3, [], false).is_err());
        assert!(TagSet::new(3, [], true).is_ok());
        let tags = TagSet::new(4, [1], true).unwrap();
        assert!(prune(&row(&[0.5, 0.5]), &tags).is_err());
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("bp".parse::<Variant>().is_err());
    }

    #[test]
    fn pipelines_prune_last() {
        for v in Variant::ALL {
            let s = v.stages();
            assert_eq!(
                s.iter().filter(|st| **st == Stage::Prune).count(),
                usize::from(v.prunes())
            );
            if v.prunes() {
                assert_eq!(s.last(), Some(&Stage::Prune));
                assert_eq!(s[s.len() - 2], Stage::Forward);
            }
        }
    }
}
