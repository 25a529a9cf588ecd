//! Synthetic benchmarks where auxiliary evidence genuinely disambiguates the
//! primary task, the noisy-tag corruption protocol, and evaluation metrics.

mod blobs;
mod grid;
mod metrics;

pub use blobs::{gen_ambiguous_blobs, group_tag, AmbiguousBlobsSpec};
pub use grid::{gen_grid_segmentation, quadrants_of, tags_of, GridSegSpec, ShapeKind, Signature};
pub use metrics::{compute_metrics, MetricKind, MetricsReport};

use std::io::{BufRead, Write};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::Evidence;
use crate::baselines::{EvalInstance, TagSet};
use crate::error::{Error, Result};
use crate::model::{PrimaryOutput, Topology};
use crate::training::Example;

/// Auxiliary head that carries the tags; noisy tags are injected there.
pub const TAG_HEAD: usize = 0;

/// Flips `k` absent tags of the tag head to present, chosen uniformly
/// without replacement. Present tags are never removed.
pub fn add_noisy_tags(e: &Evidence, k: usize, seed: u64) -> Result<Evidence> {
    let tags = e
        .target(TAG_HEAD)
        .ok_or_else(|| Error::Evidence("evidence has no tag head".into()))?;
    let absent: Vec<usize> = (0..tags.len()).filter(|&i| tags[i] == 0.0).collect();
    if k > absent.len() {
        return Err(Error::Evidence(format!(
            "cannot add {k} noisy tags: only {} tags are absent",
            absent.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noisy = tags.to_vec();
    for i in sample(&mut rng, absent.len(), k) {
        noisy[absent[i]] = 1.0;
    }
    let targets = e
        .targets()
        .iter()
        .map(|(h, t)| (*h, if *h == TAG_HEAD { noisy.clone() } else { t.clone() }))
        .collect();
    Evidence::new(targets)
}

/// Number of absent tags in the tag head.
pub fn absent_tags(e: &Evidence) -> usize {
    e.target(TAG_HEAD)
        .map_or(0, |t| t.iter().filter(|v| **v == 0.0).count())
}

/// A benchmark together with its generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BenchmarkSpec {
    AmbiguousBlobs(AmbiguousBlobsSpec),
    GridSeg(GridSegSpec),
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec::GridSeg(GridSegSpec::default())
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            BenchmarkSpec::AmbiguousBlobs(s) => s.validate(),
            BenchmarkSpec::GridSeg(s) => s.validate(),
        }
    }

    pub fn generate(&self) -> Result<(Vec<Example>, Vec<Example>)> {
        match self {
            BenchmarkSpec::AmbiguousBlobs(s) => gen_ambiguous_blobs(s),
            BenchmarkSpec::GridSeg(s) => gen_grid_segmentation(s),
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            BenchmarkSpec::AmbiguousBlobs(s) => s.seed,
            BenchmarkSpec::GridSeg(s) => s.seed,
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        match self {
            BenchmarkSpec::AmbiguousBlobs(s) => s.seed = seed,
            BenchmarkSpec::GridSeg(s) => s.seed = seed,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            BenchmarkSpec::AmbiguousBlobs(_) => 2,
            BenchmarkSpec::GridSeg(s) => s.cells(),
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            BenchmarkSpec::AmbiguousBlobs(s) => s.n_classes,
            BenchmarkSpec::GridSeg(s) => s.n_classes,
        }
    }

    pub fn primary_output(&self) -> PrimaryOutput {
        match self {
            BenchmarkSpec::AmbiguousBlobs(s) => PrimaryOutput::Classes { n_classes: s.n_classes },
            BenchmarkSpec::GridSeg(s) => PrimaryOutput::PerCell {
                cells: s.cells(),
                n_classes: s.n_classes,
            },
        }
    }

    /// Output width of every auxiliary head the benchmark provides targets for.
    pub fn aux_widths(&self) -> Vec<usize> {
        match self {
            BenchmarkSpec::AmbiguousBlobs(_) => vec![2],
            BenchmarkSpec::GridSeg(s) if s.quadrant_head => vec![s.n_tags(), 4],
            BenchmarkSpec::GridSeg(s) => vec![s.n_tags()],
        }
    }

    /// Tanh trunk sized for the benchmark.
    pub fn default_trunk(&self) -> Vec<usize> {
        match self {
            BenchmarkSpec::AmbiguousBlobs(_) => vec![32, 16],
            BenchmarkSpec::GridSeg(_) => vec![256, 128],
        }
    }

    pub fn topology(&self, trunk: &[usize], aux_heads: usize) -> Topology {
        let widths = self.aux_widths();
        Topology::with_trunk(
            self.input_dim(),
            trunk,
            self.primary_output(),
            &widths[..aux_heads.min(widths.len())],
        )
    }

    pub fn metric_kind(&self) -> MetricKind {
        match self {
            BenchmarkSpec::AmbiguousBlobs(_) => MetricKind::Instancewise,
            BenchmarkSpec::GridSeg(_) => MetricKind::Cellwise,
        }
    }

    /// Classes distinguishable only through evidence.
    pub fn ambiguous_classes(&self) -> Vec<usize> {
        match self {
            BenchmarkSpec::AmbiguousBlobs(s) => s.ambiguous_classes(),
            BenchmarkSpec::GridSeg(s) => s.aliased_classes(),
        }
    }

    /// Classes a tag vector permits.
    pub fn tag_set(&self, tags: &[f64]) -> Result<TagSet> {
        match self {
            BenchmarkSpec::AmbiguousBlobs(s) => {
                let groups = s.groups();
                let allowed = (0..s.n_classes).filter(|&c| tags.get(groups[c]).is_some_and(|t| *t == 1.0));
                TagSet::new(s.n_classes, allowed, false)
            }
            BenchmarkSpec::GridSeg(s) => {
                if tags.len() != s.n_tags() {
                    return Err(Error::Tags(format!(
                        "expected {} tag bits, got {}",
                        s.n_tags(),
                        tags.len()
                    )));
                }
                let allowed = (1..s.n_classes).filter(|&c| tags[c - 1] == 1.0);
                TagSet::new(s.n_classes, allowed, true)
            }
        }
    }

    /// Evaluation items with exact evidence on the first `heads` auxiliary heads.
    pub fn eval_instances(&self, test: &[Example], heads: usize) -> Result<Vec<EvalInstance>> {
        test.iter()
            .enumerate()
            .map(|(id, ex)| {
                let evidence = Evidence::new(ex.aux.iter().take(heads).cloned().enumerate().collect())?;
                Ok(EvalInstance {
                    id,
                    x: ex.x.clone(),
                    y: ex.y.clone(),
                    tags: self.tag_set(&ex.aux[TAG_HEAD])?,
                    evidence,
                })
            })
            .collect()
    }
}

/// Writes one line per example: `id<TAB>x<TAB>y<TAB>tags`, where `x` and `y`
/// are comma-separated and `tags` holds one `0`/`1` string per auxiliary
/// head, heads separated by `|`.
pub fn write_dataset<W: Write>(mut w: W, examples: &[Example]) -> Result<()> {
    for (id, ex) in examples.iter().enumerate() {
        let x: Vec<String> = ex.x.iter().map(f64::to_string).collect();
        let y: Vec<String> = ex.y.iter().map(usize::to_string).collect();
        let aux: Vec<String> = ex
            .aux
            .iter()
            .map(|a| a.iter().map(|b| if *b == 1.0 { '1' } else { '0' }).collect())
            .collect();
        writeln!(w, "{id}\t{}\t{}\t{}", x.join(","), y.join(","), aux.join("|"))?;
    }
    Ok(())
}

/// Reads the format of [`write_dataset`]; blank lines and `#` comments are skipped.
pub fn read_dataset<R: BufRead>(r: R) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| Error::Format(format!("line {}: {what}", n + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, x, y, aux] = fields[..] else {
            return Err(bad("expected 4 tab-separated fields"));
        };
        let id: usize = id.parse().map_err(|_| bad("bad id"))?;
        if id != out.len() {
            return Err(bad("ids must count up from 0"));
        }
        let x = x
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|_| bad("bad x value")))
            .collect::<Result<Vec<_>>>()?;
        let y = y
            .split(',')
            .map(|v| v.parse::<usize>().map_err(|_| bad("bad label")))
            .collect::<Result<Vec<_>>>()?;
        let aux = if aux.is_empty() {
            Vec::new()
        } else {
            aux.split('|')
                .map(|head| {
                    head.chars()
                        .map(|c| match c {
                            '0' => Ok(0.0),
                            '1' => Ok(1.0),
                            _ => Err(bad("tag bits must be 0 or 1")),
                        })
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()?
        };
        out.push(Example { x, y, aux });
    }
    Ok(out)
}
