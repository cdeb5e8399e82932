//! Cross-model alignment: which layers each backbone taps and the shared
//! hidden size the side network works in.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerStrategy {
    Uniform,
    Shallow,
    Deep,
    Random(u64),
    Explicit(Vec<usize>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DSideRule {
    Auto,
    Explicit(usize),
}

/// Returns `B` sorted, distinct 1-based layer indices.
pub fn partition_layers(num_layers: usize, b: usize, strategy: &LayerStrategy) -> Result<Vec<usize>> {
    if b == 0 || b > num_layers {
        return Err(Error::Partition(format!(
            "block count {b} outside [1, {num_layers}]"
        )));
    }
    let taps = match strategy {
        // round(i·L/B) with halves rounded up.
        LayerStrategy::Uniform => (1..=b).map(|i| (2 * i * num_layers + b) / (2 * b)).collect(),
        LayerStrategy::Shallow => (1..=b).collect(),
        LayerStrategy::Deep => (num_layers - b + 1..=num_layers).collect(),
        LayerStrategy::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut v: Vec<usize> = sample(&mut rng, num_layers, b).into_iter().map(|i| i + 1).collect();
            v.sort_unstable();
            v
        }
        LayerStrategy::Explicit(list) => {
            if list.len() != b {
                return Err(Error::Partition(format!(
                    "explicit tap list has {} entries, expected {b}",
                    list.len()
                )));
            }
            if list.iter().any(|&l| l == 0 || l > num_layers) || list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Partition(format!(
                    "explicit taps {list:?} must be strictly increasing within [1, {num_layers}]"
                )));
            }
            list.clone()
        }
    };
    Ok(taps)
}

/// The shared contract between every backbone type and the side network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentPlan {
    pub block_count: usize,
    pub tap_layers: BTreeMap<String, Vec<usize>>,
    pub d_side: usize,
    pub projection_shapes: BTreeMap<String, (usize, usize)>,
    pub num_classes: usize,
}

impl AlignmentPlan {
    pub fn taps(&self, backbone_id: &str) -> Result<&[usize]> {
        self.tap_layers
            .get(backbone_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Identity(backbone_id.to_string()))
    }

    pub fn hidden(&self, backbone_id: &str) -> Result<usize> {
        self.projection_shapes
            .get(backbone_id)
            .map(|s| s.0)
            .ok_or_else(|| Error::Identity(backbone_id.to_string()))
    }

    pub fn backbone_ids(&self) -> impl Iterator<Item = &str> {
        self.tap_layers.keys().map(String::as_str)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("plan serializes");
        Sha256::digest(&json).into()
    }

    pub fn digest_hex(&self) -> String {
        self.digest().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Optional deviations from the default plan, used by ablations.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanOverrides {
    pub block_count: Option<usize>,
    pub strategy: Option<LayerStrategy>,
}

/// Distinct sizes: one → it, two → the larger, three or more → the (lower) median.
pub fn auto_d_side(hiddens: &[usize]) -> Option<usize> {
    let distinct: Vec<usize> = hiddens.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    match distinct.len() {
        0 => None,
        1 => Some(distinct[0]),
        2 => Some(distinct[1]),
        n => Some(distinct[(n - 1) / 2]),
    }
}

pub fn make_plan(configs: &[BackboneConfig], rule: DSideRule) -> Result<AlignmentPlan> {
    make_plan_with(configs, rule, &PlanOverrides::default())
}

pub fn make_plan_with(configs: &[BackboneConfig], rule: DSideRule, overrides: &PlanOverrides) -> Result<AlignmentPlan> {
    let first = configs
        .first()
        .ok_or_else(|| Error::Plan("no backbones to align".into()))?;
    let mut unique: BTreeMap<&str, &BackboneConfig> = BTreeMap::new();
    for c in configs {
        if c.num_classes != first.num_classes {
            return Err(Error::Plan(format!(
                "backbone `{}` has {} classes, `{}` has {}",
                c.id, c.num_classes, first.id, first.num_classes
            )));
        }
        if let Some(prev) = unique.insert(&c.id, c) {
            if prev != c {
                return Err(Error::Plan(format!("backbone `{}` defined twice with different shapes", c.id)));
            }
        }
    }
    let min_layers = unique.values().map(|c| c.num_layers).min().expect("non-empty");
    let b = overrides.block_count.unwrap_or(min_layers);
    if b == 0 || b > min_layers {
        return Err(Error::Plan(format!("block count {b} outside [1, {min_layers}]")));
    }
    let d_side = match rule {
        DSideRule::Explicit(0) => return Err(Error::Plan("d_side must be positive".into())),
        DSideRule::Explicit(d) => d,
        DSideRule::Auto => {
            let h: Vec<usize> = unique.values().map(|c| c.hidden).collect();
            auto_d_side(&h).expect("non-empty")
        }
    };
    let strategy = overrides.strategy.clone().unwrap_or(LayerStrategy::Uniform);
    let mut tap_layers = BTreeMap::new();
    let mut projection_shapes = BTreeMap::new();
    for (id, c) in &unique {
        tap_layers.insert(id.to_string(), partition_layers(c.num_layers, b, &strategy)?);
        projection_shapes.insert(id.to_string(), (c.hidden, d_side));
    }
    Ok(AlignmentPlan {
        block_count: b,
        tap_layers,
        d_side,
        projection_shapes,
        num_classes: first.num_classes,
    })
}
