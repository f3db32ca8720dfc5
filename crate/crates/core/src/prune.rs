//! Filter and weight pruning as mask construction plus surgery.
//!
//! Structured pruning ranks the filters of each prunable layer by the l1
//! norm of their alive weights and masks the smallest ones, together with
//! the batchnorm entries and consumer input slices that kept them coupled
//! to the rest of the network. Unstructured pruning pools every alive conv
//! weight and masks the globally smallest magnitudes.
//!
//! Both paths are pure: they return a new snapshot and never touch the
//! input. Masks only ever lose entries, so sparsity is monotone across
//! cycles.

use crate::error::{Error, Result};
use crate::model::{LayerInput, LayerKind, ModelSnapshot, ParamKey, ParamRole, PruneMask};
use crate::tensor::Tensor;

/// One layer's share of a structured pruning pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanEntry {
    pub layer: usize,
    pub filters_to_prune: usize,
    /// Position among prunable layers, front to back.
    pub depth_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FilterPrunePlan {
    pub entries: Vec<PlanEntry>,
}

/// Per-filter l1 norms over alive entries of a conv weight tensor.
/// Fully dead filters score negative infinity and are never re-selected.
pub fn l1_filter_scores(weights: &Tensor, mask: &PruneMask) -> Result<Vec<f64>> {
    if weights.shape.len() != 4 {
        return Err(Error::Shape(format!(
            "filter scores want a [F,C,k,k] conv tensor, got {:?}",
            weights.shape
        )));
    }
    if mask.len() != weights.numel() {
        return Err(Error::Shape(format!(
            "mask has {} entries, tensor has {}",
            mask.len(),
            weights.numel()
        )));
    }
    let filters = weights.shape[0];
    let per = weights.numel() / filters;
    Ok((0..filters)
        .map(|f| {
            let mut any_alive = false;
            let mut score = 0.0;
            for j in 0..per {
                if mask.is_alive(f * per + j) {
                    any_alive = true;
                    score += weights.data[f * per + j].abs();
                }
            }
            if any_alive {
                score
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect())
}

/// Per-unit l1 norms for a dense weight tensor laid out [inputs, outputs];
/// the dense counterpart of [`l1_filter_scores`] for MLP hidden layers.
pub fn l1_unit_scores(weights: &Tensor, mask: &PruneMask) -> Result<Vec<f64>> {
    if weights.shape.len() != 2 {
        return Err(Error::Shape(format!(
            "unit scores want an [I,O] dense tensor, got {:?}",
            weights.shape
        )));
    }
    if mask.len() != weights.numel() {
        return Err(Error::Shape(format!(
            "mask has {} entries, tensor has {}",
            mask.len(),
            weights.numel()
        )));
    }
    let (inputs, outputs) = (weights.shape[0], weights.shape[1]);
    Ok((0..outputs)
        .map(|o| {
            let mut any_alive = false;
            let mut score = 0.0;
            for i in 0..inputs {
                if mask.is_alive(i * outputs + o) {
                    any_alive = true;
                    score += weights.data[i * outputs + o].abs();
                }
            }
            if any_alive {
                score
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect())
}

/// Plans a structured pass: the prunable layer at depth rank d prunes
/// floor(alive_d * (base_fraction + d * ramp)) filters, clamped so at
/// least one filter survives.
pub fn make_depth_ramped_plan(
    model: &ModelSnapshot,
    base_fraction: f64,
    ramp: f64,
) -> Result<FilterPrunePlan> {
    if !(base_fraction > 0.0 && base_fraction < 1.0) {
        return Err(Error::Param(format!("base fraction must sit in (0, 1), got {base_fraction}")));
    }
    if !(ramp >= 0.0) {
        return Err(Error::Param(format!("ramp must be nonnegative, got {ramp}")));
    }
    let mut entries = Vec::new();
    let mut rank = 0usize;
    for (idx, layer) in model.graph.iter().enumerate() {
        if !layer.prunable {
            continue;
        }
        let fraction = base_fraction + rank as f64 * ramp;
        if fraction >= 1.0 {
            return Err(Error::Param(format!(
                "layer {} at depth rank {rank} would prune fraction {fraction}",
                layer.name
            )));
        }
        let alive = model.alive_outputs(idx)?.iter().filter(|a| **a).count();
        let mut count = (alive as f64 * fraction).floor() as usize;
        if count >= alive {
            count = alive.saturating_sub(1);
        }
        entries.push(PlanEntry { layer: idx, filters_to_prune: count, depth_rank: rank });
        rank += 1;
    }
    Ok(FilterPrunePlan { entries })
}

/// Picks `count` alive positions with the smallest scores; ties go to
/// the lowest index.
fn select_smallest(scores: &[f64], count: usize) -> Vec<usize> {
    let mut alive: Vec<usize> =
        (0..scores.len()).filter(|&f| scores[f] != f64::NEG_INFINITY).collect();
    alive.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    alive.truncate(count);
    alive.sort_unstable();
    alive
}

/// Masks the lowest-scoring filters of each planned layer, plus the
/// batchnorm entries and consumer input slices that reference them.
pub fn apply_filter_prune(model: &ModelSnapshot, plan: &FilterPrunePlan) -> Result<ModelSnapshot> {
    let mut next = model.clone();
    let n = next.graph.len();
    let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (idx, layer) in next.graph.iter().enumerate() {
        for input in &layer.inputs {
            if let LayerInput::Layer(p) = input {
                consumers[*p].push(idx);
            }
        }
    }

    for entry in &plan.entries {
        if entry.layer >= n {
            return Err(Error::Param(format!("plan names layer {}, model has {n}", entry.layer)));
        }
        let layer = &next.graph[entry.layer];
        if !layer.prunable {
            return Err(Error::Param(format!(
                "plan prunes layer {}, which is not prunable",
                layer.name
            )));
        }
        if entry.filters_to_prune == 0 {
            continue;
        }
        let wkey = ParamKey::new(entry.layer, ParamRole::Weight);
        let scores = match &layer.kind {
            LayerKind::Conv { .. } => l1_filter_scores(next.param(wkey)?, next.mask(wkey)?)?,
            LayerKind::Dense { .. } => l1_unit_scores(next.param(wkey)?, next.mask(wkey)?)?,
            other => {
                return Err(Error::Param(format!(
                    "plan prunes layer {} of kind {other:?}",
                    layer.name
                )))
            }
        };
        let alive = scores.iter().filter(|s| **s != f64::NEG_INFINITY).count();
        if entry.filters_to_prune >= alive {
            return Err(Error::Param(format!(
                "plan prunes {} of {alive} alive filters in layer {}",
                entry.filters_to_prune, layer.name
            )));
        }
        let victims = select_smallest(&scores, entry.filters_to_prune);
        kill_channels(&mut next, entry.layer, &victims, &consumers)?;
    }

    next.enforce_masks();
    next.recount()?;
    Ok(next)
}

/// Masks output channels of one layer and every downstream reference:
/// batchnorm entries ride along, pass-throughs forward the channel ids,
/// conv and dense consumers lose the matching input slices.
fn kill_channels(
    model: &mut ModelSnapshot,
    layer: usize,
    channels: &[usize],
    consumers: &[Vec<usize>],
) -> Result<()> {
    match &model.graph[layer].kind {
        LayerKind::Conv { in_ch, out_ch, kernel, .. } => {
            let (in_ch, out_ch, kk) = (*in_ch, *out_ch, kernel * kernel);
            let _ = out_ch;
            let mask = model
                .masks
                .get_mut(&ParamKey::new(layer, ParamRole::Weight))
                .expect("validated layer");
            for &f in channels {
                for j in 0..in_ch * kk {
                    mask.kill(f * in_ch * kk + j);
                }
            }
        }
        LayerKind::Dense { inputs, outputs } => {
            let (inputs, outputs) = (*inputs, *outputs);
            let mask = model
                .masks
                .get_mut(&ParamKey::new(layer, ParamRole::Weight))
                .expect("validated layer");
            for &o in channels {
                for i in 0..inputs {
                    mask.kill(i * outputs + o);
                }
            }
            if let Some(bias) = model.masks.get_mut(&ParamKey::new(layer, ParamRole::Bias)) {
                for &o in channels {
                    bias.kill(o);
                }
            }
        }
        other => return Err(Error::Param(format!("cannot prune channels of {other:?}"))),
    }

    let mut queue: Vec<usize> = consumers[layer].to_vec();
    while let Some(j) = queue.pop() {
        match model.graph[j].kind.clone() {
            LayerKind::BatchNorm { .. } => {
                for role in [
                    ParamRole::Gamma,
                    ParamRole::Beta,
                    ParamRole::RunningMean,
                    ParamRole::RunningVar,
                ] {
                    let mask = model
                        .masks
                        .get_mut(&ParamKey::new(j, role))
                        .ok_or_else(|| Error::Param(format!("missing mask layer{j}")))?;
                    for &c in channels {
                        mask.kill(c);
                    }
                }
                queue.extend(consumers[j].iter().copied());
            }
            LayerKind::Relu | LayerKind::GlobalAvgPool => {
                queue.extend(consumers[j].iter().copied());
            }
            LayerKind::Conv { in_ch, out_ch, kernel, .. } => {
                let kk = kernel * kernel;
                let mask = model
                    .masks
                    .get_mut(&ParamKey::new(j, ParamRole::Weight))
                    .ok_or_else(|| Error::Param(format!("missing mask layer{j}")))?;
                for &c in channels {
                    for f in 0..out_ch {
                        for t in 0..kk {
                            mask.kill((f * in_ch + c) * kk + t);
                        }
                    }
                }
            }
            LayerKind::Dense { outputs, .. } => {
                let mask = model
                    .masks
                    .get_mut(&ParamKey::new(j, ParamRole::Weight))
                    .ok_or_else(|| Error::Param(format!("missing mask layer{j}")))?;
                for &c in channels {
                    for o in 0..outputs {
                        mask.kill(c * outputs + o);
                    }
                }
            }
            LayerKind::ResidualAdd | LayerKind::Flatten => {
                return Err(Error::Param(format!(
                    "layer {} feeds {}, whose channels cannot be pruned structurally",
                    model.graph[layer].name, model.graph[j].name
                )));
            }
        }
    }
    Ok(())
}

/// Masks the floor(fraction * alive) conv weights with smallest magnitude,
/// pooled across every conv layer. Ties at the threshold fall to earlier
/// layers, then lower flat indices.
pub fn global_magnitude_prune(model: &ModelSnapshot, fraction: f64) -> Result<ModelSnapshot> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Param(format!("prune fraction must sit in [0, 1), got {fraction}")));
    }
    let mut next = model.clone();
    let mut pool: Vec<(f64, usize, usize)> = Vec::new();
    for (idx, layer) in next.graph.iter().enumerate() {
        if !matches!(layer.kind, LayerKind::Conv { .. }) {
            continue;
        }
        let key = ParamKey::new(idx, ParamRole::Weight);
        let weights = next.param(key)?;
        let mask = next.mask(key)?;
        for (flat, v) in weights.data.iter().enumerate() {
            if mask.is_alive(flat) {
                pool.push((v.abs(), idx, flat));
            }
        }
    }
    let kill_count = (fraction * pool.len() as f64).floor() as usize;
    pool.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for (_, idx, flat) in pool.into_iter().take(kill_count) {
        next.masks
            .get_mut(&ParamKey::new(idx, ParamRole::Weight))
            .expect("pooled from existing masks")
            .kill(flat);
    }
    next.enforce_masks();
    next.recount()?;
    Ok(next)
}

/// Per-layer and total aliveness, with percentage drops against the
/// fully dense model.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityReport {
    pub layers: Vec<LayerSparsity>,
    pub alive_params: u64,
    pub dense_params: u64,
    pub alive_macs: u64,
    pub dense_macs: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSparsity {
    pub name: String,
    pub alive: u64,
    pub total: u64,
}

impl SparsityReport {
    pub fn percent_params_pruned(&self) -> f64 {
        100.0 * (1.0 - self.alive_params as f64 / self.dense_params as f64)
    }

    pub fn percent_macs_pruned(&self) -> f64 {
        100.0 * (1.0 - self.alive_macs as f64 / self.dense_macs as f64)
    }
}

pub fn sparsity_report(model: &ModelSnapshot) -> Result<SparsityReport> {
    let mut layers = Vec::new();
    for (idx, layer) in model.graph.iter().enumerate() {
        let mut alive = 0u64;
        let mut total = 0u64;
        for role in [ParamRole::Weight, ParamRole::Bias, ParamRole::Gamma, ParamRole::Beta] {
            let key = ParamKey::new(idx, role);
            if let Some(t) = model.params.get(&key) {
                alive += model.masks[&key].alive_count() as u64;
                total += t.numel() as u64;
            }
        }
        if total > 0 {
            layers.push(LayerSparsity { name: layer.name.clone(), alive, total });
        }
    }
    Ok(SparsityReport {
        layers,
        alive_params: model.param_count(),
        dense_params: model.dense_param_count(),
        alive_macs: model.count_macs()?,
        dense_macs: model.dense_mac_count()?,
    })
}
