//! Parameter and FLOP accounting for a model at any slice rate.
//!
//! Convention: one multiply-accumulate counts as one operation; biases,
//! normalization, pooling and activations contribute no FLOPs. Parameter
//! counts include biases and normalization affine parameters. Recurrent and
//! sequence layers are counted per token.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ActShape, LayerSpec, ModelSpec};
use crate::scheduler::SliceRateList;
use crate::slicing::{GroupSpec, SliceRate};

/// How a layer responds to the slice rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceRole {
    /// Every sliced axis narrows with the rate.
    Hidden,
    /// Input or output layer: one axis is fixed.
    Edge,
    /// Not narrowed at all.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub layer: String,
    pub role: SliceRole,
    pub params: u64,
    pub flops: u64,
    pub params_ratio: f64,
    pub flops_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub rate: f64,
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_flops: u64,
    pub full_params: u64,
    pub full_flops: u64,
    pub params_ratio: f64,
    pub flops_ratio: f64,
}

struct Raw {
    layer: String,
    role: SliceRole,
    params: u64,
    flops: u64,
}

fn role(groups: &[usize]) -> SliceRole {
    let sliced = groups.iter().filter(|g| **g > 1).count();
    match sliced {
        0 => SliceRole::Fixed,
        n if n == groups.len() => SliceRole::Hidden,
        _ => SliceRole::Edge,
    }
}

fn raw_costs(spec: &ModelSpec, r: SliceRate) -> Result<Vec<Raw>> {
    let trace = spec.trace(r)?;
    let b = |total: usize, groups: usize| -> Result<u64> {
        Ok(GroupSpec::new(total, groups)?.boundary(r) as u64)
    };
    let mut rows = Vec::new();
    for (layer, t) in spec.layers.iter().zip(&trace) {
        let (params, flops, role) = match *layer {
            LayerSpec::Dense {
                inputs,
                outputs,
                in_groups,
                out_groups,
                ..
            } => {
                let (gi, go) = (b(inputs, in_groups)?, b(outputs, out_groups)?);
                (gi * go + go, gi * go, role(&[in_groups, out_groups]))
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                in_groups,
                out_groups,
                ..
            } => {
                let (gi, go) = (b(in_channels, in_groups)?, b(out_channels, out_groups)?);
                let k2 = (kernel * kernel) as u64;
                let positions = match t.output {
                    ActShape::Image { height, width, .. } => (height * width) as u64,
                    _ => unreachable!("conv emits images"),
                };
                (
                    gi * go * k2 + go,
                    gi * go * k2 * positions,
                    role(&[in_groups, out_groups]),
                )
            }
            LayerSpec::GroupNorm {
                channels, groups, ..
            } => (2 * b(channels, groups)?, 0, role(&[groups])),
            LayerSpec::Embedding { vocab, dim, groups } => {
                (vocab as u64 * b(dim, groups)?, 0, role(&[1, groups]))
            }
            LayerSpec::Lstm {
                inputs,
                hidden,
                in_groups,
                hidden_groups,
            } => {
                let (gi, gh) = (b(inputs, in_groups)?, b(hidden, hidden_groups)?);
                let macs = 4 * gh * (gi + gh);
                (macs + 4 * gh, macs, role(&[in_groups, hidden_groups]))
            }
            _ => continue,
        };
        rows.push(Raw {
            layer: t.name.clone(),
            role,
            params,
            flops,
        });
    }
    Ok(rows)
}

pub fn count_params(spec: &ModelSpec, r: SliceRate) -> Result<u64> {
    Ok(raw_costs(spec, r)?.iter().map(|row| row.params).sum())
}

pub fn count_flops(spec: &ModelSpec, r: SliceRate) -> Result<u64> {
    Ok(raw_costs(spec, r)?.iter().map(|row| row.flops).sum())
}

fn ratio(part: u64, full: u64) -> f64 {
    if full == 0 {
        1.0
    } else {
        part as f64 / full as f64
    }
}

pub fn cost_report(spec: &ModelSpec, r: SliceRate) -> Result<CostReport> {
    let at_rate = raw_costs(spec, r)?;
    let full = raw_costs(spec, SliceRate::FULL)?;
    let rows: Vec<CostRow> = at_rate
        .into_iter()
        .zip(&full)
        .map(|(row, f)| CostRow {
            params_ratio: ratio(row.params, f.params),
            flops_ratio: ratio(row.flops, f.flops),
            layer: row.layer,
            role: row.role,
            params: row.params,
            flops: row.flops,
        })
        .collect();
    let total_params = rows.iter().map(|r| r.params).sum();
    let total_flops = rows.iter().map(|r| r.flops).sum();
    let full_params = full.iter().map(|r| r.params).sum();
    let full_flops = full.iter().map(|r| r.flops).sum();
    Ok(CostReport {
        rate: r.get(),
        rows,
        total_params,
        total_flops,
        full_params,
        full_flops,
        params_ratio: ratio(total_params, full_params),
        flops_ratio: ratio(total_flops, full_flops),
    })
}

/// Largest listed rate with `r <= min(sqrt(budget / full_cost), 1)`.
pub fn max_rate_for_budget(budget: f64, full_cost: f64, list: &SliceRateList) -> Result<f64> {
    if !(budget > 0.0 && full_cost > 0.0) {
        return Err(Error::Config(format!(
            "budget ({budget}) and full cost ({full_cost}) must be positive"
        )));
    }
    let ratio = budget / full_cost;
    let bound = ratio.sqrt().min(1.0);
    list.rates()
        .iter()
        .rev()
        .copied()
        .find(|&r| r <= bound || r * r <= ratio)
        .ok_or_else(|| Error::BudgetInfeasible {
            ratio,
            base_ratio: list.lower_bound().powi(2),
        })
}

impl CostReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut write = |rec: [String; 6]| {
            w.write_record(&rec)
                .map_err(|e| Error::Data(format!("csv: {e}")))
        };
        write(
            [
                "layer",
                "role",
                "params",
                "flops",
                "params_ratio",
                "flops_ratio",
            ]
            .map(String::from),
        )?;
        for r in &self.rows {
            write([
                r.layer.clone(),
                serde_json::to_value(r.role)
                    .ok()
                    .and_then(|v| v.as_str().map(String::from))
                    .unwrap_or_default(),
                r.params.to_string(),
                r.flops.to_string(),
                r.params_ratio.to_string(),
                r.flops_ratio.to_string(),
            ])?;
        }
        write([
            "total".into(),
            String::new(),
            self.total_params.to_string(),
            self.total_flops.to_string(),
            self.params_ratio.to_string(),
            self.flops_ratio.to_string(),
        ])?;
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Data(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("ascii csv"))
    }
}
