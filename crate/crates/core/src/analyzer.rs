//! Shape-driven cost and temporal receptive-field reports.

use serde::{Deserialize, Serialize};

use crate::block::{BlockVariant, TemporalExtent};
use crate::error::Result;
use crate::mta::FRAGMENTS;
use crate::network::{build_graph, Graph, LayerKind, NetworkSpec};

pub const CONVENTION: &str = "1 MAC = 1 FLOP";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct InputDims {
    pub T: usize,
    pub H: usize,
    pub W: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: LayerKind,
    pub out_shape: [usize; 4],
    pub macs: u64,
    pub params: u64,
    pub aux_ops: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub macs: u64,
    pub params: u64,
    pub aux_ops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub convention: String,
    pub input: InputDims,
    pub layers: Vec<LayerCost>,
    pub totals: Totals,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockRf {
    pub name: String,
    pub variant: BlockVariant,
    pub radius: usize,
    pub past: usize,
    pub future: usize,
    pub fragment_radii: Option<[usize; FRAGMENTS]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RfReport {
    pub per_block: Vec<BlockRf>,
    /// Summed aggregation radius of each stage.
    pub per_stage: Vec<usize>,
    pub cumulative: TemporalExtent,
}

/// Full analyzer output: costs plus temporal receptive field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub convention: String,
    pub input: InputDims,
    pub layers: Vec<LayerCost>,
    pub totals: Totals,
    pub temporal_rf: RfReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub layers: Vec<(String, u64)>,
    pub total: u64,
}

fn cost_from_graph(g: &Graph) -> CostReport {
    let layers: Vec<LayerCost> = g
        .layers
        .iter()
        .map(|l| LayerCost {
            name: l.name.clone(),
            kind: l.kind,
            out_shape: l.out_shape,
            macs: l.macs,
            params: l.params,
            aux_ops: l.aux_ops,
        })
        .collect();
    let totals = layers.iter().fold(Totals::default(), |t, l| Totals {
        macs: t.macs + l.macs,
        params: t.params + l.params,
        aux_ops: t.aux_ops + l.aux_ops,
    });
    CostReport {
        convention: CONVENTION.into(),
        input: InputDims {
            T: g.input.frames,
            H: g.input.height,
            W: g.input.width,
        },
        layers,
        totals,
    }
}

fn rf_from_graph(spec: &NetworkSpec, g: &Graph) -> RfReport {
    let per_block: Vec<BlockRf> = g
        .blocks
        .iter()
        .map(|b| BlockRf {
            name: b.name.clone(),
            variant: b.variant,
            radius: b.extent.radius,
            past: b.extent.past,
            future: b.extent.future,
            fragment_radii: b.fragment_radii,
        })
        .collect();
    let mut per_stage = Vec::with_capacity(spec.stages.len());
    let mut it = per_block.iter();
    for st in &spec.stages {
        per_stage.push(it.by_ref().take(st.blocks).map(|b| b.radius).sum());
    }
    let cumulative = per_block.iter().fold(TemporalExtent::default(), |c, b| TemporalExtent {
        radius: c.radius + b.radius,
        past: c.past + b.past,
        future: c.future + b.future,
    });
    RfReport {
        per_block,
        per_stage,
        cumulative,
    }
}

/// MACs, parameters and auxiliary element ops of `spec` on one clip of
/// `frames x height x width`.
pub fn count_flops(spec: &NetworkSpec, frames: usize, height: usize, width: usize) -> Result<CostReport> {
    let spec = spec.clone().with_input(frames, height, width);
    spec.validate()?;
    Ok(cost_from_graph(&build_graph(&spec)?))
}

pub fn count_params(spec: &NetworkSpec) -> Result<ParamReport> {
    spec.validate()?;
    let g = build_graph(spec)?;
    let layers: Vec<(String, u64)> = g
        .layers
        .iter()
        .filter(|l| l.params > 0)
        .map(|l| (l.name.clone(), l.params))
        .collect();
    let total = layers.iter().map(|(_, p)| p).sum();
    Ok(ParamReport { layers, total })
}

pub fn temporal_rf(spec: &NetworkSpec) -> Result<RfReport> {
    spec.validate()?;
    Ok(rf_from_graph(spec, &build_graph(spec)?))
}

pub fn analyze(spec: &NetworkSpec, frames: usize, height: usize, width: usize) -> Result<AnalysisReport> {
    let spec = spec.clone().with_input(frames, height, width);
    spec.validate()?;
    let g = build_graph(&spec)?;
    let cost = cost_from_graph(&g);
    Ok(AnalysisReport {
        convention: cost.convention,
        input: cost.input,
        layers: cost.layers,
        totals: cost.totals,
        temporal_rf: rf_from_graph(&spec, &g),
    })
}
