use serde::Serialize;

use super::{CurvePoint, FrontError, SparsityRow};
use crate::perf::{Bottleneck, LayerReport, SimReport};

/// One CSV row per layer of a performance report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub index: usize,
    pub name: String,
    pub kind: String,
    pub tiles: usize,
    pub dense_macs: u64,
    pub aligned_macs: u64,
    pub input_density: f64,
    pub weight_density: f64,
    pub output_density: f64,
    pub input_on_chip: bool,
    pub output_on_chip: bool,
    pub compute_cycles: u64,
    pub fill_cycles: u64,
    pub memory_cycles: u64,
    pub total_cycles: u64,
    pub dma_read_bytes: u64,
    pub dma_write_bytes: u64,
    pub mac_fj: u64,
    pub rounding_fj: u64,
    pub sparsity_scan_fj: u64,
    pub weight_buffer_fj: u64,
    pub activation_buffer_fj: u64,
    pub mask_buffer_fj: u64,
    pub dram_fj: u64,
    pub host_fj: u64,
    pub leakage_fj: u64,
    pub energy_fj: u64,
    pub bottleneck: Bottleneck,
}

impl From<&LayerReport> for ReportRow {
    fn from(l: &LayerReport) -> Self {
        let c = &l.cost;
        let e = &c.energy;
        ReportRow {
            index: l.index,
            name: l.name.clone(),
            kind: l.kind.clone(),
            tiles: l.tiles,
            dense_macs: l.dense_macs,
            aligned_macs: c.aligned_macs,
            input_density: l.input_density,
            weight_density: l.weight_density,
            output_density: l.output_density,
            input_on_chip: l.input_on_chip,
            output_on_chip: l.output_on_chip,
            compute_cycles: c.compute_cycles,
            fill_cycles: c.fill_cycles,
            memory_cycles: c.memory_cycles,
            total_cycles: c.total_cycles,
            dma_read_bytes: c.dma_read_bytes,
            dma_write_bytes: c.dma_write_bytes,
            mac_fj: e.mac_fj,
            rounding_fj: e.rounding_fj,
            sparsity_scan_fj: e.sparsity_scan_fj,
            weight_buffer_fj: e.weight_buffer_fj,
            activation_buffer_fj: e.activation_buffer_fj,
            mask_buffer_fj: e.mask_buffer_fj,
            dram_fj: e.dram_fj,
            host_fj: e.host_fj,
            leakage_fj: e.leakage_fj,
            energy_fj: e.total_fj,
            bottleneck: c.bottleneck,
        }
    }
}

fn to_csv<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<String, FrontError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| FrontError::Runtime(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| FrontError::Runtime(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn report_csv(report: &SimReport) -> Result<String, FrontError> {
    to_csv(report.layers.iter().map(ReportRow::from))
}

pub fn curve_csv(curve: &[CurvePoint]) -> Result<String, FrontError> {
    to_csv(curve)
}

pub fn sparsity_csv(rows: &[SparsityRow]) -> Result<String, FrontError> {
    to_csv(rows)
}
