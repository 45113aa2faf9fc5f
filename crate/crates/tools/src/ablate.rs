//! The depth-strategy × fusion-strategy ablation grid.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ssc_core::config::PipelineConfig;
use ssc_core::depth::DepthStrategy;
use ssc_core::fusion::FusionStrategy;
use ssc_core::metrics::Metrics;
use ssc_core::train::train_toy;

/// A full-scale result quoted for orientation only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reference {
    pub setting: &'static str,
    pub iou: f64,
    pub miou: f64,
}

pub const REF_DEPTH_REFINEMENT: Reference = Reference {
    setting: "Depth Refinement",
    iou: 47.87,
    miou: 19.83,
};
pub const REF_COST_VOLUME_AR: Reference = Reference {
    setting: "Cost Volume + AR",
    iou: 47.76,
    miou: 19.59,
};
pub const REF_COST_VOLUME_DDVM: Reference = Reference {
    setting: "Cost Volume + DDVM",
    iou: 47.91,
    miou: 20.36,
};
pub const REF_WITHOUT_AAF: Reference = Reference {
    setting: "w/o AAF",
    iou: 47.84,
    miou: 19.56,
};
pub const REF_3D_CA: Reference = Reference {
    setting: "3D CA",
    iou: 48.25,
    miou: 20.08,
};
pub const REF_AAF: Reference = Reference {
    setting: "AAF",
    iou: 47.91,
    miou: 20.36,
};
/// Full-model benchmark results (SemanticKITTI test, SSCBench-KITTI-360 test).
pub const REF_SEMANTIC_KITTI: Reference = Reference {
    setting: "SemanticKITTI test",
    iou: 48.12,
    miou: 19.32,
};
pub const REF_KITTI_360: Reference = Reference {
    setting: "SSCBench-KITTI-360 test",
    iou: 48.61,
    miou: 21.78,
};

pub const DEPTH_AXIS: [DepthStrategy; 3] = [DepthStrategy::Ddvm, DepthStrategy::Ar, DepthStrategy::OneHot];
pub const FUSION_AXIS: [FusionStrategy; 3] = [FusionStrategy::Aaf, FusionStrategy::Ca3d, FusionStrategy::None];

/// Reference rows matching a cell, if any.
pub fn references(depth: DepthStrategy, fusion: FusionStrategy) -> &'static [Reference] {
    use DepthStrategy as D;
    use FusionStrategy as F;
    match (depth, fusion) {
        (D::Ddvm, F::Aaf) => &[REF_COST_VOLUME_DDVM, REF_AAF],
        (D::Ar, F::Aaf) => &[REF_COST_VOLUME_AR],
        (D::OneHot, F::Aaf) => &[REF_DEPTH_REFINEMENT],
        (D::Ddvm, F::Ca3d) => &[REF_3D_CA],
        (D::Ddvm, F::None) => &[REF_WITHOUT_AAF],
        _ => &[],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub depth: DepthStrategy,
    pub fusion: FusionStrategy,
    /// `Err` holds the reason the cell is reported as FAILED.
    pub result: Result<Metrics, String>,
}

pub fn cell_config(base: &PipelineConfig, depth: DepthStrategy, fusion: FusionStrategy) -> PipelineConfig {
    PipelineConfig {
        depth_strategy: depth,
        fusion_strategy: fusion,
        ..*base
    }
}

pub fn run_cell(base: &PipelineConfig, depth: DepthStrategy, fusion: FusionStrategy) -> Cell {
    let result = match train_toy(&cell_config(base, depth, fusion), |_| {}) {
        Ok(out) => match (out.diverged, out.eval) {
            (None, Some(m)) => Ok(m),
            (Some(why), _) => Err(format!("diverged at {why}")),
            (None, None) => Err("no evaluation".into()),
        },
        Err(e) => Err(e.to_string()),
    };
    Cell { depth, fusion, result }
}

/// Worker count from `SSC_THREADS`, else the available parallelism.
pub fn thread_count() -> usize {
    std::env::var("SSC_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Trains and evaluates all nine cells, `threads` at a time, in grid order.
pub fn run_grid(base: &PipelineConfig, threads: usize, on_done: impl Fn(&Cell) + Sync) -> Vec<Cell> {
    let jobs: Vec<(DepthStrategy, FusionStrategy)> = DEPTH_AXIS
        .iter()
        .flat_map(|&d| FUSION_AXIS.iter().map(move |&f| (d, f)))
        .collect();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Cell>>> = Mutex::new(vec![None; jobs.len()]);
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, jobs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(d, f)) = jobs.get(i) else { break };
                let cell = run_cell(base, d, f);
                on_done(&cell);
                slots.lock().unwrap()[i] = Some(cell);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|c| c.expect("every cell ran"))
        .collect()
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// Header plus one row per cell. Desk-scale scores are percentages.
pub fn format_table(cells: &[Cell]) -> String {
    let header = format!(
        "{:<16} | {:>7} | {:>7} | {}",
        "Setting", "IoU", "mIoU", "full-scale reference (not reproducible at desk scale)"
    );
    let mut out = header + "\n";
    for c in cells {
        let setting = format!("{} + {}", c.depth.name(), c.fusion.name());
        let (iou, miou) = match &c.result {
            Ok(m) => (pct(m.iou), pct(m.miou)),
            Err(_) => ("FAILED".to_string(), "FAILED".to_string()),
        };
        let refs: Vec<String> = references(c.depth, c.fusion)
            .iter()
            .map(|r| format!("{} {:.2}/{:.2}", r.setting, r.iou, r.miou))
            .collect();
        let refs = if refs.is_empty() { "-".to_string() } else { refs.join("; ") };
        out += &format!("{setting:<16} | {iou:>7} | {miou:>7} | {refs}\n");
    }
    out
}
