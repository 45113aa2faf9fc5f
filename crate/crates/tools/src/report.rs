use serde_json::{json, Value};
use ssc_core::metrics::Metrics;
use ssc_core::suite::{ModuleCheck, SUITE_THRESHOLD};
use ssc_core::train::TrainOutcome;

pub fn metrics_json(m: &Metrics) -> Value {
    json!({
        "iou": m.iou,
        "miou": m.miou,
        "per_class_iou": m.per_class,
    })
}

pub fn train_json(out: &TrainOutcome) -> Value {
    json!({
        "steps_completed": out.log.len(),
        "initial_loss": out.initial_loss,
        "final_loss": if out.final_loss.is_finite() { json!(out.final_loss) } else { Value::Null },
        "eval": out.eval.as_ref().map(metrics_json),
        "random_baseline_miou": out.random_miou,
        "class_weights": out.class_weights,
        "diverged": out.diverged,
    })
}

pub fn gradcheck_lines(report: &[ModuleCheck]) -> Vec<String> {
    let mut lines = Vec::new();
    for m in report {
        for op in &m.ops {
            for e in &op.entries {
                lines.push(format!(
                    "  {:<32} {:<28} {:>10.3e}  ({} checked)",
                    op.op, e.name, e.max_rel_err, e.checked
                ));
            }
        }
        let verdict = if m.passed() { "ok" } else { "FAIL" };
        lines.push(format!(
            "{:<14} max rel err {:.3e}  [{verdict}, threshold {SUITE_THRESHOLD:e}]",
            m.module,
            m.max_rel_err()
        ));
    }
    lines
}
