//! Deterministic run execution: forward, composed loss, backward, Adam,
//! then the loss-free bias update, once per step.

use crate::model::{ForwardOutput, TokenBatch, TransformerLM};
use crate::moe::update_loss_free_bias;
use crate::tensor::{Element, Graph, TensorId};

use super::adam::{adam_step, AdamState};
use super::metrics::{load_imbalance, DomainCe, LayerMetrics, MetricsRecord, PoolMetrics};
use super::schedule::lr_at;
use super::{TrainConfig, TrainError};

/// Deterministic supplier of training sequences.
pub trait TokenSource {
    /// The next sequence of exactly `len` token ids.
    fn next_sequence(&mut self, len: usize) -> Vec<u32>;
}

/// Held-out evaluation data: one sequence list per domain.
#[derive(Clone, Debug, Default)]
pub struct EvalSet {
    pub domains: Vec<(String, Vec<Vec<u32>>)>,
}

/// Composed training loss `L_CE + lb_weight * L_LB + z_weight * L_RZ`.
/// Zero-weighted terms are skipped entirely.
pub fn total_loss<T: Element>(
    graph: &mut Graph<T>,
    ce: TensorId,
    lb: Option<TensorId>,
    z: Option<TensorId>,
    lb_weight: f64,
    z_weight: f64,
) -> Result<TensorId, TrainError> {
    let mut total = ce;
    if lb_weight != 0.0 {
        if let Some(lb) = lb {
            let scaled = graph.scale(lb, lb_weight);
            total = graph.add(total, scaled)?;
        }
    }
    if z_weight != 0.0 {
        if let Some(z) = z {
            let scaled = graph.scale(z, z_weight);
            total = graph.add(total, scaled)?;
        }
    }
    Ok(total)
}

/// Outcome of a completed run.
pub struct RunResult<T: Element> {
    pub model: TransformerLM<T>,
    pub records: Vec<MetricsRecord>,
}

/// Runs the full training loop.
///
/// Per step: assemble a batch, forward, compose the loss, backward, Adam
/// update at the scheduled rate, then nudge every pool's loss-free bias
/// from that step's raw loads. Metrics are recorded every step and passed
/// to `sink` as they are produced. A non-finite loss aborts with a
/// diagnostic naming the step, component, and layer.
pub fn train_run<T: Element>(
    mut model: TransformerLM<T>,
    data: &mut dyn TokenSource,
    cfg: &TrainConfig,
    eval: Option<&EvalSet>,
    mut sink: impl FnMut(&MetricsRecord),
) -> Result<RunResult<T>, TrainError> {
    let total_steps = cfg.total_steps()?;
    let lb_weight = model.arch.layer_spec.lb_weight;
    let z_weight = model.arch.layer_spec.z_weight;
    let mut adam = AdamState::new(&model.params);
    let mut records = Vec::with_capacity(total_steps as usize);

    for step in 0..total_steps {
        let rows: Vec<Vec<u32>> = (0..cfg.batch_size)
            .map(|_| data.next_sequence(cfg.seq_len + 1))
            .collect();
        let mut inputs = Vec::with_capacity(cfg.batch_size * cfg.seq_len);
        let mut targets = Vec::with_capacity(cfg.batch_size * cfg.seq_len);
        for row in &rows {
            inputs.extend_from_slice(&row[..cfg.seq_len]);
            targets.extend(row[1..].iter().map(|&t| t as usize));
        }
        let batch = TokenBatch::new(cfg.batch_size, cfg.seq_len, inputs)?;

        let mut graph = Graph::new();
        let bound = model.params.bind(&mut graph);
        let out = model.forward(&mut graph, &bound, &batch)?;
        let ce = graph.cross_entropy(out.logits, &targets)?;
        let total = total_loss(&mut graph, ce, out.lb, out.z, lb_weight, z_weight)?;

        let ce_value = value(&graph, ce);
        let lb_value = out.lb.map(|id| value(&graph, id)).unwrap_or(0.0);
        let z_value = out.z.map(|id| value(&graph, id)).unwrap_or(0.0);
        let total_value = value(&graph, total);
        check_finite(step, &graph, ce_value, lb_value, z_value, total_value, &out)?;

        graph.backward(total)?;
        let grads = model.params.collect_grads(&graph, &bound);
        // Schedule indexed from 1 so the first update moves and the last
        // lands exactly on the 0.1 * peak endpoint.
        let lr = lr_at(step + 1, cfg)?;
        adam_step(
            &mut model.params,
            &grads,
            &mut adam,
            lr,
            (cfg.beta1, cfg.beta2),
        )?;

        // Loss-free bias update: once per step per pool, after the
        // optimizer, entirely outside the gradient path.
        for (block, layer_reports) in model.blocks.iter_mut().zip(&out.reports) {
            for (pool, report) in block.moe.pools.iter_mut().zip(layer_reports) {
                update_loss_free_bias(&mut pool.router_state, &report.stats.raw_loads);
            }
        }

        let mut record = build_record(step, lr, ce_value, lb_value, z_value, total_value, &out);
        let is_last = step + 1 == total_steps;
        let eval_due = cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0;
        if let Some(eval_set) = eval {
            if is_last || eval_due {
                let (macro_ce, domains) = macro_eval(&model, eval_set, cfg.batch_size)?;
                record.eval_macro_ce = Some(macro_ce);
                record.eval_domains = domains;
            }
        }
        sink(&record);
        records.push(record);
    }

    Ok(RunResult { model, records })
}

/// Macro-averaged held-out cross entropy: the unweighted mean of each
/// domain's mean per-token CE, plus the per-domain breakdown.
pub fn macro_eval<T: Element>(
    model: &TransformerLM<T>,
    eval: &EvalSet,
    batch_size: usize,
) -> Result<(f64, Vec<DomainCe>), TrainError> {
    if eval.domains.is_empty() {
        return Err(TrainError::BadConfig("no eval domains".to_string()));
    }
    let mut out = Vec::with_capacity(eval.domains.len());
    for (name, seqs) in &eval.domains {
        if seqs.is_empty() {
            return Err(TrainError::BadConfig(format!("eval domain {name} is empty")));
        }
        let mut nll_sum = 0.0f64;
        let mut count = 0u64;
        for chunk in seqs.chunks(batch_size.max(1)) {
            let seq = chunk[0].len() - 1;
            let mut inputs = Vec::with_capacity(chunk.len() * seq);
            let mut targets = Vec::with_capacity(chunk.len() * seq);
            for row in chunk {
                inputs.extend_from_slice(&row[..seq]);
                targets.extend(row[1..].iter().map(|&t| t as usize));
            }
            let batch = TokenBatch::new(chunk.len(), seq, inputs)?;
            let mut graph = Graph::new();
            let bound = model.params.bind(&mut graph);
            let fwd = model.forward(&mut graph, &bound, &batch)?;
            let ce = graph.cross_entropy(fwd.logits, &targets)?;
            nll_sum += value(&graph, ce) * targets.len() as f64;
            count += targets.len() as u64;
        }
        out.push(DomainCe {
            domain: name.clone(),
            ce: nll_sum / count as f64,
        });
    }
    let macro_ce = out.iter().map(|d| d.ce).sum::<f64>() / out.len() as f64;
    Ok((macro_ce, out))
}

fn value<T: Element>(graph: &Graph<T>, id: TensorId) -> f64 {
    graph.value(id).item().to_f64().unwrap()
}

fn check_finite<T: Element>(
    step: u64,
    _graph: &Graph<T>,
    ce: f64,
    lb: f64,
    z: f64,
    total: f64,
    out: &ForwardOutput,
) -> Result<(), TrainError> {
    let fail = |component: &str, layer: Option<usize>| TrainError::NonFinite {
        step,
        component: component.to_string(),
        layer,
    };
    for (li, layer_reports) in out.reports.iter().enumerate() {
        for report in layer_reports {
            if !report.lb_value.is_finite() {
                return Err(fail("lb_loss", Some(li)));
            }
            if !report.z_value.is_finite() {
                return Err(fail("z_loss", Some(li)));
            }
        }
    }
    if !ce.is_finite() {
        return Err(fail("cross_entropy", None));
    }
    if !lb.is_finite() {
        return Err(fail("lb_loss", None));
    }
    if !z.is_finite() {
        return Err(fail("z_loss", None));
    }
    if !total.is_finite() {
        return Err(fail("total_loss", None));
    }
    Ok(())
}

fn build_record(
    step: u64,
    lr: f64,
    train_ce: f64,
    lb_loss: f64,
    z_loss: f64,
    total_loss: f64,
    out: &ForwardOutput,
) -> MetricsRecord {
    let mut layers = Vec::with_capacity(out.reports.len());
    let mut dropped = 0u64;
    let mut slots = 0u64;
    for layer_reports in &out.reports {
        let mut pools = Vec::with_capacity(layer_reports.len());
        let mut imbalances = Vec::with_capacity(layer_reports.len());
        for report in layer_reports {
            dropped += report.dropped_slots;
            slots += report.total_slots;
            imbalances.push(load_imbalance(&report.stats.raw_loads).unwrap_or(1.0));
            pools.push(PoolMetrics {
                raw_loads: report.stats.raw_loads.clone(),
                load_fraction: report.stats.load_fraction.clone(),
                mean_prob: report.stats.mean_prob.clone(),
                lb: report.lb_value,
                z: report.z_value,
                dropped: report.dropped_slots,
                slots: report.total_slots,
            });
        }
        let imbalance = if imbalances.is_empty() {
            1.0
        } else {
            imbalances.iter().sum::<f64>() / imbalances.len() as f64
        };
        layers.push(LayerMetrics { imbalance, pools });
    }
    MetricsRecord {
        step,
        lr,
        train_ce,
        lb_loss,
        z_loss,
        total_loss,
        imbalance_per_layer: layers.iter().map(|l| l.imbalance).collect(),
        dropped_fraction: if slots == 0 {
            0.0
        } else {
            dropped as f64 / slots as f64
        },
        layers,
        eval_macro_ce: None,
        eval_domains: Vec::new(),
    }
}
