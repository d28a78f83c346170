//! Evaluation metrics and experiment protocols: error / log-likelihood /
//! entropy reports, epsilon sweeps, paired-attack studies, and cross-dataset
//! transfer tables. All log quantities are in nats.

use crate::attack::{cw_l2_batch, fgsm_examples, AttackResult, CwConfig, FgsmConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::Tensor;

/// Scoring summary of one model on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub dataset: String,
    pub model: String,
    pub n: usize,
    /// fraction of items whose argmax prediction differs from the label
    pub error: f64,
    /// mean log p(y | x), in nats (0 is perfect, -2.3026 is uniform over 10)
    pub mean_ll: f64,
    /// mean predictive entropy -sum p log p, in nats, in [0, ln C]
    pub mean_entropy: f64,
}

/// Argmax with ties broken toward the lowest class index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Entropy of a probability row given log-probabilities; 0*log(0) counts as 0.
fn entropy_from_log_probs(log_row: &[f64]) -> f64 {
    let mut h = 0.0;
    for &lp in log_row {
        let p = lp.exp();
        if p > 0.0 {
            h -= p * lp;
        }
    }
    h.max(0.0)
}

/// Score `model` on a dataset, processing `batch` items per forward pass.
pub fn evaluate(model: &Model, ds: &Dataset, batch: usize) -> Result<EvalReport> {
    if ds.n() == 0 {
        return Err(Error::Data("evaluate: empty dataset".into()));
    }
    if batch == 0 {
        return Err(Error::InvalidArg("evaluate: batch must be positive".into()));
    }
    let c = model.classes();
    let mut wrong = 0usize;
    let mut ll_sum = 0.0;
    let mut ent_sum = 0.0;
    let flat = ds.flat_x();
    let dim = ds.item_numel();
    for start in (0..ds.n()).step_by(batch) {
        let stop = (start + batch).min(ds.n());
        let part = Tensor::new(&[stop - start, dim], flat.data()[start * dim..stop * dim].to_vec())?;
        let log_probs = model.predict_log_probs(&part)?;
        let lp = log_probs.data();
        for i in 0..stop - start {
            let row = &lp[i * c..(i + 1) * c];
            let y = ds.y[start + i];
            if y >= c {
                return Err(Error::Data(format!("label {} exceeds model classes {}", y, c)));
            }
            if argmax_row(row) != y {
                wrong += 1;
            }
            ll_sum += row[y];
            ent_sum += entropy_from_log_probs(row);
        }
    }
    let n = ds.n() as f64;
    Ok(EvalReport {
        dataset: ds.name.clone(),
        model: model.spec.name.clone(),
        n: ds.n(),
        error: wrong as f64 / n,
        mean_ll: ll_sum / n,
        mean_entropy: ent_sum / n,
    })
}

// ---------------------------------------------------------------------------
// Epsilon sweep (cross-model gradient-sign protocol)
// ---------------------------------------------------------------------------

/// One sweep point: gradient-sign examples at `eps` (generated on the source
/// model) scored by every model.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub eps: f64,
    /// one report per model, in the order the models were given
    pub reports: Vec<EvalReport>,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub source: String,
    pub rows: Vec<SweepRow>,
}

/// For each epsilon, generate gradient-sign examples on `source` only, then
/// score every model in `models` on those same examples. Epsilons must be
/// strictly increasing; an epsilon of zero reproduces each model's clean
/// report exactly.
pub fn epsilon_sweep(
    models: &[&Model],
    source: &Model,
    ds: &Dataset,
    epsilons: &[f64],
    bounds: (f64, f64),
) -> Result<SweepReport> {
    if models.is_empty() || epsilons.is_empty() {
        return Err(Error::InvalidArg("epsilon_sweep: need at least one model and epsilon".into()));
    }
    for w in epsilons.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::InvalidArg(format!(
                "epsilons must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
    }
    let xs = ds.flat_x();
    let mut rows = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let adv = fgsm_examples(source, &xs, &ds.y, &FgsmConfig { eps, bounds })?;
        let adv_ds = Dataset::new(
            format!("{}+fgsm", ds.name),
            adv,
            ds.y.clone(),
            ds.classes,
            bounds,
        )?;
        let mut reports = Vec::with_capacity(models.len());
        for m in models {
            reports.push(evaluate(m, &adv_ds, 256)?);
        }
        rows.push(SweepRow { eps, reports });
    }
    Ok(SweepReport { source: source.spec.name.clone(), rows })
}

// ---------------------------------------------------------------------------
// Paired L2-attack study
// ---------------------------------------------------------------------------

/// Cross-scoring cell: scorer model evaluated on the successful adversarial
/// examples generated against a source model.
#[derive(Debug, Clone)]
pub struct CwCell {
    pub source: String,
    pub scorer: String,
    pub n: usize,
    pub error: f64,
    pub mean_ll: f64,
}

#[derive(Debug)]
pub struct CwStudy {
    /// items from the pool that both models classified correctly
    pub kept: usize,
    pub skipped: usize,
    pub fail_a: usize,
    pub fail_b: usize,
    pub results_a: Vec<AttackResult>,
    pub results_b: Vec<AttackResult>,
    /// cells in order (src a, score a), (src a, score b), (src b, score a), (src b, score b)
    pub table: Vec<CwCell>,
    /// d_b(i) - d_a(i) over items where both attacks succeeded
    pub paired_diffs: Vec<f64>,
    pub mean_paired_diff: f64,
    /// fixed-width histogram of the paired differences: (bin lower edge, count)
    pub histogram: Vec<(f64, usize)>,
}

pub const PAIRED_DIFF_BIN_WIDTH: f64 = 0.25;

fn histogram_quarter_bins(values: &[f64]) -> Vec<(f64, usize)> {
    if values.is_empty() {
        return Vec::new();
    }
    let w = PAIRED_DIFF_BIN_WIDTH;
    let lo_bin = values.iter().map(|v| (v / w).floor() as i64).min().unwrap();
    let hi_bin = values.iter().map(|v| (v / w).floor() as i64).max().unwrap();
    let mut counts = vec![0usize; (hi_bin - lo_bin + 1) as usize];
    for v in values {
        counts[((v / w).floor() as i64 - lo_bin) as usize] += 1;
    }
    counts.into_iter().enumerate().map(|(i, c)| ((lo_bin + i as i64) as f64 * w, c)).collect()
}

fn attack_all(model: &Model, xs: &Tensor, ys: &[usize], cfg: &CwConfig, threads: usize) -> Result<Vec<AttackResult>> {
    let n = xs.shape()[0];
    let d = xs.shape()[1];
    if threads <= 1 || n <= 1 {
        return cw_l2_batch(model, xs, ys, cfg);
    }
    let threads = threads.min(n);
    let chunk = n.div_ceil(threads);
    let mut out: Vec<Option<Vec<AttackResult>>> = Vec::new();
    out.resize_with(threads, || None);
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for (t, slot) in out.iter_mut().enumerate() {
            let start = t * chunk;
            let stop = ((t + 1) * chunk).min(n);
            if start >= stop {
                continue;
            }
            let part_x = Tensor::new(&[stop - start, d], xs.data()[start * d..stop * d].to_vec())?;
            let part_y = ys[start..stop].to_vec();
            let model = model.clone();
            let cfg = *cfg;
            handles.push(scope.spawn(move || -> Result<()> {
                *slot = Some(cw_l2_batch(&model, &part_x, &part_y, &cfg)?);
                Ok(())
            }));
        }
        for h in handles {
            h.join().expect("attack thread panicked")?;
        }
        Ok(())
    })?;
    Ok(out.into_iter().flatten().flatten().collect())
}

fn score_on_adversarials(
    scorer: &Model,
    source_name: &str,
    results: &[AttackResult],
) -> Result<CwCell> {
    let succ: Vec<&AttackResult> = results.iter().filter(|r| r.success).collect();
    if succ.is_empty() {
        return Ok(CwCell {
            source: source_name.into(),
            scorer: scorer.spec.name.clone(),
            n: 0,
            error: f64::NAN,
            mean_ll: f64::NAN,
        });
    }
    let d = succ[0].adv.numel();
    let mut flat = Vec::with_capacity(succ.len() * d);
    let mut ys = Vec::with_capacity(succ.len());
    for r in &succ {
        flat.extend_from_slice(r.adv.data());
        ys.push(r.true_label);
    }
    let xs = Tensor::new(&[succ.len(), d], flat)?;
    let lp = scorer.predict_log_probs(&xs)?;
    let c = scorer.classes();
    let mut wrong = 0;
    let mut ll = 0.0;
    for (i, &y) in ys.iter().enumerate() {
        let row = &lp.data()[i * c..(i + 1) * c];
        if argmax_row(row) != y {
            wrong += 1;
        }
        ll += row[y];
    }
    Ok(CwCell {
        source: source_name.into(),
        scorer: scorer.spec.name.clone(),
        n: succ.len(),
        error: wrong as f64 / succ.len() as f64,
        mean_ll: ll / succ.len() as f64,
    })
}

/// Paired L2-attack protocol: filter the pool to items both models classify
/// correctly, attack each model on every kept item, then report failure
/// counts, the 2x2 cross-scoring table, and paired distance differences
/// (failures carry infinite distance and are excluded from the pairing).
/// `threads` parallelizes over disjoint image chunks; results are identical
/// for any thread count.
pub fn cw_study(
    model_a: &Model,
    model_b: &Model,
    pool: &Dataset,
    cfg: &CwConfig,
    threads: usize,
) -> Result<CwStudy> {
    let xs = pool.flat_x();
    let lp_a = model_a.predict_log_probs(&xs)?;
    let lp_b = model_b.predict_log_probs(&xs)?;
    let (ca, cb) = (model_a.classes(), model_b.classes());
    let mut keep = Vec::new();
    for i in 0..pool.n() {
        let pa = argmax_row(&lp_a.data()[i * ca..(i + 1) * ca]);
        let pb = argmax_row(&lp_b.data()[i * cb..(i + 1) * cb]);
        if pa == pool.y[i] && pb == pool.y[i] {
            keep.push(i);
        }
    }
    if keep.is_empty() {
        return Err(Error::Data("cw_study: no items classified correctly by both models".into()));
    }
    let (kept_x, kept_y) = pool.batch(&keep)?;

    let results_a = attack_all(model_a, &kept_x, &kept_y, cfg, threads)?;
    let results_b = attack_all(model_b, &kept_x, &kept_y, cfg, threads)?;

    let fail_a = results_a.iter().filter(|r| !r.success).count();
    let fail_b = results_b.iter().filter(|r| !r.success).count();

    let mut table = Vec::with_capacity(4);
    for (src_name, src_results) in [(&model_a.spec.name, &results_a), (&model_b.spec.name, &results_b)]
    {
        for scorer in [model_a, model_b] {
            table.push(score_on_adversarials(scorer, src_name, src_results)?);
        }
    }

    let mut paired_diffs = Vec::new();
    for (ra, rb) in results_a.iter().zip(&results_b) {
        if ra.success && rb.success {
            paired_diffs.push(rb.l2 - ra.l2);
        }
    }
    let mean_paired_diff = if paired_diffs.is_empty() {
        f64::NAN
    } else {
        paired_diffs.iter().sum::<f64>() / paired_diffs.len() as f64
    };
    let histogram = histogram_quarter_bins(&paired_diffs);

    Ok(CwStudy {
        kept: keep.len(),
        skipped: pool.n() - keep.len(),
        fail_a,
        fail_b,
        results_a,
        results_b,
        table,
        paired_diffs,
        mean_paired_diff,
        histogram,
    })
}

// ---------------------------------------------------------------------------
// Transfer testing
// ---------------------------------------------------------------------------

/// Score every model on every dataset (dataset-major order).
pub fn transfer_test(models: &[&Model], datasets: &[&Dataset]) -> Result<Vec<EvalReport>> {
    let mut out = Vec::with_capacity(models.len() * datasets.len());
    for ds in datasets {
        for m in models {
            out.push(evaluate(m, ds, 256)?);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Decision-boundary grid
// ---------------------------------------------------------------------------

/// Class-1 probability and predictive entropy over a regular grid on a 2-D
/// input domain, row-major over (x0, x1): x0 is the outer loop.
pub fn boundary_grid(
    model: &Model,
    x0_range: (f64, f64),
    x1_range: (f64, f64),
    steps: usize,
) -> Result<Vec<(f64, f64, f64, f64)>> {
    if steps < 2 {
        return Err(Error::InvalidArg("grid needs at least 2 steps per axis".into()));
    }
    if model.classes() != 2 {
        return Err(Error::InvalidArg("boundary grid is defined for 2-class models".into()));
    }
    let lerp = |r: (f64, f64), i: usize| r.0 + (r.1 - r.0) * i as f64 / (steps - 1) as f64;
    let mut points = Vec::with_capacity(steps * steps * 2);
    for i in 0..steps {
        for j in 0..steps {
            points.push(lerp(x0_range, i));
            points.push(lerp(x1_range, j));
        }
    }
    let total = steps * steps;
    let mut out = Vec::with_capacity(total);
    let chunk = 512;
    for start in (0..total).step_by(chunk) {
        let stop = (start + chunk).min(total);
        let part = Tensor::new(&[stop - start, 2], points[start * 2..stop * 2].to_vec())?;
        let lp = model.predict_log_probs(&part)?;
        for k in 0..stop - start {
            let row = &lp.data()[k * 2..(k + 1) * 2];
            let p1 = row[1].exp();
            out.push((
                points[(start + k) * 2],
                points[(start + k) * 2 + 1],
                p1,
                entropy_from_log_probs(row),
            ));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// CSV serialization (stable layouts, deterministic bytes)
// ---------------------------------------------------------------------------

/// `dataset,model,n,error,ll,entropy` rows.
pub fn eval_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("dataset,model,n,error,ll,entropy\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.dataset, r.model, r.n, r.error, r.mean_ll, r.mean_entropy
        ));
    }
    out
}

/// `epsilon,model,error,ll,entropy` rows, one per (epsilon, model).
pub fn sweep_csv(report: &SweepReport) -> String {
    let mut out = String::from("epsilon,model,error,ll,entropy\n");
    for row in &report.rows {
        for rep in &row.reports {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.eps, rep.model, rep.error, rep.mean_ll, rep.mean_entropy
            ));
        }
    }
    out
}

/// `index,model,success,l2,clean_pred,adv_pred` rows for both attack sets.
pub fn cw_csv(study: &CwStudy, name_a: &str, name_b: &str) -> String {
    let mut out = String::from("index,model,success,l2,clean_pred,adv_pred\n");
    for (name, results) in [(name_a, &study.results_a), (name_b, &study.results_b)] {
        for (i, r) in results.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                i, name, r.success, r.l2, r.clean_pred, r.adv_pred
            ));
        }
    }
    out
}

/// Raw paired distances (`index,l2_a,l2_b,diff`) over items where both
/// attacks succeeded.
pub fn paired_csv(study: &CwStudy) -> String {
    let mut out = String::from("index,l2_a,l2_b,diff\n");
    let mut k = 0;
    for (i, (ra, rb)) in study.results_a.iter().zip(&study.results_b).enumerate() {
        if ra.success && rb.success {
            out.push_str(&format!("{},{},{},{}\n", i, ra.l2, rb.l2, study.paired_diffs[k]));
            k += 1;
        }
    }
    out
}

/// `bin_lo,bin_hi,count` rows of a paired-difference histogram.
pub fn histogram_csv(bins: &[(f64, usize)]) -> String {
    let mut out = String::from("bin_lo,bin_hi,count\n");
    for &(lo, c) in bins {
        out.push_str(&format!("{},{},{}\n", lo, lo + PAIRED_DIFF_BIN_WIDTH, c));
    }
    out
}

/// `x0,x1,p_class1,entropy` rows of a decision-boundary grid.
pub fn grid_csv(grid: &[(f64, f64, f64, f64)]) -> String {
    let mut out = String::from("x0,x1,p_class1,entropy\n");
    for &(x0, x1, p1, h) in grid {
        out.push_str(&format!("{},{},{},{}\n", x0, x1, p1, h));
    }
    out
}
