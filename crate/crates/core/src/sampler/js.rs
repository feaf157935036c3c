use std::f64::consts::LN_2;

/// Upper bound on histogram bins, reached only for heavy-tailed pools.
const MAX_BINS: usize = 4096;

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn is_single_point(v: &[f64]) -> bool {
    v.iter().all(|x| *x == v[0])
}

/// Jensen–Shannon divergence (nats) between two 1-D sample sets, using
/// shared Freedman–Diaconis bins on the pooled sample.
///
/// A set whose samples all coincide has no usable density; the result is
/// then `ln 2` and a warning is logged.
pub fn js_divergence_1d(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() || is_single_point(a) || is_single_point(b) {
        log::warn!("degenerate pose marginal; reporting ln 2");
        return LN_2;
    }
    if a == b {
        return 0.0;
    }
    let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let (lo, hi) = (pooled[0], pooled[pooled.len() - 1]);
    let iqr = quantile(&pooled, 0.75) - quantile(&pooled, 0.25);
    let n = pooled.len() as f64;
    let width = if iqr > 0.0 {
        2.0 * iqr / n.cbrt()
    } else {
        (hi - lo) / n.sqrt()
    };
    let bins = (((hi - lo) / width).ceil() as usize).clamp(1, MAX_BINS);
    let width = (hi - lo) / bins as f64;
    let hist = |v: &[f64]| {
        let mut h = vec![0.0; bins];
        for x in v {
            let k = (((x - lo) / width) as usize).min(bins - 1);
            h[k] += 1.0;
        }
        let s = v.len() as f64;
        h.iter_mut().for_each(|c| *c /= s);
        h
    };
    let (p, q) = (hist(a), hist(b));
    let kl = |p: f64, m: f64| if p > 0.0 { p * (p / m).ln() } else { 0.0 };
    let js: f64 = p
        .iter()
        .zip(&q)
        .map(|(&p, &q)| {
            let m = 0.5 * (p + q);
            0.5 * (kl(p, m) + kl(q, m))
        })
        .sum();
    js.clamp(0.0, LN_2)
}

/// Convergence statistic between two pose snapshots (rows = chains,
/// columns = pose factors): the largest per-factor JS divergence.
pub fn convergence_js(before: &[Vec<f64>], after: &[Vec<f64>]) -> f64 {
    let factors = before.first().map_or(0, |r| r.len());
    (0..factors)
        .map(|k| {
            let a: Vec<f64> = before.iter().map(|r| r[k]).collect();
            let b: Vec<f64> = after.iter().map(|r| r[k]).collect();
            js_divergence_1d(&a, &b)
        })
        .fold(0.0, f64::max)
}
