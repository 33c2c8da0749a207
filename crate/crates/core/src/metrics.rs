//! Forecast-quality metrics: empirical quantiles, pinball and CRPS, point
//! errors against the median, DTW, peak and cumulative errors, launch
//! summaries and the potential/risk segmentation.

use serde::{Deserialize, Serialize};

use crate::error::{CdlfError, Result};
use crate::scalar::Scalar;

/// Number of quantile levels `u_j = j / 100`, `j = 1..=99`.
pub const QUANTILE_LEVELS: usize = 99;

pub fn quantile_levels() -> Vec<f64> {
    (1..=QUANTILE_LEVELS).map(|j| j as f64 / 100.0).collect()
}

fn sorted<T: Scalar>(samples: &[T]) -> Vec<T> {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    s
}

/// Linear interpolation between order statistics at 1-based rank
/// `(M - 1) u + 1` of already sorted values.
pub fn quantile_sorted<T: Scalar>(s: &[T], u: f64) -> T {
    let pos = (s.len() - 1) as f64 * u;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(s.len() - 1);
    let frac = T::c(pos - lo as f64);
    s[lo] + (s[hi] - s[lo]) * frac
}

pub fn empirical_quantile<T: Scalar>(samples: &[T], u: f64) -> Result<T> {
    if samples.is_empty() {
        return Err(CdlfError::Empty("quantile samples"));
    }
    if !(0.0..=1.0).contains(&u) {
        return Err(CdlfError::InvalidArgument(format!("quantile level {u} outside [0, 1]")));
    }
    Ok(quantile_sorted(&sorted(samples), u))
}

/// `u (x - q)` when `x >= q`, else `(1 - u)(q - x)`.
pub fn pinball<T: Scalar>(x: T, q: T, u: f64) -> T {
    let u = T::c(u);
    if x >= q {
        u * (x - q)
    } else {
        (T::one() - u) * (q - x)
    }
}

/// Pinball losses at the 99 levels, using the empirical quantiles.
pub fn pinball_curve<T: Scalar>(samples: &[T], x: T) -> Result<Vec<T>> {
    if samples.is_empty() {
        return Err(CdlfError::Empty("CRPS samples"));
    }
    let s = sorted(samples);
    Ok(quantile_levels()
        .into_iter()
        .map(|u| pinball(x, quantile_sorted(&s, u), u))
        .collect())
}

/// Mean pinball loss over the 99-level grid.
pub fn crps<T: Scalar>(samples: &[T], x: T) -> Result<T> {
    let c = pinball_curve(samples, x)?;
    Ok(c.iter().copied().sum::<T>() / T::usize(c.len()))
}

/// `E|X - x| - E|X - X'| / 2` over the empirical sample distribution.
pub fn crps_pairwise<T: Scalar>(samples: &[T], x: T) -> Result<T> {
    if samples.is_empty() {
        return Err(CdlfError::Empty("CRPS samples"));
    }
    let m = samples.len();
    let s = sorted(samples);
    let a: T = s.iter().map(|&v| (v - x).abs()).sum::<T>() / T::usize(m);
    // sum_{i,j} |x_i - x_j| = 2 sum_i (2i - m + 1) x_(i) on sorted values
    let mut pair = T::zero();
    for (i, &v) in s.iter().enumerate() {
        pair += T::c(2.0 * i as f64 - m as f64 + 1.0) * v;
    }
    let b = T::c(2.0) * pair / T::usize(m * m);
    Ok(a - b / T::c(2.0))
}

pub fn mae<T: Scalar>(pred: &[T], actual: &[T]) -> Result<T> {
    check_pair(pred, actual)?;
    Ok(pred.iter().zip(actual).map(|(&p, &a)| (p - a).abs()).sum::<T>() / T::usize(pred.len()))
}

pub fn rmse<T: Scalar>(pred: &[T], actual: &[T]) -> Result<T> {
    check_pair(pred, actual)?;
    let ms = pred.iter().zip(actual).map(|(&p, &a)| (p - a) * (p - a)).sum::<T>() / T::usize(pred.len());
    Ok(ms.sqrt())
}

fn check_pair<T>(a: &[T], b: &[T]) -> Result<()> {
    if a.is_empty() {
        return Err(CdlfError::Empty("metric input"));
    }
    if a.len() != b.len() {
        return Err(crate::error::dim_err("metric input", a.len(), b.len()));
    }
    Ok(())
}

/// Unconstrained dynamic time warping with absolute-difference cost.
pub fn dtw<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.is_empty() || b.is_empty() {
        return Err(CdlfError::Empty("DTW series"));
    }
    let (n, m) = (a.len(), b.len());
    let inf = T::infinity();
    let mut prev = vec![inf; m + 1];
    let mut cur = vec![inf; m + 1];
    prev[0] = T::zero();
    for i in 1..=n {
        cur[0] = inf;
        for j in 1..=m {
            let cost = (a[i - 1] - b[j - 1]).abs();
            cur[j] = cost + prev[j].min(cur[j - 1]).min(prev[j - 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// `|max f - max a|` after mapping both paths through `inverse`.
pub fn peak_error<T: Scalar>(forecast: &[T], actual: &[T], inverse: impl Fn(&[T]) -> Vec<T>) -> Result<T> {
    check_pair(forecast, actual)?;
    let mx = |v: Vec<T>| v.into_iter().fold(T::neg_infinity(), T::max);
    Ok((mx(inverse(forecast)) - mx(inverse(actual))).abs())
}

/// `|sum f - sum a|` after mapping both paths through `inverse`.
pub fn auc_error<T: Scalar>(forecast: &[T], actual: &[T], inverse: impl Fn(&[T]) -> Vec<T>) -> Result<T> {
    check_pair(forecast, actual)?;
    let sm = |v: Vec<T>| v.into_iter().sum::<T>();
    Ok((sm(inverse(forecast)) - sm(inverse(actual))).abs())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaunchSummary {
    pub p50_auc: f64,
    pub p90_peak: f64,
    /// P90 minus P10 of cumulative adoption.
    pub auc_bandwidth: f64,
}

/// Summaries over rollouts given already inverse-transformed paths.
pub fn launch_summaries<T: Scalar>(paths: &[Vec<T>]) -> Result<LaunchSummary> {
    if paths.is_empty() {
        return Err(CdlfError::Empty("rollouts"));
    }
    let aucs: Vec<f64> = paths.iter().map(|p| p.iter().map(|v| v.f64()).sum()).collect();
    let peaks: Vec<f64> = paths
        .iter()
        .map(|p| p.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let sa = sorted(&aucs);
    Ok(LaunchSummary {
        p50_auc: quantile_sorted(&sa, 0.5),
        p90_peak: empirical_quantile(&peaks, 0.9)?,
        auc_bandwidth: quantile_sorted(&sa, 0.9) - quantile_sorted(&sa, 0.1),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Segment {
    #[serde(rename = "HP-HR")]
    HighPotentialHighRisk,
    #[serde(rename = "HP-LR")]
    HighPotentialLowRisk,
    #[serde(rename = "LP-HR")]
    LowPotentialHighRisk,
    #[serde(rename = "LP-LR")]
    LowPotentialLowRisk,
}

impl Segment {
    pub fn label(&self) -> &'static str {
        match self {
            Segment::HighPotentialHighRisk => "HP-HR",
            Segment::HighPotentialLowRisk => "HP-LR",
            Segment::LowPotentialHighRisk => "LP-HR",
            Segment::LowPotentialLowRisk => "LP-LR",
        }
    }
}

/// Median splits on P50 AUC (potential) and AUC bandwidth (risk); values
/// equal to the median fall in the low segment.
pub fn segment(summaries: &[LaunchSummary]) -> Vec<Segment> {
    if summaries.is_empty() {
        return Vec::new();
    }
    let pot: Vec<f64> = summaries.iter().map(|s| s.p50_auc).collect();
    let risk: Vec<f64> = summaries.iter().map(|s| s.auc_bandwidth).collect();
    let mp = quantile_sorted(&sorted(&pot), 0.5);
    let mr = quantile_sorted(&sorted(&risk), 0.5);
    summaries
        .iter()
        .map(|s| match (s.p50_auc > mp, s.auc_bandwidth > mr) {
            (true, true) => Segment::HighPotentialHighRisk,
            (true, false) => Segment::HighPotentialLowRisk,
            (false, true) => Segment::LowPotentialHighRisk,
            (false, false) => Segment::LowPotentialLowRisk,
        })
        .collect()
}

/// Scores of one forecast window (single coordinate).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowMetrics {
    pub series_id: String,
    pub origin: usize,
    /// Per horizon step.
    pub abs_err: Vec<f64>,
    pub sq_err: Vec<f64>,
    pub crps: Vec<f64>,
    /// Per horizon step, the 99 pinball losses.
    pub pinball: Vec<Vec<f64>>,
    pub dtw: f64,
    pub peak_error: f64,
    pub auc_error: f64,
}

/// Scores `samples` (one path per rollout) against `actual`.
pub fn score_window<T: Scalar>(
    series_id: &str,
    origin: usize,
    samples: &[Vec<T>],
    actual: &[T],
    inverse: impl Fn(&[T]) -> Vec<T>,
) -> Result<WindowMetrics> {
    if samples.is_empty() {
        return Err(CdlfError::Empty("forecast samples"));
    }
    let h = actual.len();
    let mut median = Vec::with_capacity(h);
    let mut out = WindowMetrics {
        series_id: series_id.to_string(),
        origin,
        abs_err: Vec::with_capacity(h),
        sq_err: Vec::with_capacity(h),
        crps: Vec::with_capacity(h),
        pinball: Vec::with_capacity(h),
        dtw: 0.0,
        peak_error: 0.0,
        auc_error: 0.0,
    };
    for (t, &a) in actual.iter().enumerate() {
        let col: Vec<T> = samples.iter().map(|p| p[t]).collect();
        let s = sorted(&col);
        let med = quantile_sorted(&s, 0.5);
        median.push(med);
        let curve: Vec<f64> = quantile_levels()
            .into_iter()
            .map(|u| pinball(a, quantile_sorted(&s, u), u).f64())
            .collect();
        out.crps.push(curve.iter().sum::<f64>() / QUANTILE_LEVELS as f64);
        out.pinball.push(curve);
        let e = (med - a).f64();
        out.abs_err.push(e.abs());
        out.sq_err.push(e * e);
    }
    if h > 0 {
        out.dtw = dtw(&median, actual)?.f64();
        out.peak_error = peak_error(&median, actual, &inverse)?.f64();
        out.auc_error = auc_error(&median, actual, &inverse)?.f64();
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandMetrics {
    pub label: String,
    pub first: usize,
    pub last: usize,
    pub mae: f64,
    pub mcrps: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub windows: usize,
    pub mae: f64,
    pub rmse: f64,
    pub mcrps: f64,
    pub dtw: f64,
    pub peak_error: f64,
    pub auc_error: f64,
    /// Mean pinball loss per level; its mean is `mcrps`.
    pub pinball_curve: Vec<f64>,
    pub bands: Vec<BandMetrics>,
}

impl MetricReport {
    /// Pools every (window, step) pair; `bands` are inclusive 1-based
    /// horizon ranges.
    pub fn from_windows(ws: &[WindowMetrics], bands: &[(usize, usize)]) -> Result<Self> {
        let steps: usize = ws.iter().map(|w| w.abs_err.len()).sum();
        if steps == 0 {
            return Err(CdlfError::Empty("scored windows"));
        }
        let n = steps as f64;
        let mut curve = vec![0.0; QUANTILE_LEVELS];
        for w in ws {
            for p in &w.pinball {
                for (c, v) in curve.iter_mut().zip(p) {
                    *c += v / n;
                }
            }
        }
        let mean_w = |f: &dyn Fn(&WindowMetrics) -> f64| ws.iter().map(f).sum::<f64>() / ws.len() as f64;
        let bands = bands
            .iter()
            .map(|&(first, last)| {
                let mut ae = 0.0;
                let mut cr = 0.0;
                let mut count = 0;
                for w in ws {
                    for t in first.max(1)..=last.min(w.abs_err.len()) {
                        ae += w.abs_err[t - 1];
                        cr += w.crps[t - 1];
                        count += 1;
                    }
                }
                let c = count.max(1) as f64;
                BandMetrics {
                    label: format!("{first}-{last}"),
                    first,
                    last,
                    mae: if count == 0 { f64::NAN } else { ae / c },
                    mcrps: if count == 0 { f64::NAN } else { cr / c },
                    count,
                }
            })
            .collect();
        Ok(Self {
            windows: ws.len(),
            mae: ws.iter().flat_map(|w| &w.abs_err).sum::<f64>() / n,
            rmse: (ws.iter().flat_map(|w| &w.sq_err).sum::<f64>() / n).sqrt(),
            mcrps: curve.iter().sum::<f64>() / QUANTILE_LEVELS as f64,
            dtw: mean_w(&|w| w.dtw),
            peak_error: mean_w(&|w| w.peak_error),
            auc_error: mean_w(&|w| w.auc_error),
            pinball_curve: curve,
            bands,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::RngStream;

    #[test]
    fn quantile_cases() {
        assert_eq!(empirical_quantile(&[5.0, 1.0, 3.0, 2.0, 4.0], 0.5).unwrap(), 3.0);
        for u in [0.01, 0.3, 0.99] {
            assert_eq!(empirical_quantile(&[2.5; 7], u).unwrap(), 2.5);
        }
        assert!(empirical_quantile::<f64>(&[], 0.5).is_err());
        assert_eq!(empirical_quantile(&[0.0, 10.0], 0.25).unwrap(), 2.5);
    }

    #[test]
    fn quantile_matches_sort_and_interpolate() {
        let mut rng = RngStream::new(3);
        let v: Vec<f64> = (0..100).map(|_| rng.uniform()).collect();
        let mut s = v.clone();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // rank (M - 1) u + 1 = 25.75 -> between the 25th and 26th order statistics
        let want = s[24] + 0.75 * (s[25] - s[24]);
        assert!((empirical_quantile(&v, 0.25).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn pinball_cases() {
        assert_eq!(pinball(1.0, 1.0, 0.3), 0.0);
        assert_eq!(pinball(3.0, 1.0, 0.5), 1.0);
        assert_eq!(pinball(1.0, 3.0, 0.5), 1.0);
        assert!((pinball::<f64>(2.0, 5.0, 0.9) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn crps_cases() {
        assert_eq!(crps(&[1.5; 10], 1.5).unwrap(), 0.0);
        let mut rng = RngStream::new(8);
        let xs: Vec<f64> = rng.gaussian_vec(37);
        let x = 0.3;
        // one pass over j with its own sort and interpolation
        let mut s = xs.clone();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut tot = 0.0;
        for j in 1..=99 {
            let u = j as f64 / 100.0;
            let r = 36.0 * u;
            let lo = r.floor() as usize;
            let q = if lo + 1 < 37 { s[lo] + (r - lo as f64) * (s[lo + 1] - s[lo]) } else { s[lo] };
            tot += if x >= q { u * (x - q) } else { (1.0 - u) * (q - x) };
        }
        assert!((crps(&xs, x).unwrap() - tot / 99.0).abs() < 1e-12);
    }

    #[test]
    fn pairwise_crps_matches_brute_force() {
        let xs: [f64; 4] = [0.3, -1.0, 2.0, 0.7];
        let x: f64 = 0.1;
        let m = xs.len() as f64;
        let a: f64 = xs.iter().map(|v| (v - x).abs()).sum::<f64>() / m;
        let b: f64 = xs.iter().flat_map(|u| xs.iter().map(move |v| (u - v).abs())).sum::<f64>() / (m * m);
        assert!((crps_pairwise(&xs, x).unwrap() - (a - 0.5 * b)).abs() < 1e-14);
    }

    #[test]
    fn point_errors() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((mae::<f64>(&[1.5, 2.5, 0.5], &[1.0, 2.0, 0.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!((rmse::<f64>(&[3.0, 0.0], &[0.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert!(mae::<f64>(&[1.0], &[]).is_err());
    }

    #[test]
    fn dtw_cases() {
        assert_eq!(dtw(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(dtw(&[0.0], &[3.0]).unwrap(), 3.0);
        // the repeated 2 aligns with the 2 of the first series
        assert_eq!(dtw(&[1.0, 2.0, 3.0], &[1.0, 2.0, 2.0, 3.0]).unwrap(), 0.0);
        // table for (0, 2) vs (1, 1, 3): rows [1, 2, 5], [2, 2, 3]
        assert_eq!(dtw(&[0.0, 2.0], &[1.0, 1.0, 3.0]).unwrap(), 3.0);
        assert!(dtw::<f64>(&[], &[1.0]).is_err());
    }

    #[test]
    fn peak_and_auc() {
        let id = |v: &[f64]| v.to_vec();
        assert_eq!(peak_error(&[1.0, 3.0], &[1.0, 3.0], id).unwrap(), 0.0);
        assert_eq!(peak_error(&[0.0, 3.0, 1.0], &[3.0, 1.0, 0.0], id).unwrap(), 0.0);
        assert_eq!(auc_error(&[0.0, 3.0, 1.0], &[3.0, 1.0, 0.0], id).unwrap(), 0.0);
        let ex = |v: &[f64]| v.iter().map(|x| x.exp() - 1.0).collect::<Vec<_>>();
        let f = [0.0, 1.0];
        let a = [0.5, 0.2];
        let pe = (1f64.exp() - 1.0) - (0.5f64.exp() - 1.0);
        let ae = ((1f64.exp() - 1.0) - (0.5f64.exp() - 1.0 + 0.2f64.exp() - 1.0)).abs();
        assert!((peak_error(&f, &a, ex).unwrap() - pe).abs() < 1e-12);
        assert!((auc_error(&f, &a, ex).unwrap() - ae).abs() < 1e-12);
    }

    #[test]
    fn launch_summary_cases() {
        let same = vec![vec![1.0, 2.0]; 4];
        let s = launch_summaries(&same).unwrap();
        assert_eq!(s.auc_bandwidth, 0.0);
        let one = launch_summaries(&[vec![1.0, 4.0]]).unwrap();
        assert_eq!(one.p50_auc, 5.0);
        assert_eq!(one.p90_peak, 4.0);
        // AUCs 3, 6, 12; peaks 2, 5, 9
        let s = launch_summaries(&[vec![1.0, 2.0], vec![5.0, 1.0], vec![3.0, 9.0]]).unwrap();
        assert_eq!(s.p50_auc, 6.0);
        assert!((s.p90_peak - (5.0 + 0.8 * 4.0)).abs() < 1e-12);
        assert!((s.auc_bandwidth - ((6.0 + 0.8 * 6.0) - (3.0 + 0.2 * 3.0))).abs() < 1e-12);
    }

    #[test]
    fn segmentation_cases() {
        let mk = |a, b| LaunchSummary { p50_auc: a, p90_peak: 0.0, auc_bandwidth: b };
        let segs = segment(&[mk(0.0, 0.0), mk(0.0, 1.0), mk(1.0, 0.0), mk(1.0, 1.0)]);
        assert_eq!(
            segs,
            vec![
                Segment::LowPotentialLowRisk,
                Segment::LowPotentialHighRisk,
                Segment::HighPotentialLowRisk,
                Segment::HighPotentialHighRisk
            ]
        );
        assert!(segment(&[mk(2.0, 2.0); 5]).iter().all(|s| *s == Segment::LowPotentialLowRisk));
        let mut rng = RngStream::new(4);
        let xs: Vec<LaunchSummary> = (0..10).map(|_| mk(rng.uniform(), rng.uniform())).collect();
        let mut a: Vec<f64> = xs.iter().map(|s| s.p50_auc).collect();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let med = 0.5 * (a[4] + a[5]);
        for (s, g) in xs.iter().zip(segment(&xs)) {
            let high = matches!(g, Segment::HighPotentialHighRisk | Segment::HighPotentialLowRisk);
            assert_eq!(high, s.p50_auc > med);
        }
    }

    #[test]
    fn report_curve_integrates_to_mcrps() {
        let mut rng = RngStream::new(6);
        let ws: Vec<WindowMetrics> = (0..3)
            .map(|i| {
                let samples: Vec<Vec<f64>> = (0..20).map(|_| rng.gaussian_vec(4)).collect();
                let actual: Vec<f64> = rng.gaussian_vec(4);
                score_window(&format!("s{i}"), 1, &samples, &actual, |v| v.to_vec()).unwrap()
            })
            .collect();
        let r = MetricReport::from_windows(&ws, &[(1, 2), (3, 4)]).unwrap();
        assert_eq!(r.mcrps, r.pinball_curve.iter().sum::<f64>() / 99.0);
        let direct = ws.iter().flat_map(|w| &w.crps).sum::<f64>() / 12.0;
        assert!((r.mcrps - direct).abs() < 1e-12);
        assert_eq!(r.bands[0].count, 6);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn vals() -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(-100.0f64..100.0, 1..40)
        }

        proptest! {
            #[test]
            fn quantiles_nondecreasing(v in vals(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(empirical_quantile(&v, lo).unwrap() <= empirical_quantile(&v, hi).unwrap());
            }

            #[test]
            fn crps_is_mean_pinball(v in vals(), x in -150.0f64..150.0) {
                let c = pinball_curve(&v, x).unwrap();
                prop_assert_eq!(crps(&v, x).unwrap(), c.iter().sum::<f64>() / c.len() as f64);
                prop_assert!(crps(&v, x).unwrap() >= 0.0);
            }

            #[test]
            fn mae_translation_covariant(pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..20), c in -5.0f64..5.0) {
                let (p, a): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
                let ps: Vec<f64> = p.iter().map(|v| v + c).collect();
                let as_: Vec<f64> = a.iter().map(|v| v + c).collect();
                prop_assert!((mae(&p, &a).unwrap() - mae(&ps, &as_).unwrap()).abs() < 1e-12);
            }

            #[test]
            fn dtw_identity_and_symmetry(a in vals(), b in vals()) {
                prop_assert_eq!(dtw(&a, &a).unwrap(), 0.0);
                prop_assert_eq!(dtw(&a, &b).unwrap(), dtw(&b, &a).unwrap());
            }
        }
    }
}
