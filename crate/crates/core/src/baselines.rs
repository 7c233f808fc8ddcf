//! Classical bias-correction baselines applied per calendar month.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{create, read_rows, Calendar, PairedDataset, SourceTag, TimeSeries};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mean,
    Meanvar,
    Eqm,
    Ecbc,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(Method::Mean),
            "meanvar" => Ok(Method::Meanvar),
            "eqm" => Ok(Method::Eqm),
            "ecbc" => Ok(Method::Ecbc),
            other => Err(Error::Config(format!("unknown baseline method `{other}`"))),
        }
    }
}

/// How days are grouped before correcting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Grouping {
    Monthly(Calendar),
    /// One group for the whole series.
    Pooled,
}

impl Grouping {
    fn key(&self, t: f64) -> u32 {
        match self {
            Grouping::Monthly(c) => c.month_of(t),
            Grouping::Pooled => 0,
        }
    }

    /// Values of `series` by group, in time order.
    pub fn split(&self, series: &TimeSeries) -> BTreeMap<u32, Vec<f64>> {
        let mut out: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for (t, v) in series.iter() {
            out.entry(self.key(t)).or_default().push(v);
        }
        out
    }

    /// Applies `f(group, value)` to every point of `series`.
    fn map(
        &self,
        series: &TimeSeries,
        mut f: impl FnMut(u32, f64) -> Result<f64>,
    ) -> Result<TimeSeries> {
        let values = series
            .iter()
            .map(|(t, v)| f(self.key(t), v))
            .collect::<Result<Vec<_>>>()?;
        TimeSeries::new(series.times().to_vec(), values, SourceTag::Gcm)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation.
fn std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

fn group<'a>(groups: &'a BTreeMap<u32, Vec<f64>>, key: u32, what: &str) -> Result<&'a [f64]> {
    groups
        .get(&key)
        .map(Vec::as_slice)
        .filter(|v| !v.is_empty())
        .ok_or_else(|| Error::Validation(format!("month {key} absent from the {what} reference period")))
}

/// Adds the per-group difference of reference means.
pub fn mean_shift(
    obs_ref: &TimeSeries,
    gcm_ref: &TimeSeries,
    gcm_proj: &TimeSeries,
    grouping: &Grouping,
) -> Result<TimeSeries> {
    let o = grouping.split(obs_ref);
    let g = grouping.split(gcm_ref);
    let mut shift = BTreeMap::new();
    grouping.map(gcm_proj, |m, v| {
        if let std::collections::btree_map::Entry::Vacant(e) = shift.entry(m) {
            e.insert(mean(group(&o, m, "observed")?) - mean(group(&g, m, "climate-model")?));
        }
        Ok(v + shift[&m])
    })
}

/// Matches per-group reference means and standard deviations.
pub fn mean_var_shift(
    obs_ref: &TimeSeries,
    gcm_ref: &TimeSeries,
    gcm_proj: &TimeSeries,
    grouping: &Grouping,
) -> Result<TimeSeries> {
    let o = grouping.split(obs_ref);
    let g = grouping.split(gcm_ref);
    let mut moments: BTreeMap<u32, (f64, f64, f64, f64)> = BTreeMap::new();
    grouping.map(gcm_proj, |m, v| {
        if !moments.contains_key(&m) {
            let (om, gm) = (group(&o, m, "observed")?, group(&g, m, "climate-model")?);
            let sg = std(gm);
            if !(sg > 0.0) {
                return Err(Error::Numeric(format!(
                    "climate-model reference std is zero in month {m}"
                )));
            }
            moments.insert(m, (mean(om), std(om), mean(gm), sg));
        }
        let (mo, so, mg, sg) = moments[&m];
        Ok((v - mg) * (so / sg) + mo)
    })
}

/// Sorted reference pair of one group.
struct QuantileMap {
    obs: Vec<f64>,
    gcm: Vec<f64>,
}

impl QuantileMap {
    fn new(obs: &[f64], gcm: &[f64], m: u32) -> Result<Self> {
        if obs.len() != gcm.len() {
            return Err(Error::Validation(format!(
                "month {m}: {} observed vs {} climate-model reference days",
                obs.len(),
                gcm.len()
            )));
        }
        let mut obs = obs.to_vec();
        let mut gcm = gcm.to_vec();
        obs.sort_by(f64::total_cmp);
        gcm.sort_by(f64::total_cmp);
        Ok(QuantileMap { obs, gcm })
    }

    /// Observed value at the first sorted climate-model entry `>= v`,
    /// clamped to the last index.
    fn apply(&self, v: f64) -> f64 {
        let idx = self.gcm.partition_point(|&x| x < v).min(self.gcm.len() - 1);
        self.obs[idx]
    }
}

/// Empirical quantile mapping.
pub fn eqm(
    obs_ref: &TimeSeries,
    gcm_ref: &TimeSeries,
    gcm_proj: &TimeSeries,
    grouping: &Grouping,
) -> Result<TimeSeries> {
    let o = grouping.split(obs_ref);
    let g = grouping.split(gcm_ref);
    let mut maps: BTreeMap<u32, QuantileMap> = BTreeMap::new();
    grouping.map(gcm_proj, |m, v| {
        if !maps.contains_key(&m) {
            let qm = QuantileMap::new(group(&o, m, "observed")?, group(&g, m, "climate-model")?, m)?;
            maps.insert(m, qm);
        }
        Ok(maps[&m].apply(v))
    })
}

/// Rank of every entry, ties broken by position.
pub fn ranks(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut r = vec![0; values.len()];
    for (rank, i) in order.into_iter().enumerate() {
        r[i] = rank;
    }
    r
}

/// Largest tolerated per-group length mismatch, as a share of the group.
const MAX_TRIM_SHARE: f64 = 0.05;

/// Quantile mapping followed by reordering each group so its ranks follow
/// the observed template of the same group.
pub fn ecbc(
    obs_ref: &TimeSeries,
    gcm_ref: &TimeSeries,
    gcm_proj: &TimeSeries,
    template: &TimeSeries,
    grouping: &Grouping,
) -> Result<TimeSeries> {
    let mapped = eqm(obs_ref, gcm_ref, gcm_proj, grouping)?;
    let tmpl = grouping.split(template);
    let mut positions: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &t) in mapped.times().iter().enumerate() {
        positions.entry(grouping.key(t)).or_default().push(i);
    }
    let mut out = mapped.values().to_vec();
    for (m, pos) in positions {
        let tm = tmpl.get(&m).map(Vec::as_slice).unwrap_or(&[]);
        let n = pos.len().min(tm.len());
        let surplus = pos.len().max(tm.len()) - n;
        if surplus > 0 {
            let limit = (MAX_TRIM_SHARE * pos.len().max(tm.len()) as f64).floor() as usize;
            if surplus > limit || n == 0 {
                return Err(Error::Validation(format!(
                    "month {m}: template has {} days but the projection has {}",
                    tm.len(),
                    pos.len()
                )));
            }
            warn!("month {m}: trimming {surplus} trailing days to pair template and projection");
        }
        let mut sorted: Vec<f64> = pos[..n].iter().map(|&i| mapped.values()[i]).collect();
        sorted.sort_by(f64::total_cmp);
        for (&i, r) in pos[..n].iter().zip(ranks(&tm[..n])) {
            out[i] = sorted[r];
        }
    }
    mapped.with_values(out)
}

/// Day ranges of a baseline run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub method: Method,
    pub ref_period: (f64, f64),
    pub proj_period: (f64, f64),
    /// Rank template period for EC-BC; defaults to the reference period.
    pub template_period: Option<(f64, f64)>,
    pub monthly: bool,
}

impl BaselineSpec {
    pub fn validate(&self) -> Result<()> {
        let (r0, r1) = self.ref_period;
        let (p0, p1) = self.proj_period;
        if !(r0 <= r1 && p0 <= p1) {
            return Err(Error::Config("periods must have start <= end".into()));
        }
        if r1 >= p0 {
            return Err(Error::Config(format!(
                "reference period [{r0}, {r1}] must end before the projection [{p0}, {p1}]"
            )));
        }
        if let Some((a, b)) = self.template_period {
            if !(a <= b && b < p0) {
                return Err(Error::Config("template period must precede the projection".into()));
            }
        }
        Ok(())
    }
}

/// Applies `spec` to every run of `dataset`.
pub fn apply_baseline(
    spec: &BaselineSpec,
    dataset: &PairedDataset,
    calendar: &Calendar,
) -> Result<Vec<(u32, TimeSeries)>> {
    spec.validate()?;
    let grouping = if spec.monthly {
        Grouping::Monthly(*calendar)
    } else {
        Grouping::Pooled
    };
    let (r0, r1) = spec.ref_period;
    let (p0, p1) = spec.proj_period;
    let obs_ref = dataset.obs.slice_time(r0, r1);
    if obs_ref.is_empty() {
        return Err(Error::Validation(format!("no observations in the reference period [{r0}, {r1}]")));
    }
    let (t0, t1) = spec.template_period.unwrap_or(spec.ref_period);
    let template = dataset.obs.slice_time(t0, t1);
    let mut out = Vec::new();
    for (&id, run) in dataset.run_ids().iter().zip(dataset.runs()) {
        let gcm_ref = run.slice_time(r0, r1);
        let proj = run.slice_time(p0, p1);
        if proj.is_empty() {
            return Err(Error::Validation(format!("run {id} has no days in the projection period")));
        }
        let corrected = match spec.method {
            Method::Mean => mean_shift(&obs_ref, &gcm_ref, &proj, &grouping)?,
            Method::Meanvar => mean_var_shift(&obs_ref, &gcm_ref, &proj, &grouping)?,
            Method::Eqm => eqm(&obs_ref, &gcm_ref, &proj, &grouping)?,
            Method::Ecbc => ecbc(&obs_ref, &gcm_ref, &proj, &template, &grouping)?,
        };
        out.push((id, corrected));
    }
    Ok(out)
}

/// Writes corrected runs as `run,t,value`.
pub fn write_baseline_csv(path: impl AsRef<Path>, runs: &[(u32, TimeSeries)]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "run,t,value").map_err(io)?;
    for (run, series) in runs {
        for (t, v) in series.iter() {
            writeln!(w, "{run},{t},{v}").map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

#[derive(Deserialize)]
struct Row {
    run: u32,
    t: f64,
    value: f64,
}

/// Reads a `run,t,value` file into one series per run, ordered by run id.
pub fn read_baseline_csv(path: impl AsRef<Path>) -> Result<Vec<(u32, TimeSeries)>> {
    let rows: Vec<Row> = read_rows(path.as_ref(), &["run", "t", "value"])?;
    let mut by_run: BTreeMap<u32, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let e = by_run.entry(r.run).or_default();
        e.0.push(r.t);
        e.1.push(r.value);
    }
    by_run
        .into_iter()
        .map(|(run, (t, v))| Ok((run, TimeSeries::new(t, v, SourceTag::Gcm)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(values: &[f64]) -> TimeSeries {
        TimeSeries::daily(0.0, values.to_vec(), SourceTag::Gcm).unwrap()
    }

    fn at(start: f64, values: &[f64]) -> TimeSeries {
        TimeSeries::daily(start, values.to_vec(), SourceTag::Gcm).unwrap()
    }

    fn monthly() -> Grouping {
        Grouping::Monthly(Calendar::parse("2000-01-01").unwrap())
    }

    #[test]
    fn mean_shift_identity_and_toy() {
        let o = series(&[10.0, 12.0, 11.0]);
        let p = at(10.0, &[3.0, 4.0]);
        assert_eq!(mean_shift(&o, &o, &p, &monthly()).unwrap().values(), p.values());
        let obs = series(&[10.0, 12.0]);
        let gcm = series(&[8.0, 10.0]);
        let out = mean_shift(&obs, &gcm, &at(5.0, &[9.0]), &monthly()).unwrap();
        assert_eq!(out.values(), &[11.0]);
    }

    #[test]
    fn mean_shift_month_missing() {
        let o = series(&[1.0; 31]);
        let err = mean_shift(&o, &o, &at(40.0, &[1.0]), &monthly()).unwrap_err();
        assert!(err.to_string().contains("month 2"));
    }

    #[test]
    fn mean_var_toy_and_zero_std() {
        let obs = series(&[-2.0, 2.0]);
        let gcm = series(&[-1.0, 1.0]);
        let out = mean_var_shift(&obs, &gcm, &at(5.0, &[1.0]), &monthly()).unwrap();
        assert_eq!(out.values(), &[2.0]);
        let same = mean_var_shift(&obs, &obs, &at(5.0, &[0.7]), &monthly()).unwrap();
        assert!((same.values()[0] - 0.7).abs() < 1e-15);
        assert!(mean_var_shift(&obs, &series(&[3.0, 3.0]), &at(5.0, &[1.0]), &monthly()).is_err());
    }

    #[test]
    fn eqm_hand_trace() {
        let obs = series(&[3.0, 1.0, 2.0]);
        let gcm = series(&[20.0, 30.0, 10.0]);
        let out = eqm(&obs, &gcm, &at(5.0, &[20.0, 15.0, 35.0, 5.0]), &monthly()).unwrap();
        assert_eq!(out.values(), &[2.0, 2.0, 3.0, 1.0]);
    }

    #[test]
    fn ecbc_permutes_and_follows_template_ranks() {
        let obs = series(&[5.0, 1.0, 4.0, 2.0, 3.0]);
        let gcm = series(&[10.0, 20.0, 30.0, 40.0, 50.0]);
        let proj = at(10.0, &[12.0, 48.0, 33.0, 25.0, 9.0]);
        let e = eqm(&obs, &gcm, &proj, &monthly()).unwrap();
        let c = ecbc(&obs, &gcm, &proj, &obs, &monthly()).unwrap();
        let mut a = e.values().to_vec();
        let mut b = c.values().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
        assert_eq!(ranks(c.values()), ranks(obs.values()));
        let flat = series(&[7.0; 5]);
        let s = ecbc(&obs, &gcm, &proj, &flat, &monthly()).unwrap();
        assert!(s.values().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn ecbc_length_rules() {
        let obs = series(&(0..30).map(f64::from).collect::<Vec<_>>());
        let proj = at(0.0, &(0..29).map(|i| f64::from(i) * 2.0).collect::<Vec<_>>());
        // one surplus template day out of 30 is trimmed
        let out = ecbc(&obs, &obs, &proj, &obs, &monthly()).unwrap();
        assert_eq!(out.len(), 29);
        let short = at(0.0, &(0..20).map(f64::from).collect::<Vec<_>>());
        assert!(ecbc(&obs, &obs, &proj, &short, &monthly()).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.csv");
        let runs = vec![(0, at(3.0, &[1.5, 2.0])), (4, at(3.0, &[-0.25, 0.1 + 0.2]))];
        write_baseline_csv(&path, &runs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "run,t,value\n0,3,1.5\n0,4,2\n4,3,-0.25\n4,4,0.30000000000000004\n");
        let back = read_baseline_csv(&path).unwrap();
        assert_eq!(back[1].0, 4);
        assert_eq!(back[1].1.values(), runs[1].1.values());
    }

    #[test]
    fn ranks_are_stable() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![2, 0, 3, 1]);
        assert_eq!(ranks(&[1.0, 1.0, 1.0]), vec![0, 1, 2]);
    }

    proptest! {
        #[test]
        fn eqm_is_monotone(obs in prop::collection::vec(-10f64..40.0, 31),
                           gcm in prop::collection::vec(-10f64..40.0, 31),
                           mut v in prop::collection::vec(-20f64..50.0, 2..30)) {
            v.sort_by(f64::total_cmp);
            v.dedup();
            let proj = at(0.0, &v);
            let out = eqm(&series(&obs), &series(&gcm), &proj, &monthly()).unwrap();
            prop_assert!(out.values().windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn mean_shift_matches_regression_constant(
            obs in prop::collection::vec(-10f64..40.0, 31),
            gcm in prop::collection::vec(-10f64..40.0, 31),
        ) {
            let c = obs.iter().sum::<f64>() / 31.0 - gcm.iter().sum::<f64>() / 31.0;
            let g = series(&gcm);
            let out = mean_shift(&series(&obs), &g, &g, &monthly()).unwrap();
            for (a, b) in out.values().iter().zip(&gcm) {
                prop_assert!((a - b - c).abs() < 1e-10);
            }
            // already-corrected reference data stays put
            let again = mean_shift(&series(&obs), &out, &out, &monthly()).unwrap();
            for (a, b) in again.values().iter().zip(out.values()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn spec_periods_validated() {
        let bad = BaselineSpec {
            method: Method::Mean,
            ref_period: (0.0, 10.0),
            proj_period: (5.0, 20.0),
            template_period: None,
            monthly: true,
        };
        assert!(bad.validate().is_err());
        assert_eq!("EQM".parse::<Method>().unwrap(), Method::Eqm);
        assert!("3dbc".parse::<Method>().is_err());
    }
}
