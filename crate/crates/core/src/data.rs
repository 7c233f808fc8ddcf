//! Time-series carriers, CSV ingestion and the generalized-coordinate view
//! that merges observation and climate-model points into one sequence.
//!
//! Times are day indices stored as `f64`. Files must describe a contiguous
//! daily grid: gaps are rejected at load time, never imputed.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which process a series comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SourceTag {
    #[serde(rename = "OBS")]
    Obs,
    #[serde(rename = "GCM")]
    Gcm,
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceTag::Obs => f.write_str("OBS"),
            SourceTag::Gcm => f.write_str("GCM"),
        }
    }
}

/// Ordered `(time, value)` sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    times: Vec<f64>,
    values: Vec<f64>,
    source: SourceTag,
}

impl TimeSeries {
    /// Builds a series, checking that times strictly increase and every
    /// entry is finite.
    pub fn new(times: Vec<f64>, values: Vec<f64>, source: SourceTag) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::Validation(format!(
                "times and values differ in length ({} vs {})",
                times.len(),
                values.len()
            )));
        }
        for (i, (&t, &v)) in times.iter().zip(&values).enumerate() {
            if !t.is_finite() {
                return Err(Error::Validation(format!("non-finite time at index {i}")));
            }
            if !v.is_finite() {
                return Err(Error::Validation(format!("non-finite value at t={t}")));
            }
            if i > 0 && t <= times[i - 1] {
                return Err(Error::Validation(format!(
                    "non-increasing time: {} followed by {t}",
                    times[i - 1]
                )));
            }
        }
        Ok(TimeSeries {
            times,
            values,
            source,
        })
    }

    /// Series on the daily grid `start, start+1, ...`.
    pub fn daily(start: f64, values: Vec<f64>, source: SourceTag) -> Result<Self> {
        let times = (0..values.len()).map(|i| start + i as f64).collect();
        Self::new(times, values, source)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn source(&self) -> SourceTag {
        self.source
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn start(&self) -> Option<f64> {
        self.times.first().copied()
    }

    pub fn end(&self) -> Option<f64> {
        self.times.last().copied()
    }

    /// True when consecutive times differ by exactly one day.
    pub fn is_daily_contiguous(&self) -> bool {
        self.times.windows(2).all(|w| w[1] - w[0] == 1.0)
    }

    /// Index of `t`, if present.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        self.times
            .binary_search_by(|probe| probe.total_cmp(&t))
            .ok()
    }

    /// Points with `start <= t <= end`.
    pub fn slice_time(&self, start: f64, end: f64) -> TimeSeries {
        let lo = self.times.partition_point(|&t| t < start);
        let hi = self.times.partition_point(|&t| t <= end);
        let (lo, hi) = (lo.min(hi), hi);
        TimeSeries {
            times: self.times[lo..hi].to_vec(),
            values: self.values[lo..hi].to_vec(),
            source: self.source,
        }
    }

    /// Same times, replaced values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<TimeSeries> {
        TimeSeries::new(self.times.clone(), values, self.source)
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.iter().copied().zip(self.values.iter().copied())
    }
}

/// One observation series plus the initial-condition runs of a climate model
/// for a single location.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub obs: TimeSeries,
    runs: Vec<TimeSeries>,
    run_ids: Vec<u32>,
    pub location_id: String,
}

impl PairedDataset {
    pub fn new(
        obs: TimeSeries,
        runs: Vec<(u32, TimeSeries)>,
        location_id: impl Into<String>,
    ) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Validation("dataset needs at least one run".into()));
        }
        if obs.is_empty() {
            return Err(Error::Validation("observation series is empty".into()));
        }
        let reference = runs[0].1.times().to_vec();
        for (id, run) in &runs {
            if run.times() != reference.as_slice() {
                return Err(Error::Validation(format!(
                    "run {id} does not share the time grid of run {}",
                    runs[0].0
                )));
            }
            if !run.is_daily_contiguous() {
                return Err(Error::Validation(format!("run {id} is not a daily grid")));
            }
        }
        if !obs.is_daily_contiguous() {
            return Err(Error::Validation("observations are not a daily grid".into()));
        }
        let (g0, g1) = (reference[0], reference[reference.len() - 1]);
        let (o0, o1) = (obs.times()[0], obs.times()[obs.len() - 1]);
        if o0 < g0 || o0 > g1 || (o0 - g0).fract() != 0.0 {
            return Err(Error::Validation(format!(
                "observations [{o0}, {o1}] are not aligned inside the climate-model grid [{g0}, {g1}]"
            )));
        }
        let (run_ids, runs) = runs.into_iter().unzip();
        Ok(PairedDataset {
            obs,
            runs,
            run_ids,
            location_id: location_id.into(),
        })
    }

    pub fn runs(&self) -> &[TimeSeries] {
        &self.runs
    }

    pub fn run_ids(&self) -> &[u32] {
        &self.run_ids
    }

    pub fn run(&self, id: u32) -> Option<&TimeSeries> {
        self.run_ids
            .iter()
            .position(|&r| r == id)
            .map(|i| &self.runs[i])
    }

    /// Offset of the first observation within the climate-model grid.
    pub fn obs_offset(&self) -> usize {
        (self.obs.times()[0] - self.runs[0].times()[0]) as usize
    }

    /// Number of days where observations and climate-model runs overlap,
    /// counted from the first observation.
    pub fn overlap_len(&self) -> usize {
        let gcm_left = self.runs[0].len() - self.obs_offset();
        self.obs.len().min(gcm_left)
    }

    /// Restricts observations to `t <= end`; runs are kept whole.
    pub fn truncate_obs(&self, end: f64) -> Result<PairedDataset> {
        let obs = self.obs.slice_time(f64::NEG_INFINITY, end);
        PairedDataset::new(
            obs,
            self.run_ids
                .iter()
                .copied()
                .zip(self.runs.iter().cloned())
                .collect(),
            self.location_id.clone(),
        )
    }

    /// Restricts both observations and runs to `[start, end]`.
    pub fn window(&self, start: f64, end: f64) -> Result<PairedDataset> {
        PairedDataset::new(
            self.obs.slice_time(start, end),
            self.run_ids
                .iter()
                .copied()
                .zip(self.runs.iter().map(|r| r.slice_time(start, end)))
                .collect(),
            self.location_id.clone(),
        )
    }
}

/// Series membership inside the generalized sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SeriesId {
    Obs = 1,
    Gcm = 2,
}

/// A point of the merged sequence. `value` is `None` for masked targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneralizedPoint {
    pub t: f64,
    pub series: SeriesId,
    pub value: Option<f64>,
}

/// Merges climate-model points, observed points and masked observation
/// targets, in that order.
pub fn to_generalized(
    obs: &TimeSeries,
    gcm: &TimeSeries,
    target_times: &[f64],
) -> Result<Vec<GeneralizedPoint>> {
    for &t in target_times {
        if obs.index_of(t).is_some() {
            return Err(Error::Validation(format!(
                "target time {t} is also an observed point (leakage)"
            )));
        }
    }
    let mut out = Vec::with_capacity(gcm.len() + obs.len() + target_times.len());
    out.extend(gcm.iter().map(|(t, v)| GeneralizedPoint {
        t,
        series: SeriesId::Gcm,
        value: Some(v),
    }));
    out.extend(obs.iter().map(|(t, v)| GeneralizedPoint {
        t,
        series: SeriesId::Obs,
        value: Some(v),
    }));
    out.extend(target_times.iter().map(|&t| GeneralizedPoint {
        t,
        series: SeriesId::Obs,
        value: None,
    }));
    Ok(out)
}

/// Z-score statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !(std > 0.0) || !std.is_finite() || !mean.is_finite() {
            return Err(Error::Validation(format!(
                "normalization needs finite mean and std > 0, got ({mean}, {std})"
            )));
        }
        Ok(NormStats { mean, std })
    }

    /// Mean and population standard deviation of `values`.
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Validation("cannot fit statistics to no values".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self::new(mean, var.sqrt())
    }

    #[inline]
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    #[inline]
    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

pub fn normalize(series: &TimeSeries, stats: &NormStats) -> Result<TimeSeries> {
    let stats = NormStats::new(stats.mean, stats.std)?;
    series.with_values(series.values().iter().map(|&v| stats.apply(v)).collect())
}

pub fn denormalize(series: &TimeSeries, stats: &NormStats) -> Result<TimeSeries> {
    let stats = NormStats::new(stats.mean, stats.std)?;
    series.with_values(series.values().iter().map(|&z| stats.invert(z)).collect())
}

/// Maps day indices onto Gregorian calendar months.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Calendar {
    pub epoch: NaiveDate,
}

impl Calendar {
    pub fn new(epoch: NaiveDate) -> Self {
        Calendar { epoch }
    }

    pub fn parse(epoch: &str) -> Result<Self> {
        NaiveDate::parse_from_str(epoch, "%Y-%m-%d")
            .map(Calendar::new)
            .map_err(|e| Error::Config(format!("bad epoch date {epoch:?}: {e}")))
    }

    pub fn date_of(&self, t: f64) -> NaiveDate {
        self.epoch + Duration::days(t.floor() as i64)
    }

    /// Month number 1..=12 of day `t`.
    pub fn month_of(&self, t: f64) -> u32 {
        self.date_of(t).month()
    }

    /// Day index of `date`.
    pub fn day_of(&self, date: NaiveDate) -> f64 {
        (date - self.epoch).num_days() as f64
    }
}

impl Default for Calendar {
    fn default() -> Self {
        Calendar::new(NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date"))
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn check_header(rdr: &mut csv::Reader<std::fs::File>, path: &Path, want: &[&str]) -> Result<()> {
    let header = rdr.headers().map_err(|e| Error::Parse {
        path: path.into(),
        line: 1,
        msg: e.to_string(),
    })?;
    let got: Vec<&str> = header.iter().collect();
    if got != want {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            msg: format!("expected header {:?}, found {:?}", want.join(","), got.join(",")),
        });
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    name: &str,
    path: &Path,
) -> Result<T> {
    let line = record.position().map_or(0, |p| p.line());
    let raw = record.get(idx).ok_or_else(|| Error::Parse {
        path: path.into(),
        line,
        msg: format!("missing column {name}"),
    })?;
    raw.parse().map_err(|_| Error::Parse {
        path: path.into(),
        line,
        msg: format!("cannot parse {name} from {raw:?}"),
    })
}

fn validate_grid(series: TimeSeries, what: &str) -> Result<TimeSeries> {
    if let Some(bad) = series.times().iter().find(|t| t.fract() != 0.0) {
        return Err(Error::Validation(format!("{what}: time {bad} is not a whole day")));
    }
    if !series.is_daily_contiguous() {
        return Err(Error::Validation(format!(
            "{what}: missing days in the daily grid"
        )));
    }
    Ok(series)
}

fn with_context(err: Error, path: &Path) -> Error {
    match err {
        Error::Validation(msg) => Error::Validation(format!("{}: {msg}", path.display())),
        other => other,
    }
}

/// Reads an observation file with header `t,value`.
pub fn load_obs_csv(path: impl AsRef<Path>) -> Result<TimeSeries> {
    let path = path.as_ref();
    let mut rdr = open_csv(path)?;
    check_header(&mut rdr, path, &["t", "value"])?;
    let (mut times, mut values) = (Vec::new(), Vec::new());
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            path: path.into(),
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        times.push(parse_field::<f64>(&record, 0, "t", path)?);
        values.push(parse_field::<f64>(&record, 1, "value", path)?);
    }
    TimeSeries::new(times, values, SourceTag::Obs)
        .and_then(|s| validate_grid(s, "observations"))
        .map_err(|e| with_context(e, path))
}

/// Reads a climate-model file with header `t,run,value`; returns one series
/// per run, ordered by run id.
pub fn load_gcm_csv(path: impl AsRef<Path>) -> Result<Vec<(u32, TimeSeries)>> {
    let path = path.as_ref();
    let mut rdr = open_csv(path)?;
    check_header(&mut rdr, path, &["t", "run", "value"])?;
    let mut by_run: BTreeMap<u32, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            path: path.into(),
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let t = parse_field::<f64>(&record, 0, "t", path)?;
        let run = parse_field::<u32>(&record, 1, "run", path)?;
        let v = parse_field::<f64>(&record, 2, "value", path)?;
        let entry = by_run.entry(run).or_default();
        entry.0.push(t);
        entry.1.push(v);
    }
    if by_run.is_empty() {
        return Err(Error::Validation(format!("{}: no rows", path.display())));
    }
    by_run
        .into_iter()
        .map(|(run, (times, values))| {
            TimeSeries::new(times, values, SourceTag::Gcm)
                .and_then(|s| validate_grid(s, &format!("run {run}")))
                .map(|s| (run, s))
                .map_err(|e| with_context(e, path))
        })
        .collect()
}

/// Loads an observation file and a climate-model file into one dataset.
pub fn load_paired(
    obs_path: impl AsRef<Path>,
    gcm_path: impl AsRef<Path>,
    location_id: &str,
) -> Result<PairedDataset> {
    let obs = load_obs_csv(obs_path)?;
    let runs = load_gcm_csv(gcm_path)?;
    PairedDataset::new(obs, runs, location_id)
}

pub(crate) fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(file))
}

/// Rows of a headed CSV file deserialized in order.
pub(crate) fn read_rows<T: serde::de::DeserializeOwned>(path: &Path, header: &[&str]) -> Result<Vec<T>> {
    let mut rdr = open_csv(path)?;
    check_header(&mut rdr, path, header)?;
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        out.push(row.map_err(|e: csv::Error| Error::Parse {
            path: path.into(),
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?);
    }
    if out.is_empty() {
        return Err(Error::Validation(format!("{}: no rows", path.display())));
    }
    Ok(out)
}

pub fn write_obs_csv(path: impl AsRef<Path>, series: &TimeSeries) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "t,value").map_err(io)?;
    for (t, v) in series.iter() {
        writeln!(w, "{t},{v}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_gcm_csv(path: impl AsRef<Path>, runs: &[(u32, &TimeSeries)]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "t,run,value").map_err(io)?;
    for (run, series) in runs {
        for (t, v) in series.iter() {
            writeln!(w, "{t},{run},{v}").map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn parses_obs_file() {
        let f = write_tmp("t,value\n0,10.0\n1,11.0\n");
        let s = load_obs_csv(f.path()).unwrap();
        assert_eq!(s.times(), &[0.0, 1.0]);
        assert_eq!(s.values(), &[10.0, 11.0]);
        assert_eq!(s.source(), SourceTag::Obs);
    }

    #[test]
    fn parses_crlf() {
        let f = write_tmp("t,value\r\n0,10.5\r\n1,11\r\n");
        let s = load_obs_csv(f.path()).unwrap();
        assert_eq!(s.values(), &[10.5, 11.0]);
    }

    #[test]
    fn parses_gcm_runs() {
        let f = write_tmp("t,run,value\n0,0,1\n1,0,2\n0,1,3\n1,1,4\n");
        let runs = load_gcm_csv(f.path()).unwrap();
        assert_eq!(runs.len(), 2);
        assert_eq!(runs[0].0, 0);
        assert_eq!(runs[1].1.values(), &[3.0, 4.0]);
        assert!(runs.iter().all(|(_, s)| s.len() == 2));
    }

    #[test]
    fn rejects_repeated_time() {
        let f = write_tmp("t,value\n1,10\n1,11\n");
        let err = load_obs_csv(f.path()).unwrap_err().to_string();
        assert!(err.contains("non-increasing time"), "{err}");
    }

    #[test]
    fn rejects_nan_and_gaps() {
        let f = write_tmp("t,value\n0,NaN\n");
        assert!(matches!(load_obs_csv(f.path()), Err(Error::Validation(_))));
        let f = write_tmp("t,value\n0,1\n2,1\n");
        let err = load_obs_csv(f.path()).unwrap_err().to_string();
        assert!(err.contains("missing days"), "{err}");
    }

    #[test]
    fn malformed_row_reports_line() {
        let f = write_tmp("t,value\n0,1\n1,abc\n");
        match load_obs_csv(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let f = write_tmp("time,value\n0,1\n");
        assert!(matches!(load_obs_csv(f.path()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn mismatched_run_grids_rejected() {
        let obs = TimeSeries::daily(0.0, vec![1.0; 3], SourceTag::Obs).unwrap();
        let a = TimeSeries::daily(0.0, vec![1.0; 3], SourceTag::Gcm).unwrap();
        let b = TimeSeries::daily(1.0, vec![1.0; 3], SourceTag::Gcm).unwrap();
        assert!(PairedDataset::new(obs, vec![(0, a), (1, b)], "x").is_err());
    }

    #[test]
    fn normalize_examples() {
        let s = TimeSeries::daily(0.0, vec![10.0, 12.0], SourceTag::Obs).unwrap();
        let z = normalize(&s, &NormStats { mean: 11.0, std: 1.0 }).unwrap();
        assert_eq!(z.values(), &[-1.0, 1.0]);
        let id = normalize(&s, &NormStats { mean: 0.0, std: 1.0 }).unwrap();
        assert_eq!(id.values(), s.values());
        assert!(normalize(&s, &NormStats { mean: 0.0, std: 0.0 }).is_err());
        assert!(normalize(&s, &NormStats { mean: 0.0, std: -1.0 }).is_err());
    }

    #[test]
    fn generalized_ordering() {
        let gcm = TimeSeries::new(vec![0.0, 1.0], vec![5.0, 6.0], SourceTag::Gcm).unwrap();
        let obs = TimeSeries::new(vec![0.0], vec![7.0], SourceTag::Obs).unwrap();
        let pts = to_generalized(&obs, &gcm, &[1.0]).unwrap();
        assert_eq!(pts.len(), 4);
        assert_eq!(pts[0].series, SeriesId::Gcm);
        assert_eq!(pts[2].series, SeriesId::Obs);
        assert_eq!(pts[3].value, None);

        let none = to_generalized(&obs, &gcm, &[]).unwrap();
        assert!(none.iter().all(|p| p.value.is_some()));

        assert!(to_generalized(&obs, &gcm, &[0.0]).is_err());
    }

    #[test]
    fn calendar_months() {
        let cal = Calendar::parse("2001-01-01").unwrap();
        assert_eq!(cal.month_of(0.0), 1);
        assert_eq!(cal.month_of(31.0), 2);
        assert_eq!(cal.month_of(364.0), 12);
        assert_eq!(cal.month_of(365.0), 1);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn normalize_round_trip(
                values in prop::collection::vec(-1e3f64..1e3, 1..64),
                mean in -50f64..50.0,
                std in 0.1f64..20.0,
            ) {
                let s = TimeSeries::daily(0.0, values.clone(), SourceTag::Obs).unwrap();
                let stats = NormStats { mean, std };
                let back = denormalize(&normalize(&s, &stats).unwrap(), &stats).unwrap();
                for (a, b) in back.values().iter().zip(&values) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }

            #[test]
            fn generalized_never_unmasks_targets(
                n_obs in 1usize..20,
                targets in prop::collection::btree_set(100u32..140, 0..10),
            ) {
                let obs = TimeSeries::daily(0.0, vec![1.0; n_obs], SourceTag::Obs).unwrap();
                let gcm = TimeSeries::daily(0.0, vec![2.0; 150], SourceTag::Gcm).unwrap();
                let tt: Vec<f64> = targets.iter().map(|&t| t as f64).collect();
                let pts = to_generalized(&obs, &gcm, &tt).unwrap();
                prop_assert_eq!(pts.len(), 150 + n_obs + tt.len());
                for p in pts.iter().filter(|p| p.series == SeriesId::Obs && tt.contains(&p.t)) {
                    prop_assert!(p.value.is_none());
                }
            }
        }
    }
}
