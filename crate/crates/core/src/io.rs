//! Dataset ingestion and export, the text chain archive, and grid export.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forecast::FunctionalGrid;
use crate::model::{GpBlockState, LinearBlock, ObservedData, PosteriorDraw, DEFAULT_TRIALS};
use crate::sampler::{ModelKind, SamplerConfig};
use crate::SpatialPoint;

/// Version of every file format written by this crate.
pub const SCHEMA_VERSION: u32 = 1;

/// First line of every CSV output.
pub fn schema_comment() -> String {
    format!("# rainmap schema_version={SCHEMA_VERSION}")
}

fn data_error(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn archive_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Archive {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| data_error(path, 0, format!("cannot open: {e}")))?;
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file))
}

/// Per-column affine map of raw covariates onto `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateTransform {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl CovariateTransform {
    /// Min–max transform fitted to the rows of `raw`.
    pub fn fit(raw: &[Vec<f64>]) -> Self {
        let p = raw.first().map_or(0, Vec::len);
        let mut min = vec![f64::INFINITY; p];
        let mut max = vec![f64::NEG_INFINITY; p];
        for row in raw {
            for h in 0..p {
                min[h] = min[h].min(row[h]);
                max[h] = max[h].max(row[h]);
            }
        }
        CovariateTransform { min, max }
    }

    pub fn identity(p: usize) -> Self {
        CovariateTransform {
            min: vec![-1.0; p],
            max: vec![1.0; p],
        }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    /// Raw covariates to standardized coordinates. A constant column maps to 0.
    pub fn apply(&self, raw: &[f64]) -> Result<SpatialPoint> {
        if raw.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: raw.len(),
            });
        }
        let coords = raw
            .iter()
            .enumerate()
            .map(|(h, x)| {
                let w = self.max[h] - self.min[h];
                if w > 0.0 {
                    2.0 * (x - self.min[h]) / w - 1.0
                } else {
                    0.0
                }
            })
            .collect();
        SpatialPoint::new(coords)
    }

    /// Standardized coordinates back to raw covariates.
    pub fn invert(&self, point: &SpatialPoint) -> Vec<f64> {
        point
            .coords()
            .iter()
            .enumerate()
            .map(|(h, s)| self.min[h] + (s + 1.0) * 0.5 * (self.max[h] - self.min[h]))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Standardize {
    /// Min–max onto `[-1, 1]` per covariate.
    #[default]
    MinMax,
    /// Use the covariates as given.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoadOptions {
    /// A day is wet when its rainfall exceeds this many millimetres.
    pub wet_threshold_mm: f64,
    /// Inclusive year range; defaults to the years present in the records.
    pub year_range: Option<(i32, i32)>,
    /// Bernoulli trials per station-year.
    pub n_trials: u32,
    pub standardize: Standardize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            wet_threshold_mm: 0.1,
            year_range: None,
            n_trials: DEFAULT_TRIALS,
            standardize: Standardize::MinMax,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationRecord {
    pub id: String,
    pub covariates: Vec<f64>,
}

/// A loaded dataset together with the metadata needed to map results back.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub stations: Vec<StationRecord>,
    pub covariate_names: Vec<String>,
    pub years: Vec<i32>,
    pub transform: CovariateTransform,
    pub data: ObservedData,
}

/// Reads `id,<covariate>...` rows. Ids must be unique, covariates finite.
pub fn read_stations(path: &Path) -> Result<(Vec<String>, Vec<StationRecord>)> {
    let mut rdr = csv_reader(path)?;
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("id") || headers.len() < 2 {
        return Err(data_error(
            path,
            1,
            "expected a header 'id,<covariate>,...'",
        ));
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = rec.get(0).unwrap_or_default().to_string();
        if id.is_empty() {
            return Err(data_error(path, line, "empty station id"));
        }
        if !seen.insert(id.clone()) {
            return Err(data_error(
                path,
                line,
                format!("duplicate station id '{id}'"),
            ));
        }
        if rec.len() != headers.len() {
            return Err(data_error(
                path,
                line,
                format!("expected {} fields, found {}", headers.len(), rec.len()),
            ));
        }
        let covariates = rec
            .iter()
            .skip(1)
            .zip(&names)
            .map(|(v, name)| match v.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x),
                _ => Err(data_error(
                    path,
                    line,
                    format!("{name} '{v}' is not a finite number"),
                )),
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(StationRecord { id, covariates });
    }
    if out.is_empty() {
        return Err(data_error(path, 1, "no stations"));
    }
    Ok((names, out))
}

/// Aggregates daily records into wet-day counts and wet-day amounts per
/// station-year. Station-years without a single record are masked.
pub fn load_dataset(
    stations_csv: &Path,
    daily_csv: &Path,
    options: &LoadOptions,
) -> Result<Dataset> {
    if !(options.wet_threshold_mm >= 0.0) {
        return Err(Error::Config(format!(
            "wet threshold must be non-negative, got {}",
            options.wet_threshold_mm
        )));
    }
    let (covariate_names, stations) = read_stations(stations_csv)?;
    let index: HashMap<&str, usize> = stations
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();

    let mut rdr = csv_reader(daily_csv)?;
    let headers = rdr.headers()?.clone();
    let expected = ["id", "date", "rain_mm"];
    if headers.len() != 3 || headers.iter().zip(expected).any(|(a, b)| a != b) {
        return Err(data_error(
            daily_csv,
            1,
            "expected the header 'id,date,rain_mm'",
        ));
    }
    let mut cells: BTreeMap<(usize, i32), Vec<(NaiveDate, f64)>> = BTreeMap::new();
    let mut seen_days = HashSet::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = rec.get(0).unwrap_or_default();
        let &i = index
            .get(id)
            .ok_or_else(|| data_error(daily_csv, line, format!("unknown station id '{id}'")))?;
        let raw_date = rec.get(1).unwrap_or_default();
        let date = NaiveDate::parse_from_str(raw_date, "%Y-%m-%d").map_err(|e| {
            data_error(daily_csv, line, format!("malformed date '{raw_date}': {e}"))
        })?;
        let raw_rain = rec.get(2).unwrap_or_default();
        let rain: f64 = raw_rain.parse().map_err(|_| {
            data_error(
                daily_csv,
                line,
                format!("rainfall '{raw_rain}' is not a number"),
            )
        })?;
        if !rain.is_finite() || rain < 0.0 {
            return Err(data_error(
                daily_csv,
                line,
                format!("rainfall {rain} must be finite and non-negative"),
            ));
        }
        if !seen_days.insert((i, date)) {
            return Err(data_error(
                daily_csv,
                line,
                format!("second record for station '{id}' on {date}"),
            ));
        }
        if let Some((lo, hi)) = options.year_range {
            if date.year() < lo || date.year() > hi {
                continue;
            }
        }
        cells
            .entry((i, date.year()))
            .or_default()
            .push((date, rain));
    }

    let (y0, y1) = match options.year_range {
        Some(r) => r,
        None => {
            let years = cells.keys().map(|&(_, y)| y);
            match (years.clone().min(), years.max()) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(data_error(
                        daily_csv,
                        1,
                        "no daily records and no year range given",
                    ))
                }
            }
        }
    };
    if y1 < y0 {
        return Err(Error::Config(format!("empty year range {y0}..={y1}")));
    }
    let years: Vec<i32> = (y0..=y1).collect();
    let (m, t) = (stations.len(), years.len());
    let mut counts = Array2::<u32>::zeros((m, t));
    let mut observed = Array2::from_elem((m, t), true);
    let mut ln = vec![Vec::new(); m * t];
    for i in 0..m {
        for (j, &year) in years.iter().enumerate() {
            let Some(days) = cells.get_mut(&(i, year)) else {
                observed[[i, j]] = false;
                log::warn!(
                    "station '{}' has no records in {year}; the station-year is masked",
                    stations[i].id
                );
                continue;
            };
            days.sort_by(|a, b| a.0.cmp(&b.0));
            let wet: Vec<f64> = days
                .iter()
                .filter(|(_, r)| *r > options.wet_threshold_mm)
                .map(|(_, r)| r.ln())
                .collect();
            counts[[i, j]] = wet.len() as u32;
            ln[i * t + j] = wet;
        }
    }

    let raw: Vec<Vec<f64>> = stations.iter().map(|s| s.covariates.clone()).collect();
    let transform = match options.standardize {
        Standardize::MinMax => CovariateTransform::fit(&raw),
        Standardize::None => CovariateTransform::identity(covariate_names.len()),
    };
    let points = match options.standardize {
        Standardize::MinMax => raw
            .iter()
            .map(|r| transform.apply(r))
            .collect::<Result<Vec<_>>>()?,
        Standardize::None => raw
            .iter()
            .map(|r| SpatialPoint::new(r.clone()))
            .collect::<Result<Vec<_>>>()?,
    };
    let data = ObservedData::from_log_magnitudes(points, counts, ln, options.n_trials)?
        .with_observed_mask(observed)?;
    Ok(Dataset {
        stations,
        covariate_names,
        years,
        transform,
        data,
    })
}

/// Writes `stations.csv` and `daily.csv` that reload to the same counts,
/// mask and magnitudes with a wet threshold of 0. Each observed station-year
/// gets one day per event from 1 January on, plus a dry day when the year is
/// not fully wet so that the year reloads as observed.
pub fn export_dataset(dataset: &Dataset, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let data = &dataset.data;
    let stations_path = dir.join("stations.csv");
    let mut w = BufWriter::new(File::create(&stations_path)?);
    writeln!(w, "{}", schema_comment())?;
    writeln!(w, "id,{}", dataset.covariate_names.join(","))?;
    for s in &dataset.stations {
        let cov: Vec<String> = s.covariates.iter().map(|x| format!("{x:.16e}")).collect();
        writeln!(w, "{},{}", s.id, cov.join(","))?;
    }
    w.flush()?;

    let daily_path = dir.join("daily.csv");
    let mut w = BufWriter::new(File::create(&daily_path)?);
    writeln!(w, "{}", schema_comment())?;
    writeln!(w, "id,date,rain_mm")?;
    for (i, s) in dataset.stations.iter().enumerate() {
        for (j, &year) in dataset.years.iter().enumerate() {
            if !data.is_observed(i, j) {
                continue;
            }
            let start = NaiveDate::from_ymd_opt(year, 1, 1)
                .ok_or_else(|| Error::domain(format!("year {year}")))?;
            let events = data.magnitudes(i, j);
            let days_in_year = if NaiveDate::from_ymd_opt(year, 2, 29).is_some() {
                366
            } else {
                365
            };
            if events.len() > days_in_year {
                return Err(Error::domain(format!(
                    "station '{}' has {} events in {year}, more than its days",
                    s.id,
                    events.len()
                )));
            }
            for (k, w_mm) in events.iter().enumerate() {
                let day = start + chrono::Days::new(k as u64);
                writeln!(w, "{},{},{:.16e}", s.id, day.format("%Y-%m-%d"), w_mm)?;
            }
            if events.len() < days_in_year {
                let day = start + chrono::Days::new(events.len() as u64);
                writeln!(w, "{},{},0", s.id, day.format("%Y-%m-%d"))?;
            }
        }
    }
    w.flush()?;
    Ok((stations_path, daily_path))
}

/// Reads an `x,y` station layout (extra columns ignored).
pub fn read_layout(path: &Path) -> Result<Vec<SpatialPoint>> {
    let mut rdr = csv_reader(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| data_error(path, 1, format!("missing column '{name}'")))
    };
    let (cx, cy) = (col("x")?, col("y")?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |c: usize| -> Result<f64> {
            let v = rec.get(c).unwrap_or_default();
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| data_error(path, line, format!("'{v}' is not a finite number")))
        };
        out.push(SpatialPoint::from([num(cx)?, num(cy)?]));
    }
    Ok(out)
}

/// Reads target covariates: either `id,<covariates>` or bare covariate columns.
pub fn read_targets(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv_reader(path)?;
    let headers = rdr.headers()?.clone();
    let skip = usize::from(headers.get(0) == Some("id"));
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        ids.push(if skip == 1 {
            rec.get(0).unwrap_or_default().to_string()
        } else {
            (rows.len() + 1).to_string()
        });
        let row = rec
            .iter()
            .skip(skip)
            .map(|v| {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| data_error(path, line, format!("'{v}' is not a finite number")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok((ids, rows))
}

/// Writes `x,y,median,q05,q95`, one row per pixel. `transform` maps the
/// standardized grid points back to raw coordinates when given.
pub fn export_grid<W: Write>(
    grid: &FunctionalGrid,
    transform: Option<&CovariateTransform>,
    out: W,
) -> Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(w, "{}", schema_comment())?;
    writeln!(w, "x,y,median,q05,q95")?;
    for (g, p) in grid.points.iter().enumerate() {
        let raw = match transform {
            Some(t) => t.invert(p),
            None => p.coords().to_vec(),
        };
        let y = raw.get(1).copied().unwrap_or(0.0);
        writeln!(
            w,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            raw[0], y, grid.median[g], grid.q05[g], grid.q95[g]
        )?;
    }
    w.flush()?;
    Ok(())
}

/// SHA-256 over the model, the sampler configuration and the data.
pub fn config_hash(model: ModelKind, config: &SamplerConfig, data: &ObservedData) -> String {
    let mut h = Sha256::new();
    h.update(format!("schema {SCHEMA_VERSION}\n").as_bytes());
    h.update(model.name().as_bytes());
    h.update(
        serde_json::to_string(config)
            .expect("config serializes")
            .as_bytes(),
    );
    h.update(data_fingerprint(data).as_bytes());
    hex::encode(h.finalize())
}

/// SHA-256 over the coordinates, counts, mask and magnitudes of a dataset.
pub fn data_fingerprint(data: &ObservedData) -> String {
    let mut h = Sha256::new();
    for p in data.points() {
        for c in p.coords() {
            h.update(c.to_le_bytes());
        }
    }
    h.update((data.n_trials() as u64).to_le_bytes());
    for ((i, j), &n) in data.counts().indexed_iter() {
        h.update([u8::from(data.is_observed(i, j))]);
        h.update(n.to_le_bytes());
        for x in data.ln_magnitudes(i, j) {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Header of a chain archive.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveHeader {
    pub schema_version: u32,
    pub model: ModelKind,
    pub config_hash: String,
    pub config: SamplerConfig,
    pub n_stations: usize,
    pub n_years: usize,
    pub dim: usize,
    pub n_trials: u32,
    pub transform: CovariateTransform,
    pub points: Vec<SpatialPoint>,
}

impl ArchiveHeader {
    pub fn new(
        model: ModelKind,
        config: &SamplerConfig,
        data: &ObservedData,
        transform: CovariateTransform,
    ) -> ArchiveHeader {
        ArchiveHeader {
            schema_version: SCHEMA_VERSION,
            model,
            config_hash: config_hash(model, config, data),
            config: config.clone(),
            n_stations: data.n_stations(),
            n_years: data.n_years(),
            dim: data.dim(),
            n_trials: data.n_trials(),
            transform,
            points: data.points().to_vec(),
        }
    }

    /// Column names of a row, `iteration` first.
    pub fn columns(&self) -> Vec<String> {
        let (m, t, p) = (self.n_stations, self.n_years, self.dim);
        let mut out = vec!["iteration".to_string()];
        for layer in ["pi", "gamma", "delta"] {
            let mut push = |name: String| out.push(format!("{layer}.{name}"));
            match self.model {
                ModelKind::SemiParametric => {
                    for n in [
                        "psi",
                        "tau2",
                        "sigma2",
                        "zeta_psi",
                        "zeta_tau2",
                        "zeta_sigma2",
                    ] {
                        push(n.to_string());
                    }
                    (0..p).for_each(|h| push(format!("lambda{}", h + 1)));
                    (0..m).for_each(|i| push(format!("mu{}", i + 1)));
                }
                ModelKind::Parametric => {
                    (0..=p).for_each(|h| push(format!("beta{h}")));
                    (0..=p).for_each(|h| push(format!("zeta_beta{h}")));
                    push("tau2".into());
                    push("zeta_tau2".into());
                }
            }
            for i in 0..m {
                for j in 0..t {
                    push(format!("field{}_{}", i + 1, j + 1));
                }
            }
        }
        out
    }
}

fn draw_row(draw: &PosteriorDraw, out: &mut Vec<f64>) {
    out.clear();
    out.push(draw.iteration() as f64);
    match draw {
        PosteriorDraw::SemiParametric { blocks, .. } => {
            for b in blocks {
                out.extend([
                    b.psi,
                    b.tau2,
                    b.sigma2,
                    b.zeta_psi,
                    b.zeta_tau2,
                    b.zeta_sigma2,
                ]);
                out.extend(&b.lambdas);
                out.extend(&b.mu);
                out.extend(b.field.iter());
            }
        }
        PosteriorDraw::Parametric { blocks, .. } => {
            for b in blocks {
                out.extend(&b.beta);
                out.extend(&b.zeta_beta);
                out.extend([b.tau2, b.zeta_tau2]);
                out.extend(b.field.iter());
            }
        }
    }
}

fn parse_row(h: &ArchiveHeader, v: &[f64]) -> PosteriorDraw {
    let (m, t, p) = (h.n_stations, h.n_years, h.dim);
    let iteration = v[0] as u64;
    let mut pos = 1;
    let mut take = |n: usize| {
        let s = v[pos..pos + n].to_vec();
        pos += n;
        s
    };
    match h.model {
        ModelKind::SemiParametric => {
            let blocks = [(); 3].map(|_| {
                let s = take(6);
                let lambdas = take(p);
                let mu = take(m);
                let field = Array2::from_shape_vec((m, t), take(m * t)).expect("row width checked");
                GpBlockState {
                    psi: s[0],
                    tau2: s[1],
                    sigma2: s[2],
                    zeta_psi: s[3],
                    zeta_tau2: s[4],
                    zeta_sigma2: s[5],
                    lambdas,
                    mu,
                    field,
                }
            });
            PosteriorDraw::SemiParametric { iteration, blocks }
        }
        ModelKind::Parametric => {
            let blocks = [(); 3].map(|_| {
                let beta = take(p + 1);
                let zeta_beta = take(p + 1);
                let s = take(2);
                let field = Array2::from_shape_vec((m, t), take(m * t)).expect("row width checked");
                LinearBlock {
                    beta,
                    zeta_beta,
                    tau2: s[0],
                    zeta_tau2: s[1],
                    field,
                }
            });
            PosteriorDraw::Parametric { iteration, blocks }
        }
    }
}

/// Writes the header, one `{:.16e}` row per draw, and a `# end rows=N` trailer.
pub fn write_chain<W: Write>(
    header: &ArchiveHeader,
    draws: &[PosteriorDraw],
    out: W,
) -> Result<()> {
    let mut w = BufWriter::new(out);
    let json = |v: &dyn erased::Json| v.to_json();
    writeln!(w, "# rainmap chain archive")?;
    writeln!(w, "# schema_version: {}", header.schema_version)?;
    writeln!(w, "# model: {}", header.model)?;
    writeln!(w, "# config_hash: {}", header.config_hash)?;
    writeln!(w, "# seed: {}", header.config.seed)?;
    writeln!(w, "# p: {}", header.dim)?;
    writeln!(w, "# M: {}", header.n_stations)?;
    writeln!(w, "# T: {}", header.n_years)?;
    writeln!(w, "# n_trials: {}", header.n_trials)?;
    writeln!(w, "# n_iterations: {}", header.config.n_iterations)?;
    writeln!(w, "# burn_in: {}", header.config.burn_in)?;
    writeln!(w, "# thin: {}", header.config.thin)?;
    writeln!(w, "# priors: {}", json(&header.config.priors))?;
    writeln!(w, "# config: {}", json(&header.config))?;
    writeln!(w, "# transform: {}", json(&header.transform))?;
    let pts: Vec<Vec<f64>> = header.points.iter().map(|p| p.coords().to_vec()).collect();
    writeln!(w, "# points: {}", json(&pts))?;
    writeln!(w, "{}", header.columns().join(","))?;
    let mut row = Vec::new();
    for d in draws {
        draw_row(d, &mut row);
        let text: Vec<String> = row.iter().map(|x| format!("{x:.16e}")).collect();
        writeln!(w, "{}", text.join(","))?;
    }
    writeln!(w, "# end rows={}", draws.len())?;
    w.flush()?;
    Ok(())
}

mod erased {
    pub trait Json {
        fn to_json(&self) -> String;
    }

    impl<T: serde::Serialize> Json for T {
        fn to_json(&self) -> String {
            serde_json::to_string(self).expect("value serializes")
        }
    }
}

pub fn write_chain_file(
    path: &Path,
    header: &ArchiveHeader,
    draws: &[PosteriorDraw],
) -> Result<()> {
    write_chain(header, draws, File::create(path)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainArchive {
    pub header: ArchiveHeader,
    pub draws: Vec<PosteriorDraw>,
}

/// Reads and validates a chain archive: schema version, header consistency,
/// row width, row count against the stored configuration, and the trailer.
pub fn read_chain(path: &Path) -> Result<ChainArchive> {
    let reader = BufReader::new(File::open(path)?);
    let mut fields: HashMap<String, String> = HashMap::new();
    let mut lines = reader.lines();
    let mut columns: Option<Vec<String>> = None;
    for line in lines.by_ref() {
        let line = line?;
        if let Some(rest) = line.strip_prefix("# ") {
            if let Some((k, v)) = rest.split_once(": ") {
                fields.insert(k.to_string(), v.to_string());
            }
            continue;
        }
        columns = Some(line.split(',').map(str::to_string).collect());
        break;
    }
    let columns =
        columns.ok_or_else(|| archive_error(path, "no column line; the file is truncated"))?;
    let get = |k: &str| {
        fields
            .get(k)
            .ok_or_else(|| archive_error(path, format!("header lacks '{k}'")))
    };
    let num = |k: &str| -> Result<u64> {
        get(k)?
            .parse()
            .map_err(|_| archive_error(path, format!("header field '{k}' is not an integer")))
    };
    let json = |k: &str| -> Result<serde_json::Value> {
        serde_json::from_str(get(k)?)
            .map_err(|e| archive_error(path, format!("header field '{k}': {e}")))
    };
    let schema_version = num("schema_version")? as u32;
    if schema_version != SCHEMA_VERSION {
        return Err(archive_error(
            path,
            format!("schema version {schema_version}, expected {SCHEMA_VERSION}"),
        ));
    }
    let model: ModelKind = get("model")?.parse()?;
    let config: SamplerConfig = serde_json::from_value(json("config")?)
        .map_err(|e| archive_error(path, format!("config: {e}")))?;
    let transform: CovariateTransform = serde_json::from_value(json("transform")?)
        .map_err(|e| archive_error(path, format!("transform: {e}")))?;
    let raw_points: Vec<Vec<f64>> = serde_json::from_value(json("points")?)
        .map_err(|e| archive_error(path, format!("points: {e}")))?;
    let points = raw_points
        .into_iter()
        .map(SpatialPoint::new)
        .collect::<Result<Vec<_>>>()?;
    let header = ArchiveHeader {
        schema_version,
        model,
        config_hash: get("config_hash")?.clone(),
        n_stations: num("M")? as usize,
        n_years: num("T")? as usize,
        dim: num("p")? as usize,
        n_trials: num("n_trials")? as u32,
        transform,
        points,
        config,
    };
    let c = &header.config;
    let checks = [
        ("seed", c.seed),
        ("n_iterations", c.n_iterations),
        ("burn_in", c.burn_in),
        ("thin", c.thin),
    ];
    for (k, v) in checks {
        if num(k)? != v {
            return Err(archive_error(
                path,
                format!("header '{k}' disagrees with the stored config"),
            ));
        }
    }
    let priors: crate::model::Priors = serde_json::from_value(json("priors")?)
        .map_err(|e| archive_error(path, format!("priors: {e}")))?;
    if priors != c.priors {
        return Err(archive_error(
            path,
            "header priors disagree with the stored config",
        ));
    }
    if header.points.len() != header.n_stations
        || header.points.iter().any(|p| p.dim() != header.dim)
    {
        return Err(archive_error(
            path,
            "station coordinates disagree with M and p",
        ));
    }
    if columns != header.columns() {
        return Err(archive_error(
            path,
            "column line does not match the header dimensions",
        ));
    }

    let width = columns.len();
    let mut draws = Vec::new();
    let mut trailer = None;
    for (k, line) in lines.enumerate() {
        let line = line?;
        if let Some(rest) = line.strip_prefix("# end rows=") {
            trailer = Some(
                rest.trim()
                    .parse::<usize>()
                    .map_err(|_| archive_error(path, "malformed trailer"))?,
            );
            break;
        }
        let values = line
            .split(',')
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| archive_error(path, format!("row {} has a malformed number", k + 1)))?;
        if values.len() != width {
            return Err(archive_error(
                path,
                format!(
                    "row {} has {} values, expected {width}",
                    k + 1,
                    values.len()
                ),
            ));
        }
        draws.push(parse_row(&header, &values));
    }
    let trailer =
        trailer.ok_or_else(|| archive_error(path, "missing end trailer; the file is truncated"))?;
    if trailer != draws.len() {
        return Err(archive_error(
            path,
            format!("trailer announces {trailer} rows, found {}", draws.len()),
        ));
    }
    if draws.len() as u64 != c.n_stored() {
        return Err(archive_error(
            path,
            format!(
                "{} rows, but the configuration stores (n_iterations - burn_in) / thin = {}",
                draws.len(),
                c.n_stored()
            ),
        ));
    }
    Ok(ChainArchive { header, draws })
}
