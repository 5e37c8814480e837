//! From tile predictions to the headline numbers: municipality-level
//! aggregation, the stratified validation split, least-squares fits that
//! combine CNN estimates with landcover fractions, and the R-squared report
//! across strata and sectors.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Stream;
use crate::survey::BucketDistribution;
use crate::synthworld::{LandcoverFractions, MunicipalityId, Sector, World};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("validation fraction {0} must lie strictly between 0 and 1")]
    BadValidationFraction(f64),
    #[error("stratified split needs at least 2 in-survey {sector} municipalities, found {count}")]
    TooFewPerSector { sector: Sector, count: usize },
    #[error("length mismatch: {left} vs {right}")]
    ArityMismatch { left: usize, right: usize },
    #[error("input is empty")]
    EmptyInput,
    #[error("least squares needs at least {need} rows for {cols} columns, got {rows}")]
    Underdetermined { rows: usize, cols: usize, need: usize },
    #[error("ridge penalty {0} must be non-negative")]
    NegativeRidge(f64),
    #[error("design matrix is rank-deficient even with the ridge fallback")]
    RankDeficient,
    #[error("targets are constant; R-squared is undefined")]
    DegenerateVariance,
    #[error("no benchmark for municipality {0}")]
    MissingBenchmark(MunicipalityId),
    #[error("no split assignment for municipality {0}")]
    MissingSplit(MunicipalityId),
    #[error("no estimate for municipality {0}")]
    MissingEstimate(MunicipalityId),
    #[error(transparent)]
    Distribution(#[from] crate::survey::SurveyError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("estimates line {line}: {message}")]
    Csv { line: usize, message: String },
}

/// Which stratum a municipality belongs to for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    Validation10,
    SurveyTrain,
    NonSurvey,
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stratum::Validation10 => write!(f, "validation10"),
            Stratum::SurveyTrain => write!(f, "survey_train"),
            Stratum::NonSurvey => write!(f, "non_survey"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub strata: BTreeMap<MunicipalityId, Stratum>,
    pub seed: u64,
}

impl SplitAssignment {
    pub fn stratum(&self, id: MunicipalityId) -> Option<Stratum> {
        self.strata.get(&id).copied()
    }
}

/// Assign every municipality a stratum: a validation draw of
/// floor(fraction x in-survey count), stratified so urban and rural are
/// sampled proportionally; the remaining in-survey municipalities form the
/// training stratum and everything else is out of survey.
pub fn make_split(
    world: &World,
    validation_fraction: f64,
    seed: u64,
) -> Result<SplitAssignment, EvalError> {
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(EvalError::BadValidationFraction(validation_fraction));
    }
    let mut by_sector: BTreeMap<Sector, Vec<MunicipalityId>> = BTreeMap::new();
    let mut in_survey_total = 0usize;
    for mun in &world.municipalities {
        if mun.in_survey {
            by_sector.entry(mun.sector).or_default().push(mun.id);
            in_survey_total += 1;
        }
    }
    for sector in [Sector::Urban, Sector::Rural] {
        let count = by_sector.get(&sector).map_or(0, Vec::len);
        if count < 2 {
            return Err(EvalError::TooFewPerSector { sector, count });
        }
    }

    let total_validation = (validation_fraction * in_survey_total as f64).floor() as usize;
    let n_urban = by_sector[&Sector::Urban].len();
    // Proportional allocation, rounded; the rural side takes the remainder.
    let mut urban_validation =
        (total_validation as f64 * n_urban as f64 / in_survey_total as f64).round() as usize;
    urban_validation = urban_validation.min(n_urban).min(total_validation);
    let mut rural_validation = total_validation - urban_validation;
    let n_rural = by_sector[&Sector::Rural].len();
    if rural_validation > n_rural {
        urban_validation += rural_validation - n_rural;
        rural_validation = n_rural;
    }

    let mut strata: BTreeMap<MunicipalityId, Stratum> = world
        .municipalities
        .iter()
        .map(|m| {
            let s = if m.in_survey {
                Stratum::SurveyTrain
            } else {
                Stratum::NonSurvey
            };
            (m.id, s)
        })
        .collect();
    for (sector_ix, (sector, take)) in [
        (Sector::Urban, urban_validation),
        (Sector::Rural, rural_validation),
    ]
    .into_iter()
    .enumerate()
    {
        let mut ids = by_sector[&sector].clone();
        ids.sort_unstable();
        Stream::new(seed, "validation-split", &[sector_ix as u64]).shuffle(&mut ids);
        for id in ids.into_iter().take(take) {
            strata.insert(id, Stratum::Validation10);
        }
    }
    Ok(SplitAssignment { strata, seed })
}

/// Weighted component-wise mean of tile distributions. Weights must be
/// normalized; the simplex check on the result enforces that.
pub fn aggregate_tiles(
    predictions: &[BucketDistribution],
    weights: &[f64],
) -> Result<BucketDistribution, EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if predictions.len() != weights.len() {
        return Err(EvalError::ArityMismatch {
            left: predictions.len(),
            right: weights.len(),
        });
    }
    let mut acc = [0.0f64; 3];
    for (p, &w) in predictions.iter().zip(weights) {
        let a = p.as_array();
        for k in 0..3 {
            acc[k] += w * a[k];
        }
    }
    Ok(BucketDistribution::new(acc[0], acc[1], acc[2])?)
}

/// Weighted mean of landcover fractions under the same normalized weights
/// used for tile aggregation.
pub fn mean_landcover(
    fractions: &[LandcoverFractions],
    weights: &[f64],
) -> Result<LandcoverFractions, EvalError> {
    if fractions.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if fractions.len() != weights.len() {
        return Err(EvalError::ArityMismatch {
            left: fractions.len(),
            right: weights.len(),
        });
    }
    let mut acc = [0.0f64; 5];
    for (f, &w) in fractions.iter().zip(weights) {
        let a = f.as_array();
        for k in 0..5 {
            acc[k] += w * a[k];
        }
    }
    Ok(LandcoverFractions::from_array(acc))
}

/// A fitted linear model: intercept plus one coefficient per design column.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    /// True when the Gram matrix was singular at the requested ridge and the
    /// fit fell back to a tiny penalty.
    pub ridge_fallback: bool,
}

impl LinearFit {
    pub fn predict(&self, row: &[f64]) -> f64 {
        self.intercept
            + self
                .coefficients
                .iter()
                .zip(row)
                .map(|(c, x)| c * x)
                .sum::<f64>()
    }
}

/// Least squares with an (unpenalized) intercept via the normal equations,
/// solved by Gaussian elimination with partial pivoting. A singular system
/// at ridge = 0 is retried once with ridge = 1e-8 and flagged.
pub fn fit_least_squares(
    design: &[Vec<f64>],
    targets: &[f64],
    ridge: f64,
) -> Result<LinearFit, EvalError> {
    if ridge < 0.0 {
        return Err(EvalError::NegativeRidge(ridge));
    }
    if design.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if design.len() != targets.len() {
        return Err(EvalError::ArityMismatch {
            left: design.len(),
            right: targets.len(),
        });
    }
    let cols = design[0].len();
    for row in design {
        if row.len() != cols {
            return Err(EvalError::ArityMismatch {
                left: row.len(),
                right: cols,
            });
        }
    }
    if ridge == 0.0 && design.len() < cols + 1 {
        return Err(EvalError::Underdetermined {
            rows: design.len(),
            cols,
            need: cols + 1,
        });
    }

    let solve_with = |lambda: f64| -> Option<Vec<f64>> {
        // Gram matrix of the intercept-augmented design, penalty on the
        // non-intercept diagonal only.
        let m = cols + 1;
        let row_of = |r: usize, c: usize| -> f64 {
            if c == 0 {
                1.0
            } else {
                design[r][c - 1]
            }
        };
        let mut gram = vec![vec![0.0f64; m]; m];
        let mut rhs = vec![0.0f64; m];
        for r in 0..design.len() {
            for a in 0..m {
                let va = row_of(r, a);
                rhs[a] += va * targets[r];
                for b in a..m {
                    gram[a][b] += va * row_of(r, b);
                }
            }
        }
        for a in 0..m {
            for b in 0..a {
                gram[a][b] = gram[b][a];
            }
        }
        for d in 1..m {
            gram[d][d] += lambda;
        }
        solve_linear_system(gram, rhs)
    };

    let mut ridge_fallback = false;
    let beta = match solve_with(ridge) {
        Some(beta) => beta,
        None if ridge == 0.0 => {
            ridge_fallback = true;
            solve_with(1e-8).ok_or(EvalError::RankDeficient)?
        }
        None => return Err(EvalError::RankDeficient),
    };
    Ok(LinearFit {
        intercept: beta[0],
        coefficients: beta[1..].to_vec(),
        ridge_fallback,
    })
}

/// Gaussian elimination with partial pivoting; None when a pivot collapses
/// (singular or non-finite system).
fn solve_linear_system(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a
        .iter()
        .flatten()
        .fold(0.0f64, |acc, &v| acc.max(v.abs()))
        .max(1.0);
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r1, &r2| a[r1][col].abs().total_cmp(&a[r2][col].abs()))
            .unwrap();
        let pivot = a[pivot_row][col];
        if !pivot.is_finite() || pivot.abs() <= 1e-12 * scale {
            return None;
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for row in (col + 1)..n {
            let factor = a[row][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            for c in col..n {
                let delta = factor * a[col][c];
                a[row][c] -= delta;
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0f64; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for c in (row + 1)..n {
            acc -= a[row][c] * x[c];
        }
        x[row] = acc / a[row][row];
        if !x[row].is_finite() {
            return None;
        }
    }
    Some(x)
}

/// Coefficient of determination, 1 - SS_res / SS_tot, unclamped so
/// out-of-sample values may be negative.
pub fn r_squared(y: &[f64], yhat: &[f64]) -> Result<f64, EvalError> {
    if y.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if y.len() != yhat.len() {
        return Err(EvalError::ArityMismatch {
            left: y.len(),
            right: yhat.len(),
        });
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|&v| (v - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(EvalError::DegenerateVariance);
    }
    let ss_res: f64 = y.iter().zip(yhat).map(|(&v, &p)| (v - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// One municipality's predicted poverty profile.
#[derive(Debug, Clone, PartialEq)]
pub struct MunicipalityEstimate {
    pub municipality_id: MunicipalityId,
    pub sector: Sector,
    pub cnn_distribution: BucketDistribution,
    /// Headline rate implied by the CNN distribution (share below the
    /// well-being line).
    pub cnn_rate: f64,
    pub landcover_mean: LandcoverFractions,
}

/// Report rows are keyed by these strata: the validation draw, the whole
/// surveyed set (validation + training), and the out-of-survey remainder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportStratum {
    Validation10,
    AllSurvey,
    NonSurvey,
}

impl ReportStratum {
    pub const ALL: [ReportStratum; 3] = [
        ReportStratum::Validation10,
        ReportStratum::AllSurvey,
        ReportStratum::NonSurvey,
    ];

    fn contains(self, stratum: Stratum) -> bool {
        match self {
            ReportStratum::Validation10 => stratum == Stratum::Validation10,
            ReportStratum::AllSurvey => {
                stratum == Stratum::Validation10 || stratum == Stratum::SurveyTrain
            }
            ReportStratum::NonSurvey => stratum == Stratum::NonSurvey,
        }
    }
}

impl fmt::Display for ReportStratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReportStratum::Validation10 => write!(f, "validation10"),
            ReportStratum::AllSurvey => write!(f, "all_survey"),
            ReportStratum::NonSurvey => write!(f, "non_survey"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SectorFilter {
    All,
    Urban,
    Rural,
}

impl SectorFilter {
    pub const ALL: [SectorFilter; 3] =
        [SectorFilter::All, SectorFilter::Urban, SectorFilter::Rural];

    fn admits(self, sector: Sector) -> bool {
        match self {
            SectorFilter::All => true,
            SectorFilter::Urban => sector == Sector::Urban,
            SectorFilter::Rural => sector == Sector::Rural,
        }
    }
}

impl fmt::Display for SectorFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SectorFilter::All => write!(f, "all"),
            SectorFilter::Urban => write!(f, "urban"),
            SectorFilter::Rural => write!(f, "rural"),
        }
    }
}

/// One stratum-by-sector cell. R-squared values are absent (not zero) when
/// the cell is empty or its benchmark rates are constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalCell {
    pub r2_cnn: Option<f64>,
    pub r2_landcover: Option<f64>,
    pub r2_both: Option<f64>,
    pub n_areas: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Nine rows in fixed order: stratum-major, sector-minor.
    pub rows: Vec<(ReportStratum, SectorFilter, EvalCell)>,
}

impl EvalReport {
    pub fn cell(&self, stratum: ReportStratum, sector: SectorFilter) -> &EvalCell {
        self.rows
            .iter()
            .find(|(s, f, _)| *s == stratum && *f == sector)
            .map(|(_, _, c)| c)
            .expect("report always carries all nine cells")
    }
}

/// Landcover columns used in the regressions: four of the five fractions.
/// The fifth is dropped because the fractions sum to one, which would make
/// the design collinear with the intercept.
fn landcover_design(lc: &LandcoverFractions) -> Vec<f64> {
    vec![lc.built, lc.crop, lc.forest, lc.water]
}

/// Build the stratified R-squared report. The three regressions (benchmark
/// on cnn_rate; on landcover; on both) are fitted once on the SurveyTrain
/// municipalities and applied unchanged to every cell.
pub fn evaluate(
    estimates: &[MunicipalityEstimate],
    benchmarks: &BTreeMap<MunicipalityId, BucketDistribution>,
    split: &SplitAssignment,
) -> Result<EvalReport, EvalError> {
    if estimates.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let by_id: BTreeMap<MunicipalityId, &MunicipalityEstimate> = estimates
        .iter()
        .map(|e| (e.municipality_id, e))
        .collect();
    for id in split.strata.keys() {
        if !by_id.contains_key(id) {
            return Err(EvalError::MissingEstimate(*id));
        }
    }

    struct Row<'a> {
        est: &'a MunicipalityEstimate,
        stratum: Stratum,
        benchmark_rate: f64,
    }
    let mut rows = Vec::with_capacity(estimates.len());
    for est in estimates {
        let stratum = split
            .stratum(est.municipality_id)
            .ok_or(EvalError::MissingSplit(est.municipality_id))?;
        let benchmark = benchmarks
            .get(&est.municipality_id)
            .ok_or(EvalError::MissingBenchmark(est.municipality_id))?;
        rows.push(Row {
            est,
            stratum,
            benchmark_rate: benchmark.wellbeing_rate(),
        });
    }

    // Frozen fits on the training stratum.
    let train: Vec<&Row> = rows
        .iter()
        .filter(|r| r.stratum == Stratum::SurveyTrain)
        .collect();
    let design_cnn: Vec<Vec<f64>> = train.iter().map(|r| vec![r.est.cnn_rate]).collect();
    let design_lc: Vec<Vec<f64>> = train
        .iter()
        .map(|r| landcover_design(&r.est.landcover_mean))
        .collect();
    let design_both: Vec<Vec<f64>> = train
        .iter()
        .map(|r| {
            let mut v = vec![r.est.cnn_rate];
            v.extend(landcover_design(&r.est.landcover_mean));
            v
        })
        .collect();
    let y_train: Vec<f64> = train.iter().map(|r| r.benchmark_rate).collect();
    let fit_cnn = fit_least_squares(&design_cnn, &y_train, 0.0)?;
    let fit_lc = fit_least_squares(&design_lc, &y_train, 0.0)?;
    let fit_both = fit_least_squares(&design_both, &y_train, 0.0)?;

    let maybe_r2 = |y: &[f64], yhat: &[f64]| -> Result<Option<f64>, EvalError> {
        match r_squared(y, yhat) {
            Ok(v) => Ok(Some(v)),
            Err(EvalError::DegenerateVariance) | Err(EvalError::EmptyInput) => Ok(None),
            Err(e) => Err(e),
        }
    };

    let mut report_rows = Vec::with_capacity(9);
    for stratum in ReportStratum::ALL {
        for sector in SectorFilter::ALL {
            let members: Vec<&Row> = rows
                .iter()
                .filter(|r| stratum.contains(r.stratum) && sector.admits(r.est.sector))
                .collect();
            let y: Vec<f64> = members.iter().map(|r| r.benchmark_rate).collect();
            let pred_cnn: Vec<f64> = members
                .iter()
                .map(|r| fit_cnn.predict(&[r.est.cnn_rate]))
                .collect();
            let pred_lc: Vec<f64> = members
                .iter()
                .map(|r| fit_lc.predict(&landcover_design(&r.est.landcover_mean)))
                .collect();
            let pred_both: Vec<f64> = members
                .iter()
                .map(|r| {
                    let mut v = vec![r.est.cnn_rate];
                    v.extend(landcover_design(&r.est.landcover_mean));
                    fit_both.predict(&v)
                })
                .collect();
            let cell = EvalCell {
                r2_cnn: maybe_r2(&y, &pred_cnn)?,
                r2_landcover: maybe_r2(&y, &pred_lc)?,
                r2_both: maybe_r2(&y, &pred_both)?,
                n_areas: members.len(),
            };
            report_rows.push((stratum, sector, cell));
        }
    }
    Ok(EvalReport { rows: report_rows })
}

fn fmt_r2(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.4}"),
        None => String::new(),
    }
}

/// CSV form: `stratum,sector,r2_cnn,r2_landcover,r2_both,n_areas`, empty
/// fields for absent cells.
pub fn write_eval_report_csv(path: &Path, report: &EvalReport) -> Result<(), EvalError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "stratum,sector,r2_cnn,r2_landcover,r2_both,n_areas")?;
    for (stratum, sector, cell) in &report.rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            stratum,
            sector,
            fmt_r2(cell.r2_cnn),
            fmt_r2(cell.r2_landcover),
            fmt_r2(cell.r2_both),
            cell.n_areas
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Aligned plain-text rendering of the report grid.
pub fn render_eval_report_text(report: &EvalReport) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<14} {:<7} {:>8} {:>13} {:>8} {:>8}\n",
        "stratum", "sector", "r2_cnn", "r2_landcover", "r2_both", "n_areas"
    ));
    for (stratum, sector, cell) in &report.rows {
        let dash = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        s.push_str(&format!(
            "{:<14} {:<7} {:>8} {:>13} {:>8} {:>8}\n",
            stratum.to_string(),
            sector.to_string(),
            dash(cell.r2_cnn),
            dash(cell.r2_landcover),
            dash(cell.r2_both),
            cell.n_areas
        ));
    }
    s
}

/// Estimates CSV: one row per municipality with the aggregated CNN
/// distribution, its headline rate, and the mean landcover fractions.
pub fn write_estimates_csv(
    path: &Path,
    estimates: &[MunicipalityEstimate],
) -> Result<(), EvalError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "municipality_id,sector,p_below_min,p_mid,p_above,cnn_rate,lc_built,lc_crop,lc_forest,lc_water,lc_bare"
    )?;
    for e in estimates {
        let d = e.cnn_distribution.as_array();
        let l = e.landcover_mean.as_array();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            e.municipality_id, e.sector, d[0], d[1], d[2], e.cnn_rate, l[0], l[1], l[2], l[3], l[4]
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_estimates_csv(path: &Path) -> Result<Vec<MunicipalityEstimate>, EvalError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut estimates = Vec::new();
    for (ix, line) in file.lines().enumerate() {
        let line = line?;
        if ix == 0 {
            continue;
        }
        let err = |message: String| EvalError::Csv {
            line: ix + 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 11 {
            return Err(err(format!("expected 11 fields, got {}", fields.len())));
        }
        let id: u32 = fields[0]
            .parse()
            .map_err(|e| err(format!("bad municipality_id: {e}")))?;
        let sector = match fields[1] {
            "urban" => Sector::Urban,
            "rural" => Sector::Rural,
            other => return Err(err(format!("unknown sector `{other}`"))),
        };
        let mut nums = [0.0f64; 9];
        for (k, field) in fields[2..].iter().enumerate() {
            nums[k] = field
                .parse()
                .map_err(|e| err(format!("bad numeric field {}: {e}", k + 2)))?;
        }
        let dist = BucketDistribution::new(nums[0], nums[1], nums[2])
            .map_err(|e| err(e.to_string()))?;
        estimates.push(MunicipalityEstimate {
            municipality_id: MunicipalityId(id),
            sector,
            cnn_distribution: dist,
            cnn_rate: nums[3],
            landcover_mean: LandcoverFractions::from_array([
                nums[4], nums[5], nums[6], nums[7], nums[8],
            ]),
        });
    }
    Ok(estimates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use crate::synthworld::{Cell, Municipality, WorldConfig};

    /// Hand-built world: `n` municipalities, the first `n_survey` in-survey,
    /// urban for even ids. Incomes are irrelevant for split tests.
    fn toy_world(n: u32, n_survey: u32) -> World {
        let municipalities = (0..n)
            .map(|i| Municipality {
                id: MunicipalityId(i),
                cells: vec![Cell::new(i, 0)],
                sector: if i % 2 == 0 { Sector::Urban } else { Sector::Rural },
                latent_wealth: 0.0,
                population: 100,
                in_survey: i < n_survey,
            })
            .collect();
        World {
            config: WorldConfig::default(),
            municipalities,
            household_incomes: vec![Vec::new(); n as usize],
            labor_incomes: vec![Vec::new(); n as usize],
        }
    }

    #[test]
    fn split_of_896_in_survey_takes_89_validation() {
        let world = toy_world(1000, 896);
        let split = make_split(&world, 0.10, 11).unwrap();
        let validation = split
            .strata
            .values()
            .filter(|&&s| s == Stratum::Validation10)
            .count();
        assert_eq!(validation, 89);
        let non_survey = split
            .strata
            .values()
            .filter(|&&s| s == Stratum::NonSurvey)
            .count();
        assert_eq!(non_survey, 104);
    }

    #[test]
    fn split_is_a_deterministic_partition() {
        let world = toy_world(60, 30);
        let a = make_split(&world, 0.10, 5).unwrap();
        let b = make_split(&world, 0.10, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.strata.len(), 60);
        for mun in &world.municipalities {
            let s = a.stratum(mun.id).unwrap();
            if mun.in_survey {
                assert_ne!(s, Stratum::NonSurvey);
            } else {
                assert_eq!(s, Stratum::NonSurvey);
            }
        }
    }

    #[test]
    fn split_samples_sectors_proportionally() {
        let world = toy_world(400, 300);
        let split = make_split(&world, 0.10, 9).unwrap();
        let validation_urban = world
            .municipalities
            .iter()
            .filter(|m| {
                m.sector == Sector::Urban && split.stratum(m.id) == Some(Stratum::Validation10)
            })
            .count();
        let total_validation = split
            .strata
            .values()
            .filter(|&&s| s == Stratum::Validation10)
            .count();
        assert_eq!(total_validation, 30);
        // In-survey is half urban, so the validation draw should be too.
        let expected = total_validation as f64 * 0.5;
        assert!((validation_urban as f64 - expected).abs() <= 1.0);
    }

    #[test]
    fn split_errors_when_a_sector_is_too_thin() {
        // Only one rural municipality in survey (ids 0..3: sectors U,R,U).
        let mut world = toy_world(10, 3);
        world.municipalities[1].in_survey = true;
        world.municipalities[3].in_survey = false;
        match make_split(&world, 0.10, 1) {
            Err(EvalError::TooFewPerSector { sector, count }) => {
                assert_eq!(sector, Sector::Rural);
                assert_eq!(count, 1);
            }
            other => panic!("expected TooFewPerSector, got {other:?}"),
        }
        assert!(matches!(
            make_split(&toy_world(10, 6), 0.0, 1),
            Err(EvalError::BadValidationFraction(_))
        ));
        assert!(matches!(
            make_split(&toy_world(10, 6), 1.0, 1),
            Err(EvalError::BadValidationFraction(_))
        ));
    }

    #[test]
    fn aggregation_matches_hand_computations() {
        let a = BucketDistribution::new(1.0, 0.0, 0.0).unwrap();
        let b = BucketDistribution::new(0.0, 0.0, 1.0).unwrap();
        let got = aggregate_tiles(&[a, b], &[0.25, 0.75]).unwrap();
        assert!((got.p_below_min - 0.25).abs() < 1e-15);
        assert_eq!(got.p_mid, 0.0);
        assert!((got.p_above - 0.75).abs() < 1e-15);

        let single = aggregate_tiles(&[a], &[1.0]).unwrap();
        assert_eq!(single, a);

        let c = BucketDistribution::new(0.2, 0.3, 0.5).unwrap();
        let same = aggregate_tiles(&[c, c, c, c], &[0.25; 4]).unwrap();
        for (x, y) in same.as_array().iter().zip(c.as_array()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn aggregation_rejects_bad_inputs() {
        let a = BucketDistribution::new(0.5, 0.25, 0.25).unwrap();
        assert!(matches!(
            aggregate_tiles(&[a, a], &[0.5]),
            Err(EvalError::ArityMismatch { left: 2, right: 1 })
        ));
        assert!(matches!(aggregate_tiles(&[], &[]), Err(EvalError::EmptyInput)));
        // Unnormalized weights leave the simplex, which the distribution
        // constructor rejects.
        assert!(aggregate_tiles(&[a, a], &[0.8, 0.8]).is_err());
    }

    #[test]
    fn least_squares_examples() {
        let fit = fit_least_squares(&[vec![1.0], vec![2.0]], &[2.0, 4.0], 0.0).unwrap();
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-10);
        assert!(fit.intercept.abs() < 1e-10);
        assert!(!fit.ridge_fallback);

        let fit = fit_least_squares(
            &[vec![1.0], vec![2.0], vec![3.0]],
            &[5.0, 5.0, 5.0],
            0.0,
        )
        .unwrap();
        assert!(fit.coefficients[0].abs() < 1e-10);
        assert!((fit.intercept - 5.0).abs() < 1e-10);
    }

    #[test]
    fn duplicated_column_falls_back_to_ridge() {
        let design: Vec<Vec<f64>> = (0..6)
            .map(|i| {
                let x = i as f64;
                vec![x, x]
            })
            .collect();
        let y: Vec<f64> = (0..6).map(|i| 3.0 * i as f64 + 1.0).collect();
        let fit = fit_least_squares(&design, &y, 0.0).unwrap();
        assert!(fit.ridge_fallback);
        // The two duplicated columns share the slope.
        let total = fit.coefficients[0] + fit.coefficients[1];
        assert!((total - 3.0).abs() < 1e-4, "combined slope {total}");
    }

    #[test]
    fn least_squares_error_cases() {
        assert!(matches!(
            fit_least_squares(&[vec![1.0, 2.0]], &[1.0], 0.0),
            Err(EvalError::Underdetermined { rows: 1, cols: 2, need: 3 })
        ));
        assert!(matches!(
            fit_least_squares(&[vec![1.0]], &[1.0, 2.0], 0.0),
            Err(EvalError::ArityMismatch { .. })
        ));
        assert!(matches!(
            fit_least_squares(&[vec![1.0]], &[1.0], -0.5),
            Err(EvalError::NegativeRidge(_))
        ));
        assert!(matches!(
            fit_least_squares(
                &[vec![f64::NAN], vec![1.0]],
                &[1.0, 2.0],
                0.0
            ),
            Err(EvalError::RankDeficient)
        ));
    }

    #[test]
    fn r_squared_examples() {
        let y = [1.0, 2.0, 3.0];
        assert!((r_squared(&y, &y).unwrap() - 1.0).abs() < 1e-15);
        let mean = [2.0, 2.0, 2.0];
        assert_eq!(r_squared(&y, &mean).unwrap(), 0.0);
        let yhat = [1.1, 1.9, 3.2];
        assert!((r_squared(&y, &yhat).unwrap() - 0.97).abs() < 1e-12);
        assert!(matches!(
            r_squared(&[2.0, 2.0], &[1.0, 3.0]),
            Err(EvalError::DegenerateVariance)
        ));
        assert!(matches!(
            r_squared(&y, &y[..2]),
            Err(EvalError::ArityMismatch { .. })
        ));
    }

    fn toy_estimates_and_benchmarks(
        n: u32,
    ) -> (
        Vec<MunicipalityEstimate>,
        BTreeMap<MunicipalityId, BucketDistribution>,
        SplitAssignment,
    ) {
        let mut rng = Stream::new(77, "eval-test", &[]);
        let mut estimates = Vec::new();
        let mut benchmarks = BTreeMap::new();
        let mut strata = BTreeMap::new();
        for i in 0..n {
            let rate = 0.1 + 0.8 * rng.uniform();
            let dist = BucketDistribution::new(rate * 0.4, rate * 0.6, 1.0 - rate).unwrap();
            let id = MunicipalityId(i);
            estimates.push(MunicipalityEstimate {
                municipality_id: id,
                sector: if i % 2 == 0 { Sector::Urban } else { Sector::Rural },
                cnn_distribution: dist,
                cnn_rate: dist.wellbeing_rate(),
                landcover_mean: LandcoverFractions::from_array([0.3, 0.2, 0.3, 0.1, 0.1]),
            });
            benchmarks.insert(id, dist);
            let stratum = match i % 5 {
                0 => Stratum::Validation10,
                4 => Stratum::NonSurvey,
                _ => Stratum::SurveyTrain,
            };
            strata.insert(id, stratum);
        }
        (estimates, benchmarks, SplitAssignment { strata, seed: 0 })
    }

    #[test]
    fn perfect_estimates_give_unit_r2_everywhere() {
        let (estimates, benchmarks, split) = toy_estimates_and_benchmarks(40);
        let report = evaluate(&estimates, &benchmarks, &split).unwrap();
        assert_eq!(report.rows.len(), 9);
        for (_, _, cell) in &report.rows {
            assert!(cell.n_areas > 0);
            let r2 = cell.r2_cnn.expect("populated cell");
            assert!((r2 - 1.0).abs() < 1e-9, "r2_cnn = {r2}");
        }
    }

    #[test]
    fn in_sample_r2_is_monotone_in_regressors() {
        // Fit all three models on one noisy sample and score them on that
        // same sample: the combined model can never trail either nested one.
        let mut rng = Stream::new(78, "eval-test-noise", &[]);
        let n = 50;
        let mut design_cnn = Vec::new();
        let mut design_lc = Vec::new();
        let mut design_both = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let cnn = rng.uniform();
            let lc: Vec<f64> = (0..4).map(|_| rng.uniform()).collect();
            y.push(0.5 * cnn + 0.3 * lc[0] - 0.2 * lc[2] + 0.1 * rng.normal());
            design_cnn.push(vec![cnn]);
            let mut both = vec![cnn];
            both.extend(lc.iter());
            design_lc.push(lc);
            design_both.push(both);
        }
        let score = |design: &[Vec<f64>]| {
            let fit = fit_least_squares(design, &y, 0.0).unwrap();
            let yhat: Vec<f64> = design.iter().map(|row| fit.predict(row)).collect();
            r_squared(&y, &yhat).unwrap()
        };
        let r2_cnn = score(&design_cnn);
        let r2_lc = score(&design_lc);
        let r2_both = score(&design_both);
        assert!(r2_both >= r2_cnn - 1e-12, "{r2_both} < {r2_cnn}");
        assert!(r2_both >= r2_lc - 1e-12, "{r2_both} < {r2_lc}");
    }

    #[test]
    fn empty_cells_are_absent_not_zero() {
        let (estimates, benchmarks, mut split) = toy_estimates_and_benchmarks(12);
        // Remove every NonSurvey municipality from that stratum except one.
        let non_survey: Vec<MunicipalityId> = split
            .strata
            .iter()
            .filter(|(_, &s)| s == Stratum::NonSurvey)
            .map(|(&id, _)| id)
            .collect();
        for id in &non_survey[1..] {
            split.strata.insert(*id, Stratum::SurveyTrain);
        }
        let report = evaluate(&estimates, &benchmarks, &split).unwrap();
        let cell = report.cell(ReportStratum::NonSurvey, SectorFilter::All);
        assert_eq!(cell.n_areas, 1);
        assert!(cell.r2_cnn.is_none());
        assert!(cell.r2_landcover.is_none());
        assert!(cell.r2_both.is_none());
    }

    #[test]
    fn evaluate_requires_full_coverage() {
        let (estimates, benchmarks, split) = toy_estimates_and_benchmarks(10);
        assert!(matches!(
            evaluate(&estimates[..9], &benchmarks, &split),
            Err(EvalError::MissingEstimate(_))
        ));
        let mut missing = benchmarks.clone();
        missing.remove(&MunicipalityId(3));
        assert!(matches!(
            evaluate(&estimates, &missing, &split),
            Err(EvalError::MissingBenchmark(_))
        ));
    }

    #[test]
    fn report_csv_and_text_have_fixed_layout() {
        let (estimates, benchmarks, split) = toy_estimates_and_benchmarks(30);
        let report = evaluate(&estimates, &benchmarks, &split).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eval_report.csv");
        write_eval_report_csv(&path, &report).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 10);
        assert_eq!(lines[0], "stratum,sector,r2_cnn,r2_landcover,r2_both,n_areas");
        assert!(lines[1].starts_with("validation10,all,"));
        assert!(lines[9].starts_with("non_survey,rural,"));

        let rendered = render_eval_report_text(&report);
        assert_eq!(rendered.lines().count(), 10);
        assert!(rendered.lines().next().unwrap().contains("r2_landcover"));
    }

    #[test]
    fn estimates_csv_round_trips() {
        let (estimates, _, _) = toy_estimates_and_benchmarks(8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("estimates.csv");
        write_estimates_csv(&path, &estimates).unwrap();
        let back = read_estimates_csv(&path).unwrap();
        assert_eq!(back.len(), estimates.len());
        for (a, b) in estimates.iter().zip(&back) {
            assert_eq!(a.municipality_id, b.municipality_id);
            assert_eq!(a.sector, b.sector);
            assert!((a.cnn_rate - b.cnn_rate).abs() < 1e-15);
            for (x, y) in a
                .landcover_mean
                .as_array()
                .iter()
                .zip(b.landcover_mean.as_array())
            {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }
}
