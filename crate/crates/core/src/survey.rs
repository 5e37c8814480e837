//! Benchmark poverty quantities from household incomes: three-bucket
//! distributions, the two poverty rates, and sector-specific poverty lines.
//!
//! The headline scalar carried through the rest of the pipeline is the
//! well-being rate (share below the upper line); the minimum rate is exposed
//! alongside it everywhere.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synthworld::{MunicipalityId, Sector, World};

#[derive(Debug, Error)]
pub enum SurveyError {
    #[error("empty income sample")]
    EmptySample,
    #[error("invalid poverty lines for {sector:?}: require 0 < {min} < {wellbeing}")]
    InvalidLines {
        sector: Sector,
        min: f64,
        wellbeing: f64,
    },
    #[error("distribution ({p0}, {p1}, {p2}) is not a point on the 3-simplex")]
    InvalidDistribution { p0: f64, p1: f64, p2: f64 },
    #[error("unknown municipality {0}")]
    UnknownMunicipality(MunicipalityId),
    #[error("labor incomes are degenerate; cannot fit the proxy rescaling map")]
    DegenerateProxyFit,
    #[error("benchmark io: {0}")]
    Io(#[from] std::io::Error),
    #[error("benchmark csv parse error at line {line}: {message}")]
    Csv { line: usize, message: String },
}

/// The two poverty thresholds, each with urban and rural variants, in the
/// same units as household income.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PovertyLines {
    pub min_wellbeing_urban: f64,
    pub min_wellbeing_rural: f64,
    pub wellbeing_urban: f64,
    pub wellbeing_rural: f64,
}

impl PovertyLines {
    pub fn validate(&self) -> Result<(), SurveyError> {
        for sector in [Sector::Urban, Sector::Rural] {
            let (min, wb) = self.for_sector(sector);
            if !(min > 0.0 && min < wb) || !min.is_finite() || !wb.is_finite() {
                return Err(SurveyError::InvalidLines {
                    sector,
                    min,
                    wellbeing: wb,
                });
            }
        }
        Ok(())
    }

    /// (minimum well-being line, well-being line) for a sector.
    pub fn for_sector(&self, sector: Sector) -> (f64, f64) {
        match sector {
            Sector::Urban => (self.min_wellbeing_urban, self.wellbeing_urban),
            Sector::Rural => (self.min_wellbeing_rural, self.wellbeing_rural),
        }
    }
}

impl Default for PovertyLines {
    /// Calibrated so the default synthetic world has an all-municipality
    /// mean well-being rate near 0.4, keeping both tails populated.
    fn default() -> Self {
        PovertyLines {
            min_wellbeing_urban: 55.0,
            min_wellbeing_rural: 45.0,
            wellbeing_urban: 100.0,
            wellbeing_rural: 85.0,
        }
    }
}

/// A point on the 3-simplex: below minimum well-being / between the lines /
/// above well-being.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketDistribution {
    pub p_below_min: f64,
    pub p_mid: f64,
    pub p_above: f64,
}

/// Tolerance on the simplex-sum invariant.
pub const SIMPLEX_TOL: f64 = 1e-9;

impl BucketDistribution {
    pub fn new(p_below_min: f64, p_mid: f64, p_above: f64) -> Result<Self, SurveyError> {
        let ok = [p_below_min, p_mid, p_above]
            .iter()
            .all(|p| p.is_finite() && (-SIMPLEX_TOL..=1.0 + SIMPLEX_TOL).contains(p))
            && ((p_below_min + p_mid + p_above) - 1.0).abs() <= SIMPLEX_TOL;
        if ok {
            Ok(BucketDistribution {
                p_below_min,
                p_mid,
                p_above,
            })
        } else {
            Err(SurveyError::InvalidDistribution {
                p0: p_below_min,
                p1: p_mid,
                p2: p_above,
            })
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.p_below_min, self.p_mid, self.p_above]
    }

    pub fn from_array(p: [f64; 3]) -> Result<Self, SurveyError> {
        Self::new(p[0], p[1], p[2])
    }

    /// Share below the minimum well-being line.
    pub fn min_rate(&self) -> f64 {
        self.p_below_min
    }

    /// Share below the well-being line — the pipeline's headline poverty rate.
    pub fn wellbeing_rate(&self) -> f64 {
        self.p_below_min + self.p_mid
    }

    /// Shannon entropy in nats; the floor of the soft-target cross-entropy.
    pub fn entropy(&self) -> f64 {
        self.as_array()
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }
}

/// Household shares per bucket. A household exactly at a line counts in the
/// bucket above it: below = income < min, mid = min <= income < wellbeing,
/// above = income >= wellbeing.
pub fn bucketize(
    incomes: &[f64],
    lines: &PovertyLines,
    sector: Sector,
) -> Result<BucketDistribution, SurveyError> {
    if incomes.is_empty() {
        return Err(SurveyError::EmptySample);
    }
    lines.validate()?;
    let (min_line, wb_line) = lines.for_sector(sector);
    let mut below = 0u64;
    let mut mid = 0u64;
    for &income in incomes {
        if income < min_line {
            below += 1;
        } else if income < wb_line {
            mid += 1;
        }
    }
    let n = incomes.len() as f64;
    let above = incomes.len() as u64 - below - mid;
    BucketDistribution::new(below as f64 / n, mid as f64 / n, above as f64 / n)
}

/// (minimum-well-being rate, well-being rate).
pub fn poverty_rates(dist: &BucketDistribution) -> (f64, f64) {
    (dist.min_rate(), dist.wellbeing_rate())
}

/// Which income variable backs a benchmark: true total incomes, or labor
/// incomes rescaled onto the total-income scale by a fitted linear map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncomeSource {
    TotalIncome,
    LaborProxy,
}

/// Slope/intercept of the pooled total-on-labor regression used to rescale
/// labor incomes before bucketizing.
#[derive(Debug, Clone, Copy)]
pub struct ProxyMap {
    pub intercept: f64,
    pub slope: f64,
}

/// Fit total ~ labor pooled over the households of in-survey municipalities
/// (falling back to all municipalities if none are in-survey).
pub fn fit_proxy_map(world: &World) -> Result<ProxyMap, SurveyError> {
    let any_survey = world.municipalities.iter().any(|m| m.in_survey);
    let mut labor = Vec::new();
    let mut total = Vec::new();
    for (ix, mun) in world.municipalities.iter().enumerate() {
        if any_survey && !mun.in_survey {
            continue;
        }
        labor.extend_from_slice(&world.labor_incomes[ix]);
        total.extend_from_slice(&world.household_incomes[ix]);
    }
    let n = labor.len() as f64;
    let mean_l = labor.iter().sum::<f64>() / n;
    let mean_t = total.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_l = 0.0;
    for (l, t) in labor.iter().zip(&total) {
        cov += (l - mean_l) * (t - mean_t);
        var_l += (l - mean_l) * (l - mean_l);
    }
    if var_l <= 0.0 {
        return Err(SurveyError::DegenerateProxyFit);
    }
    let slope = cov / var_l;
    Ok(ProxyMap {
        intercept: mean_t - slope * mean_l,
        slope,
    })
}

/// Per-municipality benchmark bucket distributions from the chosen source.
pub fn benchmark_municipalities(
    world: &World,
    lines: &PovertyLines,
    source: IncomeSource,
) -> Result<BTreeMap<MunicipalityId, BucketDistribution>, SurveyError> {
    lines.validate()?;
    let proxy = match source {
        IncomeSource::TotalIncome => None,
        IncomeSource::LaborProxy => Some(fit_proxy_map(world)?),
    };
    let mut out = BTreeMap::new();
    for (ix, mun) in world.municipalities.iter().enumerate() {
        let dist = match proxy {
            None => bucketize(&world.household_incomes[ix], lines, mun.sector)?,
            Some(map) => {
                let rescaled: Vec<f64> = world.labor_incomes[ix]
                    .iter()
                    .map(|l| map.intercept + map.slope * l)
                    .collect();
                bucketize(&rescaled, lines, mun.sector)?
            }
        };
        out.insert(mun.id, dist);
    }
    Ok(out)
}

/// The benchmark the rest of the pipeline treats as authoritative: true
/// total incomes where the survey reaches, the labor proxy elsewhere.
pub fn benchmark_mixed(
    world: &World,
    lines: &PovertyLines,
) -> Result<BTreeMap<MunicipalityId, BucketDistribution>, SurveyError> {
    let total = benchmark_municipalities(world, lines, IncomeSource::TotalIncome)?;
    let proxy = benchmark_municipalities(world, lines, IncomeSource::LaborProxy)?;
    let mut out = BTreeMap::new();
    for mun in &world.municipalities {
        let src = if mun.in_survey { &total } else { &proxy };
        out.insert(mun.id, src[&mun.id]);
    }
    Ok(out)
}

/// One exported benchmark row.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRow {
    pub municipality_id: MunicipalityId,
    pub sector: Sector,
    pub in_survey: bool,
    pub distribution: BucketDistribution,
}

pub fn write_benchmarks_csv(
    path: &Path,
    world: &World,
    benchmarks: &BTreeMap<MunicipalityId, BucketDistribution>,
) -> Result<(), SurveyError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "municipality_id,sector,in_survey,p_below_min,p_mid,p_above,min_rate,wellbeing_rate"
    )?;
    for mun in &world.municipalities {
        let dist = benchmarks
            .get(&mun.id)
            .ok_or(SurveyError::UnknownMunicipality(mun.id))?;
        let (min_rate, wb_rate) = poverty_rates(dist);
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            mun.id,
            mun.sector,
            mun.in_survey,
            dist.p_below_min,
            dist.p_mid,
            dist.p_above,
            min_rate,
            wb_rate
        )?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_benchmarks_csv(path: &Path) -> Result<Vec<BenchmarkRow>, SurveyError> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (ix, line) in text.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(SurveyError::Csv {
                line: ix + 1,
                message: format!("expected 8 fields, got {}", fields.len()),
            });
        }
        let parse_f = |s: &str| -> Result<f64, SurveyError> {
            s.parse().map_err(|e| SurveyError::Csv {
                line: ix + 1,
                message: format!("bad float {s:?}: {e}"),
            })
        };
        let id: u32 = fields[0].parse().map_err(|e| SurveyError::Csv {
            line: ix + 1,
            message: format!("bad municipality id {:?}: {e}", fields[0]),
        })?;
        let sector = match fields[1] {
            "urban" => Sector::Urban,
            "rural" => Sector::Rural,
            other => {
                return Err(SurveyError::Csv {
                    line: ix + 1,
                    message: format!("bad sector {other:?}"),
                })
            }
        };
        let in_survey = match fields[2] {
            "true" => true,
            "false" => false,
            other => {
                return Err(SurveyError::Csv {
                    line: ix + 1,
                    message: format!("bad in_survey flag {other:?}"),
                })
            }
        };
        let distribution = BucketDistribution::new(
            parse_f(fields[3])?,
            parse_f(fields[4])?,
            parse_f(fields[5])?,
        )?;
        rows.push(BenchmarkRow {
            municipality_id: MunicipalityId(id),
            sector,
            in_survey,
            distribution,
        });
    }
    Ok(rows)
}
