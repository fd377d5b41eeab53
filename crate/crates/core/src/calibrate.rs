//! Nelder–Mead calibration of the road-type speed table and junction delay
//! against a corpus of reference routes.

use std::io::{Read, Write};

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{path_coincidence, ReferenceJourney};
use crate::geo::LatLon;
use crate::ingest::VehicleClass;
use crate::network::{LinkId, RoadNetwork, RoadType};
use crate::routing::{shortest_route, RouteRequest, SpeedSet};
use crate::speeds::{Metric, RoadSpeedTable, SpeedModel};

/// Maximum move of a speed away from its starting value, mph.
pub const SPEED_PERTURBATION_MPH: f64 = 20.0;
pub const MIN_SPEED_MPH: f64 = 0.5;
pub const MAX_JUNCTION_DELAY_S: f64 = 30.0;

/// Junction delay followed by the nine road-type speeds in table order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedVector(pub [f64; 10]);

impl SpeedVector {
    pub fn from_table(t: &RoadSpeedTable) -> Self {
        let mut v = [0.0; 10];
        v[0] = t.junction_delay_s;
        v[1..].copy_from_slice(&t.speeds_mph);
        Self(v)
    }

    pub fn to_table(&self) -> RoadSpeedTable {
        let mut speeds_mph = [0.0; 9];
        speeds_mph.copy_from_slice(&self.0[1..]);
        RoadSpeedTable {
            speeds_mph,
            junction_delay_s: self.0[0],
        }
    }

    /// Box around a starting vector.
    pub fn bounds(&self) -> ([f64; 10], [f64; 10]) {
        let mut lo = [0.0; 10];
        let mut hi = [MAX_JUNCTION_DELAY_S; 10];
        for i in 1..10 {
            lo[i] = (self.0[i] - SPEED_PERTURBATION_MPH).max(MIN_SPEED_MPH);
            hi[i] = self.0[i] + SPEED_PERTURBATION_MPH;
        }
        (lo, hi)
    }

    pub fn labels() -> [&'static str; 10] {
        let mut out = ["junction_delay_s"; 10];
        for t in RoadType::ALL {
            out[1 + t.index()] = t.name();
        }
        out
    }
}

/// A route the objective should reproduce.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub journey_id: String,
    pub origin: LatLon,
    pub destination: LatLon,
    pub vehicle: VehicleClass,
    pub departure: DateTime<Utc>,
    pub actual: Vec<LinkId>,
}

impl From<&ReferenceJourney> for CorpusEntry {
    fn from(r: &ReferenceJourney) -> Self {
        Self {
            journey_id: r.journey_id.clone(),
            origin: r.origin,
            destination: r.destination,
            vehicle: r.vehicle,
            departure: r.departure,
            actual: r.links.clone(),
        }
    }
}

/// Reads a corpus from reference-journey CSV; rows without a link path
/// are skipped.
pub fn read_corpus<R: Read>(input: R) -> Result<Vec<CorpusEntry>, crate::eval::EvalError> {
    Ok(crate::eval::read_references(input)?
        .iter()
        .filter(|r| !r.links.is_empty())
        .map(CorpusEntry::from)
        .collect())
}

/// Whole-route coincidence of one entry under `table`; failures score 0.
pub fn entry_score(net: &RoadNetwork, model: &SpeedModel, entry: &CorpusEntry, table: &RoadSpeedTable) -> f64 {
    let request = RouteRequest {
        origin: entry.origin,
        destination: entry.destination,
        vehicle: entry.vehicle,
        departure: entry.departure,
        metric: Metric::II,
        speed_set: Some(SpeedSet::Custom(*table)),
    };
    match shortest_route(net, model, &request) {
        Ok(p) => path_coincidence(net, &entry.actual, &p.links).map(|r| r.whole).unwrap_or(0.0),
        Err(_) => 0.0,
    }
}

/// Mean whole-route path coincidence of Metric II routes under `v`.
pub fn objective(net: &RoadNetwork, corpus: &[CorpusEntry], v: &SpeedVector) -> f64 {
    if corpus.is_empty() {
        return 0.0;
    }
    let model = SpeedModel::default();
    let table = v.to_table();
    let scores: Vec<f64> = corpus.par_iter().map(|e| entry_score(net, &model, e, &table)).collect();
    scores.iter().sum::<f64>() / corpus.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NelderMeadOptions {
    pub max_iterations: usize,
    /// Spread of objective values across the simplex.
    pub ftol: f64,
    /// Largest coordinate distance from the best vertex.
    pub xtol: f64,
    pub initial_step: f64,
    pub reflection: f64,
    pub expansion: f64,
    pub contraction: f64,
    pub shrink: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            ftol: 1e-3,
            xtol: 1e-3,
            initial_step: 1.0,
            reflection: 1.0,
            expansion: 2.0,
            contraction: 0.5,
            shrink: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Start,
    Reflect,
    Expand,
    ContractOutside,
    ContractInside,
    Shrink,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub step: Step,
    pub best_value: f64,
    pub best: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibrationError {
    #[error("objective is not finite at {0:?}")]
    NonFinite(Vec<f64>),
    #[error("bounds and start have mismatched dimensions")]
    Dimension,
    #[error("corpus is empty")]
    EmptyCorpus,
}

fn clip(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, l), h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(*l, *h);
    }
}

/// Box-constrained Nelder–Mead minimisation; proposals outside the box are
/// clipped onto it. Deterministic for a deterministic `f`.
pub fn minimize(
    f: impl Fn(&[f64]) -> f64,
    start: &[f64],
    lo: &[f64],
    hi: &[f64],
    opt: &NelderMeadOptions,
) -> Result<Minimum, CalibrationError> {
    let n = start.len();
    if lo.len() != n || hi.len() != n {
        return Err(CalibrationError::Dimension);
    }
    let mut evaluations = 0;
    let mut eval = |x: &[f64]| {
        evaluations += 1;
        let v = f(x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(CalibrationError::NonFinite(x.to_vec()))
        }
    };

    let mut x0 = start.to_vec();
    clip(&mut x0, lo, hi);
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let v0 = eval(&x0)?;
    simplex.push((x0.clone(), v0));
    for i in 0..n {
        let mut x = x0.clone();
        x[i] += opt.initial_step;
        if x[i] > hi[i] {
            x[i] = x0[i] - opt.initial_step;
        }
        clip(&mut x, lo, hi);
        let v = eval(&x)?;
        simplex.push((x, v));
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));

    let mut trace = vec![TraceRow {
        iteration: 0,
        step: Step::Start,
        best_value: simplex[0].1,
        best: simplex[0].0.clone(),
    }];
    let mut iterations = 0;
    let mut converged = false;
    let along = |c: &[f64], towards: &[f64], t: f64| -> Vec<f64> {
        let mut x: Vec<f64> = c.iter().zip(towards).map(|(c, w)| c + t * (w - c)).collect();
        clip(&mut x, lo, hi);
        x
    };

    while iterations < opt.max_iterations {
        let best = &simplex[0];
        let spread = simplex[n].1 - best.1;
        let diameter = simplex[1..]
            .iter()
            .flat_map(|(x, _)| x.iter().zip(&best.0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if spread <= opt.ftol && diameter <= opt.xtol {
            converged = true;
            break;
        }
        iterations += 1;

        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(x) {
                *c += v / n as f64;
            }
        }
        let worst = simplex[n].clone();
        let (f_best, f_second) = (simplex[0].1, simplex[n - 1].1);

        let xr = along(&centroid, &worst.0, -opt.reflection);
        let fr = eval(&xr)?;
        let step = if fr < f_best {
            let xe = along(&centroid, &xr, opt.expansion);
            let fe = eval(&xe)?;
            if fe < fr {
                simplex[n] = (xe, fe);
                Step::Expand
            } else {
                simplex[n] = (xr, fr);
                Step::Reflect
            }
        } else if fr < f_second {
            simplex[n] = (xr, fr);
            Step::Reflect
        } else {
            let (xc, fc, outside) = if fr < worst.1 {
                let xc = along(&centroid, &xr, opt.contraction);
                let fc = eval(&xc)?;
                (xc, fc, true)
            } else {
                let xc = along(&centroid, &worst.0, opt.contraction);
                let fc = eval(&xc)?;
                (xc, fc, false)
            };
            let accept = if outside { fc <= fr } else { fc < worst.1 };
            if accept {
                simplex[n] = (xc, fc);
                if outside {
                    Step::ContractOutside
                } else {
                    Step::ContractInside
                }
            } else {
                let x_best = simplex[0].0.clone();
                for vertex in simplex.iter_mut().skip(1) {
                    let x = along(&x_best, &vertex.0, opt.shrink);
                    let v = eval(&x)?;
                    *vertex = (x, v);
                }
                Step::Shrink
            }
        };
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        trace.push(TraceRow {
            iteration: iterations,
            step,
            best_value: simplex[0].1,
            best: simplex[0].0.clone(),
        });
    }
    let (x, value) = simplex.swap_remove(0);
    Ok(Minimum {
        x,
        value,
        iterations,
        evaluations,
        converged,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub labels: [&'static str; 10],
    pub initial: SpeedVector,
    pub r#final: SpeedVector,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub corpus_size: usize,
    /// Best objective (maximised) and vector after each iteration.
    pub trace: Vec<TraceRow>,
}

/// Maximises mean path coincidence over the corpus, starting from
/// `initial`.
pub fn nelder_mead(
    net: &RoadNetwork,
    corpus: &[CorpusEntry],
    initial: &RoadSpeedTable,
    options: &NelderMeadOptions,
) -> Result<CalibrationReport, CalibrationError> {
    if corpus.is_empty() {
        return Err(CalibrationError::EmptyCorpus);
    }
    let start = SpeedVector::from_table(initial);
    let (lo, hi) = start.bounds();
    let f = |x: &[f64]| {
        let mut v = [0.0; 10];
        v.copy_from_slice(x);
        -objective(net, corpus, &SpeedVector(v))
    };
    let initial_objective = -f(&start.0);
    let m = minimize(f, &start.0, &lo, &hi, options)?;
    let mut fin = [0.0; 10];
    fin.copy_from_slice(&m.x);
    Ok(CalibrationReport {
        labels: SpeedVector::labels(),
        initial: start,
        r#final: SpeedVector(fin),
        initial_objective,
        final_objective: -m.value,
        iterations: m.iterations,
        evaluations: m.evaluations,
        converged: m.converged,
        corpus_size: corpus.len(),
        trace: m
            .trace
            .into_iter()
            .map(|r| TraceRow {
                best_value: -r.best_value,
                ..r
            })
            .collect(),
    })
}

/// Iteration trace as CSV with full float precision.
pub fn write_trace_csv<W: Write>(report: &CalibrationReport, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["iteration", "step", "objective"];
    header.extend(SpeedVector::labels());
    w.write_record(&header)?;
    for r in &report.trace {
        let mut rec = vec![
            r.iteration.to_string(),
            serde_json::to_value(r.step).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            format!("{:?}", r.best_value),
        ];
        rec.extend(r.best.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_dimensional_parabola() {
        let m = minimize(|x| (x[0] - 3.0).powi(2), &[0.0], &[-10.0], &[10.0], &NelderMeadOptions::default()).unwrap();
        assert!((m.x[0] - 3.0).abs() < 1e-3, "{}", m.x[0]);
        assert!(m.converged);
    }

    #[test]
    fn constant_objective_returns_start() {
        let start = SpeedVector::from_table(&RoadSpeedTable::LAS);
        let (lo, hi) = start.bounds();
        let m = minimize(|_| 0.5, &start.0, &lo, &hi, &NelderMeadOptions::default()).unwrap();
        assert!(m.converged);
        assert_eq!(m.x, start.0.to_vec());
    }

    #[test]
    fn proposals_stay_in_box() {
        let lo = [0.0, 0.0];
        let hi = [1.0, 1.0];
        let seen = std::cell::RefCell::new(Vec::new());
        let m = minimize(
            |x| {
                seen.borrow_mut().push(x.to_vec());
                -(x[0] + x[1])
            },
            &[0.5, 0.5],
            &lo,
            &hi,
            &NelderMeadOptions {
                initial_step: 0.1,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(seen.borrow().iter().all(|x| x.iter().all(|v| (0.0..=1.0).contains(v))));
        assert!(m.value <= -1.99);
    }

    #[test]
    fn non_finite_aborts() {
        let err = minimize(|x| if x[0] > 0.5 { f64::NAN } else { x[0] }, &[0.0], &[0.0], &[2.0], &NelderMeadOptions::default()).unwrap_err();
        assert_eq!(err, CalibrationError::NonFinite(vec![1.0]));
    }

    #[test]
    fn vector_round_trip_and_bounds() {
        let v = SpeedVector::from_table(&RoadSpeedTable::NELDER_MEAD);
        assert_eq!(v.to_table(), RoadSpeedTable::NELDER_MEAD);
        let (lo, hi) = SpeedVector::from_table(&RoadSpeedTable::LAS).bounds();
        assert_eq!((lo[0], hi[0]), (0.0, 30.0));
        assert_eq!((lo[1], hi[1]), (15.0, 55.0));
        assert_eq!(lo[7], 0.5);
        assert_eq!(SpeedVector::labels()[2], "ARoad");
    }
}
