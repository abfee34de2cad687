mod common;

use std::io::Write;
use std::path::PathBuf;

use cgct::data::*;
use cgct::CgctError;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn header() -> String {
    let mut cols = vec![COL_COUNTRY, COL_YEAR, COL_OUTCOME, COL_AID];
    cols.extend(COVARIATE_COLUMNS);
    cols.extend([COL_RATE, COL_POPULATION]);
    cols.join(",")
}

fn row(country: &str, year: i32, aid: f64, cov: &[Option<f64>]) -> String {
    let mut cells = vec![country.to_string(), year.to_string(), "0.03".into(), aid.to_string()];
    cells.extend(cov.iter().map(|c| c.map_or(String::new(), |v| v.to_string())));
    cells.extend(["2.5".to_string(), "1000000".to_string()]);
    cells.join(",")
}

fn full(v: f64) -> Vec<Option<f64>> {
    (0..NUM_COVARIATES).map(|j| Some(v + j as f64)).collect()
}

fn write_csv(lines: &[String]) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(f, "{}", header()).unwrap();
    for l in lines {
        writeln!(f, "{l}").unwrap();
    }
    f
}

fn bundled() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/hiv_panel.csv")
}

#[test]
fn well_formed_three_rows() {
    let f = write_csv(&[row("A", 2016, 1.0, &full(1.0)), row("B", 2016, 2.0, &full(2.0)), row("C", 2016, 3.0, &full(3.0))]);
    let d = load_dataset(f.path(), 2016).unwrap();
    assert_eq!(d.n(), 3);
    assert_eq!(d.feature_names.len(), NUM_COVARIATES);
    assert!((d.records[0].infection_rate_r - 0.0025).abs() < 1e-15);
}

#[test]
fn empty_cell_is_missing_marker() {
    let mut cov = full(1.0);
    cov[3] = None;
    let f = write_csv(&[row("A", 2016, 1.0, &cov), row("B", 2016, 2.0, &full(2.0))]);
    let d = load_dataset(f.path(), 2016).unwrap();
    assert_eq!(d.records[0].covariates[3], None);
    assert!(d.has_missing());
}

#[test]
fn load_errors() {
    let f = write_csv(&[row("A", 2016, 1.0, &full(1.0))]);
    assert!(matches!(load_dataset(f.path(), 2015), Err(CgctError::EmptyYear(2015))));

    let mut bad = tempfile::NamedTempFile::new().unwrap();
    writeln!(bad, "country,year,outcome").unwrap();
    writeln!(bad, "A,2016,0.1").unwrap();
    assert!(matches!(load_dataset(bad.path(), 2016), Err(CgctError::MissingColumn(_))));

    let text = row("A", 2016, 1.0, &full(1.0)).replacen(",1,", ",abc,", 1);
    let f = write_csv(&[text]);
    assert!(matches!(load_dataset(f.path(), 2016), Err(CgctError::NonNumeric { .. })));

    assert!(matches!(load_dataset("/nonexistent/panel.csv", 2016), Err(CgctError::Io { .. })));
}

#[test]
fn bundled_2016_has_105_countries() {
    let d = load_dataset(bundled(), 2016).unwrap();
    assert_eq!(d.n(), 105);
}

/// Reported (mean, sd, median, min, max) of the 2016 variables.
const TABLE: [(&str, [f64; 5]); 16] = [
    ("outcome_percent", [3.26, 7.85, 2.94, -50.00, 17.30]),
    ("aid", [50.121, 112.858, 6.348, 0.003, 559.897]),
    ("gdp_per_capita_ppp", [8.87, 6.79, 7.26, 0.77, 30.45]),
    ("gdp_growth", [3.81, 3.53, 3.82, -5.07, 26.68]),
    ("fdi", [3.29, 8.75, 0.89, -7.40, 68.89]),
    ("inflation", [7.75, 18.72, 4.38, -1.54, 187.85]),
    ("unemployment", [7.83, 6.23, 5.65, 0.14, 27.04]),
    ("population_millions", [41.66, 135.75, 11.98, 0.38, 1338.68]),
    ("fertility", [3.25, 1.33, 2.85, 1.26, 7.00]),
    ("maternal_mortality", [241.21, 259.08, 144.00, 2.00, 1150.00]),
    ("infant_mortality", [30.95, 20.36, 26.60, 2.70, 87.30]),
    ("life_expectancy", [68.50, 6.90, 69.51, 52.95, 79.91]),
    ("school_enrollment", [1.04, 0.13, 1.03, 0.68, 1.45]),
    ("undernourishment", [13.91, 11.65, 9.10, 2.50, 58.70]),
    ("electricity_access", [73.83, 29.83, 90.30, 4.20, 100.00]),
    ("tb_incidence", [162.29, 158.96, 99.00, 5.20, 738.00]),
];

#[test]
fn bundled_2016_column_statistics_match_reported_values() {
    let d = load_dataset(bundled(), 2016).unwrap();
    for (name, expected) in TABLE {
        let values: Vec<f64> = match name {
            "outcome_percent" => d.records.iter().map(|r| 100.0 * r.outcome_y).collect(),
            "aid" => d.records.iter().map(|r| r.treatment_a).collect(),
            _ => {
                let j = COVARIATE_COLUMNS.iter().position(|c| *c == name).unwrap();
                d.records.iter().filter_map(|r| r.covariates[j]).collect()
            }
        };
        let s = ColumnStats::of(&values).unwrap();
        for (got, want) in [s.mean, s.sd, s.median, s.min, s.max].iter().zip(expected) {
            assert!(
                (got - want).abs() <= 0.01 * want.abs(),
                "{name}: {got} vs {want}"
            );
        }
    }
}

#[test]
fn impute_without_missing_is_identity() {
    let f = write_csv(&[row("A", 2016, 1.0, &full(1.0)), row("B", 2016, 2.0, &full(5.0)), row("C", 2016, 3.0, &full(3.0))]);
    let d = load_dataset(f.path(), 2016).unwrap();
    assert_eq!(impute_knn(&d, 1).unwrap(), d);
}

fn scaled_rows(d: &Dataset) -> Vec<Vec<Option<f64>>> {
    let p = NUM_COVARIATES;
    let cols: Vec<(f64, f64)> = (0..p)
        .map(|j| {
            let v: Vec<f64> = d.records.iter().filter_map(|r| r.covariates[j]).collect();
            (v.iter().copied().fold(f64::INFINITY, f64::min), v.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        })
        .collect();
    d.records
        .iter()
        .map(|r| {
            r.covariates
                .iter()
                .zip(&cols)
                .map(|(v, &(lo, hi))| v.map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 }))
                .collect()
        })
        .collect()
}

#[test]
fn single_missing_value_takes_nearest_row() {
    let mut cov = full(1.1);
    cov[0] = None;
    let f = write_csv(&[row("A", 2016, 1.0, &cov), row("B", 2016, 2.0, &full(5.0)), row("C", 2016, 3.0, &full(1.0))]);
    let d = load_dataset(f.path(), 2016).unwrap();
    let out = impute_knn(&d, 1).unwrap();
    let scaled = scaled_rows(&d);
    let expect = common::knn_oracle(&scaled, 0, 0, 1);
    // The oracle works in scaled units; map back through the column range.
    let (lo, hi) = (1.0, 5.0);
    assert_eq!(out.records[0].covariates[0], Some(lo + expect * (hi - lo)));
    assert_eq!(out.records[0].covariates[0], Some(1.0));
}

#[test]
fn knn_matches_brute_force_on_random_panels() {
    let mut rng = common::rng(11);
    for trial in 0..20 {
        use rand::Rng;
        let n = 8;
        let mut rows: Vec<Vec<Option<f64>>> = (0..n)
            .map(|_| (0..NUM_COVARIATES).map(|_| Some(rng.random_range(-3.0..3.0))).collect())
            .collect();
        let target = trial % n;
        rows[target][2] = None;
        rows[target][7] = None;
        if trial % 3 == 0 {
            rows[(target + 1) % n][5] = None;
        }
        let lines: Vec<String> = rows
            .iter()
            .enumerate()
            .map(|(i, c)| row(&format!("C{i}"), 2016, 1.0, c))
            .collect();
        let f = write_csv(&lines);
        let d = load_dataset(f.path(), 2016).unwrap();
        let out = impute_knn(&d, 2).unwrap();
        let scaled = scaled_rows(&d);
        for col in [2, 7] {
            // Donor mean in raw units from the oracle's neighbor order.
            let raw: Vec<Vec<Option<f64>>> = d.records.iter().map(|r| r.covariates.clone()).collect();
            let mut dists: Vec<(f64, usize)> = (0..n)
                .filter(|&i| i != target && raw[i][col].is_some())
                .map(|i| {
                    let (mut s, mut c) = (0.0, 0);
                    for (a, b) in scaled[i].iter().zip(&scaled[target]) {
                        if let (Some(a), Some(b)) = (a, b) {
                            s += (a - b).powi(2);
                            c += 1;
                        }
                    }
                    ((s / c as f64).sqrt(), i)
                })
                .collect();
            dists.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            let expect = (raw[dists[0].1][col].unwrap() + raw[dists[1].1][col].unwrap()) / 2.0;
            let got = out.records[target].covariates[col].unwrap();
            assert!((got - expect).abs() < 1e-12, "trial {trial} col {col}: {got} vs {expect}");
        }
        assert!(!out.has_missing());
    }
}

#[test]
fn impute_errors() {
    let mut cov = full(1.0);
    cov[4] = None;
    let f = write_csv(&[row("A", 2016, 1.0, &cov), row("B", 2016, 2.0, &full(2.0))]);
    let d = load_dataset(f.path(), 2016).unwrap();
    assert!(impute_knn(&d, 2).is_err());
    let mut c1 = full(1.0);
    let mut c2 = full(2.0);
    let mut c3 = full(3.0);
    for c in [&mut c1, &mut c2, &mut c3] {
        c[6] = None;
    }
    let f = write_csv(&[row("A", 2016, 1.0, &c1), row("B", 2016, 2.0, &c2), row("C", 2016, 2.0, &c3)]);
    let d = load_dataset(f.path(), 2016).unwrap();
    assert!(matches!(impute_knn(&d, 1), Err(CgctError::InvalidData(_))));
}

#[test]
fn minmax_examples() {
    let s = MinMaxScaler::fit_matrix(&DMatrix::from_column_slice(3, 1, &[2.0, 4.0, 6.0])).unwrap();
    assert_eq!(s.transform_matrix(&DMatrix::from_column_slice(3, 1, &[2.0, 4.0, 6.0])).unwrap().as_slice(), &[0.0, 0.5, 1.0]);
    assert_eq!(s.inverse(&s.transform(&[4.0]).unwrap()).unwrap(), vec![4.0]);
    let c = MinMaxScaler::fit_matrix(&DMatrix::from_column_slice(3, 1, &[5.0, 5.0, 5.0])).unwrap();
    assert_eq!(c.transform(&[5.0]).unwrap(), vec![0.0]);
    assert!(MinMaxScaler::new().transform(&[1.0]).is_err());
    assert!(MinMaxScaler::fit_matrix(&DMatrix::from_column_slice(1, 1, &[1.0])).is_err());
}

#[test]
fn load_impute_scale_is_deterministic() {
    let run = || {
        let d = impute_knn(&load_dataset(bundled(), 2016).unwrap(), DEFAULT_KNN_K).unwrap();
        Scalers::fit(&d).unwrap().scale_covariates(&d).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn panel_round_trip() {
    let d = load_panel(bundled()).unwrap();
    let mut buf = Vec::new();
    write_panel(&d, &mut buf).unwrap();
    assert_eq!(read_panel(buf.as_slice()).unwrap(), d);
}

proptest! {
    #[test]
    fn imputed_panel_has_no_missing(seed in 0u64..1000, holes in 1usize..6) {
        use rand::Rng;
        let mut rng = common::rng(seed);
        let n = 7;
        let mut rows: Vec<Vec<Option<f64>>> = (0..n)
            .map(|_| (0..NUM_COVARIATES).map(|_| Some(rng.random_range(0.0..10.0))).collect())
            .collect();
        for _ in 0..holes {
            let (i, j) = (rng.random_range(0..n), rng.random_range(0..NUM_COVARIATES));
            rows[i][j] = None;
        }
        let lines: Vec<String> = rows.iter().enumerate().map(|(i, c)| row(&format!("C{i}"), 2016, 1.0, c)).collect();
        let f = write_csv(&lines);
        let d = load_dataset(f.path(), 2016).unwrap();
        let out = impute_knn(&d, 2).unwrap();
        prop_assert!(!out.has_missing());
        for (a, b) in d.records.iter().zip(&out.records) {
            for (x, y) in a.covariates.iter().zip(&b.covariates) {
                if let Some(x) = x {
                    prop_assert_eq!(Some(*x), *y);
                }
            }
        }
    }

    #[test]
    fn fitted_data_maps_into_unit_box(values in proptest::collection::vec(-1e3f64..1e3, 2..30)) {
        let m = DMatrix::from_column_slice(values.len(), 1, &values);
        let s = MinMaxScaler::fit_matrix(&m).unwrap();
        for v in s.transform_matrix(&m).unwrap().iter() {
            prop_assert!((0.0..=1.0).contains(v));
        }
    }
}
