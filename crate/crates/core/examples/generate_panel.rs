//! Generates the bundled synthetic stand-in panel `data/hiv_panel.csv`.
//!
//! Countries get latent development, HIV-burden and size scores (seeded from
//! rough public profiles, then perturbed). Every 2016 column is a monotone
//! map of a noisy latent score onto published summary statistics: min,
//! median and max are hit exactly and two shape exponents are fitted to the
//! mean and standard deviation. 2015 and 2017 are perturbations of 2016.
//!
//! Usage: `cargo run -p cgct-core --example generate_panel -- [out.csv]`

use cgct::data::{write_panel, CountryRecord, Dataset, NUM_COVARIATES};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const SEED: u64 = 20_160_105;

/// (iso3, population millions, GDP per capita PPP thousands, HIV prevalence %).
const COUNTRIES: [(&str, f64, f64, f64); 105] = [
    ("AFG", 35.0, 2.0, 0.1), ("AGO", 29.0, 7.0, 2.0), ("ALB", 2.9, 12.0, 0.1), ("ARG", 44.0, 20.0, 0.4),
    ("ARM", 2.9, 9.0, 0.2), ("AZE", 9.8, 17.0, 0.1), ("BDI", 10.5, 0.8, 1.1), ("BEN", 11.0, 2.2, 1.0),
    ("BFA", 18.6, 1.8, 0.8), ("BGD", 163.0, 3.9, 0.1), ("BLR", 9.5, 18.0, 0.4),
    ("BLZ", 0.37, 8.0, 1.9), ("BOL", 11.0, 7.0, 0.3), ("BRA", 207.0, 15.0, 0.5), ("BTN", 0.8, 9.0, 0.1),
    ("BWA", 2.2, 16.0, 21.0), ("CAF", 4.6, 0.7, 4.0), ("CHN", 1338.0, 15.0, 0.1), ("CIV", 23.7, 3.6, 2.7),
    ("CMR", 23.4, 3.4, 3.8), ("COD", 79.0, 0.8, 0.8), ("COG", 5.1, 5.5, 3.1), ("COL", 48.0, 14.0, 0.4),
    ("CPV", 0.54, 6.5, 0.6), ("CRI", 4.9, 16.0, 0.4), ("CUB", 11.4, 12.0, 0.4), ("DJI", 0.94, 3.3, 1.3),
    ("DOM", 10.6, 15.0, 1.0), ("DZA", 40.5, 14.0, 0.1), ("ECU", 16.4, 11.0, 0.3), ("EGY", 95.0, 11.0, 0.1),
    ("ERI", 3.3, 1.4, 0.7), ("ETH", 102.0, 1.8, 1.0), ("FJI", 0.9, 9.5, 0.1), ("GAB", 2.0, 16.0, 3.8),
    ("GEO", 3.7, 10.0, 0.4), ("GHA", 28.2, 4.3, 1.6), ("GIN", 12.4, 2.0, 1.5), ("GMB", 2.0, 1.6, 1.8),
    ("GNB", 1.8, 1.6, 3.4), ("GNQ", 1.2, 25.0, 6.5), ("GTM", 16.6, 7.8, 0.4), ("GUY", 0.77, 7.5, 1.6),
    ("HND", 9.1, 4.6, 0.4), ("HTI", 10.8, 1.8, 2.0), ("IDN", 261.0, 11.0, 0.4), ("IND", 1324.0, 6.5, 0.2),
    ("IRN", 80.0, 19.0, 0.1), ("JAM", 2.9, 8.7, 1.8), ("JOR", 9.5, 9.0, 0.1), ("KAZ", 17.8, 24.0, 0.2),
    ("KEN", 48.5, 3.1, 5.0), ("KGZ", 6.1, 3.5, 0.2), ("KHM", 15.8, 3.7, 0.6), ("LAO", 6.8, 6.4, 0.3),
    ("LBN", 6.0, 14.0, 0.1), ("LBR", 4.6, 1.2, 1.5), ("LKA", 21.2, 12.0, 0.1), ("LSO", 2.2, 2.9, 24.0),
    ("MAR", 35.3, 7.7, 0.1), ("MDA", 3.6, 5.5, 0.6), ("MDG", 24.9, 1.5, 0.3), ("MEX", 127.5, 18.0, 0.3),
    ("MLI", 18.0, 2.1, 1.2), ("MMR", 52.9, 5.8, 0.8),
    ("MNG", 3.0, 12.0, 0.1), ("MOZ", 28.8, 1.2, 12.5), ("MRT", 4.3, 3.8, 0.3), ("MUS", 1.26, 21.0, 1.3),
    ("MWI", 17.2, 1.1, 9.6), ("MYS", 31.2, 27.0, 0.4), ("NAM", 2.5, 10.0, 12.0), ("NER", 20.7, 0.9, 0.3),
    ("NGA", 186.0, 5.9, 2.8), ("NIC", 6.1, 5.4, 0.2), ("NPL", 29.0, 2.5, 0.2), ("PAK", 193.0, 5.0, 0.1),
    ("PAN", 4.0, 23.0, 1.0), ("PER", 31.8, 12.5, 0.3), ("PHL", 103.0, 7.5, 0.1), ("PNG", 8.1, 3.8, 0.9),
    ("PRY", 6.7, 12.0, 0.4), ("RWA", 11.9, 2.0, 2.8), ("SDN", 39.6, 4.3, 0.2), ("SEN", 15.4, 3.3, 0.4),
    ("SLE", 7.4, 1.5, 1.5), ("SLV", 6.3, 8.0, 0.6), ("SSD", 10.9, 1.5, 2.5),
    ("SWZ", 1.3, 8.0, 27.0), ("TCD", 14.5, 1.9, 1.3), ("TGO", 7.6, 1.6, 2.1), ("THA", 68.9, 16.5, 1.1),
    ("TJK", 8.7, 3.0, 0.3), ("TLS", 1.3, 4.0, 0.2), ("TUN", 11.4, 11.0, 0.1), ("TUR", 79.5, 26.0, 0.1),
    ("TZA", 55.6, 2.7, 4.7), ("UGA", 41.5, 1.8, 5.9), ("UKR", 45.0, 8.0, 0.9), ("UZB", 31.8, 6.5, 0.2),
    ("VNM", 94.6, 6.2, 0.3), ("YEM", 27.6, 2.5, 0.1), ("ZAF", 56.0, 13.0, 18.9), ("ZMB", 16.6, 3.9, 11.5),
    ("ZWE", 16.2, 2.0, 13.5),
];

/// Target 2016 marginal: mean, sd, median, min, max, missing count.
struct Target {
    mean: f64,
    sd: f64,
    median: f64,
    min: f64,
    max: f64,
    missing: usize,
}

const fn t(mean: f64, sd: f64, median: f64, min: f64, max: f64, missing: usize) -> Target {
    Target { mean, sd, median, min, max, missing }
}

const OUTCOME: Target = t(3.26, 7.85, 2.94, -50.00, 17.30, 0);
const AID: Target = t(50.121, 112.858, 6.348, 0.003, 559.897, 0);

/// Covariates in model order, with loadings on (development, hiv, size).
const COVARIATES: [(Target, [f64; 3]); NUM_COVARIATES] = [
    (t(8.87, 6.79, 7.26, 0.77, 30.45, 0), [1.0, 0.0, 0.0]),
    (t(3.81, 3.53, 3.82, -5.07, 26.68, 2), [-0.2, 0.0, 0.1]),
    (t(3.29, 8.75, 0.89, -7.40, 68.89, 4), [0.2, 0.0, -0.3]),
    (t(7.75, 18.72, 4.38, -1.54, 187.85, 10), [-0.3, 0.0, 0.0]),
    (t(7.83, 6.23, 5.65, 0.14, 27.04, 6), [0.3, 0.5, 0.0]),
    (t(41.66, 135.75, 11.98, 0.38, 1338.68, 0), [0.0, 0.0, 1.0]),
    (t(3.25, 1.33, 2.85, 1.26, 7.00, 0), [-0.8, 0.1, 0.0]),
    (t(241.21, 259.08, 144.0, 2.0, 1150.0, 0), [-0.8, 0.3, 0.0]),
    (t(30.95, 20.36, 26.6, 2.7, 87.3, 0), [-0.85, 0.2, 0.0]),
    (t(68.50, 6.90, 69.51, 52.95, 79.91, 0), [0.8, -0.45, 0.0]),
    (t(1.04, 0.13, 1.03, 0.68, 1.45, 14), [0.3, 0.0, 0.0]),
    (t(13.91, 11.65, 9.10, 2.50, 58.70, 12), [-0.6, 0.0, 0.0]),
    (t(73.83, 29.83, 90.30, 4.20, 100.0, 2), [0.85, 0.0, 0.0]),
    (t(162.29, 158.96, 99.0, 5.2, 738.0, 0), [-0.4, 0.6, 0.0]),
];
const POPULATION_COLUMN: usize = 5;

/// Sorted values with exact min/median/max. Exponents shape each half and
/// `top` (in (0, 1]) sets the runner-up, so a lone extreme maximum is possible.
fn shaped(target: &Target, n: usize, gl: f64, gu: f64, top: f64) -> Vec<f64> {
    let m = (n - 1) / 2;
    let upper = n - 1 - m;
    let second = target.median + (target.max - target.median) * top;
    (0..n)
        .map(|k| {
            if k < m {
                let s = (m - k) as f64 / m as f64;
                target.median - (target.median - target.min) * s.powf(gl)
            } else if k == n - 1 {
                target.max
            } else {
                let s = (k - m) as f64 / (upper - 1).max(1) as f64;
                target.median + (second - target.median) * s.powf(gu)
            }
        })
        .collect()
}

fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    (mean, sd)
}

/// Pattern search over (log exponents, logit runner-up) minimizing the
/// relative moment error.
fn fit_shape(target: &Target, n: usize) -> (Vec<f64>, f64) {
    let sigmoid = |q: f64| 1.0 / (1.0 + (-q).exp());
    let build = |p: [f64; 3]| shaped(target, n, p[0].exp(), p[1].exp(), sigmoid(p[2]));
    let loss = |p: [f64; 3]| {
        let (mean, sd) = moments(&build(p));
        ((mean - target.mean) / target.mean.abs().max(0.1)).powi(2) + ((sd - target.sd) / target.sd).powi(2)
    };
    let (mut best, mut best_loss) = ([0.0; 3], f64::INFINITY);
    for i in -20..=40 {
        for j in -20..=40 {
            for q in [12.0, 2.0, 0.0, -1.0, -2.0, -3.0] {
                let p = [i as f64 * 0.1, j as f64 * 0.1, q];
                let l = loss(p);
                if l < best_loss {
                    best = p;
                    best_loss = l;
                }
            }
        }
    }
    let mut step = 0.05;
    while step > 1e-10 {
        let mut moved = false;
        for d in 0..3 {
            for sign in [1.0, -1.0] {
                let mut p = best;
                p[d] += sign * step;
                let l = loss(p);
                if l < best_loss {
                    best = p;
                    best_loss = l;
                    moved = true;
                }
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    let v = build(best);
    let (mean, sd) = moments(&v);
    eprintln!("target mean {} sd {} -> {mean:.4} {sd:.4}", target.mean, target.sd);
    (v, best_loss.sqrt())
}

/// Assigns sorted target values to units by the rank of their scores.
fn rank_map(scores: &[f64], sorted: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut out = vec![0.0; scores.len()];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = sorted[rank];
    }
    out
}

fn standardize(v: &[f64]) -> Vec<f64> {
    let (mean, sd) = moments(v);
    v.iter().map(|x| (x - mean) / sd).collect()
}

fn main() {
    let out = std::env::args().nth(1).unwrap_or_else(|| "data/hiv_panel.csv".into());
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let n = COUNTRIES.len();

    let dev = standardize(&COUNTRIES.iter().map(|c| c.2.ln() + 0.3 * normal.sample(&mut rng)).collect::<Vec<_>>());
    let hiv = standardize(&COUNTRIES.iter().map(|c| c.3.ln() + 0.3 * normal.sample(&mut rng)).collect::<Vec<_>>());
    let size = standardize(&COUNTRIES.iter().map(|c| c.1.ln() + 0.15 * normal.sample(&mut rng)).collect::<Vec<_>>());
    let factors: Vec<[f64; 3]> = (0..n).map(|i| [dev[i], hiv[i], size[i]]).collect();

    let mut worst = 0.0f64;
    let mut covs: Vec<Vec<Option<f64>>> = vec![vec![None; NUM_COVARIATES]; n];
    for (j, (target, load)) in COVARIATES.iter().enumerate() {
        let noise = if j == POPULATION_COLUMN { 0.05 } else { 0.45 };
        let scores: Vec<f64> = factors
            .iter()
            .map(|f| f.iter().zip(load).map(|(a, b)| a * b).sum::<f64>() + noise * normal.sample(&mut rng))
            .collect();
        let mut missing: Vec<usize> = (0..n).collect();
        missing.shuffle(&mut rng);
        missing.truncate(target.missing);
        let observed: Vec<usize> = (0..n).filter(|i| !missing.contains(i)).collect();
        let (sorted, err) = fit_shape(target, observed.len());
        worst = worst.max(err);
        let obs_scores: Vec<f64> = observed.iter().map(|&i| scores[i]).collect();
        for (&i, v) in observed.iter().zip(rank_map(&obs_scores, &sorted)) {
            covs[i][j] = Some(v);
        }
    }

    let aid_score: Vec<f64> = factors
        .iter()
        .map(|f| -0.45 * f[0] + 0.8 * f[1] + 0.55 * f[2] + 0.5 * normal.sample(&mut rng))
        .collect();
    let (aid_sorted, err) = fit_shape(&AID, n);
    worst = worst.max(err);
    let aid = rank_map(&aid_score, &aid_sorted);

    // Aid lowers new infections more where the epidemic is larger and in
    // more developed countries, with diminishing returns.
    let aid_rank = standardize(&aid_score);
    let outcome_score: Vec<f64> = (0..n)
        .map(|i| {
            let f = factors[i];
            let effect = 0.45 * (1.0 + 0.4 * f[1] + 0.3 * f[0]) * aid_rank[i].tanh();
            effect + 0.3 * f[0] - 0.15 * f[1] + 0.6 * normal.sample(&mut rng)
        })
        .collect();
    let (y_sorted, err) = fit_shape(&OUTCOME, n);
    worst = worst.max(err);
    let outcome = rank_map(&outcome_score, &y_sorted);
    eprintln!("largest relative moment error: {worst:.2e}");

    // New infections per 1,000, scaled so 2016 totals are about 1.5 million.
    let raw_rate: Vec<f64> = (0..n).map(|i| COUNTRIES[i].3.max(0.05) * (0.35 + 0.1 * normal.sample(&mut rng)).max(0.1)).collect();
    let pop = |i: usize| covs[i][POPULATION_COLUMN].unwrap() * 1e6;
    let total: f64 = (0..n).map(|i| raw_rate[i] / 1000.0 * pop(i)).sum();
    let rate_2016: Vec<f64> = raw_rate.iter().map(|r| r * 1.5e6 / total).collect();

    let mut records = Vec::new();
    for i in 0..n {
        let y16 = outcome[i] / 100.0;
        let r15 = rate_2016[i] / (1.0 - y16);
        let y17 = (y16 + 0.02 * normal.sample(&mut rng)).min(0.5);
        let a17 = (aid[i] * (0.25 * normal.sample(&mut rng)).exp()).max(0.001);
        let a15 = (aid[i] * (0.25 * normal.sample(&mut rng)).exp()).max(0.001);
        let y15 = (y16 + 0.02 * normal.sample(&mut rng)).min(0.5);
        let per_year = [(2015, y15, a15, r15, -1.0), (2016, y16, aid[i], rate_2016[i], 0.0), (2017, y17, a17, rate_2016[i] * (1.0 - y17), 1.0)];
        for (year, y, a, rate, step) in per_year {
            let covariates: Vec<Option<f64>> = covs[i]
                .iter()
                .enumerate()
                .map(|(j, c)| {
                    c.map(|v| {
                        if year == 2016 {
                            return v;
                        }
                        let target = &COVARIATES[j].0;
                        let drift = match j {
                            POPULATION_COLUMN => v * 0.02 * step,
                            _ => 0.03 * target.sd * normal.sample(&mut rng),
                        };
                        let mut w = v + drift;
                        if target.min >= 0.0 {
                            w = w.max(target.min * 0.9);
                        }
                        if j == 12 {
                            w = w.min(100.0);
                        }
                        w
                    })
                })
                .collect();
            let p = covariates[POPULATION_COLUMN].unwrap_or(pop(i) / 1e6) * 1e6;
            records.push(CountryRecord {
                country_id: COUNTRIES[i].0.to_string(),
                year,
                outcome_y: y,
                treatment_a: a,
                covariates,
                infection_rate_r: rate / 1000.0,
                population_p: p,
            });
        }
    }
    let d = Dataset::new(records).expect("valid panel");
    let file = std::fs::File::create(&out).expect("create output");
    write_panel(&d, file).expect("write panel");
    eprintln!("wrote {} rows to {out}", d.n());
}
