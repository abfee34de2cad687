//! Picks CG-CT defaults by validation factual MSE on the semi-synthetic
//! training year. Usage: tune_defaults [panel.csv] [samples] [seed]

use cgct::data::{impute_knn, load_panel, DEFAULT_KNN_K};
use cgct::evaluation::tune;
use cgct::pipeline::{HyperParams, Method, MethodConfig};
use cgct::semi_synthetic::SemiSynthetic;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let path = args.get(1).map_or("data/hiv_panel.csv", String::as_str);
    let samples: usize = args.get(2).map_or(Ok(48), |s| s.parse())?;
    let seed: u64 = args.get(3).map_or(Ok(0), |s| s.parse())?;
    let panel = impute_knn(&load_panel(path)?, DEFAULT_KNN_K)?;
    let setup = SemiSynthetic::standard(&panel.for_year(2016)?, &panel.for_year(2017)?)?;
    let base = Method::Cgct.default_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid: Vec<MethodConfig> = vec![base.clone()];
    let all = HyperParams::grid();
    grid.extend(all.choose_multiple(&mut rng, samples).map(|hp| MethodConfig { hp: *hp, ..base.clone() }));
    let result = tune(&grid, &setup.train, seed)?;
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| result.scores[a].total_cmp(&result.scores[b]));
    for &i in order.iter().take(10) {
        println!("{:.6e}  {:?}", result.scores[i], grid[i].hp);
    }
    println!("best: {:?}", result.best_config.hp);
    Ok(())
}
