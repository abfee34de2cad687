//! sqrt-MISE of GPS and the four CG-CT ablation rows on the bundled panel.
//! Usage: compare_methods [panel.csv] [runs]

use std::time::Instant;

use cgct::data::{impute_knn, load_panel, DEFAULT_KNN_K};
use cgct::evaluation::repeat_runs;
use cgct::pipeline::{AblationFlags, Method, MethodConfig};
use cgct::semi_synthetic::SemiSynthetic;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let path = args.get(1).map_or("data/hiv_panel.csv", String::as_str);
    let runs: usize = args.get(2).map_or(Ok(10), |s| s.parse())?;
    let panel = impute_knn(&load_panel(path)?, DEFAULT_KNN_K)?;
    let setup = SemiSynthetic::standard(&panel.for_year(2016)?, &panel.for_year(2017)?)?;
    for method in [Method::Gps, Method::Lm, Method::Ann, Method::Drnet] {
        let t = Instant::now();
        let r = repeat_runs(&method.default_config(), &setup, runs, 0, method.as_str())?;
        println!("{:8} {:.4} ± {:.4}  ({:.1}s)", method.as_str(), r.mean, r.std, t.elapsed().as_secs_f64());
    }
    let cgct = Method::Cgct.default_config();
    for flags in AblationFlags::ALL {
        let t = Instant::now();
        let cfg = MethodConfig { flags, ..cgct.clone() };
        let r = repeat_runs(&cfg, &setup, runs, 0, flags.label())?;
        println!("{:8} {:.4} ± {:.4}  ({:.1}s)", flags.label(), r.mean, r.std, t.elapsed().as_secs_f64());
    }
    Ok(())
}
