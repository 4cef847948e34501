use eblmm::em::{fit_ml, EmSettings};
use eblmm::sim::{generate_dataset, ScenarioConfig};
use eblmm::eb::{optimize_hyperparameters, HyperSearchSpec};
use std::time::Instant;

fn main() {
    let config = ScenarioConfig::<f64>::re_regularization_default(42);
    let (design, truth, _) = generate_dataset(&config, 0).unwrap();
    println!("n={} p={} sigma0^2={}", design.n(), design.p(), truth.sigma2);

    let t = Instant::now();
    let ml = fit_ml(&design, &EmSettings::default()).unwrap();
    println!("ML fit: {:?} iters={} conv={} lp={}", t.elapsed(), ml.iterations, ml.converged, ml.final_log_posterior());

    for multistart in [1usize, 2] {
        let t = Instant::now();
        let mut spec = HyperSearchSpec::<f64>::scalar_identity(2);
        spec.multistart = multistart;
        spec.max_outer_iterations = 60;
        let (prior, fit) = optimize_hyperparameters(&design, &spec, &EmSettings::default()).unwrap();
        println!(
            "EB multistart={}: {:?}  b1={:.4} b2={:.4} a={:.4} logML={:.4} conv={}",
            multistart,
            t.elapsed(),
            prior.effects[0].strength,
            prior.effects[1].strength,
            prior.effects[0].mode[(0, 0)],
            fit.marginal_log_likelihood.unwrap(),
            fit.converged
        );
    }
}
